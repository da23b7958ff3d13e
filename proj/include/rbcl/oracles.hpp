#pragma once

// Independent verification tools used by the test suite: brute-force AP/mAP
// and finite-difference gradients. Kept free of any ranking or
// differentiation code from the eval and losses modules so the two routes
// stay independent.

#include "rbcl/feature_set.hpp"

#include <algorithm>
#include <functional>

namespace rbcl {

/// Average precision of one query against a gallery, by full sort. Cosine
/// similarities are computed with plain loops here on purpose.
inline double brute_force_ap(const FeatureSet& query, Eigen::Index query_row,
                             const FeatureSet& gallery) {
    struct Entry {
        double sim;
        std::int64_t id;
        bool relevant;
    };
    double qn = 0.0;
    for (Eigen::Index d = 0; d < query.dim(); ++d)
        qn += query.features(query_row, d) * query.features(query_row, d);
    qn = std::sqrt(qn);

    std::vector<Entry> entries;
    entries.reserve(static_cast<std::size_t>(gallery.size()));
    for (Eigen::Index j = 0; j < gallery.size(); ++j) {
        double dot = 0.0, gn = 0.0;
        for (Eigen::Index d = 0; d < gallery.dim(); ++d) {
            dot += query.features(query_row, d) * gallery.features(j, d);
            gn += gallery.features(j, d) * gallery.features(j, d);
        }
        gn = std::sqrt(gn);
        entries.push_back({dot / (qn * gn), gallery.instance_ids[static_cast<std::size_t>(j)],
                           gallery.labels[static_cast<std::size_t>(j)] ==
                               query.labels[static_cast<std::size_t>(query_row)]});
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        if (a.sim != b.sim) return a.sim > b.sim;
        return a.id < b.id;
    });

    std::size_t hits = 0;
    double precision_sum = 0.0;
    for (std::size_t rank = 0; rank < entries.size(); ++rank) {
        if (!entries[rank].relevant) continue;
        ++hits;
        precision_sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
    if (hits == 0) throw NoRelevant("query " + std::to_string(query_row) + " has no positive");
    return precision_sum / static_cast<double>(hits);
}

/// Naive O(Q G log G) mean average precision.
inline double brute_force_map(const FeatureSet& query, const FeatureSet& gallery) {
    double ap_sum = 0.0;
    for (Eigen::Index i = 0; i < query.size(); ++i) ap_sum += brute_force_ap(query, i, gallery);
    return ap_sum / static_cast<double>(query.size());
}

/// Central differences (f(x + h e) - f(x - h e)) / 2h per coordinate.
inline Matrix finite_diff_grad(const std::function<double(const Matrix&)>& loss_fn,
                               const Matrix& at, double h = 1e-5) {
    if (!(h >= 1e-7 && h <= 1e-3)) throw Error("finite-difference step outside [1e-7, 1e-3]");
    Matrix grad(at.rows(), at.cols());
    Matrix probe = at;
    for (Eigen::Index r = 0; r < at.rows(); ++r) {
        for (Eigen::Index c = 0; c < at.cols(); ++c) {
            probe(r, c) = at(r, c) + h;
            double up = loss_fn(probe);
            probe(r, c) = at(r, c) - h;
            double down = loss_fn(probe);
            probe(r, c) = at(r, c);
            if (!std::isfinite(up) || !std::isfinite(down))
                throw NonFinite("loss function returned non-finite value at probe");
            grad(r, c) = (up - down) / (2.0 * h);
        }
    }
    return grad;
}

}  // namespace rbcl
