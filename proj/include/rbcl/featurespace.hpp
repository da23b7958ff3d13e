#pragma once

// Geometry over labeled embedding sets: similarity matrices, class centroids,
// class-neighbor adjacency and per-iteration gallery agent sampling.

#include "rbcl/feature_set.hpp"

#include <algorithm>
#include <map>

namespace rbcl {

struct SimilarityMatrix {
    Matrix values;  // Q x G, entries in [-1, 1]
};

/// Per-class nearest-class lists in a fixed feature space. `neighbors[i]`
/// holds the classes closest to `class_ids[i]` by Euclidean centroid
/// distance, nearest first, ties by ascending class id, self excluded.
struct NeighborIndex {
    std::vector<std::int64_t> class_ids;          // sorted ascending
    Matrix centroids;                             // C x D, row i for class_ids[i]
    std::vector<std::vector<std::int64_t>> neighbors;

    const std::vector<std::int64_t>& neighbors_of(std::int64_t class_id) const {
        auto it = std::lower_bound(class_ids.begin(), class_ids.end(), class_id);
        if (it == class_ids.end() || *it != class_id)
            throw MissingClass(class_id);
        return neighbors[static_cast<std::size_t>(it - class_ids.begin())];
    }
};

inline Vector row_norms_checked(const Matrix& m) {
    Vector norms(m.rows());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        norms[i] = m.row(i).norm();
        if (norms[i] <= 1e-12) throw ZeroNormRow(static_cast<std::size_t>(i));
    }
    return norms;
}

/// values[i][j] = <a_i, b_j> / (|a_i| |b_j|).
inline SimilarityMatrix cosine_similarity_matrix(const FeatureSet& a, const FeatureSet& b) {
    if (a.dim() != b.dim())
        throw ShapeMismatch("cosine similarity requires equal feature dims");
    Vector na = row_norms_checked(a.features);
    Vector nb = row_norms_checked(b.features);
    SimilarityMatrix s;
    s.values = (a.features * b.features.transpose()).array().colwise() / na.array();
    s.values = s.values.array().rowwise() / nb.transpose().array();
    return s;
}

/// One centroid per distinct label (arithmetic mean), class ids ascending.
/// Rows are accumulated in instance_id order so the result does not depend
/// on the storage order of the set.
inline std::pair<std::vector<std::int64_t>, Matrix> class_centroids(const FeatureSet& s) {
    validate(s);
    std::map<std::int64_t, std::vector<std::pair<std::int64_t, Eigen::Index>>> by_class;
    for (Eigen::Index i = 0; i < s.size(); ++i)
        by_class[s.labels[i]].push_back({s.instance_ids[i], i});

    std::vector<std::int64_t> class_ids;
    Matrix centroids(static_cast<Eigen::Index>(by_class.size()), s.dim());
    Eigen::Index c = 0;
    for (auto& [label, rows] : by_class) {
        std::sort(rows.begin(), rows.end());
        Vector sum = Vector::Zero(s.dim());
        for (auto& [id, row] : rows) sum += s.features.row(row).transpose();
        centroids.row(c) = sum.transpose() / static_cast<double>(rows.size());
        class_ids.push_back(label);
        ++c;
    }
    return {std::move(class_ids), std::move(centroids)};
}

/// K nearest classes per class by centroid distance; K is clamped to C-1.
inline NeighborIndex build_neighbor_index(const FeatureSet& s, std::size_t k) {
    NeighborIndex index;
    auto [ids, centroids] = class_centroids(s);
    index.class_ids = std::move(ids);
    index.centroids = std::move(centroids);

    const std::size_t c_count = index.class_ids.size();
    const std::size_t k_eff = std::min(k, c_count - 1);
    index.neighbors.resize(c_count);
    for (std::size_t c = 0; c < c_count; ++c) {
        std::vector<std::pair<double, std::int64_t>> dist;
        dist.reserve(c_count - 1);
        for (std::size_t o = 0; o < c_count; ++o) {
            if (o == c) continue;
            double d = (index.centroids.row(static_cast<Eigen::Index>(c)) -
                        index.centroids.row(static_cast<Eigen::Index>(o)))
                           .norm();
            dist.push_back({d, index.class_ids[o]});
        }
        std::sort(dist.begin(), dist.end());
        index.neighbors[c].reserve(k_eff);
        for (std::size_t i = 0; i < k_eff; ++i)
            index.neighbors[c].push_back(dist[i].second);
    }
    return index;
}

namespace detail {

inline std::map<std::int64_t, std::vector<Eigen::Index>> rows_by_class(const FeatureSet& s) {
    std::map<std::int64_t, std::vector<Eigen::Index>> m;
    for (Eigen::Index i = 0; i < s.size(); ++i) m[s.labels[i]].push_back(i);
    return m;
}

}  // namespace detail

/// One uniformly random agent row of `old` for each class in N_c u {c}.
/// Returned as row indices into `old`, in class order (c first, then the
/// stored neighbor order).
inline std::vector<Eigen::Index> sample_agents_for_class(
    std::int64_t class_id, const NeighborIndex& index,
    const std::map<std::int64_t, std::vector<Eigen::Index>>& old_rows, Rng& rng) {
    std::vector<Eigen::Index> agents;
    const auto& neigh = index.neighbors_of(class_id);
    agents.reserve(neigh.size() + 1);
    auto pick = [&](std::int64_t cls) {
        auto it = old_rows.find(cls);
        if (it == old_rows.end() || it->second.empty()) throw MissingClass(cls);
        agents.push_back(it->second[rng.uniform_index(it->second.size())]);
    };
    pick(class_id);
    for (auto cls : neigh) pick(cls);
    return agents;
}

/// Gallery for one training step: the union over batch classes of their
/// per-class agent sets, deduplicated by instance_id. Labels and ids are
/// taken from `old`.
inline FeatureSet sample_ncas(const std::vector<std::int64_t>& batch_classes,
                              const NeighborIndex& index, const FeatureSet& old, Rng& rng) {
    std::vector<std::int64_t> classes = batch_classes;
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());

    const auto old_rows = detail::rows_by_class(old);
    std::vector<Eigen::Index> rows;
    std::vector<std::int64_t> seen_ids;
    for (auto c : classes) {
        for (Eigen::Index row : sample_agents_for_class(c, index, old_rows, rng)) {
            std::int64_t id = old.instance_ids[static_cast<std::size_t>(row)];
            if (std::find(seen_ids.begin(), seen_ids.end(), id) == seen_ids.end()) {
                seen_ids.push_back(id);
                rows.push_back(row);
            }
        }
    }

    FeatureSet gallery;
    gallery.features.resize(static_cast<Eigen::Index>(rows.size()), old.dim());
    gallery.labels.reserve(rows.size());
    gallery.instance_ids.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        gallery.features.row(static_cast<Eigen::Index>(i)) = old.features.row(rows[i]);
        gallery.labels.push_back(old.labels[static_cast<std::size_t>(rows[i])]);
        gallery.instance_ids.push_back(old.instance_ids[static_cast<std::size_t>(rows[i])]);
    }
    gallery.source = old.source;
    return gallery;
}

}  // namespace rbcl
