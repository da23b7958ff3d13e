#pragma once

// Training losses with values and analytic gradients with respect to the
// query/new features: smoothed-mAP ranking loss (with optional gradient
// reactivation), batch-hard triplet, label-smoothed cross entropy, and the
// L2 / MMD / logit-distillation compatibility baselines.
//
// Gallery (old) features are constants everywhere: gradients flow only to
// the query side.

#include "rbcl/featurespace.hpp"
#include "rbcl/model.hpp"

#include <limits>
#include <optional>

namespace rbcl {

struct SigmoidParams {
    double tau = 0.01;  // temperature of the ranking sigmoid
};

enum class DgrScope : std::uint8_t {
    AllTerms,       // shift positive-positive and negative terms
    NegativesOnly,  // shift only anchor-negative terms
};

struct DgrParams {
    double alpha = 0.5;  // anneal of the compression sigmoid
    bool enabled = false;
    DgrScope scope = DgrScope::AllTerms;
};

/// Flat record of the similarity-difference terms seen by one smooth-AP
/// evaluation, raw and after reactivation (equal when disabled).
struct TripletTerms {
    std::vector<double> values;
    std::vector<double> shifted_values;
};

// Overflow-safe logistic.
inline double logistic(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}

/// 1 / (1 + exp(-x/tau)); saturates cleanly for large |x|/tau.
inline double sigmoid_tau(double x, const SigmoidParams& p) {
    if (!(p.tau > 0.0)) throw Error("sigmoid temperature must be > 0");
    return logistic(x / p.tau);
}

inline double sigmoid_tau_derivative(double x, const SigmoidParams& p) {
    double s = sigmoid_tau(x, p);
    return s * (1.0 - s) / p.tau;
}

/// Reactivation constant c for a similarity-difference term d. The shifted
/// value d + c equals logistic(d/alpha) - 0.5 and lies in (-0.5, 0.5). The
/// constant carries no derivative: backward passes treat it as part of the
/// forward value.
inline double dgr_constant(double d, const DgrParams& g) {
    if (!(g.alpha > 0.0)) throw Error("reactivation anneal must be > 0");
    return (logistic(d / g.alpha) - 0.5) - d;
}

struct SmoothApResult {
    double l_m = 0.0;
    Matrix grad_query;  // Q x D
    TripletTerms terms;
};

/// Smoothed mean-average-precision loss of `query` against a fixed
/// `gallery`, 1 - mean_i AP_i. Positives are gallery rows sharing the query
/// label; queries are not members of the gallery. When `g.enabled`, every
/// term is replaced in the forward pass by its reactivated value while the
/// backward pass keeps treating the shift as a constant.
///
/// `fixed_shift`, when given, overrides the reactivation constants with
/// caller-supplied values per term (in TripletTerms order). Verification
/// hooks use it to freeze the constants of a previous evaluation.
inline SmoothApResult smooth_ap_loss(const FeatureSet& query, const FeatureSet& gallery,
                                     const SigmoidParams& p, const DgrParams& g,
                                     const std::vector<double>* fixed_shift = nullptr) {
    if (query.dim() != gallery.dim())
        throw ShapeMismatch("smooth_ap_loss: query/gallery dims differ");
    const Eigen::Index q_count = query.size();
    const Eigen::Index g_count = gallery.size();

    Vector q_norms = row_norms_checked(query.features);
    Vector g_norms = row_norms_checked(gallery.features);
    Matrix q_unit = query.features.array().colwise() / q_norms.array();
    Matrix g_unit = gallery.features.array().colwise() / g_norms.array();
    Matrix sims = q_unit * g_unit.transpose();  // Q x G

    SmoothApResult result;
    result.grad_query = Matrix::Zero(q_count, query.dim());

    std::size_t term_idx = 0;
    auto shift_term = [&](double d, bool is_positive_pair) {
        double shifted = d;
        if (fixed_shift) {
            shifted = d + fixed_shift->at(term_idx);
        } else if (g.enabled &&
                   (g.scope == DgrScope::AllTerms || !is_positive_pair)) {
            shifted = d + dgr_constant(d, g);
        }
        result.terms.values.push_back(d);
        result.terms.shifted_values.push_back(shifted);
        ++term_idx;
        return shifted;
    };

    double ap_sum = 0.0;
    for (Eigen::Index i = 0; i < q_count; ++i) {
        std::vector<Eigen::Index> pos, neg;
        for (Eigen::Index j = 0; j < g_count; ++j)
            (gallery.labels[j] == query.labels[i] ? pos : neg).push_back(j);
        if (pos.empty()) throw NoPositive(static_cast<std::size_t>(i));

        // Pass 1: forward sums per main positive j, recording shifted terms.
        std::vector<double> pos_sums(pos.size()), neg_sums(pos.size());
        std::vector<std::vector<double>> shifted_pos(pos.size()), shifted_neg(pos.size());
        double ap_i = 0.0;
        for (std::size_t jj = 0; jj < pos.size(); ++jj) {
            const double s_j = sims(i, pos[jj]);
            double sp = 0.0, sn = 0.0;
            for (std::size_t pp = 0; pp < pos.size(); ++pp) {
                if (pp == jj) continue;
                double shifted = shift_term(sims(i, pos[pp]) - s_j, true);
                shifted_pos[jj].push_back(shifted);
                sp += sigmoid_tau(shifted, p);
            }
            for (std::size_t nn = 0; nn < neg.size(); ++nn) {
                double shifted = shift_term(sims(i, neg[nn]) - s_j, false);
                shifted_neg[jj].push_back(shifted);
                sn += sigmoid_tau(shifted, p);
            }
            pos_sums[jj] = sp;
            neg_sums[jj] = sn;
            ap_i += (1.0 + sp) / (1.0 + sp + sn);
        }
        ap_i /= static_cast<double>(pos.size());
        ap_sum += ap_i;

        // Pass 2: dAP_i/ds over gallery entries.
        Vector d_ap_ds = Vector::Zero(g_count);
        for (std::size_t jj = 0; jj < pos.size(); ++jj) {
            const double num = 1.0 + pos_sums[jj];
            const double den = num + neg_sums[jj];
            const double coef_pos = neg_sums[jj] / (den * den);
            const double coef_neg = -num / (den * den);
            std::size_t k = 0;
            for (std::size_t pp = 0; pp < pos.size(); ++pp) {
                if (pp == jj) continue;
                double w = sigmoid_tau_derivative(shifted_pos[jj][k++], p) * coef_pos;
                d_ap_ds[pos[pp]] += w;
                d_ap_ds[pos[jj]] -= w;
            }
            for (std::size_t nn = 0; nn < neg.size(); ++nn) {
                double w = sigmoid_tau_derivative(shifted_neg[jj][nn], p) * coef_neg;
                d_ap_ds[neg[nn]] += w;
                d_ap_ds[pos[jj]] -= w;
            }
        }
        d_ap_ds /= static_cast<double>(pos.size());

        // Chain through cosine similarity into the query row; l_m = 1 - mean AP.
        const double scale = -1.0 / static_cast<double>(q_count);
        Vector u = q_unit.row(i).transpose();
        Vector acc = Vector::Zero(query.dim());
        for (Eigen::Index j = 0; j < g_count; ++j) {
            if (d_ap_ds[j] == 0.0) continue;
            acc += d_ap_ds[j] * (g_unit.row(j).transpose() - sims(i, j) * u);
        }
        result.grad_query.row(i) = (scale / q_norms[i]) * acc.transpose();
    }

    result.l_m = 1.0 - ap_sum / static_cast<double>(q_count);
    return result;
}

struct LossValue {
    double value = 0.0;
    Matrix grad;
};

/// Batch-hard triplet loss with Euclidean distances: per anchor,
/// max(0, margin + hardest-positive - hardest-negative), averaged. Ties in
/// the hardest positive/negative are broken toward the lowest row index; the
/// subgradient is zero inside the hinge and at coincident points.
inline LossValue hard_triplet_loss(const FeatureSet& batch, double margin) {
    const Eigen::Index n = batch.size();
    if (n < 2) throw DegenerateBatch("triplet batch needs at least 2 rows");

    Matrix dist(n, n);
    for (Eigen::Index a = 0; a < n; ++a)
        for (Eigen::Index b = 0; b < n; ++b)
            dist(a, b) = (batch.features.row(a) - batch.features.row(b)).norm();

    LossValue out;
    out.grad = Matrix::Zero(n, batch.dim());
    double total = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (Eigen::Index a = 0; a < n; ++a) {
        Eigen::Index hardest_pos = -1, hardest_neg = -1;
        for (Eigen::Index b = 0; b < n; ++b) {
            if (b == a) continue;
            if (batch.labels[b] == batch.labels[a]) {
                if (hardest_pos < 0 || dist(a, b) > dist(a, hardest_pos)) hardest_pos = b;
            } else {
                if (hardest_neg < 0 || dist(a, b) < dist(a, hardest_neg)) hardest_neg = b;
            }
        }
        if (hardest_pos < 0)
            throw DegenerateBatch("anchor " + std::to_string(a) + " has no positive");
        if (hardest_neg < 0)
            throw DegenerateBatch("batch has a single class, no negatives");

        double hinge = margin + dist(a, hardest_pos) - dist(a, hardest_neg);
        if (hinge <= 0.0) continue;
        total += hinge;
        if (dist(a, hardest_pos) > 0.0) {
            Vector u = (batch.features.row(a) - batch.features.row(hardest_pos)).transpose() /
                       dist(a, hardest_pos);
            out.grad.row(a) += inv_n * u.transpose();
            out.grad.row(hardest_pos) -= inv_n * u.transpose();
        }
        if (dist(a, hardest_neg) > 0.0) {
            Vector u = (batch.features.row(a) - batch.features.row(hardest_neg)).transpose() /
                       dist(a, hardest_neg);
            out.grad.row(a) -= inv_n * u.transpose();
            out.grad.row(hardest_neg) += inv_n * u.transpose();
        }
    }
    out.value = total * inv_n;
    return out;
}

/// Label-smoothed cross entropy against softmax(logits), mean over rows.
/// Returns the gradient with respect to the logits.
inline LossValue id_loss(const Matrix& logits, const std::vector<std::int64_t>& labels,
                         double epsilon) {
    const Eigen::Index n = logits.rows();
    const Eigen::Index c = logits.cols();
    if (c < 2) throw DimensionMismatch("id_loss needs >= 2 classes");
    if (static_cast<Eigen::Index>(labels.size()) != n)
        throw ShapeMismatch("id_loss: labels length mismatch");
    if (epsilon < 0.0 || epsilon >= 1.0) throw Error("label smoothing must be in [0,1)");

    LossValue out;
    out.grad = Matrix::Zero(n, c);
    double total = 0.0;
    const double off_target = epsilon / static_cast<double>(c);
    for (Eigen::Index i = 0; i < n; ++i) {
        auto y = labels[i];
        if (y < 0 || y >= c)
            throw LabelOutOfRange("label " + std::to_string(y) + " outside [0," +
                                  std::to_string(c) + ")");
        double m = logits.row(i).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index k = 0; k < c; ++k) sum += std::exp(logits(i, k) - m);
        double lse = m + std::log(sum);
        for (Eigen::Index k = 0; k < c; ++k) {
            double log_p = logits(i, k) - lse;
            double q = off_target + (k == y ? 1.0 - epsilon : 0.0);
            total -= q * log_p;
            out.grad(i, k) = (std::exp(log_p) - q) / static_cast<double>(n);
        }
    }
    out.value = total / static_cast<double>(n);
    return out;
}

namespace detail {

// new row index -> old row index, matched by instance_id.
inline std::vector<Eigen::Index> align_by_instance(const FeatureSet& new_set,
                                                   const FeatureSet& old_set) {
    std::map<std::int64_t, Eigen::Index> old_by_id;
    for (Eigen::Index i = 0; i < old_set.size(); ++i) old_by_id[old_set.instance_ids[i]] = i;
    std::vector<Eigen::Index> rows;
    rows.reserve(static_cast<std::size_t>(new_set.size()));
    for (Eigen::Index i = 0; i < new_set.size(); ++i) {
        auto it = old_by_id.find(new_set.instance_ids[i]);
        if (it == old_by_id.end())
            throw InstanceMismatch("instance " + std::to_string(new_set.instance_ids[i]) +
                                   " missing from old feature set");
        rows.push_back(it->second);
    }
    return rows;
}

}  // namespace detail

/// Mean squared Euclidean distance between new features and the old features
/// of the same instances.
inline LossValue l2_compat_loss(const FeatureSet& new_set, const FeatureSet& old_set) {
    if (new_set.dim() != old_set.dim())
        throw ShapeMismatch("l2_compat_loss: feature dims differ");
    auto rows = detail::align_by_instance(new_set, old_set);
    LossValue out;
    out.grad = Matrix::Zero(new_set.size(), new_set.dim());
    double total = 0.0;
    const double inv_n = 1.0 / static_cast<double>(new_set.size());
    for (Eigen::Index i = 0; i < new_set.size(); ++i) {
        Vector diff = (new_set.features.row(i) - old_set.features.row(rows[i])).transpose();
        total += diff.squaredNorm();
        out.grad.row(i) = 2.0 * inv_n * diff.transpose();
    }
    out.value = total * inv_n;
    return out;
}

/// Median pairwise Euclidean distance of the pooled rows; 1.0 when the
/// median degenerates to zero.
inline double median_heuristic_bandwidth(const FeatureSet& a, const FeatureSet& b) {
    std::vector<double> dists;
    const Eigen::Index n = a.size(), m = b.size();
    Matrix pooled(n + m, a.dim());
    pooled.topRows(n) = a.features;
    pooled.bottomRows(m) = b.features;
    for (Eigen::Index i = 0; i < pooled.rows(); ++i)
        for (Eigen::Index j = i + 1; j < pooled.rows(); ++j)
            dists.push_back((pooled.row(i) - pooled.row(j)).norm());
    if (dists.empty()) return 1.0;
    std::sort(dists.begin(), dists.end());
    std::size_t mid = dists.size() / 2;
    double median = (dists.size() % 2 == 1) ? dists[mid] : 0.5 * (dists[mid - 1] + dists[mid]);
    return median > 0.0 ? median : 1.0;
}

/// Biased-estimator squared MMD with a Gaussian kernel
/// k(x,y) = exp(-|x-y|^2 / (2 sigma^2)). Without an explicit bandwidth the
/// median heuristic over the pooled batch is used and treated as a constant
/// of the forward pass.
inline LossValue mmd_loss(const FeatureSet& new_set, const FeatureSet& old_set,
                          std::optional<double> bandwidth = std::nullopt) {
    if (new_set.dim() != old_set.dim())
        throw ShapeMismatch("mmd_loss: feature dims differ");
    const Eigen::Index n = new_set.size(), m = old_set.size();
    if (n < 1 || m < 1) throw ShapeMismatch("mmd_loss: both sets must be non-empty");
    double sigma = bandwidth ? *bandwidth : median_heuristic_bandwidth(new_set, old_set);
    if (!(sigma > 0.0)) throw Error("mmd bandwidth must be > 0");
    const double inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    const double inv_sigma2 = 1.0 / (sigma * sigma);

    auto kernel = [&](const auto& x, const auto& y) {
        return std::exp(-(x - y).squaredNorm() * inv_two_sigma2);
    };

    LossValue out;
    out.grad = Matrix::Zero(n, new_set.dim());
    double k_nn = 0.0, k_oo = 0.0, k_no = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            k_nn += kernel(new_set.features.row(i), new_set.features.row(j));
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < m; ++j)
            k_oo += kernel(old_set.features.row(i), old_set.features.row(j));
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < m; ++j)
            k_no += kernel(new_set.features.row(i), old_set.features.row(j));

    const double nn = static_cast<double>(n) * static_cast<double>(n);
    const double mm = static_cast<double>(m) * static_cast<double>(m);
    const double nm = static_cast<double>(n) * static_cast<double>(m);
    out.value = k_nn / nn + k_oo / mm - 2.0 * k_no / nm;

    for (Eigen::Index i = 0; i < n; ++i) {
        Vector acc = Vector::Zero(new_set.dim());
        for (Eigen::Index j = 0; j < n; ++j) {
            Vector diff = (new_set.features.row(i) - new_set.features.row(j)).transpose();
            acc -= (2.0 / nn) * kernel(new_set.features.row(i), new_set.features.row(j)) *
                   inv_sigma2 * diff;
        }
        for (Eigen::Index j = 0; j < m; ++j) {
            Vector diff = (new_set.features.row(i) - old_set.features.row(j)).transpose();
            acc += (2.0 / nm) * kernel(new_set.features.row(i), old_set.features.row(j)) *
                   inv_sigma2 * diff;
        }
        out.grad.row(i) = acc.transpose();
    }
    return out;
}

namespace detail {

// Row-wise softmax via log-sum-exp; returns probabilities.
inline Matrix stable_softmax(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        double m = logits.row(i).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index k = 0; k < logits.cols(); ++k) sum += std::exp(logits(i, k) - m);
        double lse = m + std::log(sum);
        for (Eigen::Index k = 0; k < logits.cols(); ++k) p(i, k) = std::exp(logits(i, k) - lse);
    }
    return p;
}

}  // namespace detail

/// Logit distillation through a frozen old classifier: mean cross entropy
/// between softmax(head(old_i)) as fixed target and softmax(head(new_i)).
inline LossValue influence_loss(const FeatureSet& new_set, const FeatureSet& old_set,
                                const ClassifierHead& head) {
    if (head.num_classes() < 2)
        throw DimensionMismatch("influence_loss: degenerate classifier head");
    if (head.weight.cols() != new_set.dim() || new_set.dim() != old_set.dim())
        throw DimensionMismatch("influence_loss: classifier input dim mismatch");
    auto rows = detail::align_by_instance(new_set, old_set);

    const Eigen::Index n = new_set.size();
    Matrix old_aligned(n, old_set.dim());
    for (Eigen::Index i = 0; i < n; ++i) old_aligned.row(i) = old_set.features.row(rows[i]);

    Matrix target = detail::stable_softmax(
        (old_aligned * head.weight.transpose()).rowwise() + head.bias.transpose());
    Matrix new_logits = (new_set.features * head.weight.transpose()).rowwise() +
                        head.bias.transpose();

    LossValue out;
    double total = 0.0;
    Matrix pred(n, head.num_classes());
    for (Eigen::Index i = 0; i < n; ++i) {
        double m = new_logits.row(i).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index k = 0; k < head.num_classes(); ++k)
            sum += std::exp(new_logits(i, k) - m);
        double lse = m + std::log(sum);
        for (Eigen::Index k = 0; k < head.num_classes(); ++k) {
            double log_p = new_logits(i, k) - lse;
            total -= target(i, k) * log_p;
            pred(i, k) = std::exp(log_p);
        }
    }
    out.value = total / static_cast<double>(n);
    out.grad = ((pred - target) * head.weight) / static_cast<double>(n);
    return out;
}

}  // namespace rbcl
