#pragma once

// Synthetic identity datasets with controllable domain shift, the
// experiment-setting planner and PK-balanced batch sampling.
//
// Open-set protocol: a slice of the classes is reserved for test and their
// instances are split into query and gallery halves, so train and test label
// sets are always disjoint.

#include "rbcl/feature_set.hpp"
#include "rbcl/model.hpp"

#include <map>
#include <memory>
#include <optional>

namespace rbcl {

enum class Split : std::uint8_t { Train = 0, Query = 1, Gallery = 2 };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Query: return "query";
        default: return "gallery";
    }
}

struct ShiftSpec {
    std::uint64_t rotation_seed = 0;
    double translation_scale = 0.0;
    double spread_multiplier = 1.0;
};

struct SyntheticSpec {
    std::size_t num_classes = 2;         // >= 2
    std::size_t instances_per_class = 4; // >= 4
    Eigen::Index input_dim = 2;
    double cluster_spread = 0.1;  // within-class std
    double center_scale = 1.0;    // between-class std
    std::string domain = "domainA";
    std::optional<ShiftSpec> shift;
    double test_fraction = 0.5;  // share of classes held out for test
    std::uint64_t seed = 0;
};

inline void validate(const SyntheticSpec& spec) {
    if (spec.num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (spec.instances_per_class < 4) throw ConfigError("instances_per_class must be >= 4");
    if (spec.input_dim < 1) throw ConfigError("input_dim must be >= 1");
    if (!(spec.cluster_spread > 0.0) || !(spec.center_scale > 0.0))
        throw ConfigError("spreads must be positive");
    if (!(spec.cluster_spread < spec.center_scale))
        throw ConfigError("cluster_spread must be below center_scale");
    if (!(spec.test_fraction > 0.0) || !(spec.test_fraction < 1.0))
        throw ConfigError("test_fraction must be in (0,1)");
    if (spec.shift && !(spec.shift->spread_multiplier > 0.0))
        throw ConfigError("spread_multiplier must be positive");
}

struct Dataset {
    Matrix inputs;  // N x input_dim
    std::vector<std::int64_t> labels;
    std::vector<std::int64_t> instance_ids;
    std::vector<Split> splits;
    std::string domain;

    Eigen::Index size() const { return inputs.rows(); }
    Eigen::Index input_dim() const { return inputs.cols(); }
};

/// A row subset of a shared dataset. Holds shared ownership so plans and
/// views stay valid independently of scope.
struct DatasetView {
    std::shared_ptr<const Dataset> data;
    std::vector<Eigen::Index> rows;

    std::size_t size() const { return rows.size(); }

    Matrix inputs() const {
        Matrix m(static_cast<Eigen::Index>(rows.size()), data->input_dim());
        for (std::size_t i = 0; i < rows.size(); ++i)
            m.row(static_cast<Eigen::Index>(i)) = data->inputs.row(rows[i]);
        return m;
    }
    std::vector<std::int64_t> labels() const {
        std::vector<std::int64_t> out;
        out.reserve(rows.size());
        for (auto r : rows) out.push_back(data->labels[static_cast<std::size_t>(r)]);
        return out;
    }
    std::vector<std::int64_t> instance_ids() const {
        std::vector<std::int64_t> out;
        out.reserve(rows.size());
        for (auto r : rows) out.push_back(data->instance_ids[static_cast<std::size_t>(r)]);
        return out;
    }
    std::vector<std::int64_t> distinct_labels() const {
        auto l = labels();
        std::sort(l.begin(), l.end());
        l.erase(std::unique(l.begin(), l.end()), l.end());
        return l;
    }
};

inline DatasetView make_view(std::shared_ptr<const Dataset> data, Split split) {
    DatasetView v;
    v.data = std::move(data);
    for (Eigen::Index i = 0; i < v.data->size(); ++i)
        if (v.data->splits[static_cast<std::size_t>(i)] == split) v.rows.push_back(i);
    return v;
}

namespace detail {

// Random orthogonal matrix: QR of a Gaussian matrix with the R diagonal
// forced positive so the factorization is unique.
inline Matrix random_orthogonal(Eigen::Index dim, Rng& rng) {
    Matrix m(dim, dim);
    for (Eigen::Index r = 0; r < dim; ++r)
        for (Eigen::Index c = 0; c < dim; ++c) m(r, c) = rng.normal();
    Eigen::HouseholderQR<Matrix> qr(m);
    Matrix q = qr.householderQ() * Matrix::Identity(dim, dim);
    Matrix r_mat = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < dim; ++j)
        if (r_mat(j, j) < 0.0) q.col(j) = -q.col(j);
    return q;
}

}  // namespace detail

/// Gaussian class clusters; with a shift block the whole cloud is rotated,
/// translated and the within-class spread rescaled, producing a related but
/// shifted domain when the base seed is reused. The last
/// round(num_classes * test_fraction) classes are held out for test, each
/// split half query / half gallery.
inline Dataset generate_dataset(const SyntheticSpec& spec) {
    validate(spec);
    Rng rng(spec.seed);
    const auto c_count = spec.num_classes;
    const auto per_class = spec.instances_per_class;
    const Eigen::Index dim = spec.input_dim;

    Matrix centers(static_cast<Eigen::Index>(c_count), dim);
    for (Eigen::Index c = 0; c < centers.rows(); ++c)
        for (Eigen::Index d = 0; d < dim; ++d) centers(c, d) = spec.center_scale * rng.normal();

    const Eigen::Index n = static_cast<Eigen::Index>(c_count * per_class);
    Matrix noise(n, dim);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index d = 0; d < dim; ++d) noise(i, d) = spec.cluster_spread * rng.normal();

    Matrix rotation;
    Vector translation;
    double spread_mult = 1.0;
    if (spec.shift) {
        Rng shift_rng(spec.shift->rotation_seed);
        rotation = detail::random_orthogonal(dim, shift_rng);
        translation.resize(dim);
        for (Eigen::Index d = 0; d < dim; ++d)
            translation[d] = spec.shift->translation_scale * shift_rng.normal();
        spread_mult = spec.shift->spread_multiplier;
    }

    Dataset ds;
    ds.domain = spec.domain;
    ds.inputs.resize(n, dim);
    ds.labels.reserve(static_cast<std::size_t>(n));
    ds.instance_ids.reserve(static_cast<std::size_t>(n));
    ds.splits.reserve(static_cast<std::size_t>(n));

    auto n_test_classes = static_cast<std::size_t>(
        std::floor(static_cast<double>(c_count) * spec.test_fraction + 0.5));
    n_test_classes = std::min(std::max<std::size_t>(n_test_classes, 1), c_count - 1);
    const std::size_t first_test_class = c_count - n_test_classes;

    Eigen::Index row = 0;
    for (std::size_t c = 0; c < c_count; ++c) {
        const bool is_test = c >= first_test_class;
        for (std::size_t k = 0; k < per_class; ++k, ++row) {
            Vector x = centers.row(static_cast<Eigen::Index>(c)).transpose() +
                       spread_mult * noise.row(row).transpose();
            if (spec.shift) x = rotation * x + translation;
            ds.inputs.row(row) = x.transpose();
            ds.labels.push_back(static_cast<std::int64_t>(c));
            ds.instance_ids.push_back(row);
            if (!is_test)
                ds.splits.push_back(Split::Train);
            else
                ds.splits.push_back(k < per_class / 2 ? Split::Query : Split::Gallery);
        }
    }
    return ds;
}

/// Dataset export: FeatureSet CSV layout with an extra split column.
inline void write_dataset_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "instance_id,label,split";
    for (Eigen::Index d = 0; d < ds.input_dim(); ++d) out << ",f" << d;
    out << "\n";
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
        out << ds.instance_ids[static_cast<std::size_t>(i)] << ","
            << ds.labels[static_cast<std::size_t>(i)] << ","
            << split_name(ds.splits[static_cast<std::size_t>(i)]);
        for (Eigen::Index d = 0; d < ds.input_dim(); ++d)
            out << "," << format_double(ds.inputs(i, d));
        out << "\n";
    }
    if (!out) throw IoError("write failed: " + path);
    std::ofstream meta(path + ".meta", std::ios::binary);
    if (!meta) throw IoError("cannot open " + path + ".meta for writing");
    meta << "source=raw:" << ds.domain << "\n";
}

// ---------------------------------------------------------------------------
// Setting plans

enum class SettingName : std::uint8_t { IdS1, IdS2, CdS1, CdS2 };

inline SettingName parse_setting_name(const std::string& s) {
    if (s == "ID-S-1") return SettingName::IdS1;
    if (s == "ID-S-2") return SettingName::IdS2;
    if (s == "CD-S-1") return SettingName::CdS1;
    if (s == "CD-S-2") return SettingName::CdS2;
    throw UnsupportedSetting(s);
}

inline const char* setting_name_str(SettingName n) {
    switch (n) {
        case SettingName::IdS1: return "ID-S-1";
        case SettingName::IdS2: return "ID-S-2";
        case SettingName::CdS1: return "CD-S-1";
        default: return "CD-S-2";
    }
}

inline bool is_cross_domain(SettingName n) {
    return n == SettingName::CdS1 || n == SettingName::CdS2;
}

inline bool is_structure_variant(SettingName n) {
    return n == SettingName::IdS2 || n == SettingName::CdS2;
}

struct SettingPlan {
    SettingName name;
    std::shared_ptr<const Dataset> domain_a;
    std::shared_ptr<const Dataset> domain_b;  // null for in-domain settings
    DatasetView old_train;
    DatasetView new_train;
    DatasetView test_query;
    DatasetView test_gallery;
    EncoderSpec old_spec;
    EncoderSpec new_spec;
};

namespace detail {

inline std::size_t total_hidden_units(const EncoderSpec& s) {
    std::size_t total = 0;
    for (auto h : s.hidden_dims) total += static_cast<std::size_t>(h);
    return total;
}

inline DatasetView filter_labels(const DatasetView& v, const std::vector<std::int64_t>& keep) {
    DatasetView out;
    out.data = v.data;
    for (auto r : v.rows)
        if (std::binary_search(keep.begin(), keep.end(),
                               v.data->labels[static_cast<std::size_t>(r)]))
            out.rows.push_back(r);
    return out;
}

}  // namespace detail

/// Wires datasets and encoder specs for one named setting. In-domain
/// settings use only domain A; the old model sees a seeded random 10% (by
/// class count, rounded up) of the train classes. Cross-domain settings
/// train the old model on domain A and everything else on domain B.
/// Structure-variant settings (*-2) use the wider new encoder spec.
inline SettingPlan plan_setting(const std::string& name, const SyntheticSpec& domain_a_spec,
                                const std::optional<SyntheticSpec>& domain_b_spec,
                                const EncoderSpec& old_base, const EncoderSpec& new_base) {
    SettingPlan plan;
    plan.name = parse_setting_name(name);

    auto data_a = std::make_shared<const Dataset>(generate_dataset(domain_a_spec));
    plan.domain_a = data_a;

    DatasetView train_a = make_view(data_a, Split::Train);
    if (is_cross_domain(plan.name)) {
        if (!domain_b_spec) throw ConfigError(name + " requires a domainB spec");
        if (domain_b_spec->domain == domain_a_spec.domain)
            throw ConfigError("cross-domain setting requires distinct domain tags");
        if (domain_b_spec->input_dim != domain_a_spec.input_dim)
            throw ConfigError("domains must share input_dim");
        auto data_b = std::make_shared<const Dataset>(generate_dataset(*domain_b_spec));
        plan.domain_b = data_b;
        plan.old_train = train_a;
        plan.new_train = make_view(data_b, Split::Train);
        plan.test_query = make_view(data_b, Split::Query);
        plan.test_gallery = make_view(data_b, Split::Gallery);
    } else {
        auto classes = train_a.distinct_labels();
        auto n_old = static_cast<std::size_t>(
            std::ceil(0.1 * static_cast<double>(classes.size())));
        n_old = std::max<std::size_t>(n_old, 1);
        Rng pick_rng(mix_seed(domain_a_spec.seed, 0x1051));
        pick_rng.shuffle(classes);
        classes.resize(n_old);
        std::sort(classes.begin(), classes.end());
        plan.old_train = detail::filter_labels(train_a, classes);
        plan.new_train = train_a;
        plan.test_query = make_view(data_a, Split::Query);
        plan.test_gallery = make_view(data_a, Split::Gallery);
    }

    plan.old_spec = old_base;
    plan.old_spec.input_dim = domain_a_spec.input_dim;
    if (is_structure_variant(plan.name)) {
        plan.new_spec = new_base;
        plan.new_spec.input_dim = plan.old_spec.input_dim;
        if (detail::total_hidden_units(plan.new_spec) <= detail::total_hidden_units(plan.old_spec))
            throw ConfigError("structure-variant settings need a wider new encoder");
    } else {
        plan.new_spec = plan.old_spec;  // same structure
        plan.new_spec.seed = new_base.seed;
    }
    validate(plan.old_spec);
    validate(plan.new_spec);
    return plan;
}

// ---------------------------------------------------------------------------
// PK sampling

/// One epoch of PK batches over `train`: each batch holds `p` distinct
/// random classes with `k_inst` instances each (sampled with replacement
/// when a class is smaller than `k_inst`). The epoch covers every class at
/// least once; `min_batches` extends it with additional random batches.
/// Returned entries are dataset row indices.
inline std::vector<std::vector<Eigen::Index>> pk_epoch_batches(const DatasetView& train,
                                                               std::size_t p, std::size_t k_inst,
                                                               Rng& rng,
                                                               std::size_t min_batches = 0) {
    if (k_inst < 2) throw Error("k_inst must be >= 2");
    auto classes = train.distinct_labels();
    if (p > classes.size())
        throw TooFewClasses("P=" + std::to_string(p) + " exceeds " +
                            std::to_string(classes.size()) + " train classes");
    if (p < 2) throw TooFewClasses("P must be >= 2");

    std::map<std::int64_t, std::vector<Eigen::Index>> rows_by_class;
    for (auto r : train.rows) rows_by_class[train.data->labels[static_cast<std::size_t>(r)]].push_back(r);

    auto sample_class_rows = [&](std::int64_t cls, std::vector<Eigen::Index>& out) {
        const auto& rows = rows_by_class[cls];
        if (rows.size() >= k_inst) {
            std::vector<Eigen::Index> scratch = rows;
            for (std::size_t i = 0; i < k_inst; ++i) {
                std::size_t j = i + rng.uniform_index(scratch.size() - i);
                std::swap(scratch[i], scratch[j]);
                out.push_back(scratch[i]);
            }
        } else {
            for (std::size_t i = 0; i < k_inst; ++i)
                out.push_back(rows[rng.uniform_index(rows.size())]);
        }
    };

    std::vector<std::int64_t> order = classes;
    rng.shuffle(order);
    const std::size_t cover_batches = (classes.size() + p - 1) / p;
    const std::size_t n_batches = std::max(cover_batches, min_batches);

    std::vector<std::vector<Eigen::Index>> batches;
    batches.reserve(n_batches);
    for (std::size_t b = 0; b < n_batches; ++b) {
        std::vector<std::int64_t> batch_classes;
        if (b < cover_batches) {
            for (std::size_t i = b * p; i < std::min((b + 1) * p, order.size()); ++i)
                batch_classes.push_back(order[i]);
            // Top up a short tail chunk with classes outside the chunk.
            if (batch_classes.size() < p) {
                std::vector<std::int64_t> pool;
                for (auto c : classes)
                    if (std::find(batch_classes.begin(), batch_classes.end(), c) ==
                        batch_classes.end())
                        pool.push_back(c);
                rng.shuffle(pool);
                for (std::size_t i = 0; batch_classes.size() < p; ++i)
                    batch_classes.push_back(pool[i]);
            }
        } else {
            std::vector<std::int64_t> pool = classes;
            rng.shuffle(pool);
            pool.resize(p);
            batch_classes = std::move(pool);
        }
        std::vector<Eigen::Index> batch;
        batch.reserve(p * k_inst);
        for (auto cls : batch_classes) sample_class_rows(cls, batch);
        batches.push_back(std::move(batch));
    }
    return batches;
}

}  // namespace rbcl
