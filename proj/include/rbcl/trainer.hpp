#pragma once

// Training loops: plain re-ID training (triplet + ID loss) and backward
// compatible training of a new encoder against a frozen old model. The old
// feature space is computed once before iteration; gradients flow only
// through the new encoder and its classifier head.

#include "rbcl/data.hpp"
#include "rbcl/eval.hpp"
#include "rbcl/losses.hpp"

namespace rbcl {

enum class CompatLoss : std::uint8_t { None, Rbcl, L2, Mmd, Influence, TripletAlign };

inline CompatLoss parse_compat_loss(const std::string& s) {
    if (s == "none") return CompatLoss::None;
    if (s == "rbcl") return CompatLoss::Rbcl;
    if (s == "l2") return CompatLoss::L2;
    if (s == "mmd") return CompatLoss::Mmd;
    if (s == "influence") return CompatLoss::Influence;
    if (s == "triplet_align") return CompatLoss::TripletAlign;
    throw ConfigError("unknown compat loss: " + s);
}

inline const char* compat_loss_name(CompatLoss c) {
    switch (c) {
        case CompatLoss::None: return "none";
        case CompatLoss::Rbcl: return "rbcl";
        case CompatLoss::L2: return "l2";
        case CompatLoss::Mmd: return "mmd";
        case CompatLoss::Influence: return "influence";
        default: return "triplet_align";
    }
}

constexpr double kTripletMargin = 0.3;
constexpr double kLabelSmoothing = 0.1;

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batches_per_epoch = 0;  // 0: one coverage pass, ceil(C/P) batches
    std::size_t p = 4;                  // classes per batch
    std::size_t k_inst = 4;             // instances per class
    double learning_rate = 0.05;
    double momentum = 0.9;
    SigmoidParams tau;
    DgrParams dgr;
    std::size_t dgr_start_epoch = 0;
    std::size_t nca_k = 10;
    CompatLoss compat_loss = CompatLoss::None;
    std::uint64_t seed = 0;
    bool init_from_old = true;
    std::vector<std::size_t> hist_epochs;  // empty: snapshot around dgr_start and ends
};

struct EpochStats {
    double l_m = 0.0;
    double l_tri = 0.0;
    double l_id = 0.0;
    double l_total = 0.0;
    bool dgr_active = false;
};

struct TermHistogram {
    std::size_t epoch = 0;
    double lo = -2.0, hi = 2.0;
    std::vector<std::size_t> counts;  // uniform bins over [lo, hi]
};

struct TrainTrace {
    std::vector<EpochStats> epochs;
    std::vector<TermHistogram> histograms;
    std::vector<std::string> notes;
};

struct TrainResult {
    Encoder encoder;
    ClassifierHead classifier;
    TrainTrace trace;
};

namespace detail {

struct Momentum {
    std::vector<Matrix> w;
    std::vector<Vector> b;
    Matrix head_w;
    Vector head_b;
};

// Frozen old-model context for compatibility training.
struct BctContext {
    const Encoder* old_encoder = nullptr;
    const ClassifierHead* old_classifier = nullptr;
    FeatureSet old_features;  // old embeddings of the full train view
    NeighborIndex neighbor_index;
    std::map<std::int64_t, Eigen::Index> old_row_by_id;
};

inline FeatureSet old_subset(const BctContext& ctx, const std::vector<std::int64_t>& ids,
                             const std::vector<std::int64_t>& labels,
                             std::int64_t id_offset = 0) {
    FeatureSet fs;
    fs.features.resize(static_cast<Eigen::Index>(ids.size()), ctx.old_features.dim());
    fs.labels = labels;
    fs.instance_ids.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto it = ctx.old_row_by_id.find(ids[i]);
        if (it == ctx.old_row_by_id.end())
            throw InstanceMismatch("no old features for instance " + std::to_string(ids[i]));
        fs.features.row(static_cast<Eigen::Index>(i)) = ctx.old_features.features.row(it->second);
        fs.instance_ids.push_back(ids[i] + id_offset);
    }
    fs.source = ctx.old_features.source;
    return fs;
}

inline std::vector<std::size_t> resolve_hist_epochs(const TrainConfig& cfg) {
    if (!cfg.hist_epochs.empty()) return cfg.hist_epochs;
    std::vector<std::size_t> out;
    auto add = [&](std::size_t e) {
        if (e < cfg.epochs && std::find(out.begin(), out.end(), e) == out.end()) out.push_back(e);
    };
    if (cfg.epochs == 0) return out;
    add(0);
    if (cfg.dgr.enabled && cfg.dgr_start_epoch > 0) add(cfg.dgr_start_epoch - 1);
    if (cfg.dgr.enabled) add(cfg.dgr_start_epoch);
    add(cfg.epochs - 1);
    return out;
}

inline TrainResult train_loop(const DatasetView& train, const EncoderSpec& spec,
                              const TrainConfig& cfg, const BctContext* ctx) {
    TrainResult result;

    // Model init: copy the old weights when requested and shapes allow it.
    bool copied_old = false;
    if (ctx && cfg.init_from_old) {
        if (same_shape(spec, ctx->old_encoder->spec)) {
            result.encoder = *ctx->old_encoder;
            result.encoder.spec = spec;
            copied_old = true;
        } else {
            result.trace.notes.push_back(
                "init_from_old requested but encoder shapes differ; fresh init used");
        }
    }
    if (!copied_old) result.encoder = init_encoder(spec);

    auto classes = train.distinct_labels();
    if (classes.size() < 2) throw TooFewClasses("training needs >= 2 classes");
    std::map<std::int64_t, std::int64_t> label_index;
    for (std::size_t i = 0; i < classes.size(); ++i)
        label_index[classes[i]] = static_cast<std::int64_t>(i);
    result.classifier = init_classifier(spec.embed_dim,
                                        static_cast<Eigen::Index>(classes.size()),
                                        mix_seed(cfg.seed, 0x48454144));

    Momentum vel;
    vel.w.reserve(result.encoder.layer_count());
    vel.b.reserve(result.encoder.layer_count());
    for (std::size_t l = 0; l < result.encoder.layer_count(); ++l) {
        vel.w.push_back(Matrix::Zero(result.encoder.weights[l].rows(),
                                     result.encoder.weights[l].cols()));
        vel.b.push_back(Vector::Zero(result.encoder.biases[l].size()));
    }
    vel.head_w = Matrix::Zero(result.classifier.weight.rows(), result.classifier.weight.cols());
    vel.head_b = Vector::Zero(result.classifier.bias.size());

    Rng batch_rng(mix_seed(cfg.seed, 0x504b));   // PK sampling stream
    Rng agent_rng(mix_seed(cfg.seed, 0x4e4341)); // gallery agent stream

    const auto hist_epochs = resolve_hist_epochs(cfg);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const bool dgr_active = cfg.dgr.enabled && epoch >= cfg.dgr_start_epoch;
        const bool record_hist =
            ctx && cfg.compat_loss == CompatLoss::Rbcl &&
            std::find(hist_epochs.begin(), hist_epochs.end(), epoch) != hist_epochs.end();
        std::vector<double> epoch_terms;

        EpochStats stats;
        stats.dgr_active = dgr_active;
        auto batches = pk_epoch_batches(train, cfg.p, cfg.k_inst, batch_rng,
                                        cfg.batches_per_epoch);

        for (const auto& batch_rows : batches) {
            const Eigen::Index b = static_cast<Eigen::Index>(batch_rows.size());
            Matrix x(b, train.data->input_dim());
            FeatureSet batch_fs;
            batch_fs.labels.reserve(batch_rows.size());
            batch_fs.instance_ids.reserve(batch_rows.size());
            for (Eigen::Index i = 0; i < b; ++i) {
                auto r = batch_rows[static_cast<std::size_t>(i)];
                x.row(i) = train.data->inputs.row(r);
                batch_fs.labels.push_back(train.data->labels[static_cast<std::size_t>(r)]);
                batch_fs.instance_ids.push_back(
                    train.data->instance_ids[static_cast<std::size_t>(r)]);
            }
            batch_fs.features = encode(result.encoder, x);
            batch_fs.source = "train";

            auto tri = hard_triplet_loss(batch_fs, kTripletMargin);

            std::vector<std::int64_t> mapped;
            mapped.reserve(batch_fs.labels.size());
            for (auto l : batch_fs.labels) mapped.push_back(label_index.at(l));
            Matrix logits = (batch_fs.features * result.classifier.weight.transpose()).rowwise() +
                            result.classifier.bias.transpose();
            auto id = id_loss(logits, mapped, kLabelSmoothing);
            Matrix grad_head_w = id.grad.transpose() * batch_fs.features;
            Vector grad_head_b = id.grad.colwise().sum().transpose();

            double compat_value = 0.0;
            Matrix grad_features = tri.grad + id.grad * result.classifier.weight;
            if (ctx) {
                switch (cfg.compat_loss) {
                    case CompatLoss::None:
                        break;
                    case CompatLoss::Rbcl: {
                        auto batch_classes = batch_fs.labels;
                        std::sort(batch_classes.begin(), batch_classes.end());
                        batch_classes.erase(
                            std::unique(batch_classes.begin(), batch_classes.end()),
                            batch_classes.end());
                        FeatureSet gallery = sample_ncas(batch_classes, ctx->neighbor_index,
                                                         ctx->old_features, agent_rng);
                        DgrParams g = cfg.dgr;
                        g.enabled = dgr_active;
                        auto ap = smooth_ap_loss(batch_fs, gallery, cfg.tau, g);
                        compat_value = ap.l_m;
                        grad_features += ap.grad_query;
                        if (record_hist)
                            epoch_terms.insert(epoch_terms.end(),
                                               ap.terms.shifted_values.begin(),
                                               ap.terms.shifted_values.end());
                        break;
                    }
                    case CompatLoss::L2: {
                        auto old_fs = old_subset(*ctx, batch_fs.instance_ids, batch_fs.labels);
                        auto r = l2_compat_loss(batch_fs, old_fs);
                        compat_value = r.value;
                        grad_features += r.grad;
                        break;
                    }
                    case CompatLoss::Mmd: {
                        auto old_fs = old_subset(*ctx, batch_fs.instance_ids, batch_fs.labels);
                        auto r = mmd_loss(batch_fs, old_fs);
                        compat_value = r.value;
                        grad_features += r.grad;
                        break;
                    }
                    case CompatLoss::Influence: {
                        auto old_fs = old_subset(*ctx, batch_fs.instance_ids, batch_fs.labels);
                        auto r = influence_loss(batch_fs, old_fs, *ctx->old_classifier);
                        compat_value = r.value;
                        grad_features += r.grad;
                        break;
                    }
                    case CompatLoss::TripletAlign: {
                        auto old_fs = old_subset(*ctx, batch_fs.instance_ids, batch_fs.labels,
                                                 /*id_offset=*/std::int64_t{1} << 40);
                        FeatureSet joint;
                        joint.features.resize(2 * b, batch_fs.dim());
                        joint.features.topRows(b) = batch_fs.features;
                        joint.features.bottomRows(b) = old_fs.features;
                        joint.labels = batch_fs.labels;
                        joint.labels.insert(joint.labels.end(), old_fs.labels.begin(),
                                            old_fs.labels.end());
                        joint.instance_ids = batch_fs.instance_ids;
                        joint.instance_ids.insert(joint.instance_ids.end(),
                                                  old_fs.instance_ids.begin(),
                                                  old_fs.instance_ids.end());
                        auto r = hard_triplet_loss(joint, kTripletMargin);
                        compat_value = r.value;
                        grad_features += r.grad.topRows(b);
                        break;
                    }
                }
            }

            // Backprop into the encoder and apply momentum SGD.
            auto grads = encode_backward(result.encoder, x, grad_features);
            for (std::size_t l = 0; l < result.encoder.layer_count(); ++l) {
                vel.w[l] = cfg.momentum * vel.w[l] + grads.weights[l];
                vel.b[l] = cfg.momentum * vel.b[l] + grads.biases[l];
                result.encoder.weights[l] -= cfg.learning_rate * vel.w[l];
                result.encoder.biases[l] -= cfg.learning_rate * vel.b[l];
            }
            vel.head_w = cfg.momentum * vel.head_w + grad_head_w;
            vel.head_b = cfg.momentum * vel.head_b + grad_head_b;
            result.classifier.weight -= cfg.learning_rate * vel.head_w;
            result.classifier.bias -= cfg.learning_rate * vel.head_b;

            stats.l_m += compat_value;
            stats.l_tri += tri.value;
            stats.l_id += id.value;
            stats.l_total += tri.value + id.value + compat_value;
        }

        const double inv = 1.0 / static_cast<double>(batches.size());
        stats.l_m *= inv;
        stats.l_tri *= inv;
        stats.l_id *= inv;
        stats.l_total *= inv;
        result.trace.epochs.push_back(stats);

        if (record_hist) {
            TermHistogram hist;
            hist.epoch = epoch;
            hist.counts.assign(40, 0);
            const double width = (hist.hi - hist.lo) / static_cast<double>(hist.counts.size());
            for (double v : epoch_terms) {
                auto bin = static_cast<std::ptrdiff_t>(std::floor((v - hist.lo) / width));
                bin = std::clamp<std::ptrdiff_t>(bin, 0,
                                                 static_cast<std::ptrdiff_t>(hist.counts.size()) - 1);
                ++hist.counts[static_cast<std::size_t>(bin)];
            }
            result.trace.histograms.push_back(std::move(hist));
        }
    }
    return result;
}

}  // namespace detail

/// Plain re-ID training: minimizes triplet + ID loss over PK batches with
/// momentum SGD. Returns the final-epoch model; no early stopping.
inline TrainResult train_reid(const DatasetView& train, const EncoderSpec& spec,
                              const TrainConfig& cfg) {
    if (cfg.compat_loss != CompatLoss::None)
        throw ConfigError("train_reid requires compat_loss = none");
    return detail::train_loop(train, spec, cfg, nullptr);
}

/// Backward compatible training of a new encoder against a frozen old model.
/// Old features of the train view are computed once up front; the neighbor
/// index is built over them with cfg.nca_k. compat_loss = none yields the
/// plain new model (the lower-bound run).
inline TrainResult train_bct(const DatasetView& new_train, const Encoder& old_encoder,
                             const ClassifierHead& old_classifier, const EncoderSpec& spec,
                             const TrainConfig& cfg) {
    detail::BctContext ctx;
    ctx.old_encoder = &old_encoder;
    ctx.old_classifier = &old_classifier;
    ctx.old_features = extract_features(old_encoder, new_train, "old");
    ctx.neighbor_index = build_neighbor_index(ctx.old_features, cfg.nca_k);
    for (Eigen::Index i = 0; i < ctx.old_features.size(); ++i)
        ctx.old_row_by_id[ctx.old_features.instance_ids[static_cast<std::size_t>(i)]] = i;
    return detail::train_loop(new_train, spec, cfg, &ctx);
}

/// Trace export: `epoch,l_m,l_tri,l_id,l_total,dgr_active`.
inline void write_trace_csv(const TrainTrace& trace, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "epoch,l_m,l_tri,l_id,l_total,dgr_active\n";
    for (std::size_t e = 0; e < trace.epochs.size(); ++e) {
        const auto& s = trace.epochs[e];
        out << e << "," << format_double(s.l_m) << "," << format_double(s.l_tri) << ","
            << format_double(s.l_id) << "," << format_double(s.l_total) << ","
            << (s.dgr_active ? 1 : 0) << "\n";
    }
    if (!out) throw IoError("write failed: " + path);
}

/// Histogram snapshot export: `bin_lo,bin_hi,count`.
inline void write_histogram_csv(const TermHistogram& hist, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "bin_lo,bin_hi,count\n";
    const double width = (hist.hi - hist.lo) / static_cast<double>(hist.counts.size());
    for (std::size_t i = 0; i < hist.counts.size(); ++i) {
        out << format_double(hist.lo + width * static_cast<double>(i)) << ","
            << format_double(hist.lo + width * static_cast<double>(i + 1)) << ","
            << hist.counts[i] << "\n";
    }
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace rbcl
