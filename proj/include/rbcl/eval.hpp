#pragma once

// Retrieval metrics (exact AP, mAP, Rank-1, CMC) and the cross-model
// evaluation protocol: query features from one encoder ranked against
// gallery features from another.

#include "rbcl/data.hpp"
#include "rbcl/featurespace.hpp"

#include <numeric>
#include <unordered_set>

namespace rbcl {

struct RetrievalReport {
    double map = 0.0;
    double rank1 = 0.0;
    std::vector<double> cmc;  // cmc[k] = hit rate within top k+1
    std::string query_encoder;
    std::string gallery_encoder;
    std::size_t num_queries = 0;
};

/// Average precision of an ordered relevance list: mean over relevant items
/// of the precision at their rank. Ties must be pre-broken by the caller.
inline double exact_ap(const std::vector<bool>& relevance) {
    std::size_t hits = 0;
    double precision_sum = 0.0;
    for (std::size_t rank = 0; rank < relevance.size(); ++rank) {
        if (!relevance[rank]) continue;
        ++hits;
        precision_sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
    if (hits == 0) throw NoRelevant("ranking contains no relevant item");
    return precision_sum / static_cast<double>(hits);
}

/// Cosine-similarity ranking per query, descending, ties by ascending
/// gallery instance_id.
inline RetrievalReport evaluate_retrieval(const FeatureSet& query, const FeatureSet& gallery) {
    validate(query);
    validate(gallery);
    {
        std::unordered_set<std::int64_t> gallery_ids(gallery.instance_ids.begin(),
                                                     gallery.instance_ids.end());
        for (auto id : query.instance_ids)
            if (gallery_ids.count(id))
                throw InstanceMismatch("query and gallery share instance_id " +
                                       std::to_string(id));
    }
    std::unordered_set<std::int64_t> gallery_labels(gallery.labels.begin(),
                                                    gallery.labels.end());
    for (auto l : query.labels)
        if (!gallery_labels.count(l)) throw MissingPositive(l);

    Matrix sims = cosine_similarity_matrix(query, gallery).values;
    const Eigen::Index q_count = query.size();
    const Eigen::Index g_count = gallery.size();

    RetrievalReport report;
    report.num_queries = static_cast<std::size_t>(q_count);
    report.query_encoder = query.source;
    report.gallery_encoder = gallery.source;
    report.cmc.assign(static_cast<std::size_t>(g_count), 0.0);

    double ap_sum = 0.0;
    for (Eigen::Index i = 0; i < q_count; ++i) {
        std::vector<Eigen::Index> order(static_cast<std::size_t>(g_count));
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
            if (sims(i, a) != sims(i, b)) return sims(i, a) > sims(i, b);
            return gallery.instance_ids[static_cast<std::size_t>(a)] <
                   gallery.instance_ids[static_cast<std::size_t>(b)];
        });
        std::vector<bool> relevance(order.size());
        std::size_t first_hit = order.size();
        for (std::size_t r = 0; r < order.size(); ++r) {
            relevance[r] =
                gallery.labels[static_cast<std::size_t>(order[r])] == query.labels[i];
            if (relevance[r] && first_hit == order.size()) first_hit = r;
        }
        ap_sum += exact_ap(relevance);
        for (std::size_t k = first_hit; k < report.cmc.size(); ++k) report.cmc[k] += 1.0;
    }
    report.map = ap_sum / static_cast<double>(q_count);
    for (auto& v : report.cmc) v /= static_cast<double>(q_count);
    report.rank1 = report.cmc.empty() ? 0.0 : report.cmc[0];
    return report;
}

inline double cmc_at(const RetrievalReport& r, std::size_t k) {
    if (r.cmc.empty()) return 0.0;
    return r.cmc[std::min(k, r.cmc.size() - 1)];
}

/// Encodes a dataset view and packages the embeddings with provenance.
inline FeatureSet extract_features(const Encoder& encoder, const DatasetView& view,
                                   const std::string& encoder_name) {
    FeatureSet fs;
    fs.features = encode(encoder, view.inputs());
    fs.labels = view.labels();
    fs.instance_ids = view.instance_ids();
    fs.source = encoder_name + ":" + view.data->domain;
    return fs;
}

struct TestSplit {
    DatasetView query;
    DatasetView gallery;
};

struct CrossModelReports {
    RetrievalReport direct;  // query old,  gallery old
    RetrievalReport cross;   // query new,  gallery old
    RetrievalReport ub;      // query new,  gallery new
};

/// The primary-experiment matrix for one test split.
inline CrossModelReports cross_model_matrix(const Encoder& old_encoder,
                                            const Encoder& new_encoder, const TestSplit& test,
                                            const std::string& old_name = "old",
                                            const std::string& new_name = "new") {
    if (old_encoder.spec.input_dim != test.query.data->input_dim() ||
        new_encoder.spec.input_dim != test.query.data->input_dim())
        throw ShapeMismatch("encoder input_dim does not match test inputs");
    FeatureSet old_q = extract_features(old_encoder, test.query, old_name);
    FeatureSet old_g = extract_features(old_encoder, test.gallery, old_name);
    FeatureSet new_q = extract_features(new_encoder, test.query, new_name);
    FeatureSet new_g = extract_features(new_encoder, test.gallery, new_name);

    CrossModelReports out;
    out.direct = evaluate_retrieval(old_q, old_g);
    if (old_encoder.spec.embed_dim != new_encoder.spec.embed_dim)
        throw EmbedDimMismatch("cross entry needs equal embed dims (" +
                               std::to_string(new_encoder.spec.embed_dim) + " vs " +
                               std::to_string(old_encoder.spec.embed_dim) + ")");
    out.cross = evaluate_retrieval(new_q, old_g);
    out.ub = evaluate_retrieval(new_q, new_g);
    return out;
}

/// CSV row: setting,query_enc,gallery_enc,map,rank1,cmc1,cmc5,cmc10
inline std::string report_csv_row(const std::string& setting, const RetrievalReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%s,%s,%.6f,%.6f,%.6f,%.6f,%.6f", setting.c_str(),
                  r.query_encoder.c_str(), r.gallery_encoder.c_str(), r.map, r.rank1,
                  cmc_at(r, 0), cmc_at(r, 4), cmc_at(r, 9));
    return buf;
}

}  // namespace rbcl
