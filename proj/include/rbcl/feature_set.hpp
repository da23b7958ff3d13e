#pragma once

// Labeled embedding sets and their CSV serialization.

#include "rbcl/core.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace rbcl {

/// A labeled matrix of embedding vectors with provenance. `source` is an
/// "<encoder>:<domain>" tag carried through to evaluation reports.
struct FeatureSet {
    Matrix features;                         // N x D
    std::vector<std::int64_t> labels;        // length N
    std::vector<std::int64_t> instance_ids;  // length N, pairwise distinct
    std::string source;

    Eigen::Index size() const { return features.rows(); }
    Eigen::Index dim() const { return features.cols(); }
};

inline void validate(const FeatureSet& fs) {
    const auto n = fs.features.rows();
    if (n < 1 || fs.features.cols() < 1)
        throw ShapeMismatch("feature set must be at least 1x1");
    if (static_cast<Eigen::Index>(fs.labels.size()) != n ||
        static_cast<Eigen::Index>(fs.instance_ids.size()) != n)
        throw ShapeMismatch("labels/instance_ids length must equal row count");
    if (!fs.features.allFinite())
        throw NonFinite("feature set contains non-finite values");
    std::unordered_set<std::int64_t> seen;
    for (auto id : fs.instance_ids)
        if (!seen.insert(id).second)
            throw InstanceMismatch("duplicate instance_id " + std::to_string(id));
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

/// Writes `path` (header `instance_id,label,f0,...`) and a one-line sidecar
/// `path`.meta holding `source=<encoder>:<domain>`.
inline void write_feature_csv(const FeatureSet& fs, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "instance_id,label";
    for (Eigen::Index d = 0; d < fs.dim(); ++d) out << ",f" << d;
    out << "\n";
    for (Eigen::Index i = 0; i < fs.size(); ++i) {
        out << fs.instance_ids[i] << "," << fs.labels[i];
        for (Eigen::Index d = 0; d < fs.dim(); ++d)
            out << "," << format_double(fs.features(i, d));
        out << "\n";
    }
    if (!out) throw IoError("write failed: " + path);
    std::ofstream meta(path + ".meta", std::ios::binary);
    if (!meta) throw IoError("cannot open " + path + ".meta for writing");
    meta << "source=" << fs.source << "\n";
}

inline FeatureSet read_feature_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw FormatError("empty file: " + path);
    if (line.rfind("instance_id,label", 0) != 0)
        throw FormatError("bad header in " + path);
    std::size_t dims = 0;
    for (char c : line)
        if (c == ',') ++dims;
    dims -= 1;  // instance_id,label take the first two columns
    if (dims < 1) throw FormatError("no feature columns in " + path);

    std::vector<std::int64_t> ids, labels;
    std::vector<double> values;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        if (!std::getline(ss, cell, ',')) throw FormatError("short row in " + path);
        ids.push_back(std::stoll(cell));
        if (!std::getline(ss, cell, ',')) throw FormatError("short row in " + path);
        labels.push_back(std::stoll(cell));
        for (std::size_t d = 0; d < dims; ++d) {
            if (!std::getline(ss, cell, ',')) throw FormatError("short row in " + path);
            values.push_back(std::stod(cell));
        }
    }
    if (ids.empty()) throw FormatError("no rows in " + path);

    FeatureSet fs;
    fs.features.resize(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(dims));
    for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t d = 0; d < dims; ++d)
            fs.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) =
                values[i * dims + d];
    fs.labels = std::move(labels);
    fs.instance_ids = std::move(ids);

    std::ifstream meta(path + ".meta");
    if (meta) {
        std::string mline;
        if (std::getline(meta, mline) && mline.rfind("source=", 0) == 0)
            fs.source = mline.substr(7);
    }
    validate(fs);
    return fs;
}

}  // namespace rbcl
