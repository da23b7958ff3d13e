#pragma once

// Small feed-forward embedding encoders and a linear classifier head, with
// seeded initialization, forward/backward evaluation and binary
// serialization.

#include "rbcl/core.hpp"

#include <cstring>
#include <fstream>
#include <optional>

namespace rbcl {

enum class Activation : std::uint8_t { Relu = 0, Tanh = 1 };

struct EncoderSpec {
    Eigen::Index input_dim = 1;
    std::vector<Eigen::Index> hidden_dims;  // at most 4
    Eigen::Index embed_dim = 1;
    Activation activation = Activation::Relu;
    std::uint64_t seed = 0;
};

inline bool same_shape(const EncoderSpec& a, const EncoderSpec& b) {
    return a.input_dim == b.input_dim && a.hidden_dims == b.hidden_dims &&
           a.embed_dim == b.embed_dim && a.activation == b.activation;
}

inline void validate(const EncoderSpec& spec) {
    if (spec.input_dim < 1 || spec.embed_dim < 1)
        throw ShapeMismatch("encoder dims must be >= 1");
    if (spec.hidden_dims.size() > 4)
        throw ShapeMismatch("at most 4 hidden layers supported");
    for (auto h : spec.hidden_dims)
        if (h < 1) throw ShapeMismatch("hidden dims must be >= 1");
}

/// Affine layers with activation after every hidden layer and none after the
/// final projection. weights[l] is (out x in).
struct Encoder {
    EncoderSpec spec;
    std::vector<Matrix> weights;
    std::vector<Vector> biases;

    std::size_t layer_count() const { return weights.size(); }
};

struct ClassifierHead {
    Matrix weight;  // C x embed_dim
    Vector bias;    // C
    Eigen::Index num_classes() const { return weight.rows(); }
};

/// Glorot-uniform weights drawn from spec.seed, zero biases.
inline Encoder init_encoder(const EncoderSpec& spec) {
    validate(spec);
    Encoder e;
    e.spec = spec;
    Rng rng(spec.seed);
    std::vector<Eigen::Index> dims;
    dims.push_back(spec.input_dim);
    for (auto h : spec.hidden_dims) dims.push_back(h);
    dims.push_back(spec.embed_dim);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        Eigen::Index fan_in = dims[l], fan_out = dims[l + 1];
        double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        Matrix w(fan_out, fan_in);
        for (Eigen::Index r = 0; r < fan_out; ++r)
            for (Eigen::Index c = 0; c < fan_in; ++c) w(r, c) = rng.uniform(-bound, bound);
        e.weights.push_back(std::move(w));
        e.biases.push_back(Vector::Zero(fan_out));
    }
    return e;
}

inline ClassifierHead init_classifier(Eigen::Index embed_dim, Eigen::Index num_classes,
                                      std::uint64_t seed) {
    if (num_classes < 2) throw DimensionMismatch("classifier needs >= 2 classes");
    Rng rng(seed);
    double bound = std::sqrt(6.0 / static_cast<double>(embed_dim + num_classes));
    ClassifierHead head;
    head.weight.resize(num_classes, embed_dim);
    for (Eigen::Index r = 0; r < num_classes; ++r)
        for (Eigen::Index c = 0; c < embed_dim; ++c) head.weight(r, c) = rng.uniform(-bound, bound);
    head.bias = Vector::Zero(num_classes);
    return head;
}

namespace detail {

inline Matrix apply_activation(const Matrix& z, Activation act) {
    if (act == Activation::Relu) return z.cwiseMax(0.0);
    return z.array().tanh().matrix();
}

// Derivative from the post-activation value; relu subgradient at 0 is 0.
inline Matrix activation_derivative(const Matrix& post, Activation act) {
    if (act == Activation::Relu)
        return (post.array() > 0.0).cast<double>().matrix();
    return (1.0 - post.array().square()).matrix();
}

}  // namespace detail

/// All per-layer inputs of one forward pass; activations[0] is the input,
/// activations[L] the embedding.
struct ForwardCache {
    std::vector<Matrix> activations;
};

inline Matrix encode(const Encoder& e, const Matrix& x, ForwardCache* cache = nullptr) {
    if (x.cols() != e.spec.input_dim)
        throw ShapeMismatch("encode: input has " + std::to_string(x.cols()) +
                            " columns, encoder expects " + std::to_string(e.spec.input_dim));
    Matrix a = x;
    if (cache) cache->activations.assign(1, a);
    for (std::size_t l = 0; l < e.layer_count(); ++l) {
        Matrix z = a * e.weights[l].transpose();
        z.rowwise() += e.biases[l].transpose();
        a = (l + 1 < e.layer_count()) ? detail::apply_activation(z, e.spec.activation)
                                      : std::move(z);
        if (cache) cache->activations.push_back(a);
    }
    return a;
}

struct EncoderGrads {
    std::vector<Matrix> weights;
    std::vector<Vector> biases;
    Matrix input;  // N x input_dim
};

/// Reverse-mode gradients of the forward map for upstream dL/d(embedding).
inline EncoderGrads encode_backward(const Encoder& e, const Matrix& x, const Matrix& upstream) {
    ForwardCache cache;
    Matrix out = encode(e, x, &cache);
    if (upstream.rows() != out.rows() || upstream.cols() != out.cols())
        throw ShapeMismatch("encode_backward: upstream gradient shape mismatch");

    EncoderGrads g;
    g.weights.resize(e.layer_count());
    g.biases.resize(e.layer_count());
    Matrix delta = upstream;
    for (std::size_t l = e.layer_count(); l-- > 0;) {
        g.weights[l] = delta.transpose() * cache.activations[l];
        g.biases[l] = delta.colwise().sum().transpose();
        Matrix back = delta * e.weights[l];
        if (l > 0)
            delta = back.cwiseProduct(
                detail::activation_derivative(cache.activations[l], e.spec.activation));
        else
            g.input = std::move(back);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Serialization: little-endian binary, magic "CRNK", version u32 = 1, spec,
// then row-major float64 weight/bias blocks in layer order, then an optional
// classifier head.

namespace detail {

template <typename T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw FormatError("truncated model file");
    return v;
}

inline void write_matrix(std::ostream& out, const Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) write_pod<double>(out, m(r, c));
}

inline Matrix read_matrix(std::istream& in, Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = read_pod<double>(in);
    return m;
}

}  // namespace detail

constexpr char kModelMagic[4] = {'C', 'R', 'N', 'K'};
constexpr std::uint32_t kModelVersion = 1;

inline void save_model(const Encoder& e, const std::string& path,
                       const ClassifierHead* head = nullptr) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(kModelMagic, 4);
    detail::write_pod<std::uint32_t>(out, kModelVersion);
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(e.spec.input_dim));
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(e.spec.hidden_dims.size()));
    for (auto h : e.spec.hidden_dims)
        detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(h));
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(e.spec.embed_dim));
    detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(e.spec.activation));
    detail::write_pod<std::uint64_t>(out, e.spec.seed);
    for (std::size_t l = 0; l < e.layer_count(); ++l) {
        detail::write_matrix(out, e.weights[l]);
        detail::write_matrix(out, e.biases[l]);
    }
    detail::write_pod<std::uint8_t>(out, head ? 1 : 0);
    if (head) {
        detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(head->num_classes()));
        detail::write_matrix(out, head->weight);
        detail::write_matrix(out, head->bias);
    }
    if (!out) throw IoError("write failed: " + path);
}

inline Encoder load_model(const std::string& path,
                          std::optional<ClassifierHead>* head_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kModelMagic, 4) != 0)
        throw FormatError("bad magic in " + path);
    auto version = detail::read_pod<std::uint32_t>(in);
    if (version != kModelVersion)
        throw FormatError("unsupported model version " + std::to_string(version));

    EncoderSpec spec;
    spec.input_dim = detail::read_pod<std::uint32_t>(in);
    auto n_hidden = detail::read_pod<std::uint32_t>(in);
    if (n_hidden > 4) throw FormatError("implausible hidden layer count");
    for (std::uint32_t i = 0; i < n_hidden; ++i)
        spec.hidden_dims.push_back(detail::read_pod<std::uint32_t>(in));
    spec.embed_dim = detail::read_pod<std::uint32_t>(in);
    auto act = detail::read_pod<std::uint8_t>(in);
    if (act > 1) throw FormatError("unknown activation tag");
    spec.activation = static_cast<Activation>(act);
    spec.seed = detail::read_pod<std::uint64_t>(in);
    validate(spec);

    Encoder e;
    e.spec = spec;
    std::vector<Eigen::Index> dims;
    dims.push_back(spec.input_dim);
    for (auto h : spec.hidden_dims) dims.push_back(h);
    dims.push_back(spec.embed_dim);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        e.weights.push_back(detail::read_matrix(in, dims[l + 1], dims[l]));
        e.biases.push_back(detail::read_matrix(in, dims[l + 1], 1));
    }
    auto has_head = detail::read_pod<std::uint8_t>(in);
    if (has_head) {
        auto classes = detail::read_pod<std::uint32_t>(in);
        ClassifierHead head;
        head.weight = detail::read_matrix(in, classes, spec.embed_dim);
        head.bias = detail::read_matrix(in, classes, 1);
        if (head_out) *head_out = std::move(head);
    } else if (head_out) {
        head_out->reset();
    }
    return e;
}

}  // namespace rbcl
