#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "repformer/gradcheck.hpp"
#include "repformer/ops.hpp"
#include "repformer/rng.hpp"
#include "repformer/tensor.hpp"

namespace repformer {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
    return Tensor<T>(std::move(shape), std::move(v), true);
}

/// y = x W + b with W stored [in, out].
template <typename T>
struct Linear {
    Tensor<T> weight;
    Tensor<T> bias;

    static Linear xavier(std::size_t in, std::size_t out, Rng& rng) {
        const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
        return {uniform_tensor<T>({in, out}, bound, rng), Tensor<T>::zeros({out}, true)};
    }

    static Linear zeros(std::size_t in, std::size_t out) {
        return {Tensor<T>::zeros({in, out}, true), Tensor<T>::zeros({out}, true)};
    }

    std::size_t in_features() const { return weight.dim(0); }
    std::size_t out_features() const { return weight.dim(1); }

    Tensor<T> operator()(const Tensor<T>& x) const { return add(matmul(x, weight), bias); }

    void collect(NamedTensors<T>& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".weight", weight);
        out.emplace_back(prefix + ".bias", bias);
    }
};

template <typename T>
struct LayerNormParams {
    Tensor<T> gain;
    Tensor<T> bias;

    static LayerNormParams identity(std::size_t d) {
        return {Tensor<T>::full({d}, T(1), true), Tensor<T>::zeros({d}, true)};
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias, T(1e-5)); }

    void collect(NamedTensors<T>& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".gain", gain);
        out.emplace_back(prefix + ".bias", bias);
    }
};

/// Multi-head attention parameters: query/key/value/output projections.
template <typename T>
struct MhaParams {
    Linear<T> q, k, v, o;
    std::size_t n_heads = 1;

    static MhaParams init(std::size_t d_model, std::size_t n_heads, Rng& rng) {
        if (n_heads == 0 || d_model % n_heads != 0)
            throw BadWidth("d_model " + std::to_string(d_model) + " not divisible by " +
                           std::to_string(n_heads) + " heads");
        MhaParams p;
        p.q = Linear<T>::xavier(d_model, d_model, rng);
        p.k = Linear<T>::xavier(d_model, d_model, rng);
        p.v = Linear<T>::xavier(d_model, d_model, rng);
        p.o = Linear<T>::xavier(d_model, d_model, rng);
        p.n_heads = n_heads;
        return p;
    }

    std::size_t d_model() const { return q.in_features(); }

    void collect(NamedTensors<T>& out, const std::string& prefix) const {
        q.collect(out, prefix + ".q");
        k.collect(out, prefix + ".k");
        v.collect(out, prefix + ".v");
        o.collect(out, prefix + ".o");
    }
};

/// Two linear layers with a ReLU between.
template <typename T>
struct FfnParams {
    Linear<T> in, out;

    static FfnParams init(std::size_t d_in, std::size_t d_hidden, std::size_t d_out, Rng& rng,
                          bool zero_output = false) {
        FfnParams p;
        p.in = Linear<T>::xavier(d_in, d_hidden, rng);
        p.out = zero_output ? Linear<T>::zeros(d_hidden, d_out) : Linear<T>::xavier(d_hidden, d_out, rng);
        return p;
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return out(relu(in(x))); }

    void collect(NamedTensors<T>& out_list, const std::string& prefix) const {
        in.collect(out_list, prefix + ".in");
        out.collect(out_list, prefix + ".out");
    }
};

template <typename T>
struct MhaOutput {
    Tensor<T> output;   // [Lq, d]
    Tensor<T> weights;  // [heads, Lq, Lk], rows on the simplex
};

/// softmax(Q K^T / sqrt(d_head)) V per head, heads concatenated, then projected.
template <typename T>
MhaOutput<T> mha(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const MhaParams<T>& p) {
    const std::size_t d = p.d_model();
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != d || k.dim(1) != d ||
        v.dim(1) != d || k.dim(0) != v.dim(0))
        throw ShapeMismatch("mha: q " + to_string(q.shape()) + " k " + to_string(k.shape()) + " v " +
                            to_string(v.shape()) + " for d_model " + std::to_string(d));
    const std::size_t h = p.n_heads, dh = d / h, lq = q.dim(0), lk = k.dim(0);
    auto qh = permute(reshape(p.q(q), {lq, h, dh}), {1, 0, 2});   // [h, lq, dh]
    auto kt = permute(reshape(p.k(k), {lk, h, dh}), {1, 2, 0});   // [h, dh, lk]
    auto vh = permute(reshape(p.v(v), {lk, h, dh}), {1, 0, 2});   // [h, lk, dh]
    auto scores = scale(matmul(qh, kt), T(1) / std::sqrt(static_cast<T>(dh)));
    auto weights = softmax(scores, -1);
    auto heads = matmul(weights, vh);                               // [h, lq, dh]
    auto merged = reshape(permute(heads, {1, 0, 2}), {lq, d});
    return {p.o(merged), weights};
}

/// Fixed 2-D sine/cosine encoding: the first d_model/2 channels encode the
/// row, the rest the column, each as interleaved sin/cos over geometric
/// frequencies of the position normalized to (0, 2*pi].
template <typename T>
Tensor<T> sincos_pos2d(std::size_t h, std::size_t w, std::size_t d_model) {
    if (d_model % 4 != 0) throw BadWidth("positional encoding width must be divisible by 4");
    const std::size_t half = d_model / 2;
    std::vector<double> inv_freq(half);
    for (std::size_t i = 0; i < half; ++i)
        inv_freq[i] = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / static_cast<double>(half));
    std::vector<T> out(h * w * d_model);
    const double two_pi = 2.0 * std::numbers::pi;
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            const double ypos = static_cast<double>(r + 1) / static_cast<double>(h) * two_pi;
            const double xpos = static_cast<double>(c + 1) / static_cast<double>(w) * two_pi;
            T* row = &out[(r * w + c) * d_model];
            for (std::size_t i = 0; i < half; ++i) {
                const double ay = ypos * inv_freq[i], ax = xpos * inv_freq[i];
                row[i] = static_cast<T>(i % 2 == 0 ? std::sin(ay) : std::cos(ay));
                row[half + i] = static_cast<T>(i % 2 == 0 ? std::sin(ax) : std::cos(ax));
            }
        }
    return Tensor<T>({h * w, d_model}, std::move(out));
}

/// The same encoding evaluated at continuous normalized (x, y) points [N, 2],
/// position p mapping to angle 2*pi*p. Not differentiated.
template <typename T>
Tensor<T> sincos_pos_at(const Tensor<T>& coords, std::size_t d_model) {
    if (d_model % 4 != 0) throw BadWidth("positional encoding width must be divisible by 4");
    if (coords.rank() != 2 || coords.dim(1) != 2) throw ShapeMismatch("positions must be [N, 2]");
    const std::size_t half = d_model / 2, n = coords.dim(0);
    const double two_pi = 2.0 * std::numbers::pi;
    std::vector<T> out(n * d_model);
    for (std::size_t j = 0; j < n; ++j) {
        const double xpos = static_cast<double>(coords.at(2 * j)) * two_pi;
        const double ypos = static_cast<double>(coords.at(2 * j + 1)) * two_pi;
        T* row = &out[j * d_model];
        for (std::size_t i = 0; i < half; ++i) {
            const double f = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / static_cast<double>(half));
            row[i] = static_cast<T>(i % 2 == 0 ? std::sin(ypos * f) : std::cos(ypos * f));
            row[half + i] = static_cast<T>(i % 2 == 0 ? std::sin(xpos * f) : std::cos(xpos * f));
        }
    }
    return Tensor<T>({n, d_model}, std::move(out));
}

}  // namespace repformer
