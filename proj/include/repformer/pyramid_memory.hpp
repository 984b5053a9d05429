#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "repformer/backbone.hpp"
#include "repformer/nn.hpp"

namespace repformer {

/// Normalized (x, y) centers of an h x w grid, row-major:
/// x = (col + 0.5) / w, y = (row + 0.5) / h. Shape [h*w, 2].
template <typename T>
Tensor<T> pixel_centers(std::size_t h, std::size_t w) {
    std::vector<T> out(h * w * 2);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            out[(r * w + c) * 2] = static_cast<T>((static_cast<double>(c) + 0.5) / static_cast<double>(w));
            out[(r * w + c) * 2 + 1] = static_cast<T>((static_cast<double>(r) + 0.5) / static_cast<double>(h));
        }
    return Tensor<T>({h * w, 2}, std::move(out));
}

/// Attention + FFN sublayers fusing one level with the memory above it.
template <typename T>
struct CrossScaleLevel {
    MhaParams<T> attn;
    LayerNormParams<T> ln_attn;
    FfnParams<T> ffn;
    LayerNormParams<T> ln_ffn;
};

template <typename T>
struct CrossScaleParams {
    std::vector<CrossScaleLevel<T>> levels;  // levels[i - 1] builds v_i, i = 1..M-1

    static CrossScaleParams init(std::size_t depth, std::size_t d_model, std::size_t n_heads,
                                 std::size_t d_ff, Rng& rng) {
        CrossScaleParams p;
        for (std::size_t i = 0; i + 1 < depth; ++i) {
            CrossScaleLevel<T> l;
            l.attn = MhaParams<T>::init(d_model, n_heads, rng);
            l.ln_attn = LayerNormParams<T>::identity(d_model);
            l.ffn = FfnParams<T>::init(d_model, d_ff, d_model, rng);
            l.ln_ffn = LayerNormParams<T>::identity(d_model);
            p.levels.push_back(std::move(l));
        }
        return p;
    }

    void collect(NamedTensors<T>& out, const std::string& prefix, std::size_t from_level = 1) const {
        for (std::size_t i = from_level - 1; i < levels.size(); ++i) {
            const std::string s = prefix + ".level" + std::to_string(i + 1);
            levels[i].attn.collect(out, s + ".attn");
            levels[i].ln_attn.collect(out, s + ".ln_attn");
            levels[i].ffn.collect(out, s + ".ffn");
            levels[i].ln_ffn.collect(out, s + ".ln_ffn");
        }
    }
};

template <typename T>
struct MemoryLevel {
    Tensor<T> memory;        // [h*w, d], row-major pixels; undefined if not built
    std::size_t h = 0, w = 0;
    Tensor<T> pixel_coords;  // [h*w, 2]

    bool built() const { return memory.defined(); }

    Tensor<T> grid() const { return reshape(memory, {h, w, memory.dim(1)}); }
};

/// Memories v_1..v_M with the same resolutions as z_1..z_M.
template <typename T>
struct MemoryPyramid {
    std::vector<MemoryLevel<T>> levels;  // levels[i - 1] holds v_i

    std::size_t depth() const { return levels.size(); }

    const MemoryLevel<T>& level(std::size_t i) const {
        const auto& l = levels.at(i - 1);
        if (!l.built()) throw ShapeMismatch("memory level " + std::to_string(i) + " was not built");
        return l;
    }
};

/// Memory pyramid without cross-scale fusion: only v_M = z_M is populated.
template <typename T>
MemoryPyramid<T> top_level_memory(const FeaturePyramid<T>& z) {
    MemoryPyramid<T> v;
    v.levels.resize(z.depth());
    const auto& top = z.levels.back();
    auto& l = v.levels.back();
    l.h = top.dim(0);
    l.w = top.dim(1);
    l.memory = reshape(top, {l.h * l.w, top.dim(2)});
    l.pixel_coords = pixel_centers<T>(l.h, l.w);
    return v;
}

/// Top-down cross-scale attention. For i = M-1 down to `lowest_level`:
///   v_bar = upsample(v_{i+1});  v_hat = z_i * v_bar
///   z_hat = LN(z_i + MHA(z_i + p_i, v_hat + p_i, v_hat))
///   v_i   = LN(z_hat + FFN(z_hat))
/// and v_M = z_M. Levels below `lowest_level` are left unbuilt.
template <typename T>
MemoryPyramid<T> build_memories(const FeaturePyramid<T>& z, const CrossScaleParams<T>& params,
                                std::size_t lowest_level = 1) {
    const std::size_t m = z.depth();
    if (m == 0) throw ShapeMismatch("empty feature pyramid");
    if (params.levels.size() + 1 != m)
        throw ShapeMismatch("cross-scale params cover " + std::to_string(params.levels.size() + 1) +
                            " levels, pyramid has " + std::to_string(m));
    MemoryPyramid<T> v = top_level_memory(z);
    const std::size_t d = z.levels.back().dim(2);
    for (std::size_t i = m - 1; i >= std::max<std::size_t>(lowest_level, 1); --i) {
        const Tensor<T>& zi = z.level(i);
        if (zi.rank() != 3 || zi.dim(2) != d) throw ShapeMismatch("pyramid level width mismatch");
        const std::size_t h = zi.dim(0), w = zi.dim(1);
        const auto& upper = v.levels[i];
        const auto& lp = params.levels[i - 1];
        Tensor<T> v_bar = reshape(bilinear_upsample(upper.grid(), h, w), {h * w, d});
        Tensor<T> z_flat = reshape(zi, {h * w, d});
        Tensor<T> v_hat = mul(z_flat, v_bar);
        Tensor<T> pos = sincos_pos2d<T>(h, w, d);
        Tensor<T> attn = mha(add(z_flat, pos), add(v_hat, pos), v_hat, lp.attn).output;
        Tensor<T> z_hat = lp.ln_attn(add(z_flat, attn));
        auto& out = v.levels[i - 1];
        out.h = h;
        out.w = w;
        out.memory = lp.ln_ffn(add(z_hat, lp.ffn(z_hat)));
        out.pixel_coords = pixel_centers<T>(h, w);
        if (i == 1) break;
    }
    return v;
}

}  // namespace repformer
