#pragma once

// Plain-loop reference implementations over std::vector<double>, written
// independently of the library's tensor ops.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "repformer/repformer.hpp"

namespace oracle {

using Vec = std::vector<double>;

template <typename T>
Vec values(const repformer::Tensor<T>& t) {
    return Vec(t.data().begin(), t.data().end());
}

inline double max_abs_diff(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// [m,k] x [k,n]
inline Vec matmul(const Vec& a, const Vec& b, std::size_t m, std::size_t k, std::size_t n) {
    Vec c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0;
            for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            c[i * n + j] = s;
        }
    return c;
}

// rows x d, W [d, out], b [out]
template <typename T>
Vec linear(const Vec& x, std::size_t rows, const repformer::Linear<T>& l) {
    const std::size_t in = l.weight.dim(0), out = l.weight.dim(1);
    Vec y = matmul(x, values(l.weight), rows, in, out);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < out; ++j) y[r * out + j] += static_cast<double>(l.bias.at(j));
    return y;
}

inline Vec softmax_row(const Vec& x) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : x) mx = std::max(mx, v);
    Vec e(x.size());
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (e[i] = std::exp(x[i] - mx));
    for (double& v : e) v /= s;
    return e;
}

inline Vec layer_norm(const Vec& x, std::size_t rows, std::size_t d, const Vec& gain, const Vec& bias,
                      double eps = 1e-5) {
    Vec y(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        double mean = 0, var = 0;
        for (std::size_t j = 0; j < d; ++j) mean += x[r * d + j];
        mean /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) var += (x[r * d + j] - mean) * (x[r * d + j] - mean);
        var /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j)
            y[r * d + j] = (x[r * d + j] - mean) / std::sqrt(var + eps) * gain[j] + bias[j];
    }
    return y;
}

template <typename T>
Vec layer_norm(const Vec& x, std::size_t rows, const repformer::LayerNormParams<T>& p) {
    return layer_norm(x, rows, p.gain.numel(), values(p.gain), values(p.bias));
}

template <typename T>
Vec ffn(const Vec& x, std::size_t rows, const repformer::FfnParams<T>& p) {
    Vec h = linear(x, rows, p.in);
    for (double& v : h) v = std::max(v, 0.0);
    return linear(h, rows, p.out);
}

// Per-head loops over explicit index arithmetic.
template <typename T>
Vec mha(const Vec& q, std::size_t lq, const Vec& k, const Vec& v, std::size_t lk,
        const repformer::MhaParams<T>& p) {
    const std::size_t d = p.d_model(), h = p.n_heads, dh = d / h;
    const Vec qp = linear(q, lq, p.q), kp = linear(k, lk, p.k), vp = linear(v, lk, p.v);
    Vec concat(lq * d, 0.0);
    for (std::size_t head = 0; head < h; ++head)
        for (std::size_t i = 0; i < lq; ++i) {
            Vec logits(lk);
            for (std::size_t j = 0; j < lk; ++j) {
                double s = 0;
                for (std::size_t c = 0; c < dh; ++c) s += qp[i * d + head * dh + c] * kp[j * d + head * dh + c];
                logits[j] = s / std::sqrt(static_cast<double>(dh));
            }
            const Vec w = softmax_row(logits);
            for (std::size_t c = 0; c < dh; ++c) {
                double s = 0;
                for (std::size_t j = 0; j < lk; ++j) s += w[j] * vp[j * d + head * dh + c];
                concat[i * d + head * dh + c] = s;
            }
        }
    return linear(concat, lq, p.o);
}

// x [h,w,cin], w [kh,kw,cin,cout], zero padding
inline Vec conv2d(const Vec& x, std::size_t h, std::size_t w, std::size_t cin, const Vec& wt, std::size_t kh,
                  std::size_t kw, std::size_t cout, const Vec& bias, std::size_t stride, std::size_t pad,
                  std::size_t& ho, std::size_t& wo) {
    ho = (h + 2 * pad - kh) / stride + 1;
    wo = (w + 2 * pad - kw) / stride + 1;
    Vec y(ho * wo * cout, 0.0);
    for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox)
            for (std::size_t co = 0; co < cout; ++co) {
                double s = bias.empty() ? 0.0 : bias[co];
                for (std::size_t ky = 0; ky < kh; ++ky)
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                        if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                        for (std::size_t ci = 0; ci < cin; ++ci)
                            s += x[(static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin + ci] *
                                 wt[((ky * kw + kx) * cin + ci) * cout + co];
                    }
                y[(oy * wo + ox) * cout + co] = s;
            }
    return y;
}

// Half-pixel-center bilinear resize, source coordinates clamped into the image.
inline Vec bilinear(const Vec& x, std::size_t h, std::size_t w, std::size_t c, std::size_t H, std::size_t W) {
    auto src = [](std::size_t o, std::size_t in, std::size_t out) {
        double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
        return std::clamp(s, 0.0, static_cast<double>(in - 1));
    };
    Vec y(H * W * c);
    for (std::size_t oy = 0; oy < H; ++oy)
        for (std::size_t ox = 0; ox < W; ++ox) {
            const double sy = src(oy, h, H), sx = src(ox, w, W);
            const std::size_t y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
            const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
            for (std::size_t ch = 0; ch < c; ++ch) {
                auto at = [&](std::size_t yy, std::size_t xx) { return x[(yy * w + xx) * c + ch]; };
                y[(oy * W + ox) * c + ch] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                                            fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
            }
        }
    return y;
}

// coords [n,2], memory [p,d], pixels [p,2]; returns queries, fills weights [n,p]
inline Vec aggregate(const Vec& coords, std::size_t n, const Vec& memory, std::size_t p, std::size_t d,
                     const Vec& pixels, double tau, Vec* weights = nullptr) {
    Vec q(n * d, 0.0);
    if (weights) weights->assign(n * p, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        Vec logits(p);
        for (std::size_t k = 0; k < p; ++k) {
            const double dx = coords[2 * j] - pixels[2 * k], dy = coords[2 * j + 1] - pixels[2 * k + 1];
            logits[k] = -tau * (dx * dx + dy * dy);
        }
        const Vec s = softmax_row(logits);
        for (std::size_t k = 0; k < p; ++k) {
            if (weights) (*weights)[j * p + k] = s[k];
            for (std::size_t c = 0; c < d; ++c) q[j * d + c] += s[k] * memory[k * d + c];
        }
    }
    return q;
}

// DETR-style sine/cosine table recomputed from its definition.
inline Vec sincos(std::size_t h, std::size_t w, std::size_t d) {
    const std::size_t half = d / 2;
    Vec out(h * w * d);
    const double two_pi = 2 * std::acos(-1.0);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
            for (std::size_t i = 0; i < half; ++i) {
                const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / static_cast<double>(half));
                const double pr = (static_cast<double>(r) + 1) / static_cast<double>(h) * two_pi * freq;
                const double pc = (static_cast<double>(c) + 1) / static_cast<double>(w) * two_pi * freq;
                out[(r * w + c) * d + i] = i % 2 == 0 ? std::sin(pr) : std::cos(pr);
                out[(r * w + c) * d + half + i] = i % 2 == 0 ? std::sin(pc) : std::cos(pc);
            }
    return out;
}

// One fused level: z [h*w,d], upper memory [hu*wu,d].
template <typename T>
Vec cross_scale_level(const Vec& z, std::size_t h, std::size_t w, const Vec& upper, std::size_t hu, std::size_t wu,
                      std::size_t d, const repformer::CrossScaleLevel<T>& p) {
    const std::size_t n = h * w;
    const Vec up = bilinear(upper, hu, wu, d, h, w);
    const Vec pos = sincos(h, w, d);
    Vec v_hat(n * d), q(n * d), k(n * d);
    for (std::size_t i = 0; i < n * d; ++i) {
        v_hat[i] = z[i] * up[i];
        q[i] = z[i] + pos[i];
        k[i] = v_hat[i] + pos[i];
    }
    const Vec attn = mha(q, n, k, v_hat, n, p.attn);
    Vec r(n * d);
    for (std::size_t i = 0; i < n * d; ++i) r[i] = z[i] + attn[i];
    const Vec z_hat = layer_norm(r, n, p.ln_attn);
    const Vec f = ffn(z_hat, n, p.ffn);
    for (std::size_t i = 0; i < n * d; ++i) r[i] = z_hat[i] + f[i];
    return layer_norm(r, n, p.ln_ffn);
}

template <typename T>
Vec decoder_stage(const Vec& e, std::size_t n, const Vec& memory, std::size_t p, std::size_t d,
                  const repformer::DecoderStageParams<T>& prm) {
    Vec r(n * d);
    const Vec sa = mha(e, n, e, e, n, prm.self_attn);
    for (std::size_t i = 0; i < n * d; ++i) r[i] = e[i] + sa[i];
    const Vec x = layer_norm(r, n, prm.ln_self);
    const Vec ca = mha(x, n, memory, memory, p, prm.cross_attn);
    for (std::size_t i = 0; i < n * d; ++i) r[i] = x[i] + ca[i];
    const Vec y = layer_norm(r, n, prm.ln_cross);
    const Vec f = ffn(y, n, prm.ffn);
    for (std::size_t i = 0; i < n * d; ++i) r[i] = y[i] + f[i];
    return layer_norm(r, n, prm.ln_ffn);
}

}  // namespace oracle
