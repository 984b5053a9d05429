#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "repformer/errors.hpp"
#include "repformer/tensor.hpp"

namespace repformer {

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    for (std::size_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T av = arow[i];
            T* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T. B is transposed into scratch first so the
// inner loop stays a contiguous axpy.
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             std::vector<T>& scratch) {
    scratch.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p) scratch[p * n + j] = b[j * k + p];
    gemm_nn(m, n, k, a, scratch.data(), c);
}

inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeMismatch(std::string(op) + ": cannot broadcast " + to_string(a) + " with " +
                                to_string(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// For each flat index of `out`, the flat index into a tensor of shape `in`
// broadcast against it.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
    const std::size_t n = numel(out);
    std::vector<std::size_t> idx(n);
    if (in == out) {
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        return idx;
    }
    const std::size_t nin = numel(in);
    // Suffix broadcast (bias-style): `in` equals the trailing dims of `out`.
    if (in.size() <= out.size() && std::equal(in.begin(), in.end(), out.end() - in.size())) {
        for (std::size_t i = 0; i < n; ++i) idx[i] = i % nin;
        return idx;
    }
    const std::size_t r = out.size();
    Shape padded(r, 1);
    std::copy(in.begin(), in.end(), padded.begin() + (r - in.size()));
    const Shape in_strides = row_major_strides(padded);
    Shape stride(r);
    for (std::size_t d = 0; d < r; ++d) stride[d] = padded[d] == 1 ? 0 : in_strides[d];
    Shape counter(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
        idx[i] = off;
        for (std::size_t d = r; d-- > 0;) {
            ++counter[d];
            off += stride[d];
            if (counter[d] < out[d]) break;
            off -= stride[d] * counter[d];
            counter[d] = 0;
        }
    }
    return idx;
}

// Splits `shape` around `axis` into (outer, length, inner) extents.
struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
    s.len = shape[axis];
    for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
    return s;
}

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, std::string_view op, Fwd f, Da da, Db db) {
    Shape out_shape = broadcast_shapes(a.shape(), b.shape(), op.data());
    const std::size_t n = numel(out_shape);
    auto ia = broadcast_index(a.shape(), out_shape);
    auto ib = broadcast_index(b.shape(), out_shape);
    const auto av = a.data();
    const auto bv = b.data();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[ia[i]], bv[ib[i]]);
    return make_result<T>(
        std::move(out_shape), std::move(out), {a.node(), b.node()}, op,
        [ia = std::move(ia), ib = std::move(ib), da, db](Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            const std::size_t n = self.grad.size();
            if (pa.requires_grad) {
                auto& g = pa.ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    g[ia[i]] += da(pa.value[ia[i]], pb.value[ib[i]], self.grad[i]);
            }
            if (pb.requires_grad) {
                auto& g = pb.ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    g[ib[i]] += db(pa.value[ia[i]], pb.value[ib[i]], self.grad[i]);
            }
        });
}

// Elementwise map with derivative expressed through input x and output y.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, std::string_view op, Fwd f, Deriv dfdx) {
    const auto xv = x.data();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    return make_result<T>(x.shape(), std::move(out), {x.node()}, op, [dfdx](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& g = px.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * dfdx(px.value[i], self.value[i]);
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy broadcasting)

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(
        a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T g) { return g; },
        [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(
        a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T g) { return g; },
        [](T, T, T g) { return -g; });
}

/// Hadamard product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(
        a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
        [](T x, T, T g) { return g * x; });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    return detail::unary(
        x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
    return detail::unary(
        x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) { return scale(x, T(-1)); }

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return detail::unary(
        x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary(
        x, "relu", [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary(
        x, "sigmoid",
        [](T v) {
            if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
            const T e = std::exp(v);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
    return detail::unary(
        x, "abs", [](T v) { return std::abs(v); },
        [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = 0;
    for (T v : x.data()) s += v;
    return make_result<T>({1}, {s}, {x.node()}, "sum", [](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim = false) {
    const std::size_t ax = x.normalize_axis(axis);
    const auto s = detail::split_axis(x.shape(), ax);
    Shape out_shape = x.shape();
    if (keepdim) out_shape[ax] = 1;
    else out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    if (out_shape.empty()) out_shape = {1};
    const auto xv = x.data();
    std::vector<T> out(s.outer * s.inner, T(0));
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t l = 0; l < s.len; ++l)
            for (std::size_t i = 0; i < s.inner; ++i)
                out[o * s.inner + i] += xv[(o * s.len + l) * s.inner + i];
    return make_result<T>(std::move(out_shape), std::move(out), {x.node()}, "sum_axis",
                          [s](Node<T>& self) {
                              auto& g = self.parents[0]->ensure_grad();
                              for (std::size_t o = 0; o < s.outer; ++o)
                                  for (std::size_t l = 0; l < s.len; ++l)
                                      for (std::size_t i = 0; i < s.inner; ++i)
                                          g[(o * s.len + l) * s.inner + i] += self.grad[o * s.inner + i];
                          });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim = false) {
    return scale(sum(x, axis, keepdim), T(1) / static_cast<T>(x.dim(axis)));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.numel())
        throw ShapeMismatch("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
    std::vector<T> out(x.data().begin(), x.data().end());
    return make_result<T>(std::move(shape), std::move(out), {x.node()}, "reshape",
                          [](Node<T>& self) {
                              auto& g = self.parents[0]->ensure_grad();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                          });
}

/// General axis permutation: output dim d is input dim axes[d].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
    const std::size_t r = x.rank();
    if (axes.size() != r) throw ShapeMismatch("permute: axes rank mismatch");
    std::vector<bool> used(r, false);
    for (auto a : axes) {
        if (a >= r || used[a]) throw ShapeMismatch("permute: invalid axes");
        used[a] = true;
    }
    Shape out_shape(r);
    for (std::size_t d = 0; d < r; ++d) out_shape[d] = x.shape()[axes[d]];
    const Shape in_strides = row_major_strides(x.shape());
    Shape stride(r);
    for (std::size_t d = 0; d < r; ++d) stride[d] = in_strides[axes[d]];
    const std::size_t n = x.numel();
    std::vector<std::size_t> src(n);
    Shape counter(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
        src[i] = off;
        for (std::size_t d = r; d-- > 0;) {
            ++counter[d];
            off += stride[d];
            if (counter[d] < out_shape[d]) break;
            off -= stride[d] * counter[d];
            counter[d] = 0;
        }
    }
    const auto xv = x.data();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = xv[src[i]];
    return make_result<T>(std::move(out_shape), std::move(out), {x.node()}, "permute",
                          [src = std::move(src)](Node<T>& self) {
                              auto& g = self.parents[0]->ensure_grad();
                              for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
                          });
}

/// Swaps the last two dimensions.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    if (x.rank() < 2) throw ShapeMismatch("transpose needs rank >= 2");
    std::vector<std::size_t> axes(x.rank());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
    return permute(x, axes);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ShapeMismatch("concat of zero tensors");
    const std::size_t ax = parts[0].normalize_axis(axis);
    Shape out_shape = parts[0].shape();
    out_shape[ax] = 0;
    for (const auto& p : parts) {
        if (p.rank() != out_shape.size()) throw ShapeMismatch("concat: rank mismatch");
        for (std::size_t d = 0; d < p.rank(); ++d)
            if (d != ax && p.shape()[d] != out_shape[d])
                throw ShapeMismatch("concat: " + to_string(p.shape()) + " vs " +
                                    to_string(parts[0].shape()));
        out_shape[ax] += p.shape()[ax];
    }
    const auto s = detail::split_axis(out_shape, ax);
    std::vector<T> out(numel(out_shape));
    std::vector<std::size_t> offsets;
    std::vector<detail::NodePtr<T>> nodes;
    std::size_t at = 0;
    for (const auto& p : parts) {
        const std::size_t len = p.shape()[ax];
        const auto pv = p.data();
        for (std::size_t o = 0; o < s.outer; ++o)
            std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner), len * s.inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * s.len + at) * s.inner));
        offsets.push_back(at);
        nodes.push_back(p.node());
        at += len;
    }
    return make_result<T>(std::move(out_shape), std::move(out), std::move(nodes), "concat",
                          [s, offsets = std::move(offsets)](Node<T>& self) {
                              for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                  auto& p = *self.parents[k];
                                  if (!p.requires_grad) continue;
                                  auto& g = p.ensure_grad();
                                  const std::size_t len = g.size() / (s.outer * s.inner);
                                  for (std::size_t o = 0; o < s.outer; ++o)
                                      for (std::size_t j = 0; j < len * s.inner; ++j)
                                          g[o * len * s.inner + j] +=
                                              self.grad[(o * s.len + offsets[k]) * s.inner + j];
                              }
                          });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product a[..., m, k] x b[..., k, n] with broadcast batch dims.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeMismatch("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " and " +
                            to_string(b.shape()));
    const std::size_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
    if (k != k2)
        throw ShapeMismatch("matmul inner dims differ: " + to_string(a.shape()) + " x " +
                            to_string(b.shape()));
    const Shape abatch(a.shape().begin(), a.shape().end() - 2);
    const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    const Shape batch = detail::broadcast_shapes(abatch, bbatch, "matmul");
    const auto ia = detail::broadcast_index(abatch, batch);
    const auto ib = detail::broadcast_index(bbatch, batch);
    const std::size_t nb = numel(batch);
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<T> out(nb * m * n, T(0));
    const T* av = a.data().data();
    const T* bv = b.data().data();
    for (std::size_t t = 0; t < nb; ++t)
        detail::gemm_nn(m, n, k, av + ia[t] * m * k, bv + ib[t] * k * n, out.data() + t * m * n);
    return make_result<T>(
        std::move(out_shape), std::move(out), {a.node(), b.node()}, "matmul",
        [ia, ib, m, n, k](Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            std::vector<T> scratch;
            const T* g = self.grad.data();
            if (pa.requires_grad) {
                auto& ga = pa.ensure_grad();
                for (std::size_t t = 0; t < ia.size(); ++t)
                    detail::gemm_nt(m, k, n, g + t * m * n, pb.value.data() + ib[t] * k * n,
                                    ga.data() + ia[t] * m * k, scratch);
            }
            if (pb.requires_grad) {
                auto& gb = pb.ensure_grad();
                for (std::size_t t = 0; t < ib.size(); ++t)
                    detail::gemm_tn(k, n, m, pa.value.data() + ia[t] * m * k, g + t * m * n,
                                    gb.data() + ib[t] * k * n);
            }
        });
}

/// Numerically stable softmax along `axis` (max subtraction).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
    const std::size_t ax = x.normalize_axis(axis);
    const auto s = detail::split_axis(x.shape(), ax);
    const auto xv = x.data();
    std::vector<T> out(xv.size());
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.len * s.inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, xv[base + l * s.inner]);
            T total = 0;
            for (std::size_t l = 0; l < s.len; ++l) {
                const T e = std::exp(xv[base + l * s.inner] - mx);
                out[base + l * s.inner] = e;
                total += e;
            }
            for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= total;
        }
    return make_result<T>(x.shape(), std::move(out), {x.node()}, "softmax", [s](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        const auto& y = self.value;
        const auto& gy = self.grad;
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t base = o * s.len * s.inner + i;
                T dot = 0;
                for (std::size_t l = 0; l < s.len; ++l) dot += gy[base + l * s.inner] * y[base + l * s.inner];
                for (std::size_t l = 0; l < s.len; ++l) {
                    const std::size_t j = base + l * s.inner;
                    g[j] += y[j] * (gy[j] - dot);
                }
            }
    });
}

/// Squared euclidean distance between every row of a[N,D] and every row of b[P,D].
template <typename T>
Tensor<T> pairwise_sqdist(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw ShapeMismatch("pairwise_sqdist: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    const std::size_t n = a.dim(0), p = b.dim(0), d = a.dim(1);
    const auto av = a.data();
    const auto bv = b.data();
    std::vector<T> out(n * p);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < p; ++j) {
            T acc = 0;
            for (std::size_t c = 0; c < d; ++c) {
                const T diff = av[i * d + c] - bv[j * d + c];
                acc += diff * diff;
            }
            out[i * p + j] = acc;
        }
    return make_result<T>({n, p}, std::move(out), {a.node(), b.node()}, "pairwise_sqdist",
                          [n, p, d](Node<T>& self) {
                              auto& pa = *self.parents[0];
                              auto& pb = *self.parents[1];
                              T* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
                              T* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
                              for (std::size_t i = 0; i < n; ++i)
                                  for (std::size_t j = 0; j < p; ++j) {
                                      const T g = self.grad[i * p + j];
                                      for (std::size_t c = 0; c < d; ++c) {
                                          const T t = T(2) * g * (pa.value[i * d + c] - pb.value[j * d + c]);
                                          if (ga) ga[i * d + c] += t;
                                          if (gb) gb[j * d + c] -= t;
                                      }
                                  }
                          });
}

/// Mean absolute difference. The subgradient at zero difference is 0.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape())
        throw ShapeMismatch("l1_loss: " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
    return mean(abs(sub(pred, target)));
}

// ---------------------------------------------------------------------------
// Normalization, convolution, resampling

/// Layer normalization over the last dimension: (x - mean) / sqrt(var + eps) * gain + bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
    const std::size_t d = x.dim(-1);
    if (gain.numel() != d || bias.numel() != d)
        throw ShapeMismatch("layer_norm affine width mismatch for " + to_string(x.shape()));
    const std::size_t rows = x.numel() / d;
    const auto xv = x.data();
    const auto gv = gain.data();
    const auto bv = bias.data();
    std::vector<T> out(xv.size()), xhat(xv.size()), rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * d;
        T mu = 0;
        for (std::size_t c = 0; c < d; ++c) mu += row[c];
        mu /= static_cast<T>(d);
        T var = 0;
        for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
        var /= static_cast<T>(d);
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) {
            const T h = (row[c] - mu) * rstd[r];
            xhat[r * d + c] = h;
            out[r * d + c] = h * gv[c] + bv[c];
        }
    }
    return make_result<T>(
        x.shape(), std::move(out), {x.node(), gain.node(), bias.node()}, "layer_norm",
        [xhat = std::move(xhat), rstd = std::move(rstd), d, rows](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            const auto& gy = self.grad;
            if (pg.requires_grad) {
                auto& g = pg.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < d; ++c) g[c] += gy[r * d + c] * xhat[r * d + c];
            }
            if (pb.requires_grad) {
                auto& g = pb.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < d; ++c) g[c] += gy[r * d + c];
            }
            if (px.requires_grad) {
                auto& g = px.ensure_grad();
                const auto& gain = pg.value;
                for (std::size_t r = 0; r < rows; ++r) {
                    T mean_dh = 0, mean_dh_h = 0;
                    for (std::size_t c = 0; c < d; ++c) {
                        const T dh = gy[r * d + c] * gain[c];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * d + c];
                    }
                    mean_dh /= static_cast<T>(d);
                    mean_dh_h /= static_cast<T>(d);
                    for (std::size_t c = 0; c < d; ++c) {
                        const T dh = gy[r * d + c] * gain[c];
                        g[r * d + c] += rstd[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_h);
                    }
                }
            }
        });
}

/// Unfolds kernel-sized patches of x[H,W,C] into rows of [Ho*Wo, kh*kw*C]
/// (zero padding). Patch element order is (ky, kx, c).
template <typename T>
Tensor<T> im2col(const Tensor<T>& x, std::size_t kh, std::size_t kw, std::size_t stride,
                 std::size_t pad) {
    if (x.rank() != 3) throw ShapeMismatch("im2col expects [H,W,C], got " + to_string(x.shape()));
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw)
        throw ShapeMismatch("im2col: kernel larger than padded input " + to_string(x.shape()));
    const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
    const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
    const std::size_t cols = kh * kw * c;
    // Source offset per output element, or npos for padding.
    constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
    std::vector<std::size_t> src(ho * wo * cols);
    for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox)
            for (std::size_t ky = 0; ky < kh; ++ky)
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                              static_cast<std::ptrdiff_t>(pad);
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                              static_cast<std::ptrdiff_t>(pad);
                    const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                        ix < static_cast<std::ptrdiff_t>(w);
                    std::size_t* dst = &src[((oy * wo + ox) * kh * kw + ky * kw + kx) * c];
                    for (std::size_t ch = 0; ch < c; ++ch)
                        dst[ch] = inside ? (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c + ch
                                         : npos;
                }
    const auto xv = x.data();
    std::vector<T> out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = src[i] == npos ? T(0) : xv[src[i]];
    return make_result<T>({ho * wo, cols}, std::move(out), {x.node()}, "im2col",
                          [src = std::move(src)](Node<T>& self) {
                              auto& g = self.parents[0]->ensure_grad();
                              for (std::size_t i = 0; i < src.size(); ++i)
                                  if (src[i] != npos) g[src[i]] += self.grad[i];
                          });
}

/// 2-D cross-correlation of x[H,W,Cin] with weight[kh,kw,Cin,Cout] plus
/// optional bias[Cout]; returns [Ho,Wo,Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
    if (x.rank() != 3 || weight.rank() != 4 || weight.dim(2) != x.dim(2))
        throw ShapeMismatch("conv2d: input " + to_string(x.shape()) + " vs weight " +
                            to_string(weight.shape()));
    const std::size_t kh = weight.dim(0), kw = weight.dim(1), cin = weight.dim(2), cout = weight.dim(3);
    if (bias.defined() && bias.numel() != cout)
        throw ShapeMismatch("conv2d: bias width " + std::to_string(bias.numel()) + " != " +
                            std::to_string(cout));
    const std::size_t ho = (x.dim(0) + 2 * pad - kh) / stride + 1;
    const std::size_t wo = (x.dim(1) + 2 * pad - kw) / stride + 1;
    Tensor<T> cols = (kh == 1 && kw == 1 && stride == 1 && pad == 0)
                         ? reshape(x, {x.dim(0) * x.dim(1), cin})
                         : im2col(x, kh, kw, stride, pad);
    Tensor<T> y = matmul(cols, reshape(weight, {kh * kw * cin, cout}));
    if (bias.defined()) y = add(y, bias);
    return reshape(y, {ho, wo, cout});
}

namespace detail {

struct Interp {
    std::size_t i0, i1;
    double w1;  // weight of i1; i0 gets 1 - w1
};

// Source taps for resizing `in` samples to `out` (half-pixel centers,
// negative source positions clamped to zero).
inline std::vector<Interp> interp_taps(std::size_t in, std::size_t out) {
    std::vector<Interp> taps(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
        if (src < 0) src = 0;
        std::size_t i0 = static_cast<std::size_t>(src);
        if (i0 > in - 1) i0 = in - 1;
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        taps[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return taps;
}

}  // namespace detail

/// Bilinear resize of x[h,w,c] to [H,W,c] with the align-corners-false convention.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    if (x.rank() != 3) throw ShapeMismatch("bilinear_upsample expects [h,w,c], got " + to_string(x.shape()));
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (out_h < h || out_w < w)
        throw BadTarget("bilinear_upsample target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                        " smaller than input " + std::to_string(h) + "x" + std::to_string(w));
    const auto ty = detail::interp_taps(h, out_h);
    const auto tx = detail::interp_taps(w, out_w);
    const auto xv = x.data();
    std::vector<T> out(out_h * out_w * c);
    for (std::size_t oy = 0; oy < out_h; ++oy)
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            const T wy1 = static_cast<T>(ty[oy].w1), wy0 = T(1) - wy1;
            const T wx1 = static_cast<T>(tx[ox].w1), wx0 = T(1) - wx1;
            const T* p00 = &xv[(ty[oy].i0 * w + tx[ox].i0) * c];
            const T* p01 = &xv[(ty[oy].i0 * w + tx[ox].i1) * c];
            const T* p10 = &xv[(ty[oy].i1 * w + tx[ox].i0) * c];
            const T* p11 = &xv[(ty[oy].i1 * w + tx[ox].i1) * c];
            T* dst = &out[(oy * out_w + ox) * c];
            for (std::size_t ch = 0; ch < c; ++ch)
                dst[ch] = wy0 * (wx0 * p00[ch] + wx1 * p01[ch]) + wy1 * (wx0 * p10[ch] + wx1 * p11[ch]);
        }
    return make_result<T>({out_h, out_w, c}, std::move(out), {x.node()}, "bilinear_upsample",
                          [ty, tx, w, c, out_w](Node<T>& self) {
                              auto& g = self.parents[0]->ensure_grad();
                              for (std::size_t oy = 0; oy < ty.size(); ++oy)
                                  for (std::size_t ox = 0; ox < out_w; ++ox) {
                                      const T wy1 = static_cast<T>(ty[oy].w1), wy0 = T(1) - wy1;
                                      const T wx1 = static_cast<T>(tx[ox].w1), wx0 = T(1) - wx1;
                                      const T* gy = &self.grad[(oy * out_w + ox) * c];
                                      T* g00 = &g[(ty[oy].i0 * w + tx[ox].i0) * c];
                                      T* g01 = &g[(ty[oy].i0 * w + tx[ox].i1) * c];
                                      T* g10 = &g[(ty[oy].i1 * w + tx[ox].i0) * c];
                                      T* g11 = &g[(ty[oy].i1 * w + tx[ox].i1) * c];
                                      for (std::size_t ch = 0; ch < c; ++ch) {
                                          g00[ch] += wy0 * wx0 * gy[ch];
                                          g01[ch] += wy0 * wx1 * gy[ch];
                                          g10[ch] += wy1 * wx0 * gy[ch];
                                          g11[ch] += wy1 * wx1 * gy[ch];
                                      }
                                  }
                          });
}

}  // namespace repformer
