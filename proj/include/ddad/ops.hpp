#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "ddad/error.hpp"
#include "ddad/gemm.hpp"
#include "ddad/tensor.hpp"

namespace ddad {

enum class ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
    Square,
    Abs,
    Neg,
    Log,
    Sqrt,
    Exp,
    Sigmoid,
};

inline bool is_binary(ElementwiseKind kind) {
    return kind == ElementwiseKind::Add || kind == ElementwiseKind::Sub ||
           kind == ElementwiseKind::Mul || kind == ElementwiseKind::Div;
}

inline const char* name_of(ElementwiseKind kind) {
    switch (kind) {
    case ElementwiseKind::Add: return "add";
    case ElementwiseKind::Sub: return "sub";
    case ElementwiseKind::Mul: return "mul";
    case ElementwiseKind::Div: return "div";
    case ElementwiseKind::Square: return "square";
    case ElementwiseKind::Abs: return "abs";
    case ElementwiseKind::Neg: return "neg";
    case ElementwiseKind::Log: return "log";
    case ElementwiseKind::Sqrt: return "sqrt";
    case ElementwiseKind::Exp: return "exp";
    case ElementwiseKind::Sigmoid: return "sigmoid";
    }
    return "?";
}

namespace detail {

template <typename T>
std::span<T> grad_of(const std::shared_ptr<Node<T>>& node) {
    if (!node || !node->requires_grad) return {};
    return node->ensure_grad();
}

template <typename T>
T sigmoid_value(T v) {
    // Split by sign so exp never overflows.
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
}

} // namespace detail

/// Elementwise arithmetic. Binary kinds accept `b` with a's shape or a
/// single-element `b` broadcast over a. abs and relu use subgradient 0 at 0.
template <typename T>
Tensor<T> elementwise(ElementwiseKind kind, const Tensor<T>& a,
                      const std::optional<Tensor<T>>& b = std::nullopt) {
    using K = ElementwiseKind;
    const std::size_t n = a.numel();
    std::vector<T> out(n);
    const auto av = a.data();

    if (is_binary(kind)) {
        if (!b) throw ContractError(std::string(name_of(kind)) + ": missing second operand");
        const bool broadcast = b->numel() == 1 && a.numel() != 1;
        if (!broadcast && b->shape() != a.shape() && !(b->numel() == 1 && a.numel() == 1)) {
            throw ShapeError(std::string(name_of(kind)) + ": shape mismatch " +
                             to_string(a.shape()) + " vs " + to_string(b->shape()));
        }
        const auto bv = b->data();
        const auto bat = [&](std::size_t i) { return broadcast ? bv[0] : bv[i]; };
        switch (kind) {
        case K::Add: for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bat(i); break;
        case K::Sub: for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bat(i); break;
        case K::Mul: for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bat(i); break;
        case K::Div:
            for (std::size_t i = 0; i < n; ++i) {
                if (bat(i) == T(0)) throw DomainError("div: zero divisor at index " + std::to_string(i));
                out[i] = av[i] / bat(i);
            }
            break;
        default: break;
        }
        auto an = a.node();
        auto bn = b->node();
        return Tensor<T>::from_op(
            a.shape(), std::move(out), name_of(kind), {an, bn},
            [kind, an, bn, broadcast](const detail::Node<T>& self) {
                const T* g = self.grad.data();
                const T* x = an->data.data();
                const T* y = bn->data.data();
                const std::size_t n = self.grad.size();
                auto ga = detail::grad_of(an);
                auto gb = detail::grad_of(bn);
                // da[i] += g * fa(i); db[i or 0] += g * fb(i).
                const auto accumulate = [&](auto fa, auto fb) {
                    if (!ga.empty()) {
                        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * fa(i);
                    }
                    if (gb.empty()) return;
                    if (broadcast) {
                        T acc = T(0);
                        for (std::size_t i = 0; i < n; ++i) acc += g[i] * fb(i);
                        gb[0] += acc;
                    } else {
                        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * fb(i);
                    }
                };
                const auto yat = [&](std::size_t i) { return broadcast ? y[0] : y[i]; };
                switch (kind) {
                case K::Add: accumulate([](std::size_t) { return T(1); }, [](std::size_t) { return T(1); }); break;
                case K::Sub: accumulate([](std::size_t) { return T(1); }, [](std::size_t) { return T(-1); }); break;
                case K::Mul: accumulate(yat, [&](std::size_t i) { return x[i]; }); break;
                case K::Div:
                    accumulate([&](std::size_t i) { return T(1) / yat(i); },
                               [&](std::size_t i) { return -x[i] / (yat(i) * yat(i)); });
                    break;
                default: break;
                }
            });
    }

    for (std::size_t i = 0; i < n; ++i) {
        const T v = av[i];
        switch (kind) {
        case K::Square: out[i] = v * v; break;
        case K::Abs: out[i] = std::abs(v); break;
        case K::Neg: out[i] = -v; break;
        case K::Log:
            if (v < T(0)) throw DomainError("log: negative input at index " + std::to_string(i));
            out[i] = std::log(v);
            break;
        case K::Sqrt:
            if (v < T(0)) throw DomainError("sqrt: negative input at index " + std::to_string(i));
            out[i] = std::sqrt(v);
            break;
        case K::Exp: out[i] = std::exp(v); break;
        case K::Sigmoid: out[i] = detail::sigmoid_value(v); break;
        default: break;
        }
    }
    auto an = a.node();
    return Tensor<T>::from_op(
        a.shape(), std::move(out), name_of(kind), {an},
        [kind, an](const detail::Node<T>& self) {
            auto ga = detail::grad_of(an);
            const T* g = self.grad.data();
            const T* x = an->data.data();
            const T* y = self.data.data();
            T* dst = ga.data();
            const std::size_t n = ga.size();
            const auto accumulate = [&](auto local) {
                for (std::size_t i = 0; i < n; ++i) dst[i] += g[i] * local(i);
            };
            switch (kind) {
            case K::Square: accumulate([&](std::size_t i) { return T(2) * x[i]; }); break;
            case K::Abs:
                accumulate([&](std::size_t i) { return x[i] > T(0) ? T(1) : (x[i] < T(0) ? T(-1) : T(0)); });
                break;
            case K::Neg: accumulate([](std::size_t) { return T(-1); }); break;
            case K::Log: accumulate([&](std::size_t i) { return T(1) / x[i]; }); break;
            case K::Sqrt: accumulate([&](std::size_t i) { return T(1) / (T(2) * y[i]); }); break;
            case K::Exp: accumulate([&](std::size_t i) { return y[i]; }); break;
            case K::Sigmoid: accumulate([&](std::size_t i) { return y[i] * (T(1) - y[i]); }); break;
            default: break;
            }
        });
}

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise<T>(ElementwiseKind::Add, a, b); }
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise<T>(ElementwiseKind::Sub, a, b); }
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise<T>(ElementwiseKind::Mul, a, b); }
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return elementwise<T>(ElementwiseKind::Div, a, b); }
template <typename T> Tensor<T> square(const Tensor<T>& a) { return elementwise<T>(ElementwiseKind::Square, a); }
template <typename T> Tensor<T> abs(const Tensor<T>& a) { return elementwise<T>(ElementwiseKind::Abs, a); }
template <typename T> Tensor<T> neg(const Tensor<T>& a) { return elementwise<T>(ElementwiseKind::Neg, a); }
template <typename T> Tensor<T> log(const Tensor<T>& a) { return elementwise<T>(ElementwiseKind::Log, a); }
template <typename T> Tensor<T> sqrt(const Tensor<T>& a) { return elementwise<T>(ElementwiseKind::Sqrt, a); }
template <typename T> Tensor<T> exp(const Tensor<T>& a) { return elementwise<T>(ElementwiseKind::Exp, a); }
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a) { return elementwise<T>(ElementwiseKind::Sigmoid, a); }

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return elementwise<T>(ElementwiseKind::Add, a, std::optional<Tensor<T>>(Tensor<T>::scalar(s)));
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    return elementwise<T>(ElementwiseKind::Mul, a, std::optional<Tensor<T>>(Tensor<T>::scalar(s)));
}

/// Clamps into [lo, hi]; the gradient is passed through only strictly inside.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    if (!(lo <= hi)) throw ContractError("clamp: lo > hi");
    std::vector<T> out(a.numel());
    const auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(av[i], lo, hi);
    auto an = a.node();
    return Tensor<T>::from_op(a.shape(), std::move(out), "clamp", {an},
                              [an, lo, hi](const detail::Node<T>& self) {
                                  auto ga = detail::grad_of(an);
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                      const T v = an->data[i];
                                      if (v > lo && v < hi) ga[i] += self.grad[i];
                                  }
                              });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    const auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
    auto an = a.node();
    return Tensor<T>::from_op(a.shape(), std::move(out), "relu", {an},
                              [an](const detail::Node<T>& self) {
                                  auto ga = detail::grad_of(an);
                                  const T* x = an->data.data();
                                  const T* g = self.grad.data();
                                  T* dst = ga.data();
                                  for (std::size_t i = 0; i < ga.size(); ++i) dst[i] += x[i] > T(0) ? g[i] : T(0);
                              });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel_of(shape) != a.numel()) {
        throw ShapeError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape) +
                         " changes element count");
    }
    std::vector<T> out(a.data().begin(), a.data().end());
    auto an = a.node();
    return Tensor<T>::from_op(std::move(shape), std::move(out), "reshape", {an},
                              [an](const detail::Node<T>& self) {
                                  auto ga = detail::grad_of(an);
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
                              });
}

/// Picks channel `channel` of x[N, C, H, W] as an [N, 1, H, W] tensor.
template <typename T>
Tensor<T> select_channel(const Tensor<T>& x, std::size_t channel) {
    if (x.rank() != 4 || channel >= x.dim(1)) {
        throw ShapeError("select_channel: channel " + std::to_string(channel) + " of " + to_string(x.shape()));
    }
    const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    std::vector<T> out(n * plane);
    for (std::size_t i = 0; i < n; ++i)
        std::copy_n(x.data().data() + (i * c + channel) * plane, plane, out.data() + i * plane);
    auto xn = x.node();
    return Tensor<T>::from_op({n, 1, x.dim(2), x.dim(3)}, std::move(out), "select_channel", {xn},
                              [xn, n, c, plane, channel](const detail::Node<T>& self) {
                                  auto gx = detail::grad_of(xn);
                                  for (std::size_t i = 0; i < n; ++i) {
                                      T* dst = gx.data() + (i * c + channel) * plane;
                                      const T* src = self.grad.data() + i * plane;
                                      for (std::size_t q = 0; q < plane; ++q) dst[q] += src[q];
                                  }
                              });
}

enum class ReduceKind { Sum, Mean };

/// Sums or averages over `axes` (all axes when empty), dropping reduced dims.
template <typename T>
Tensor<T> reduce(ReduceKind kind, const Tensor<T>& a, std::vector<std::size_t> axes = {}) {
    const Shape& in_shape = a.shape();
    const std::size_t rank = in_shape.size();
    std::vector<bool> reduced(rank, axes.empty());
    for (std::size_t ax : axes) {
        if (ax >= rank) throw ShapeError("reduce: axis " + std::to_string(ax) + " out of range");
        reduced[ax] = true;
    }
    Shape out_shape;
    std::size_t count = 1;
    for (std::size_t d = 0; d < rank; ++d) {
        if (reduced[d]) {
            count *= in_shape[d];
        } else {
            out_shape.push_back(in_shape[d]);
        }
    }
    const T scale = kind == ReduceKind::Mean ? T(1) / static_cast<T>(count) : T(1);
    const auto av = a.data();
    auto an = a.node();
    const char* op = kind == ReduceKind::Mean ? "mean" : "sum";

    if (out_shape.empty()) {
        double acc = 0.0;
        for (T v : av) acc += static_cast<double>(v);
        std::vector<T> out{static_cast<T>(acc) * scale};
        return Tensor<T>::from_op({}, std::move(out), op, {an}, [an, scale](const detail::Node<T>& self) {
            auto ga = detail::grad_of(an);
            const T g = self.grad[0] * scale;
            for (T& v : ga) v += g;
        });
    }

    // Output flat index of each input flat index, advanced as an odometer.
    std::vector<std::size_t> out_stride_of(rank, 0);
    std::size_t stride = 1;
    for (std::size_t d = rank; d-- > 0;) {
        if (!reduced[d]) {
            out_stride_of[d] = stride;
            stride *= in_shape[d];
        }
    }
    auto for_each_target = [in_shape, out_stride_of, rank](std::size_t n, auto&& fn) {
        std::vector<std::size_t> coord(rank, 0);
        std::size_t t = 0;
        for (std::size_t i = 0; i < n; ++i) {
            fn(i, t);
            for (std::size_t d = rank; d-- > 0;) {
                t += out_stride_of[d];
                if (++coord[d] < in_shape[d]) break;
                t -= out_stride_of[d] * in_shape[d];
                coord[d] = 0;
            }
        }
    };
    std::vector<T> out(numel_of(out_shape), T(0));
    for_each_target(av.size(), [&](std::size_t i, std::size_t t) { out[t] += av[i]; });
    for (T& v : out) v *= scale;

    return Tensor<T>::from_op(std::move(out_shape), std::move(out), op, {an},
                              [an, for_each_target, scale](const detail::Node<T>& self) {
                                  auto ga = detail::grad_of(an);
                                  for_each_target(ga.size(), [&](std::size_t i, std::size_t t) {
                                      ga[i] += self.grad[t] * scale;
                                  });
                              });
}

template <typename T> Tensor<T> sum(const Tensor<T>& a) { return reduce(ReduceKind::Sum, a); }
template <typename T> Tensor<T> mean(const Tensor<T>& a) { return reduce(ReduceKind::Mean, a); }

/// y = x W^T + b for x [N, F_in], W [F_out, F_in], b [F_out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 || x.dim(1) != weight.dim(1) ||
        bias.dim(0) != weight.dim(0)) {
        throw ShapeError("linear: incompatible shapes x" + to_string(x.shape()) + " W" +
                         to_string(weight.shape()) + " b" + to_string(bias.shape()));
    }
    const std::size_t n = x.dim(0), f_in = x.dim(1), f_out = weight.dim(0);
    std::vector<T> out(n * f_out);
    for (std::size_t i = 0; i < n; ++i) std::copy(bias.data().begin(), bias.data().end(), out.begin() + i * f_out);
    detail::gemm<T>(false, true, n, f_out, f_in, T(1), x.data().data(), weight.data().data(), T(1), out.data());

    auto xn = x.node(), wn = weight.node(), bn = bias.node();
    return Tensor<T>::from_op(
        {n, f_out}, std::move(out), "linear", {xn, wn, bn},
        [xn, wn, bn, n, f_in, f_out](const detail::Node<T>& self) {
            const T* g = self.grad.data();
            if (auto gx = detail::grad_of(xn); !gx.empty()) {
                detail::gemm<T>(false, false, n, f_in, f_out, T(1), g, wn->data.data(), T(1), gx.data());
            }
            if (auto gw = detail::grad_of(wn); !gw.empty()) {
                detail::gemm<T>(true, false, f_out, f_in, n, T(1), g, xn->data.data(), T(1), gw.data());
            }
            if (auto gb = detail::grad_of(bn); !gb.empty()) {
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < f_out; ++j) gb[j] += g[i * f_out + j];
            }
        });
}

/// Geometry of a square-kernel 2-D convolution over [N, C, H, W] inputs.
struct ConvGeometry {
    std::size_t batch, channels, height, width;
    std::size_t kernel, stride, padding;
    std::size_t out_height, out_width;

    std::size_t patch() const { return channels * kernel * kernel; }
    std::size_t out_pixels() const { return out_height * out_width; }

    static std::size_t out_dim(std::size_t in, std::size_t k, std::size_t s, std::size_t p,
                               const char* op) {
        const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(in + 2 * p) - static_cast<std::ptrdiff_t>(k);
        if (span < 0) throw ShapeError(std::string(op) + ": kernel larger than padded input");
        return static_cast<std::size_t>(span) / s + 1;
    }

    static ConvGeometry make(std::size_t n, std::size_t c, std::size_t h, std::size_t w,
                             std::size_t k, std::size_t s, std::size_t p, const char* op) {
        if (k < 1 || s < 1) throw ShapeError(std::string(op) + ": kernel and stride must be >= 1");
        return {n, c, h, w, k, s, p, out_dim(h, k, s, p, op), out_dim(w, k, s, p, op)};
    }
};

namespace detail {

/// Output columns [lo, hi) whose input column ow*stride + offset - padding
/// lies inside [0, extent).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out_extent, std::size_t extent,
                                                       std::size_t stride, std::size_t offset,
                                                       std::size_t padding) {
    // ow*stride + offset >= padding  and  ow*stride + offset < extent + padding
    std::size_t lo = 0;
    if (offset < padding) lo = (padding - offset + stride - 1) / stride;
    std::size_t hi = 0;
    if (extent + padding > offset) hi = (extent + padding - offset + stride - 1) / stride;
    hi = std::min(hi, out_extent);
    lo = std::min(lo, hi);
    return {lo, hi};
}

/// cols[(c*k + ki)*k + kj][n*P + oh*Wo + ow] = x[n][c][oh*s - p + ki][ow*s - p + kj].
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
    const std::size_t P = g.out_pixels();
    const std::size_t row_len = g.batch * P;
    const std::size_t s = g.stride;
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
            const auto [oh_lo, oh_hi] = valid_range(g.out_height, g.height, s, ki, g.padding);
            for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                const auto [ow_lo, ow_hi] = valid_range(g.out_width, g.width, s, kj, g.padding);
                T* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * row_len;
                for (std::size_t n = 0; n < g.batch; ++n) {
                    const T* plane = x + (n * g.channels + c) * g.height * g.width;
                    T* dst = row + n * P;
                    std::fill(dst, dst + oh_lo * g.out_width, T(0));
                    for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                        const std::size_t ih = oh * s + ki - g.padding;
                        T* out_row = dst + oh * g.out_width;
                        const T* in_row = plane + ih * g.width;
                        std::fill(out_row, out_row + ow_lo, T(0));
                        std::size_t iw = ow_lo * s + kj - g.padding;
                        for (std::size_t ow = ow_lo; ow < ow_hi; ++ow, iw += s) out_row[ow] = in_row[iw];
                        std::fill(out_row + ow_hi, out_row + g.out_width, T(0));
                    }
                    std::fill(dst + oh_hi * g.out_width, dst + P, T(0));
                }
            }
        }
    }
}

/// Adjoint of im2col: scatters columns back and accumulates into x.
template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* x) {
    const std::size_t P = g.out_pixels();
    const std::size_t row_len = g.batch * P;
    const std::size_t s = g.stride;
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
            const auto [oh_lo, oh_hi] = valid_range(g.out_height, g.height, s, ki, g.padding);
            for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                const auto [ow_lo, ow_hi] = valid_range(g.out_width, g.width, s, kj, g.padding);
                const T* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * row_len;
                for (std::size_t n = 0; n < g.batch; ++n) {
                    T* plane = x + (n * g.channels + c) * g.height * g.width;
                    const T* src = row + n * P;
                    for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                        const std::size_t ih = oh * s + ki - g.padding;
                        T* out_row = plane + ih * g.width;
                        const T* in_row = src + oh * g.out_width;
                        std::size_t iw = ow_lo * s + kj - g.padding;
                        for (std::size_t ow = ow_lo; ow < ow_hi; ++ow, iw += s) out_row[iw] += in_row[ow];
                    }
                }
            }
        }
    }
}

/// [N, C, P] -> [C, N*P]
template <typename T>
void batch_to_channel_major(std::size_t n, std::size_t c, std::size_t p, const T* src, T* dst) {
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j)
            std::copy_n(src + (i * c + j) * p, p, dst + j * n * p + i * p);
}

/// [C, N*P] -> [N, C, P], accumulating when `accumulate` is set.
template <typename T>
void channel_major_to_batch(std::size_t n, std::size_t c, std::size_t p, const T* src, T* dst,
                            bool accumulate) {
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            const T* s = src + j * n * p + i * p;
            T* d = dst + (i * c + j) * p;
            if (accumulate) {
                for (std::size_t q = 0; q < p; ++q) d[q] += s[q];
            } else {
                std::copy_n(s, p, d);
            }
        }
    }
}

template <typename T>
void check_conv_inputs(const char* op, const Tensor<T>& x, const Tensor<T>& weight,
                       const Tensor<T>& bias, std::size_t in_axis, std::size_t out_axis) {
    if (x.rank() != 4 || weight.rank() != 4 || bias.rank() != 1) {
        throw ShapeError(std::string(op) + ": expected x[N,C,H,W], 4-D weight and 1-D bias");
    }
    if (weight.dim(2) != weight.dim(3)) throw ShapeError(std::string(op) + ": kernel must be square");
    if (x.dim(1) != weight.dim(in_axis)) {
        throw ShapeError(std::string(op) + ": input has " + std::to_string(x.dim(1)) +
                         " channels, weight expects " + std::to_string(weight.dim(in_axis)));
    }
    if (bias.dim(0) != weight.dim(out_axis)) throw ShapeError(std::string(op) + ": bias size mismatch");
}

} // namespace detail

namespace detail {

/// Images per chunk so one chunk's im2col buffer stays around 1 MiB.
inline std::size_t chunk_images(std::size_t batch, std::size_t patch, std::size_t pixels) {
    constexpr std::size_t kTargetElements = std::size_t{1} << 18;
    const std::size_t per_image = std::max<std::size_t>(1, patch * pixels);
    return std::clamp<std::size_t>(kTargetElements / per_image, 1, std::max<std::size_t>(batch, 1));
}

inline ConvGeometry with_batch(ConvGeometry g, std::size_t batch) {
    g.batch = batch;
    return g;
}

} // namespace detail

/// Cross-correlation with weight [C_out, C_in, k, k]; output dims use floor division.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
    detail::check_conv_inputs("conv2d", x, weight, bias, 1, 0);
    const auto g = ConvGeometry::make(x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(2),
                                      stride, padding, "conv2d");
    const std::size_t c_out = weight.dim(0);
    const std::size_t P = g.out_pixels();
    const std::size_t in_image = g.channels * g.height * g.width;
    const std::size_t chunk = detail::chunk_images(g.batch, g.patch(), P);

    std::vector<T> out(g.batch * c_out * P);
    std::vector<T> cols(g.patch() * chunk * P), y_cm(c_out * chunk * P);
    const auto b = bias.data();
    for (std::size_t n0 = 0; n0 < g.batch; n0 += chunk) {
        const std::size_t nc = std::min(chunk, g.batch - n0);
        const auto gc = detail::with_batch(g, nc);
        detail::im2col(gc, x.data().data() + n0 * in_image, cols.data());
        detail::gemm<T>(false, false, c_out, nc * P, g.patch(), T(1), weight.data().data(), cols.data(), T(0),
                        y_cm.data());
        detail::channel_major_to_batch(nc, c_out, P, y_cm.data(), out.data() + n0 * c_out * P, false);
    }
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t c = 0; c < c_out; ++c) {
            T* plane = out.data() + (n * c_out + c) * P;
            for (std::size_t q = 0; q < P; ++q) plane[q] += b[c];
        }

    auto xn = x.node(), wn = weight.node(), bn = bias.node();
    return Tensor<T>::from_op(
        {g.batch, c_out, g.out_height, g.out_width}, std::move(out), "conv2d", {xn, wn, bn},
        [xn, wn, bn, g, c_out, chunk](const detail::Node<T>& self) {
            const std::size_t P = g.out_pixels();
            const std::size_t in_image = g.channels * g.height * g.width;
            auto gw = detail::grad_of(wn);
            auto gb = detail::grad_of(bn);
            auto gx = detail::grad_of(xn);
            std::vector<T> cols(g.patch() * chunk * P), dy_cm(c_out * chunk * P);
            std::vector<T> dcols(gx.empty() ? 0 : g.patch() * chunk * P);
            for (std::size_t n0 = 0; n0 < g.batch; n0 += chunk) {
                const std::size_t nc = std::min(chunk, g.batch - n0);
                const std::size_t NP = nc * P;
                const auto gc = detail::with_batch(g, nc);
                detail::batch_to_channel_major(nc, c_out, P, self.grad.data() + n0 * c_out * P, dy_cm.data());
                if (!gw.empty()) {
                    detail::im2col(gc, xn->data.data() + n0 * in_image, cols.data());
                    detail::gemm<T>(false, true, c_out, g.patch(), NP, T(1), dy_cm.data(), cols.data(), T(1),
                                    gw.data());
                }
                if (!gb.empty()) {
                    for (std::size_t c = 0; c < c_out; ++c) {
                        const T* row = dy_cm.data() + c * NP;
                        T acc = T(0);
                        for (std::size_t q = 0; q < NP; ++q) acc += row[q];
                        gb[c] += acc;
                    }
                }
                if (!gx.empty()) {
                    detail::gemm<T>(true, false, g.patch(), NP, c_out, T(1), wn->data.data(), dy_cm.data(), T(0),
                                    dcols.data());
                    detail::col2im(gc, dcols.data(), gx.data() + n0 * in_image);
                }
            }
        });
}

/// Transposed convolution with weight [C_in, C_out, k, k]; the forward pass is
/// the input-gradient of conv2d with the same geometry.
/// Output side is (H - 1) * stride - 2 * padding + k.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           std::size_t stride, std::size_t padding) {
    detail::check_conv_inputs("conv_transpose2d", x, weight, bias, 0, 1);
    const std::size_t n = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t k = weight.dim(2), c_out = weight.dim(1);
    if (k < 1 || stride < 1) throw ShapeError("conv_transpose2d: kernel and stride must be >= 1");
    const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>((h - 1) * stride + k) - 2 * static_cast<std::ptrdiff_t>(padding);
    const std::ptrdiff_t ow = static_cast<std::ptrdiff_t>((w - 1) * stride + k) - 2 * static_cast<std::ptrdiff_t>(padding);
    if (oh < 1 || ow < 1) throw ShapeError("conv_transpose2d: output dimension < 1");

    // Geometry of the conv2d this op is the adjoint of: output space -> input space.
    const ConvGeometry g{n, c_out, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), k, stride, padding, h, w};
    const std::size_t P = h * w;
    const std::size_t out_plane = g.height * g.width;
    const std::size_t chunk = detail::chunk_images(n, g.patch(), P);

    std::vector<T> out(n * c_out * out_plane, T(0));
    std::vector<T> x_cm(c_in * chunk * P), cols(g.patch() * chunk * P);
    for (std::size_t n0 = 0; n0 < n; n0 += chunk) {
        const std::size_t nc = std::min(chunk, n - n0);
        detail::batch_to_channel_major(nc, c_in, P, x.data().data() + n0 * c_in * P, x_cm.data());
        detail::gemm<T>(true, false, g.patch(), nc * P, c_in, T(1), weight.data().data(), x_cm.data(), T(0),
                        cols.data());
        detail::col2im(detail::with_batch(g, nc), cols.data(), out.data() + n0 * c_out * out_plane);
    }
    const auto b = bias.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < c_out; ++c) {
            T* plane = out.data() + (i * c_out + c) * out_plane;
            for (std::size_t q = 0; q < out_plane; ++q) plane[q] += b[c];
        }

    auto xn = x.node(), wn = weight.node(), bn = bias.node();
    return Tensor<T>::from_op(
        {n, c_out, g.height, g.width}, std::move(out), "conv_transpose2d", {xn, wn, bn},
        [xn, wn, bn, g, c_in, chunk](const detail::Node<T>& self) {
            const std::size_t P = g.out_pixels();
            const std::size_t c_out = g.channels;
            const std::size_t out_plane = g.height * g.width;
            auto gw = detail::grad_of(wn);
            auto gb = detail::grad_of(bn);
            auto gx = detail::grad_of(xn);
            std::vector<T> dcols(g.patch() * chunk * P), x_cm(c_in * chunk * P), dx_cm(c_in * chunk * P);
            for (std::size_t n0 = 0; n0 < g.batch; n0 += chunk) {
                const std::size_t nc = std::min(chunk, g.batch - n0);
                const std::size_t NP = nc * P;
                detail::im2col(detail::with_batch(g, nc), self.grad.data() + n0 * c_out * out_plane, dcols.data());
                if (!gw.empty()) {
                    detail::batch_to_channel_major(nc, c_in, P, xn->data.data() + n0 * c_in * P, x_cm.data());
                    detail::gemm<T>(false, true, c_in, g.patch(), NP, T(1), x_cm.data(), dcols.data(), T(1),
                                    gw.data());
                }
                if (!gx.empty()) {
                    detail::gemm<T>(false, false, c_in, NP, g.patch(), T(1), wn->data.data(), dcols.data(), T(0),
                                    dx_cm.data());
                    detail::channel_major_to_batch(nc, c_in, P, dx_cm.data(), gx.data() + n0 * c_in * P, true);
                }
            }
            if (!gb.empty()) {
                for (std::size_t i = 0; i < g.batch; ++i)
                    for (std::size_t c = 0; c < c_out; ++c) {
                        const T* src = self.grad.data() + (i * c_out + c) * out_plane;
                        T acc = T(0);
                        for (std::size_t q = 0; q < out_plane; ++q) acc += src[q];
                        gb[c] += acc;
                    }
            }
        });
}

/// Per-channel running statistics carried between batchnorm calls.
template <typename T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;

    explicit BatchNormState(std::size_t channels = 0)
        : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

enum class Mode { Train, Eval };

/// Batch normalization over [N, C] or [N, C, H, W]. Train mode uses the batch
/// mean and biased variance and updates `state` by exponential moving average;
/// eval mode normalizes with the running statistics.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormState<T>& state, Mode mode, T eps = T(1e-5), T momentum = T(0.1)) {
    if (x.rank() != 2 && x.rank() != 4) throw ShapeError("batchnorm: expected [N,C] or [N,C,H,W]");
    const std::size_t n = x.dim(0), c = x.dim(1);
    const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    if (gamma.numel() != c || beta.numel() != c || state.running_mean.size() != c ||
        state.running_var.size() != c) {
        throw ShapeError("batchnorm: " + std::to_string(c) + " channels but gamma/beta/state sized " +
                         std::to_string(gamma.numel()) + "/" + std::to_string(beta.numel()) + "/" +
                         std::to_string(state.running_mean.size()));
    }
    if (!(eps > T(0))) throw ContractError("batchnorm: eps must be positive");
    const std::size_t count = n * spatial;
    if (count == 0) throw ShapeError("batchnorm: empty batch");

    const auto xv = x.data();
    std::vector<T> mean_c(c), invstd(c);
    if (mode == Mode::Train) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const T* p = xv.data() + (i * c + ch) * spatial;
                for (std::size_t q = 0; q < spatial; ++q) s += p[q];
            }
            const double m = s / static_cast<double>(count);
            double ss = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const T* p = xv.data() + (i * c + ch) * spatial;
                for (std::size_t q = 0; q < spatial; ++q) {
                    const double d = p[q] - m;
                    ss += d * d;
                }
            }
            const double var = ss / static_cast<double>(count);
            mean_c[ch] = static_cast<T>(m);
            invstd[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            state.running_mean[ch] = (T(1) - momentum) * state.running_mean[ch] + momentum * static_cast<T>(m);
            state.running_var[ch] = (T(1) - momentum) * state.running_var[ch] + momentum * static_cast<T>(var);
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean_c[ch] = state.running_mean[ch];
            invstd[ch] = T(1) / std::sqrt(state.running_var[ch] + eps);
        }
    }

    std::vector<T> xhat(x.numel()), out(x.numel());
    const auto gv = gamma.data(), bv = beta.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (i * c + ch) * spatial;
            for (std::size_t q = 0; q < spatial; ++q) {
                const T h = (xv[base + q] - mean_c[ch]) * invstd[ch];
                xhat[base + q] = h;
                out[base + q] = gv[ch] * h + bv[ch];
            }
        }

    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    const bool training = mode == Mode::Train;
    return Tensor<T>::from_op(
        x.shape(), std::move(out), "batchnorm", {xn, gn, bn},
        [xn, gn, bn, n, c, spatial, count, training, invstd = std::move(invstd),
         xhat = std::move(xhat)](const detail::Node<T>& self) {
            const auto& dy = self.grad;
            std::vector<T> sum_dy(c, T(0)), sum_dy_xhat(c, T(0));
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t base = (i * c + ch) * spatial;
                    for (std::size_t q = 0; q < spatial; ++q) {
                        sum_dy[ch] += dy[base + q];
                        sum_dy_xhat[ch] += dy[base + q] * xhat[base + q];
                    }
                }
            if (auto gg = detail::grad_of(gn); !gg.empty())
                for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_dy_xhat[ch];
            if (auto gb = detail::grad_of(bn); !gb.empty())
                for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_dy[ch];
            if (auto gx = detail::grad_of(xn); !gx.empty()) {
                const auto& gamma_v = gn->data;
                const T inv_count = T(1) / static_cast<T>(count);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const std::size_t base = (i * c + ch) * spatial;
                        const T scale = gamma_v[ch] * invstd[ch];
                        for (std::size_t q = 0; q < spatial; ++q) {
                            if (training) {
                                gx[base + q] += scale * (dy[base + q] - inv_count * sum_dy[ch] -
                                                         xhat[base + q] * inv_count * sum_dy_xhat[ch]);
                            } else {
                                gx[base + q] += scale * dy[base + q];
                            }
                        }
                    }
            }
        });
}

} // namespace ddad
