#pragma once

// Differentiable operators. Layout is NCHW for feature maps and
// [batch, features] for dense layers. There is no general broadcasting;
// the only broadcasts are bias addition and the two attention gates.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "dtlc/tensor.hpp"

namespace dtlc {

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

inline void require_rank(const char* op, const Shape& shape, std::size_t rank) {
    if (shape.size() != rank) throw DimensionError(op, "rank", rank, shape.size());
}

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
    if (a.size() != b.size()) throw DimensionError(op, "rank", a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) throw DimensionError(op, "dim" + std::to_string(i), a[i], b[i]);
}

struct ConvGeometry {
    std::size_t in_channels, height, width;
    std::size_t kernel_h, kernel_w;
    std::size_t stride, padding, dilation;
    std::size_t out_h, out_w;

    std::size_t patch_size() const { return in_channels * kernel_h * kernel_w; }
    std::size_t out_pixels() const { return out_h * out_w; }
};

// Unrolls one image [C,H,W] into columns [C*Kh*Kw, Ho*Wo].
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
    const auto pad = static_cast<std::ptrdiff_t>(g.padding);
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        const T* plane = image + c * g.height * g.width;
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                T* row = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * g.out_pixels();
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky * g.dilation) - pad;
                    T* out = row + oy * g.out_w;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
                        std::fill(out, out + g.out_w, T{0});
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(iy) * g.width;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx * g.dilation) - pad;
                        out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? T{0} : src[ix];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatters columns back, accumulating into the image.
template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* image) {
    const auto pad = static_cast<std::ptrdiff_t>(g.padding);
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        T* plane = image + c * g.height * g.width;
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const T* row = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * g.out_pixels();
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky * g.dilation) - pad;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    T* dst = plane + static_cast<std::size_t>(iy) * g.width;
                    const T* in = row + oy * g.out_w;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx * g.dilation) - pad;
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) dst[ix] += in[ox];
                    }
                }
            }
        }
    }
}

template <typename T>
T sigmoid_scalar(T x) {
    // Clamped so the result is strictly inside (0, 1) at every precision.
    constexpr T lo = std::numeric_limits<T>::min();
    constexpr T hi = T{1} - std::numeric_limits<T>::epsilon() / T{2};
    const T y = x >= T{0} ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
    return std::clamp(y, lo, hi);
}

/// When set, piecewise ops fold every branch decision into this hash, so
/// callers can tell whether two evaluations took the same linear piece.
inline thread_local std::uint64_t* branch_trace = nullptr;

inline void trace_branch(std::uint64_t decision) {
    *branch_trace = (*branch_trace ^ decision) * 0x100000001b3ULL;
}

}  // namespace detail

/// Weights [Cout,Cin,Kh,Kw], bias [Cout].
template <typename T>
struct ConvParams {
    Tensor<T> weights;
    Tensor<T> bias;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t dilation = 1;
};

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvParams<T>& params) {
    using detail::ConvGeometry;
    const char* op = "conv2d";
    detail::require_rank(op, input.shape(), 4);
    detail::require_rank(op, params.weights.shape(), 4);
    detail::require_rank(op, params.bias.shape(), 1);
    const auto& xs = input.shape();
    const auto& ws = params.weights.shape();
    if (xs[1] != ws[1]) throw DimensionError(op, "in_channels", ws[1], xs[1]);
    if (params.bias.dim(0) != ws[0]) throw DimensionError(op, "bias", ws[0], params.bias.dim(0));
    if (params.stride < 1) throw DimensionError(op, "stride", "stride must be positive");
    if (params.dilation < 1) throw DimensionError(op, "dilation", "dilation must be positive");

    const auto extent = [&](std::size_t size, std::size_t k, const char* axis) {
        const auto span = static_cast<std::ptrdiff_t>(size + 2 * params.padding) -
                          static_cast<std::ptrdiff_t>(params.dilation * (k - 1)) - 1;
        if (span < 0)
            throw DimensionError(op, axis, std::string("output extent would be < 1 along ") + axis);
        return static_cast<std::size_t>(span) / params.stride + 1;
    };
    const ConvGeometry g{xs[1], xs[2], xs[3], ws[2], ws[3], params.stride, params.padding, params.dilation,
                         extent(xs[2], ws[2], "height"), extent(xs[3], ws[3], "width")};
    const std::size_t batch = xs[0];
    const std::size_t out_channels = ws[0];
    const std::size_t in_plane = g.in_channels * g.height * g.width;
    const std::size_t out_plane = out_channels * g.out_pixels();

    // GEMM operands live in Eigen-owned (fully aligned) matrices: Eigen's
    // kernels split off unaligned heads, so mapping arbitrary heap buffers
    // would make the summation order depend on allocation addresses.
    std::vector<T> out(batch * out_plane);
    const detail::RowMatrix<T> w = detail::ConstMatrixMap<T>(params.weights.data().data(), out_channels, g.patch_size());
    detail::RowMatrix<T> colm(g.patch_size(), g.out_pixels());
    detail::RowMatrix<T> y(out_channels, g.out_pixels());
    const auto bias = params.bias.data();
    for (std::size_t b = 0; b < batch; ++b) {
        detail::im2col(input.data().data() + b * in_plane, g, colm.data());
        y.noalias() = w * colm;
        T* dst = out.data() + b * out_plane;
        for (std::size_t o = 0; o < out_channels; ++o)
            for (std::size_t p = 0; p < g.out_pixels(); ++p) dst[o * g.out_pixels() + p] = y(o, p) + bias[o];
    }

    return Tensor<T>::from_op(
        op, {batch, out_channels, g.out_h, g.out_w}, std::move(out), {input, params.weights, params.bias},
        [g, batch, out_channels, in_plane, out_plane](TensorNode<T>& self) {
            auto& x = *self.parents[0];
            auto& wn = *self.parents[1];
            auto& bn = *self.parents[2];
            const detail::RowMatrix<T> w = detail::ConstMatrixMap<T>(wn.data.data(), out_channels, g.patch_size());
            detail::RowMatrix<T> colm(g.patch_size(), g.out_pixels());
            detail::RowMatrix<T> dy(out_channels, g.out_pixels());
            detail::RowMatrix<T> dw;
            if (wn.requires_grad) dw = detail::RowMatrix<T>::Zero(out_channels, g.patch_size());
            for (std::size_t b = 0; b < batch; ++b) {
                dy = detail::ConstMatrixMap<T>(self.grad.data() + b * out_plane, out_channels, g.out_pixels());
                if (wn.requires_grad) {
                    detail::im2col(x.data.data() + b * in_plane, g, colm.data());
                    dw.noalias() += dy * colm.transpose();
                }
                if (bn.requires_grad) {
                    auto db = bn.ensure_grad();
                    for (std::size_t o = 0; o < out_channels; ++o)
                        for (std::size_t p = 0; p < g.out_pixels(); ++p) db[o] += dy(o, p);
                }
                if (x.requires_grad) {
                    colm.noalias() = w.transpose() * dy;
                    detail::col2im_add(colm.data(), g, x.ensure_grad().data() + b * in_plane);
                }
            }
            if (wn.requires_grad) {
                auto gw = wn.ensure_grad();
                for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += dw.data()[i];
            }
        });
}

/// 2x2 max pooling, stride 2. Ties route the gradient to the first maximum
/// in row-major order.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input, std::size_t window = 2) {
    const char* op = "max_pool2d";
    detail::require_rank(op, input.shape(), 4);
    if (window != 2) throw DimensionError(op, "window", "only 2x2 windows are supported");
    const auto& s = input.shape();
    if (s[2] % 2 != 0)
        throw DimensionError(op, "height", "odd height " + std::to_string(s[2]) + "; pad the input to an even extent");
    if (s[3] % 2 != 0)
        throw DimensionError(op, "width", "odd width " + std::to_string(s[3]) + "; pad the input to an even extent");
    const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h / 2, ow = w / 2;
    std::vector<T> out(planes * oh * ow);
    std::vector<std::size_t> argmax(out.size());
    const auto x = input.data();
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = p * h * w + (2 * oy) * w + 2 * ox;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const std::size_t idx = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if (x[idx] > x[best]) best = idx;
                    }
                const std::size_t o = (p * oh + oy) * ow + ox;
                if (detail::branch_trace) detail::trace_branch(best);
                out[o] = x[best];
                argmax[o] = best;
            }
        }
    }
    return Tensor<T>::from_op(op, {s[0], s[1], oh, ow}, std::move(out), {input},
                              [argmax = std::move(argmax)](TensorNode<T>& self) {
                                  auto& x = *self.parents[0];
                                  auto g = x.ensure_grad();
                                  for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
                              });
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, std::size_t factor = 2) {
    const char* op = "upsample_nearest";
    detail::require_rank(op, input.shape(), 4);
    if (factor < 1) throw DimensionError(op, "factor", "factor must be >= 1");
    const auto& s = input.shape();
    const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h * factor, ow = w * factor;
    std::vector<T> out(planes * oh * ow);
    const auto x = input.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t oy = 0; oy < oh; ++oy) {
            const T* src = x.data() + p * h * w + (oy / factor) * w;
            T* dst = out.data() + (p * oh + oy) * ow;
            for (std::size_t ox = 0; ox < ow; ++ox) dst[ox] = src[ox / factor];
        }
    return Tensor<T>::from_op(op, {s[0], s[1], oh, ow}, std::move(out), {input},
                              [planes, h, w, oh, ow, factor](TensorNode<T>& self) {
                                  auto g = self.parents[0]->ensure_grad();
                                  for (std::size_t p = 0; p < planes; ++p)
                                      for (std::size_t oy = 0; oy < oh; ++oy) {
                                          T* dst = g.data() + p * h * w + (oy / factor) * w;
                                          const T* src = self.grad.data() + (p * oh + oy) * ow;
                                          for (std::size_t ox = 0; ox < ow; ++ox) dst[ox / factor] += src[ox];
                                      }
                              });
}

/// y = x W^T + b with x [B,Fin], W [Fout,Fin], b [Fout].
template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
    const char* op = "dense";
    detail::require_rank(op, input.shape(), 2);
    detail::require_rank(op, weights.shape(), 2);
    detail::require_rank(op, bias.shape(), 1);
    const std::size_t batch = input.dim(0), fin = input.dim(1), fout = weights.dim(0);
    if (weights.dim(1) != fin) throw DimensionError(op, "in_features", weights.dim(1), fin);
    if (bias.dim(0) != fout) throw DimensionError(op, "bias", fout, bias.dim(0));

    // Aligned copies for the same reason as in conv2d.
    const detail::RowMatrix<T> x = detail::ConstMatrixMap<T>(input.data().data(), batch, fin);
    const detail::RowMatrix<T> w = detail::ConstMatrixMap<T>(weights.data().data(), fout, fin);
    const detail::RowMatrix<T> y = x * w.transpose();
    std::vector<T> out(batch * fout);
    const auto b = bias.data();
    for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t o = 0; o < fout; ++o) out[i * fout + o] = y(i, o) + b[o];

    return Tensor<T>::from_op(op, {batch, fout}, std::move(out), {input, weights, bias},
                              [batch, fin, fout](TensorNode<T>& self) {
                                  auto& xn = *self.parents[0];
                                  auto& wn = *self.parents[1];
                                  auto& bn = *self.parents[2];
                                  const detail::RowMatrix<T> dy = detail::ConstMatrixMap<T>(self.grad.data(), batch, fout);
                                  const auto accumulate = [](std::span<T> dst, const detail::RowMatrix<T>& m) {
                                      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += m.data()[i];
                                  };
                                  if (xn.requires_grad) {
                                      const detail::RowMatrix<T> w = detail::ConstMatrixMap<T>(wn.data.data(), fout, fin);
                                      const detail::RowMatrix<T> dx = dy * w;
                                      accumulate(xn.ensure_grad(), dx);
                                  }
                                  if (wn.requires_grad) {
                                      const detail::RowMatrix<T> x = detail::ConstMatrixMap<T>(xn.data.data(), batch, fin);
                                      const detail::RowMatrix<T> dw = dy.transpose() * x;
                                      accumulate(wn.ensure_grad(), dw);
                                  }
                                  if (bn.requires_grad) {
                                      auto db = bn.ensure_grad();
                                      for (std::size_t i = 0; i < batch; ++i)
                                          for (std::size_t o = 0; o < fout; ++o) db[o] += dy(i, o);
                                  }
                              });
}

enum class Activation { relu, sigmoid, tanh, leaky_relu };

inline const char* activation_name(Activation kind) {
    switch (kind) {
        case Activation::relu: return "relu";
        case Activation::sigmoid: return "sigmoid";
        case Activation::tanh: return "tanh";
        case Activation::leaky_relu: return "leaky_relu";
    }
    return "?";
}

inline constexpr double kLeakySlope = 0.2;

template <typename T>
Tensor<T> activation(const Tensor<T>& input, Activation kind) {
    const auto x = input.data();
    std::vector<T> out(x.size());
    const T slope = static_cast<T>(kLeakySlope);
    switch (kind) {
        case Activation::relu:
            for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
            break;
        case Activation::leaky_relu:
            for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : slope * x[i];
            break;
        case Activation::sigmoid:
            for (std::size_t i = 0; i < x.size(); ++i) out[i] = detail::sigmoid_scalar(x[i]);
            break;
        case Activation::tanh:
            for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
            break;
    }
    if (detail::branch_trace && (kind == Activation::relu || kind == Activation::leaky_relu))
        for (const T v : x) detail::trace_branch(v > T{0});
    return Tensor<T>::from_op(activation_name(kind), input.shape(), std::move(out), {input},
                              [kind, slope](TensorNode<T>& self) {
                                  auto& xn = *self.parents[0];
                                  auto g = xn.ensure_grad();
                                  const auto& x = xn.data;
                                  const auto& y = self.data;
                                  const auto& dy = self.grad;
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                      switch (kind) {
                                          case Activation::relu: g[i] += x[i] > T{0} ? dy[i] : T{0}; break;
                                          case Activation::leaky_relu: g[i] += x[i] > T{0} ? dy[i] : slope * dy[i]; break;
                                          case Activation::sigmoid: g[i] += dy[i] * y[i] * (T{1} - y[i]); break;
                                          case Activation::tanh: g[i] += dy[i] * (T{1} - y[i] * y[i]); break;
                                      }
                                  }
                              });
}

template <typename T> Tensor<T> relu(const Tensor<T>& x) { return activation(x, Activation::relu); }
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x) { return activation(x, Activation::sigmoid); }

/// [B,C,H,W] -> [B,C] spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
    const char* op = "global_avg_pool";
    detail::require_rank(op, input.shape(), 4);
    const auto& s = input.shape();
    const std::size_t planes = s[0] * s[1], area = s[2] * s[3];
    if (area == 0) throw DimensionError(op, "area", "spatial area must be >= 1");
    std::vector<T> out(planes);
    const auto x = input.data();
    for (std::size_t p = 0; p < planes; ++p) {
        T acc{0};
        for (std::size_t i = 0; i < area; ++i) acc += x[p * area + i];
        out[p] = acc / static_cast<T>(area);
    }
    return Tensor<T>::from_op(op, {s[0], s[1]}, std::move(out), {input}, [planes, area](TensorNode<T>& self) {
        auto g = self.parents[0]->ensure_grad();
        const T inv = T{1} / static_cast<T>(area);
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t i = 0; i < area; ++i) g[p * area + i] += self.grad[p] * inv;
    });
}

/// Mean over every element of (pred - target)^2. No gradient reaches target.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    const char* op = "mse_loss";
    detail::require_same_shape(op, pred.shape(), target.shape());
    const auto p = pred.data();
    const auto t = target.data();
    const std::size_t n = p.size();
    if (n == 0) throw DimensionError(op, "numel", "empty tensors");
    T acc{0};
    for (std::size_t i = 0; i < n; ++i) {
        const T d = p[i] - t[i];
        acc += d * d;
    }
    std::vector<T> diff(n);
    for (std::size_t i = 0; i < n; ++i) diff[i] = p[i] - t[i];
    return Tensor<T>::from_op(op, {}, {acc / static_cast<T>(n)}, {pred},
                              [diff = std::move(diff)](TensorNode<T>& self) {
                                  auto g = self.parents[0]->ensure_grad();
                                  const T scale = T{2} * self.grad[0] / static_cast<T>(diff.size());
                                  for (std::size_t i = 0; i < diff.size(); ++i) g[i] += scale * diff[i];
                              });
}

/// Mean binary cross-entropy of sigmoid(logits) against a constant label.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, T label) {
    const auto l = logits.data();
    const std::size_t n = l.size();
    if (n == 0) throw DimensionError("bce_with_logits", "numel", "empty tensor");
    T acc{0};
    for (std::size_t i = 0; i < n; ++i)
        acc += std::max(l[i], T{0}) - l[i] * label + std::log1p(std::exp(-std::abs(l[i])));
    return Tensor<T>::from_op("bce_with_logits", {}, {acc / static_cast<T>(n)}, {logits},
                              [label](TensorNode<T>& self) {
                                  auto& xn = *self.parents[0];
                                  auto g = xn.ensure_grad();
                                  const T scale = self.grad[0] / static_cast<T>(g.size());
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                      const T x = xn.data[i];
                                      const T s = x >= T{0} ? T{1} / (T{1} + std::exp(-x))
                                                            : std::exp(x) / (T{1} + std::exp(x));
                                      g[i] += scale * (s - label);
                                  }
                              });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("add", a.shape(), b.shape());
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return Tensor<T>::from_op("add", a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
        for (auto& parent : self.parents) {
            if (!parent->requires_grad) continue;
            auto g = parent->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
    return Tensor<T>::from_op("scale", a.shape(), std::move(out), {a}, [factor](TensorNode<T>& self) {
        auto g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc{0};
    for (T v : a.data()) acc += v;
    return Tensor<T>::from_op("sum", {}, {acc}, {a}, [](TensorNode<T>& self) {
        auto g = self.parents[0]->ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

/// f [B,C,H,W] times a single-channel mask [B,1,H,W] broadcast over channels.
template <typename T>
Tensor<T> spatial_gate(const Tensor<T>& features, const Tensor<T>& mask) {
    const char* op = "spatial_gate";
    detail::require_rank(op, features.shape(), 4);
    detail::require_rank(op, mask.shape(), 4);
    const auto& s = features.shape();
    if (mask.dim(0) != s[0]) throw DimensionError(op, "batch", s[0], mask.dim(0));
    if (mask.dim(1) != 1) throw DimensionError(op, "mask_channels", 1, mask.dim(1));
    if (mask.dim(2) != s[2]) throw DimensionError(op, "height", s[2], mask.dim(2));
    if (mask.dim(3) != s[3]) throw DimensionError(op, "width", s[3], mask.dim(3));
    const std::size_t batch = s[0], channels = s[1], area = s[2] * s[3];
    std::vector<T> out(features.numel());
    const auto f = features.data();
    const auto m = mask.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < area; ++i) {
                const std::size_t idx = (b * channels + c) * area + i;
                out[idx] = f[idx] * m[b * area + i];
            }
    return Tensor<T>::from_op(op, s, std::move(out), {features, mask},
                              [batch, channels, area](TensorNode<T>& self) {
                                  auto& fn = *self.parents[0];
                                  auto& mn = *self.parents[1];
                                  std::span<T> gf, gm;
                                  if (fn.requires_grad) gf = fn.ensure_grad();
                                  if (mn.requires_grad) gm = mn.ensure_grad();
                                  for (std::size_t b = 0; b < batch; ++b)
                                      for (std::size_t c = 0; c < channels; ++c)
                                          for (std::size_t i = 0; i < area; ++i) {
                                              const std::size_t idx = (b * channels + c) * area + i;
                                              if (!gf.empty()) gf[idx] += self.grad[idx] * mn.data[b * area + i];
                                              if (!gm.empty()) gm[b * area + i] += self.grad[idx] * fn.data[idx];
                                          }
                              });
}

/// f [B,C,H,W] scaled per channel by w [B,C].
template <typename T>
Tensor<T> channel_gate(const Tensor<T>& features, const Tensor<T>& weights) {
    const char* op = "channel_gate";
    detail::require_rank(op, features.shape(), 4);
    detail::require_rank(op, weights.shape(), 2);
    const auto& s = features.shape();
    if (weights.dim(0) != s[0]) throw DimensionError(op, "batch", s[0], weights.dim(0));
    if (weights.dim(1) != s[1]) throw DimensionError(op, "channels", s[1], weights.dim(1));
    const std::size_t planes = s[0] * s[1], area = s[2] * s[3];
    std::vector<T> out(features.numel());
    const auto f = features.data();
    const auto w = weights.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < area; ++i) out[p * area + i] = f[p * area + i] * w[p];
    return Tensor<T>::from_op(op, s, std::move(out), {features, weights}, [planes, area](TensorNode<T>& self) {
        auto& fn = *self.parents[0];
        auto& wn = *self.parents[1];
        if (fn.requires_grad) {
            auto g = fn.ensure_grad();
            for (std::size_t p = 0; p < planes; ++p)
                for (std::size_t i = 0; i < area; ++i) g[p * area + i] += self.grad[p * area + i] * wn.data[p];
        }
        if (wn.requires_grad) {
            auto g = wn.ensure_grad();
            for (std::size_t p = 0; p < planes; ++p) {
                T acc{0};
                for (std::size_t i = 0; i < area; ++i) acc += self.grad[p * area + i] * fn.data[p * area + i];
                g[p] += acc;
            }
        }
    });
}

}  // namespace dtlc
