#include "dcn/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "dcn/op_counter.hpp"

namespace dcn {

namespace {

constexpr double kLogFloor = 1e-12;
constexpr std::size_t kIm2colBudget = std::size_t{1} << 23;

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require_rank(const Shape& shape, std::size_t rank, const char* op) {
  if (shape.size() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " input, got " + shape_to_string(shape));
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a) + " vs " +
                         shape_to_string(b));
}

template <typename T>
bool wants_grad(const Node<T>* input) {
  return input != nullptr && input->requires_grad;
}

struct ConvGeometry {
  std::size_t n, c, h, w, oc, kh, kw, oh, ow;
  Conv2dOptions opt;
  std::size_t k() const { return c * kh * kw; }
  std::size_t p() const { return oh * ow; }
};

// cols[row, b*P + p] for samples [first, first + count).
template <typename T>
void im2col(const T* x, const ConvGeometry& g, std::size_t first, std::size_t count,
            std::vector<T>& cols) {
  const std::size_t P = g.p();
  const std::size_t width = count * P;
  cols.assign(g.k() * width, T(0));
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols.data() + ((c * g.kh + ki) * g.kw + kj) * width;
        for (std::size_t b = 0; b < count; ++b) {
          const T* plane = x + ((first + b) * g.c + c) * g.h * g.w;
          T* dst = row + b * P;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.opt.stride_h + ki) -
                                      static_cast<std::ptrdiff_t>(g.opt.pad_h);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.opt.stride_w + kj) -
                                        static_cast<std::ptrdiff_t>(g.opt.pad_w);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              dst[oy * g.ow + ox] = plane[iy * g.w + ix];
            }
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, std::size_t first, std::size_t count,
                T* gx) {
  const std::size_t P = g.p();
  const std::size_t width = count * P;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * width;
        for (std::size_t b = 0; b < count; ++b) {
          T* plane = gx + ((first + b) * g.c + c) * g.h * g.w;
          const T* src = row + b * P;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.opt.stride_h + ki) -
                                      static_cast<std::ptrdiff_t>(g.opt.pad_h);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.opt.stride_w + kj) -
                                        static_cast<std::ptrdiff_t>(g.opt.pad_w);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              plane[iy * g.w + ix] += src[oy * g.ow + ox];
            }
          }
        }
      }
}

std::size_t chunk_samples(const ConvGeometry& g) {
  const std::size_t per_sample = std::max<std::size_t>(1, g.k() * g.p());
  return std::clamp<std::size_t>(kIm2colBudget / per_sample, 1, std::max<std::size_t>(1, g.n));
}

void charge(const std::string& label, Phase phase, std::uint64_t mults) {
  if (OpCounter* counter = active_counter())
    counter->add(active_section(), label, phase, mults);
}

}  // namespace

std::uint64_t conv_mults(std::uint64_t in_channels, std::uint64_t out_channels,
                         std::uint64_t filter_h, std::uint64_t filter_w, std::uint64_t out_h,
                         std::uint64_t out_w) {
  return out_h * out_w * out_channels * in_channels * filter_h * filter_w;
}

std::size_t window_output_extent(std::size_t input, std::size_t window, std::size_t stride,
                                 std::size_t pad, const char* what) {
  if (window == 0 || stride == 0)
    throw DimensionError(std::string(what) + ": window and stride must be positive");
  if (input + 2 * pad < window)
    throw DimensionError(std::string(what) + ": input extent " + std::to_string(input) +
                         " (padding " + std::to_string(pad) + ") smaller than window " +
                         std::to_string(window));
  return (input + 2 * pad - window) / stride + 1;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dOptions& options) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(weight.shape(), 4, "conv2d weight");
  ConvGeometry g{};
  g.opt = options;
  g.n = x.dim(0);
  g.c = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.oc = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  if (weight.dim(1) != g.c)
    throw DimensionError("conv2d: input has " + std::to_string(g.c) +
                         " channels, weight expects " + std::to_string(weight.dim(1)));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.oc))
    throw DimensionError("conv2d: bias shape " + shape_to_string(bias.shape()) +
                         " does not match " + std::to_string(g.oc) + " filters");
  g.oh = window_output_extent(g.h, g.kh, options.stride_h, options.pad_h, "conv2d height");
  g.ow = window_output_extent(g.w, g.kw, options.stride_w, options.pad_w, "conv2d width");

  const std::size_t K = g.k(), P = g.p();
  std::vector<T> out(g.n * g.oc * P);
  std::vector<T> cols;
  const std::size_t chunk = chunk_samples(g);
  Eigen::Map<const RowMatrix<T>> W(weight.values().data(), g.oc, K);
  std::uint64_t gemm_mults = 0;
  for (std::size_t first = 0; first < g.n; first += chunk) {
    const std::size_t count = std::min(chunk, g.n - first);
    im2col(x.values().data(), g, first, count, cols);
    Eigen::Map<const RowMatrix<T>> C(cols.data(), K, count * P);
    RowMatrix<T> Y(g.oc, count * P);
    Y.noalias() = W * C;
    gemm_mults += static_cast<std::uint64_t>(g.oc) * K * count * P;
    for (std::size_t b = 0; b < count; ++b)
      for (std::size_t o = 0; o < g.oc; ++o) {
        const T shift = bias.defined() ? bias.values()[o] : T(0);
        T* dst = out.data() + ((first + b) * g.oc + o) * P;
        const T* src = Y.data() + o * count * P + b * P;
        for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + shift;
      }
  }
  const std::uint64_t forward_mults = conv_mults(g.c, g.oc, g.kh, g.kw, g.oh, g.ow) * g.n;
  if (gemm_mults != forward_mults)
    throw std::logic_error("conv2d: unrolled product size disagrees with conv_mults");
  const std::string label = active_layer_label();
  charge(label, Phase::forward, forward_mults);

  Node<T>* xn = x.node();
  Node<T>* wn = weight.node();
  Node<T>* bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(
      {g.n, g.oc, g.oh, g.ow}, std::move(out), OpKind::conv2d, {x, weight, bias},
      [g, xn, wn, bn, label, forward_mults](Node<T>& self) {
        charge(label, Phase::backward, 2 * forward_mults);
        const std::size_t K = g.k(), P = g.p();
        const std::size_t chunk = chunk_samples(g);
        Eigen::Map<const RowMatrix<T>> W(wn->values.data(), g.oc, K);
        std::vector<T> cols;
        RowMatrix<T> dY;
        for (std::size_t first = 0; first < g.n; first += chunk) {
          const std::size_t count = std::min(chunk, g.n - first);
          dY.resize(g.oc, count * P);
          for (std::size_t b = 0; b < count; ++b)
            for (std::size_t o = 0; o < g.oc; ++o) {
              const T* src = self.grad.data() + ((first + b) * g.oc + o) * P;
              std::copy(src, src + P, dY.data() + o * count * P + b * P);
            }
          if (wants_grad(bn)) {
            auto& gb = bn->grad_buffer();
            for (std::size_t o = 0; o < g.oc; ++o) gb[o] += dY.row(o).sum();
          }
          if (wants_grad(wn)) {
            im2col(xn->values.data(), g, first, count, cols);
            Eigen::Map<const RowMatrix<T>> C(cols.data(), K, count * P);
            Eigen::Map<RowMatrix<T>> gW(wn->grad_buffer().data(), g.oc, K);
            gW.noalias() += dY * C.transpose();
          }
          if (wants_grad(xn)) {
            RowMatrix<T> dC(K, count * P);
            dC.noalias() = W.transpose() * dY;
            col2im_add(dC.data(), g, first, count, xn->grad_buffer().data());
          }
        }
      });
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t kernel_h, std::size_t kernel_w,
                    std::size_t stride_h, std::size_t stride_w) {
  require_rank(x.shape(), 4, "maxpool2d");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t OH = window_output_extent(H, kernel_h, stride_h, 0, "maxpool2d height");
  const std::size_t OW = window_output_extent(W, kernel_w, stride_w, 0, "maxpool2d width");
  std::vector<T> out(N * C * OH * OW);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const T* in = x.values().data();
  for (std::size_t plane = 0; plane < N * C; ++plane)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        std::size_t best = plane * H * W + (oy * stride_h) * W + ox * stride_w;
        for (std::size_t ki = 0; ki < kernel_h; ++ki)
          for (std::size_t kj = 0; kj < kernel_w; ++kj) {
            const std::size_t idx = plane * H * W + (oy * stride_h + ki) * W + ox * stride_w + kj;
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (plane * OH + oy) * OW + ox;
        out[o] = in[best];
        (*argmax)[o] = best;
      }
  Node<T>* xn = x.node();
  return detail::make_result<T>({N, C, OH, OW}, std::move(out), OpKind::maxpool2d, {x},
                                [xn, argmax](Node<T>& self) {
                                  auto& gx = xn->grad_buffer();
                                  for (std::size_t o = 0; o < self.grad.size(); ++o)
                                    gx[(*argmax)[o]] += self.grad[o];
                                });
}

template <typename T>
Tensor<T> avgpool_global(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "avgpool_global");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW == 0) throw DimensionError("avgpool_global: empty spatial extent");
  std::vector<T> out(N * C, T(0));
  const T* in = x.values().data();
  for (std::size_t plane = 0; plane < N * C; ++plane) {
    T acc = 0;
    for (std::size_t p = 0; p < HW; ++p) acc += in[plane * HW + p];
    out[plane] = acc / static_cast<T>(HW);
  }
  Node<T>* xn = x.node();
  return detail::make_result<T>({N, C, 1, 1}, std::move(out), OpKind::avgpool_global, {x},
                                [xn, HW](Node<T>& self) {
                                  auto& gx = xn->grad_buffer();
                                  const T inv = T(1) / static_cast<T>(HW);
                                  for (std::size_t plane = 0; plane < self.grad.size(); ++plane)
                                    for (std::size_t p = 0; p < HW; ++p)
                                      gx[plane * HW + p] += self.grad[plane] * inv;
                                });
}

template <typename T>
Tensor<T> maxpool_global(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "maxpool_global");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW == 0) throw DimensionError("maxpool_global: empty spatial extent");
  std::vector<T> out(N * C);
  auto argmax = std::make_shared<std::vector<std::size_t>>(N * C);
  const T* in = x.values().data();
  for (std::size_t plane = 0; plane < N * C; ++plane) {
    std::size_t best = plane * HW;
    for (std::size_t p = 1; p < HW; ++p)
      if (in[plane * HW + p] > in[best]) best = plane * HW + p;
    out[plane] = in[best];
    (*argmax)[plane] = best;
  }
  Node<T>* xn = x.node();
  return detail::make_result<T>({N, C, 1, 1}, std::move(out), OpKind::maxpool_global, {x},
                                [xn, argmax](Node<T>& self) {
                                  auto& gx = xn->grad_buffer();
                                  for (std::size_t o = 0; o < self.grad.size(); ++o)
                                    gx[(*argmax)[o]] += self.grad[o];
                                });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.values().begin(), x.values().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  Node<T>* xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), OpKind::relu, {x},
                                [xn](Node<T>& self) {
                                  auto& gx = xn->grad_buffer();
                                  for (std::size_t i = 0; i < gx.size(); ++i)
                                    if (xn->values[i] > T(0)) gx[i] += self.grad[i];
                                });
}

namespace {
struct AxisLayout {
  std::size_t outer, extent, inner;
};
AxisLayout axis_layout(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size())
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for " + shape_to_string(shape));
  AxisLayout l{1, shape[axis], 1};
  for (std::size_t a = 0; a < axis; ++a) l.outer *= shape[a];
  for (std::size_t a = axis + 1; a < shape.size(); ++a) l.inner *= shape[a];
  return l;
}
}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisLayout l = axis_layout(x.shape(), axis, "softmax");
  if (l.extent == 0) throw DimensionError("softmax: empty axis");
  std::vector<T> out(x.numel());
  const T* in = x.values().data();
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.extent * l.inner + i;
      T peak = in[base];
      for (std::size_t c = 1; c < l.extent; ++c) peak = std::max(peak, in[base + c * l.inner]);
      T total = 0;
      for (std::size_t c = 0; c < l.extent; ++c) {
        const T e = std::exp(in[base + c * l.inner] - peak);
        out[base + c * l.inner] = e;
        total += e;
      }
      for (std::size_t c = 0; c < l.extent; ++c) out[base + c * l.inner] /= total;
    }
  Node<T>* xn = x.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), OpKind::softmax, {x}, [xn, l](Node<T>& self) {
        auto& gx = xn->grad_buffer();
        for (std::size_t o = 0; o < l.outer; ++o)
          for (std::size_t i = 0; i < l.inner; ++i) {
            const std::size_t base = o * l.extent * l.inner + i;
            T dot = 0;
            for (std::size_t c = 0; c < l.extent; ++c)
              dot += self.grad[base + c * l.inner] * self.values[base + c * l.inner];
            for (std::size_t c = 0; c < l.extent; ++c) {
              const std::size_t idx = base + c * l.inner;
              gx[idx] += self.values[idx] * (self.grad[idx] - dot);
            }
          }
      });
}

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormState<T>& state, bool train) {
  if (x.rank() != 4 && x.rank() != 2)
    throw DimensionError("batchnorm: expected [N,C,H,W] or [N,C], got " +
                         shape_to_string(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1);
  const std::size_t HW = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  for (const Tensor<T>* t : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &state.running_mean, &state.running_var})
    if (t->numel() != C)
      throw DimensionError("batchnorm: parameter of size " + std::to_string(t->numel()) +
                           " for " + std::to_string(C) + " channels");
  const std::size_t m = N * HW;
  if (m == 0) throw DimensionError("batchnorm: empty batch");
  const T* in = x.values().data();

  std::vector<T> mean(C), invstd(C);
  if (train) {
    auto rm = state.running_mean.mutable_values();
    auto rv = state.running_var.mutable_values();
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p) acc += in[(n * C + c) * HW + p];
      const double mu = acc / static_cast<double>(m);
      double sq = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p) {
          const double d = in[(n * C + c) * HW + p] - mu;
          sq += d * d;
        }
      const double var = sq / static_cast<double>(m);
      mean[c] = static_cast<T>(mu);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + state.eps));
      const double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : var;
      rm[c] = static_cast<T>(state.momentum * rm[c] + (1.0 - state.momentum) * mu);
      rv[c] = static_cast<T>(state.momentum * rv[c] + (1.0 - state.momentum) * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean.values()[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var.values()[c]) +
                                                 state.eps));
    }
  }

  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p) {
        const std::size_t idx = (n * C + c) * HW + p;
        const T h = (in[idx] - mean[c]) * invstd[c];
        (*xhat)[idx] = h;
        out[idx] = gamma.values()[c] * h + beta.values()[c];
      }

  Node<T>* xn = x.node();
  Node<T>* gn = gamma.node();
  Node<T>* bn = beta.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), OpKind::batchnorm, {x, gamma, beta},
      [xn, gn, bn, xhat, invstd, N, C, HW, m, train](Node<T>& self) {
        const auto& dy = self.grad;
        for (std::size_t c = 0; c < C; ++c) {
          T sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t p = 0; p < HW; ++p) {
              const std::size_t idx = (n * C + c) * HW + p;
              sum_dy += dy[idx];
              sum_dy_xhat += dy[idx] * (*xhat)[idx];
            }
          if (wants_grad(gn)) gn->grad_buffer()[c] += sum_dy_xhat;
          if (wants_grad(bn)) bn->grad_buffer()[c] += sum_dy;
          if (!wants_grad(xn)) continue;
          auto& gx = xn->grad_buffer();
          const T g = gn->values[c];
          const T inv_m = T(1) / static_cast<T>(m);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t p = 0; p < HW; ++p) {
              const std::size_t idx = (n * C + c) * HW + p;
              if (train)
                gx[idx] += g * invstd[c] * inv_m *
                           (static_cast<T>(m) * dy[idx] - sum_dy - (*xhat)[idx] * sum_dy_xhat);
              else
                gx[idx] += g * invstd[c] * dy[idx];
            }
        }
      });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool train, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("dropout: rate must lie in [0,1), got " + std::to_string(rate));
  if (!train || rate == 0.0) return x;
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  std::bernoulli_distribution keep(1.0 - rate);
  const T scale_kept = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = keep(rng) ? scale_kept : T(0);
    out[i] = x.values()[i] * (*mask)[i];
  }
  Node<T>* xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), OpKind::dropout, {x},
                                [xn, mask](Node<T>& self) {
                                  auto& gx = xn->grad_buffer();
                                  for (std::size_t i = 0; i < gx.size(); ++i)
                                    gx[i] += self.grad[i] * (*mask)[i];
                                });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), OpKind::add, {a, b},
                                [an, bn](Node<T>& self) {
                                  for (Node<T>* in : {an, bn}) {
                                    if (!wants_grad(in)) continue;
                                    auto& g = in->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), OpKind::mul, {a, b},
                                [an, bn](Node<T>& self) {
                                  if (wants_grad(an)) {
                                    auto& g = an->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += self.grad[i] * bn->values[i];
                                  }
                                  if (wants_grad(bn)) {
                                    auto& g = bn->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += self.grad[i] * an->values[i];
                                  }
                                });
}

template <typename T>
Tensor<T> linear_combination(std::span<const Tensor<T>> terms, std::span<const double> coefficients) {
  if (terms.empty()) throw DimensionError("linear_combination: no terms");
  if (terms.size() != coefficients.size())
    throw DimensionError("linear_combination: " + std::to_string(terms.size()) + " terms but " +
                         std::to_string(coefficients.size()) + " coefficients");
  for (const auto& t : terms) require_same_shape(terms[0].shape(), t.shape(), "linear_combination");
  std::vector<T> out(terms[0].numel(), T(0));
  for (std::size_t t = 0; t < terms.size(); ++t) {
    const T c = static_cast<T>(coefficients[t]);
    const auto v = terms[t].values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += c * v[i];
  }
  std::vector<Node<T>*> nodes;
  for (const auto& t : terms) nodes.push_back(t.node());
  std::vector<double> coeffs(coefficients.begin(), coefficients.end());
  return detail::make_result<T>(terms[0].shape(), std::move(out), OpKind::linear_combination,
                                std::vector<Tensor<T>>(terms.begin(), terms.end()),
                                [nodes, coeffs](Node<T>& self) {
                                  for (std::size_t t = 0; t < nodes.size(); ++t) {
                                    if (!wants_grad(nodes[t])) continue;
                                    auto& g = nodes[t]->grad_buffer();
                                    const T c = static_cast<T>(coeffs[t]);
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  const double coeff[1] = {factor};
  return linear_combination<T>(std::span<const Tensor<T>>(&x, 1), coeff);
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::log(std::max(x.values()[i], static_cast<T>(kLogFloor)));
  Node<T>* xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), OpKind::log, {x},
                                [xn](Node<T>& self) {
                                  auto& g = xn->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    if (xn->values[i] > static_cast<T>(kLogFloor))
                                      g[i] += self.grad[i] / xn->values[i];
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.values()) total += v;
  Node<T>* xn = x.node();
  return detail::make_result<T>(Shape{}, std::vector<T>{total}, OpKind::sum, {x},
                                [xn](Node<T>& self) {
                                  auto& g = xn->grad_buffer();
                                  for (auto& v : g) v += self.grad[0];
                                });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisLayout l = axis_layout(x.shape(), axis, "slice");
  if (start + length > l.extent)
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") exceeds axis extent " +
                         std::to_string(l.extent));
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<T> out(l.outer * length * l.inner);
  for (std::size_t o = 0; o < l.outer; ++o) {
    const T* src = x.values().data() + (o * l.extent + start) * l.inner;
    std::copy(src, src + length * l.inner, out.data() + o * length * l.inner);
  }
  Node<T>* xn = x.node();
  return detail::make_result<T>(std::move(shape), std::move(out), OpKind::slice, {x},
                                [xn, l, start, length](Node<T>& self) {
                                  auto& g = xn->grad_buffer();
                                  for (std::size_t o = 0; o < l.outer; ++o)
                                    for (std::size_t q = 0; q < length * l.inner; ++q)
                                      g[(o * l.extent + start) * l.inner + q] +=
                                          self.grad[o * length * l.inner + q];
                                });
}

template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, std::size_t top, std::size_t bottom, std::size_t left,
                std::size_t right) {
  if (x.rank() < 2) throw DimensionError("pad2d: needs at least two axes");
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  const std::size_t planes = x.numel() / std::max<std::size_t>(1, H * W);
  const std::size_t OH = H + top + bottom, OW = W + left + right;
  Shape shape = x.shape();
  shape[shape.size() - 2] = OH;
  shape[shape.size() - 1] = OW;
  std::vector<T> out(planes * OH * OW, T(0));
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < H; ++y)
      std::copy_n(x.values().data() + (p * H + y) * W, W,
                  out.data() + (p * OH + y + top) * OW + left);
  Node<T>* xn = x.node();
  return detail::make_result<T>(std::move(shape), std::move(out), OpKind::pad, {x},
                                [xn, planes, H, W, OH, OW, top, left](Node<T>& self) {
                                  auto& g = xn->grad_buffer();
                                  for (std::size_t p = 0; p < planes; ++p)
                                    for (std::size_t y = 0; y < H; ++y)
                                      for (std::size_t c = 0; c < W; ++c)
                                        g[(p * H + y) * W + c] +=
                                            self.grad[(p * OH + y + top) * OW + left + c];
                                });
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t a = 0; a < first.size(); ++a)
      if (a != axis && p.dim(a) != first[a])
        throw DimensionError("concat: extent mismatch on axis " + std::to_string(a) + ": " +
                             shape_to_string(p.shape()) + " vs " + shape_to_string(first));
    shape[axis] += p.dim(axis);
  }
  const AxisLayout l = axis_layout(shape, axis, "concat");
  std::vector<T> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t e = p.dim(axis);
    for (std::size_t o = 0; o < l.outer; ++o)
      std::copy_n(p.values().data() + o * e * l.inner, e * l.inner,
                  out.data() + (o * l.extent + offset) * l.inner);
    offset += e;
  }
  std::vector<Node<T>*> nodes;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    extents.push_back(p.dim(axis));
  }
  return detail::make_result<T>(std::move(shape), std::move(out), OpKind::concat,
                                std::vector<Tensor<T>>(parts.begin(), parts.end()),
                                [nodes, extents, offsets, l](Node<T>& self) {
                                  for (std::size_t k = 0; k < nodes.size(); ++k) {
                                    if (!wants_grad(nodes[k])) continue;
                                    auto& g = nodes[k]->grad_buffer();
                                    const std::size_t e = extents[k];
                                    for (std::size_t o = 0; o < l.outer; ++o)
                                      for (std::size_t q = 0; q < e * l.inner; ++q)
                                        g[o * e * l.inner + q] +=
                                            self.grad[(o * l.extent + offsets[k]) * l.inner + q];
                                  }
                                });
}

namespace {
struct BilinearTap {
  std::size_t lo, hi;
  double w_hi;
};
std::vector<BilinearTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<BilinearTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[d] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}
}  // namespace

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() < 2) throw DimensionError("resize_bilinear: needs at least two axes");
  if (out_h == 0 || out_w == 0) throw DimensionError("resize_bilinear: empty output extent");
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  if (H == 0 || W == 0) throw DimensionError("resize_bilinear: empty input extent");
  const std::size_t planes = x.numel() / (H * W);
  const auto ty = bilinear_taps(H, out_h);
  const auto tx = bilinear_taps(W, out_w);
  Shape shape = x.shape();
  shape[shape.size() - 2] = out_h;
  shape[shape.size() - 1] = out_w;
  std::vector<T> out(planes * out_h * out_w);
  const T* in = x.values().data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t c = 0; c < out_w; ++c) {
        const T* plane = in + p * H * W;
        const double top = plane[ty[y].lo * W + tx[c].lo] * (1 - tx[c].w_hi) +
                           plane[ty[y].lo * W + tx[c].hi] * tx[c].w_hi;
        const double bot = plane[ty[y].hi * W + tx[c].lo] * (1 - tx[c].w_hi) +
                           plane[ty[y].hi * W + tx[c].hi] * tx[c].w_hi;
        out[(p * out_h + y) * out_w + c] = static_cast<T>(top * (1 - ty[y].w_hi) + bot * ty[y].w_hi);
      }
  Node<T>* xn = x.node();
  return detail::make_result<T>(
      std::move(shape), std::move(out), OpKind::resize_bilinear, {x},
      [xn, ty, tx, planes, H, W, out_h, out_w](Node<T>& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p)
          for (std::size_t y = 0; y < out_h; ++y)
            for (std::size_t c = 0; c < out_w; ++c) {
              const double d = self.grad[(p * out_h + y) * out_w + c];
              T* plane = g.data() + p * H * W;
              const double wy = ty[y].w_hi, wx = tx[c].w_hi;
              plane[ty[y].lo * W + tx[c].lo] += static_cast<T>(d * (1 - wy) * (1 - wx));
              plane[ty[y].lo * W + tx[c].hi] += static_cast<T>(d * (1 - wy) * wx);
              plane[ty[y].hi * W + tx[c].lo] += static_cast<T>(d * wy * (1 - wx));
              plane[ty[y].hi * W + tx[c].hi] += static_cast<T>(d * wy * wx);
            }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                         shape_to_string(shape));
  std::vector<T> out(x.values().begin(), x.values().end());
  Node<T>* xn = x.node();
  return detail::make_result<T>(std::move(shape), std::move(out), OpKind::reshape, {x},
                                [xn](Node<T>& self) {
                                  auto& g = xn->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                });
}

namespace {
void check_cells(const Shape& map, std::span<const Cell> cells, const char* op) {
  for (const auto& c : cells)
    if (c.n >= map[0] || c.i >= map[2] || c.j >= map[3])
      throw DimensionError(std::string(op) + ": cell (" + std::to_string(c.n) + "," +
                           std::to_string(c.i) + "," + std::to_string(c.j) +
                           ") outside map " + shape_to_string(map));
}
}  // namespace

template <typename T>
Tensor<T> gather_cells(const Tensor<T>& map, std::span<const Cell> cells) {
  require_rank(map.shape(), 4, "gather_cells");
  check_cells(map.shape(), cells, "gather_cells");
  const std::size_t D = map.dim(1), H = map.dim(2), W = map.dim(3);
  std::vector<T> out(cells.size() * D);
  for (std::size_t p = 0; p < cells.size(); ++p)
    for (std::size_t d = 0; d < D; ++d)
      out[p * D + d] = map.values()[((cells[p].n * D + d) * H + cells[p].i) * W + cells[p].j];
  std::vector<Cell> where(cells.begin(), cells.end());
  Node<T>* mn = map.node();
  return detail::make_result<T>({cells.size(), D, 1, 1}, std::move(out), OpKind::gather_cells,
                                {map}, [mn, where, D, H, W](Node<T>& self) {
                                  auto& g = mn->grad_buffer();
                                  for (std::size_t p = 0; p < where.size(); ++p)
                                    for (std::size_t d = 0; d < D; ++d)
                                      g[((where[p].n * D + d) * H + where[p].i) * W + where[p].j] +=
                                          self.grad[p * D + d];
                                });
}

template <typename T>
Tensor<T> place_cells(const Tensor<T>& base, const Tensor<T>& values, std::span<const Cell> cells) {
  require_rank(base.shape(), 4, "place_cells");
  check_cells(base.shape(), cells, "place_cells");
  const std::size_t D = base.dim(1), H = base.dim(2), W = base.dim(3);
  if (values.numel() != cells.size() * D)
    throw DimensionError("place_cells: " + std::to_string(cells.size()) + " cells of dimension " +
                         std::to_string(D) + " but values have shape " +
                         shape_to_string(values.shape()));
  for (std::size_t a = 0; a < cells.size(); ++a)
    for (std::size_t b = a + 1; b < cells.size(); ++b)
      if (cells[a] == cells[b]) throw std::invalid_argument("place_cells: duplicate cell");
  std::vector<T> out(base.values().begin(), base.values().end());
  auto mask = std::make_shared<std::vector<char>>(out.size(), 0);
  for (std::size_t p = 0; p < cells.size(); ++p)
    for (std::size_t d = 0; d < D; ++d) {
      const std::size_t idx = ((cells[p].n * D + d) * H + cells[p].i) * W + cells[p].j;
      out[idx] = values.values()[p * D + d];
      (*mask)[idx] = 1;
    }
  std::vector<Cell> where(cells.begin(), cells.end());
  Node<T>* bn = base.node();
  Node<T>* vn = values.node();
  return detail::make_result<T>(
      base.shape(), std::move(out), OpKind::place_cells, {base, values},
      [bn, vn, where, mask, D, H, W](Node<T>& self) {
        if (wants_grad(bn)) {
          auto& g = bn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i)
            if (!(*mask)[i]) g[i] += self.grad[i];
        }
        if (wants_grad(vn)) {
          auto& g = vn->grad_buffer();
          for (std::size_t p = 0; p < where.size(); ++p)
            for (std::size_t d = 0; d < D; ++d)
              g[p * D + d] += self.grad[((where[p].n * D + d) * H + where[p].i) * W + where[p].j];
        }
      });
}

template <typename T>
Tensor<T> forward_op(OpKind op, std::span<const Tensor<T>> inputs, OpAttributes<T> a) {
  auto arity = [&](std::size_t lo, std::size_t hi) {
    if (inputs.size() < lo || inputs.size() > hi)
      throw GraphError(std::string(op_name(op)) + ": got " + std::to_string(inputs.size()) +
                       " inputs");
  };
  switch (op) {
    case OpKind::conv2d:
      arity(2, 3);
      return conv2d(inputs[0], inputs[1], inputs.size() == 3 ? inputs[2] : Tensor<T>(), a.conv);
    case OpKind::maxpool2d:
      arity(1, 1);
      return maxpool2d(inputs[0], a.kernel_h, a.kernel_w, a.stride_h, a.stride_w);
    case OpKind::avgpool_global:
      arity(1, 1);
      return avgpool_global(inputs[0]);
    case OpKind::maxpool_global:
      arity(1, 1);
      return maxpool_global(inputs[0]);
    case OpKind::relu:
      arity(1, 1);
      return relu(inputs[0]);
    case OpKind::softmax:
      arity(1, 1);
      return softmax(inputs[0], a.axis);
    case OpKind::batchnorm:
      arity(3, 3);
      if (a.batchnorm_state == nullptr) throw GraphError("batchnorm: no running-statistics state");
      return batchnorm(inputs[0], inputs[1], inputs[2], *a.batchnorm_state, a.train);
    case OpKind::dropout:
      arity(1, 1);
      if (a.rng == nullptr) throw GraphError("dropout: no random generator");
      return dropout(inputs[0], a.rate, a.train, *a.rng);
    case OpKind::add:
      arity(2, 2);
      return add(inputs[0], inputs[1]);
    case OpKind::mul:
      arity(2, 2);
      return mul(inputs[0], inputs[1]);
    case OpKind::linear_combination:
      arity(1, std::numeric_limits<std::size_t>::max());
      return linear_combination(inputs, std::span<const double>(a.coefficients));
    case OpKind::log:
      arity(1, 1);
      return log(inputs[0]);
    case OpKind::sum:
      arity(1, 1);
      return sum(inputs[0]);
    case OpKind::slice:
      arity(1, 1);
      return slice(inputs[0], a.axis, a.start, a.length);
    case OpKind::pad:
      arity(1, 1);
      return pad2d(inputs[0], a.pad_top, a.pad_bottom, a.pad_left, a.pad_right);
    case OpKind::concat:
      arity(1, std::numeric_limits<std::size_t>::max());
      return concat(inputs, a.axis);
    case OpKind::resize_bilinear:
      arity(1, 1);
      return resize_bilinear(inputs[0], a.out_h, a.out_w);
    default:
      break;
  }
  throw GraphError(std::string("forward_op: '") + op_name(op) +
                   "' is not available through the generic entry point");
}

#define DCN_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                            const Conv2dOptions&);                                               \
  template Tensor<T> maxpool2d(const Tensor<T>&, std::size_t, std::size_t, std::size_t,         \
                               std::size_t);                                                     \
  template Tensor<T> avgpool_global(const Tensor<T>&);                                           \
  template Tensor<T> maxpool_global(const Tensor<T>&);                                           \
  template Tensor<T> relu(const Tensor<T>&);                                                     \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                     \
  template Tensor<T> batchnorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                               BatchNormState<T>&, bool);                                        \
  template Tensor<T> dropout(const Tensor<T>&, double, bool, std::mt19937_64&);                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> linear_combination(std::span<const Tensor<T>>, std::span<const double>);    \
  template Tensor<T> scale(const Tensor<T>&, double);                                            \
  template Tensor<T> log(const Tensor<T>&);                                                      \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);             \
  template Tensor<T> pad2d(const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t); \
  template Tensor<T> concat(std::span<const Tensor<T>>, std::size_t);                            \
  template Tensor<T> resize_bilinear(const Tensor<T>&, std::size_t, std::size_t);                \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> gather_cells(const Tensor<T>&, std::span<const Cell>);                      \
  template Tensor<T> place_cells(const Tensor<T>&, const Tensor<T>&, std::span<const Cell>);     \
  template Tensor<T> forward_op(OpKind, std::span<const Tensor<T>>, OpAttributes<T>);

DCN_INSTANTIATE_OPS(float)
DCN_INSTANTIATE_OPS(double)

}  // namespace dcn
