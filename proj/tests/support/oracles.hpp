// Test-side reference implementations: central-difference gradients, a
// nested-loop forward for layer stacks, and small numeric helpers. Nothing
// here calls the library's ops, so agreement is evidence, not tautology.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dcn/layers.hpp"
#include "dcn/tensor.hpp"

namespace dcn::oracle {

// Relative error with the denominator floored so that entries whose true
// gradient is ~0 are judged on absolute error at that scale.
inline constexpr double kRelFloor = 1e-4;

inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), kRelFloor});
}

struct GradReport {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

/// Every coordinate of every tensor in `wrt` against (f(x+h) - f(x-h)) / 2h.
/// `f` must rebuild its graph from the current values of `wrt`.
inline GradReport check_gradients(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> wrt, double h = 1e-5) {
  for (auto& t : wrt) t.zero_grad();
  backward(f());
  std::vector<std::vector<double>> analytic;
  for (auto& t : wrt) {
    if (t.has_grad())
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    else
      analytic.emplace_back(t.numel(), 0.0);
  }
  GradReport report;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    auto values = wrt[k].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double plus = f().item();
      values[i] = saved - h;
      const double minus = f().item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2 * h);
      const double e = rel_error(analytic[k][i], numeric);
      ++report.checked;
      if (e > report.max_rel_error) {
        report.max_rel_error = e;
        report.worst = "tensor " + std::to_string(k) + " index " + std::to_string(i) +
                       ": analytic " + std::to_string(analytic[k][i]) + " numeric " +
                       std::to_string(numeric);
      }
    }
  }
  return report;
}

/// Directional check along a random unit direction v (+-1 entries, scaled)
/// over all of `wrt` at once: grad . v against (f(x+hv) - f(x-hv)) / 2h.
inline GradReport check_directional(const std::function<Tensor<double>()>& f,
                                    std::vector<Tensor<double>> wrt, std::mt19937_64& rng,
                                    double h = 1e-5) {
  for (auto& t : wrt) t.zero_grad();
  backward(f());
  std::bernoulli_distribution coin(0.5);
  std::vector<std::vector<double>> dirs;
  double analytic = 0.0;
  std::size_t total = 0;
  for (auto& t : wrt) total += t.numel();
  const double unit = 1.0 / std::sqrt(static_cast<double>(total));
  for (auto& t : wrt) {
    std::vector<double> v(t.numel());
    for (auto& x : v) x = coin(rng) ? unit : -unit;
    if (t.has_grad())
      for (std::size_t i = 0; i < v.size(); ++i) analytic += t.grad()[i] * v[i];
    dirs.push_back(std::move(v));
  }
  NoGradGuard no_grad;
  auto shift = [&](double step) {
    for (std::size_t k = 0; k < wrt.size(); ++k) {
      auto values = wrt[k].mutable_values();
      for (std::size_t i = 0; i < values.size(); ++i) values[i] += step * dirs[k][i];
    }
  };
  std::vector<std::vector<double>> saved;
  for (auto& t : wrt) saved.emplace_back(t.values().begin(), t.values().end());
  auto restore = [&] {
    for (std::size_t k = 0; k < wrt.size(); ++k)
      std::copy(saved[k].begin(), saved[k].end(), wrt[k].mutable_values().begin());
  };
  shift(h);
  const double plus = f().item();
  restore();
  shift(-h);
  const double minus = f().item();
  restore();
  const double numeric = (plus - minus) / (2 * h);
  GradReport report;
  report.checked = 1;
  report.max_rel_error = rel_error(analytic, numeric);
  report.worst = "analytic " + std::to_string(analytic) + " numeric " + std::to_string(numeric);
  return report;
}

inline std::vector<double> uniform_values(std::size_t n, std::mt19937_64& rng, double lo = -2.0,
                                          double hi = 2.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

/// Plain NCHW array for the reference forward.
struct Array {
  std::size_t n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;
  double& at(std::size_t a, std::size_t b, std::size_t i, std::size_t j) {
    return v[((a * c + b) * h + i) * w + j];
  }
  double at(std::size_t a, std::size_t b, std::size_t i, std::size_t j) const {
    return v[((a * c + b) * h + i) * w + j];
  }
};

inline Array make_array(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  return Array{n, c, h, w, std::vector<double>(n * c * h * w, 0.0)};
}

/// Direct convolution: zero padding, explicit loops over every tap.
inline Array direct_conv(const Array& x, const std::vector<double>& weight,
                         const std::vector<double>& bias, std::size_t oc, std::size_t fh,
                         std::size_t fw, std::size_t sh, std::size_t sw, std::size_t ph,
                         std::size_t pw) {
  const std::size_t oh = (x.h + 2 * ph - fh) / sh + 1, ow = (x.w + 2 * pw - fw) / sw + 1;
  Array y = make_array(x.n, oc, oh, ow);
  for (std::size_t a = 0; a < x.n; ++a)
    for (std::size_t o = 0; o < oc; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (std::size_t c = 0; c < x.c; ++c)
            for (std::size_t u = 0; u < fh; ++u)
              for (std::size_t v = 0; v < fw; ++v) {
                const long r = static_cast<long>(i * sh + u) - static_cast<long>(ph);
                const long q = static_cast<long>(j * sw + v) - static_cast<long>(pw);
                if (r < 0 || q < 0 || r >= static_cast<long>(x.h) || q >= static_cast<long>(x.w))
                  continue;
                acc += weight[((o * x.c + c) * fh + u) * fw + v] *
                       x.at(a, c, static_cast<std::size_t>(r), static_cast<std::size_t>(q));
              }
          y.at(a, o, i, j) = acc;
        }
  return y;
}

/// Inference-mode forward of a stack with loops written from the layer
/// definitions; parameters are read by name from named_state().
template <typename T>
Array reference_forward(const LayerStack<T>& stack, Array x) {
  std::map<std::string, std::vector<double>> params;
  for (const auto& [name, t] : stack.named_state())
    params[name] = std::vector<double>(t.values().begin(), t.values().end());
  for (const LayerSpec& s : stack.specs()) {
    const std::string prefix = stack.name() + "." + s.name + ".";
    switch (s.kind) {
      case LayerKind::conv:
        x = direct_conv(x, params.at(prefix + "weight"), params.at(prefix + "bias"), s.channels,
                        s.filter_h, s.filter_w, s.stride_h, s.stride_w, s.pad_h, s.pad_w);
        break;
      case LayerKind::batchnorm: {
        const auto& g = params.at(prefix + "gamma");
        const auto& b = params.at(prefix + "beta");
        const auto& m = params.at(prefix + "running_mean");
        const auto& var = params.at(prefix + "running_var");
        for (std::size_t a = 0; a < x.n; ++a)
          for (std::size_t c = 0; c < x.c; ++c)
            for (std::size_t i = 0; i < x.h; ++i)
              for (std::size_t j = 0; j < x.w; ++j)
                x.at(a, c, i, j) = (x.at(a, c, i, j) - m[c]) / std::sqrt(var[c] + 1e-5) * g[c] + b[c];
        break;
      }
      case LayerKind::relu:
        for (auto& v : x.v) v = std::max(v, 0.0);
        break;
      case LayerKind::dropout:
        break;
      case LayerKind::maxpool: {
        const std::size_t oh = (x.h - s.filter_h) / s.stride_h + 1;
        const std::size_t ow = (x.w - s.filter_w) / s.stride_w + 1;
        Array y = make_array(x.n, x.c, oh, ow);
        for (std::size_t a = 0; a < x.n; ++a)
          for (std::size_t c = 0; c < x.c; ++c)
            for (std::size_t i = 0; i < oh; ++i)
              for (std::size_t j = 0; j < ow; ++j) {
                double best = -std::numeric_limits<double>::infinity();
                for (std::size_t u = 0; u < s.filter_h; ++u)
                  for (std::size_t v = 0; v < s.filter_w; ++v)
                    best = std::max(best, x.at(a, c, i * s.stride_h + u, j * s.stride_w + v));
                y.at(a, c, i, j) = best;
              }
        x = std::move(y);
        break;
      }
      case LayerKind::global_avg_pool:
      case LayerKind::global_max_pool: {
        Array y = make_array(x.n, x.c, 1, 1);
        for (std::size_t a = 0; a < x.n; ++a)
          for (std::size_t c = 0; c < x.c; ++c) {
            double acc = s.kind == LayerKind::global_avg_pool
                             ? 0.0
                             : -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < x.h; ++i)
              for (std::size_t j = 0; j < x.w; ++j)
                acc = s.kind == LayerKind::global_avg_pool ? acc + x.at(a, c, i, j)
                                                           : std::max(acc, x.at(a, c, i, j));
            y.at(a, c, 0, 0) =
                s.kind == LayerKind::global_avg_pool ? acc / static_cast<double>(x.h * x.w) : acc;
          }
        x = std::move(y);
        break;
      }
      case LayerKind::softmax: {
        std::vector<std::size_t> groups = s.groups;
        if (groups.empty()) groups = {x.c};
        for (std::size_t a = 0; a < x.n; ++a)
          for (std::size_t i = 0; i < x.h; ++i)
            for (std::size_t j = 0; j < x.w; ++j) {
              std::size_t first = 0;
              for (std::size_t g : groups) {
                double mx = -std::numeric_limits<double>::infinity(), total = 0.0;
                for (std::size_t c = first; c < first + g; ++c) mx = std::max(mx, x.at(a, c, i, j));
                for (std::size_t c = first; c < first + g; ++c) total += std::exp(x.at(a, c, i, j) - mx);
                for (std::size_t c = first; c < first + g; ++c)
                  x.at(a, c, i, j) = std::exp(x.at(a, c, i, j) - mx) / total;
                first += g;
              }
            }
        break;
      }
    }
  }
  return x;
}

/// Natural-log entropy evaluated in long double.
inline long double entropy_ld(const std::vector<long double>& p) {
  long double h = 0.0L;
  for (long double x : p)
    if (x > 0.0L) h -= x * std::log(x);
  return h;
}

}  // namespace dcn::oracle
