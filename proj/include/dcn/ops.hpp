// Differentiable primitives over NCHW tensors.
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "dcn/tensor.hpp"

namespace dcn {

struct Conv2dOptions {
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
};

/// Multiplications in one convolution evaluated by patch unrolling:
/// out_h * out_w * out_c * in_c * filter_h * filter_w.
std::uint64_t conv_mults(std::uint64_t in_channels, std::uint64_t out_channels,
                         std::uint64_t filter_h, std::uint64_t filter_w,
                         std::uint64_t out_h, std::uint64_t out_w);

/// Output extent of a strided window; throws DimensionError when the padded
/// input is smaller than the window.
std::size_t window_output_extent(std::size_t input, std::size_t window, std::size_t stride,
                                 std::size_t pad, const char* what);

/// x [N,C,H,W], weight [OC,C,KH,KW], bias [OC] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dOptions& options = {});

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t kernel_h, std::size_t kernel_w,
                    std::size_t stride_h, std::size_t stride_w);

/// [N,C,H,W] -> [N,C,1,1].
template <typename T>
Tensor<T> avgpool_global(const Tensor<T>& x);
template <typename T>
Tensor<T> maxpool_global(const Tensor<T>& x);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// Softmax along one axis; subtracts the running max for stability.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.9;
  double eps = 1e-5;
};

/// Per-channel normalization over N,H,W. Train mode uses batch statistics and
/// updates the running estimates in place; infer mode reads them only.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormState<T>& state, bool train);

/// Inverted dropout; the identity when train is false.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool train, std::mt19937_64& rng);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// sum_i coefficients[i] * terms[i]; all terms share one shape.
template <typename T>
Tensor<T> linear_combination(std::span<const Tensor<T>> terms, std::span<const double> coefficients);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor);

/// Natural log with the input clamped at 1e-12.
template <typename T>
Tensor<T> log(const Tensor<T>& x);
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
/// Zero padding of the two trailing (spatial) axes.
template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, std::size_t top, std::size_t bottom, std::size_t left,
                std::size_t right);
template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis);
/// Bilinear resize of the two trailing axes, half-pixel centres.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

struct Cell {
  std::size_t n = 0;
  std::size_t i = 0;
  std::size_t j = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

/// Vectors of map [N,D,H,W] at the given cells, as [P,D,1,1].
template <typename T>
Tensor<T> gather_cells(const Tensor<T>& map, std::span<const Cell> cells);
/// Copy of base with values[p] written at cells[p]. Gradient reaches base
/// only at untouched cells and values only through their own cell.
template <typename T>
Tensor<T> place_cells(const Tensor<T>& base, const Tensor<T>& values, std::span<const Cell> cells);

/// Attribute bag for the name-driven entry point.
template <typename T>
struct OpAttributes {
  Conv2dOptions conv;
  std::size_t kernel_h = 2, kernel_w = 2, stride_h = 2, stride_w = 2;
  std::size_t axis = 0, start = 0, length = 0;
  std::size_t pad_top = 0, pad_bottom = 0, pad_left = 0, pad_right = 0;
  std::size_t out_h = 0, out_w = 0;
  std::vector<double> coefficients;
  double rate = 0.0;
  bool train = false;
  BatchNormState<T>* batchnorm_state = nullptr;
  std::mt19937_64* rng = nullptr;
};

/// Applies a primitive by identifier, checking arity first.
template <typename T>
Tensor<T> forward_op(OpKind op, std::span<const Tensor<T>> inputs, OpAttributes<T> attributes = {});

}  // namespace dcn
