// Layer stacks: the coarse layers, fine layers and top layers of a DCN.
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dcn/ops.hpp"
#include "dcn/tensor.hpp"

namespace dcn {

enum class LayerKind {
  conv,
  maxpool,
  batchnorm,
  relu,
  dropout,
  global_avg_pool,
  global_max_pool,
  softmax,
};

const char* layer_kind_name(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::string name;
  std::size_t filter_h = 1;
  std::size_t filter_w = 1;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
  std::size_t channels = 0;  // conv output channels
  double dropout_rate = 0.0;
  // softmax: consecutive channel groups normalized independently; empty means
  // one group spanning every channel.
  std::vector<std::size_t> groups;

  /// Throws std::invalid_argument when strides, filters or rates are invalid.
  void validate() const;

  static LayerSpec conv(std::string name, std::size_t channels, std::size_t filter_h,
                        std::size_t filter_w, std::size_t stride_h = 1, std::size_t stride_w = 1,
                        std::size_t pad_h = 0, std::size_t pad_w = 0);
  static LayerSpec maxpool(std::string name, std::size_t size, std::size_t stride);
  static LayerSpec batchnorm(std::string name);
  static LayerSpec relu(std::string name);
  static LayerSpec dropout(std::string name, double rate);
  static LayerSpec global_avg_pool(std::string name);
  static LayerSpec global_max_pool(std::string name);
  static LayerSpec softmax(std::string name, std::vector<std::size_t> groups = {});
};

enum class Mode { train, infer };

/// Input rectangle, possibly extending past the image where padding is used.
struct Rect {
  std::ptrdiff_t top = 0;
  std::ptrdiff_t left = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  friend bool operator==(const Rect&, const Rect&) = default;
};

/// Composed filter geometry: output (i, j) reads the input rectangle
/// (offset_h + i*stride_h, offset_w + j*stride_w, size_h, size_w).
struct FieldGeometry {
  std::size_t size_h = 1;
  std::size_t size_w = 1;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::ptrdiff_t offset_h = 0;
  std::ptrdiff_t offset_w = 0;
};

template <typename T>
class LayerStack {
 public:
  LayerStack() = default;
  LayerStack(std::string name, std::size_t input_channels, std::vector<LayerSpec> specs,
             std::uint64_t seed = 0);

  const std::string& name() const { return name_; }
  std::size_t input_channels() const { return input_channels_; }
  const std::vector<LayerSpec>& specs() const { return specs_; }
  std::size_t size() const { return specs_.size(); }
  /// Channel count D of the representation this stack emits.
  std::size_t output_dim() const;

  /// Per-layer output shapes for an input shape; the error names the failing layer.
  std::vector<Shape> layer_shapes(const Shape& input) const;
  Shape output_shape(const Shape& input) const;

  Tensor<T> forward(const Tensor<T>& x, Mode mode, std::vector<Tensor<T>>* trace = nullptr);
  Tensor<T> forward_layer(std::size_t index, const Tensor<T>& x, Mode mode);
  /// Inference-mode forward that leaves the stack untouched.
  Tensor<T> infer(const Tensor<T>& x) const;
  /// Inference-mode layers [begin, end) only.
  Tensor<T> infer(const Tensor<T>& x, std::size_t begin, std::size_t end) const;

  FieldGeometry field_geometry() const;
  /// Input rectangle feeding output position (i, j) for an input of the given extents.
  Rect receptive_field(std::size_t i, std::size_t j, std::size_t input_h, std::size_t input_w) const;

  std::vector<Tensor<T>> parameters() const;
  /// Parameters plus batchnorm running statistics, under stable dotted names.
  std::vector<std::pair<std::string, Tensor<T>>> named_state() const;
  std::size_t parameter_count() const;

  /// He-uniform conv weights, zero biases, unit batchnorm scale.
  void initialize(std::uint64_t seed);
  void seed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }
  void set_trainable(bool on);
  /// Independent copy whose parameters take no gradient.
  LayerStack frozen_copy() const;

  /// Same architecture and values in another precision.
  template <typename U>
  LayerStack<U> cast() const;

 private:
  struct LayerParams {
    Tensor<T> weight;
    Tensor<T> bias;
    Tensor<T> gamma;
    Tensor<T> beta;
    BatchNormState<T> stats;
  };

  Tensor<T> apply(std::size_t index, const Tensor<T>& x, Mode mode, std::mt19937_64& rng) const;
  std::string label(std::size_t index) const { return name_ + "/" + specs_[index].name; }

  std::string name_;
  std::size_t input_channels_ = 0;
  std::vector<LayerSpec> specs_;
  std::vector<LayerParams> params_;
  std::mt19937_64 dropout_rng_;

  template <typename U>
  friend class LayerStack;
};

/// Names accepted by build_preset.
const std::vector<std::string>& preset_names();
std::vector<LayerSpec> preset_specs(const std::string& name);
std::size_t preset_input_channels(const std::string& name);

/// Full-size cluttered-digit and house-number architectures plus two small families:
///   cmnist-{coarse,fine,top}, svhn-{coarse,fine,top},
///   toy-{coarse,fine,top}   28x28, stride-compatible coarse and fine,
///   seqdesk-{coarse,fine,top} small multi-digit models.
template <typename T>
LayerStack<T> build_preset(const std::string& name, std::uint64_t seed = 0);

extern template class LayerStack<float>;
extern template class LayerStack<double>;

}  // namespace dcn
