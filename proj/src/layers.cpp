#include "dcn/layers.hpp"

#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "dcn/op_counter.hpp"

namespace dcn {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::maxpool: return "pool";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::dropout: return "dropout";
    case LayerKind::global_avg_pool: return "global-avg-pool";
    case LayerKind::global_max_pool: return "global-max-pool";
    case LayerKind::softmax: return "softmax-head";
  }
  return "unknown";
}

void LayerSpec::validate() const {
  const std::string who = "layer '" + name + "': ";
  if (stride_h < 1 || stride_w < 1) throw std::invalid_argument(who + "strides must be >= 1");
  if (filter_h < 1 || filter_w < 1) throw std::invalid_argument(who + "filter extents must be >= 1");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw std::invalid_argument(who + "dropout rate must lie in [0,1)");
  if (kind == LayerKind::conv && channels == 0)
    throw std::invalid_argument(who + "conv needs at least one filter");
}

LayerSpec LayerSpec::conv(std::string name, std::size_t channels, std::size_t filter_h,
                          std::size_t filter_w, std::size_t stride_h, std::size_t stride_w,
                          std::size_t pad_h, std::size_t pad_w) {
  LayerSpec s;
  s.kind = LayerKind::conv;
  s.name = std::move(name);
  s.channels = channels;
  s.filter_h = filter_h;
  s.filter_w = filter_w;
  s.stride_h = stride_h;
  s.stride_w = stride_w;
  s.pad_h = pad_h;
  s.pad_w = pad_w;
  return s;
}

LayerSpec LayerSpec::maxpool(std::string name, std::size_t size, std::size_t stride) {
  LayerSpec s;
  s.kind = LayerKind::maxpool;
  s.name = std::move(name);
  s.filter_h = s.filter_w = size;
  s.stride_h = s.stride_w = stride;
  return s;
}

LayerSpec LayerSpec::batchnorm(std::string name) {
  LayerSpec s;
  s.kind = LayerKind::batchnorm;
  s.name = std::move(name);
  return s;
}

LayerSpec LayerSpec::relu(std::string name) {
  LayerSpec s;
  s.kind = LayerKind::relu;
  s.name = std::move(name);
  return s;
}

LayerSpec LayerSpec::dropout(std::string name, double rate) {
  LayerSpec s;
  s.kind = LayerKind::dropout;
  s.name = std::move(name);
  s.dropout_rate = rate;
  return s;
}

LayerSpec LayerSpec::global_avg_pool(std::string name) {
  LayerSpec s;
  s.kind = LayerKind::global_avg_pool;
  s.name = std::move(name);
  return s;
}

LayerSpec LayerSpec::global_max_pool(std::string name) {
  LayerSpec s;
  s.kind = LayerKind::global_max_pool;
  s.name = std::move(name);
  return s;
}

LayerSpec LayerSpec::softmax(std::string name, std::vector<std::size_t> groups) {
  LayerSpec s;
  s.kind = LayerKind::softmax;
  s.name = std::move(name);
  s.groups = std::move(groups);
  return s;
}

template <typename T>
LayerStack<T>::LayerStack(std::string name, std::size_t input_channels,
                          std::vector<LayerSpec> specs, std::uint64_t seed)
    : name_(std::move(name)), input_channels_(input_channels), specs_(std::move(specs)) {
  if (input_channels_ == 0) throw std::invalid_argument("stack '" + name_ + "': no input channels");
  std::size_t channels = input_channels_;
  params_.resize(specs_.size());
  for (std::size_t l = 0; l < specs_.size(); ++l) {
    const LayerSpec& s = specs_[l];
    s.validate();
    LayerParams& p = params_[l];
    const std::string prefix = name_ + "." + s.name + ".";
    switch (s.kind) {
      case LayerKind::conv:
        p.weight = Tensor<T>({s.channels, channels, s.filter_h, s.filter_w}, T(0), true);
        p.weight.set_name(prefix + "weight");
        p.bias = Tensor<T>({s.channels}, T(0), true);
        p.bias.set_name(prefix + "bias");
        channels = s.channels;
        break;
      case LayerKind::batchnorm:
        p.gamma = Tensor<T>({channels}, T(1), true);
        p.gamma.set_name(prefix + "gamma");
        p.beta = Tensor<T>({channels}, T(0), true);
        p.beta.set_name(prefix + "beta");
        p.stats.running_mean = Tensor<T>({channels}, T(0));
        p.stats.running_mean.set_name(prefix + "running_mean");
        p.stats.running_var = Tensor<T>({channels}, T(1));
        p.stats.running_var.set_name(prefix + "running_var");
        break;
      case LayerKind::softmax:
        if (!s.groups.empty() &&
            std::accumulate(s.groups.begin(), s.groups.end(), std::size_t{0}) != channels)
          throw std::invalid_argument("layer '" + s.name + "': softmax groups do not cover " +
                                      std::to_string(channels) + " channels");
        break;
      default:
        break;
    }
  }
  initialize(seed);
  dropout_rng_.seed(seed ^ 0x9e3779b97f4a7c15ULL);
}

template <typename T>
std::size_t LayerStack<T>::output_dim() const {
  std::size_t channels = input_channels_;
  for (const auto& s : specs_)
    if (s.kind == LayerKind::conv) channels = s.channels;
  return channels;
}

template <typename T>
std::vector<Shape> LayerStack<T>::layer_shapes(const Shape& input) const {
  if (input.size() != 4)
    throw DimensionError("stack '" + name_ + "': expected [N,C,H,W] input, got " +
                         shape_to_string(input));
  if (input[1] != input_channels_)
    throw DimensionError("stack '" + name_ + "': expected " + std::to_string(input_channels_) +
                         " input channels, got " + std::to_string(input[1]));
  std::vector<Shape> shapes;
  Shape cur = input;
  for (const auto& s : specs_) {
    try {
      switch (s.kind) {
        case LayerKind::conv:
          cur = {cur[0], s.channels,
                 window_output_extent(cur[2], s.filter_h, s.stride_h, s.pad_h, "height"),
                 window_output_extent(cur[3], s.filter_w, s.stride_w, s.pad_w, "width")};
          break;
        case LayerKind::maxpool:
          cur = {cur[0], cur[1], window_output_extent(cur[2], s.filter_h, s.stride_h, 0, "height"),
                 window_output_extent(cur[3], s.filter_w, s.stride_w, 0, "width")};
          break;
        case LayerKind::global_avg_pool:
        case LayerKind::global_max_pool:
          cur = {cur[0], cur[1], 1, 1};
          break;
        default:
          break;
      }
    } catch (const DimensionError& e) {
      throw DimensionError("stack '" + name_ + "', layer '" + s.name + "': " + e.what());
    }
    shapes.push_back(cur);
  }
  return shapes;
}

template <typename T>
Shape LayerStack<T>::output_shape(const Shape& input) const {
  auto shapes = layer_shapes(input);
  return shapes.empty() ? input : shapes.back();
}

template <typename T>
Tensor<T> LayerStack<T>::apply(std::size_t index, const Tensor<T>& x, Mode mode,
                               std::mt19937_64& rng) const {
  const LayerSpec& s = specs_[index];
  const LayerParams& p = params_[index];
  const bool train = mode == Mode::train;
  LayerLabelScope scope(label(index));
  try {
    switch (s.kind) {
      case LayerKind::conv:
        return conv2d(x, p.weight, p.bias, Conv2dOptions{s.stride_h, s.stride_w, s.pad_h, s.pad_w});
      case LayerKind::maxpool:
        return maxpool2d(x, s.filter_h, s.filter_w, s.stride_h, s.stride_w);
      case LayerKind::batchnorm: {
        BatchNormState<T> stats = p.stats;  // handles share the running tensors
        return batchnorm(x, p.gamma, p.beta, stats, train);
      }
      case LayerKind::relu:
        return relu(x);
      case LayerKind::dropout:
        return dropout(x, s.dropout_rate, train, rng);
      case LayerKind::global_avg_pool:
        return avgpool_global(x);
      case LayerKind::global_max_pool:
        return maxpool_global(x);
      case LayerKind::softmax: {
        if (s.groups.empty() || s.groups.size() == 1) return softmax(x, 1);
        std::vector<Tensor<T>> parts;
        std::size_t start = 0;
        for (std::size_t g : s.groups) {
          parts.push_back(softmax(slice(x, 1, start, g), 1));
          start += g;
        }
        return concat<T>(parts, 1);
      }
    }
  } catch (const DimensionError& e) {
    throw DimensionError("stack '" + name_ + "', layer '" + s.name + "': " + e.what());
  }
  throw std::logic_error("unhandled layer kind");
}

template <typename T>
Tensor<T> LayerStack<T>::forward(const Tensor<T>& x, Mode mode, std::vector<Tensor<T>>* trace) {
  layer_shapes(x.shape());
  Tensor<T> cur = x;
  if (trace) trace->clear();
  for (std::size_t l = 0; l < specs_.size(); ++l) {
    cur = apply(l, cur, mode, dropout_rng_);
    if (trace) trace->push_back(cur);
  }
  return cur;
}

template <typename T>
Tensor<T> LayerStack<T>::forward_layer(std::size_t index, const Tensor<T>& x, Mode mode) {
  if (index >= specs_.size()) throw std::out_of_range("layer index out of range");
  return apply(index, x, mode, dropout_rng_);
}

template <typename T>
Tensor<T> LayerStack<T>::infer(const Tensor<T>& x) const {
  layer_shapes(x.shape());
  std::mt19937_64 unused;
  Tensor<T> cur = x;
  for (std::size_t l = 0; l < specs_.size(); ++l) cur = apply(l, cur, Mode::infer, unused);
  return cur;
}

template <typename T>
Tensor<T> LayerStack<T>::infer(const Tensor<T>& x, std::size_t begin, std::size_t end) const {
  if (begin > end || end > specs_.size()) throw std::out_of_range("layer range out of range");
  std::mt19937_64 unused;
  Tensor<T> cur = x;
  for (std::size_t l = begin; l < end; ++l) cur = apply(l, cur, Mode::infer, unused);
  return cur;
}

template <typename T>
FieldGeometry LayerStack<T>::field_geometry() const {
  FieldGeometry g;
  for (const auto& s : specs_) {
    if (s.kind == LayerKind::global_avg_pool || s.kind == LayerKind::global_max_pool)
      throw GraphError("stack '" + name_ + "' pools globally; its field is the whole input");
    if (s.kind != LayerKind::conv && s.kind != LayerKind::maxpool) continue;
    const std::size_t pad_h = s.kind == LayerKind::conv ? s.pad_h : 0;
    const std::size_t pad_w = s.kind == LayerKind::conv ? s.pad_w : 0;
    g.size_h += (s.filter_h - 1) * g.stride_h;
    g.size_w += (s.filter_w - 1) * g.stride_w;
    g.offset_h -= static_cast<std::ptrdiff_t>(pad_h * g.stride_h);
    g.offset_w -= static_cast<std::ptrdiff_t>(pad_w * g.stride_w);
    g.stride_h *= s.stride_h;
    g.stride_w *= s.stride_w;
  }
  return g;
}

template <typename T>
Rect LayerStack<T>::receptive_field(std::size_t i, std::size_t j, std::size_t input_h,
                                    std::size_t input_w) const {
  const Shape out = output_shape({1, input_channels_, input_h, input_w});
  if (i >= out[2] || j >= out[3])
    throw std::out_of_range("position (" + std::to_string(i) + "," + std::to_string(j) +
                            ") outside the " + std::to_string(out[2]) + "x" +
                            std::to_string(out[3]) + " output grid of '" + name_ + "'");
  const FieldGeometry g = field_geometry();
  return Rect{g.offset_h + static_cast<std::ptrdiff_t>(i * g.stride_h),
              g.offset_w + static_cast<std::ptrdiff_t>(j * g.stride_w), g.size_h, g.size_w};
}

template <typename T>
std::vector<Tensor<T>> LayerStack<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& p : params_)
    for (const Tensor<T>* t : {&p.weight, &p.bias, &p.gamma, &p.beta})
      if (t->defined()) out.push_back(*t);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> LayerStack<T>::named_state() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (const auto& p : params_)
    for (const Tensor<T>* t :
         {&p.weight, &p.bias, &p.gamma, &p.beta, &p.stats.running_mean, &p.stats.running_var})
      if (t->defined()) out.emplace_back(t->name(), *t);
  return out;
}

template <typename T>
std::size_t LayerStack<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

template <typename T>
void LayerStack<T>::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : params_) {
    if (p.weight.defined()) {
      const auto& s = p.weight.shape();
      const double fan_in = static_cast<double>(s[1] * s[2] * s[3]);
      std::uniform_real_distribution<double> dist(-std::sqrt(6.0 / fan_in), std::sqrt(6.0 / fan_in));
      for (auto& v : p.weight.mutable_values()) v = static_cast<T>(dist(rng));
      for (auto& v : p.bias.mutable_values()) v = T(0);
    }
    if (p.gamma.defined()) {
      for (auto& v : p.gamma.mutable_values()) v = T(1);
      for (auto& v : p.beta.mutable_values()) v = T(0);
      for (auto& v : p.stats.running_mean.mutable_values()) v = T(0);
      for (auto& v : p.stats.running_var.mutable_values()) v = T(1);
    }
  }
}

template <typename T>
void LayerStack<T>::set_trainable(bool on) {
  for (auto& t : parameters()) t.set_requires_grad(on);
}

template <typename T>
LayerStack<T> LayerStack<T>::frozen_copy() const {
  LayerStack<T> out = cast<T>();
  out.set_trainable(false);
  return out;
}

template <typename T>
template <typename U>
LayerStack<U> LayerStack<T>::cast() const {
  LayerStack<U> out(name_, input_channels_, specs_);
  auto src = named_state();
  auto dst = out.named_state();
  for (std::size_t k = 0; k < src.size(); ++k) {
    auto from = src[k].second.values();
    auto to = dst[k].second.mutable_values();
    for (std::size_t i = 0; i < from.size(); ++i) to[i] = static_cast<U>(from[i]);
  }
  return out;
}

namespace {

using Specs = std::vector<LayerSpec>;

// conv -> batchnorm -> relu, numbered.
void conv_bn_relu(Specs& s, int index, std::size_t channels, std::size_t fh, std::size_t fw,
                  std::size_t sh = 1, std::size_t sw = 1, std::size_t ph = 0, std::size_t pw = 0) {
  const std::string n = std::to_string(index);
  s.push_back(LayerSpec::conv("conv" + n, channels, fh, fw, sh, sw, ph, pw));
  s.push_back(LayerSpec::batchnorm("bn" + n));
  s.push_back(LayerSpec::relu("relu" + n));
}

void conv_relu_dropout(Specs& s, int index, std::size_t channels, std::size_t fh, std::size_t fw,
                       std::size_t sh, std::size_t sw, std::size_t pad, double rate) {
  const std::string n = std::to_string(index);
  s.push_back(LayerSpec::conv("conv" + n, channels, fh, fw, sh, sw, pad, pad));
  s.push_back(LayerSpec::relu("relu" + n));
  s.push_back(LayerSpec::dropout("drop" + n, rate));
}

const std::vector<std::size_t> kSequenceGroups = {5, 11, 11, 11, 11, 11};

struct Preset {
  std::size_t input_channels;
  Specs specs;
};

Preset make_preset(const std::string& name) {
  Specs s;
  if (name == "cmnist-coarse") {
    // No padding: 100 -> (100-7)/2+1 = 47 -> (47-3)/2+1 = 23, the 23x23 coarse
    // map; the composed field is 7 + 2*2 = 11 pixels at stride 4.
    conv_bn_relu(s, 1, 12, 7, 7, 2, 2);
    conv_bn_relu(s, 2, 24, 3, 3, 2, 2);
    return {1, s};
  }
  if (name == "cmnist-fine") {
    // 14 -> 12 -> 12 -> pool 6 -> 6 -> 6 -> pool 3 -> 1.
    conv_bn_relu(s, 1, 24, 3, 3);
    conv_bn_relu(s, 2, 24, 3, 3, 1, 1, 1, 1);
    s.push_back(LayerSpec::maxpool("pool1", 2, 2));
    conv_bn_relu(s, 3, 24, 3, 3, 1, 1, 1, 1);
    conv_bn_relu(s, 4, 24, 3, 3, 1, 1, 1, 1);
    s.push_back(LayerSpec::maxpool("pool2", 2, 2));
    conv_bn_relu(s, 5, 24, 3, 3);
    return {1, s};
  }
  if (name == "cmnist-top") {
    conv_bn_relu(s, 1, 96, 4, 4, 2, 2);
    s.push_back(LayerSpec::global_max_pool("gmax"));
    s.push_back(LayerSpec::conv("fc", 10, 1, 1));
    s.push_back(LayerSpec::softmax("softmax"));
    return {24, s};
  }
  if (name == "svhn-coarse") {
    conv_relu_dropout(s, 1, 24, 5, 5, 2, 2, 0, 0.2);
    conv_relu_dropout(s, 2, 48, 5, 5, 2, 2, 0, 0.2);
    conv_relu_dropout(s, 3, 128, 5, 5, 2, 2, 0, 0.2);
    conv_relu_dropout(s, 4, 192, 4, 5, 1, 2, 0, 0.2);
    conv_relu_dropout(s, 5, 192, 1, 4, 1, 1, 0, 0.2);
    conv_relu_dropout(s, 6, 1024, 1, 1, 1, 1, 0, 0.5);
    conv_relu_dropout(s, 7, 1024, 1, 1, 1, 1, 0, 0.5);
    s.push_back(LayerSpec::conv("head", 60, 1, 1));
    s.push_back(LayerSpec::softmax("softmax", kSequenceGroups));
    return {1, s};
  }
  if (name == "svhn-fine") {
    const std::size_t widths[5] = {48, 64, 128, 160, 192};
    for (int l = 0; l < 5; ++l) {
      conv_relu_dropout(s, l + 1, widths[l], 5, 5, 1, 1, 2, 0.2);
      if (l == 0 || l == 2 || l == 4)
        s.push_back(LayerSpec::maxpool("pool" + std::to_string(l / 2 + 1), 2, 2));
    }
    for (int l = 6; l <= 8; ++l) conv_relu_dropout(s, l, 192, 3, 3, 1, 1, 1, 0.2);
    for (int l = 9; l <= 11; ++l) conv_relu_dropout(s, l, 1024, 1, 1, 1, 1, 0, 0.5);
    s.push_back(LayerSpec::conv("head", 60, 1, 1));
    s.push_back(LayerSpec::softmax("softmax", kSequenceGroups));
    return {1, s};
  }
  if (name == "svhn-top" || name == "seqdesk-top") {
    s.push_back(LayerSpec::global_avg_pool("gavg"));
    return {60, s};
  }
  if (name == "toy-coarse") {
    conv_bn_relu(s, 1, 8, 4, 4, 4, 4);
    return {1, s};
  }
  if (name == "toy-fine") {
    conv_bn_relu(s, 1, 8, 2, 2, 2, 2);
    conv_bn_relu(s, 2, 8, 2, 2, 2, 2);
    return {1, s};
  }
  if (name == "toy-top") {
    conv_bn_relu(s, 1, 16, 3, 3);
    s.push_back(LayerSpec::global_max_pool("gmax"));
    s.push_back(LayerSpec::conv("fc", 10, 1, 1));
    s.push_back(LayerSpec::softmax("softmax"));
    return {8, s};
  }
  if (name == "seqdesk-coarse") {
    // Field 21x53 at stride 4x8; a 22x54 canvas maps to one position.
    conv_bn_relu(s, 1, 16, 5, 5, 2, 2);
    conv_bn_relu(s, 2, 32, 5, 5, 2, 2);
    conv_bn_relu(s, 3, 48, 3, 5, 1, 2);
    conv_bn_relu(s, 4, 64, 1, 4);
    s.push_back(LayerSpec::conv("head", 60, 1, 1));
    s.push_back(LayerSpec::softmax("softmax", kSequenceGroups));
    return {1, s};
  }
  if (name == "seqdesk-fine") {
    // 22x54 -> pool 11x27 -> pool 5x13 -> 1x1.
    conv_bn_relu(s, 1, 16, 3, 3, 1, 1, 1, 1);
    conv_bn_relu(s, 2, 32, 3, 3, 1, 1, 1, 1);
    s.push_back(LayerSpec::maxpool("pool1", 2, 2));
    conv_bn_relu(s, 3, 48, 3, 3, 1, 1, 1, 1);
    s.push_back(LayerSpec::maxpool("pool2", 2, 2));
    conv_bn_relu(s, 4, 64, 3, 3, 1, 1, 1, 1);
    conv_bn_relu(s, 5, 128, 5, 13);
    s.push_back(LayerSpec::conv("head", 60, 1, 1));
    s.push_back(LayerSpec::softmax("softmax", kSequenceGroups));
    return {1, s};
  }
  throw std::invalid_argument("unknown preset '" + name + "'");
}

}  // namespace

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {
      "cmnist-coarse", "cmnist-fine", "cmnist-top",  "svhn-coarse",    "svhn-fine",
      "svhn-top",      "toy-coarse",  "toy-fine",    "toy-top",        "seqdesk-coarse",
      "seqdesk-fine",  "seqdesk-top"};
  return names;
}

std::vector<LayerSpec> preset_specs(const std::string& name) { return make_preset(name).specs; }

std::size_t preset_input_channels(const std::string& name) {
  return make_preset(name).input_channels;
}

template <typename T>
LayerStack<T> build_preset(const std::string& name, std::uint64_t seed) {
  Preset p = make_preset(name);
  const std::string role = name.substr(name.find('-') + 1);
  return LayerStack<T>(role, p.input_channels, std::move(p.specs), seed);
}

template class LayerStack<float>;
template class LayerStack<double>;
template LayerStack<double> LayerStack<float>::cast<double>() const;
template LayerStack<float> LayerStack<double>::cast<float>() const;
template LayerStack<float> LayerStack<float>::cast<float>() const;
template LayerStack<double> LayerStack<double>::cast<double>() const;
template LayerStack<float> build_preset<float>(const std::string&, std::uint64_t);
template LayerStack<double> build_preset<double>(const std::string&, std::uint64_t);

}  // namespace dcn
