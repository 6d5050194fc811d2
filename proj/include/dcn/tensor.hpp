// Dense tensors with a dynamic reverse-mode tape.
//
// A Tensor is a cheap handle onto a shared node. Operations that see at least
// one input with requires_grad() record a node holding their inputs and a
// backward rule; everything else produces plain leaves. Storage is row-major.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcn {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

/// Raised for any shape incompatibility; the message names the dimension.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation or backward pass is used outside its contract.
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Primitive identifiers for tape nodes.
enum class OpKind {
  leaf,
  conv2d,
  maxpool2d,
  avgpool_global,
  maxpool_global,
  relu,
  softmax,
  batchnorm,
  dropout,
  add,
  mul,
  linear_combination,
  log,
  sum,
  slice,
  pad,
  concat,
  resize_bilinear,
  reshape,
  gather_cells,
  place_cells,
};

const char* op_name(OpKind op);
/// Throws GraphError for names that are not primitives.
OpKind op_from_name(const std::string& name);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;
  bool requires_grad = false;
  std::string name;

  OpKind op = OpKind::leaf;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs that need it.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(values.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor scalar(T value) { return Tensor(Shape{}, value); }
  static Tensor from_node(std::shared_ptr<Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->values.size(); }

  std::span<const T> values() const { return node_->values; }
  // Direct mutation is for parameters and inputs that are not mid-episode.
  std::span<T> mutable_values() { return node_->values; }
  T item() const;
  T at(std::size_t flat_index) const { return node_->values.at(flat_index); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();

  const std::string& name() const { return node_->name; }
  Tensor& set_name(std::string name);

  OpKind op() const { return node_->op; }
  bool is_leaf() const { return node_->is_leaf(); }

  /// A new leaf holding a copy of the values, cut from the tape.
  Tensor detach() const;
  /// Deep copy, preserving requires_grad but not the tape.
  Tensor clone() const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }
  bool same_as(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Thread-local switch: while disabled no operation records tape nodes.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Reverse pass from a one-element tensor. Grads of leaves accumulate; grads
/// of intermediate nodes are rebuilt on every call. Traversal never goes
/// upstream of a tensor listed in stop_at, though that tensor's own grad is
/// populated.
template <typename T>
void backward(const Tensor<T>& output, std::span<const Tensor<T>> stop_at = {});

template <typename T>
void backward(const Tensor<T>& output, std::initializer_list<Tensor<T>> stop_at) {
  backward(output, std::span<const Tensor<T>>(stop_at.begin(), stop_at.size()));
}

template <typename T>
void zero_grad(std::span<Tensor<T>> params);

template <typename T>
void zero_grad(std::vector<Tensor<T>>& params) {
  zero_grad(std::span<Tensor<T>>(params));
}

namespace detail {

/// Wraps freshly computed values into a tensor, recording a tape node when
/// gradients are enabled and some input requires them.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, OpKind op,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn);

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace dcn
