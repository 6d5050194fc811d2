#include "dcn/tensor.hpp"

#include <algorithm>
#include <array>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace dcn {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

constexpr std::array<std::pair<OpKind, const char*>, 21> kOpNames{{
    {OpKind::leaf, "leaf"},
    {OpKind::conv2d, "conv2d"},
    {OpKind::maxpool2d, "maxpool2d"},
    {OpKind::avgpool_global, "avgpool_global"},
    {OpKind::maxpool_global, "maxpool_global"},
    {OpKind::relu, "relu"},
    {OpKind::softmax, "softmax"},
    {OpKind::batchnorm, "batchnorm"},
    {OpKind::dropout, "dropout"},
    {OpKind::add, "add"},
    {OpKind::mul, "mul"},
    {OpKind::linear_combination, "linear-combination"},
    {OpKind::log, "log"},
    {OpKind::sum, "sum"},
    {OpKind::slice, "slice"},
    {OpKind::pad, "pad"},
    {OpKind::concat, "concat"},
    {OpKind::resize_bilinear, "resize-bilinear"},
    {OpKind::reshape, "reshape"},
    {OpKind::gather_cells, "gather-cells"},
    {OpKind::place_cells, "place-cells"},
}};

thread_local bool tl_grad_enabled = true;

}  // namespace

const char* op_name(OpKind op) {
  for (const auto& [kind, name] : kOpNames)
    if (kind == op) return name;
  return "unknown";
}

OpKind op_from_name(const std::string& name) {
  for (const auto& [kind, op] : kOpNames)
    if (name == op && kind != OpKind::leaf) return kind;
  throw GraphError("unknown op '" + name + "'");
}

bool GradMode::enabled() { return tl_grad_enabled; }
void GradMode::set_enabled(bool on) { tl_grad_enabled = on; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  node_->values.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : node_(std::make_shared<Node<T>>()) {
  if (shape_numel(shape) != values.size())
    throw DimensionError("tensor shape " + shape_to_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(shape()));
  return node_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1)
    throw DimensionError("item() on tensor of shape " + shape_to_string(shape()));
  return node_->values[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.assign(node_->values.size(), T(0));
}

template <typename T>
Tensor<T>& Tensor<T>::set_name(std::string name) {
  node_->name = std::move(name);
  return *this;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->values, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor copy(node_->shape, node_->values, node_->requires_grad);
  copy.node_->name = node_->name;
  return copy;
}

template <typename T>
void backward(const Tensor<T>& output, std::span<const Tensor<T>> stop_at) {
  if (!output.defined()) throw GraphError("backward on an undefined tensor");
  if (output.numel() != 1)
    throw GraphError("backward needs a scalar output, got shape " +
                     shape_to_string(output.shape()));
  if (!output.requires_grad())
    throw GraphError("backward on a tensor that is not on the tape");

  std::unordered_set<const Node<T>*> stops;
  for (const auto& t : stop_at)
    if (t.defined()) stops.insert(t.node());

  // Iterative post-order DFS; the resulting order is topological (inputs first).
  std::vector<Node<T>*> order;
  std::unordered_set<const Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(output.node(), 0);
  visited.insert(output.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const bool expand = !stops.contains(node);
    if (expand && next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && !visited.contains(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  for (Node<T>* node : order)
    if (!node->is_leaf()) node->grad.assign(node->values.size(), T(0));
  output.node()->grad_buffer()[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->is_leaf() || stops.contains(node)) continue;
    node->backward_fn(*node);
  }
}

template <typename T>
void zero_grad(std::span<Tensor<T>> params) {
  for (auto& p : params) p.zero_grad();
}

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, OpKind op,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op;
  const bool tracked =
      GradMode::enabled() &&
      std::any_of(inputs.begin(), inputs.end(),
                  [](const Tensor<T>& t) { return t.defined() && t.requires_grad(); });
  if (tracked) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs)
      if (t.defined()) node->inputs.push_back(t.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>::from_node(std::move(node));
}

template Tensor<float> make_result(Shape, std::vector<float>, OpKind, std::vector<Tensor<float>>,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>, OpKind,
                                    std::vector<Tensor<double>>,
                                    std::function<void(Node<double>&)>);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template void backward(const Tensor<float>&, std::span<const Tensor<float>>);
template void backward(const Tensor<double>&, std::span<const Tensor<double>>);
template void zero_grad(std::span<Tensor<float>>);
template void zero_grad(std::span<Tensor<double>>);

}  // namespace dcn
