#include "hvm/tensor.hpp"

#include <sstream>

namespace hvm {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(data.size()));
  }
  node_ = std::make_shared<TensorNode<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <class T>
TensorNode<T>& Tensor<T>::node() const {
  if (!node_) throw std::logic_error("use of an undefined tensor");
  return *node_;
}

template <class T>
std::size_t Tensor<T>::dim(int axis) const {
  const auto r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return shape()[static_cast<std::size_t>(a)];
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node().data[0];
}

template <class T>
std::span<T> Tensor<T>::mutable_grad() {
  return detail::grad_buffer(node());
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node().shape, node().data, false);
}

template <class T>
Tape<T>& active_tape() {
  thread_local Tape<T> tape;
  return tape;
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  auto& tape = active_tape<T>();
  auto& root = *loss.node_ptr();
  if (!root.requires_grad) throw std::logic_error("loss is not on the tape");
  detail::grad_buffer(root)[0] += T(1);

  const auto& entries = tape.entries();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    auto& out = *it->output;
    if (out.grad.empty()) continue;
    it->backward(out.grad);
    if (!out.is_leaf && &out != &root) {
      out.grad.clear();
      out.grad.shrink_to_fit();
    }
  }
  tape.clear();
}

namespace detail {

template <class T>
std::vector<T>& grad_buffer(TensorNode<T>& node) {
  if (node.grad.empty()) node.grad.assign(node.data.size(), T(0));
  return node.grad;
}

template <class T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      typename Tape<T>::BackwardFn fn) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool tracked = false;
  for (const auto* in : inputs) tracked = tracked || (in->defined() && in->requires_grad());
  if (!tracked) return out;

  auto node = out.node_ptr();
  node->requires_grad = true;
  node->is_leaf = false;
  typename Tape<T>::Entry entry{std::move(op), {}, node, std::move(fn)};
  for (const auto* in : inputs) {
    if (in->defined()) entry.inputs.push_back(in->node_ptr());
  }
  active_tape<T>().record(std::move(entry));
  return out;
}

template <class T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> data,
                      const std::vector<Tensor<T>>& inputs, typename Tape<T>::BackwardFn fn) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool tracked = false;
  for (const auto& in : inputs) tracked = tracked || in.requires_grad();
  if (!tracked) return out;

  auto node = out.node_ptr();
  node->requires_grad = true;
  node->is_leaf = false;
  typename Tape<T>::Entry entry{std::move(op), {}, node, std::move(fn)};
  for (const auto& in : inputs) entry.inputs.push_back(in.node_ptr());
  active_tape<T>().record(std::move(entry));
  return out;
}

}  // namespace detail

#define HVM_INSTANTIATE(T)                                                                        \
  template class Tensor<T>;                                                                       \
  template Tape<T>& active_tape<T>();                                                             \
  template void backward<T>(const Tensor<T>&);                                                    \
  template std::vector<T>& detail::grad_buffer<T>(TensorNode<T>&);                                \
  template Tensor<T> detail::make_result<T>(std::string, Shape, std::vector<T>,                   \
                                            std::initializer_list<const Tensor<T>*>,              \
                                            typename Tape<T>::BackwardFn);                        \
  template Tensor<T> detail::make_result<T>(std::string, Shape, std::vector<T>,                   \
                                            const std::vector<Tensor<T>>&,                        \
                                            typename Tape<T>::BackwardFn);

HVM_INSTANTIATE(float)
HVM_INSTANTIATE(double)

#undef HVM_INSTANTIATE

}  // namespace hvm
