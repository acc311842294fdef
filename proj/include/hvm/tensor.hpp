#pragma once

// Dense row-major tensors with a per-thread reverse-mode tape.
//
// A Tensor is a shared handle to a node holding shape, data and an optional
// gradient buffer. Every differentiable op appends one entry to the tape of
// the calling thread when any input requires a gradient; hvm::backward
// replays that tape in reverse and clears it.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hvm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool is_leaf = true;
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<TensorNode<T>>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  // Extent along `axis`; negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return node().data.size(); }

  std::span<const T> data() const { return node().data; }
  // Direct writes are reserved for initialisation and optimiser updates.
  std::span<T> mutable_data() { return node().data; }
  const std::vector<T>& values() const { return node().data; }
  T item() const;
  T operator[](std::size_t flat) const { return node().data[flat]; }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool value) { node().requires_grad = value; }
  bool is_leaf() const { return node().is_leaf; }
  bool has_grad() const { return !node().grad.empty(); }
  std::span<const T> grad() const { return node().grad; }
  std::span<T> mutable_grad();
  void zero_grad() { node().grad.clear(); }

  // New leaf with a copy of the data and no tape history.
  Tensor detach() const;

  const NodePtr& node_ptr() const { return node_; }

 private:
  TensorNode<T>& node() const;

  NodePtr node_;
};

template <class T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<TensorNode<T>>;
  using BackwardFn = std::function<void(const std::vector<T>& grad_out)>;

  struct Entry {
    std::string op;
    std::vector<NodePtr> inputs;
    NodePtr output;
    BackwardFn backward;
  };

  void record(Entry entry) { entries_.push_back(std::move(entry)); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
};

// Tape of the calling thread. Workers on other threads get their own.
template <class T>
Tape<T>& active_tape();

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Seeds d(loss)/d(loss) = 1, replays the tape in reverse and clears it.
template <class T>
void backward(const Tensor<T>& loss);

namespace detail {

// Zero-initialises the gradient buffer on first use.
template <class T>
std::vector<T>& grad_buffer(TensorNode<T>& node);

// Builds an op result and, when any input is tracked, records `fn` on the
// active tape. `fn` receives the gradient of the result.
template <class T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      typename Tape<T>::BackwardFn fn);

template <class T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> data,
                      const std::vector<Tensor<T>>& inputs,
                      typename Tape<T>::BackwardFn fn);

}  // namespace detail

}  // namespace hvm
