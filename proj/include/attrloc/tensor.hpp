#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "attrloc/errors.hpp"

namespace attrloc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

namespace detail {
inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
}  // namespace detail

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first gradient arrives
  bool requires_grad = false;
  std::uint64_t id = detail::next_node_id();
};

/// Shared handle to a dense row-major array. Copies alias the same storage;
/// use clone() for a deep copy.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0}) : node_(std::make_shared<TensorNode<T>>()) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  BasicTensor(Shape shape, std::vector<T> values) : BasicTensor(std::move(shape)) {
    if (values.size() != node_->data.size())
      throw DimensionError("data length " + std::to_string(values.size()) + " does not match shape " +
                           shape_str(node_->shape));
    node_->data = std::move(values);
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
  static BasicTensor full(Shape shape, T v) { return BasicTensor(std::move(shape), v); }
  static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, v); }

  static BasicTensor parameter(Shape shape, std::vector<T> values) {
    BasicTensor t(std::move(shape), std::move(values));
    t.set_requires_grad(true);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  std::uint64_t id() const { return node_->id; }
  bool same_node(const BasicTensor& o) const { return node_ == o.node_; }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T* ptr() { return node_->data.data(); }
  const T* ptr() const { return node_->data.data(); }
  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  // Allocates a zero gradient buffer on first use.
  std::span<T> grad_mut() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T{0});
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
  }
  void clear_grad() { node_->grad.clear(); }

  BasicTensor clone() const {
    BasicTensor t(node_->shape, node_->data);
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  bool all_finite() const {
    return std::all_of(node_->data.begin(), node_->data.end(), [](T v) { return std::isfinite(v); });
  }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Define-by-run operation log. Ops append a record when a tape is active on
/// the current thread and at least one input requires a gradient.
template <typename T>
class BasicTape {
 public:
  struct Record {
    std::string op;
    std::vector<BasicTensor<T>> inputs;
    BasicTensor<T> output;
    std::function<void()> backward;
  };

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  void record(std::string op, std::vector<BasicTensor<T>> inputs, BasicTensor<T> output,
              std::function<void()> backward) {
    records_.push_back({std::move(op), std::move(inputs), std::move(output), std::move(backward)});
  }

  const std::vector<Record>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

  /// Reverse sweep from a scalar loss. Each record runs at most once; records
  /// whose output never received a gradient are skipped.
  std::size_t backward(BasicTensor<T> loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw ContractError("backward() needs a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    auto it = std::find_if(records_.rbegin(), records_.rend(),
                           [&](const Record& r) { return r.output.same_node(loss); });
    if (it == records_.rend()) throw ContractError("backward(): loss was not produced on this tape");
    loss.grad_mut()[0] += T{1};
    std::size_t visited = 0;
    for (; it != records_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->backward();
      ++visited;
    }
    return visited;
  }

  static BasicTape*& active() {
    thread_local BasicTape* current = nullptr;
    return current;
  }

 private:
  std::vector<Record> records_;
};

using Tape = BasicTape<float>;
using Tape64 = BasicTape<double>;

/// Installs a tape as the active one for this thread for the scope's lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(BasicTape<T>& tape) : prev_(BasicTape<T>::active()) { BasicTape<T>::active() = &tape; }
  ~TapeScope() { BasicTape<T>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  BasicTape<T>* prev_;
};

/// Disables recording on this thread (inference).
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : prev_(BasicTape<T>::active()) { BasicTape<T>::active() = nullptr; }
  ~NoGradScope() { BasicTape<T>::active() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  BasicTape<T>* prev_;
};

namespace detail {

template <typename T>
BasicTape<T>* recording_tape(std::initializer_list<const BasicTensor<T>*> inputs) {
  auto* tape = BasicTape<T>::active();
  if (!tape) return nullptr;
  for (auto* in : inputs)
    if (in && in->defined() && in->requires_grad()) return tape;
  return nullptr;
}

template <typename T>
void accumulate(BasicTensor<T>& dst, std::span<const T> src) {
  if (!dst.requires_grad()) return;
  auto g = dst.grad_mut();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

}  // namespace detail

}  // namespace attrloc
