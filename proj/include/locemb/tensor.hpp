#pragma once

// Dense tensors and the reverse-mode tape.
//
// A BasicTensor is a shared handle: copies alias the same storage. Every
// primitive in ops.hpp that consumes a requires_grad tensor appends one entry
// to the calling thread's tape; backward() replays the tape in reverse and
// then clears it.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "locemb/error.hpp"

namespace locemb::ad {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first touched by backward
  bool requires_grad = false;
};

template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int axis) const;
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T item() const;
  T at(std::size_t flat) const { return impl_->data[flat]; }

  // Zero-filled on first access. Gradients are bookkeeping on the shared
  // storage, so a const handle still hands out a writable view.
  std::span<T> grad() const;
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad();

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  // Deep copy of the values, detached from any tape.
  BasicTensor clone() const;

  bool same_storage(const BasicTensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  explicit BasicTensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <class T>
class BasicTape {
 public:
  struct Entry {
    std::string_view op;
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    std::shared_ptr<TensorImpl<T>> output;
    std::function<void()> backward;
  };

  void record(std::string_view op, std::vector<BasicTensor<T>> inputs, const BasicTensor<T>& output,
              std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1, runs every entry's backward in reverse order,
  // and clears the tape.
  void backward(const BasicTensor<T>& loss);

  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
};

// The calling thread's tape for element type T.
template <class T>
BasicTape<T>& active_tape();

template <class T>
void backward(const BasicTensor<T>& loss) {
  active_tape<T>().backward(loss);
}

bool grad_enabled();

// Suspends tape recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace locemb::ad
