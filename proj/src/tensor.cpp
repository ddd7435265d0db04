#include "locemb/tensor.hpp"

#include <sstream>

namespace locemb::ad {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ')';
  return os.str();
}

template <class T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <class T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  for (int d : shape)
    if (d <= 0) fail(ErrorCode::ShapeMismatch, "non-positive dimension in " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return BasicTensor(std::move(impl));
}

template <class T>
BasicTensor<T> BasicTensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  for (int d : shape)
    if (d <= 0) fail(ErrorCode::ShapeMismatch, "non-positive dimension in " + shape_str(shape));
  if (values.size() != shape_numel(shape))
    fail(ErrorCode::ShapeMismatch, "data length " + std::to_string(values.size()) +
                                       " does not match shape " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return BasicTensor(std::move(impl));
}

template <class T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <class T>
int BasicTensor<T>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) fail(ErrorCode::InvalidAxis, "axis out of range");
  return impl_->shape[static_cast<std::size_t>(axis)];
}

template <class T>
T BasicTensor<T>::item() const {
  if (numel() != 1) fail(ErrorCode::NotScalar, "item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <class T>
std::span<T> BasicTensor<T>::grad() const {
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <class T>
void BasicTensor<T>::zero_grad() {
  impl_->grad.assign(impl_->data.size(), T(0));
}

template <class T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return from(impl_->shape, impl_->data, false);
}

template <class T>
void BasicTape<T>::record(std::string_view op, std::vector<BasicTensor<T>> inputs,
                          const BasicTensor<T>& output, std::function<void()> backward) {
  Entry e;
  e.op = op;
  e.inputs.reserve(inputs.size());
  for (auto& t : inputs) e.inputs.push_back(t.impl());
  e.output = output.impl();
  e.backward = std::move(backward);
  entries_.push_back(std::move(e));
}

template <class T>
void BasicTape<T>::backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1)
    fail(ErrorCode::NotScalar, "backward() needs a scalar loss, got " + shape_str(loss.shape()));
  if (entries_.empty()) fail(ErrorCode::EmptyTape, "backward() on an empty tape");
  // Every tensor touched by the tape gets a grad buffer, so tensors off the
  // loss path read back as zeros rather than stale or missing.
  for (auto& e : entries_) {
    for (auto& in : e.inputs)
      if (in->requires_grad && in->grad.size() != in->data.size())
        in->grad.assign(in->data.size(), T(0));
    e.output->grad.assign(e.output->data.size(), T(0));
  }
  BasicTensor<T> seed = loss;
  seed.grad()[0] = T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
  entries_.clear();
}

template <class T>
BasicTape<T>& active_tape() {
  thread_local BasicTape<T> tape;
  return tape;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template class BasicTensor<float>;
template class BasicTensor<double>;
template class BasicTape<float>;
template class BasicTape<double>;
template BasicTape<float>& active_tape<float>();
template BasicTape<double>& active_tape<double>();

}  // namespace locemb::ad
