#pragma once

// Differentiable primitives. Each takes and returns BasicTensor<T> for
// T in {float, double}; reductions accumulate in double regardless of T.

#include <cstdint>
#include <span>
#include <vector>

#include "locemb/kernels.hpp"
#include "locemb/tensor.hpp"

namespace locemb::ad {

// [m x k] * [k x n] -> [m x n]
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Elementwise a + b. b may also be 1-D with a's last dimension, in which case
// it is added to every row.
template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, double s);

template <class T>
BasicTensor<T> concat(std::span<const BasicTensor<T>> parts, int axis);
template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis) {
  return concat(std::span<const BasicTensor<T>>(parts), axis);
}
template <class T>
BasicTensor<T> slice(const BasicTensor<T>& a, int axis, int start, int length);
template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);

// Rows of table [V x d] selected by ids -> [n x d]. Also serves as a row
// gather on any 2-D tensor.
template <class T>
BasicTensor<T> embedding_gather(const BasicTensor<T>& table, std::span<const int> ids);

// base [n x d] with rows[i] replaced by values[i]. Rows must be distinct.
template <class T>
BasicTensor<T> replace_rows(const BasicTensor<T>& base, std::span<const int> rows,
                            const BasicTensor<T>& values);

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x);
// tanh approximation
template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x);

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
BasicTensor<T> layernorm(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> layernorm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                         const BasicTensor<T>& beta);

// Mean of -log softmax(logits[i])[targets[i]] over rows with mask[i] != 0.
// Throws EmptyMask when no row is selected.
template <class T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets,
                             std::span<const std::uint8_t> mask);

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x);
// mean |a - b|
template <class T>
BasicTensor<T> l1_distance(const BasicTensor<T>& a, const BasicTensor<T>& b);
// mean (a - b)^2
template <class T>
BasicTensor<T> squared_error(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Causal multi-head self-attention over packed sequences.
// qkv [rows x 3d] -> [rows x d]; attention never crosses a segment boundary.
template <class T>
BasicTensor<T> causal_attention(const BasicTensor<T>& qkv, std::span<const kernels::Segment> segments,
                                int heads);

// x [c x h x w], weight [k x c x s x s], bias [k] -> [k x h x w], zero padded.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias);

// x [k x h x w] plus a nearest-neighbour upsampled [g*g x k] patch grid.
template <class T>
BasicTensor<T> add_upsampled(const BasicTensor<T>& x, const BasicTensor<T>& grid, int g);

// [n x 4] -> [n x 4] with x0 <= x1 and y0 <= y1 enforced by min/max.
template <class T>
BasicTensor<T> order_corners(const BasicTensor<T>& boxes);

}  // namespace locemb::ad
