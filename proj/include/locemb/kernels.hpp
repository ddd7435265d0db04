#pragma once

// Dense compute kernels behind the autodiff primitives.
//
// Two implementations of every kernel:
//   kernels::reference  textbook serial loops, the test oracle;
//   kernels::           cache-friendly loops parallelised with OpenMP.
// The optimized kernels partition work so that each output element is
// produced by exactly one thread with a fixed reduction order, which makes
// the result bit-identical for any thread count.

#include <span>

namespace locemb::kernels {

// Worker cap for the OpenMP kernels. Initialised from NEXTCHAT_THREADS
// (default 1).
int thread_count();
void set_thread_count(int n);

// One packed sequence inside a [rows x 3d] qkv matrix.
struct Segment {
  int start = 0;
  int length = 0;
};

// Number of attention-probability entries needed for the given segments.
std::size_t attention_probs_size(std::span<const Segment> segments, int heads);

// c[m x n] += a[m x k] * b[k x n]
template <class T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n);
// c[k x n] += a[m x k]^T * g[m x n]
template <class T>
void matmul_tn(const T* a, const T* g, T* c, int m, int k, int n);
// c[m x k] += g[m x n] * b[k x n]^T
template <class T>
void matmul_nt(const T* g, const T* b, T* c, int m, int n, int k);

// Causal multi-head attention over packed segments. qkv rows hold
// [q | k | v], each d wide; out is [rows x d]; probs receives the softmax
// weights needed by the backward pass.
template <class T>
void attention_forward(const T* qkv, T* out, T* probs, std::span<const Segment> segments,
                       int heads, int d);
template <class T>
void attention_backward(const T* qkv, const T* probs, const T* dout, T* dqkv,
                        std::span<const Segment> segments, int heads, int d);

// 'Same'-padded 2-D convolution, odd square kernel.
// x [c x h x w], w [k x c x ks x ks], bias [k] -> y [k x h x w] (overwritten).
template <class T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, int c, int h, int wd, int k,
                    int ks);
// Accumulates into dx, dw, dbias; any of them may be null.
template <class T>
void conv2d_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* dbias, int c, int h,
                     int wd, int k, int ks);

namespace reference {

template <class T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n);
template <class T>
void matmul_tn(const T* a, const T* g, T* c, int m, int k, int n);
template <class T>
void matmul_nt(const T* g, const T* b, T* c, int m, int n, int k);
template <class T>
void attention_forward(const T* qkv, T* out, T* probs, std::span<const Segment> segments,
                       int heads, int d);
template <class T>
void attention_backward(const T* qkv, const T* probs, const T* dout, T* dqkv,
                        std::span<const Segment> segments, int heads, int d);
template <class T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, int c, int h, int wd, int k,
                    int ks);
template <class T>
void conv2d_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* dbias, int c, int h,
                     int wd, int k, int ks);

}  // namespace reference

}  // namespace locemb::kernels
