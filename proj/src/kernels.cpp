#include "locemb/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace locemb::kernels {

namespace {

int threads_from_env() {
  if (const char* env = std::getenv("NEXTCHAT_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

std::atomic<int>& thread_setting() {
  static std::atomic<int> n{threads_from_env()};
  return n;
}

// Below this much work a parallel region costs more than it saves.
constexpr long kParallelGrain = 1 << 15;

bool go_parallel(long work) { return thread_count() > 1 && work >= kParallelGrain; }

std::vector<std::size_t> prob_offsets(std::span<const Segment> segments, int heads) {
  std::vector<std::size_t> off(segments.size() + 1, 0);
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto len = static_cast<std::size_t>(segments[s].length);
    off[s + 1] = off[s] + len * len * static_cast<std::size_t>(heads);
  }
  return off;
}

}  // namespace

int thread_count() { return thread_setting().load(); }

void set_thread_count(int n) { thread_setting().store(std::max(1, n)); }

std::size_t attention_probs_size(std::span<const Segment> segments, int heads) {
  return prob_offsets(segments, heads).back();
}

template <class T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (go_parallel(long(m) * k * n))
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * n;
    const T* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;  // image patches are mostly empty
      const T* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void matmul_tn(const T* a, const T* g, T* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (go_parallel(long(m) * k * n))
  for (int p = 0; p < k; ++p) {
    T* crow = c + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = a[static_cast<std::size_t>(i) * k + p];
      if (av == T(0)) continue;
      const T* grow = g + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

template <class T>
void matmul_nt(const T* g, const T* b, T* c, int m, int n, int k) {
  std::vector<T> bt(static_cast<std::size_t>(n) * k);
  for (int p = 0; p < k; ++p)
    for (int j = 0; j < n; ++j)
      bt[static_cast<std::size_t>(j) * k + p] = b[static_cast<std::size_t>(p) * n + j];
  const T* btp = bt.data();
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (go_parallel(long(m) * k * n))
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * k;
    const T* grow = g + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T gv = grow[j];
      const T* brow = btp + static_cast<std::size_t>(j) * k;
      for (int p = 0; p < k; ++p) crow[p] += gv * brow[p];
    }
  }
}

template <class T>
void attention_forward(const T* qkv, T* out, T* probs, std::span<const Segment> segments,
                       int heads, int d) {
  const int hd = d / heads;
  const int stride = 3 * d;
  const T scale = T(1) / std::sqrt(T(hd));
  const auto off = prob_offsets(segments, heads);
  const int tasks = static_cast<int>(segments.size()) * heads;
  long work = 0;
  for (const auto& s : segments) work += long(s.length) * s.length * d;

#pragma omp parallel for schedule(dynamic) num_threads(thread_count()) if (go_parallel(work))
  for (int task = 0; task < tasks; ++task) {
    const int si = task / heads;
    const int h = task % heads;
    const int len = segments[si].length;
    const int start = segments[si].start;
    T* pbase = probs + off[si] + static_cast<std::size_t>(h) * len * len;
    for (int i = 0; i < len; ++i) {
      const T* q = qkv + static_cast<std::size_t>(start + i) * stride + h * hd;
      T* prow = pbase + static_cast<std::size_t>(i) * len;
      T mx = -std::numeric_limits<T>::infinity();
      for (int j = 0; j <= i; ++j) {
        const T* kk = qkv + static_cast<std::size_t>(start + j) * stride + d + h * hd;
        T s = 0;
        for (int e = 0; e < hd; ++e) s += q[e] * kk[e];
        prow[j] = s * scale;
        mx = std::max(mx, prow[j]);
      }
      double sum = 0.0;
      for (int j = 0; j <= i; ++j) {
        prow[j] = std::exp(prow[j] - mx);
        sum += prow[j];
      }
      const T inv = static_cast<T>(1.0 / sum);
      for (int j = 0; j <= i; ++j) prow[j] *= inv;
      for (int j = i + 1; j < len; ++j) prow[j] = 0;
      T* o = out + static_cast<std::size_t>(start + i) * d + h * hd;
      for (int e = 0; e < hd; ++e) o[e] = 0;
      for (int j = 0; j <= i; ++j) {
        const T pj = prow[j];
        const T* v = qkv + static_cast<std::size_t>(start + j) * stride + 2 * d + h * hd;
        for (int e = 0; e < hd; ++e) o[e] += pj * v[e];
      }
    }
  }
}

template <class T>
void attention_backward(const T* qkv, const T* probs, const T* dout, T* dqkv,
                        std::span<const Segment> segments, int heads, int d) {
  const int hd = d / heads;
  const int stride = 3 * d;
  const T scale = T(1) / std::sqrt(T(hd));
  const auto off = prob_offsets(segments, heads);
  const int tasks = static_cast<int>(segments.size()) * heads;
  long work = 0;
  for (const auto& s : segments) work += long(s.length) * s.length * d;

#pragma omp parallel for schedule(dynamic) num_threads(thread_count()) if (go_parallel(work))
  for (int task = 0; task < tasks; ++task) {
    const int si = task / heads;
    const int h = task % heads;
    const int len = segments[si].length;
    const int start = segments[si].start;
    const T* pbase = probs + off[si] + static_cast<std::size_t>(h) * len * len;
    std::vector<T> dp(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) {
      const T* prow = pbase + static_cast<std::size_t>(i) * len;
      const T* go = dout + static_cast<std::size_t>(start + i) * d + h * hd;
      const T* q = qkv + static_cast<std::size_t>(start + i) * stride + h * hd;
      T* dq = dqkv + static_cast<std::size_t>(start + i) * stride + h * hd;
      double rowdot = 0.0;
      for (int j = 0; j <= i; ++j) {
        const T* v = qkv + static_cast<std::size_t>(start + j) * stride + 2 * d + h * hd;
        T s = 0;
        for (int e = 0; e < hd; ++e) s += go[e] * v[e];
        dp[j] = s;
        rowdot += static_cast<double>(prow[j]) * s;
      }
      for (int j = 0; j <= i; ++j) {
        const T pj = prow[j];
        const T ds = pj * (dp[j] - static_cast<T>(rowdot)) * scale;
        const T* kk = qkv + static_cast<std::size_t>(start + j) * stride + d + h * hd;
        T* dk = dqkv + static_cast<std::size_t>(start + j) * stride + d + h * hd;
        T* dv = dqkv + static_cast<std::size_t>(start + j) * stride + 2 * d + h * hd;
        for (int e = 0; e < hd; ++e) {
          dq[e] += ds * kk[e];
          dk[e] += ds * q[e];
          dv[e] += pj * go[e];
        }
      }
    }
  }
}

template <class T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, int c, int h, int wd, int k,
                    int ks) {
  const int pad = ks / 2;
  const long work = long(k) * c * ks * ks * h * wd;
#pragma omp parallel for collapse(2) schedule(static) num_threads(thread_count()) if (go_parallel(work))
  for (int ko = 0; ko < k; ++ko) {
    for (int i = 0; i < h; ++i) {
      T* yrow = y + (static_cast<std::size_t>(ko) * h + i) * wd;
      for (int j = 0; j < wd; ++j) yrow[j] = bias ? bias[ko] : T(0);
      for (int ci = 0; ci < c; ++ci) {
        for (int u = 0; u < ks; ++u) {
          const int ii = i + u - pad;
          if (ii < 0 || ii >= h) continue;
          const T* xrow = x + (static_cast<std::size_t>(ci) * h + ii) * wd;
          for (int v = 0; v < ks; ++v) {
            const T wv = w[((static_cast<std::size_t>(ko) * c + ci) * ks + u) * ks + v];
            const int shift = v - pad;
            const int j0 = std::max(0, -shift);
            const int j1 = std::min(wd, wd - shift);
            for (int j = j0; j < j1; ++j) yrow[j] += wv * xrow[j + shift];
          }
        }
      }
    }
  }
}

template <class T>
void conv2d_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* dbias, int c, int h,
                     int wd, int k, int ks) {
  const int pad = ks / 2;
  const long work = long(k) * c * ks * ks * h * wd;
  if (dbias) {
    for (int ko = 0; ko < k; ++ko) {
      double s = 0.0;
      const T* g = dy + static_cast<std::size_t>(ko) * h * wd;
      for (long t = 0; t < long(h) * wd; ++t) s += g[t];
      dbias[ko] += static_cast<T>(s);
    }
  }
  if (dw) {
#pragma omp parallel for collapse(2) schedule(static) num_threads(thread_count()) if (go_parallel(work))
    for (int ko = 0; ko < k; ++ko) {
      for (int ci = 0; ci < c; ++ci) {
        for (int u = 0; u < ks; ++u) {
          for (int v = 0; v < ks; ++v) {
            const int shift = v - pad;
            const int j0 = std::max(0, -shift);
            const int j1 = std::min(wd, wd - shift);
            T acc = 0;
            for (int i = 0; i < h; ++i) {
              const int ii = i + u - pad;
              if (ii < 0 || ii >= h) continue;
              const T* g = dy + (static_cast<std::size_t>(ko) * h + i) * wd;
              const T* xrow = x + (static_cast<std::size_t>(ci) * h + ii) * wd;
              for (int j = j0; j < j1; ++j) acc += g[j] * xrow[j + shift];
            }
            dw[((static_cast<std::size_t>(ko) * c + ci) * ks + u) * ks + v] += acc;
          }
        }
      }
    }
  }
  if (dx) {
#pragma omp parallel for collapse(2) schedule(static) num_threads(thread_count()) if (go_parallel(work))
    for (int ci = 0; ci < c; ++ci) {
      for (int ii = 0; ii < h; ++ii) {
        T* dxrow = dx + (static_cast<std::size_t>(ci) * h + ii) * wd;
        for (int ko = 0; ko < k; ++ko) {
          for (int u = 0; u < ks; ++u) {
            const int i = ii - u + pad;
            if (i < 0 || i >= h) continue;
            const T* g = dy + (static_cast<std::size_t>(ko) * h + i) * wd;
            for (int v = 0; v < ks; ++v) {
              const T wv = w[((static_cast<std::size_t>(ko) * c + ci) * ks + u) * ks + v];
              const int shift = v - pad;
              // dx[jj] += w * dy[jj - shift]
              const int j0 = std::max(0, shift);
              const int j1 = std::min(wd, wd + shift);
              for (int jj = j0; jj < j1; ++jj) dxrow[jj] += wv * g[jj - shift];
            }
          }
        }
      }
    }
  }
}

namespace reference {

template <class T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      T s = 0;
      for (int p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] += s;
    }
}

template <class T>
void matmul_tn(const T* a, const T* g, T* c, int m, int k, int n) {
  for (int p = 0; p < k; ++p)
    for (int j = 0; j < n; ++j) {
      T s = 0;
      for (int i = 0; i < m; ++i) s += a[i * k + p] * g[i * n + j];
      c[p * n + j] += s;
    }
}

template <class T>
void matmul_nt(const T* g, const T* b, T* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      T s = 0;
      for (int j = 0; j < n; ++j) s += g[i * n + j] * b[p * n + j];
      c[i * k + p] += s;
    }
}

template <class T>
void attention_forward(const T* qkv, T* out, T* probs, std::span<const Segment> segments,
                       int heads, int d) {
  const int hd = d / heads;
  const int stride = 3 * d;
  const double scale = 1.0 / std::sqrt(double(hd));
  const auto off = prob_offsets(segments, heads);
  for (std::size_t si = 0; si < segments.size(); ++si) {
    const int len = segments[si].length;
    const int start = segments[si].start;
    for (int h = 0; h < heads; ++h) {
      T* pbase = probs + off[si] + static_cast<std::size_t>(h) * len * len;
      for (int i = 0; i < len; ++i) {
        std::vector<double> row(len, -std::numeric_limits<double>::infinity());
        for (int j = 0; j <= i; ++j) {
          double s = 0;
          for (int e = 0; e < hd; ++e)
            s += double(qkv[(start + i) * stride + h * hd + e]) *
                 qkv[(start + j) * stride + d + h * hd + e];
          row[j] = s * scale;
        }
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0;
        for (auto& r : row) z += (r = std::exp(r - mx));
        for (int j = 0; j < len; ++j) pbase[i * len + j] = static_cast<T>(row[j] / z);
        for (int e = 0; e < hd; ++e) {
          double o = 0;
          for (int j = 0; j < len; ++j)
            o += row[j] / z * qkv[(start + j) * stride + 2 * d + h * hd + e];
          out[(start + i) * d + h * hd + e] = static_cast<T>(o);
        }
      }
    }
  }
}

template <class T>
void attention_backward(const T* qkv, const T* probs, const T* dout, T* dqkv,
                        std::span<const Segment> segments, int heads, int d) {
  const int hd = d / heads;
  const int stride = 3 * d;
  const double scale = 1.0 / std::sqrt(double(hd));
  const auto off = prob_offsets(segments, heads);
  for (std::size_t si = 0; si < segments.size(); ++si) {
    const int len = segments[si].length;
    const int start = segments[si].start;
    for (int h = 0; h < heads; ++h) {
      const T* p = probs + off[si] + static_cast<std::size_t>(h) * len * len;
      auto q = [&](int i, int e) { return double(qkv[(start + i) * stride + h * hd + e]); };
      auto kk = [&](int i, int e) { return double(qkv[(start + i) * stride + d + h * hd + e]); };
      auto v = [&](int i, int e) { return double(qkv[(start + i) * stride + 2 * d + h * hd + e]); };
      auto go = [&](int i, int e) { return double(dout[(start + i) * d + h * hd + e]); };
      // dP = dO V^T ; dS = P * (dP - rowsum(P * dP))
      std::vector<double> ds(static_cast<std::size_t>(len) * len, 0.0);
      for (int i = 0; i < len; ++i) {
        std::vector<double> dp(len, 0.0);
        double rd = 0;
        for (int j = 0; j < len; ++j) {
          for (int e = 0; e < hd; ++e) dp[j] += go(i, e) * v(j, e);
          rd += p[i * len + j] * dp[j];
        }
        for (int j = 0; j < len; ++j) ds[i * len + j] = p[i * len + j] * (dp[j] - rd) * scale;
      }
      for (int i = 0; i < len; ++i)
        for (int e = 0; e < hd; ++e) {
          double dq = 0, dk = 0, dv = 0;
          for (int j = 0; j < len; ++j) {
            dq += ds[i * len + j] * kk(j, e);
            dk += ds[j * len + i] * q(j, e);
            dv += p[j * len + i] * go(j, e);
          }
          dqkv[(start + i) * stride + h * hd + e] += static_cast<T>(dq);
          dqkv[(start + i) * stride + d + h * hd + e] += static_cast<T>(dk);
          dqkv[(start + i) * stride + 2 * d + h * hd + e] += static_cast<T>(dv);
        }
    }
  }
}

template <class T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, int c, int h, int wd, int k,
                    int ks) {
  const int pad = ks / 2;
  for (int ko = 0; ko < k; ++ko)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < wd; ++j) {
        double s = bias ? bias[ko] : 0.0;
        for (int ci = 0; ci < c; ++ci)
          for (int u = 0; u < ks; ++u)
            for (int v = 0; v < ks; ++v) {
              const int ii = i + u - pad, jj = j + v - pad;
              if (ii < 0 || ii >= h || jj < 0 || jj >= wd) continue;
              s += double(w[((ko * c + ci) * ks + u) * ks + v]) * x[(ci * h + ii) * wd + jj];
            }
        y[(ko * h + i) * wd + j] = static_cast<T>(s);
      }
}

template <class T>
void conv2d_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* dbias, int c, int h,
                     int wd, int k, int ks) {
  const int pad = ks / 2;
  for (int ko = 0; ko < k; ++ko)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < wd; ++j) {
        const T g = dy[(ko * h + i) * wd + j];
        if (dbias) dbias[ko] += g;
        for (int ci = 0; ci < c; ++ci)
          for (int u = 0; u < ks; ++u)
            for (int v = 0; v < ks; ++v) {
              const int ii = i + u - pad, jj = j + v - pad;
              if (ii < 0 || ii >= h || jj < 0 || jj >= wd) continue;
              const std::size_t wi = ((ko * c + ci) * ks + u) * ks + v;
              const std::size_t xi = (ci * h + ii) * wd + jj;
              if (dw) dw[wi] += g * x[xi];
              if (dx) dx[xi] += g * w[wi];
            }
      }
}

}  // namespace reference

#define LOCEMB_INSTANTIATE_KERNELS(NS, T)                                                       \
  template void NS::matmul<T>(const T*, const T*, T*, int, int, int);                           \
  template void NS::matmul_tn<T>(const T*, const T*, T*, int, int, int);                        \
  template void NS::matmul_nt<T>(const T*, const T*, T*, int, int, int);                        \
  template void NS::attention_forward<T>(const T*, T*, T*, std::span<const Segment>, int, int); \
  template void NS::attention_backward<T>(const T*, const T*, const T*, T*,                     \
                                          std::span<const Segment>, int, int);                 \
  template void NS::conv2d_forward<T>(const T*, const T*, const T*, T*, int, int, int, int,     \
                                      int);                                                     \
  template void NS::conv2d_backward<T>(const T*, const T*, const T*, T*, T*, T*, int, int, int, \
                                       int, int);

LOCEMB_INSTANTIATE_KERNELS(kernels, float)
LOCEMB_INSTANTIATE_KERNELS(kernels, double)
LOCEMB_INSTANTIATE_KERNELS(kernels::reference, float)
LOCEMB_INSTANTIATE_KERNELS(kernels::reference, double)

#undef LOCEMB_INSTANTIATE_KERNELS

}  // namespace locemb::kernels
