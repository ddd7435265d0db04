#include "locemb/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace locemb::ad {

namespace {

template <class T>
bool tracks(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <class T>
BasicTensor<T> make_out(Shape shape, bool track) {
  return BasicTensor<T>::zeros(std::move(shape), track);
}

template <class T>
void record(std::string_view op, std::vector<BasicTensor<T>> inputs, const BasicTensor<T>& out,
            std::function<void()> fn) {
  active_tape<T>().record(op, std::move(inputs), out, std::move(fn));
}

void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

template <class T>
void same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), ErrorCode::ShapeMismatch,
          std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T>
void rank2(const BasicTensor<T>& a, const char* op) {
  require(a.rank() == 2, ErrorCode::ShapeMismatch,
          std::string(op) + ": expected a 2-D tensor, got " + shape_str(a.shape()));
}

int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, ErrorCode::InvalidAxis, "axis out of range");
  return axis;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  rank2(a, "matmul");
  rank2(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, ErrorCode::ShapeMismatch,
          "matmul: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  const bool track = tracks<T>({&a, &b});
  auto out = make_out<T>({m, n}, track);
  kernels::matmul(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (track) {
    record<T>("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
      const T* g = out.grad().data();
      if (a.requires_grad()) kernels::matmul_nt(g, b.data().data(), a.grad().data(), m, n, k);
      if (b.requires_grad()) kernels::matmul_tn(a.data().data(), g, b.grad().data(), m, k, n);
    });
  }
  return out;
}

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const bool row_bcast = b.rank() == 1 && a.rank() >= 1 && a.shape() != b.shape() &&
                         b.dim(0) == a.shape().back();
  if (!row_bcast) same_shape(a, b, "add");
  const bool track = tracks<T>({&a, &b});
  auto out = make_out<T>(a.shape(), track);
  const std::size_t n = a.numel();
  const std::size_t w = row_bcast ? b.numel() : n;
  auto ad = a.data(), bd = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < n; ++i) od[i] = ad[i] + bd[i % w];
  if (track) {
    record<T>("add", {a, b}, out, [a, b, out, n, w]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        if (w == n) {
          for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
        } else {
          std::vector<double> acc(w, 0.0);
          for (std::size_t i = 0; i < n; ++i) acc[i % w] += g[i];
          for (std::size_t j = 0; j < w; ++j) gb[j] += static_cast<T>(acc[j]);
        }
      }
    });
  }
  return out;
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  same_shape(a, b, "sub");
  const bool track = tracks<T>({&a, &b});
  auto out = make_out<T>(a.shape(), track);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (track) {
    record<T>("sub", {a, b}, out, [a, b, out, n]() mutable {
      auto g = out.grad();
      if (a.requires_grad())
        for (std::size_t i = 0; i < n; ++i) a.grad()[i] += g[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < n; ++i) b.grad()[i] -= g[i];
    });
  }
  return out;
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  same_shape(a, b, "mul");
  const bool track = tracks<T>({&a, &b});
  auto out = make_out<T>(a.shape(), track);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (track) {
    record<T>("mul", {a, b}, out, [a, b, out, n]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * a.data()[i];
      }
    });
  }
  return out;
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, double s) {
  const bool track = tracks<T>({&a});
  auto out = make_out<T>(a.shape(), track);
  const T st = static_cast<T>(s);
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * st;
  if (track) {
    record<T>("scale", {a}, out, [a, out, st]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * st;
    });
  }
  return out;
}

template <class T>
BasicTensor<T> concat(std::span<const BasicTensor<T>> parts, int axis) {
  require(!parts.empty(), ErrorCode::ShapeMismatch, "concat: no inputs");
  const int rank = parts[0].rank();
  axis = normalize_axis(axis, rank);
  Shape shape = parts[0].shape();
  int total = 0;
  bool track = false;
  for (const auto& p : parts) {
    require(p.rank() == rank, ErrorCode::ShapeMismatch, "concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis)
        require(p.shape()[d] == shape[d], ErrorCode::ShapeMismatch,
                "concat: " + shape_str(p.shape()) + " vs " + shape_str(shape));
    total += p.shape()[axis];
    track = track || tracks<T>({&p});
  }
  shape[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= shape[d];
  for (int d = axis + 1; d < rank; ++d) inner *= shape[d];
  auto out = make_out<T>(shape, track);
  const std::size_t out_row = static_cast<std::size_t>(total) * inner;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = static_cast<std::size_t>(p.shape()[axis]) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().begin() + o * chunk, chunk, out.data().begin() + o * out_row + offset);
    offset += chunk;
  }
  if (track) {
    std::vector<BasicTensor<T>> ins(parts.begin(), parts.end());
    record<T>("concat", ins, out, [ins, out, outer, inner, axis, out_row]() mutable {
      auto g = out.grad();
      std::size_t off = 0;
      for (auto& p : ins) {
        const std::size_t chunk = static_cast<std::size_t>(p.shape()[axis]) * inner;
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += g[o * out_row + off + i];
        }
        off += chunk;
      }
    });
  }
  return out;
}

template <class T>
BasicTensor<T> slice(const BasicTensor<T>& a, int axis, int start, int length) {
  axis = normalize_axis(axis, a.rank());
  const int extent = a.shape()[axis];
  require(start >= 0 && length > 0 && start + length <= extent, ErrorCode::ShapeMismatch,
          "slice: [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of " +
              std::to_string(extent));
  Shape shape = a.shape();
  shape[axis] = length;
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= shape[d];
  for (int d = axis + 1; d < a.rank(); ++d) inner *= shape[d];
  const bool track = tracks<T>({&a});
  auto out = make_out<T>(shape, track);
  const std::size_t in_row = static_cast<std::size_t>(extent) * inner;
  const std::size_t chunk = static_cast<std::size_t>(length) * inner;
  const std::size_t off = static_cast<std::size_t>(start) * inner;
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a.data().begin() + o * in_row + off, chunk, out.data().begin() + o * chunk);
  if (track) {
    record<T>("slice", {a}, out, [a, out, outer, in_row, chunk, off]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < chunk; ++i) ga[o * in_row + off + i] += g[o * chunk + i];
    });
  }
  return out;
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  require(shape_numel(shape) == a.numel(), ErrorCode::ShapeMismatch,
          "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  const bool track = tracks<T>({&a});
  auto out = BasicTensor<T>::from(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()),
                                  track);
  if (track) {
    record<T>("reshape", {a}, out, [a, out]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

template <class T>
BasicTensor<T> embedding_gather(const BasicTensor<T>& table, std::span<const int> ids) {
  rank2(table, "embedding_gather");
  require(!ids.empty(), ErrorCode::ShapeMismatch, "embedding_gather: no ids");
  const int rows = table.dim(0), d = table.dim(1);
  for (int id : ids)
    require(id >= 0 && id < rows, ErrorCode::ShapeMismatch,
            "embedding_gather: id " + std::to_string(id) + " out of " + std::to_string(rows));
  const bool track = tracks<T>({&table});
  auto out = make_out<T>({static_cast<int>(ids.size()), d}, track);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data().begin() + static_cast<std::size_t>(ids[i]) * d, d,
                out.data().begin() + i * d);
  if (track) {
    std::vector<int> idv(ids.begin(), ids.end());
    record<T>("embedding_gather", {table}, out, [table, out, idv, d]() mutable {
      auto g = out.grad();
      auto gt = table.grad();
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (int e = 0; e < d; ++e) gt[static_cast<std::size_t>(idv[i]) * d + e] += g[i * d + e];
    });
  }
  return out;
}

template <class T>
BasicTensor<T> replace_rows(const BasicTensor<T>& base, std::span<const int> rows,
                            const BasicTensor<T>& values) {
  rank2(base, "replace_rows");
  rank2(values, "replace_rows");
  const int n = base.dim(0), d = base.dim(1);
  require(values.dim(0) == static_cast<int>(rows.size()) && values.dim(1) == d,
          ErrorCode::ShapeMismatch, "replace_rows: values " + shape_str(values.shape()));
  std::vector<char> replaced(static_cast<std::size_t>(n), 0);
  for (int r : rows) {
    require(r >= 0 && r < n, ErrorCode::ShapeMismatch, "replace_rows: row out of range");
    require(!replaced[r], ErrorCode::InvalidArgument, "replace_rows: duplicate row");
    replaced[r] = 1;
  }
  const bool track = tracks<T>({&base, &values});
  auto out = BasicTensor<T>::from(base.shape(),
                                  std::vector<T>(base.data().begin(), base.data().end()), track);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(values.data().begin() + i * d, d,
                out.data().begin() + static_cast<std::size_t>(rows[i]) * d);
  if (track) {
    std::vector<int> rv(rows.begin(), rows.end());
    record<T>("replace_rows", {base, values}, out,
              [base, values, out, rv, replaced, d]() mutable {
                auto g = out.grad();
                if (base.requires_grad()) {
                  auto gb = base.grad();
                  for (std::size_t r = 0; r < replaced.size(); ++r)
                    if (!replaced[r])
                      for (int e = 0; e < d; ++e) gb[r * d + e] += g[r * d + e];
                }
                if (values.requires_grad()) {
                  auto gv = values.grad();
                  for (std::size_t i = 0; i < rv.size(); ++i)
                    for (int e = 0; e < d; ++e)
                      gv[i * d + e] += g[static_cast<std::size_t>(rv[i]) * d + e];
                }
              });
  }
  return out;
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  const bool track = tracks<T>({&x});
  auto out = make_out<T>(x.shape(), track);
  for (std::size_t i = 0; i < x.numel(); ++i) out.data()[i] = std::max(x.data()[i], T(0));
  if (track) {
    record<T>("relu", {x}, out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i)
        if (x.data()[i] > T(0)) gx[i] += g[i];
    });
  }
  return out;
}

template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  const bool track = tracks<T>({&x});
  auto out = make_out<T>(x.shape(), track);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v))));
  }
  if (track) {
    record<T>("gelu", {x}, out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const double v = x.data()[i];
        const double t = std::tanh(kGeluC * (v + 0.044715 * v * v * v));
        const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
        gx[i] += static_cast<T>(g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt));
      }
    });
  }
  return out;
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  const bool track = tracks<T>({&x});
  auto out = make_out<T>(x.shape(), track);
  for (std::size_t i = 0; i < x.numel(); ++i)
    out.data()[i] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x.data()[i]))));
  if (track) {
    record<T>("sigmoid", {x}, out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const T y = out.data()[i];
        gx[i] += g[i] * y * (T(1) - y);
      }
    });
  }
  return out;
}

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  require(x.rank() >= 1, ErrorCode::InvalidAxis, "softmax: scalar input");
  const int w = x.shape().back();
  const std::size_t rows = x.numel() / w;
  const bool track = tracks<T>({&x});
  auto out = make_out<T>(x.shape(), track);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * w;
    T* o = out.data().data() + r * w;
    const double mx = *std::max_element(in, in + w);
    double z = 0.0;
    for (int j = 0; j < w; ++j) z += std::exp(in[j] - mx);
    for (int j = 0; j < w; ++j) o[j] = static_cast<T>(std::exp(in[j] - mx) / z);
  }
  if (track) {
    record<T>("softmax", {x}, out, [x, out, rows, w]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = out.data().data() + r * w;
        double dot = 0.0;
        for (int j = 0; j < w; ++j) dot += static_cast<double>(g[r * w + j]) * y[j];
        for (int j = 0; j < w; ++j) gx[r * w + j] += static_cast<T>(y[j] * (g[r * w + j] - dot));
      }
    });
  }
  return out;
}

namespace {

template <class T>
BasicTensor<T> layernorm_impl(const BasicTensor<T>& x, const BasicTensor<T>* gamma,
                              const BasicTensor<T>* beta) {
  require(x.rank() >= 1, ErrorCode::InvalidAxis, "layernorm: scalar input");
  const int w = x.shape().back();
  if (gamma) {
    require(gamma->rank() == 1 && gamma->dim(0) == w && beta->rank() == 1 && beta->dim(0) == w,
            ErrorCode::ShapeMismatch, "layernorm: affine parameters must match last axis");
  }
  const std::size_t rows = x.numel() / w;
  const bool track = gamma ? tracks<T>({&x, gamma, beta}) : tracks<T>({&x});
  auto out = make_out<T>(x.shape(), track);
  std::vector<T> xhat(x.numel());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * w;
    double mu = 0.0;
    for (int j = 0; j < w; ++j) mu += in[j];
    mu /= w;
    double var = 0.0;
    for (int j = 0; j < w; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= w;
    rstd[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int j = 0; j < w; ++j) {
      const double xh = (in[j] - mu) * rstd[r];
      xhat[r * w + j] = static_cast<T>(xh);
      out.data()[r * w + j] =
          gamma ? static_cast<T>(xh * gamma->data()[j] + beta->data()[j]) : static_cast<T>(xh);
    }
  }
  if (track) {
    std::vector<BasicTensor<T>> ins{x};
    BasicTensor<T> g_t, b_t;
    if (gamma) {
      g_t = *gamma;
      b_t = *beta;
      ins.push_back(g_t);
      ins.push_back(b_t);
    }
    record<T>("layernorm", ins, out, [x, g_t, b_t, out, xhat, rstd, rows, w]() mutable {
      auto g = out.grad();
      const bool affine = g_t.defined();
      std::vector<double> dgamma(affine ? w : 0, 0.0), dbeta(affine ? w : 0, 0.0);
      std::vector<double> dxh(w);
      for (std::size_t r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < w; ++j) {
          const double gy = g[r * w + j];
          if (affine) {
            dgamma[j] += gy * xhat[r * w + j];
            dbeta[j] += gy;
          }
          dxh[j] = affine ? gy * g_t.data()[j] : gy;
          m1 += dxh[j];
          m2 += dxh[j] * xhat[r * w + j];
        }
        m1 /= w;
        m2 /= w;
        if (x.requires_grad()) {
          auto gx = x.grad();
          for (int j = 0; j < w; ++j)
            gx[r * w + j] += static_cast<T>(rstd[r] * (dxh[j] - m1 - xhat[r * w + j] * m2));
        }
      }
      if (affine && g_t.requires_grad())
        for (int j = 0; j < w; ++j) g_t.grad()[j] += static_cast<T>(dgamma[j]);
      if (affine && b_t.requires_grad())
        for (int j = 0; j < w; ++j) b_t.grad()[j] += static_cast<T>(dbeta[j]);
    });
  }
  return out;
}

}  // namespace

template <class T>
BasicTensor<T> layernorm(const BasicTensor<T>& x) {
  return layernorm_impl<T>(x, nullptr, nullptr);
}

template <class T>
BasicTensor<T> layernorm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                         const BasicTensor<T>& beta) {
  return layernorm_impl<T>(x, &gamma, &beta);
}

template <class T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets,
                             std::span<const std::uint8_t> mask) {
  rank2(logits, "cross_entropy");
  const int n = logits.dim(0), v = logits.dim(1);
  require(static_cast<int>(targets.size()) == n && static_cast<int>(mask.size()) == n,
          ErrorCode::ShapeMismatch, "cross_entropy: targets/mask length must equal rows");
  int count = 0;
  for (int i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    require(targets[i] >= 0 && targets[i] < v, ErrorCode::ShapeMismatch,
            "cross_entropy: target id out of range");
    ++count;
  }
  if (count == 0) fail(ErrorCode::EmptyMask, "cross_entropy: mask selects no rows");
  const bool track = tracks<T>({&logits});
  std::vector<double> lse(n, 0.0);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const T* row = logits.data().data() + static_cast<std::size_t>(i) * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (int j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    lse[i] = mx + std::log(z);
    total += lse[i] - row[targets[i]];
  }
  auto out = BasicTensor<T>::scalar(static_cast<T>(total / count), track);
  if (track) {
    std::vector<int> tv(targets.begin(), targets.end());
    std::vector<std::uint8_t> mv(mask.begin(), mask.end());
    record<T>("cross_entropy", {logits}, out, [logits, out, tv, mv, lse, n, v, count]() mutable {
      const double g = static_cast<double>(out.grad()[0]) / count;
      auto gl = logits.grad();
      for (int i = 0; i < n; ++i) {
        if (!mv[i]) continue;
        const T* row = logits.data().data() + static_cast<std::size_t>(i) * v;
        T* grow = gl.data() + static_cast<std::size_t>(i) * v;
        for (int j = 0; j < v; ++j) {
          const double p = std::exp(row[j] - lse[i]);
          grow[j] += static_cast<T>(g * (p - (j == tv[i] ? 1.0 : 0.0)));
        }
      }
    });
  }
  return out;
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  const bool track = tracks<T>({&x});
  double s = 0.0;
  for (T v : x.data()) s += v;
  auto out = BasicTensor<T>::scalar(static_cast<T>(s), track);
  if (track) {
    record<T>("sum", {x}, out, [x, out]() mutable {
      const T g = out.grad()[0];
      for (auto& gx : x.grad()) gx += g;
    });
  }
  return out;
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  const bool track = tracks<T>({&x});
  double s = 0.0;
  for (T v : x.data()) s += v;
  const double n = static_cast<double>(x.numel());
  auto out = BasicTensor<T>::scalar(static_cast<T>(s / n), track);
  if (track) {
    record<T>("mean", {x}, out, [x, out, n]() mutable {
      const T g = static_cast<T>(out.grad()[0] / n);
      for (auto& gx : x.grad()) gx += g;
    });
  }
  return out;
}

template <class T>
BasicTensor<T> l1_distance(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  same_shape(a, b, "l1_distance");
  const bool track = tracks<T>({&a, &b});
  const std::size_t n = a.numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(static_cast<double>(a.data()[i]) - b.data()[i]);
  auto out = BasicTensor<T>::scalar(static_cast<T>(s / n), track);
  if (track) {
    record<T>("l1_distance", {a, b}, out, [a, b, out, n]() mutable {
      const double g = static_cast<double>(out.grad()[0]) / n;
      for (std::size_t i = 0; i < n; ++i) {
        const double diff = static_cast<double>(a.data()[i]) - b.data()[i];
        const double sg = diff > 0 ? g : (diff < 0 ? -g : 0.0);
        if (a.requires_grad()) a.grad()[i] += static_cast<T>(sg);
        if (b.requires_grad()) b.grad()[i] -= static_cast<T>(sg);
      }
    });
  }
  return out;
}

template <class T>
BasicTensor<T> squared_error(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  same_shape(a, b, "squared_error");
  const bool track = tracks<T>({&a, &b});
  const std::size_t n = a.numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double diff = static_cast<double>(a.data()[i]) - b.data()[i];
    s += diff * diff;
  }
  auto out = BasicTensor<T>::scalar(static_cast<T>(s / n), track);
  if (track) {
    record<T>("squared_error", {a, b}, out, [a, b, out, n]() mutable {
      const double g = 2.0 * static_cast<double>(out.grad()[0]) / n;
      for (std::size_t i = 0; i < n; ++i) {
        const double diff = static_cast<double>(a.data()[i]) - b.data()[i];
        if (a.requires_grad()) a.grad()[i] += static_cast<T>(g * diff);
        if (b.requires_grad()) b.grad()[i] -= static_cast<T>(g * diff);
      }
    });
  }
  return out;
}

template <class T>
BasicTensor<T> causal_attention(const BasicTensor<T>& qkv,
                                std::span<const kernels::Segment> segments, int heads) {
  rank2(qkv, "causal_attention");
  require(qkv.dim(1) % 3 == 0, ErrorCode::ShapeMismatch, "causal_attention: width not 3d");
  const int d = qkv.dim(1) / 3;
  require(heads > 0 && d % heads == 0, ErrorCode::ShapeMismatch,
          "causal_attention: d not divisible by heads");
  int covered = 0;
  for (const auto& s : segments) {
    require(s.start == covered && s.length > 0, ErrorCode::ShapeMismatch,
            "causal_attention: segments must tile the rows in order");
    covered += s.length;
  }
  require(covered == qkv.dim(0), ErrorCode::ShapeMismatch,
          "causal_attention: segments do not cover all rows");
  const bool track = tracks<T>({&qkv});
  auto out = make_out<T>({qkv.dim(0), d}, track);
  std::vector<kernels::Segment> segs(segments.begin(), segments.end());
  std::vector<T> probs(kernels::attention_probs_size(segs, heads));
  kernels::attention_forward(qkv.data().data(), out.data().data(), probs.data(), segs, heads, d);
  if (track) {
    record<T>("causal_attention", {qkv}, out,
              [qkv, out, segs, probs = std::move(probs), heads, d]() mutable {
                kernels::attention_backward(qkv.data().data(), probs.data(), out.grad().data(),
                                            qkv.grad().data(), segs, heads, d);
              });
  }
  return out;
}

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias) {
  require(x.rank() == 3 && weight.rank() == 4 && bias.rank() == 1, ErrorCode::ShapeMismatch,
          "conv2d: expected x [c,h,w], weight [k,c,s,s], bias [k]");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int k = weight.dim(0), ks = weight.dim(2);
  require(weight.dim(1) == c && weight.dim(3) == ks && ks % 2 == 1 && bias.dim(0) == k,
          ErrorCode::ShapeMismatch,
          "conv2d: weight " + shape_str(weight.shape()) + " incompatible with " +
              shape_str(x.shape()));
  const bool track = tracks<T>({&x, &weight, &bias});
  auto out = make_out<T>({k, h, w}, track);
  kernels::conv2d_forward(x.data().data(), weight.data().data(), bias.data().data(),
                          out.data().data(), c, h, w, k, ks);
  if (track) {
    record<T>("conv2d", {x, weight, bias}, out, [x, weight, bias, out, c, h, w, k, ks]() mutable {
      kernels::conv2d_backward(x.data().data(), weight.data().data(), out.grad().data(),
                               x.requires_grad() ? x.grad().data() : nullptr,
                               weight.requires_grad() ? weight.grad().data() : nullptr,
                               bias.requires_grad() ? bias.grad().data() : nullptr, c, h, w, k,
                               ks);
    });
  }
  return out;
}

template <class T>
BasicTensor<T> add_upsampled(const BasicTensor<T>& x, const BasicTensor<T>& grid, int g) {
  require(x.rank() == 3 && grid.rank() == 2, ErrorCode::ShapeMismatch,
          "add_upsampled: expected x [k,h,w] and grid [g*g,k]");
  const int k = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(g > 0 && grid.dim(0) == g * g && grid.dim(1) == k && h % g == 0 && w % g == 0,
          ErrorCode::ShapeMismatch, "add_upsampled: grid does not tile the feature map");
  const int fh = h / g, fw = w / g;
  const bool track = tracks<T>({&x, &grid});
  auto out = make_out<T>(x.shape(), track);
  for (int kk = 0; kk < k; ++kk)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const std::size_t idx = (static_cast<std::size_t>(kk) * h + i) * w + j;
        out.data()[idx] = x.data()[idx] + grid.data()[((i / fh) * g + j / fw) * k + kk];
      }
  if (track) {
    record<T>("add_upsampled", {x, grid}, out, [x, grid, out, k, h, w, g, fh, fw]() mutable {
      auto go = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
      }
      if (grid.requires_grad()) {
        std::vector<double> acc(static_cast<std::size_t>(g) * g * k, 0.0);
        for (int kk = 0; kk < k; ++kk)
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
              acc[((i / fh) * g + j / fw) * k + kk] += go[(static_cast<std::size_t>(kk) * h + i) * w + j];
        auto gg = grid.grad();
        for (std::size_t i = 0; i < acc.size(); ++i) gg[i] += static_cast<T>(acc[i]);
      }
    });
  }
  return out;
}

template <class T>
BasicTensor<T> order_corners(const BasicTensor<T>& boxes) {
  require(boxes.rank() == 2 && boxes.dim(1) == 4, ErrorCode::ShapeMismatch,
          "order_corners: expected [n x 4], got " + shape_str(boxes.shape()));
  const int n = boxes.dim(0);
  const bool track = tracks<T>({&boxes});
  auto out = make_out<T>(boxes.shape(), track);
  // src[i*4+c] is the input column feeding output column c.
  std::vector<std::uint8_t> src(static_cast<std::size_t>(n) * 4);
  for (int i = 0; i < n; ++i) {
    const T* b = boxes.data().data() + i * 4;
    T* o = out.data().data() + i * 4;
    for (int axis = 0; axis < 2; ++axis) {
      const bool swapped = b[axis] > b[axis + 2];
      src[i * 4 + axis] = static_cast<std::uint8_t>(swapped ? axis + 2 : axis);
      src[i * 4 + axis + 2] = static_cast<std::uint8_t>(swapped ? axis : axis + 2);
      o[axis] = b[src[i * 4 + axis]];
      o[axis + 2] = b[src[i * 4 + axis + 2]];
    }
  }
  if (track) {
    record<T>("order_corners", {boxes}, out, [boxes, out, src, n]() mutable {
      auto g = out.grad();
      auto gb = boxes.grad();
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < 4; ++c) gb[i * 4 + src[i * 4 + c]] += g[i * 4 + c];
    });
  }
  return out;
}

#define LOCEMB_INSTANTIATE_OPS(T)                                                                 \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                  \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> scale(const BasicTensor<T>&, double);                                  \
  template BasicTensor<T> concat(std::span<const BasicTensor<T>>, int);                          \
  template BasicTensor<T> slice(const BasicTensor<T>&, int, int, int);                           \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                 \
  template BasicTensor<T> embedding_gather(const BasicTensor<T>&, std::span<const int>);         \
  template BasicTensor<T> replace_rows(const BasicTensor<T>&, std::span<const int>,              \
                                       const BasicTensor<T>&);                                   \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                           \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                           \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                        \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                        \
  template BasicTensor<T> layernorm(const BasicTensor<T>&);                                      \
  template BasicTensor<T> layernorm(const BasicTensor<T>&, const BasicTensor<T>&,                \
                                    const BasicTensor<T>&);                                      \
  template BasicTensor<T> cross_entropy(const BasicTensor<T>&, std::span<const int>,             \
                                        std::span<const std::uint8_t>);                          \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                            \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                           \
  template BasicTensor<T> l1_distance(const BasicTensor<T>&, const BasicTensor<T>&);             \
  template BasicTensor<T> squared_error(const BasicTensor<T>&, const BasicTensor<T>&);           \
  template BasicTensor<T> causal_attention(const BasicTensor<T>&,                                \
                                           std::span<const kernels::Segment>, int);              \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,                   \
                                 const BasicTensor<T>&);                                         \
  template BasicTensor<T> add_upsampled(const BasicTensor<T>&, const BasicTensor<T>&, int);      \
  template BasicTensor<T> order_corners(const BasicTensor<T>&);

LOCEMB_INSTANTIATE_OPS(float)
LOCEMB_INSTANTIATE_OPS(double)

#undef LOCEMB_INSTANTIATE_OPS

}  // namespace locemb::ad
