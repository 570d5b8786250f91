#include "lfdepth/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>

#include "lfdepth/errors.hpp"

namespace lfd {

namespace detail {
namespace {
std::atomic<GradientFault> g_fault{GradientFault::None};
}
void set_gradient_fault(GradientFault fault) { g_fault = fault; }
GradientFault gradient_fault() { return g_fault; }

namespace {
thread_local std::uint64_t* g_trace = nullptr;
}
BranchTrace::BranchTrace() : prev_(g_trace) { g_trace = &hash_; }
BranchTrace::~BranchTrace() { g_trace = prev_; }
std::uint64_t* branch_trace() { return g_trace; }
}  // namespace detail

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

/// Offsets into `src` (of shape `src_shape`, right-aligned against `out`) for
/// every flat index of `out`.
std::vector<Index> broadcast_offsets(const Shape& src_shape, const Shape& out) {
  const std::size_t r = out.size();
  Shape src(r, 1);
  std::copy(src_shape.begin(), src_shape.end(), src.begin() + (r - src_shape.size()));
  Shape src_strides = strides_of(src);
  for (std::size_t k = 0; k < r; ++k) {
    if (src[k] == 1) src_strides[k] = 0;
  }
  const Index n = numel(out);
  std::vector<Index> offs(static_cast<std::size_t>(n));
  Shape idx(r, 0);
  Index off = 0;
  for (Index i = 0; i < n; ++i) {
    offs[static_cast<std::size_t>(i)] = off;
    for (Index k = static_cast<Index>(r) - 1; k >= 0; --k) {
      if (++idx[k] < out[k]) {
        off += src_strides[k];
        break;
      }
      off -= src_strides[k] * (out[k] - 1);
      idx[k] = 0;
    }
  }
  return offs;
}

template <class Fwd, class Dfx>
Tensor unary(const Tensor& x, Fwd f, Dfx df) {
  auto in = x.data();
  Buffer out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  auto xi = x.impl();
  Buffer y = out;
  return make_result(x.shape(), std::move(out), {x},
                     [xi, y = std::move(y), df](std::span<const double> g,
                                                std::span<Buffer*> gin) {
                       auto& gx = *gin[0];
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         gx[i] += g[i] * df(xi->data[i], y[i]);
                       }
                     });
}

Index normalize_axis(Index axis, Index rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  }
  return axis;
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t k = 0; k < r; ++k) {
    const Index ea = k < r - a.size() ? 1 : a[k - (r - a.size())];
    const Index eb = k < r - b.size() ? 1 : b[k - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " do not broadcast");
    }
    out[k] = std::max(ea, eb);
  }
  return out;
}

Tensor binary_elementwise(const Tensor& a, const Tensor& b, BinaryOp op) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  auto ad = a.data();
  auto bd = b.data();
  if (op == BinaryOp::Div) {
    if (std::any_of(bd.begin(), bd.end(), [](double v) { return v == 0.0; })) {
      throw DomainError("division by exact zero");
    }
  }
  const bool same = a.shape() == out_shape && b.shape() == out_shape;
  std::vector<Index> oa, ob;
  if (!same) {
    oa = broadcast_offsets(a.shape(), out_shape);
    ob = broadcast_offsets(b.shape(), out_shape);
  }
  const std::size_t n = static_cast<std::size_t>(numel(out_shape));
  Buffer out(n);
  auto ia = [&](std::size_t i) { return same ? i : static_cast<std::size_t>(oa[i]); };
  auto ib = [&](std::size_t i) { return same ? i : static_cast<std::size_t>(ob[i]); };
  for (std::size_t i = 0; i < n; ++i) {
    const double x = ad[ia(i)], y = bd[ib(i)];
    switch (op) {
      case BinaryOp::Add: out[i] = x + y; break;
      case BinaryOp::Sub: out[i] = x - y; break;
      case BinaryOp::Mul: out[i] = x * y; break;
      case BinaryOp::Div: out[i] = x / y; break;
    }
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result(
      out_shape, std::move(out), {a, b},
      [ai, bi, op, same, oa = std::move(oa), ob = std::move(ob)](
          std::span<const double> g, std::span<Buffer*> gin) {
        const auto& ad = ai->data;
        const auto& bd = bi->data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t ja = same ? i : static_cast<std::size_t>(oa[i]);
          const std::size_t jb = same ? i : static_cast<std::size_t>(ob[i]);
          double da = 0.0, db = 0.0;
          switch (op) {
            case BinaryOp::Add: da = 1.0; db = 1.0; break;
            case BinaryOp::Sub: da = 1.0; db = -1.0; break;
            case BinaryOp::Mul: da = bd[jb]; db = ad[ja]; break;
            case BinaryOp::Div:
              da = 1.0 / bd[jb];
              db = -ad[ja] / (bd[jb] * bd[jb]);
              break;
          }
          if (gin[0]) (*gin[0])[ja] += g[i] * da;
          if (gin[1]) (*gin[1])[jb] += g[i] * db;
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, BinaryOp::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, BinaryOp::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, BinaryOp::Mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, BinaryOp::Div); }

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator-(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
Tensor operator-(double s, const Tensor& a) { return add_scalar(mul_scalar(a, -1.0), s); }

Tensor abs(const Tensor& x) {
  if (auto* h = detail::branch_trace()) {
    for (double v : x.data()) detail::trace_branch(h, v > 0.0 ? 1 : (v < 0.0 ? 2 : 3));
  }
  return unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor sqrt(const Tensor& x) {
  auto d = x.data();
  if (std::any_of(d.begin(), d.end(), [](double v) { return v < 0.0; })) {
    throw DomainError("sqrt of a negative value");
  }
  return unary(
      x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double s) {
        const double d = s * (1.0 - s);
        return detail::g_fault == detail::GradientFault::Sigmoid ? 1.01 * d : d;
      });
}

Tensor relu(const Tensor& x) {
  if (auto* h = detail::branch_trace()) {
    for (double v : x.data()) detail::trace_branch(h, v > 0.0 ? 1 : 2);
  }
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul needs rank >= 2 operands");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const Index M = as[as.size() - 2], K = as.back();
  const Index K2 = bs[bs.size() - 2], N = bs.back();
  if (K != K2) {
    throw ShapeError("matmul inner extents differ: " + to_string(as) + " x " + to_string(bs));
  }
  const Shape a_batch(as.begin(), as.end() - 2);
  const Shape b_batch(bs.begin(), bs.end() - 2);
  Shape batch;
  if (a_batch == b_batch || b_batch.empty()) {
    batch = a_batch;
  } else if (a_batch.empty()) {
    batch = b_batch;
  } else {
    throw ShapeError("matmul batch extents differ: " + to_string(as) + " x " + to_string(bs));
  }
  const Index B = numel(batch);
  const bool a_shared = a_batch.empty() && !batch.empty();
  const bool b_shared = b_batch.empty() && !batch.empty();

  Shape out_shape = batch;
  out_shape.push_back(M);
  out_shape.push_back(N);
  Buffer out(static_cast<std::size_t>(B * M * N));
  auto ad = a.data();
  auto bd = b.data();
  for (Index s = 0; s < B; ++s) {
    ConstMatMap A(ad.data() + (a_shared ? 0 : s * M * K), M, K);
    ConstMatMap Bm(bd.data() + (b_shared ? 0 : s * K * N), K, N);
    MatMap C(out.data() + s * M * N, M, N);
    C.noalias() = A * Bm;
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result(
      out_shape, std::move(out), {a, b},
      [ai, bi, B, M, K, N, a_shared, b_shared](std::span<const double> g,
                                               std::span<Buffer*> gin) {
        for (Index s = 0; s < B; ++s) {
          ConstMatMap G(g.data() + s * M * N, M, N);
          if (gin[0]) {
            ConstMatMap Bm(bi->data.data() + (b_shared ? 0 : s * K * N), K, N);
            MatMap GA(gin[0]->data() + (a_shared ? 0 : s * M * K), M, K);
            if (detail::g_fault == detail::GradientFault::Matmul) {
              GA.noalias() += 1.01 * (G * Bm.transpose());
            } else {
              GA.noalias() += G * Bm.transpose();
            }
          }
          if (gin[1]) {
            ConstMatMap A(ai->data.data() + (a_shared ? 0 : s * M * K), M, K);
            MatMap GB(gin[1]->data() + (b_shared ? 0 : s * K * N), K, N);
            GB.noalias() += A.transpose() * G;
          }
        }
      });
}

Tensor reduce(const Tensor& x, const std::vector<Index>& axes, ReduceOp op, bool keep_dims) {
  const Shape& xs = x.shape();
  const Index r = x.rank();
  std::vector<bool> reduced(static_cast<std::size_t>(r), false);
  for (Index a : axes) {
    const Index k = normalize_axis(a, r);
    if (reduced[k]) throw ShapeError("duplicate reduction axis");
    reduced[k] = true;
  }
  Shape kept(xs);
  Shape out_shape;
  for (Index k = 0; k < r; ++k) {
    if (reduced[k]) {
      kept[k] = 1;
      if (keep_dims) out_shape.push_back(1);
    } else {
      out_shape.push_back(xs[k]);
    }
  }
  const Index n_out = numel(kept);
  const Index group = numel(xs) / n_out;
  // For every input element, its output slot.
  const std::vector<Index> slot = [&] {
    std::vector<Index> m(static_cast<std::size_t>(numel(xs)));
    const Shape ks = strides_of(kept);
    Shape idx(static_cast<std::size_t>(r), 0);
    for (std::size_t i = 0; i < m.size(); ++i) {
      Index o = 0;
      for (Index k = 0; k < r; ++k) {
        if (!reduced[k]) o += idx[k] * ks[k];
      }
      m[i] = o;
      for (Index k = r - 1; k >= 0; --k) {
        if (++idx[k] < xs[k]) break;
        idx[k] = 0;
      }
    }
    return m;
  }();
  auto d = x.data();
  Buffer out(static_cast<std::size_t>(n_out),
                          op == ReduceOp::Max ? -std::numeric_limits<double>::infinity() : 0.0);
  std::vector<Index> argmax;
  if (op == ReduceOp::Max) argmax.assign(out.size(), -1);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto o = static_cast<std::size_t>(slot[i]);
    if (op == ReduceOp::Max) {
      if (d[i] > out[o]) {
        out[o] = d[i];
        argmax[o] = static_cast<Index>(i);
      }
    } else {
      out[o] += d[i];
    }
  }
  if (op == ReduceOp::Mean) {
    for (double& v : out) v /= static_cast<double>(group);
  }
  if (auto* h = detail::branch_trace(); h && op == ReduceOp::Max) {
    for (Index a : argmax) detail::trace_branch(h, static_cast<std::uint64_t>(a));
  }
  return make_result(out_shape, std::move(out), {x},
                     [slot, op, group, argmax = std::move(argmax)](
                         std::span<const double> g, std::span<Buffer*> gin) {
                       auto& gx = *gin[0];
                       if (op == ReduceOp::Max) {
                         for (std::size_t o = 0; o < g.size(); ++o) {
                           gx[static_cast<std::size_t>(argmax[o])] += g[o];
                         }
                         return;
                       }
                       const double scale =
                           op == ReduceOp::Mean ? 1.0 / static_cast<double>(group) : 1.0;
                       for (std::size_t i = 0; i < gx.size(); ++i) {
                         gx[i] += g[static_cast<std::size_t>(slot[i])] * scale;
                       }
                     });
}

Tensor sum(const Tensor& x) {
  std::vector<Index> all(static_cast<std::size_t>(x.rank()));
  std::iota(all.begin(), all.end(), 0);
  return reduce(x, all, ReduceOp::Sum);
}

Tensor mean(const Tensor& x) {
  std::vector<Index> all(static_cast<std::size_t>(x.rank()));
  std::iota(all.begin(), all.end(), 0);
  return reduce(x, all, ReduceOp::Mean);
}

Tensor sum(const Tensor& x, const std::vector<Index>& axes, bool keep_dims) {
  return reduce(x, axes, ReduceOp::Sum, keep_dims);
}

Tensor mean(const Tensor& x, const std::vector<Index>& axes, bool keep_dims) {
  return reduce(x, axes, ReduceOp::Mean, keep_dims);
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  auto d = x.data();
  return make_result(shape, Buffer(d.begin(), d.end()), {x},
                     [](std::span<const double> g, std::span<Buffer*> gin) {
                       auto& gx = *gin[0];
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                     });
}

Tensor permute(const Tensor& x, const std::vector<Index>& order) {
  const Index r = x.rank();
  if (static_cast<Index>(order.size()) != r) throw ShapeError("permute order rank mismatch");
  std::vector<bool> used(static_cast<std::size_t>(r), false);
  for (Index k : order) {
    if (k < 0 || k >= r || used[k]) throw ShapeError("permute order is not a permutation");
    used[k] = true;
  }
  const Shape& xs = x.shape();
  const Shape xst = strides_of(xs);
  Shape out_shape(static_cast<std::size_t>(r));
  Shape src_stride(static_cast<std::size_t>(r));
  for (Index k = 0; k < r; ++k) {
    out_shape[k] = xs[order[k]];
    src_stride[k] = xst[order[k]];
  }
  const Index n = numel(xs);
  std::vector<Index> src(static_cast<std::size_t>(n));
  Shape idx(static_cast<std::size_t>(r), 0);
  Index off = 0;
  for (Index i = 0; i < n; ++i) {
    src[static_cast<std::size_t>(i)] = off;
    for (Index k = r - 1; k >= 0; --k) {
      if (++idx[k] < out_shape[k]) {
        off += src_stride[k];
        break;
      }
      off -= src_stride[k] * (out_shape[k] - 1);
      idx[k] = 0;
    }
  }
  auto d = x.data();
  Buffer out(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[static_cast<std::size_t>(src[i])];
  return make_result(out_shape, std::move(out), {x},
                     [src = std::move(src)](std::span<const double> g,
                                            std::span<Buffer*> gin) {
                       auto& gx = *gin[0];
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         gx[static_cast<std::size_t>(src[i])] += g[i];
                       }
                     });
}

Tensor transpose_last(const Tensor& x) {
  const Index r = x.rank();
  if (r < 2) throw ShapeError("transpose_last needs rank >= 2");
  std::vector<Index> order(static_cast<std::size_t>(r));
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[r - 1], order[r - 2]);
  return permute(x, order);
}

Tensor slice(const Tensor& x, Index axis, Index start, Index length) {
  axis = normalize_axis(axis, x.rank());
  const Shape& xs = x.shape();
  if (start < 0 || length < 1 || start + length > xs[axis]) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) +
                     ") out of range for axis extent " + std::to_string(xs[axis]));
  }
  Index outer = 1, inner = 1;
  for (Index k = 0; k < axis; ++k) outer *= xs[k];
  for (Index k = axis + 1; k < x.rank(); ++k) inner *= xs[k];
  const Index ext = xs[axis];
  Shape out_shape(xs);
  out_shape[axis] = length;
  auto d = x.data();
  Buffer out(static_cast<std::size_t>(outer * length * inner));
  for (Index o = 0; o < outer; ++o) {
    std::copy_n(d.begin() + (o * ext + start) * inner, length * inner,
                out.begin() + o * length * inner);
  }
  return make_result(out_shape, std::move(out), {x},
                     [outer, inner, ext, start, length](std::span<const double> g,
                                                        std::span<Buffer*> gin) {
                       auto& gx = *gin[0];
                       for (Index o = 0; o < outer; ++o) {
                         for (Index j = 0; j < length * inner; ++j) {
                           gx[static_cast<std::size_t>((o * ext + start) * inner + j)] +=
                               g[static_cast<std::size_t>(o * length * inner + j)];
                         }
                       }
                     });
}

Tensor concat(const std::vector<Tensor>& xs, Index axis) {
  if (xs.empty()) throw ShapeError("concat of an empty list");
  const Shape& s0 = xs.front().shape();
  axis = normalize_axis(axis, static_cast<Index>(s0.size()));
  Shape out_shape(s0);
  out_shape[axis] = 0;
  for (const Tensor& t : xs) {
    const Shape& s = t.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t k = 0; ok && k < s.size(); ++k) {
      if (static_cast<Index>(k) != axis && s[k] != s0[k]) ok = false;
    }
    if (!ok) {
      throw ShapeError("concat off-axis extents differ: " + to_string(s0) + " vs " + to_string(s));
    }
    out_shape[axis] += s[axis];
  }
  Index outer = 1, inner = 1;
  for (Index k = 0; k < axis; ++k) outer *= s0[k];
  for (Index k = axis + 1; k < static_cast<Index>(s0.size()); ++k) inner *= s0[k];
  std::vector<Index> widths;
  for (const Tensor& t : xs) widths.push_back(t.dim(axis) * inner);
  const Index total = out_shape[axis] * inner;
  Buffer out(static_cast<std::size_t>(numel(out_shape)));
  Index col = 0;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    auto d = xs[t].data();
    for (Index o = 0; o < outer; ++o) {
      std::copy_n(d.begin() + o * widths[t], widths[t], out.begin() + o * total + col);
    }
    col += widths[t];
  }
  return make_result(out_shape, std::move(out), xs,
                     [widths, outer, total](std::span<const double> g,
                                            std::span<Buffer*> gin) {
                       Index col = 0;
                       for (std::size_t t = 0; t < widths.size(); ++t) {
                         if (gin[t]) {
                           auto& gx = *gin[t];
                           for (Index o = 0; o < outer; ++o) {
                             for (Index j = 0; j < widths[t]; ++j) {
                               gx[static_cast<std::size_t>(o * widths[t] + j)] +=
                                   g[static_cast<std::size_t>(o * total + col + j)];
                             }
                           }
                         }
                         col += widths[t];
                       }
                     });
}

Tensor expand(const Tensor& x, const Shape& shape) {
  if (broadcast_shapes(x.shape(), shape) != shape) {
    throw ShapeError("cannot expand " + to_string(x.shape()) + " to " + to_string(shape));
  }
  std::vector<Index> src = broadcast_offsets(x.shape(), shape);
  auto d = x.data();
  Buffer out(src.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[static_cast<std::size_t>(src[i])];
  return make_result(shape, std::move(out), {x},
                     [src = std::move(src)](std::span<const double> g,
                                            std::span<Buffer*> gin) {
                       auto& gx = *gin[0];
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         gx[static_cast<std::size_t>(src[i])] += g[i];
                       }
                     });
}

}  // namespace lfd
