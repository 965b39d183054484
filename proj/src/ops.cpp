#include "ppg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ppg/errors.hpp"

namespace ppg {

using detail::accumulate_grad;
using detail::make_result;
using detail::should_record;
using ImplPtr = std::shared_ptr<TensorImpl>;

namespace {

std::string shapes2(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b);
}

void check_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.rank())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
}

// outer * n * inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Output flat index -> input flat index under broadcasting.
class BroadcastMap {
 public:
  BroadcastMap(const Shape& out, const Shape& in) : in_numel_(shape_numel(in)) {
    if (out == in) {
      kind_ = Kind::kSame;
      return;
    }
    if (in_numel_ == 1) {
      kind_ = Kind::kScalar;
      return;
    }
    // Strip leading ones, then test whether `in` is a trailing block of `out`.
    std::size_t lead = 0;
    while (lead < in.size() && in[lead] == 1) ++lead;
    const std::size_t core = in.size() - lead;
    if (core <= out.size() && std::equal(in.begin() + static_cast<std::ptrdiff_t>(lead), in.end(),
                                         out.end() - static_cast<std::ptrdiff_t>(core))) {
      kind_ = Kind::kSuffix;
      return;
    }
    kind_ = Kind::kGeneral;
    const std::size_t r = out.size();
    std::vector<std::size_t> in_strides(r, 0);
    const auto st = row_major_strides(in);
    for (std::size_t i = 0; i < in.size(); ++i) {
      const std::size_t oi = r - in.size() + i;
      in_strides[oi] = in[i] == 1 ? 0 : st[i];
    }
    const std::size_t total = shape_numel(out);
    index_.resize(total);
    std::vector<std::size_t> counter(r, 0);
    std::size_t pos = 0;
    for (std::size_t k = 0; k < total; ++k) {
      index_[k] = pos;
      for (std::size_t ax = r; ax-- > 0;) {
        ++counter[ax];
        pos += in_strides[ax];
        if (counter[ax] < out[ax]) break;
        pos -= in_strides[ax] * counter[ax];
        counter[ax] = 0;
      }
    }
  }

  std::size_t operator()(std::size_t i) const {
    switch (kind_) {
      case Kind::kSame:
        return i;
      case Kind::kScalar:
        return 0;
      case Kind::kSuffix:
        return i % in_numel_;
      case Kind::kGeneral:
        return index_[i];
    }
    return 0;
  }

 private:
  enum class Kind { kSame, kScalar, kSuffix, kGeneral };
  Kind kind_ = Kind::kSame;
  std::size_t in_numel_;
  std::vector<std::size_t> index_;
};

template <class F, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const std::size_t n = shape_numel(out_shape);
  auto ma = std::make_shared<BroadcastMap>(out_shape, a.shape());
  auto mb = std::make_shared<BroadcastMap>(out_shape, b.shape());
  std::vector<double> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[(*ma)(i)], bd[(*mb)(i)]);
  const bool rec = should_record({&a, &b});
  ImplPtr pa = a.impl_ptr(), pb = b.impl_ptr();
  return make_result(out_shape, std::move(out), name, {pa, pb},
                     [pa, pb, ma, mb, n, da, db](std::span<const double> g) {
                       if (pa->requires_grad) {
                         std::vector<double> ga(pa->data.size(), 0.0);
                         for (std::size_t i = 0; i < n; ++i) {
                           const std::size_t ia = (*ma)(i);
                           ga[ia] += g[i] * da(pa->data[ia], pb->data[(*mb)(i)]);
                         }
                         accumulate_grad(*pa, ga);
                       }
                       if (pb->requires_grad) {
                         std::vector<double> gb(pb->data.size(), 0.0);
                         for (std::size_t i = 0; i < n; ++i) {
                           const std::size_t ib = (*mb)(i);
                           gb[ib] += g[i] * db(pa->data[(*ma)(i)], pb->data[ib]);
                         }
                         accumulate_grad(*pb, gb);
                       }
                     },
                     rec);
}

// df receives (x, y) where y = f(x).
template <class F, class DF>
Tensor unary_op(const Tensor& x, const char* name, F f, DF df) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = f(xd[i]);
  const bool rec = should_record({&x});
  ImplPtr px = x.impl_ptr();
  std::shared_ptr<std::vector<double>> saved;
  if (rec) saved = std::make_shared<std::vector<double>>(out);
  return make_result(x.shape(), std::move(out), name, {px},
                     [px, saved, df](std::span<const double> g) {
                       std::vector<double> gx(g.size());
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * df(px->data[i], (*saved)[i]);
                       accumulate_grad(*px, gx);
                     },
                     rec);
}

Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape r = s;
  if (keepdim) {
    r[axis] = 1;
  } else {
    r.erase(r.begin() + static_cast<std::ptrdiff_t>(axis));
    if (r.empty()) r = {1};
  }
  return r;
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* A, const double* B, double* C) {
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    const double* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p];
      if (av == 0.0) continue;
      const double* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* A, const double* B, double* C) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* b = B + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[p] * b[p];
      C[i * n + j] += s;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* A, const double* B, double* C) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* a = A + p * m;
    const double* b = B + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[i];
      if (av == 0.0) continue;
      double* c = C + i * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) throw ShapeError(shapes2("broadcast", a, b));
    out[i] = std::max(da, db);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& x) {
  return unary_op(x, "neg", [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& x, double s) {
  return unary_op(x, "scale", [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary_op(x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& x) {
  return unary_op(x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor exp(const Tensor& x) {
  return unary_op(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

namespace {
double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

Tensor sigmoid(const Tensor& x) {
  return unary_op(x, "sigmoid", stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& x) {
  return unary_op(
      x, "silu", [](double v) { return v * stable_sigmoid(v); },
      [](double v, double) {
        const double s = stable_sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& x) {
  return unary_op(
      x, "softplus", [](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); },
      [](double v, double) { return stable_sigmoid(v); });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const bool rec = should_record({&x});
  ImplPtr px = x.impl_ptr();
  return make_result({1}, {s}, "sum", {px},
                     [px](std::span<const double> g) {
                       std::vector<double> gx(px->data.size(), g[0]);
                       accumulate_grad(*px, gx);
                     },
                     rec);
}

Tensor sum(const Tensor& x, std::size_t axis, bool keepdim) {
  check_axis(x, axis, "sum");
  const AxisSplit sp = split_axis(x.shape(), axis);
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k) {
      const double* src = xd.data() + (o * sp.n + k) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  const bool rec = should_record({&x});
  ImplPtr px = x.impl_ptr();
  return make_result(reduced_shape(x.shape(), axis, keepdim), std::move(out), "sum_axis", {px},
                     [px, sp](std::span<const double> g) {
                       std::vector<double> gx(px->data.size());
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         for (std::size_t k = 0; k < sp.n; ++k)
                           std::copy_n(g.data() + o * sp.inner, sp.inner, gx.data() + (o * sp.n + k) * sp.inner);
                       accumulate_grad(*px, gx);
                     },
                     rec);
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean(const Tensor& x, std::size_t axis, bool keepdim) {
  check_axis(x, axis, "mean");
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(x.dim(axis)));
}

Tensor max(const Tensor& x, std::size_t axis, bool keepdim) {
  check_axis(x, axis, "max");
  const AxisSplit sp = split_axis(x.shape(), axis);
  std::vector<double> out(sp.outer * sp.inner, -std::numeric_limits<double>::infinity());
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size(), 0);
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t src = (o * sp.n + k) * sp.inner + i;
        const std::size_t dst = o * sp.inner + i;
        if (xd[src] > out[dst]) {
          out[dst] = xd[src];
          (*arg)[dst] = src;
        }
      }
  const bool rec = should_record({&x});
  ImplPtr px = x.impl_ptr();
  return make_result(reduced_shape(x.shape(), axis, keepdim), std::move(out), "max_axis", {px},
                     [px, arg](std::span<const double> g) {
                       std::vector<double> gx(px->data.size(), 0.0);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[(*arg)[i]] += g[i];
                       accumulate_grad(*px, gx);
                     },
                     rec);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  const bool rec = should_record({&x});
  ImplPtr px = x.impl_ptr();
  return make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), "reshape", {px},
                     [px](std::span<const double> g) { accumulate_grad(*px, g); }, rec);
}

Tensor transpose(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw ShapeError("transpose: permutation rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw ShapeError("transpose: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  const auto in_strides = row_major_strides(x.shape());
  // src index for each output flat index
  auto src = std::make_shared<std::vector<std::size_t>>(x.numel());
  {
    std::vector<std::size_t> counter(r, 0);
    std::size_t pos = 0;
    for (std::size_t k = 0; k < x.numel(); ++k) {
      (*src)[k] = pos;
      for (std::size_t ax = r; ax-- > 0;) {
        ++counter[ax];
        pos += in_strides[perm[ax]];
        if (counter[ax] < out_shape[ax]) break;
        pos -= in_strides[perm[ax]] * counter[ax];
        counter[ax] = 0;
      }
    }
  }
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = xd[(*src)[k]];
  const bool rec = should_record({&x});
  ImplPtr px = x.impl_ptr();
  return make_result(std::move(out_shape), std::move(out), "transpose", {px},
                     [px, src](std::span<const double> g) {
                       std::vector<double> gx(px->data.size());
                       for (std::size_t k = 0; k < g.size(); ++k) gx[(*src)[k]] = g[k];
                       accumulate_grad(*px, gx);
                     },
                     rec);
}

Tensor swap_axes(const Tensor& x, std::size_t a, std::size_t b) {
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), 0);
  check_axis(x, a, "swap_axes");
  check_axis(x, b, "swap_axes");
  std::swap(perm[a], perm[b]);
  return transpose(x, perm);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  check_axis(parts.front(), axis, "concat");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != ref.size()) throw ShapeError(shapes2("concat", ref, p.shape()));
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.dim(i) != ref[i]) throw ShapeError(shapes2("concat", ref, p.shape()));
    out_shape[axis] += p.dim(axis);
  }
  const AxisSplit sp = split_axis(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.dim(axis) * sp.inner;
    const auto pd = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pd.data() + o * w, w, out.data() + o * sp.n * sp.inner + offset);
    widths.push_back(w);
    offset += w;
  }
  const bool rec = should_record(parts);
  std::vector<ImplPtr> inputs;
  for (const Tensor& p : parts) inputs.push_back(p.impl_ptr());
  auto ins = inputs;
  return make_result(std::move(out_shape), std::move(out), "concat", std::move(inputs),
                     [ins, widths, sp](std::span<const double> g) {
                       std::size_t off = 0;
                       for (std::size_t t = 0; t < ins.size(); ++t) {
                         const std::size_t w = widths[t];
                         if (ins[t]->requires_grad) {
                           std::vector<double> gp(ins[t]->data.size());
                           for (std::size_t o = 0; o < sp.outer; ++o)
                             std::copy_n(g.data() + o * sp.n * sp.inner + off, w, gp.data() + o * w);
                           accumulate_grad(*ins[t], gp);
                         }
                         off += w;
                       }
                     },
                     rec);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  check_axis(x, axis, "slice");
  if (begin >= end || end > x.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     shape_str(x.shape()) + " axis " + std::to_string(axis));
  const AxisSplit sp = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t w = (end - begin) * sp.inner;
  std::vector<double> out(sp.outer * w);
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xd.data() + (o * sp.n + begin) * sp.inner, w, out.data() + o * w);
  const bool rec = should_record({&x});
  ImplPtr px = x.impl_ptr();
  return make_result(std::move(out_shape), std::move(out), "slice", {px},
                     [px, sp, w, begin](std::span<const double> g) {
                       std::vector<double> gx(px->data.size(), 0.0);
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         std::copy_n(g.data() + o * w, w, gx.data() + (o * sp.n + begin) * sp.inner);
                       accumulate_grad(*px, gx);
                     },
                     rec);
}

Tensor index_select(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& index) {
  check_axis(x, axis, "index_select");
  if (index.empty()) throw ShapeError("index_select: empty index");
  for (std::size_t i : index)
    if (i >= x.dim(axis)) throw ShapeError("index_select: index out of range for " + shape_str(x.shape()));
  const AxisSplit sp = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = index.size();
  const std::size_t m = index.size();
  std::vector<double> out(sp.outer * m * sp.inner);
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < m; ++k)
      std::copy_n(xd.data() + (o * sp.n + index[k]) * sp.inner, sp.inner, out.data() + (o * m + k) * sp.inner);
  const bool rec = should_record({&x});
  ImplPtr px = x.impl_ptr();
  return make_result(std::move(out_shape), std::move(out), "index_select", {px},
                     [px, sp, index, m](std::span<const double> g) {
                       std::vector<double> gx(px->data.size(), 0.0);
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         for (std::size_t k = 0; k < m; ++k) {
                           const double* src = g.data() + (o * m + k) * sp.inner;
                           double* dst = gx.data() + (o * sp.n + index[k]) * sp.inner;
                           for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
                         }
                       accumulate_grad(*px, gx);
                     },
                     rec);
}

Tensor flip(const Tensor& x, std::size_t axis) {
  check_axis(x, axis, "flip");
  std::vector<std::size_t> idx(x.dim(axis));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = idx.size() - 1 - i;
  return index_select(x, axis, idx);
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (broadcast_shape(x.shape(), shape) != shape)
    throw ShapeError(shapes2("broadcast_to", x.shape(), shape));
  return add(x, Tensor::zeros(shape));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2 || b.rank() > 3)
    throw ShapeError(shapes2("matmul", a.shape(), b.shape()));
  if (a.rank() > 3 && b.rank() == 3) throw ShapeError(shapes2("matmul", a.shape(), b.shape()));
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2);
  const std::size_t n = b.dim(b.rank() - 1);
  if (k != kb) throw ShapeError(shapes2("matmul", a.shape(), b.shape()));
  std::size_t batch_a = 1;
  for (std::size_t i = 0; i + 2 < a.rank(); ++i) batch_a *= a.dim(i);
  const std::size_t batch_b = b.rank() == 3 ? b.dim(0) : 1;
  if (batch_a != 1 && batch_b != 1 && batch_a != batch_b)
    throw ShapeError(shapes2("matmul", a.shape(), b.shape()));
  const std::size_t batch = std::max(batch_a, batch_b);
  Shape out_shape;
  if (a.rank() >= 3) {
    out_shape.assign(a.shape().begin(), a.shape().end() - 2);
  } else if (b.rank() == 3) {
    out_shape.push_back(batch_b);
  }
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  const std::size_t sa = batch_a == 1 ? 0 : m * k;
  const std::size_t sb = batch_b == 1 ? 0 : k * n;
  for (std::size_t t = 0; t < batch; ++t) gemm_nn(m, n, k, ad + t * sa, bd + t * sb, out.data() + t * m * n);
  const bool rec = should_record({&a, &b});
  ImplPtr pa = a.impl_ptr(), pb = b.impl_ptr();
  return make_result(std::move(out_shape), std::move(out), "matmul", {pa, pb},
                     [pa, pb, batch, m, n, k, sa, sb](std::span<const double> g) {
                       if (pa->requires_grad) {
                         std::vector<double> ga(pa->data.size(), 0.0);
                         for (std::size_t t = 0; t < batch; ++t)
                           gemm_nt(m, k, n, g.data() + t * m * n, pb->data.data() + t * sb, ga.data() + t * sa);
                         accumulate_grad(*pa, ga);
                       }
                       if (pb->requires_grad) {
                         std::vector<double> gb(pb->data.size(), 0.0);
                         for (std::size_t t = 0; t < batch; ++t)
                           gemm_tn(k, n, m, pa->data.data() + t * sa, g.data() + t * m * n, gb.data() + t * sb);
                         accumulate_grad(*pb, gb);
                       }
                     },
                     rec);
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.dim(x.rank() - 1) != weight.dim(1))
    throw ShapeError(shapes2("linear", x.shape(), weight.shape()));
  const std::size_t in = weight.dim(1), outf = weight.dim(0), rows = x.numel() / in;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outf))
    throw ShapeError(shapes2("linear bias", bias.shape(), weight.shape()));
  Shape out_shape = x.shape();
  out_shape.back() = outf;
  std::vector<double> out(rows * outf, 0.0);
  if (bias.defined())
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(bias.data().data(), outf, out.data() + r * outf);
  gemm_nt(rows, outf, in, x.data().data(), weight.data().data(), out.data());
  const bool rec = should_record({&x, &weight, &bias});
  ImplPtr px = x.impl_ptr(), pw = weight.impl_ptr();
  ImplPtr pb = bias.defined() ? bias.impl_ptr() : nullptr;
  std::vector<ImplPtr> inputs{px, pw};
  if (pb) inputs.push_back(pb);
  return make_result(std::move(out_shape), std::move(out), "linear", std::move(inputs),
                     [px, pw, pb, rows, in, outf](std::span<const double> g) {
                       if (px->requires_grad) {
                         std::vector<double> gx(px->data.size(), 0.0);
                         gemm_nn(rows, in, outf, g.data(), pw->data.data(), gx.data());
                         accumulate_grad(*px, gx);
                       }
                       if (pw->requires_grad) {
                         std::vector<double> gw(pw->data.size(), 0.0);
                         gemm_tn(outf, in, rows, g.data(), px->data.data(), gw.data());
                         accumulate_grad(*pw, gw);
                       }
                       if (pb && pb->requires_grad) {
                         std::vector<double> gb(outf, 0.0);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < outf; ++j) gb[j] += g[r * outf + j];
                         accumulate_grad(*pb, gb);
                       }
                     },
                     rec);
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  check_axis(x, axis, "softmax");
  const AxisSplit sp = split_axis(x.shape(), axis);
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, xd[base + k * sp.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const double e = std::exp(xd[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] /= z;
    }
  const bool rec = should_record({&x});
  ImplPtr px = x.impl_ptr();
  std::shared_ptr<std::vector<double>> y;
  if (rec) y = std::make_shared<std::vector<double>>(out);
  return make_result(x.shape(), std::move(out), "softmax", {px},
                     [px, y, sp](std::span<const double> g) {
                       std::vector<double> gx(px->data.size());
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         for (std::size_t i = 0; i < sp.inner; ++i) {
                           const std::size_t base = o * sp.n * sp.inner + i;
                           double dot = 0.0;
                           for (std::size_t k = 0; k < sp.n; ++k) {
                             const std::size_t j = base + k * sp.inner;
                             dot += g[j] * (*y)[j];
                           }
                           for (std::size_t k = 0; k < sp.n; ++k) {
                             const std::size_t j = base + k * sp.inner;
                             gx[j] = (*y)[j] * (g[j] - dot);
                           }
                         }
                       accumulate_grad(*px, gx);
                     },
                     rec);
}

namespace {

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, oh, ow;
  std::size_t kcols() const { return cin * kh * kw; }
  std::size_t opix() const { return oh * ow; }
};

void im2col(const ConvGeom& g, const double* x, double* cols) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.opix();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.ow + ox] = inside ? x[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : 0.0;
          }
        }
      }
}

void col2im(const ConvGeom& g, const double* cols, double* x) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.opix();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            x[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[oy * g.ow + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding) {
  if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1))
    throw ShapeError(shapes2("conv2d", x.shape(), weight.shape()));
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3), stride, padding, 0, 0};
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw)
    throw ShapeError(shapes2("conv2d", x.shape(), weight.shape()));
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout))
    throw ShapeError(shapes2("conv2d bias", bias.shape(), weight.shape()));

  const std::size_t kc = g.kcols(), op = g.opix();
  const bool rec = should_record({&x, &weight, &bias});
  auto cols_all = std::make_shared<std::vector<double>>();
  std::vector<double> cols_tmp(kc * op);
  if (rec) cols_all->resize(g.batch * kc * op);
  std::vector<double> out(g.batch * g.cout * op, 0.0);
  const double* xd = x.data().data();
  const double* wd = weight.data().data();
  for (std::size_t b = 0; b < g.batch; ++b) {
    double* cols = rec ? cols_all->data() + b * kc * op : cols_tmp.data();
    im2col(g, xd + b * g.cin * g.h * g.w, cols);
    double* o = out.data() + b * g.cout * op;
    if (bias.defined())
      for (std::size_t c = 0; c < g.cout; ++c) std::fill_n(o + c * op, op, bias.data()[c]);
    gemm_nn(g.cout, op, kc, wd, cols, o);
  }
  ImplPtr px = x.impl_ptr(), pw = weight.impl_ptr();
  ImplPtr pb = bias.defined() ? bias.impl_ptr() : nullptr;
  std::vector<ImplPtr> inputs{px, pw};
  if (pb) inputs.push_back(pb);
  return make_result({g.batch, g.cout, g.oh, g.ow}, std::move(out), "conv2d", std::move(inputs),
                     [px, pw, pb, g, cols_all, kc, op](std::span<const double> gout) {
                       std::vector<double> gw, gb, gx;
                       if (pw->requires_grad) gw.assign(pw->data.size(), 0.0);
                       if (pb && pb->requires_grad) gb.assign(pb->data.size(), 0.0);
                       if (px->requires_grad) gx.assign(px->data.size(), 0.0);
                       std::vector<double> gcols(px->requires_grad ? kc * op : 0);
                       for (std::size_t b = 0; b < g.batch; ++b) {
                         const double* go = gout.data() + b * g.cout * op;
                         const double* cols = cols_all->data() + b * kc * op;
                         if (!gw.empty()) gemm_nt(g.cout, kc, op, go, cols, gw.data());
                         if (!gb.empty())
                           for (std::size_t c = 0; c < g.cout; ++c)
                             for (std::size_t p = 0; p < op; ++p) gb[c] += go[c * op + p];
                         if (!gx.empty()) {
                           std::fill(gcols.begin(), gcols.end(), 0.0);
                           gemm_tn(kc, op, g.cout, pw->data.data(), go, gcols.data());
                           col2im(g, gcols.data(), gx.data() + b * g.cin * g.h * g.w);
                         }
                       }
                       if (!gw.empty()) accumulate_grad(*pw, gw);
                       if (!gb.empty()) accumulate_grad(*pb, gb);
                       if (!gx.empty()) accumulate_grad(*px, gx);
                     },
                     rec);
}

namespace {
struct LerpTap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<LerpTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace

Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 4) throw ShapeError("upsample_bilinear: expected [B,C,H,W], got " + shape_str(x.shape()));
  if (out_h == 0 || out_w == 0) throw ShapeError("upsample_bilinear: empty output size");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  auto ty = std::make_shared<std::vector<LerpTap>>(bilinear_taps(h, out_h));
  auto tx = std::make_shared<std::vector<LerpTap>>(bilinear_taps(w, out_w));
  std::vector<double> out(planes * out_h * out_w);
  const double* xd = x.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = xd + p * h * w;
    double* dst = out.data() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const LerpTap& a = (*ty)[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const LerpTap& b = (*tx)[ox];
        const double top = src[a.i0 * w + b.i0] * (1 - b.w1) + src[a.i0 * w + b.i1] * b.w1;
        const double bot = src[a.i1 * w + b.i0] * (1 - b.w1) + src[a.i1 * w + b.i1] * b.w1;
        dst[oy * out_w + ox] = top * (1 - a.w1) + bot * a.w1;
      }
    }
  }
  const bool rec = should_record({&x});
  ImplPtr px = x.impl_ptr();
  return make_result({x.dim(0), x.dim(1), out_h, out_w}, std::move(out), "upsample_bilinear", {px},
                     [px, ty, tx, planes, h, w, out_h, out_w](std::span<const double> g) {
                       std::vector<double> gx(px->data.size(), 0.0);
                       for (std::size_t p = 0; p < planes; ++p) {
                         double* dst = gx.data() + p * h * w;
                         const double* go = g.data() + p * out_h * out_w;
                         for (std::size_t oy = 0; oy < out_h; ++oy) {
                           const LerpTap& a = (*ty)[oy];
                           for (std::size_t ox = 0; ox < out_w; ++ox) {
                             const LerpTap& b = (*tx)[ox];
                             const double v = go[oy * out_w + ox];
                             dst[a.i0 * w + b.i0] += v * (1 - a.w1) * (1 - b.w1);
                             dst[a.i0 * w + b.i1] += v * (1 - a.w1) * b.w1;
                             dst[a.i1 * w + b.i0] += v * a.w1 * (1 - b.w1);
                             dst[a.i1 * w + b.i1] += v * a.w1 * b.w1;
                           }
                         }
                       }
                       accumulate_grad(*px, gx);
                     },
                     rec);
}

namespace {
Tensor pool2d(const Tensor& x, std::size_t kh, std::size_t kw, std::size_t sh, std::size_t sw, bool is_max) {
  const char* name = is_max ? "max_pool2d" : "avg_pool2d";
  if (x.rank() != 4) throw ShapeError(std::string(name) + ": expected [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > h || kw > w)
    throw ShapeError(std::string(name) + ": window does not fit " + shape_str(x.shape()));
  const std::size_t oh = (h - kh) / sh + 1, ow = (w - kw) / sw + 1;
  std::vector<double> out(planes * oh * ow);
  auto arg = std::make_shared<std::vector<std::size_t>>(is_max ? out.size() : 0);
  const double* xd = x.data().data();
  const double inv = 1.0 / static_cast<double>(kh * kw);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t o = (p * oh + oy) * ow + ox;
        double acc = is_max ? -std::numeric_limits<double>::infinity() : 0.0;
        std::size_t best = 0;
        for (std::size_t i = 0; i < kh; ++i)
          for (std::size_t j = 0; j < kw; ++j) {
            const std::size_t src = (p * h + oy * sh + i) * w + ox * sw + j;
            if (is_max) {
              if (xd[src] > acc) {
                acc = xd[src];
                best = src;
              }
            } else {
              acc += xd[src];
            }
          }
        out[o] = is_max ? acc : acc * inv;
        if (is_max) (*arg)[o] = best;
      }
  const bool rec = should_record({&x});
  ImplPtr px = x.impl_ptr();
  return make_result({x.dim(0), x.dim(1), oh, ow}, std::move(out), name, {px},
                     [px, arg, is_max, planes, h, w, oh, ow, kh, kw, sh, sw, inv](std::span<const double> g) {
                       std::vector<double> gx(px->data.size(), 0.0);
                       for (std::size_t p = 0; p < planes; ++p)
                         for (std::size_t oy = 0; oy < oh; ++oy)
                           for (std::size_t ox = 0; ox < ow; ++ox) {
                             const std::size_t o = (p * oh + oy) * ow + ox;
                             if (is_max) {
                               gx[(*arg)[o]] += g[o];
                               continue;
                             }
                             for (std::size_t i = 0; i < kh; ++i)
                               for (std::size_t j = 0; j < kw; ++j)
                                 gx[(p * h + oy * sh + i) * w + ox * sw + j] += g[o] * inv;
                           }
                       accumulate_grad(*px, gx);
                     },
                     rec);
}
}  // namespace

Tensor max_pool2d(const Tensor& x, std::size_t kh, std::size_t kw, std::size_t sh, std::size_t sw) {
  return pool2d(x, kh, kw, sh, sw, true);
}

Tensor avg_pool2d(const Tensor& x, std::size_t kh, std::size_t kw, std::size_t sh, std::size_t sw) {
  return pool2d(x, kh, kw, sh, sw, false);
}

namespace {

// Shared normalization kernel: `groups` rows of length `len`; the affine
// parameter index of element j in row r is given by `channel_of(r, j)`.
template <class ChannelOf>
Tensor normalize_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps, std::size_t rows,
                      std::size_t len, ChannelOf channel_of, const char* name) {
  std::vector<double> out(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const double* xd = x.data().data();
  const double* gd = gamma.data().data();
  const double* bd = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd + r * len;
    double mu = 0.0;
    for (std::size_t j = 0; j < len; ++j) mu += row[j];
    mu /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t j = 0; j < len; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(len);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < len; ++j) {
      const double xh = (row[j] - mu) * rs;
      (*xhat)[r * len + j] = xh;
      const std::size_t c = channel_of(r, j);
      out[r * len + j] = xh * gd[c] + bd[c];
    }
  }
  const bool rec = should_record({&x, &gamma, &beta});
  ImplPtr px = x.impl_ptr(), pg = gamma.impl_ptr(), pb = beta.impl_ptr();
  return make_result(x.shape(), std::move(out), name, {px, pg, pb},
                     [px, pg, pb, xhat, rstd, rows, len, channel_of](std::span<const double> g) {
                       std::vector<double> gg(pg->requires_grad ? pg->data.size() : 0, 0.0);
                       std::vector<double> gbeta(pb->requires_grad ? pb->data.size() : 0, 0.0);
                       std::vector<double> gx(px->requires_grad ? px->data.size() : 0, 0.0);
                       std::vector<double> dxh(len);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double m1 = 0.0, m2 = 0.0;
                         for (std::size_t j = 0; j < len; ++j) {
                           const std::size_t i = r * len + j;
                           const std::size_t c = channel_of(r, j);
                           if (!gg.empty()) gg[c] += g[i] * (*xhat)[i];
                           if (!gbeta.empty()) gbeta[c] += g[i];
                           dxh[j] = g[i] * pg->data[c];
                           m1 += dxh[j];
                           m2 += dxh[j] * (*xhat)[i];
                         }
                         if (gx.empty()) continue;
                         m1 /= static_cast<double>(len);
                         m2 /= static_cast<double>(len);
                         for (std::size_t j = 0; j < len; ++j) {
                           const std::size_t i = r * len + j;
                           gx[i] = (*rstd)[r] * (dxh[j] - m1 - (*xhat)[i] * m2);
                         }
                       }
                       if (!gg.empty()) accumulate_grad(*pg, gg);
                       if (!gbeta.empty()) accumulate_grad(*pb, gbeta);
                       if (!gx.empty()) accumulate_grad(*px, gx);
                     },
                     rec);
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t c = x.dim(x.rank() - 1);
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError(shapes2("layer_norm", x.shape(), gamma.shape()));
  return normalize_rows(
      x, gamma, beta, eps, x.numel() / c, c, [](std::size_t, std::size_t j) { return j; }, "layer_norm");
}

Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() != 4) throw ShapeError("group_norm: expected [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups == 0 || c % groups != 0)
    throw ShapeError("group_norm: " + std::to_string(groups) + " groups do not divide " + std::to_string(c) +
                     " channels");
  if (gamma.numel() != c || beta.numel() != c) throw ShapeError(shapes2("group_norm", x.shape(), gamma.shape()));
  const std::size_t per = c / groups;
  const std::size_t len = per * hw;
  return normalize_rows(
      x, gamma, beta, eps, x.dim(0) * groups, len,
      [groups, per, hw](std::size_t r, std::size_t j) { return (r % groups) * per + j / hw; }, "group_norm");
}

Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& A, const Tensor& B, const Tensor& C) {
  if (x.rank() != 3 || delta.shape() != x.shape() || A.rank() != 2 || A.dim(0) != x.dim(2) || B.rank() != 3 ||
      C.shape() != B.shape() || B.dim(0) != x.dim(0) || B.dim(1) != x.dim(1) || B.dim(2) != A.dim(1))
    throw ShapeError("selective_scan: inconsistent shapes x" + shape_str(x.shape()) + " delta" +
                     shape_str(delta.shape()) + " A" + shape_str(A.shape()) + " B" + shape_str(B.shape()) + " C" +
                     shape_str(C.shape()));
  const std::size_t nb = x.dim(0), T = x.dim(1), D = x.dim(2), S = A.dim(1);
  const double* xd = x.data().data();
  const double* dd = delta.data().data();
  const double* ad = A.data().data();
  const double* bd = B.data().data();
  const double* cd = C.data().data();
  const bool rec = should_record({&x, &delta, &A, &B, &C});
  // hist[b][t][d][s] = h_t, kept for the backward pass.
  auto hist = std::make_shared<std::vector<double>>(rec ? nb * T * D * S : 0);
  std::vector<double> h(D * S);
  std::vector<double> out(nb * T * D);
  for (std::size_t b = 0; b < nb; ++b) {
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t bt = b * T + t;
      for (std::size_t d = 0; d < D; ++d) {
        const double dl = dd[bt * D + d];
        const double u = dl * xd[bt * D + d];
        double y = 0.0;
        for (std::size_t s = 0; s < S; ++s) {
          double& hv = h[d * S + s];
          hv = std::exp(dl * ad[d * S + s]) * hv + u * bd[bt * S + s];
          y += cd[bt * S + s] * hv;
        }
        out[bt * D + d] = y;
      }
      if (rec) std::copy(h.begin(), h.end(), hist->begin() + static_cast<std::ptrdiff_t>(bt * D * S));
    }
  }
  ImplPtr px = x.impl_ptr(), pd = delta.impl_ptr(), pa = A.impl_ptr(), pB = B.impl_ptr(), pC = C.impl_ptr();
  return make_result(x.shape(), std::move(out), "selective_scan", {px, pd, pa, pB, pC},
                     [px, pd, pa, pB, pC, hist, nb, T, D, S](std::span<const double> gy) {
                       std::vector<double> gx(px->data.size(), 0.0), gd(pd->data.size(), 0.0),
                           gA(pa->data.size(), 0.0), gB(pB->data.size(), 0.0), gC(pC->data.size(), 0.0);
                       const double* xd = px->data.data();
                       const double* dd = pd->data.data();
                       const double* ad = pa->data.data();
                       const double* bd = pB->data.data();
                       const double* cd = pC->data.data();
                       // gh carries dL/dh_t; decay_next holds a_{t+1} for the carry.
                       std::vector<double> gh(D * S), decay_next(D * S);
                       for (std::size_t b = 0; b < nb; ++b) {
                         std::fill(gh.begin(), gh.end(), 0.0);
                         std::fill(decay_next.begin(), decay_next.end(), 0.0);
                         for (std::size_t t = T; t-- > 0;) {
                           const std::size_t bt = b * T + t;
                           const double* ht = hist->data() + bt * D * S;
                           const double* hprev = t > 0 ? hist->data() + (bt - 1) * D * S : nullptr;
                           for (std::size_t d = 0; d < D; ++d) {
                             const double g = gy[bt * D + d];
                             const double dl = dd[bt * D + d];
                             const double xv = xd[bt * D + d];
                             double gdl = 0.0, gxv = 0.0;
                             for (std::size_t s = 0; s < S; ++s) {
                               const std::size_t i = d * S + s;
                               gC[bt * S + s] += g * ht[i];
                               double& gi = gh[i];
                               gi = gi * decay_next[i] + g * cd[bt * S + s];
                               const double a = std::exp(dl * ad[i]);
                               const double hp = hprev ? hprev[i] : 0.0;
                               // d h_t / d delta = a*A*h_{t-1} + B*x
                               gdl += gi * (a * ad[i] * hp + bd[bt * S + s] * xv);
                               gA[i] += gi * a * dl * hp;
                               gB[bt * S + s] += gi * dl * xv;
                               gxv += gi * dl * bd[bt * S + s];
                               decay_next[i] = a;
                             }
                             gd[bt * D + d] += gdl;
                             gx[bt * D + d] += gxv;
                           }
                         }
                       }
                       accumulate_grad(*px, gx);
                       accumulate_grad(*pd, gd);
                       accumulate_grad(*pa, gA);
                       accumulate_grad(*pB, gB);
                       accumulate_grad(*pC, gC);
                     },
                     rec);
}

Tensor detach(const Tensor& x) { return x.clone(); }

}  // namespace ppg
