#include "iba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>

namespace iba {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

int input_id(const Tensor& t, const Tape* tape) {
  return (tape && t.tape_id() == tape->id()) ? t.node() : -1;
}

Tensor finish(OpKind kind, const std::vector<const Tensor*>& ins, Tensor out,
              std::vector<Tensor> saved = {}, OpAttrs attrs = {}) {
  if (nonfinite_checks_enabled()) check_finite(out, op_name(kind));
  Tape* tape = Tape::current();
  if (tape) {
    bool any = false;
    std::vector<int> ids;
    ids.reserve(ins.size());
    for (const Tensor* t : ins) {
      int id = input_id(*t, tape);
      any = any || id >= 0;
      ids.push_back(id);
    }
    if (any) {
      int node = tape->emit(kind, std::move(ids), std::move(saved), out.shape(), std::move(attrs));
      return out.traced(tape->id(), node);
    }
  }
  return out;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ValueError(std::string(op) + ": undefined input tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// c[M,P] += a[M,K] * b[K,P], k ascending per output element.
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      const double* brow = b + kk * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
    }
  }
}

// da[M,K] += g[M,P] * b[K,P]^T
void gemm_gbt_acc(const double* g, const double* b, double* da, std::size_t m, std::size_t k,
                  std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * p;
    double* darow = da + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double* brow = b + kk * p;
      double s = 0.0;
      for (std::size_t j = 0; j < p; ++j) s += grow[j] * brow[j];
      darow[kk] += s;
    }
  }
}

// db[K,P] += a[M,K]^T * g[M,P]
void gemm_atg_acc(const double* a, const double* g, double* db, std::size_t m, std::size_t k,
                  std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      double* dbrow = db + kk * p;
      for (std::size_t j = 0; j < p; ++j) dbrow[j] += aik * grow[j];
    }
  }
}

struct MatPlan {
  std::size_t m = 0, k = 0, p = 0;
  std::size_t slices = 1;
  std::vector<std::size_t> out_lead;
  std::vector<std::size_t> a_step, b_step;  // slice-index contribution per lead dim
  Shape out_shape;
};

MatPlan plan_matmul(const Shape& as, const Shape& bs) {
  if (as.size() < 2 || bs.size() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(as) + " x " +
                     shape_str(bs));
  }
  MatPlan plan;
  plan.m = as[as.size() - 2];
  plan.k = as.back();
  const std::size_t k2 = bs[bs.size() - 2];
  plan.p = bs.back();
  if (plan.k != k2) {
    throw ShapeError("matmul inner dims disagree: " + shape_str(as) + " x " + shape_str(bs));
  }
  const std::size_t la = as.size() - 2, lb = bs.size() - 2;
  const std::size_t l = std::max(la, lb);
  std::vector<std::size_t> pa(l, 1), pb(l, 1);
  for (std::size_t i = 0; i < la; ++i) pa[l - la + i] = as[i];
  for (std::size_t i = 0; i < lb; ++i) pb[l - lb + i] = bs[i];
  plan.out_lead.resize(l);
  for (std::size_t i = 0; i < l; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw ShapeError("matmul leading dims incompatible: " + shape_str(as) + " x " +
                       shape_str(bs));
    }
    plan.out_lead[i] = std::max(pa[i], pb[i]);
    plan.slices *= plan.out_lead[i];
  }
  plan.a_step.assign(l, 0);
  plan.b_step.assign(l, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = l; i-- > 0;) {
    plan.a_step[i] = (pa[i] == 1) ? 0 : sa;
    plan.b_step[i] = (pb[i] == 1) ? 0 : sb;
    sa *= pa[i];
    sb *= pb[i];
  }
  plan.out_shape = plan.out_lead;
  plan.out_shape.push_back(plan.m);
  plan.out_shape.push_back(plan.p);
  return plan;
}

void matmul_slice_offsets(const MatPlan& plan, std::size_t slice, std::size_t* a_slice,
                          std::size_t* b_slice) {
  std::size_t rem = slice, ai = 0, bi = 0;
  for (std::size_t i = plan.out_lead.size(); i-- > 0;) {
    const std::size_t digit = rem % plan.out_lead[i];
    rem /= plan.out_lead[i];
    ai += digit * plan.a_step[i];
    bi += digit * plan.b_step[i];
  }
  *a_slice = ai;
  *b_slice = bi;
}

std::vector<std::size_t> row_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

std::vector<double> permute_vals(const std::vector<double>& xv, const Shape& in_shape,
                                 const std::vector<std::size_t>& axes) {
  const std::size_t r = in_shape.size();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
  const auto in_st = row_strides(in_shape);
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) step[i] = in_st[axes[i]];
  std::vector<double> out(xv.size());
  std::vector<std::size_t> idx(r, 0);
  std::size_t in_flat = 0;
  for (std::size_t o = 0; o < out.size(); ++o) {
    out[o] = xv[in_flat];
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      in_flat += step[d];
      if (idx[d] < out_shape[d]) break;
      in_flat -= idx[d] * step[d];
      idx[d] = 0;
    }
  }
  return out;
}

std::vector<std::size_t> inverse_axes(const std::vector<std::size_t>& axes) {
  std::vector<std::size_t> inv(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = i;
  return inv;
}

struct UnfoldDims {
  std::size_t b, c, h, w, k, s, p, oh, ow;
};

UnfoldDims unfold_dims_from(const Shape& xs, std::size_t kernel, std::size_t stride,
                            std::size_t pad) {
  if (xs.size() != 4) throw ShapeError("unfold_patches needs [B,C,H,W], got " + shape_str(xs));
  if (kernel == 0 || stride == 0) throw ValueError("unfold_patches: kernel and stride must be positive");
  UnfoldDims d{xs[0], xs[1], xs[2], xs[3], kernel, stride, pad, 0, 0};
  if (d.h + 2 * pad < kernel || d.w + 2 * pad < kernel) {
    throw ShapeError("unfold_patches: kernel larger than padded input " + shape_str(xs));
  }
  d.oh = (d.h + 2 * pad - kernel) / stride + 1;
  d.ow = (d.w + 2 * pad - kernel) / stride + 1;
  return d;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  require_same_shape(a, b, "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return finish(OpKind::kAdd, {&a, &b}, Tensor(a.shape(), std::move(out)));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  require_same_shape(a, b, "sub");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  return finish(OpKind::kSub, {&a, &b}, Tensor(a.shape(), std::move(out)));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  require_same_shape(a, b, "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  return finish(OpKind::kMul, {&a, &b}, Tensor(a.shape(), std::move(out)), {a, b});
}

Tensor scale(const Tensor& x, double c) {
  require_defined(x, "scale");
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * c;
  OpAttrs attrs;
  attrs.reals.push_back(c);
  return finish(OpKind::kScale, {&x}, Tensor(x.shape(), std::move(out)), {}, std::move(attrs));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  const MatPlan plan = plan_matmul(a.shape(), b.shape());
  std::vector<double> out(shape_size(plan.out_shape), 0.0);
  const double* ad = a.data();
  const double* bd = b.data();
  for (std::size_t s = 0; s < plan.slices; ++s) {
    std::size_t ai, bi;
    matmul_slice_offsets(plan, s, &ai, &bi);
    gemm_acc(ad + ai * plan.m * plan.k, bd + bi * plan.k * plan.p, out.data() + s * plan.m * plan.p,
             plan.m, plan.k, plan.p);
  }
  return finish(OpKind::kMatmul, {&a, &b}, Tensor(plan.out_shape, std::move(out)), {a, b});
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_defined(x, "linear");
  require_defined(w, "linear");
  require_defined(b, "linear");
  if (x.rank() < 1 || w.rank() != 2 || b.rank() != 1) {
    throw ShapeError("linear: expected x[...,d_in], w[d_in,d_out], b[d_out], got " +
                     shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                     shape_str(b.shape()));
  }
  const std::size_t din = x.shape().back();
  const std::size_t dout = w.dim(1);
  if (w.dim(0) != din || b.dim(0) != dout) {
    throw ShapeError("linear: dims disagree for x " + shape_str(x.shape()) + ", w " +
                     shape_str(w.shape()) + ", b " + shape_str(b.shape()));
  }
  const std::size_t rows = x.size() / din;
  std::vector<double> out(rows * dout);
  const double* bd = b.data();
  for (std::size_t r = 0; r < rows; ++r) std::memcpy(out.data() + r * dout, bd, dout * sizeof(double));
  gemm_acc(x.data(), w.data(), out.data(), rows, din, dout);
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  return finish(OpKind::kLinear, {&x, &w, &b}, Tensor(std::move(out_shape), std::move(out)),
                {x, w});
}

Tensor softmax_lastdim(const Tensor& x) {
  require_defined(x, "softmax_lastdim");
  if (x.rank() < 1) throw ShapeError("softmax_lastdim needs rank >= 1");
  const std::size_t l = x.shape().back();
  const std::size_t rows = x.size() / l;
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * l;
    double* orow = out.data() + r * l;
    double mx = row[0];
    for (std::size_t j = 1; j < l; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < l; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < l; ++j) orow[j] *= inv;
  }
  Tensor y(x.shape(), std::move(out));
  return finish(OpKind::kSoftmaxLast, {&x}, y, {y});
}

Tensor layer_norm_lastdim(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_defined(x, "layer_norm_lastdim");
  require_defined(gamma, "layer_norm_lastdim");
  require_defined(beta, "layer_norm_lastdim");
  if (x.rank() < 1) throw ShapeError("layer_norm_lastdim needs rank >= 1");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm_lastdim: gamma/beta must be [" + std::to_string(d) + "], got " +
                     shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  const std::size_t rows = x.size() / d;
  const auto& xv = x.values();
  const double* gd = gamma.data();
  const double* betad = beta.data();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mu) * inv;
      xhat[r * d + j] = xh;
      out[r * d + j] = gd[j] * xh + betad[j];
    }
  }
  OpAttrs attrs;
  attrs.reals.push_back(eps);
  Tensor xhat_t(x.shape(), std::move(xhat));
  Tensor inv_t(Shape{rows}, std::move(inv_std));
  return finish(OpKind::kLayerNormLast, {&x, &gamma, &beta}, Tensor(x.shape(), std::move(out)),
                {xhat_t, inv_t, gamma}, std::move(attrs));
}

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
  }
  return finish(OpKind::kGelu, {&x}, Tensor(x.shape(), std::move(out)), {x});
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return finish(OpKind::kReshape, {&x}, x.reshaped(std::move(shape)));
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  require_defined(x, "permute");
  const std::size_t r = x.rank();
  if (axes.size() != r) throw ShapeError("permute: axes rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> seen(r, false);
  for (std::size_t a : axes) {
    if (a >= r || seen[a]) throw ValueError("permute: axes must be a permutation");
    seen[a] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.shape()[axes[i]];
  std::vector<double> out = permute_vals(x.values(), x.shape(), axes);
  OpAttrs attrs;
  for (std::size_t a : axes) attrs.ints.push_back(static_cast<std::int64_t>(a));
  return finish(OpKind::kPermute, {&x}, Tensor(std::move(out_shape), std::move(out)), {},
                std::move(attrs));
}

Tensor reference_batch(const Tensor& x) {
  require_defined(x, "reference_batch");
  if (x.rank() < 1) throw ShapeError("reference_batch needs rank >= 1");
  const std::size_t b = x.shape()[0];
  const auto& xv = x.values();
  std::vector<double> out;
  if (b == 1) {
    out = xv;
  } else {
    const std::size_t rest = x.size() / b;
    std::vector<double> sum(rest, 0.0);
    for (std::size_t i = 0; i < b; ++i) {
      const double* row = xv.data() + i * rest;
      for (std::size_t r = 0; r < rest; ++r) sum[r] += row[r];
    }
    const double inv = 1.0 / static_cast<double>(b - 1);
    out.resize(xv.size());
    for (std::size_t i = 0; i < b; ++i) {
      const double* row = xv.data() + i * rest;
      double* orow = out.data() + i * rest;
      for (std::size_t r = 0; r < rest; ++r) orow[r] = (sum[r] - row[r]) * inv;
    }
  }
  return finish(OpKind::kReferenceBatch, {&x}, Tensor(x.shape(), std::move(out)));
}

Tensor sum_axis0_keepdim(const Tensor& x) {
  require_defined(x, "sum_axis0_keepdim");
  if (x.rank() < 1) throw ShapeError("sum_axis0_keepdim needs rank >= 1");
  const std::size_t b = x.shape()[0];
  const std::size_t rest = x.size() / b;
  const auto& xv = x.values();
  std::vector<double> out(rest, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = xv.data() + i * rest;
    for (std::size_t r = 0; r < rest; ++r) out[r] += row[r];
  }
  Shape out_shape = x.shape();
  out_shape[0] = 1;
  OpAttrs attrs;
  attrs.ints.push_back(static_cast<std::int64_t>(b));
  return finish(OpKind::kSumBatch, {&x}, Tensor(std::move(out_shape), std::move(out)), {},
                std::move(attrs));
}

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ValueError("concat_lastdim: no inputs");
  for (const Tensor& p : parts) require_defined(p, "concat_lastdim");
  const Shape& first = parts[0].shape();
  if (first.empty()) throw ShapeError("concat_lastdim needs rank >= 1");
  std::size_t total_last = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size()) {
      throw ShapeError("concat_lastdim: rank mismatch " + shape_str(first) + " vs " +
                       shape_str(p.shape()));
    }
    for (std::size_t i = 0; i + 1 < first.size(); ++i) {
      if (p.shape()[i] != first[i]) {
        throw ShapeError("concat_lastdim: leading dims differ " + shape_str(first) + " vs " +
                         shape_str(p.shape()));
      }
    }
    total_last += p.shape().back();
  }
  Shape out_shape = first;
  out_shape.back() = total_last;
  const std::size_t lead = shape_size(out_shape) / total_last;
  std::vector<double> out(lead * total_last);
  std::size_t col = 0;
  OpAttrs attrs;
  for (const Tensor& p : parts) {
    const std::size_t d = p.shape().back();
    attrs.ints.push_back(static_cast<std::int64_t>(d));
    const double* pv = p.data();
    for (std::size_t l = 0; l < lead; ++l) {
      std::memcpy(out.data() + l * total_last + col, pv + l * d, d * sizeof(double));
    }
    col += d;
  }
  std::vector<const Tensor*> ins;
  ins.reserve(parts.size());
  for (const Tensor& p : parts) ins.push_back(&p);
  return finish(OpKind::kConcatLast, ins, Tensor(std::move(out_shape), std::move(out)), {},
                std::move(attrs));
}

Tensor mean_all(const Tensor& x) {
  require_defined(x, "mean_all");
  const auto& xv = x.values();
  double s = 0.0;
  for (double v : xv) s += v;
  return finish(OpKind::kMeanAll, {&x}, Tensor::scalar(s / static_cast<double>(xv.size())));
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels) {
  require_defined(logits, "cross_entropy_mean");
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy_mean: logits must be [M,C], got " + shape_str(logits.shape()));
  }
  const std::size_t m = logits.dim(0);
  const std::size_t c = logits.dim(1);
  if (labels.size() != m) {
    throw ShapeError("cross_entropy_mean: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(m) + " rows");
  }
  const auto& xv = logits.values();
  std::vector<double> probs(xv.size());
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ValueError("cross_entropy_mean: label " + std::to_string(y) + " out of range [0," +
                       std::to_string(c) + ") at row " + std::to_string(i));
    }
    const double* row = xv.data() + i * c;
    double* prow = probs.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      prow[j] = std::exp(row[j] - mx);
      sum += prow[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < c; ++j) prow[j] *= inv;
    total += std::log(sum) + mx - row[y];
  }
  OpAttrs attrs;
  attrs.ints.reserve(labels.size());
  for (int y : labels) attrs.ints.push_back(y);
  Tensor probs_t(logits.shape(), std::move(probs));
  return finish(OpKind::kCrossEntropy, {&logits},
                Tensor::scalar(total / static_cast<double>(m)), {probs_t}, std::move(attrs));
}

Tensor unfold_patches(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  require_defined(x, "unfold_patches");
  const UnfoldDims d = unfold_dims_from(x.shape(), kernel, stride, pad);
  const auto& xv = x.values();
  std::vector<double> out(d.b * d.oh * d.ow * d.c * d.k * d.k, 0.0);
  const std::size_t patch = d.c * d.k * d.k;
  for (std::size_t b = 0; b < d.b; ++b) {
    for (std::size_t oy = 0; oy < d.oh; ++oy) {
      for (std::size_t ox = 0; ox < d.ow; ++ox) {
        double* orow = out.data() + ((b * d.oh + oy) * d.ow + ox) * patch;
        for (std::size_t c = 0; c < d.c; ++c) {
          for (std::size_t ki = 0; ki < d.k; ++ki) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * d.s + ki) - static_cast<std::ptrdiff_t>(d.p);
            for (std::size_t kj = 0; kj < d.k; ++kj) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * d.s + kj) - static_cast<std::ptrdiff_t>(d.p);
              if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(d.h) && ix >= 0 &&
                  ix < static_cast<std::ptrdiff_t>(d.w)) {
                orow[(c * d.k + ki) * d.k + kj] =
                    xv[((b * d.c + c) * d.h + static_cast<std::size_t>(iy)) * d.w +
                       static_cast<std::size_t>(ix)];
              }
            }
          }
        }
      }
    }
  }
  OpAttrs attrs;
  for (std::size_t v : {d.b, d.c, d.h, d.w, d.k, d.s, d.p}) {
    attrs.ints.push_back(static_cast<std::int64_t>(v));
  }
  return finish(OpKind::kUnfold, {&x},
                Tensor(Shape{d.b, d.oh * d.ow, patch}, std::move(out)), {}, std::move(attrs));
}

namespace {

struct LerpAxis {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w;
};

LerpAxis lerp_axis(std::size_t in, std::size_t factor) {
  const std::size_t out = in * factor;
  LerpAxis ax;
  ax.i0.resize(out);
  ax.i1.resize(out);
  ax.w.resize(out);
  const double inv = 1.0 / static_cast<double>(factor);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * inv - 0.5;
    if (src < 0.0) src = 0.0;
    const double hi = static_cast<double>(in - 1);
    if (src > hi) src = hi;
    const std::size_t lo = static_cast<std::size_t>(src);
    ax.i0[o] = lo;
    ax.i1[o] = std::min(lo + 1, in - 1);
    ax.w[o] = src - static_cast<double>(lo);
  }
  return ax;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, std::size_t factor) {
  require_defined(x, "upsample_bilinear");
  if (x.rank() != 4) {
    throw ShapeError("upsample_bilinear needs [B,C,H,W], got " + shape_str(x.shape()));
  }
  if (factor == 0) throw ValueError("upsample_bilinear: factor must be positive");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (factor == 1) {
    // Identity mapping; still recorded so gradients flow.
    OpAttrs attrs;
    attrs.ints = {static_cast<std::int64_t>(b), static_cast<std::int64_t>(c),
                  static_cast<std::int64_t>(h), static_cast<std::int64_t>(w), 1};
    return finish(OpKind::kUpsampleBilinear, {&x}, Tensor(x.shape(), x.values()), {},
                  std::move(attrs));
  }
  const LerpAxis ay = lerp_axis(h, factor);
  const LerpAxis axx = lerp_axis(w, factor);
  const std::size_t oh = h * factor, ow = w * factor;
  const auto& xv = x.values();
  std::vector<double> out(b * c * oh * ow);
  for (std::size_t bc = 0; bc < b * c; ++bc) {
    const double* plane = xv.data() + bc * h * w;
    double* oplane = out.data() + bc * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      const double wy = ay.w[y];
      const double* r0 = plane + ay.i0[y] * w;
      const double* r1 = plane + ay.i1[y] * w;
      double* orow = oplane + y * ow;
      for (std::size_t xo = 0; xo < ow; ++xo) {
        const double wx = axx.w[xo];
        const double top = r0[axx.i0[xo]] * (1.0 - wx) + r0[axx.i1[xo]] * wx;
        const double bot = r1[axx.i0[xo]] * (1.0 - wx) + r1[axx.i1[xo]] * wx;
        orow[xo] = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  OpAttrs attrs;
  attrs.ints = {static_cast<std::int64_t>(b), static_cast<std::int64_t>(c),
                static_cast<std::int64_t>(h), static_cast<std::int64_t>(w),
                static_cast<std::int64_t>(factor)};
  return finish(OpKind::kUpsampleBilinear, {&x}, Tensor(Shape{b, c, oh, ow}, std::move(out)), {},
                std::move(attrs));
}

namespace {

using Sink = std::function<std::vector<double>&(int)>;

void backward_node(const TapeNode& n, const std::vector<double>& g, const Sink& sink) {
  switch (n.kind) {
    case OpKind::kLeaf:
      break;
    case OpKind::kAdd: {
      for (int which = 0; which < 2; ++which) {
        if (n.inputs[which] < 0) continue;
        auto& acc = sink(n.inputs[which]);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
      }
      break;
    }
    case OpKind::kSub: {
      if (n.inputs[0] >= 0) {
        auto& acc = sink(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
      }
      if (n.inputs[1] >= 0) {
        auto& acc = sink(n.inputs[1]);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] -= g[i];
      }
      break;
    }
    case OpKind::kMul: {
      const auto& av = n.saved[0].values();
      const auto& bv = n.saved[1].values();
      if (n.inputs[0] >= 0) {
        auto& acc = sink(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * bv[i];
      }
      if (n.inputs[1] >= 0) {
        auto& acc = sink(n.inputs[1]);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * av[i];
      }
      break;
    }
    case OpKind::kScale: {
      if (n.inputs[0] >= 0) {
        const double c = n.attrs.reals[0];
        auto& acc = sink(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * c;
      }
      break;
    }
    case OpKind::kMatmul: {
      const Tensor& a = n.saved[0];
      const Tensor& b = n.saved[1];
      const MatPlan plan = plan_matmul(a.shape(), b.shape());
      for (std::size_t s = 0; s < plan.slices; ++s) {
        std::size_t ai, bi;
        matmul_slice_offsets(plan, s, &ai, &bi);
        const double* gs = g.data() + s * plan.m * plan.p;
        if (n.inputs[0] >= 0) {
          gemm_gbt_acc(gs, b.data() + bi * plan.k * plan.p,
                       sink(n.inputs[0]).data() + ai * plan.m * plan.k, plan.m, plan.k, plan.p);
        }
        if (n.inputs[1] >= 0) {
          gemm_atg_acc(a.data() + ai * plan.m * plan.k, gs,
                       sink(n.inputs[1]).data() + bi * plan.k * plan.p, plan.m, plan.k, plan.p);
        }
      }
      break;
    }
    case OpKind::kLinear: {
      const Tensor& x = n.saved[0];
      const Tensor& w = n.saved[1];
      const std::size_t din = w.dim(0), dout = w.dim(1);
      const std::size_t rows = x.size() / din;
      if (n.inputs[0] >= 0) gemm_gbt_acc(g.data(), w.data(), sink(n.inputs[0]).data(), rows, din, dout);
      if (n.inputs[1] >= 0) gemm_atg_acc(x.data(), g.data(), sink(n.inputs[1]).data(), rows, din, dout);
      if (n.inputs[2] >= 0) {
        auto& acc = sink(n.inputs[2]);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* grow = g.data() + r * dout;
          for (std::size_t j = 0; j < dout; ++j) acc[j] += grow[j];
        }
      }
      break;
    }
    case OpKind::kSoftmaxLast: {
      if (n.inputs[0] < 0) break;
      const auto& yv = n.saved[0].values();
      const std::size_t l = n.out_shape.back();
      const std::size_t rows = yv.size() / l;
      auto& acc = sink(n.inputs[0]);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* yrow = yv.data() + r * l;
        const double* grow = g.data() + r * l;
        double dot = 0.0;
        for (std::size_t j = 0; j < l; ++j) dot += grow[j] * yrow[j];
        double* arow = acc.data() + r * l;
        for (std::size_t j = 0; j < l; ++j) arow[j] += yrow[j] * (grow[j] - dot);
      }
      break;
    }
    case OpKind::kLayerNormLast: {
      const auto& xhat = n.saved[0].values();
      const auto& inv_std = n.saved[1].values();
      const auto& gamma = n.saved[2].values();
      const std::size_t d = n.out_shape.back();
      const std::size_t rows = xhat.size() / d;
      if (n.inputs[0] >= 0) {
        auto& acc = sink(n.inputs[0]);
        const double invd = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* grow = g.data() + r * d;
          const double* xrow = xhat.data() + r * d;
          double sum1 = 0.0, sum2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double gg = grow[j] * gamma[j];
            sum1 += gg;
            sum2 += gg * xrow[j];
          }
          double* arow = acc.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) {
            const double gg = grow[j] * gamma[j];
            arow[j] += inv_std[r] * (gg - invd * sum1 - xrow[j] * invd * sum2);
          }
        }
      }
      if (n.inputs[1] >= 0) {
        auto& acc = sink(n.inputs[1]);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* grow = g.data() + r * d;
          const double* xrow = xhat.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) acc[j] += grow[j] * xrow[j];
        }
      }
      if (n.inputs[2] >= 0) {
        auto& acc = sink(n.inputs[2]);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* grow = g.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) acc[j] += grow[j];
        }
      }
      break;
    }
    case OpKind::kGelu: {
      if (n.inputs[0] < 0) break;
      const auto& xv = n.saved[0].values();
      auto& acc = sink(n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = xv[i];
        const double phi = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        acc[i] += g[i] * (cdf + x * phi);
      }
      break;
    }
    case OpKind::kReshape: {
      if (n.inputs[0] < 0) break;
      auto& acc = sink(n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
      break;
    }
    case OpKind::kPermute: {
      if (n.inputs[0] < 0) break;
      std::vector<std::size_t> axes(n.attrs.ints.size());
      for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<std::size_t>(n.attrs.ints[i]);
      const std::vector<double> gin = permute_vals(g, n.out_shape, inverse_axes(axes));
      auto& acc = sink(n.inputs[0]);
      for (std::size_t i = 0; i < gin.size(); ++i) acc[i] += gin[i];
      break;
    }
    case OpKind::kReferenceBatch: {
      if (n.inputs[0] < 0) break;
      const std::size_t b = n.out_shape[0];
      auto& acc = sink(n.inputs[0]);
      if (b == 1) {
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
        break;
      }
      // The map is self-adjoint: apply the same leave-one-out transform to g.
      const std::size_t rest = g.size() / b;
      std::vector<double> sum(rest, 0.0);
      for (std::size_t i = 0; i < b; ++i) {
        const double* row = g.data() + i * rest;
        for (std::size_t r = 0; r < rest; ++r) sum[r] += row[r];
      }
      const double inv = 1.0 / static_cast<double>(b - 1);
      for (std::size_t i = 0; i < b; ++i) {
        const double* row = g.data() + i * rest;
        double* arow = acc.data() + i * rest;
        for (std::size_t r = 0; r < rest; ++r) arow[r] += (sum[r] - row[r]) * inv;
      }
      break;
    }
    case OpKind::kSumBatch: {
      if (n.inputs[0] < 0) break;
      const std::size_t b = static_cast<std::size_t>(n.attrs.ints[0]);
      auto& acc = sink(n.inputs[0]);
      const std::size_t rest = g.size();
      for (std::size_t i = 0; i < b; ++i) {
        double* arow = acc.data() + i * rest;
        for (std::size_t r = 0; r < rest; ++r) arow[r] += g[r];
      }
      break;
    }
    case OpKind::kConcatLast: {
      const std::size_t total = n.out_shape.back();
      const std::size_t lead = g.size() / total;
      std::size_t col = 0;
      for (std::size_t part = 0; part < n.inputs.size(); ++part) {
        const std::size_t d = static_cast<std::size_t>(n.attrs.ints[part]);
        if (n.inputs[part] >= 0) {
          auto& acc = sink(n.inputs[part]);
          for (std::size_t l = 0; l < lead; ++l) {
            const double* grow = g.data() + l * total + col;
            double* arow = acc.data() + l * d;
            for (std::size_t j = 0; j < d; ++j) arow[j] += grow[j];
          }
        }
        col += d;
      }
      break;
    }
    case OpKind::kMeanAll: {
      if (n.inputs[0] < 0) break;
      auto& acc = sink(n.inputs[0]);
      const double gv = g[0] / static_cast<double>(acc.size());
      for (double& a : acc) a += gv;
      break;
    }
    case OpKind::kCrossEntropy: {
      if (n.inputs[0] < 0) break;
      const auto& probs = n.saved[0].values();
      const std::size_t m = n.saved[0].dim(0);
      const std::size_t c = n.saved[0].dim(1);
      auto& acc = sink(n.inputs[0]);
      const double gv = g[0] / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i) {
        const double* prow = probs.data() + i * c;
        double* arow = acc.data() + i * c;
        const std::size_t y = static_cast<std::size_t>(n.attrs.ints[i]);
        for (std::size_t j = 0; j < c; ++j) arow[j] += gv * (prow[j] - (j == y ? 1.0 : 0.0));
      }
      break;
    }
    case OpKind::kUnfold: {
      if (n.inputs[0] < 0) break;
      UnfoldDims d;
      d.b = static_cast<std::size_t>(n.attrs.ints[0]);
      d.c = static_cast<std::size_t>(n.attrs.ints[1]);
      d.h = static_cast<std::size_t>(n.attrs.ints[2]);
      d.w = static_cast<std::size_t>(n.attrs.ints[3]);
      d.k = static_cast<std::size_t>(n.attrs.ints[4]);
      d.s = static_cast<std::size_t>(n.attrs.ints[5]);
      d.p = static_cast<std::size_t>(n.attrs.ints[6]);
      d.oh = (d.h + 2 * d.p - d.k) / d.s + 1;
      d.ow = (d.w + 2 * d.p - d.k) / d.s + 1;
      auto& acc = sink(n.inputs[0]);
      const std::size_t patch = d.c * d.k * d.k;
      for (std::size_t b = 0; b < d.b; ++b) {
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const double* grow = g.data() + ((b * d.oh + oy) * d.ow + ox) * patch;
            for (std::size_t c = 0; c < d.c; ++c) {
              for (std::size_t ki = 0; ki < d.k; ++ki) {
                const std::ptrdiff_t iy =
                    static_cast<std::ptrdiff_t>(oy * d.s + ki) - static_cast<std::ptrdiff_t>(d.p);
                for (std::size_t kj = 0; kj < d.k; ++kj) {
                  const std::ptrdiff_t ix =
                      static_cast<std::ptrdiff_t>(ox * d.s + kj) - static_cast<std::ptrdiff_t>(d.p);
                  if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(d.h) && ix >= 0 &&
                      ix < static_cast<std::ptrdiff_t>(d.w)) {
                    acc[((b * d.c + c) * d.h + static_cast<std::size_t>(iy)) * d.w +
                        static_cast<std::size_t>(ix)] += grow[(c * d.k + ki) * d.k + kj];
                  }
                }
              }
            }
          }
        }
      }
      break;
    }
    case OpKind::kUpsampleBilinear: {
      if (n.inputs[0] < 0) break;
      const std::size_t b = static_cast<std::size_t>(n.attrs.ints[0]);
      const std::size_t c = static_cast<std::size_t>(n.attrs.ints[1]);
      const std::size_t h = static_cast<std::size_t>(n.attrs.ints[2]);
      const std::size_t w = static_cast<std::size_t>(n.attrs.ints[3]);
      const std::size_t factor = static_cast<std::size_t>(n.attrs.ints[4]);
      auto& acc = sink(n.inputs[0]);
      if (factor == 1) {
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
        break;
      }
      const LerpAxis ay = lerp_axis(h, factor);
      const LerpAxis axx = lerp_axis(w, factor);
      const std::size_t oh = h * factor, ow = w * factor;
      for (std::size_t bc = 0; bc < b * c; ++bc) {
        double* aplane = acc.data() + bc * h * w;
        const double* gplane = g.data() + bc * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const double wy = ay.w[y];
          double* a0 = aplane + ay.i0[y] * w;
          double* a1 = aplane + ay.i1[y] * w;
          const double* grow = gplane + y * ow;
          for (std::size_t xo = 0; xo < ow; ++xo) {
            const double wx = axx.w[xo];
            const double gv = grow[xo];
            a0[axx.i0[xo]] += gv * (1.0 - wy) * (1.0 - wx);
            a0[axx.i1[xo]] += gv * (1.0 - wy) * wx;
            a1[axx.i0[xo]] += gv * wy * (1.0 - wx);
            a1[axx.i1[xo]] += gv * wy * wx;
          }
        }
      }
      break;
    }
  }
}

}  // namespace

Gradients Tape::backward(const Tensor& loss) const {
  if (loss.tape_id() != id_ || loss.node() < 0) {
    throw ValueError("backward: loss tensor is not traced on this tape");
  }
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  std::vector<std::vector<double>> acc(nodes_.size());
  auto sink = [&](int id) -> std::vector<double>& {
    auto& buf = acc[static_cast<std::size_t>(id)];
    if (buf.empty()) buf.assign(shape_size(nodes_[static_cast<std::size_t>(id)].out_shape), 0.0);
    return buf;
  };
  sink(loss.node())[0] = 1.0;
  for (int id = loss.node(); id >= 0; --id) {
    const auto& g = acc[static_cast<std::size_t>(id)];
    if (g.empty()) continue;
    const TapeNode& n = nodes_[static_cast<std::size_t>(id)];
    if (nonfinite_checks_enabled()) {
      for (double v : g) {
        if (!std::isfinite(v)) {
          throw NonFiniteError(std::string("non-finite gradient at ") + op_name(n.kind));
        }
      }
    }
    backward_node(n, g, sink);
  }
  std::vector<Tensor> by_node(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!acc[i].empty()) by_node[i] = Tensor(nodes_[i].out_shape, std::move(acc[i]));
  }
  return Gradients(id_, std::move(by_node));
}

}  // namespace iba
