#include "iba/attention.hpp"

#include <cmath>

namespace iba {

namespace {

// [B,N,D] -> [B,H,N,D/H]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
  Tensor r = reshape(x, {b, n, heads, d / heads});
  return permute(r, {0, 2, 1, 3});
}

// [B,H,N,dh] -> [B,N,D]
Tensor merge_heads(const Tensor& x) {
  const std::size_t b = x.dim(0), h = x.dim(1), n = x.dim(2), dh = x.dim(3);
  Tensor p = permute(x, {0, 2, 1, 3});
  return reshape(p, {b, n, h * dh});
}

Tensor transpose_last2(const Tensor& x) {
  std::vector<std::size_t> axes(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

double dot_scale(const AttentionParams& p) {
  const std::size_t denom = p.scale_by_head_count ? p.heads : p.dim() / p.heads;
  return 1.0 / std::sqrt(static_cast<double>(denom));
}

// Shared scaled-dot-product core: q against k/v drawn from `source`.
AttentionOutput scaled_core(const BatchFeatures& f, const Tensor& source,
                            const AttentionParams& p) {
  Tensor q = split_heads(linear(f.tensor, p.w_q, p.b_q), p.heads);
  Tensor k = split_heads(linear(source, p.w_k, p.b_k), p.heads);
  Tensor v = split_heads(linear(source, p.w_v, p.b_v), p.heads);
  Tensor scores = matmul(q, transpose_last2(k));
  Tensor maps = softmax_lastdim(scale(scores, dot_scale(p)));
  Tensor ctx = merge_heads(matmul(maps, v));
  return AttentionOutput{BatchFeatures(ctx), AttentionMaps{maps}};
}

}  // namespace

const char* attention_kind_name(AttentionKind k) {
  switch (k) {
    case AttentionKind::kSelf: return "self";
    case AttentionKind::kMiba: return "miba";
    case AttentionKind::kEiba: return "eiba";
  }
  return "unknown";
}

AttentionKind attention_kind_from(const std::string& name) {
  if (name == "self") return AttentionKind::kSelf;
  if (name == "miba") return AttentionKind::kMiba;
  if (name == "eiba") return AttentionKind::kEiba;
  throw ValueError("unknown attention kind: " + name);
}

BatchFeatures::BatchFeatures(Tensor t) : tensor(std::move(t)) {
  if (tensor.rank() != 3) {
    throw ShapeError("batch features must be [B,N,D], got " + shape_str(tensor.shape()));
  }
}

AttentionParams AttentionParams::init(std::size_t dim, std::size_t heads, AttentionKind kind,
                                      Rng& rng) {
  if (dim == 0 || heads == 0 || dim % heads != 0) {
    throw ShapeError("attention dim " + std::to_string(dim) + " not divisible by heads " +
                     std::to_string(heads));
  }
  AttentionParams p;
  p.w_q = trunc_normal_init({dim, dim}, rng);
  p.b_q = Tensor::zeros({dim});
  p.w_k = trunc_normal_init({dim, dim}, rng);
  p.b_k = Tensor::zeros({dim});
  p.w_v = trunc_normal_init({dim, dim}, rng);
  p.b_v = Tensor::zeros({dim});
  p.w_out = trunc_normal_init({dim, dim}, rng);
  p.b_out = Tensor::zeros({dim});
  p.heads = heads;
  p.kind = kind;
  return p;
}

void AttentionParams::check(std::size_t channels) const {
  if (w_q.shape() != Shape{channels, channels}) {
    throw ShapeError("attention weights expect width " + std::to_string(w_q.dim(0)) +
                     " but features have " + std::to_string(channels));
  }
  if (heads == 0 || channels % heads != 0) {
    throw ShapeError("feature width " + std::to_string(channels) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
}

BatchFeatures compute_reference_batch(const BatchFeatures& f) {
  return BatchFeatures(reference_batch(f.tensor));
}

Tensor eiba_scores(const Tensor& q, const Tensor& k) {
  if (q.rank() != 3 || k.rank() != 3) {
    throw ShapeError("eiba_scores expects [B,N,d] operands, got " + shape_str(q.shape()) +
                     " and " + shape_str(k.shape()));
  }
  if (q.shape() != k.shape()) {
    throw ShapeError("eiba_scores: q " + shape_str(q.shape()) + " vs k " + shape_str(k.shape()));
  }
  Tensor ksum = sum_axis0_keepdim(k);  // [1,N,d]
  return matmul(q, permute(ksum, {0, 2, 1}));
}

AttentionOutput self_attention_forward(const BatchFeatures& f, const AttentionParams& p) {
  if (p.kind != AttentionKind::kSelf) throw ValueError("self_attention_forward: wrong param kind");
  p.check(f.channels());
  return scaled_core(f, f.tensor, p);
}

AttentionOutput miba_forward(const BatchFeatures& f, const AttentionParams& p, bool intra_batch) {
  if (p.kind != AttentionKind::kMiba) throw ValueError("miba_forward: wrong param kind");
  p.check(f.channels());
  if (!intra_batch) return scaled_core(f, f.tensor, p);
  return scaled_core(f, reference_batch(f.tensor), p);
}

AttentionOutput eiba_forward(const BatchFeatures& f, const AttentionParams& p, bool intra_batch) {
  if (p.kind != AttentionKind::kEiba) throw ValueError("eiba_forward: wrong param kind");
  p.check(f.channels());
  Tensor q = split_heads(linear(f.tensor, p.w_q, p.b_q), p.heads);
  Tensor k = split_heads(linear(f.tensor, p.w_k, p.b_k), p.heads);
  Tensor v = split_heads(linear(f.tensor, p.w_v, p.b_v), p.heads);
  Tensor scores;
  double s = 1.0;
  if (intra_batch) {
    Tensor ksum = sum_axis0_keepdim(k);  // [1,H,N,dh]
    scores = matmul(q, transpose_last2(ksum));
    s = 1.0 / std::sqrt(static_cast<double>(f.batch()));
  } else {
    // Per-sample fallback: the key sum collapses to the sample's own keys and
    // the batch factor to sqrt(1).
    scores = matmul(q, transpose_last2(k));
  }
  Tensor maps = softmax_lastdim(scale(scores, s));
  Tensor ctx = merge_heads(matmul(maps, v));
  return AttentionOutput{BatchFeatures(ctx), AttentionMaps{maps}};
}

AttentionOutput attention_forward(const BatchFeatures& f, const AttentionParams& p,
                                  bool intra_batch) {
  switch (p.kind) {
    case AttentionKind::kSelf: return self_attention_forward(f, p);
    case AttentionKind::kMiba: return miba_forward(f, p, intra_batch);
    case AttentionKind::kEiba: return eiba_forward(f, p, intra_batch);
  }
  throw ValueError("attention_forward: bad kind");
}

BatchFeatures iba_block_forward(const BatchFeatures& f, const AttentionParams& p, bool intra_batch,
                                AttentionMaps* maps_out) {
  AttentionOutput out = attention_forward(f, p, intra_batch);
  if (maps_out) *maps_out = out.maps;
  return BatchFeatures(add(linear(out.features.tensor, p.w_out, p.b_out), f.tensor));
}

}  // namespace iba
