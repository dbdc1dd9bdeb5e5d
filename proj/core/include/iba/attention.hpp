#pragma once

#include <string>

#include "iba/ops.hpp"
#include "iba/rng.hpp"
#include "iba/tensor.hpp"

namespace iba {

// self: keys/values from each sample itself, scaled dot product.
// miba: keys/values from the mean of the other samples in the batch.
// eiba: scores against the elementwise sum of all key sets, scaled by sqrt(B).
enum class AttentionKind { kSelf, kMiba, kEiba };

const char* attention_kind_name(AttentionKind k);
AttentionKind attention_kind_from(const std::string& name);

// Token features for one batch: [B, N, D].
struct BatchFeatures {
  Tensor tensor;

  explicit BatchFeatures(Tensor t);
  std::size_t batch() const { return tensor.dim(0); }
  std::size_t tokens() const { return tensor.dim(1); }
  std::size_t channels() const { return tensor.dim(2); }
};

// Post-softmax attention weights: [B, heads, N, N]; rows sum to one.
struct AttentionMaps {
  Tensor tensor;
};

struct AttentionParams {
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_out, b_out;
  std::size_t heads = 1;
  AttentionKind kind = AttentionKind::kSelf;
  // When true the score denominator uses sqrt(heads) instead of
  // sqrt(head width) in the self/miba paths.
  bool scale_by_head_count = false;

  static AttentionParams init(std::size_t dim, std::size_t heads, AttentionKind kind, Rng& rng);
  std::size_t dim() const { return w_q.dim(0); }
  void check(std::size_t channels) const;
};

struct AttentionOutput {
  BatchFeatures features;  // [B, N, D], heads already concatenated
  AttentionMaps maps;
};

// Leave-one-out batch mean per sample; identity for B == 1.
BatchFeatures compute_reference_batch(const BatchFeatures& f);

// Single-head score block of the elementwise path: q[B,N,d] against the
// batch-summed keys of k[B,N,d], giving [B,N,N]. No scaling applied here.
Tensor eiba_scores(const Tensor& q, const Tensor& k);

AttentionOutput self_attention_forward(const BatchFeatures& f, const AttentionParams& p);
AttentionOutput miba_forward(const BatchFeatures& f, const AttentionParams& p,
                             bool intra_batch = true);
AttentionOutput eiba_forward(const BatchFeatures& f, const AttentionParams& p,
                             bool intra_batch = true);

// Dispatch on p.kind. intra_batch = false makes miba/eiba fall back to
// per-sample semantics (reference batch := own features; key sum := own keys
// with unit scale). self ignores the flag.
AttentionOutput attention_forward(const BatchFeatures& f, const AttentionParams& p,
                                  bool intra_batch = true);

// Residual attention block: linear_out(attention(f)) + f.
BatchFeatures iba_block_forward(const BatchFeatures& f, const AttentionParams& p,
                                bool intra_batch = true, AttentionMaps* maps_out = nullptr);

}  // namespace iba
