#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "iba/attention.hpp"
#include "iba/rng.hpp"
#include "iba/tensor.hpp"

namespace iba {

enum class FusionKind { kNone, kMiba, kEiba };

const char* fusion_kind_name(FusionKind k);
FusionKind fusion_kind_from(const std::string& name);

// Four-stage hierarchical encoder over overlapping patches (strides 4,2,2,2)
// with pre-norm transformer blocks, optional intra-batch attention in the
// stage-1 (and, for ablations, stage-2) blocks, per-level intra-batch fusion
// blocks before the decoder, and an all-linear decoder at 1/4 resolution.
struct ModelConfig {
  std::array<std::size_t, 4> stage_widths{16, 32, 64, 128};
  std::array<std::size_t, 4> blocks_per_stage{2, 2, 2, 2};
  std::array<std::size_t, 4> heads_per_stage{1, 2, 4, 8};
  AttentionKind block1_kind = AttentionKind::kMiba;
  AttentionKind block2_kind = AttentionKind::kSelf;
  FusionKind fusion_kind = FusionKind::kEiba;
  std::size_t fusion_site_count = 4;  // applied to the first n pyramid levels
  std::size_t mlp_ratio = 4;
  std::size_t decoder_width = 64;
  std::size_t num_classes = 5;
  bool scale_by_head_count = false;
  bool inference_intra_batch = true;

  void validate() const;
};

// Analytic parameter count; matches Model::parameter_count() for a built model.
std::size_t parameter_count(const ModelConfig& cfg);

struct CapturedMaps {
  std::string site;  // "enc.s1.b0", "fusion.l2", ...
  AttentionKind kind;
  AttentionMaps maps;
};
using CaptureList = std::vector<CapturedMaps>;

class Model {
 public:
  static Model build(const ModelConfig& cfg, Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  void set_inference_mode(bool intra_batch) { cfg_.inference_intra_batch = intra_batch; }

  std::size_t num_params() const { return params_.size(); }
  const std::string& param_name(std::size_t i) const { return names_[i]; }
  const Tensor& param(std::size_t i) const { return params_[i]; }
  const std::vector<Tensor>& params() const { return params_; }
  void set_param(std::size_t i, Tensor t);
  bool param_in_backbone(std::size_t i) const { return backbone_[i]; }
  std::size_t parameter_count() const;

  // Logits at 1/4 input resolution: [B, num_classes, H/4, W/4].
  // Inputs must be [B, 3, H, W] with H and W divisible by 32.
  Tensor forward(const Tensor& images) const { return forward(images, params_, nullptr); }
  Tensor forward(const Tensor& images, const std::vector<Tensor>& p,
                 CaptureList* capture = nullptr) const;

  void save(std::ostream& out) const;
  static Model load(std::istream& in);
  void save_file(const std::string& path) const;
  static Model load_file(const std::string& path);

 private:
  enum class Init : std::uint8_t { kWeight, kZero, kOne };

  struct LinearRef {
    int w = -1, b = -1;
  };
  struct NormRef {
    int g = -1, b = -1;
  };
  struct AttnRef {
    LinearRef q, k, v, o;
    std::size_t heads = 1;
    AttentionKind kind = AttentionKind::kSelf;
  };
  struct BlockRef {
    NormRef ln1;
    AttnRef attn;
    NormRef ln2;
    LinearRef fc1, fc2;
  };
  struct StageRef {
    LinearRef patch;
    NormRef patch_ln;
    std::vector<BlockRef> blocks;
    NormRef out_norm;
  };

  explicit Model(const ModelConfig& cfg);
  void randomize(Rng& rng);

  int add_param(std::string name, Shape shape, Init init, bool backbone);
  LinearRef add_linear(const std::string& prefix, std::size_t din, std::size_t dout,
                       bool backbone);
  NormRef add_norm(const std::string& prefix, std::size_t d, bool backbone);
  AttnRef add_attn(const std::string& prefix, std::size_t dim, std::size_t heads,
                   AttentionKind kind, bool backbone);

  AttentionParams attn_params(const AttnRef& ref, const std::vector<Tensor>& p) const;

  ModelConfig cfg_;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
  std::vector<Init> inits_;
  std::vector<bool> backbone_;

  std::array<StageRef, 4> stages_;
  std::vector<AttnRef> fusion_;  // one per fused pyramid level
  std::array<LinearRef, 4> dec_level_;
  LinearRef dec_fuse_;
  LinearRef dec_cls_;
};

}  // namespace iba
