#include "iba/encoder.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace iba {

namespace {

constexpr std::array<std::size_t, 4> kPatchKernel{7, 3, 3, 3};
constexpr std::array<std::size_t, 4> kPatchStride{4, 2, 2, 2};
constexpr std::array<std::size_t, 4> kPatchPad{3, 1, 1, 1};

constexpr char kMagic[4] = {'I', 'B', 'A', 'C'};
constexpr std::uint8_t kVersion = 1;

Tensor to_spatial(const Tensor& tokens, std::size_t h, std::size_t w) {
  const std::size_t b = tokens.dim(0), c = tokens.dim(2);
  return reshape(permute(tokens, {0, 2, 1}), {b, c, h, w});
}

Tensor to_tokens(const Tensor& spatial) {
  const std::size_t b = spatial.dim(0), c = spatial.dim(1);
  const std::size_t n = spatial.dim(2) * spatial.dim(3);
  return permute(reshape(spatial, {b, c, n}), {0, 2, 1});
}

void write_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw IoError("checkpoint write failed");
}

void read_bytes(std::istream& in, void* p, std::size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n)) {
    throw IoError("checkpoint read failed: truncated stream");
  }
}

void write_u32le(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  write_bytes(out, b, 4);
}

std::uint32_t read_u32le(std::istream& in) {
  unsigned char b[4];
  read_bytes(in, b, 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["stage_widths"] = c.stage_widths;
  j["blocks_per_stage"] = c.blocks_per_stage;
  j["heads_per_stage"] = c.heads_per_stage;
  j["block1"] = attention_kind_name(c.block1_kind);
  j["block2"] = attention_kind_name(c.block2_kind);
  j["fusion"] = fusion_kind_name(c.fusion_kind);
  j["fusion_sites"] = c.fusion_site_count;
  j["mlp_ratio"] = c.mlp_ratio;
  j["decoder_width"] = c.decoder_width;
  j["num_classes"] = c.num_classes;
  j["scale_by_head_count"] = c.scale_by_head_count;
  j["inference_intra_batch"] = c.inference_intra_batch;
  return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  j.at("stage_widths").get_to(c.stage_widths);
  j.at("blocks_per_stage").get_to(c.blocks_per_stage);
  j.at("heads_per_stage").get_to(c.heads_per_stage);
  c.block1_kind = attention_kind_from(j.at("block1").get<std::string>());
  c.block2_kind = attention_kind_from(j.at("block2").get<std::string>());
  c.fusion_kind = fusion_kind_from(j.at("fusion").get<std::string>());
  c.fusion_site_count = j.at("fusion_sites").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.decoder_width = j.at("decoder_width").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.scale_by_head_count = j.at("scale_by_head_count").get<bool>();
  c.inference_intra_batch = j.at("inference_intra_batch").get<bool>();
  return c;
}

}  // namespace

const char* fusion_kind_name(FusionKind k) {
  switch (k) {
    case FusionKind::kNone: return "none";
    case FusionKind::kMiba: return "miba";
    case FusionKind::kEiba: return "eiba";
  }
  return "unknown";
}

FusionKind fusion_kind_from(const std::string& name) {
  if (name == "none") return FusionKind::kNone;
  if (name == "miba") return FusionKind::kMiba;
  if (name == "eiba") return FusionKind::kEiba;
  throw ValueError("unknown fusion kind: " + name);
}

void ModelConfig::validate() const {
  for (std::size_t s = 0; s < 4; ++s) {
    if (stage_widths[s] == 0 || blocks_per_stage[s] == 0 || heads_per_stage[s] == 0) {
      throw ValueError("model config: widths, block counts and head counts must be positive");
    }
    if (stage_widths[s] % heads_per_stage[s] != 0) {
      throw ValueError("model config: stage " + std::to_string(s + 1) + " width " +
                       std::to_string(stage_widths[s]) + " not divisible by " +
                       std::to_string(heads_per_stage[s]) + " heads");
    }
    if (s > 0 && stage_widths[s] < stage_widths[s - 1]) {
      throw ValueError("model config: stage widths must be nondecreasing");
    }
  }
  if (fusion_site_count > 4) throw ValueError("model config: fusion_site_count must be <= 4");
  if (mlp_ratio == 0) throw ValueError("model config: mlp_ratio must be positive");
  if (decoder_width == 0) throw ValueError("model config: decoder_width must be positive");
  if (num_classes < 2) throw ValueError("model config: need at least 2 classes");
}

std::size_t parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  std::size_t total = 0;
  std::size_t in_ch = 3;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t c = cfg.stage_widths[s];
    const std::size_t k = kPatchKernel[s];
    total += in_ch * k * k * c + c;  // patch projection
    total += 2 * c;                  // patch norm
    const std::size_t hidden = cfg.mlp_ratio * c;
    const std::size_t per_block = 2 * c                  // ln1
                                  + 4 * c * c + 4 * c    // attention q,k,v,out
                                  + 2 * c                // ln2
                                  + c * hidden + hidden  // mlp in
                                  + hidden * c + c;      // mlp out
    total += cfg.blocks_per_stage[s] * per_block;
    total += 2 * c;  // stage norm
    in_ch = c;
  }
  if (cfg.fusion_kind != FusionKind::kNone) {
    for (std::size_t l = 0; l < cfg.fusion_site_count; ++l) {
      const std::size_t c = cfg.stage_widths[l];
      total += 4 * c * c + 4 * c;
    }
  }
  const std::size_t dw = cfg.decoder_width;
  for (std::size_t l = 0; l < 4; ++l) total += cfg.stage_widths[l] * dw + dw;
  total += 4 * dw * dw + dw;
  total += dw * cfg.num_classes + cfg.num_classes;
  return total;
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::size_t in_ch = 3;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t c = cfg_.stage_widths[s];
    const std::string sp = "enc.s" + std::to_string(s + 1);
    StageRef& stage = stages_[s];
    stage.patch = add_linear(sp + ".patch", in_ch * kPatchKernel[s] * kPatchKernel[s], c, true);
    stage.patch_ln = add_norm(sp + ".patch_ln", c, true);
    AttentionKind kind = AttentionKind::kSelf;
    if (s == 0) kind = cfg_.block1_kind;
    if (s == 1) kind = cfg_.block2_kind;
    for (std::size_t j = 0; j < cfg_.blocks_per_stage[s]; ++j) {
      const std::string bp = sp + ".b" + std::to_string(j);
      BlockRef blk;
      blk.ln1 = add_norm(bp + ".ln1", c, true);
      blk.attn = add_attn(bp + ".attn", c, cfg_.heads_per_stage[s], kind, true);
      blk.ln2 = add_norm(bp + ".ln2", c, true);
      blk.fc1 = add_linear(bp + ".mlp.fc1", c, cfg_.mlp_ratio * c, true);
      blk.fc2 = add_linear(bp + ".mlp.fc2", cfg_.mlp_ratio * c, c, true);
      stage.blocks.push_back(blk);
    }
    stage.out_norm = add_norm(sp + ".norm", c, true);
    in_ch = c;
  }
  if (cfg_.fusion_kind != FusionKind::kNone) {
    const AttentionKind fk =
        cfg_.fusion_kind == FusionKind::kMiba ? AttentionKind::kMiba : AttentionKind::kEiba;
    for (std::size_t l = 0; l < cfg_.fusion_site_count; ++l) {
      fusion_.push_back(add_attn("fusion.l" + std::to_string(l) + ".attn", cfg_.stage_widths[l],
                                 cfg_.heads_per_stage[l], fk, false));
    }
  }
  const std::size_t dw = cfg_.decoder_width;
  for (std::size_t l = 0; l < 4; ++l) {
    dec_level_[l] = add_linear("dec.l" + std::to_string(l), cfg_.stage_widths[l], dw, false);
  }
  dec_fuse_ = add_linear("dec.fuse", 4 * dw, dw, false);
  dec_cls_ = add_linear("dec.cls", dw, cfg_.num_classes, false);
}

int Model::add_param(std::string name, Shape shape, Init init, bool backbone) {
  names_.push_back(std::move(name));
  params_.push_back(init == Init::kOne ? Tensor::full(shape, 1.0) : Tensor::zeros(shape));
  inits_.push_back(init);
  backbone_.push_back(backbone);
  return static_cast<int>(params_.size()) - 1;
}

Model::LinearRef Model::add_linear(const std::string& prefix, std::size_t din, std::size_t dout,
                                   bool backbone) {
  LinearRef r;
  r.w = add_param(prefix + ".w", {din, dout}, Init::kWeight, backbone);
  r.b = add_param(prefix + ".b", {dout}, Init::kZero, backbone);
  return r;
}

Model::NormRef Model::add_norm(const std::string& prefix, std::size_t d, bool backbone) {
  NormRef r;
  r.g = add_param(prefix + ".g", {d}, Init::kOne, backbone);
  r.b = add_param(prefix + ".b", {d}, Init::kZero, backbone);
  return r;
}

Model::AttnRef Model::add_attn(const std::string& prefix, std::size_t dim, std::size_t heads,
                               AttentionKind kind, bool backbone) {
  AttnRef r;
  r.q = {add_param(prefix + ".wq", {dim, dim}, Init::kWeight, backbone),
         add_param(prefix + ".bq", {dim}, Init::kZero, backbone)};
  r.k = {add_param(prefix + ".wk", {dim, dim}, Init::kWeight, backbone),
         add_param(prefix + ".bk", {dim}, Init::kZero, backbone)};
  r.v = {add_param(prefix + ".wv", {dim, dim}, Init::kWeight, backbone),
         add_param(prefix + ".bv", {dim}, Init::kZero, backbone)};
  r.o = {add_param(prefix + ".wo", {dim, dim}, Init::kWeight, backbone),
         add_param(prefix + ".bo", {dim}, Init::kZero, backbone)};
  r.heads = heads;
  r.kind = kind;
  return r;
}

void Model::randomize(Rng& rng) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    switch (inits_[i]) {
      case Init::kWeight: params_[i] = trunc_normal_init(params_[i].shape(), rng); break;
      case Init::kZero: params_[i] = Tensor::zeros(params_[i].shape()); break;
      case Init::kOne: params_[i] = Tensor::full(params_[i].shape(), 1.0); break;
    }
  }
}

Model Model::build(const ModelConfig& cfg, Rng& rng) {
  Model m(cfg);
  m.randomize(rng);
  return m;
}

void Model::set_param(std::size_t i, Tensor t) {
  if (t.shape() != params_[i].shape()) {
    throw ShapeError("set_param " + names_[i] + ": shape " + shape_str(t.shape()) +
                     " != " + shape_str(params_[i].shape()));
  }
  params_[i] = std::move(t);
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const Tensor& p : params_) total += p.size();
  return total;
}

AttentionParams Model::attn_params(const AttnRef& ref, const std::vector<Tensor>& p) const {
  AttentionParams a;
  a.w_q = p[ref.q.w];
  a.b_q = p[ref.q.b];
  a.w_k = p[ref.k.w];
  a.b_k = p[ref.k.b];
  a.w_v = p[ref.v.w];
  a.b_v = p[ref.v.b];
  a.w_out = p[ref.o.w];
  a.b_out = p[ref.o.b];
  a.heads = ref.heads;
  a.kind = ref.kind;
  a.scale_by_head_count = cfg_.scale_by_head_count;
  return a;
}

Tensor Model::forward(const Tensor& images, const std::vector<Tensor>& p,
                      CaptureList* capture) const {
  if (p.size() != params_.size()) {
    throw ValueError("forward: expected " + std::to_string(params_.size()) + " params, got " +
                     std::to_string(p.size()));
  }
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw ShapeError("forward: images must be [B,3,H,W], got " + shape_str(images.shape()));
  }
  const std::size_t h0 = images.dim(2), w0 = images.dim(3);
  if (h0 % 32 != 0 || w0 % 32 != 0) {
    throw ShapeError("forward: H and W must be divisible by 32, got " +
                     shape_str(images.shape()));
  }
  const bool mode = cfg_.inference_intra_batch;

  std::vector<Tensor> pyramid;
  std::vector<std::pair<std::size_t, std::size_t>> dims;
  Tensor cur = images;
  std::size_t h = h0, w = w0;
  for (std::size_t s = 0; s < 4; ++s) {
    Tensor cols = unfold_patches(cur, kPatchKernel[s], kPatchStride[s], kPatchPad[s]);
    h = (h + 2 * kPatchPad[s] - kPatchKernel[s]) / kPatchStride[s] + 1;
    w = (w + 2 * kPatchPad[s] - kPatchKernel[s]) / kPatchStride[s] + 1;
    const StageRef& stage = stages_[s];
    Tensor x = linear(cols, p[stage.patch.w], p[stage.patch.b]);
    x = layer_norm_lastdim(x, p[stage.patch_ln.g], p[stage.patch_ln.b]);
    for (std::size_t j = 0; j < stage.blocks.size(); ++j) {
      const BlockRef& blk = stage.blocks[j];
      Tensor y = layer_norm_lastdim(x, p[blk.ln1.g], p[blk.ln1.b]);
      const AttentionParams ap = attn_params(blk.attn, p);
      AttentionOutput ao = attention_forward(BatchFeatures(y), ap, mode);
      if (capture) {
        capture->push_back({"enc.s" + std::to_string(s + 1) + ".b" + std::to_string(j), ap.kind,
                            ao.maps});
      }
      x = add(linear(ao.features.tensor, p[blk.attn.o.w], p[blk.attn.o.b]), x);
      Tensor y2 = layer_norm_lastdim(x, p[blk.ln2.g], p[blk.ln2.b]);
      Tensor m = linear(gelu(linear(y2, p[blk.fc1.w], p[blk.fc1.b])), p[blk.fc2.w], p[blk.fc2.b]);
      x = add(m, x);
    }
    x = layer_norm_lastdim(x, p[stage.out_norm.g], p[stage.out_norm.b]);
    pyramid.push_back(x);
    dims.emplace_back(h, w);
    if (s < 3) cur = to_spatial(x, h, w);
  }

  for (std::size_t l = 0; l < fusion_.size(); ++l) {
    const AttentionParams ap = attn_params(fusion_[l], p);
    AttentionMaps maps;
    BatchFeatures fused =
        iba_block_forward(BatchFeatures(pyramid[l]), ap, mode, capture ? &maps : nullptr);
    if (capture) capture->push_back({"fusion.l" + std::to_string(l), ap.kind, maps});
    pyramid[l] = fused.tensor;
  }

  std::vector<Tensor> parts;
  for (std::size_t l = 0; l < 4; ++l) {
    Tensor t = linear(pyramid[l], p[dec_level_[l].w], p[dec_level_[l].b]);
    Tensor sp = to_spatial(t, dims[l].first, dims[l].second);
    sp = upsample_bilinear(sp, std::size_t{1} << l);
    parts.push_back(to_tokens(sp));
  }
  Tensor cat = concat_lastdim(parts);
  Tensor fused = linear(cat, p[dec_fuse_.w], p[dec_fuse_.b]);
  Tensor logits = linear(fused, p[dec_cls_.w], p[dec_cls_.b]);
  return to_spatial(logits, dims[0].first, dims[0].second);
}

void Model::save(std::ostream& out) const {
  write_bytes(out, kMagic, 4);
  write_bytes(out, &kVersion, 1);
  const std::string header = config_to_json(cfg_).dump();
  write_u32le(out, static_cast<std::uint32_t>(header.size()));
  write_bytes(out, header.data(), header.size());
  std::vector<std::size_t> order(params_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return names_[a] < names_[b]; });
  write_u32le(out, static_cast<std::uint32_t>(order.size()));
  for (std::size_t i : order) {
    write_u32le(out, static_cast<std::uint32_t>(names_[i].size()));
    write_bytes(out, names_[i].data(), names_[i].size());
    params_[i].save(out);
  }
}

Model Model::load(std::istream& in) {
  char magic[4];
  read_bytes(in, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw IoError("bad checkpoint magic");
  std::uint8_t version;
  read_bytes(in, &version, 1);
  if (version != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t hlen = read_u32le(in);
  std::string header(hlen, '\0');
  read_bytes(in, header.data(), hlen);
  ModelConfig cfg;
  try {
    cfg = config_from_json(nlohmann::json::parse(header));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad checkpoint config header: ") + e.what());
  }
  Model m(cfg);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < m.names_.size(); ++i) index[m.names_[i]] = i;
  const std::uint32_t count = read_u32le(in);
  if (count != m.params_.size()) {
    throw IoError("checkpoint has " + std::to_string(count) + " tensors, model expects " +
                  std::to_string(m.params_.size()));
  }
  std::vector<bool> seen(m.params_.size(), false);
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t nlen = read_u32le(in);
    if (nlen > 4096) throw IoError("checkpoint tensor name too long");
    std::string name(nlen, '\0');
    read_bytes(in, name.data(), nlen);
    auto it = index.find(name);
    if (it == index.end()) throw IoError("checkpoint tensor not in model: " + name);
    if (seen[it->second]) throw IoError("checkpoint tensor repeated: " + name);
    Tensor value = Tensor::load(in);
    m.set_param(it->second, std::move(value));
    seen[it->second] = true;
  }
  return m;
}

void Model::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + path);
  save(out);
}

Model Model::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint not found: " + path);
  return load(in);
}

}  // namespace iba
