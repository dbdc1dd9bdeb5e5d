// iba: command-line front end for the intra-batch attention segmentation
// library. Subcommands: gen-data, train, eval, gradcheck, attn-dump, ablate.
//
// Exit codes: 0 success, 1 usage error, 2 runtime/data error,
// 3 verification failure (gradcheck).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "iba/attention.hpp"
#include "iba/data.hpp"
#include "iba/encoder.hpp"
#include "iba/fd_check.hpp"
#include "iba/ops.hpp"
#include "iba/pgm.hpp"
#include "iba/rng.hpp"
#include "iba/tape.hpp"
#include "iba/tensor.hpp"
#include "iba/train.hpp"

namespace fs = std::filesystem;
using namespace iba;

namespace {

std::string g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + path.string());
  out << text;
  if (!out) throw IoError("failed writing: " + path.string());
}

Corpus load_corpus(const std::string& data_dir, const std::string& domain) {
  return Corpus::load_file((fs::path(data_dir) / (domain + ".ibad")).string());
}

void print_report(const EvalReport& r, const std::string& mode) {
  std::printf("domain=%s mode=%s miou=%.6f\n", domain_name(r.domain), mode.c_str(), r.miou);
  for (std::size_t c = 0; c < r.num_classes; ++c)
    std::printf("  iou_%zu=%.6f\n", c, r.iou[c]);
}

// ---------------------------------------------------------------- gen-data

struct GenDataOpts {
  std::uint64_t seed = 7;
  std::size_t n = 256;
  std::size_t n_target = 128;
  std::size_t size = 64;
  std::size_t classes = 5;
  std::string out = "data";
};

int run_gen_data(const GenDataOpts& o, const std::string& run_cfg) {
  SceneConfig cfg;
  cfg.height = o.size;
  cfg.width = o.size;
  cfg.num_classes = o.classes;
  cfg.validate();

  fs::create_directories(o.out);
  const Corpus source = generate_corpus(Rng::derive(o.seed, 0), o.n, cfg,
                                        DomainStyle::source_default(o.classes), Domain::kSource);
  const Corpus target =
      generate_corpus(Rng::derive(o.seed, 1), o.n_target, cfg,
                      DomainStyle::target_default(o.classes), Domain::kTarget);
  source.save_file((fs::path(o.out) / "source.ibad").string());
  target.save_file((fs::path(o.out) / "target.ibad").string());
  write_text_file(fs::path(o.out) / "run.cfg", run_cfg);
  std::printf("wrote %zu source + %zu target samples (%zux%zu, %zu classes) to %s\n", o.n,
              o.n_target, o.size, o.size, o.classes, o.out.c_str());
  return 0;
}

// ------------------------------------------------------------------- train

struct TrainOpts {
  std::string data = "data";
  std::string out = "run";
  std::uint64_t seed = 1234;
  std::size_t steps = 2000;
  std::size_t batch = 4;
  std::size_t warmup = 0;  // 0 = automatic 3% of steps
  std::size_t eval_every = 500;
  std::size_t eval_samples = 0;
  std::size_t fusion_sites = 4;
  std::size_t crop = 0;
  double lr_backbone = 1e-4;
  double lr_classifier = 1e-3;
  double weight_decay = 0.01;
  double rica = 1.0;
  std::string block1 = "miba";
  std::string block2 = "self";
  std::string fusion = "eiba";
  bool scale_by_heads = false;
};

ModelConfig model_config_from(const TrainOpts& o, std::size_t num_classes) {
  ModelConfig mc;
  mc.block1_kind = attention_kind_from(o.block1);
  mc.block2_kind = attention_kind_from(o.block2);
  mc.fusion_kind = fusion_kind_from(o.fusion);
  mc.fusion_site_count = o.fusion_sites;
  mc.num_classes = num_classes;
  mc.scale_by_head_count = o.scale_by_heads;
  mc.validate();
  return mc;
}

TrainOptions train_options_from(const TrainOpts& o) {
  TrainOptions to;
  to.optim.lr_backbone = o.lr_backbone;
  to.optim.lr_classifier = o.lr_classifier;
  to.optim.weight_decay = o.weight_decay;
  to.optim.total_steps = o.steps;
  to.optim.warmup_steps =
      o.warmup == 0 ? std::max<std::size_t>(1, o.steps * 3 / 100) : o.warmup;
  to.steps = o.steps;
  to.batch_size = o.batch;
  to.eval_every = o.eval_every;
  to.eval_max_samples = o.eval_samples;
  to.crop = o.crop;
  to.rica_strength = o.rica;
  to.seed = o.seed;
  return to;
}

int run_train(const TrainOpts& o, const std::string& run_cfg) {
  const Corpus source = load_corpus(o.data, "source");
  const Corpus target = load_corpus(o.data, "target");

  Rng init_rng(Rng::derive(o.seed, 2));
  Model model = Model::build(model_config_from(o, source.num_classes), init_rng);
  std::printf("model: block1=%s block2=%s fusion=%s params=%zu\n", o.block1.c_str(),
              o.block2.c_str(), o.fusion.c_str(), model.parameter_count());

  fs::create_directories(o.out);
  TrainOptions to = train_options_from(o);
  to.metrics_path = (fs::path(o.out) / "metrics.csv").string();
  to.eval_path = (fs::path(o.out) / "eval.csv").string();

  const TrainResult result = train_loop(model, source, target, to);
  model.save_file((fs::path(o.out) / "model.ibac").string());
  write_text_file(fs::path(o.out) / "run.cfg", run_cfg);

  if (!result.losses.empty())
    std::printf("trained %zu steps, final loss %.6f\n", result.losses.size(),
                result.losses.back());
  for (auto it = result.reports.rbegin();
       it != result.reports.rend() && it->step == o.steps; ++it)
    std::printf("step %zu: domain=%s mode=%s miou=%.6f\n", it->step,
                domain_name(it->report.domain), it->intra_batch ? "batch" : "single",
                it->report.miou);
  std::printf("wrote %s\n", (fs::path(o.out) / "model.ibac").string().c_str());
  return 0;
}

// -------------------------------------------------------------------- eval

struct EvalOpts {
  std::string checkpoint;
  std::string data = "data";
  std::string domain = "target";
  std::string mode = "batch";
  std::size_t batch = 4;
  std::size_t max_samples = 0;
  std::string csv;
};

int run_eval(const EvalOpts& o) {
  const Model model = Model::load_file(o.checkpoint);
  const Corpus corpus = load_corpus(o.data, o.domain);

  EvalOptions eo;
  eo.batch_size = o.batch;
  eo.intra_batch = o.mode == "batch";
  eo.max_samples = o.max_samples;
  const EvalReport r = evaluate(model, corpus, eo);
  print_report(r, o.mode);

  if (!o.csv.empty()) {
    std::ofstream out(o.csv, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + o.csv);
    out << "step,domain,mode,miou";
    for (std::size_t c = 0; c < r.num_classes; ++c) out << ",iou_" << c;
    out << "\n0," << domain_name(r.domain) << ',' << o.mode << ',' << g17(r.miou);
    for (double v : r.iou) out << ',' << g17(v);
    out << "\n";
    if (!out) throw IoError("failed writing: " + o.csv);
  }
  return 0;
}

// --------------------------------------------------------------- gradcheck

struct GradcheckOpts {
  double eps = 1e-3;
  double threshold = 1e-5;
  std::size_t model_samples = 50;
  bool skip_model = false;
  bool corrupt = false;
};

// One residual attention block at tiny shapes; gradients checked for the
// input features and all eight projection tensors.
double check_block(AttentionKind kind, bool intra_batch, double eps) {
  const std::size_t b = 3, n = 4, d = 8, heads = 2;
  Rng rng(11);
  AttentionParams ap = AttentionParams::init(d, heads, kind, rng);
  const Tensor features = randn({b, n, d}, rng);
  const Tensor probe = randn({b, n, d}, rng);

  auto f = [&](const std::vector<Tensor>& ps) {
    AttentionParams p = ap;
    p.w_q = ps[1];
    p.b_q = ps[2];
    p.w_k = ps[3];
    p.b_k = ps[4];
    p.w_v = ps[5];
    p.b_v = ps[6];
    p.w_out = ps[7];
    p.b_out = ps[8];
    const BatchFeatures out = iba_block_forward(BatchFeatures(ps[0]), p, intra_batch);
    return mean_all(mul(out.tensor, probe));
  };
  const std::vector<Tensor> params = {features, ap.w_q, ap.b_q, ap.w_k, ap.b_k,
                                      ap.w_v,   ap.b_v, ap.w_out, ap.b_out};
  FdOptions opts;
  opts.eps = eps;
  return fd_check(f, params, opts);
}

double check_full_model(double eps, std::size_t sample_count) {
  ModelConfig mc;  // default: miba block1, eiba fusion, self elsewhere
  Rng rng(21);
  const Model model = Model::build(mc, rng);
  const Tensor images = rand_uniform({2, 3, 64, 64}, rng);
  const Tensor probe = randn({2, mc.num_classes, 16, 16}, rng);

  auto f = [&](const std::vector<Tensor>& ps) {
    const std::vector<Tensor> mp(ps.begin() + 1, ps.end());
    return mean_all(mul(model.forward(ps[0], mp), probe));
  };
  std::vector<Tensor> params;
  params.reserve(model.num_params() + 1);
  params.push_back(images);
  for (std::size_t i = 0; i < model.num_params(); ++i) params.push_back(model.param(i));

  FdOptions opts;
  opts.eps = eps;
  opts.sample_count = sample_count;
  opts.seed = 5;
  return fd_check(f, params, opts);
}

// Negative control: bias one analytic gradient entry and confirm the finite
// difference comparison flags it.
double corrupted_rel_error(double eps) {
  const std::size_t b = 2, n = 3, d = 4;
  Rng rng(3);
  AttentionParams ap = AttentionParams::init(d, 1, AttentionKind::kSelf, rng);
  const Tensor features = randn({b, n, d}, rng);
  const Tensor probe = randn({b, n, d}, rng);

  auto loss_with = [&](const Tensor& wq) {
    AttentionParams p = ap;
    p.w_q = wq;
    return mean_all(mul(iba_block_forward(BatchFeatures(features), p).tensor, probe));
  };

  Tape tape;
  const Tensor wq = tape.watch(ap.w_q);
  const double analytic = tape.backward(loss_with(wq)).grad(wq).values()[0];
  const double corrupted = analytic + 0.5 * std::abs(analytic) + 1e-2;

  std::vector<double> bumped = ap.w_q.values();
  bumped[0] += eps;
  const double up = loss_with(Tensor(ap.w_q.shape(), bumped)).value();
  bumped[0] -= 2 * eps;
  const double down = loss_with(Tensor(ap.w_q.shape(), bumped)).value();
  const double fd = (up - down) / (2 * eps);
  return std::abs(corrupted - fd) / std::max({std::abs(corrupted), std::abs(fd), 1e-8});
}

int run_gradcheck(const GradcheckOpts& o) {
  // A coarser step than the default gives noisier estimates; never demand
  // more accuracy than the step can deliver.
  const double layer_threshold = std::max(o.threshold, o.eps > 1e-3 ? o.eps : 0.0);
  const double model_threshold = std::max({1e-4, o.threshold, o.eps > 1e-3 ? o.eps : 0.0});
  bool ok = true;

  auto judge = [&](const std::string& label, double err, double threshold) {
    const bool pass = err < threshold;
    ok = ok && pass;
    std::printf("%-28s max rel err %.3e  (threshold %.0e)  %s\n", label.c_str(), err, threshold,
                pass ? "PASS" : "FAIL");
  };

  for (const AttentionKind kind :
       {AttentionKind::kSelf, AttentionKind::kMiba, AttentionKind::kEiba}) {
    for (const bool intra : {true, false}) {
      const std::string label =
          std::string("block ") + attention_kind_name(kind) + (intra ? " batch" : " single");
      judge(label, check_block(kind, intra, o.eps), layer_threshold);
    }
  }
  if (!o.skip_model)
    judge("full model (sampled)", check_full_model(o.eps, o.model_samples), model_threshold);
  if (o.corrupt) judge("corrupted backward", corrupted_rel_error(o.eps), layer_threshold);

  std::printf("%s\n", ok ? "gradcheck PASS" : "gradcheck FAIL");
  return ok ? 0 : 3;
}

// --------------------------------------------------------------- attn-dump

struct AttnDumpOpts {
  std::string checkpoint;
  std::string data = "data";
  std::string domain = "source";
  std::string out = "attn";
  std::size_t n = 4;
};

int run_attn_dump(const AttnDumpOpts& o) {
  Model model = Model::load_file(o.checkpoint);
  const Corpus corpus = load_corpus(o.data, o.domain);
  if (corpus.samples.empty()) throw ValueError("corpus is empty");

  const std::size_t n = std::min(o.n, corpus.samples.size());
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  const Batch batch = make_batch(corpus, idx);

  model.set_inference_mode(true);
  CaptureList captures;
  model.forward(batch.images, model.params(), &captures);

  // First captured layer of each distinct kind, in forward order; the first
  // stage-1 block is always among them.
  std::map<AttentionKind, const CapturedMaps*> first;
  for (const CapturedMaps& cap : captures)
    if (!first.count(cap.kind)) first.emplace(cap.kind, &cap);

  fs::create_directories(o.out);
  std::size_t files = 0;
  for (const auto& [kind, cap] : first) {
    const Tensor& maps = cap->maps.tensor;  // [B, heads, N, N]
    const std::size_t heads = maps.dim(1);
    const std::size_t tokens = maps.dim(2);
    for (std::size_t s = 0; s < maps.dim(0); ++s) {
      for (std::size_t h = 0; h < heads; ++h) {
        std::vector<double> slice(tokens * tokens);
        for (std::size_t r = 0; r < tokens; ++r)
          for (std::size_t c = 0; c < tokens; ++c) slice[r * tokens + c] = maps(s, h, r, c);
        const std::string name = "attn_s" + std::to_string(s) + "_h" + std::to_string(h) + "_" +
                                 attention_kind_name(kind) + ".pgm";
        write_pgm_rescaled((fs::path(o.out) / name).string(), slice.data(), tokens, tokens);
        ++files;
      }
    }
    std::printf("site %s (%s): %zu samples x %zu heads\n", cap->site.c_str(),
                attention_kind_name(kind), maps.dim(0), heads);
  }
  std::printf("wrote %zu maps to %s\n", files, o.out.c_str());
  return 0;
}

// ------------------------------------------------------------------ ablate

struct AblateOpts {
  std::string data = "data";
  std::string out = "ablation";
  std::uint64_t seed = 99;
  std::size_t steps = 300;
  std::size_t eval_samples = 96;
  std::size_t warmup = 0;
};

int run_ablate(const AblateOpts& o, const std::string& run_cfg) {
  const Corpus source = load_corpus(o.data, "source");
  const Corpus target = load_corpus(o.data, "target");

  struct Cell {
    const char* block1;
    const char* block2;
    const char* fusion;
    std::size_t batch;
  };
  // Block-placement grid for each intra-batch kind, then the batch-size sweep
  // on the full elementwise configuration.
  const std::vector<Cell> cells = {
      {"self", "self", "none", 4},  {"miba", "self", "none", 4}, {"miba", "miba", "none", 4},
      {"self", "self", "miba", 4},  {"miba", "self", "miba", 4}, {"eiba", "self", "none", 4},
      {"eiba", "eiba", "none", 4},  {"self", "self", "eiba", 4}, {"eiba", "self", "eiba", 4},
      {"eiba", "self", "eiba", 2},  {"eiba", "self", "eiba", 4}, {"eiba", "self", "eiba", 8},
  };

  fs::create_directories(o.out);
  std::ofstream csv(fs::path(o.out) / "ablation.csv", std::ios::binary);
  if (!csv) throw IoError("cannot open for write: " + (fs::path(o.out) / "ablation.csv").string());
  csv << "block1,block2,fusion,batch_size,mode,source_miou,target_miou\n";

  for (std::size_t ci = 0; ci < cells.size(); ++ci) {
    const Cell& cell = cells[ci];
    TrainOpts topts;
    topts.seed = o.seed;
    topts.steps = o.steps;
    topts.batch = cell.batch;
    topts.warmup = o.warmup;
    topts.eval_every = 0;  // final evaluation only
    topts.eval_samples = o.eval_samples;
    topts.block1 = cell.block1;
    topts.block2 = cell.block2;
    topts.fusion = cell.fusion;

    Rng init_rng(Rng::derive(o.seed, 2));
    Model model = Model::build(model_config_from(topts, source.num_classes), init_rng);
    const TrainResult result = train_loop(model, source, target, train_options_from(topts));

    // Final-step reports arrive as source/single, source/batch, target/single,
    // target/batch.
    double miou[2][2] = {{0, 0}, {0, 0}};  // [mode][domain]
    for (const TaggedReport& t : result.reports) {
      if (t.step != o.steps) continue;
      miou[t.intra_batch ? 1 : 0][t.report.domain == Domain::kTarget ? 1 : 0] = t.report.miou;
    }
    for (const bool intra : {false, true}) {
      csv << cell.block1 << ',' << cell.block2 << ',' << cell.fusion << ',' << cell.batch << ','
          << (intra ? "batch" : "single") << ',' << g17(miou[intra ? 1 : 0][0]) << ','
          << g17(miou[intra ? 1 : 0][1]) << "\n";
    }
    std::printf("[%zu/%zu] block1=%s block2=%s fusion=%s batch=%zu  source=%.4f target=%.4f (batch mode)\n",
                ci + 1, cells.size(), cell.block1, cell.block2, cell.fusion, cell.batch,
                miou[1][0], miou[1][1]);
  }
  if (!csv) throw IoError("failed writing ablation.csv");
  csv.close();
  write_text_file(fs::path(o.out) / "run.cfg", run_cfg);
  std::printf("wrote %s\n", (fs::path(o.out) / "ablation.csv").string().c_str());
  return 0;
}

// ------------------------------------------------------------------- parser

// Expands a config file of `key = value` lines into `--key=value` tokens.
// Blank lines and lines starting with '#' or ';' are skipped; surrounding
// double quotes on a value are removed.
std::vector<std::string> config_tokens(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config file not found: " + path);

  auto trim = [](const std::string& s) {
    const std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };

  std::vector<std::string> tokens;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = trim(line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    const std::size_t eq = s.find('=');
    const std::string key = eq == std::string::npos ? std::string() : trim(s.substr(0, eq));
    if (key.empty())
      throw ValueError(path + ":" + std::to_string(lineno) + ": expected key=value");
    std::string value = trim(s.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    tokens.push_back("--" + key + "=" + value);
  }
  return tokens;
}

// Command-line definition plus the bound option values.  Built fresh for each
// parse pass: config-file support works by re-parsing with the file's tokens
// injected ahead of the user's flags, and every option takes the last value
// it sees, which implements the documented precedence
// (built-in defaults < config file < command-line flags).
struct Cli {
  CLI::App app{"Intra-batch attention segmentation toolkit"};
  GenDataOpts g;
  TrainOpts t;
  EvalOpts e;
  GradcheckOpts gc;
  AttnDumpOpts ad;
  AblateOpts ab;
  CLI::App* gen = nullptr;
  CLI::App* train = nullptr;
  CLI::App* eval = nullptr;
  CLI::App* gradcheck = nullptr;
  CLI::App* attn = nullptr;
  CLI::App* ablate = nullptr;
  std::string config_path;  // only the parsed subcommand writes this

  Cli() {
    app.require_subcommand(1);

    const auto multiple_of_32 = CLI::Validator(
        [](std::string& s) {
          unsigned long long v = 0;
          try {
            v = std::stoull(s);
          } catch (...) {
            return std::string("not a number");
          }
          return (v > 0 && v % 32 == 0) ? std::string()
                                        : std::string("must be a positive multiple of 32");
        },
        "MULTIPLE_OF_32", "multiple-of-32");
    const std::vector<std::string> kinds = {"self", "miba", "eiba"};
    const std::vector<std::string> fusions = {"none", "miba", "eiba"};

    auto add_config = [this](CLI::App* sub) {
      sub->add_option("--config", config_path, "Read key=value defaults from a file")
          ->configurable(false);
    };

    gen = app.add_subcommand("gen-data", "Generate source and target corpora");
    add_config(gen);
    gen->add_option("--seed", g.seed, "Corpus seed")->capture_default_str();
    gen->add_option("--n", g.n, "Source sample count")->capture_default_str();
    gen->add_option("--n-target", g.n_target, "Target sample count")->capture_default_str();
    gen->add_option("--size", g.size, "Image height and width")
        ->capture_default_str()
        ->check(multiple_of_32);
    gen->add_option("--classes", g.classes, "Number of classes")
        ->capture_default_str()
        ->check(CLI::Range(2, 8));
    gen->add_option("--out", g.out, "Output directory")->capture_default_str();

    train = app.add_subcommand("train", "Train a model on the source corpus");
    add_config(train);
    train->add_option("--data", t.data, "Corpus directory")->capture_default_str();
    train->add_option("--out", t.out, "Output directory")->capture_default_str();
    train->add_option("--seed", t.seed, "Training seed")->capture_default_str();
    train->add_option("--steps", t.steps, "Training steps")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    train->add_option("--batch-size", t.batch, "Training batch size")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    train->add_option("--warmup", t.warmup, "Warmup steps (0 = 3% of steps)")
        ->capture_default_str();
    train->add_option("--eval-every", t.eval_every, "Steps between evaluations (0 = final only)")
        ->capture_default_str();
    train->add_option("--eval-samples", t.eval_samples, "Per-corpus evaluation cap (0 = all)")
        ->capture_default_str();
    train->add_option("--lr-backbone", t.lr_backbone, "Encoder learning rate")
        ->capture_default_str();
    train->add_option("--lr-classifier", t.lr_classifier, "Fusion/decoder learning rate")
        ->capture_default_str();
    train->add_option("--weight-decay", t.weight_decay, "Decoupled weight decay")
        ->capture_default_str();
    train->add_option("--rica", t.rica, "Color augmentation strength in [0,1]")
        ->capture_default_str();
    train->add_option("--crop", t.crop, "Square training crop (0 = full image)")
        ->capture_default_str();
    train->add_option("--block1", t.block1, "Stage-1 attention kind")
        ->capture_default_str()
        ->check(CLI::IsMember(kinds));
    train->add_option("--block2", t.block2, "Stage-2 attention kind")
        ->capture_default_str()
        ->check(CLI::IsMember(kinds));
    train->add_option("--fusion", t.fusion, "Pre-decoder fusion kind")
        ->capture_default_str()
        ->check(CLI::IsMember(fusions));
    train->add_option("--fusion-sites", t.fusion_sites, "Pyramid levels with fusion (0-4)")
        ->capture_default_str()
        ->check(CLI::Range(0, 4));
    train->add_flag("--scale-by-heads", t.scale_by_heads,
                    "Scale scores by sqrt(head count) instead of sqrt(head width)");

    eval = app.add_subcommand("eval", "Evaluate a checkpoint on one domain");
    add_config(eval);
    eval->add_option("--checkpoint", e.checkpoint, "Checkpoint path")->required();
    eval->add_option("--data", e.data, "Corpus directory")->capture_default_str();
    eval->add_option("--domain", e.domain, "Corpus to evaluate")
        ->capture_default_str()
        ->check(CLI::IsMember({"source", "target"}));
    eval->add_option("--mode", e.mode, "Inference mode")
        ->capture_default_str()
        ->check(CLI::IsMember({"single", "batch"}));
    eval->add_option("--batch-size", e.batch, "Evaluation batch size")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    eval->add_option("--max-samples", e.max_samples, "Evaluation cap (0 = all)")
        ->capture_default_str();
    eval->add_option("--csv", e.csv, "Also write the report to this CSV file");

    gradcheck = app.add_subcommand("gradcheck", "Finite-difference checks for every layer kind");
    add_config(gradcheck);
    gradcheck->add_option("--eps", gc.eps, "Finite-difference step")->capture_default_str();
    gradcheck->add_option("--threshold", gc.threshold, "Layer pass threshold (raised to eps)")
        ->capture_default_str();
    gradcheck->add_option("--model-samples", gc.model_samples,
                          "Sampled entries for the full-model check")
        ->capture_default_str();
    gradcheck->add_flag("--skip-model", gc.skip_model, "Skip the full-model check");
    gradcheck->add_flag("--corrupt", gc.corrupt,
                        "Negative control: corrupt one gradient and expect failure");

    attn = app.add_subcommand("attn-dump", "Write attention maps as PGM images");
    add_config(attn);
    attn->add_option("--checkpoint", ad.checkpoint, "Checkpoint path")->required();
    attn->add_option("--data", ad.data, "Corpus directory")->capture_default_str();
    attn->add_option("--domain", ad.domain, "Corpus to sample")
        ->capture_default_str()
        ->check(CLI::IsMember({"source", "target"}));
    attn->add_option("--n", ad.n, "Batch size to visualize")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    attn->add_option("--out", ad.out, "Output directory")->capture_default_str();

    ablate = app.add_subcommand("ablate", "Block-placement and batch-size sweep -> ablation.csv");
    add_config(ablate);
    ablate->add_option("--data", ab.data, "Corpus directory")->capture_default_str();
    ablate->add_option("--out", ab.out, "Output directory")->capture_default_str();
    ablate->add_option("--seed", ab.seed, "Sweep seed")->capture_default_str();
    ablate->add_option("--steps", ab.steps, "Training steps per cell")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    ablate->add_option("--eval-samples", ab.eval_samples, "Per-corpus evaluation cap (0 = all)")
        ->capture_default_str();
    ablate->add_option("--warmup", ab.warmup, "Warmup steps (0 = 3% of steps)")
        ->capture_default_str();

    // Later values win, so tokens injected from a config file are overridden
    // by explicit flags that follow them.
    for (CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; }))
      for (CLI::Option* opt : sub->get_options())
        opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }
};

int dispatch(Cli& c) {
  try {
    if (c.gen->parsed()) return run_gen_data(c.g, c.gen->config_to_str(true, false));
    if (c.train->parsed()) return run_train(c.t, c.train->config_to_str(true, false));
    if (c.eval->parsed()) return run_eval(c.e);
    if (c.gradcheck->parsed()) return run_gradcheck(c.gc);
    if (c.attn->parsed()) return run_attn_dump(c.ad);
    if (c.ablate->parsed()) return run_ablate(c.ab, c.ablate->config_to_str(true, false));
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  Cli cli;
  try {
    cli.app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = cli.app.exit(err);
    return rc == 0 ? 0 : 1;
  }

  if (cli.config_path.empty()) return dispatch(cli);

  // Re-parse as: subcommand, config tokens, then the original flags.
  std::vector<std::string> args;
  args.push_back(cli.app.get_subcommands().front()->get_name());
  try {
    for (std::string& tok : config_tokens(cli.config_path)) args.push_back(std::move(tok));
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  for (int i = 2; i < argc; ++i) args.emplace_back(argv[i]);
  std::reverse(args.begin(), args.end());  // CLI11 consumes vector args back to front

  Cli merged;
  try {
    merged.app.parse(args);
  } catch (const CLI::ParseError& err) {
    const int rc = merged.app.exit(err);
    return rc == 0 ? 0 : 1;
  }
  return dispatch(merged);
}
