#include "iba/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "iba/ops.hpp"

namespace iba {
namespace {

std::string g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// In-place random crop + horizontal flip + color augmentation. Per-sample
// draw order is fixed (crop y, crop x, flip, then the color draws) so results
// do not depend on which transforms are active.
void augment_batch(Batch& batch, Rng& rng, double rica_strength, std::size_t crop) {
  const std::size_t b = batch.size;
  const std::size_t h = batch.height;
  const std::size_t w = batch.width;
  const std::size_t ch = crop == 0 ? h : crop;
  const std::size_t cw = crop == 0 ? w : crop;
  const auto& in = batch.images.values();
  std::vector<double> images(b * 3 * ch * cw);
  std::vector<int> labels(b * ch * cw);

  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t oy = rng.uniform_below(h - ch + 1);
    const std::size_t ox = rng.uniform_below(w - cw + 1);
    const bool flip = rng.uniform() < 0.5;

    std::vector<double> img(3 * ch * cw);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < ch; ++y) {
        for (std::size_t x = 0; x < cw; ++x) {
          const std::size_t sx = flip ? ox + cw - 1 - x : ox + x;
          img[c * ch * cw + y * cw + x] = in[i * 3 * h * w + c * h * w + (oy + y) * w + sx];
        }
      }
    }
    for (std::size_t y = 0; y < ch; ++y) {
      for (std::size_t x = 0; x < cw; ++x) {
        const std::size_t sx = flip ? ox + cw - 1 - x : ox + x;
        labels[i * ch * cw + y * cw + x] = batch.labels[i * h * w + (oy + y) * w + sx];
      }
    }
    const Tensor colored = rica_augment(Tensor({3, ch, cw}, std::move(img)), rng, rica_strength);
    std::copy(colored.values().begin(), colored.values().end(),
              images.begin() + static_cast<std::ptrdiff_t>(i * 3 * ch * cw));
  }

  batch.images = Tensor({b, 3, ch, cw}, std::move(images));
  batch.labels = std::move(labels);
  batch.height = ch;
  batch.width = cw;
}

}  // namespace

void OptimConfig::validate() const {
  if (lr_backbone < 0.0 || lr_classifier < 0.0) throw ValueError("learning rates must be >= 0");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw ValueError("betas must lie in [0,1)");
  if (eps <= 0.0) throw ValueError("eps must be positive");
  if (weight_decay < 0.0) throw ValueError("weight decay must be >= 0");
  if (total_steps == 0) throw ValueError("schedule needs at least one step");
  if (warmup_steps > total_steps) throw ValueError("warmup cannot exceed total steps");
}

OptState OptState::init(const Model& model) {
  OptState s;
  s.m.reserve(model.num_params());
  s.v.reserve(model.num_params());
  for (std::size_t i = 0; i < model.num_params(); ++i) {
    s.m.push_back(Tensor::zeros(model.param(i).shape()));
    s.v.push_back(Tensor::zeros(model.param(i).shape()));
  }
  return s;
}

double lr_scale_at(std::size_t step, std::size_t warmup_steps, std::size_t total_steps) {
  if (step >= total_steps)
    throw ValueError("step " + std::to_string(step) + " is beyond the " +
                     std::to_string(total_steps) + "-step schedule");
  if (step < warmup_steps)
    return static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  return static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup_steps);
}

Tensor cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 4)
    throw ShapeError("cross_entropy_loss expects [B,C,H,W], got " + shape_str(logits.shape()));
  const std::size_t b = logits.dim(0);
  const std::size_t c = logits.dim(1);
  const std::size_t h = logits.dim(2);
  const std::size_t w = logits.dim(3);
  if (labels.size() != b * h * w)
    throw ShapeError("label count " + std::to_string(labels.size()) + " does not match " +
                     std::to_string(b * h * w) + " pixels");
  const Tensor rows = reshape(permute(logits, {0, 2, 3, 1}), {b * h * w, c});
  return cross_entropy_mean(rows, labels);
}

Tensor adamw_update(const Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, std::size_t t,
                    double lr, double decay_rate, double beta1, double beta2, double eps) {
  if (grad.shape() != param.shape() || m.shape() != param.shape() || v.shape() != param.shape())
    throw ShapeError("adamw_update shape mismatch for " + shape_str(param.shape()));
  if (t == 0) throw ValueError("adamw_update step index is 1-based");
  const auto& p = param.values();
  const auto& g = grad.values();
  const auto& mv = m.values();
  const auto& vv = v.values();
  const std::size_t n = p.size();
  std::vector<double> nm(n), nv(n), np(n);
  const double mc = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double vc = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < n; ++i) {
    nm[i] = beta1 * mv[i] + (1.0 - beta1) * g[i];
    nv[i] = beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i];
    const double mhat = nm[i] / mc;
    const double vhat = nv[i] / vc;
    np[i] = p[i] - lr * mhat / (std::sqrt(vhat) + eps) - decay_rate * p[i];
  }
  m = Tensor(param.shape(), std::move(nm));
  v = Tensor(param.shape(), std::move(nv));
  return Tensor(param.shape(), std::move(np));
}

void adamw_step(Model& model, const std::vector<Tensor>& grads, OptState& state,
                const OptimConfig& cfg) {
  cfg.validate();
  if (grads.size() != model.num_params() || state.m.size() != model.num_params() ||
      state.v.size() != model.num_params())
    throw ValueError("optimizer state does not match the parameter list");
  const double s = lr_scale_at(state.step, cfg.warmup_steps, cfg.total_steps);
  const std::size_t t = state.step + 1;
  for (std::size_t i = 0; i < model.num_params(); ++i) {
    const double base = model.param_in_backbone(i) ? cfg.lr_backbone : cfg.lr_classifier;
    model.set_param(i, adamw_update(model.param(i), grads[i], state.m[i], state.v[i], t, s * base,
                                    s * base * cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps));
  }
  state.step = t;
}

void accumulate_confusion(std::vector<std::size_t>& confusion, std::size_t num_classes,
                          const std::vector<int>& pred, const std::vector<int>& truth) {
  if (confusion.size() != num_classes * num_classes)
    throw ValueError("confusion matrix must be [C,C]");
  if (pred.size() != truth.size()) throw ValueError("prediction/truth size mismatch");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i];
    const int t = truth[i];
    if (p < 0 || t < 0 || static_cast<std::size_t>(p) >= num_classes ||
        static_cast<std::size_t>(t) >= num_classes)
      throw ValueError("label outside [0," + std::to_string(num_classes) + ")");
    ++confusion[static_cast<std::size_t>(t) * num_classes + static_cast<std::size_t>(p)];
  }
}

EvalReport report_from_confusion(std::vector<std::size_t> confusion, std::size_t num_classes) {
  if (confusion.size() != num_classes * num_classes)
    throw ValueError("confusion matrix must be [C,C]");
  EvalReport r;
  r.num_classes = num_classes;
  r.iou.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::size_t tp = confusion[c * num_classes + c];
    std::size_t row = 0, col = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
      row += confusion[c * num_classes + k];
      col += confusion[k * num_classes + c];
    }
    const std::size_t denom = row + col - tp;  // TP + FP + FN
    if (denom == 0) continue;                  // absent from truth and prediction
    r.iou[c] = static_cast<double>(tp) / static_cast<double>(denom);
    sum += r.iou[c];
    ++present;
  }
  r.miou = present == 0 ? std::numeric_limits<double>::quiet_NaN()
                        : sum / static_cast<double>(present);
  r.confusion = std::move(confusion);
  return r;
}

EvalReport compute_miou(const std::vector<int>& pred, const std::vector<int>& truth,
                        std::size_t num_classes) {
  std::vector<std::size_t> confusion(num_classes * num_classes, 0);
  accumulate_confusion(confusion, num_classes, pred, truth);
  return report_from_confusion(std::move(confusion), num_classes);
}

std::vector<int> argmax_labels(const Tensor& logits) {
  if (logits.rank() != 4)
    throw ShapeError("argmax_labels expects [B,C,h,w], got " + shape_str(logits.shape()));
  const std::size_t b = logits.dim(0);
  const std::size_t c = logits.dim(1);
  const std::size_t hw = logits.dim(2) * logits.dim(3);
  const auto& v = logits.values();
  std::vector<int> out(b * hw);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = 0;
      double best_v = v[i * c * hw + p];
      for (std::size_t k = 1; k < c; ++k) {
        const double cand = v[i * c * hw + k * hw + p];
        if (cand > best_v) {
          best_v = cand;
          best = k;
        }
      }
      out[i * hw + p] = static_cast<int>(best);
    }
  }
  return out;
}

EvalReport evaluate(const Model& model, const Corpus& corpus, const EvalOptions& opts) {
  if (opts.batch_size == 0) throw ValueError("eval batch size must be positive");
  if (corpus.samples.empty()) throw ValueError("cannot evaluate an empty corpus");
  const std::size_t c = model.config().num_classes;
  if (corpus.num_classes != c)
    throw ValueError("corpus has " + std::to_string(corpus.num_classes) + " classes but model has " +
                     std::to_string(c));
  Model runner = model;
  runner.set_inference_mode(opts.intra_batch);

  const std::size_t n = opts.max_samples == 0
                            ? corpus.samples.size()
                            : std::min(opts.max_samples, corpus.samples.size());
  std::vector<std::size_t> confusion(c * c, 0);
  std::size_t pos = 0;
  while (pos < n) {
    const std::size_t take = std::min(opts.batch_size, n - pos);
    std::vector<std::size_t> idx(take);
    for (std::size_t i = 0; i < take; ++i) idx[i] = pos + i;
    const Batch batch = make_batch(corpus, idx);
    const Tensor logits = runner.forward(batch.images);
    const Tensor full = upsample_bilinear(logits, 4);
    accumulate_confusion(confusion, c, argmax_labels(full), batch.labels);
    pos += take;
  }
  EvalReport r = report_from_confusion(std::move(confusion), c);
  r.domain = corpus.samples.front().domain;
  return r;
}

void TrainOptions::validate(const Corpus& train_corpus) const {
  optim.validate();
  if (steps > optim.total_steps)
    throw ValueError("cannot train " + std::to_string(steps) + " steps on a " +
                     std::to_string(optim.total_steps) + "-step schedule");
  if (batch_size == 0 || eval_batch_size == 0) throw ValueError("batch sizes must be positive");
  if (rica_strength < 0.0 || rica_strength > 1.0)
    throw ValueError("rica strength must be in [0,1]");
  if (crop != 0) {
    if (crop % 32 != 0) throw ValueError("crop size must be a multiple of 32");
    if (train_corpus.samples.empty() || crop > train_corpus.height() ||
        crop > train_corpus.width())
      throw ValueError("crop size exceeds corpus images");
  }
}

TrainResult train_loop(Model& model, const Corpus& source, const Corpus& target,
                       const TrainOptions& opts) {
  opts.validate(source);
  const std::size_t classes = model.config().num_classes;

  std::ofstream metrics;
  if (!opts.metrics_path.empty()) {
    metrics.open(opts.metrics_path, std::ios::binary);
    if (!metrics) throw IoError("cannot open for write: " + opts.metrics_path);
    metrics << "step,loss,lr_backbone,lr_classifier\n";
  }
  std::ofstream evals;
  if (!opts.eval_path.empty()) {
    evals.open(opts.eval_path, std::ios::binary);
    if (!evals) throw IoError("cannot open for write: " + opts.eval_path);
    evals << "step,domain,mode,miou";
    for (std::size_t k = 0; k < classes; ++k) evals << ",iou_" << k;
    evals << "\n";
  }

  TrainResult result;
  if (opts.steps == 0) return result;

  Loader loader(source, opts.batch_size, Rng::derive(opts.seed, 0));
  Rng aug_rng(Rng::derive(opts.seed, 1));
  OptState state = OptState::init(model);
  model.set_inference_mode(opts.train_intra_batch);

  auto run_evals = [&](std::size_t step_number) {
    for (const Corpus* corpus : {&source, &target}) {
      if (corpus->samples.empty()) continue;
      for (const bool intra : {false, true}) {
        EvalOptions eo;
        eo.batch_size = opts.eval_batch_size;
        eo.intra_batch = intra;
        eo.max_samples = opts.eval_max_samples;
        TaggedReport tagged;
        tagged.step = step_number;
        tagged.intra_batch = intra;
        tagged.report = evaluate(model, *corpus, eo);
        if (evals.is_open()) {
          evals << step_number << ',' << domain_name(tagged.report.domain) << ','
                << (intra ? "batch" : "single") << ',' << g17(tagged.report.miou);
          for (double v : tagged.report.iou) evals << ',' << g17(v);
          evals << "\n";
        }
        result.reports.push_back(std::move(tagged));
      }
    }
  };

  for (std::size_t t = 0; t < opts.steps; ++t) {
    Batch batch = loader.next();
    augment_batch(batch, aug_rng, opts.rica_strength, opts.crop);

    double loss_value;
    try {
      Tape tape;
      std::vector<Tensor> traced;
      traced.reserve(model.num_params());
      for (std::size_t i = 0; i < model.num_params(); ++i)
        traced.push_back(tape.watch(model.param(i)));
      const Tensor logits = model.forward(batch.images, traced);
      const Tensor loss = cross_entropy_loss(upsample_bilinear(logits, 4), batch.labels);
      loss_value = loss.value();
      if (!std::isfinite(loss_value))
        throw NonFiniteError("loss is not finite");
      const Gradients grads = tape.backward(loss);
      std::vector<Tensor> g;
      g.reserve(traced.size());
      for (const Tensor& p : traced) g.push_back(grads.grad(p));
      adamw_step(model, g, state, opts.optim);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("training step " + std::to_string(t + 1) + ": " + e.what());
    }

    result.losses.push_back(loss_value);
    if (metrics.is_open()) {
      const double s = lr_scale_at(t, opts.optim.warmup_steps, opts.optim.total_steps);
      metrics << (t + 1) << ',' << g17(loss_value) << ',' << g17(s * opts.optim.lr_backbone)
              << ',' << g17(s * opts.optim.lr_classifier) << "\n";
    }

    const bool at_interval = opts.eval_every != 0 && (t + 1) % opts.eval_every == 0;
    if (at_interval || t + 1 == opts.steps) run_evals(t + 1);
  }

  model.set_inference_mode(opts.train_intra_batch);
  if (metrics.is_open() && !metrics) throw IoError("failed writing: " + opts.metrics_path);
  if (evals.is_open() && !evals) throw IoError("failed writing: " + opts.eval_path);
  return result;
}

bool loss_trend_ok(const std::vector<double>& losses, std::size_t window) {
  if (losses.size() < 2) return false;
  const std::size_t w = std::min(window, losses.size() / 2);
  if (w == 0) return false;
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < w; ++i) first += losses[i];
  for (std::size_t i = losses.size() - w; i < losses.size(); ++i) last += losses[i];
  return last < first;
}

}  // namespace iba
