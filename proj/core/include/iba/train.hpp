#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "iba/data.hpp"
#include "iba/encoder.hpp"
#include "iba/tape.hpp"
#include "iba/tensor.hpp"

namespace iba {

// Decoupled-weight-decay Adam with two learning-rate groups (encoder stages
// vs fusion+decoder) and a shared linear warmup / linear decay schedule.
struct OptimConfig {
  double lr_backbone = 1e-4;
  double lr_classifier = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 60;
  std::size_t total_steps = 2000;

  void validate() const;
};

struct OptState {
  std::vector<Tensor> m;  // first moments, aligned with the model's parameters
  std::vector<Tensor> v;  // second moments
  std::size_t step = 0;   // completed steps

  static OptState init(const Model& model);
};

// Schedule multiplier shared by both rate groups: ramps linearly from 1/W at
// step 0 to 1 at step W, then decays linearly to 0 at step T. `step` is
// 0-based and must be < T.
double lr_scale_at(std::size_t step, std::size_t warmup_steps, std::size_t total_steps);

// Mean pixel cross entropy of logits [B,C,H,W] against B*H*W integer labels.
Tensor cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels);

// Single-tensor update: p' = p - lr * mhat/(sqrt(vhat)+eps) - decay_rate * p,
// with bias-corrected moments at 1-based step t. Updates m and v in place.
Tensor adamw_update(const Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, std::size_t t,
                    double lr, double decay_rate, double beta1, double beta2, double eps);

// One scheduled update over all model parameters; `grads` is aligned with the
// parameter list. Decoupled weight decay is applied at the scheduled learning
// rate of each group (decay_rate = schedule * base_lr * weight_decay), so a
// zero base rate leaves parameters bitwise untouched. Increments state.step.
void adamw_step(Model& model, const std::vector<Tensor>& grads, OptState& state,
                const OptimConfig& cfg);

struct EvalReport {
  std::size_t num_classes = 0;
  std::vector<std::size_t> confusion;  // [C,C] row-major: confusion[truth*C + pred]
  std::vector<double> iou;             // NaN marks classes absent from truth and prediction
  double miou = 0.0;                   // mean over present classes only
  Domain domain = Domain::kSource;
};

void accumulate_confusion(std::vector<std::size_t>& confusion, std::size_t num_classes,
                          const std::vector<int>& pred, const std::vector<int>& truth);
EvalReport report_from_confusion(std::vector<std::size_t> confusion, std::size_t num_classes);
EvalReport compute_miou(const std::vector<int>& pred, const std::vector<int>& truth,
                        std::size_t num_classes);

// Argmax over the class axis of [B,C,h,w] logits; ties pick the lowest class.
std::vector<int> argmax_labels(const Tensor& logits);

struct EvalOptions {
  std::size_t batch_size = 4;
  bool intra_batch = true;      // inference mode used for this evaluation
  std::size_t max_samples = 0;  // 0 = whole corpus
};

// Sequential full-resolution evaluation: forward, upsample logits 4x, argmax,
// confusion-matrix mIoU. The final batch may be smaller than batch_size.
EvalReport evaluate(const Model& model, const Corpus& corpus, const EvalOptions& opts);

struct TrainOptions {
  OptimConfig optim;
  std::size_t batch_size = 4;
  std::size_t steps = 2000;        // must not exceed optim.total_steps
  std::size_t eval_every = 500;    // 0 = evaluate only after the last step
  std::size_t eval_batch_size = 4;
  std::size_t eval_max_samples = 0;  // 0 = full corpora
  std::size_t crop = 0;              // 0 = no crop; otherwise square crop size
  double rica_strength = 1.0;
  bool train_intra_batch = true;  // batch mode during training forwards
  std::uint64_t seed = 1234;
  std::string metrics_path;  // CSV "step,loss,lr_backbone,lr_classifier"; empty = skip
  std::string eval_path;     // CSV "step,domain,mode,miou,iou_0.."; empty = skip

  void validate(const Corpus& train_corpus) const;
};

struct TaggedReport {
  std::size_t step = 0;
  bool intra_batch = false;
  EvalReport report;
};

struct TrainResult {
  std::vector<double> losses;  // one entry per step
  std::vector<TaggedReport> reports;
};

// Deterministic training loop: shuffled batches, crop/flip/color augmentation,
// cross entropy on 4x-upsampled logits, scheduled AdamW. Evaluates source and
// target corpora in both inference modes at every eval point. A non-finite
// loss aborts with the failing step index.
TrainResult train_loop(Model& model, const Corpus& source, const Corpus& target,
                       const TrainOptions& opts);

// True when the mean of the last `window` entries is below the mean of the
// first `window`; window shrinks to half the series when it is short.
bool loss_trend_ok(const std::vector<double>& losses, std::size_t window = 100);

}  // namespace iba
