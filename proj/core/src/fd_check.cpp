#include "iba/fd_check.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <utility>

namespace iba {

double fd_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                const std::vector<Tensor>& params, const FdOptions& opts) {
  if (params.empty()) throw ValueError("fd_check: no parameters to check");

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Tensor> watched;
    watched.reserve(params.size());
    for (const Tensor& p : params) watched.push_back(tape.watch(p));
    Tensor loss = f(watched);
    if (loss.size() != 1) {
      throw ShapeError("fd_check: f must return a scalar, got " + shape_str(loss.shape()));
    }
    Gradients grads = tape.backward(loss);
    analytic.reserve(watched.size());
    for (const Tensor& w : watched) analytic.push_back(grads.grad(w));
  }

  std::vector<std::pair<std::size_t, std::size_t>> entries;
  std::size_t total = 0;
  for (const Tensor& p : params) total += p.size();
  if (opts.sample_count == 0 || opts.sample_count >= total) {
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      for (std::size_t i = 0; i < params[pi].size(); ++i) entries.emplace_back(pi, i);
    }
  } else {
    Rng rng(opts.seed);
    std::set<std::uint64_t> picked;
    while (picked.size() < opts.sample_count) picked.insert(rng.uniform_below(total));
    for (std::uint64_t flat : picked) {
      std::size_t pi = 0;
      std::uint64_t rem = flat;
      while (rem >= params[pi].size()) {
        rem -= params[pi].size();
        ++pi;
      }
      entries.emplace_back(pi, static_cast<std::size_t>(rem));
    }
  }

  auto eval_with = [&](std::size_t pi, std::size_t i, double delta) {
    std::vector<double> bumped = params[pi].values();
    bumped[i] += delta;
    std::vector<Tensor> probe = params;
    probe[pi] = Tensor(params[pi].shape(), std::move(bumped));
    return f(probe).value();
  };

  double max_rel = 0.0;
  for (const auto& [pi, i] : entries) {
    const double lp = eval_with(pi, i, opts.eps);
    const double lm = eval_with(pi, i, -opts.eps);
    const double fd = (lp - lm) / (2.0 * opts.eps);
    const double a = analytic[pi].values()[i];
    const double denom = std::max({std::fabs(fd), std::fabs(a), 1e-8});
    max_rel = std::max(max_rel, std::fabs(fd - a) / denom);
  }
  return max_rel;
}

}  // namespace iba
