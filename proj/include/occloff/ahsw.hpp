#pragma once

#include <occloff/config.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace occloff {

/// Per-sample loss trajectory across completed epochs (unweighted values).
struct SampleLossHistory {
  std::vector<double> losses;
};

/// Decayed cumulative loss entering epoch n (1-based): sum over completed
/// epochs e of decay^(n-1-e) * loss_e. Requires the history to hold exactly
/// n-1 entries; undefined during the very first epoch.
inline double cumulative_loss(const std::vector<double>& history, double decay, int epoch_n) {
  if (epoch_n < 2) throw std::logic_error("cumulative_loss: undefined before epoch 2");
  if (static_cast<int>(history.size()) != epoch_n - 1)
    throw std::invalid_argument("cumulative_loss: history length must be n-1");
  if (!(decay > 0.0 && decay < 1.0))
    throw std::invalid_argument("cumulative_loss: decay must be in (0, 1)");
  double acc = 0.0;
  for (int e = 1; e <= epoch_n - 1; ++e)
    acc += std::pow(decay, epoch_n - 1 - e) * history[e - 1];
  return acc;
}

struct EpochPlanEntry {
  bool participates = true;
  double weight = 1.0;
};

/// Participation and weighting plan for epoch n. During warm-up every sample
/// participates with weight 1. Afterwards the top ceil(K/100 * N) samples by
/// cumulative loss participate (ties by ascending sample id) and every
/// sample gets a min-max weight in [1, amplification]; a degenerate spread
/// (max == min) collapses every weight to 1.
inline std::vector<EpochPlanEntry> plan_epoch(const std::vector<double>& cumulatives,
                                              const AhswConfig& cfg, int epoch_n) {
  const int n = static_cast<int>(cumulatives.size());
  std::vector<EpochPlanEntry> plan(n);
  if (epoch_n <= cfg.warmup_epochs) return plan;

  for (double c : cumulatives)
    if (!std::isfinite(c)) throw std::invalid_argument("plan_epoch: non-finite cumulative loss");

  double lo = *std::min_element(cumulatives.begin(), cumulatives.end());
  double hi = *std::max_element(cumulatives.begin(), cumulatives.end());
  double spread = hi - lo;
  for (int i = 0; i < n; ++i) {
    plan[i].weight =
        spread > 0.0 ? 1.0 + (cfg.amplification - 1.0) * (cumulatives[i] - lo) / spread : 1.0;
    plan[i].participates = false;
  }

  int64_t count = static_cast<int64_t>(
      std::ceil(cfg.sample_percent * static_cast<double>(n) / 100.0));
  count = std::min<int64_t>(count, n);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (cumulatives[a] != cumulatives[b]) return cumulatives[a] > cumulatives[b];
    return a < b;
  });
  for (int64_t i = 0; i < count; ++i) plan[order[i]].participates = true;
  return plan;
}

}  // namespace occloff
