#pragma once

#include <cstdint>
#include <vector>

namespace occloff {

/// Per-category and binary occupancy metrics accumulated over a split.
struct EvalMetrics {
  double iou = 0.0;   // binary occupied/empty
  double miou = 0.0;  // mean over semantic categories present in gt or pred
  std::vector<double> per_category_iou;  // index 0 unused (empty class)
  std::vector<bool> category_counted;    // whether the category entered the mean
};

/// Confusion-matrix accumulator over (gt, pred) label pairs in {0..n_classes}.
class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(int n_classes);

  void add(const std::vector<uint8_t>& gt, const std::vector<uint8_t>& pred);
  void add_pair(int gt, int pred);

  /// IoU per category c: TP / (TP + FP + FN); categories absent from both
  /// prediction and ground truth are excluded from the mIoU mean.
  EvalMetrics compute() const;

  int64_t count(int gt, int pred) const { return counts_[gt * (n_classes_ + 1) + pred]; }

 private:
  int n_classes_;
  std::vector<int64_t> counts_;  // (n_classes+1)^2
};

}  // namespace occloff
