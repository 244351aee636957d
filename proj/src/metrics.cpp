#include <occloff/metrics.hpp>

#include <stdexcept>

namespace occloff {

ConfusionAccumulator::ConfusionAccumulator(int n_classes) : n_classes_(n_classes) {
  if (n_classes < 1) throw std::invalid_argument("ConfusionAccumulator: need >= 1 class");
  counts_.assign(static_cast<size_t>(n_classes + 1) * (n_classes + 1), 0);
}

void ConfusionAccumulator::add_pair(int gt, int pred) {
  if (gt < 0 || gt > n_classes_ || pred < 0 || pred > n_classes_)
    throw std::invalid_argument("ConfusionAccumulator: label out of range");
  counts_[gt * (n_classes_ + 1) + pred]++;
}

void ConfusionAccumulator::add(const std::vector<uint8_t>& gt, const std::vector<uint8_t>& pred) {
  if (gt.size() != pred.size())
    throw std::invalid_argument("ConfusionAccumulator: grid shape mismatch");
  for (size_t i = 0; i < gt.size(); ++i) add_pair(gt[i], pred[i]);
}

EvalMetrics ConfusionAccumulator::compute() const {
  EvalMetrics m;
  const int c = n_classes_ + 1;

  // binary occupied/empty split: occupied = any non-zero label
  int64_t tp = 0, fp = 0, fn = 0;
  for (int g = 0; g < c; ++g)
    for (int p = 0; p < c; ++p) {
      int64_t n = counts_[g * c + p];
      if (g != 0 && p != 0) tp += n;
      if (g == 0 && p != 0) fp += n;
      if (g != 0 && p == 0) fn += n;
    }
  m.iou = (tp + fp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp + fn) : 0.0;

  m.per_category_iou.assign(c, 0.0);
  m.category_counted.assign(c, false);
  double sum = 0.0;
  int counted = 0;
  for (int cat = 1; cat < c; ++cat) {
    int64_t ctp = counts_[cat * c + cat];
    int64_t cfp = 0, cfn = 0;
    for (int g = 0; g < c; ++g)
      if (g != cat) cfp += counts_[g * c + cat];
    for (int p = 0; p < c; ++p)
      if (p != cat) cfn += counts_[cat * c + p];
    if (ctp + cfp + cfn == 0) continue;  // absent from both gt and prediction
    double iou = static_cast<double>(ctp) / static_cast<double>(ctp + cfp + cfn);
    m.per_category_iou[cat] = iou;
    m.category_counted[cat] = true;
    sum += iou;
    counted++;
  }
  m.miou = counted > 0 ? sum / counted : 0.0;
  return m;
}

}  // namespace occloff
