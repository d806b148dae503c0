#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "cpae/errors.hpp"

namespace cpae {

// Fraction of transferred keypoints within each distance threshold, pooled
// over all (pair, keypoint) instances.
struct PckCurve {
  std::vector<double> thresholds;
  std::vector<double> fractions;
  std::int64_t instances = 0;
  std::int64_t pairs = 0;

  double at(double threshold) const {
    for (std::size_t i = 0; i < thresholds.size(); ++i)
      if (std::abs(thresholds[i] - threshold) < 1e-12) return fractions[i];
    throw ContractError("threshold not on the evaluation grid");
  }
};

// 0.00 .. 0.10 in steps of 0.01.
inline std::vector<double> default_pck_thresholds() {
  std::vector<double> t;
  for (int i = 0; i <= 10; ++i) t.push_back(i * 0.01);
  return t;
}

inline PckCurve pck(const std::vector<double>& errors, std::vector<double> thresholds,
                    std::int64_t pair_count = 0) {
  if (errors.empty())
    throw ContractError("keypoint evaluation is empty: no shared keypoint ids across pairs");
  if (!std::is_sorted(thresholds.begin(), thresholds.end()))
    throw ContractError("thresholds must be ascending");
  PckCurve curve;
  curve.thresholds = std::move(thresholds);
  curve.instances = static_cast<std::int64_t>(errors.size());
  curve.pairs = pair_count;
  for (double t : curve.thresholds) {
    std::int64_t hit = 0;
    for (double e : errors)
      if (e <= t) ++hit;
    curve.fractions.push_back(static_cast<double>(hit) / static_cast<double>(errors.size()));
  }
  return curve;
}

// Per-label intersection-over-union between a transferred labeling and the
// ground truth.
struct IouReport {
  std::map<int, double> per_label;
  double mean_iou = 0;
  std::int64_t pair_count = 1;
};

// Mean is over labels present in the ground truth; with `strict`, labels
// present only in the prediction contribute a zero.
inline IouReport iou(const std::vector<int>& predicted, const std::vector<int>& ground_truth,
                     bool strict = false, const std::set<int>* vocabulary = nullptr) {
  if (predicted.size() != ground_truth.size())
    throw ContractError("label IoU requires equal point counts");
  if (predicted.empty()) throw ContractError("label IoU on empty labelings");
  if (vocabulary) {
    for (int l : predicted)
      if (!vocabulary->count(l)) throw ContractError("predicted label outside the shared vocabulary");
    for (int l : ground_truth)
      if (!vocabulary->count(l)) throw ContractError("ground-truth label outside the shared vocabulary");
  }

  std::set<int> gt_labels(ground_truth.begin(), ground_truth.end());
  std::set<int> eval_labels = gt_labels;
  if (strict)
    for (int l : predicted) eval_labels.insert(l);

  IouReport report;
  double acc = 0;
  for (int label : eval_labels) {
    std::int64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
      const bool p = predicted[i] == label;
      const bool g = ground_truth[i] == label;
      inter += (p && g) ? 1 : 0;
      uni += (p || g) ? 1 : 0;
    }
    const double v = uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
    report.per_label[label] = v;
    acc += v;
  }
  report.mean_iou = acc / static_cast<double>(eval_labels.size());
  return report;
}

// Table-style aggregation: mean over pairs of the per-pair mean IoU.
inline IouReport iou_aggregate(const std::vector<IouReport>& reports) {
  if (reports.empty()) throw ContractError("no IoU reports to aggregate");
  IouReport out;
  out.pair_count = static_cast<std::int64_t>(reports.size());
  std::map<int, std::pair<double, int>> sums;
  double acc = 0;
  for (const auto& r : reports) {
    acc += r.mean_iou;
    for (const auto& [label, v] : r.per_label) {
      sums[label].first += v;
      sums[label].second += 1;
    }
  }
  for (const auto& [label, s] : sums) out.per_label[label] = s.first / s.second;
  out.mean_iou = acc / static_cast<double>(reports.size());
  return out;
}

}  // namespace cpae
