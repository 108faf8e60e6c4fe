#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spm/error.hpp"

namespace spm {

/// counts[label][pred] over non-ignored points.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes) : k_(num_classes), counts_(num_classes * num_classes, 0) {
    if (num_classes == 0) throw DomainError("confusion matrix needs at least one class");
  }

  void add(std::span<const int> preds, std::span<const int> labels, int ignore_index = -1) {
    if (preds.size() != labels.size()) {
      throw DimensionError("confusion matrix: " + std::to_string(preds.size()) + " predictions vs " +
                           std::to_string(labels.size()) + " labels");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == ignore_index) continue;
      check(labels[i], "label");
      check(preds[i], "prediction");
      ++counts_[static_cast<std::size_t>(labels[i]) * k_ + static_cast<std::size_t>(preds[i])];
    }
  }

  std::size_t num_classes() const { return k_; }
  std::uint64_t at(std::size_t label, std::size_t pred) const { return counts_[label * k_ + pred]; }

  std::uint64_t label_count(std::size_t k) const {
    std::uint64_t s = 0;
    for (std::size_t j = 0; j < k_; ++j) s += at(k, j);
    return s;
  }
  std::uint64_t pred_count(std::size_t k) const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < k_; ++i) s += at(i, k);
    return s;
  }
  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto v : counts_) s += v;
    return s;
  }

  /// TP / (TP + FP + FN); empty when the class never occurs in the labels.
  std::optional<double> iou(std::size_t k) const {
    const std::uint64_t lab = label_count(k);
    if (lab == 0) return std::nullopt;
    const std::uint64_t tp = at(k, k);
    return static_cast<double>(tp) / static_cast<double>(lab + pred_count(k) - tp);
  }

  double accuracy() const {
    const std::uint64_t t = total();
    if (t == 0) return 0.0;
    std::uint64_t hit = 0;
    for (std::size_t k = 0; k < k_; ++k) hit += at(k, k);
    return static_cast<double>(hit) / static_cast<double>(t);
  }

 private:
  void check(int v, const char* what) const {
    if (v < 0 || static_cast<std::size_t>(v) >= k_) {
      throw RangeError(std::string(what) + " " + std::to_string(v) + " outside [0, " + std::to_string(k_) + ")");
    }
  }

  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

struct MiouResult {
  std::vector<std::optional<double>> per_class;
  double miou = 0.0;
  double accuracy = 0.0;
  std::size_t present = 0;
};

/// mIoU averages over classes that occur in the (non-ignored) labels.
inline MiouResult summarize(const ConfusionMatrix& cm) {
  MiouResult r;
  // Extended precision so simple rational cases round to the nearest double.
  long double total = 0.0L;
  for (std::size_t k = 0; k < cm.num_classes(); ++k) {
    r.per_class.push_back(cm.iou(k));
    if (r.per_class.back()) {
      const std::uint64_t tp = cm.at(k, k);
      total += static_cast<long double>(tp) / static_cast<long double>(cm.label_count(k) + cm.pred_count(k) - tp);
      ++r.present;
    }
  }
  r.miou = r.present ? static_cast<double>(total / static_cast<long double>(r.present)) : 0.0;
  r.accuracy = cm.accuracy();
  return r;
}

inline MiouResult evaluate_miou(std::span<const int> preds, std::span<const int> labels, std::size_t num_classes,
                                int ignore_index = -1) {
  ConfusionMatrix cm(num_classes);
  cm.add(preds, labels, ignore_index);
  return summarize(cm);
}

}  // namespace spm
