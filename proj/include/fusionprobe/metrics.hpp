#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fusionprobe/error.hpp"

namespace fprobe {

/// Rows are true classes, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : classes_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const noexcept { return classes_; }

  void add(std::size_t truth, std::size_t predicted) {
    require(truth < classes_ && predicted < classes_, ErrorCode::kInvalidArgument, "class id out of range");
    ++counts_[truth * classes_ + predicted];
  }

  std::size_t at(std::size_t truth, std::size_t predicted) const { return counts_.at(truth * classes_ + predicted); }

  std::size_t row_sum(std::size_t truth) const {
    std::size_t s = 0;
    for (std::size_t p = 0; p < classes_; ++p) s += at(truth, p);
    return s;
  }

  std::size_t total() const {
    std::size_t s = 0;
    for (auto c : counts_) s += c;
    return s;
  }

  std::size_t correct() const {
    std::size_t s = 0;
    for (std::size_t c = 0; c < classes_; ++c) s += at(c, c);
    return s;
  }

  const std::vector<std::size_t>& counts() const noexcept { return counts_; }

 private:
  std::size_t classes_;
  std::vector<std::size_t> counts_;
};

/// Highest logit; ties go to the lower class id.
inline std::size_t argmax(std::span<const float> logits) {
  require(!logits.empty(), ErrorCode::kInvalidArgument, "argmax of empty logits");
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.size(); ++c)
    if (logits[c] > logits[best]) best = c;
  return best;
}

/// 0-based rank of `label` when classes are sorted by descending logit, with
/// ties ordered by lower class id first.
inline std::size_t rank_of(std::span<const float> logits, std::size_t label) {
  require(label < logits.size(), ErrorCode::kInvalidArgument, "label out of range");
  std::size_t rank = 0;
  for (std::size_t c = 0; c < logits.size(); ++c)
    if (logits[c] > logits[label] || (logits[c] == logits[label] && c < label)) ++rank;
  return rank;
}

/// Fraction of samples whose true class is among the k highest logits.
inline double topk_accuracy(std::span<const std::vector<float>> logits, std::span<const std::size_t> labels,
                            std::size_t k) {
  require(logits.size() == labels.size(), ErrorCode::kDimension, "logits and labels differ in length");
  require(!logits.empty(), ErrorCode::kInvalidArgument, "top-k accuracy of zero samples");
  require(k >= 1, ErrorCode::kInvalidArgument, "k must be >= 1");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    require(k <= logits[i].size(), ErrorCode::kInvalidArgument,
            "k = " + std::to_string(k) + " exceeds class count " + std::to_string(logits[i].size()));
    if (rank_of(logits[i], labels[i]) < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.size());
}

/// Mean per-class recall over the classes that have at least one sample.
inline double balanced_accuracy(const ConfusionMatrix& confusion) {
  double total = 0.0;
  std::size_t represented = 0;
  for (std::size_t c = 0; c < confusion.classes(); ++c) {
    const std::size_t n = confusion.row_sum(c);
    if (n == 0) continue;
    total += static_cast<double>(confusion.at(c, c)) / static_cast<double>(n);
    ++represented;
  }
  require(represented > 0, ErrorCode::kInvalidArgument, "balanced accuracy of an empty confusion matrix");
  return total / static_cast<double>(represented);
}

inline ConfusionMatrix confusion_from(std::span<const std::vector<float>> logits, std::span<const std::size_t> labels,
                                      std::size_t classes) {
  ConfusionMatrix m(classes);
  for (std::size_t i = 0; i < logits.size(); ++i) m.add(labels[i], argmax(logits[i]));
  return m;
}

}  // namespace fprobe
