#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "plinf/error.hpp"

namespace plinf {

struct ConfusionCounts {
  std::vector<long> tp, fp, fn;
};

inline ConfusionCounts confusion_counts(std::span<const int> predicted, std::span<const int> truth, int classes) {
  if (predicted.size() != truth.size()) throw DataError("macro_f1: prediction and label counts differ");
  if (classes < 1) throw DataError("macro_f1: class count must be positive");
  ConfusionCounts c{std::vector<long>(static_cast<std::size_t>(classes)), std::vector<long>(static_cast<std::size_t>(classes)),
                    std::vector<long>(static_cast<std::size_t>(classes))};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int p = predicted[i], t = truth[i];
    if (p < 0 || p >= classes || t < 0 || t >= classes)
      throw DataError("macro_f1: label " + std::to_string(std::max(p, t)) + " out of range for " + std::to_string(classes) + " classes");
    if (p == t) {
      ++c.tp[static_cast<std::size_t>(t)];
    } else {
      ++c.fp[static_cast<std::size_t>(p)];
      ++c.fn[static_cast<std::size_t>(t)];
    }
  }
  return c;
}

/// Unweighted mean of per-class F1 over all `classes`; 0/0 counts as 0.
inline double macro_f1(std::span<const int> predicted, std::span<const int> truth, int classes) {
  const auto c = confusion_counts(predicted, truth, classes);
  double total = 0.0;
  for (int k = 0; k < classes; ++k) {
    const auto i = static_cast<std::size_t>(k);
    const long denom = 2 * c.tp[i] + c.fp[i] + c.fn[i];
    if (denom > 0) total += 2.0 * static_cast<double>(c.tp[i]) / static_cast<double>(denom);
  }
  return total / classes;
}

}  // namespace plinf
