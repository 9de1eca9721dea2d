#pragma once

#include <vector>

#include "smil/tensor.hpp"

namespace smil {

// Macro metrics are unweighted means of one-vs-rest values over the classes
// present in the labels; absent classes are skipped with a warning on stderr.
// A one-vs-rest value whose denominator is zero contributes 0. AUC is the
// rank statistic with ties credited 0.5.
struct MetricsReport {
  double balanced_accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  double macro_auc = 0.0;
  double cross_entropy = 0.0;
};

MetricsReport compute_metrics(const TensorT<double>& probs, const std::vector<int>& labels);
MetricsReport compute_metrics(const TensorT<float>& probs, const std::vector<int>& labels);

}  // namespace smil
