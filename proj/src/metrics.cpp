#include "smil/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace smil {

namespace {

// Rank AUC for one class: score each sample by its predicted probability of
// the class, compare every positive against every negative, ties count 0.5.
double one_vs_rest_auc(const TensorT<double>& probs, const std::vector<int>& labels, int cls) {
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double s = probs.at(static_cast<int>(i), cls);
    if (labels[i] == cls) {
      pos.push_back(s);
    } else {
      neg.push_back(s);
    }
  }
  if (pos.empty() || neg.empty()) {
    return -1.0;
  }
  // Sort negatives once; for each positive, count strictly-smaller and equal
  // negatives by binary search.
  std::sort(neg.begin(), neg.end());
  double total = 0.0;
  for (double p : pos) {
    const auto lo = std::lower_bound(neg.begin(), neg.end(), p);
    const auto hi = std::upper_bound(neg.begin(), neg.end(), p);
    total += static_cast<double>(lo - neg.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return total / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

}  // namespace

MetricsReport compute_metrics(const TensorT<double>& probs, const std::vector<int>& labels) {
  require(probs.ndim() == 2, "compute_metrics: probs must be [n, c]");
  const int n = probs.shape[0];
  const int c = probs.shape[1];
  require(n >= 1 && static_cast<int>(labels.size()) == n,
          "compute_metrics: labels length does not match probs");
  for (int label : labels) {
    require(label >= 0 && label < c, "compute_metrics: label out of range");
  }

  // Argmax predictions, lowest index on ties.
  std::vector<int> pred(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int j = 1; j < c; ++j) {
      if (probs.at(i, j) > probs.at(i, best)) {
        best = j;
      }
    }
    pred[static_cast<std::size_t>(i)] = best;
  }

  std::vector<std::int64_t> support(static_cast<std::size_t>(c), 0);
  for (int label : labels) {
    ++support[static_cast<std::size_t>(label)];
  }

  MetricsReport report;
  int present = 0;
  int auc_classes = 0;
  for (int cls = 0; cls < c; ++cls) {
    if (support[static_cast<std::size_t>(cls)] == 0) {
      std::cerr << "compute_metrics: class " << cls
                << " absent from labels, skipped in macro averages\n";
      continue;
    }
    ++present;
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (int i = 0; i < n; ++i) {
      const bool is_cls = labels[static_cast<std::size_t>(i)] == cls;
      const bool said_cls = pred[static_cast<std::size_t>(i)] == cls;
      tp += is_cls && said_cls;
      fp += !is_cls && said_cls;
      fn += is_cls && !said_cls;
    }
    const double precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    const double recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    const double f1 =
        precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    report.macro_precision += precision;
    report.macro_recall += recall;
    report.macro_f1 += f1;

    const double auc = one_vs_rest_auc(probs, labels, cls);
    if (auc >= 0.0) {
      report.macro_auc += auc;
      ++auc_classes;
    }
  }
  require(present >= 1, "compute_metrics: no class present");
  report.macro_precision /= present;
  report.macro_recall /= present;
  report.macro_f1 /= present;
  report.balanced_accuracy = report.macro_recall;
  if (auc_classes > 0) {
    report.macro_auc /= auc_classes;
  } else {
    std::cerr << "compute_metrics: AUC undefined (single-class labels), reported as 0\n";
  }

  constexpr double floor = 1e-12;
  double ce = 0.0;
  for (int i = 0; i < n; ++i) {
    ce -= std::log(std::max(probs.at(i, labels[static_cast<std::size_t>(i)]), floor));
  }
  report.cross_entropy = ce / n;
  return report;
}

MetricsReport compute_metrics(const TensorT<float>& probs, const std::vector<int>& labels) {
  return compute_metrics(tensor_cast<double>(probs), labels);
}

}  // namespace smil
