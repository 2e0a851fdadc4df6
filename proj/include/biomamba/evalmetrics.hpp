#pragma once

#include <span>
#include <string>
#include <vector>

#include "biomamba/tensor.hpp"

namespace biomamba {

struct ConfusionMatrix {
  int K = 0;
  std::vector<int64_t> counts;  // K*K row-major; rows = true class, cols = predicted

  explicit ConfusionMatrix(int k) : K(k), counts(static_cast<size_t>(k) * k, 0) {}
  int64_t& at(int truth, int pred) { return counts[static_cast<size_t>(truth * K + pred)]; }
  int64_t at(int truth, int pred) const { return counts[static_cast<size_t>(truth * K + pred)]; }
  int64_t n_samples() const;

  static ConfusionMatrix from_predictions(std::span<const int> labels,
                                          std::span<const int> preds, int K);
};

struct ClassPRF {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

struct ClassificationSummary {
  double accuracy = 0;
  double macro_precision = 0;
  double macro_recall = 0;
  double macro_f1 = 0;
  double weighted_f1 = 0;  // support-weighted variant, off the default report path
  std::vector<ClassPRF> per_class;
};

// Per-class P = TP/(TP+FP), R = TP/(TP+FN), F1 = 2PR/(P+R); any class whose
// denominator is zero contributes 0 to the unweighted macro means.
ClassificationSummary classification_metrics(const ConfusionMatrix& cm);

// Probability that a random positive outranks a random negative, ties worth
// half (Mann-Whitney). Exactly equal to the O(B^2) pairwise count.
double auroc(std::span<const double> scores, std::span<const int> labels);

// Average precision: sum of (R_i - R_{i-1}) * P_i over descending-score
// thresholds, samples with tied scores grouped into one threshold.
double auprc(std::span<const double> scores, std::span<const int> labels);

struct RankSummary {
  double auroc = 0;
  double auprc = 0;
  std::vector<int> skipped_classes;  // absent from labels, excluded from means
};

// One-vs-rest per class, unweighted mean over classes present in the labels.
RankSummary multiclass_rank_metrics(const Tensor& probs,
                                    std::span<const int> labels);

// Row-wise softmax with max subtraction; plain values, never on the tape.
Tensor softmax_rows(const Tensor& logits);

struct MetricsReport {
  int64_t n_samples = 0;
  double accuracy = 0;
  double macro_precision = 0;
  double macro_recall = 0;
  double macro_f1 = 0;
  double weighted_f1 = 0;
  double auroc = 0;
  double auprc = 0;
  std::vector<ClassPRF> per_class;
};

// probs: [B, K] rows on the simplex; labels in [0, K)
MetricsReport evaluate_predictions(const Tensor& probs,
                                   std::span<const int> labels);

// key=value lines, one metric per line
std::string report_to_kv(const MetricsReport& r);

// Fixed column order shared by the header and every row.
std::string metrics_csv_header();
std::string report_to_csv_row(const MetricsReport& r);

}  // namespace biomamba
