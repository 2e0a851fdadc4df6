#include "biomamba/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

namespace biomamba {

int64_t ConfusionMatrix::n_samples() const {
  return std::accumulate(counts.begin(), counts.end(), int64_t{0});
}

ConfusionMatrix ConfusionMatrix::from_predictions(std::span<const int> labels,
                                                  std::span<const int> preds,
                                                  int K) {
  if (labels.size() != preds.size()) {
    throw contract_error(fmt::format("confusion matrix: {} labels vs {} predictions",
                                     labels.size(), preds.size()));
  }
  ConfusionMatrix cm(K);
  for (size_t i = 0; i < labels.size(); ++i) {
    const int t = labels[i], p = preds[i];
    if (t < 0 || t >= K || p < 0 || p >= K) {
      throw contract_error(fmt::format("confusion matrix: class out of range at sample {} "
                                       "(true {}, predicted {}, K={})", i, t, p, K));
    }
    ++cm.at(t, p);
  }
  return cm;
}

ClassificationSummary classification_metrics(const ConfusionMatrix& cm) {
  const int64_t n = cm.n_samples();
  if (n < 1) throw contract_error("classification metrics need at least one sample");
  ClassificationSummary s;
  int64_t correct = 0;
  for (int k = 0; k < cm.K; ++k) correct += cm.at(k, k);
  s.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  for (int k = 0; k < cm.K; ++k) {
    int64_t tp = cm.at(k, k), row = 0, col = 0;
    for (int j = 0; j < cm.K; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    ClassPRF c;
    c.precision = col > 0 ? static_cast<double>(tp) / static_cast<double>(col) : 0.0;
    c.recall = row > 0 ? static_cast<double>(tp) / static_cast<double>(row) : 0.0;
    const double pr = c.precision + c.recall;
    c.f1 = pr > 0 ? 2.0 * c.precision * c.recall / pr : 0.0;
    s.per_class.push_back(c);
    s.macro_precision += c.precision;
    s.macro_recall += c.recall;
    s.macro_f1 += c.f1;
    s.weighted_f1 += (static_cast<double>(row) / static_cast<double>(n)) * c.f1;
  }
  s.macro_precision /= cm.K;
  s.macro_recall /= cm.K;
  s.macro_f1 /= cm.K;
  return s;
}

// ---------------------------------------------------------------------------
// ranking metrics

namespace {

void check_binary(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw contract_error(fmt::format("rank metric: {} scores vs {} labels",
                                     scores.size(), labels.size()));
  }
  for (int l : labels) {
    if (l != 0 && l != 1) {
      throw contract_error("rank metric: labels must be 0 or 1, got " + std::to_string(l));
    }
  }
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
  check_binary(scores, labels);
  const size_t n = scores.size();
  int64_t np = 0;
  for (int l : labels) np += l;
  const int64_t nn = static_cast<int64_t>(n) - np;
  if (np == 0 || nn == 0) {
    throw data_error("auroc undefined: labels contain a single class");
  }
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&scores](size_t a, size_t b) { return scores[a] < scores[b]; });
  // Average ranks within tie groups keep the sum exact in integer+half
  // arithmetic, so the result is bit-equal to the pairwise count.
  double pos_rank_sum = 0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) pos_rank_sum += avg_rank;
    }
    i = j;
  }
  const double wins_plus_half_ties =
      pos_rank_sum - 0.5 * static_cast<double>(np) * static_cast<double>(np + 1);
  return wins_plus_half_ties / (static_cast<double>(np) * static_cast<double>(nn));
}

double auprc(std::span<const double> scores, std::span<const int> labels) {
  check_binary(scores, labels);
  const size_t n = scores.size();
  int64_t np = 0;
  for (int l : labels) np += l;
  if (np == 0) throw data_error("auprc undefined: no positive labels");
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&scores](size_t a, size_t b) { return scores[a] > scores[b]; });
  double ap = 0;
  int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    int64_t gtp = 0, gfp = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]] == 1) ++gtp; else ++gfp;
      ++j;
    }
    tp += gtp;
    fp += gfp;
    if (gtp > 0) {
      const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
      const double recall_step = static_cast<double>(gtp) / static_cast<double>(np);
      ap += recall_step * precision;
    }
    i = j;
  }
  return ap;
}

RankSummary multiclass_rank_metrics(const Tensor& probs,
                                    std::span<const int> labels) {
  if (probs.rank() != 2 || static_cast<size_t>(probs.dim(0)) != labels.size()) {
    throw contract_error("multiclass rank metrics: probs must be [B,K] matching labels, got " +
                         shape_str(probs.shape()));
  }
  const int B = probs.dim(0), K = probs.dim(1);
  if (K < 2) throw contract_error("multiclass rank metrics: K must be >= 2");
  std::vector<int64_t> support(static_cast<size_t>(K), 0);
  for (int l : labels) {
    if (l < 0 || l >= K) {
      throw contract_error(fmt::format("label {} out of range for K={}", l, K));
    }
    ++support[static_cast<size_t>(l)];
  }
  RankSummary out;
  int present = 0;
  for (int64_t s : support) present += s > 0;
  if (present < 2) {
    throw data_error("rank metrics undefined: fewer than two classes present in labels");
  }
  const double* pp = probs.values().data();
  int used = 0;
  for (int k = 0; k < K; ++k) {
    if (support[static_cast<size_t>(k)] == 0) {
      out.skipped_classes.push_back(k);
      continue;
    }
    std::vector<double> col(static_cast<size_t>(B));
    std::vector<int> bin(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
      col[static_cast<size_t>(b)] = pp[static_cast<int64_t>(b) * K + k];
      bin[static_cast<size_t>(b)] = labels[static_cast<size_t>(b)] == k ? 1 : 0;
    }
    out.auroc += auroc(col, bin);
    out.auprc += auprc(col, bin);
    ++used;
  }
  out.auroc /= used;
  out.auprc /= used;
  return out;
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) {
    throw contract_error("softmax_rows: expected [B,K], got " + shape_str(logits.shape()));
  }
  const int B = logits.dim(0), K = logits.dim(1);
  Tensor out = Tensor::zeros(logits.shape());
  const double* zp = logits.values().data();
  double* op = out.mutable_values().data();
  for (int b = 0; b < B; ++b) {
    const double* row = zp + static_cast<int64_t>(b) * K;
    double* orow = op + static_cast<int64_t>(b) * K;
    const double m = *std::max_element(row, row + K);
    double denom = 0;
    for (int k = 0; k < K; ++k) {
      orow[k] = std::exp(row[k] - m);
      denom += orow[k];
    }
    for (int k = 0; k < K; ++k) orow[k] /= denom;
  }
  return out;
}

MetricsReport evaluate_predictions(const Tensor& probs,
                                   std::span<const int> labels) {
  if (probs.rank() != 2 || static_cast<size_t>(probs.dim(0)) != labels.size()) {
    throw contract_error("evaluate: probs must be [B,K] matching labels, got " +
                         shape_str(probs.shape()));
  }
  const int B = probs.dim(0), K = probs.dim(1);
  if (B < 1) throw contract_error("evaluate: need at least one sample");
  std::vector<int> preds(static_cast<size_t>(B));
  const double* pp = probs.values().data();
  for (int b = 0; b < B; ++b) {
    const double* row = pp + static_cast<int64_t>(b) * K;
    preds[static_cast<size_t>(b)] =
        static_cast<int>(std::max_element(row, row + K) - row);
  }
  const ConfusionMatrix cm =
      ConfusionMatrix::from_predictions(labels, preds, K);
  const ClassificationSummary cls = classification_metrics(cm);
  const RankSummary rank = multiclass_rank_metrics(probs, labels);
  MetricsReport r;
  r.n_samples = B;
  r.accuracy = cls.accuracy;
  r.macro_precision = cls.macro_precision;
  r.macro_recall = cls.macro_recall;
  r.macro_f1 = cls.macro_f1;
  r.weighted_f1 = cls.weighted_f1;
  r.auroc = rank.auroc;
  r.auprc = rank.auprc;
  r.per_class = cls.per_class;
  return r;
}

std::string report_to_kv(const MetricsReport& r) {
  std::string out;
  out += fmt::format("n_samples={}\n", r.n_samples);
  out += fmt::format("accuracy={}\n", r.accuracy);
  out += fmt::format("macro_precision={}\n", r.macro_precision);
  out += fmt::format("macro_recall={}\n", r.macro_recall);
  out += fmt::format("macro_f1={}\n", r.macro_f1);
  out += fmt::format("weighted_f1={}\n", r.weighted_f1);
  out += fmt::format("auroc={}\n", r.auroc);
  out += fmt::format("auprc={}\n", r.auprc);
  for (size_t k = 0; k < r.per_class.size(); ++k) {
    out += fmt::format("class{}_precision={}\n", k, r.per_class[k].precision);
    out += fmt::format("class{}_recall={}\n", k, r.per_class[k].recall);
    out += fmt::format("class{}_f1={}\n", k, r.per_class[k].f1);
  }
  return out;
}

std::string metrics_csv_header() {
  return "n_samples,accuracy,macro_precision,macro_recall,macro_f1,weighted_f1,auroc,auprc";
}

std::string report_to_csv_row(const MetricsReport& r) {
  return fmt::format("{},{},{},{},{},{},{},{}", r.n_samples, r.accuracy,
                     r.macro_precision, r.macro_recall, r.macro_f1,
                     r.weighted_f1, r.auroc, r.auprc);
}

}  // namespace biomamba
