#include "biomamba/training.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>

#include "biomamba/evalmetrics.hpp"

namespace biomamba {

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2)
    throw contract_error("cross_entropy: logits must be [batch, classes], got " +
                         shape_str(logits.shape()));
  const int B = logits.dim(0), K = logits.dim(1);
  if (static_cast<int>(labels.size()) != B)
    throw contract_error(fmt::format("cross_entropy: {} labels for a batch of {}",
                                     labels.size(), B));
  for (int b = 0; b < B; ++b)
    if (labels[b] < 0 || labels[b] >= K)
      throw data_error(fmt::format("label {} of record {} is outside [0,{})",
                                   labels[b], b, K));

  // softmax rows are kept for the backward pass
  std::vector<double> probs(static_cast<size_t>(B) * static_cast<size_t>(K));
  double total = 0;
  const double* lp = logits.values().data();
  for (int b = 0; b < B; ++b) {
    const double* row = lp + static_cast<int64_t>(b) * K;
    double mx = row[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double sum = 0;
    for (int k = 0; k < K; ++k) {
      const double e = std::exp(row[k] - mx);
      probs[static_cast<size_t>(b) * K + static_cast<size_t>(k)] = e;
      sum += e;
    }
    for (int k = 0; k < K; ++k)
      probs[static_cast<size_t>(b) * K + static_cast<size_t>(k)] /= sum;
    total += std::log(sum) + mx - row[labels[b]];
  }
  Tensor loss = Tensor::scalar(total / B);
  if (OpAccess::should_record({&logits})) {
    Tensor tl = logits, to = loss;
    std::vector<int> lab(labels.begin(), labels.end());
    auto saved = std::make_shared<std::vector<double>>(std::move(probs));
    OpAccess::record("cross_entropy", {&logits}, loss, [=]() {
      const double scale = OpAccess::grad_buffer(to)[0] / B;
      auto gl = OpAccess::grad_buffer(tl);
      for (int b = 0; b < B; ++b) {
        for (int k = 0; k < K; ++k) {
          const size_t i = static_cast<size_t>(b) * K + static_cast<size_t>(k);
          gl[i] += scale * ((*saved)[i] - (lab[static_cast<size_t>(b)] == k ? 1.0 : 0.0));
        }
      }
    });
  }
  return loss;
}

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.learning_rate >= 0) || !std::isfinite(cfg_.learning_rate))
    throw contract_error(fmt::format("adam: learning rate {} is invalid",
                                     cfg_.learning_rate));
  for (double beta : {cfg_.beta1, cfg_.beta2})
    if (!(beta >= 0) || beta >= 1)
      throw contract_error(fmt::format("adam: beta {} is outside [0,1)", beta));
  if (!(cfg_.epsilon > 0))
    throw contract_error("adam: epsilon must be positive");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<size_t>(p.size()), 0.0);
    v_.emplace_back(static_cast<size_t>(p.size()), 0.0);
  }
}

void Adam::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto vals = p.mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < m.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      vals[j] -= cfg_.learning_rate * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.epsilon);
    }
    p.zero_grad();
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate))
    throw config_error(fmt::format("learning_rate {} must be a finite non-negative number",
                                   learning_rate));
  if (batch_size < 1)
    throw config_error(fmt::format("batch_size {} must be at least 1", batch_size));
  if (epochs < 1)
    throw config_error(fmt::format("epochs {} must be at least 1", epochs));
  for (double beta : {beta1, beta2})
    if (!(beta >= 0) || beta >= 1)
      throw config_error(fmt::format("adam beta {} is outside [0,1)", beta));
  if (!(epsilon > 0)) throw config_error("adam epsilon must be positive");
}

namespace {

void check_compatible(const BioMambaModel& m, const BiosignalDataset& ds,
                      const char* which) {
  if (ds.records.empty())
    throw data_error(fmt::format("{} split is empty", which));
  if (ds.meta.T != m.config.T || ds.meta.C != m.config.C)
    throw data_error(fmt::format(
        "{} split shape [{},{}] does not match the model input [{},{}]", which,
        ds.meta.T, ds.meta.C, m.config.T, m.config.C));
  if (ds.meta.K > m.config.K)
    throw data_error(fmt::format("{} split has {} classes but the model emits {}",
                                 which, ds.meta.K, m.config.K));
}

std::vector<int> argmax_rows(const Tensor& probs) {
  const int n = probs.dim(0), K = probs.dim(1);
  const double* p = probs.values().data();
  std::vector<int> preds(static_cast<size_t>(n));
  for (int r = 0; r < n; ++r) {
    const double* row = p + static_cast<int64_t>(r) * K;
    // ties resolve to the lowest class index
    preds[static_cast<size_t>(r)] =
        static_cast<int>(std::max_element(row, row + K) - row);
  }
  return preds;
}

}  // namespace

Tensor predict_probabilities(const BioMambaModel& m, const BiosignalDataset& ds,
                             int batch_size) {
  if (batch_size < 1) throw contract_error("predict: batch size must be at least 1");
  check_compatible(m, ds, "prediction");
  NoGradGuard ng;
  const size_t n = ds.size();
  const int K = m.config.K;
  std::vector<double> out(n * static_cast<size_t>(K));
  std::vector<size_t> indices;
  for (size_t start = 0; start < n; start += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(n, start + static_cast<size_t>(batch_size));
    indices.resize(end - start);
    std::iota(indices.begin(), indices.end(), start);
    Batch b = stack_batch(ds, indices);
    Tensor probs = softmax_rows(forward(m, b.x));
    const auto src = probs.values();
    std::copy(src.begin(), src.end(),
              out.begin() + static_cast<long>(start * static_cast<size_t>(K)));
  }
  return Tensor::from_data({static_cast<int>(n), K}, std::move(out));
}

TrainResult train_model(BioMambaModel& m, const BiosignalDataset& train_ds,
                        const BiosignalDataset& val_ds, const TrainConfig& cfg) {
  cfg.validate();
  check_compatible(m, train_ds, "training");
  check_compatible(m, val_ds, "validation");

  auto named = parameters(m);
  std::vector<Tensor> params;
  params.reserve(named.size());
  for (auto& np : named) params.push_back(np.tensor);
  Adam opt(params, {cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon});

  std::vector<int> val_labels;
  val_labels.reserve(val_ds.size());
  for (const auto& r : val_ds.records) val_labels.push_back(r.label);

  const size_t n = train_ds.size();
  std::vector<size_t> order(n);
  TrainResult res;
  res.best_val_accuracy = -1.0;
  std::vector<std::vector<double>> best_params;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), size_t{0});
    Rng shuffle_rng(mix_seed(cfg.seed, static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double loss_sum = 0;
    for (size_t start = 0; start < n; start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(n, start + static_cast<size_t>(cfg.batch_size));
      Batch b = stack_batch(
          train_ds, std::span<const size_t>(order.data() + start, end - start));
      Tensor loss = cross_entropy(forward(m, b.x), b.labels);
      backward(loss);
      opt.step();
      loss_sum += loss.item() * static_cast<double>(end - start);
    }

    Tensor probs = predict_probabilities(m, val_ds, cfg.batch_size);
    const auto preds = argmax_rows(probs);
    const auto summary = classification_metrics(
        ConfusionMatrix::from_predictions(val_labels, preds, m.config.K));

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(n);
    stats.val_accuracy = summary.accuracy;
    stats.val_f1 = summary.macro_f1;
    stats.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
    res.history.push_back(stats);

    if (stats.val_accuracy > res.best_val_accuracy) {
      res.best_val_accuracy = stats.val_accuracy;
      res.best_epoch = epoch;
      best_params.clear();
      best_params.reserve(params.size());
      for (const auto& p : params)
        best_params.emplace_back(p.values().begin(), p.values().end());
    }
  }

  for (size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].mutable_values();
    std::copy(best_params[i].begin(), best_params[i].end(), dst.begin());
  }
  return res;
}

std::string history_csv_header() {
  return "epoch,train_loss,val_accuracy,val_f1,wall_ms";
}

std::string history_csv_row(const EpochStats& e) {
  return fmt::format("{},{},{},{},{}", e.epoch, e.train_loss, e.val_accuracy,
                     e.val_f1, e.wall_ms);
}

}  // namespace biomamba
