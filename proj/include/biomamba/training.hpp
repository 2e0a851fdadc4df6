#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "biomamba/dataio.hpp"
#include "biomamba/model.hpp"
#include "biomamba/tensor.hpp"

namespace biomamba {

// Mean over the batch of -log softmax(logits)[label], stabilized by row-max
// subtraction. Differentiable with respect to logits.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

struct AdamConfig {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam over a fixed parameter list. Moment buffers start at
// zero, so a parameter whose gradient is exactly zero on every step (a
// masked sparse weight) never moves.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg);

  // Applies one update from the gradients currently on the parameters and
  // clears them. Parameters without a gradient are left untouched.
  void step();

  int64_t steps_taken() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamConfig cfg_;
  int64_t step_ = 0;
};

struct TrainConfig {
  double learning_rate = 5e-5;
  int batch_size = 32;
  int epochs = 100;
  uint64_t seed = 42;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  // learning_rate 0 is legal and leaves parameters untouched; negative
  // rates, non-positive batch sizes or epoch counts are rejected.
  void validate() const;
};

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double val_f1 = 0.0;  // macro F1
  double wall_ms = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  int best_epoch = 0;  // earliest epoch attaining the best val accuracy
  double best_val_accuracy = 0.0;
};

// Runs the full loop on the model in place, then restores the parameter
// snapshot from the best-validation-accuracy epoch. Batch order reshuffles
// every epoch from a (seed, epoch) derived stream, so identical inputs give
// identical histories and checkpoints.
TrainResult train_model(BioMambaModel& m, const BiosignalDataset& train_ds,
                        const BiosignalDataset& val_ds, const TrainConfig& cfg);

// Validation-style forward pass over a whole dataset: class probabilities
// [n, K] in record order, computed without recording gradients.
Tensor predict_probabilities(const BioMambaModel& m, const BiosignalDataset& ds,
                             int batch_size);

std::string history_csv_header();
std::string history_csv_row(const EpochStats& e);

}  // namespace biomamba
