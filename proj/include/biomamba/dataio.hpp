#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "biomamba/common.hpp"
#include "biomamba/tensor.hpp"

namespace biomamba {

struct BiosignalRecord {
  Tensor sample;       // [T, C], time-major
  int label = 0;       // in [0, K)
  int subject_id = 0;  // must fit in u16
};

struct DatasetMeta {
  int T = 0;
  int C = 0;
  int K = 0;
  double sampling_rate_hz = 0.0;
  // In-memory provenance tag only; the on-disk container has no field for it.
  std::string modality = "unknown";
};

struct BiosignalDataset {
  DatasetMeta meta;
  std::vector<BiosignalRecord> records;

  size_t size() const { return records.size(); }
  std::vector<int> subjects() const;  // sorted unique ids
  void validate() const;              // throws data_error
};

// Container layout: magic "BSG1", then little-endian u32 n_records, T, C, K,
// fs_mHz, then per record u16 subject_id, u16 label, T*C float32 row-major
// (time-major). Values are promoted to double on load.
void write_dataset(const std::string& path, const BiosignalDataset& ds);
BiosignalDataset read_dataset(const std::string& path);

struct SplitSpec {
  double train_frac = 0.6;
  double val_frac = 0.2;
  double test_frac = 0.2;
  uint64_t seed = 0;
  // Explicit mode is engaged when any list is non-empty. An empty train list
  // then collects every subject missing from val/test.
  std::vector<int> train_subjects;
  std::vector<int> val_subjects;
  std::vector<int> test_subjects;

  bool explicit_mode() const {
    return !train_subjects.empty() || !val_subjects.empty() ||
           !test_subjects.empty();
  }
};

struct SplitResult {
  BiosignalDataset train, val, test;
  // Subject ids actually present in each part, sorted ascending.
  std::vector<int> train_subjects, val_subjects, test_subjects;
};

// Partitions records by subject so no subject crosses splits. Fractional
// mode floors the val/test subject counts and gives the remainder to train.
SplitResult subject_split(const BiosignalDataset& ds, const SplitSpec& spec);

struct SynthConfig {
  int n_subjects = 8;
  int trials_per_subject = 100;  // even; labels alternate 0,1 per subject
  int T = 256;
  int C = 4;
  double f_signal_hz = 10.0;
  double fs_hz = 128.0;
  // Tone-to-noise power ratio for class 1. Infinity yields a noise-free
  // tone; both classes always carry unit total power per timestep.
  double snr = 3.0;
  uint64_t seed = 42;
};

// Two-class generator separable in frequency but not in time: class 1 adds
// a fixed-frequency sinusoid with a fresh uniform phase per trial (shared
// across channels), class 0 is white noise of matched total power. Each
// subject scales its trials by one amplitude factor drawn from [0.9, 1.1].
BiosignalDataset synth_spectral(const SynthConfig& cfg);

// data CSV: one row per timestep, columns = channels, records concatenated
// in order. Sidecar CSV: one "label,subject_id" row per record. '#' lines
// and blank lines are skipped in both. T is inferred from the row count;
// K from the labels unless k_hint > 0.
BiosignalDataset import_csv(const std::string& data_path,
                            const std::string& sidecar_path, double fs_hz,
                            int k_hint = 0);

struct Batch {
  Tensor x;                 // [B, T, C]
  std::vector<int> labels;  // B entries
};

Batch stack_batch(const BiosignalDataset& ds, std::span<const size_t> indices);

}  // namespace biomamba
