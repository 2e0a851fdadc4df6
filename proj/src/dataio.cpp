#include "biomamba/dataio.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

namespace biomamba {

namespace {

constexpr char kMagic[4] = {'B', 'S', 'G', '1'};

uint32_t fs_to_mhz(double fs_hz) {
  const double mhz = std::round(fs_hz * 1000.0);
  if (!(mhz > 0) || mhz > static_cast<double>(UINT32_MAX))
    throw data_error(fmt::format(
        "sampling rate {} Hz does not fit the container's millihertz field",
        fs_hz));
  return static_cast<uint32_t>(mhz);
}

}  // namespace

std::vector<int> BiosignalDataset::subjects() const {
  std::set<int> ids;
  for (const auto& r : records) ids.insert(r.subject_id);
  return {ids.begin(), ids.end()};
}

void BiosignalDataset::validate() const {
  if (meta.T < 1 || meta.C < 1)
    throw data_error(fmt::format("dataset shape [{},{}] is empty", meta.T, meta.C));
  if (meta.K < 2)
    throw data_error(fmt::format("dataset needs at least 2 classes, has {}", meta.K));
  if (meta.K > 65536)
    throw data_error("class count exceeds the container's 16-bit label field");
  fs_to_mhz(meta.sampling_rate_hz);
  if (records.size() > UINT32_MAX) throw data_error("too many records for the container");
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.sample.shape() != Shape{meta.T, meta.C})
      throw data_error(fmt::format(
          "record {} sample shape {} does not match the dataset shape [{},{}]",
          i, shape_str(r.sample.shape()), meta.T, meta.C));
    if (r.label < 0 || r.label >= meta.K)
      throw data_error(fmt::format("record {} label {} is outside [0,{})", i,
                                   r.label, meta.K));
    if (r.subject_id < 0 || r.subject_id > 65535)
      throw data_error(fmt::format(
          "record {} subject id {} does not fit the container's 16-bit field",
          i, r.subject_id));
  }
}

void write_dataset(const std::string& path, const BiosignalDataset& ds) {
  ds.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw data_error(fmt::format("cannot open '{}' for writing", path));
  wire::write_bytes(os, kMagic, 4);
  wire::write_u32(os, static_cast<uint32_t>(ds.records.size()));
  wire::write_u32(os, static_cast<uint32_t>(ds.meta.T));
  wire::write_u32(os, static_cast<uint32_t>(ds.meta.C));
  wire::write_u32(os, static_cast<uint32_t>(ds.meta.K));
  wire::write_u32(os, fs_to_mhz(ds.meta.sampling_rate_hz));
  for (const auto& r : ds.records) {
    wire::write_u16(os, static_cast<uint16_t>(r.subject_id));
    wire::write_u16(os, static_cast<uint16_t>(r.label));
    for (double v : r.sample.values()) wire::write_f32(os, static_cast<float>(v));
  }
  os.flush();
  if (!os) throw data_error(fmt::format("write to '{}' failed", path));
}

BiosignalDataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw data_error(fmt::format("cannot open '{}'", path));
  wire::Reader r(is, path);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw data_error(
        fmt::format("{}: bad magic at offset 0, not a BSG1 container", path));

  BiosignalDataset ds;
  const uint32_t n_records = r.u32("n_records");
  auto dim = [&](const char* field) {
    const uint64_t at = r.offset();
    const uint32_t v = r.u32(field);
    if (v == 0)
      throw data_error(
          fmt::format("{}: field {} is zero at offset {}", path, field, at));
    if (v > 1u << 24)
      throw data_error(fmt::format("{}: field {} = {} at offset {} is implausibly large",
                                   path, field, v, at));
    return static_cast<int>(v);
  };
  ds.meta.T = dim("T");
  ds.meta.C = dim("C");
  ds.meta.K = dim("K");
  ds.meta.sampling_rate_hz = static_cast<double>(r.u32("fs_mHz")) / 1000.0;

  const size_t n_values = static_cast<size_t>(ds.meta.T) * static_cast<size_t>(ds.meta.C);
  ds.records.reserve(n_records);
  for (uint32_t i = 0; i < n_records; ++i) {
    BiosignalRecord rec;
    const uint64_t at = r.offset();
    rec.subject_id = r.u16("subject_id");
    rec.label = r.u16("label");
    if (rec.label >= ds.meta.K)
      throw data_error(fmt::format(
          "{}: record {} label {} is outside [0,{}) at offset {}", path, i,
          rec.label, ds.meta.K, at + 2));
    std::vector<double> values(n_values);
    for (size_t j = 0; j < n_values; ++j)
      values[j] = static_cast<double>(r.f32("sample"));
    rec.sample = Tensor::from_data({ds.meta.T, ds.meta.C}, std::move(values));
    ds.records.push_back(std::move(rec));
  }
  if (!r.at_eof())
    throw data_error(fmt::format(
        "{}: {} trailing bytes after the last declared record at offset {}",
        path, "unexpected", r.offset()));
  return ds;
}

namespace {

BiosignalDataset filter_by_subjects(const BiosignalDataset& ds,
                                    const std::set<int>& keep) {
  BiosignalDataset out;
  out.meta = ds.meta;
  for (const auto& r : ds.records)
    if (keep.count(r.subject_id)) out.records.push_back(r);
  return out;
}

void check_disjoint(const std::vector<int>& a, const std::vector<int>& b,
                    const char* na, const char* nb) {
  const std::set<int> sa(a.begin(), a.end());
  for (int id : b)
    if (sa.count(id))
      throw config_error(fmt::format(
          "split lists overlap: subject {} appears in both {} and {}", id, na, nb));
}

}  // namespace

SplitResult subject_split(const BiosignalDataset& ds, const SplitSpec& spec) {
  ds.validate();
  const std::vector<int> all = ds.subjects();
  std::set<int> train_set, val_set, test_set;

  if (spec.explicit_mode()) {
    check_disjoint(spec.train_subjects, spec.val_subjects, "train", "val");
    check_disjoint(spec.train_subjects, spec.test_subjects, "train", "test");
    check_disjoint(spec.val_subjects, spec.test_subjects, "val", "test");
    val_set.insert(spec.val_subjects.begin(), spec.val_subjects.end());
    test_set.insert(spec.test_subjects.begin(), spec.test_subjects.end());
    if (spec.train_subjects.empty()) {
      for (int id : all)
        if (!val_set.count(id) && !test_set.count(id)) train_set.insert(id);
    } else {
      train_set.insert(spec.train_subjects.begin(), spec.train_subjects.end());
      for (int id : all)
        if (!train_set.count(id) && !val_set.count(id) && !test_set.count(id))
          throw config_error(fmt::format(
              "subject {} is not assigned to any split list", id));
    }
  } else {
    for (double f : {spec.train_frac, spec.val_frac, spec.test_frac})
      if (!(f >= 0.0) || f > 1.0)
        throw config_error(fmt::format("split fraction {} is outside [0,1]", f));
    if (spec.train_frac + spec.val_frac + spec.test_frac > 1.0 + 1e-9)
      throw config_error("split fractions sum to more than 1");
    if (all.size() < 3)
      throw data_error(fmt::format(
          "subject-wise fractional split needs at least 3 subjects, dataset has {}",
          all.size()));
    std::vector<int> order = all;
    Rng rng(spec.seed);
    rng.shuffle(order);
    const size_t n = order.size();
    const size_t n_val = static_cast<size_t>(
        std::floor(spec.val_frac * static_cast<double>(n)));
    const size_t n_test = static_cast<size_t>(
        std::floor(spec.test_frac * static_cast<double>(n)));
    const size_t n_train = n - n_val - n_test;  // remainder goes to train
    train_set.insert(order.begin(), order.begin() + static_cast<long>(n_train));
    val_set.insert(order.begin() + static_cast<long>(n_train),
                   order.begin() + static_cast<long>(n_train + n_val));
    test_set.insert(order.begin() + static_cast<long>(n_train + n_val), order.end());
  }

  SplitResult out;
  out.train = filter_by_subjects(ds, train_set);
  out.val = filter_by_subjects(ds, val_set);
  out.test = filter_by_subjects(ds, test_set);
  out.train_subjects = out.train.subjects();
  out.val_subjects = out.val.subjects();
  out.test_subjects = out.test.subjects();
  return out;
}

BiosignalDataset synth_spectral(const SynthConfig& cfg) {
  if (cfg.n_subjects < 1 || cfg.n_subjects > 65536)
    throw config_error(fmt::format("n_subjects {} is outside [1,65536]", cfg.n_subjects));
  if (cfg.trials_per_subject < 2 || cfg.trials_per_subject % 2 != 0)
    throw config_error(fmt::format(
        "trials_per_subject must be even and >= 2 for exact class balance, got {}",
        cfg.trials_per_subject));
  if (cfg.T < 1 || cfg.C < 1)
    throw config_error(fmt::format("sample shape [{},{}] is empty", cfg.T, cfg.C));
  if (!(cfg.fs_hz > 0))
    throw config_error(fmt::format("fs_hz must be positive, got {}", cfg.fs_hz));
  if (!(cfg.f_signal_hz > 0) || cfg.f_signal_hz >= cfg.fs_hz / 2)
    throw config_error(fmt::format(
        "f_signal_hz {} must lie in (0, fs/2) = (0, {})", cfg.f_signal_hz,
        cfg.fs_hz / 2));
  if (std::isnan(cfg.snr) || cfg.snr < 0)
    throw config_error(fmt::format("snr must be non-negative, got {}", cfg.snr));

  // Unit total power per timestep for both classes: the tone carries
  // snr/(1+snr) of it and the class-1 noise the rest.
  const double p_signal = std::isinf(cfg.snr) ? 1.0 : cfg.snr / (1.0 + cfg.snr);
  const double amp = std::sqrt(2.0 * p_signal);
  const double sigma1 = std::sqrt(1.0 - p_signal);
  const double sigma0 = 1.0;
  const double two_pi = 6.283185307179586476925286766559;

  BiosignalDataset ds;
  ds.meta = {cfg.T, cfg.C, 2, cfg.fs_hz, "synthetic"};
  ds.records.reserve(static_cast<size_t>(cfg.n_subjects) *
                     static_cast<size_t>(cfg.trials_per_subject));
  Rng rng(cfg.seed);
  for (int s = 0; s < cfg.n_subjects; ++s) {
    const double gain = rng.uniform(0.9, 1.1);
    for (int trial = 0; trial < cfg.trials_per_subject; ++trial) {
      const int label = trial % 2;
      const double phase = label == 1 ? rng.uniform(0.0, two_pi) : 0.0;
      const double sigma = label == 1 ? sigma1 : sigma0;
      std::vector<double> v(static_cast<size_t>(cfg.T) * static_cast<size_t>(cfg.C));
      for (int t = 0; t < cfg.T; ++t) {
        const double tone =
            label == 1
                ? amp * std::sin(two_pi * cfg.f_signal_hz *
                                     static_cast<double>(t) / cfg.fs_hz +
                                 phase)
                : 0.0;
        for (int c = 0; c < cfg.C; ++c)
          v[static_cast<size_t>(t * cfg.C + c)] =
              gain * (tone + sigma * rng.normal());
      }
      ds.records.push_back(
          {Tensor::from_data({cfg.T, cfg.C}, std::move(v)), label, s});
    }
  }
  return ds;
}

namespace {

std::vector<std::vector<double>> read_csv_rows(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw data_error(fmt::format("cannot open '{}'", path));
  std::vector<std::vector<double>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    std::vector<double> row;
    size_t pos = 0;
    while (pos <= line.size()) {
      size_t comma = line.find(',', pos);
      if (comma == std::string::npos) comma = line.size();
      const std::string cell = line.substr(pos, comma - pos);
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      while (end && *end && std::isspace(static_cast<unsigned char>(*end))) ++end;
      if (end == cell.c_str() || (end && *end))
        throw data_error(fmt::format("{}:{}: cell '{}' is not a number", path,
                                     lineno, cell));
      row.push_back(v);
      pos = comma + 1;
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw data_error(
          fmt::format("{}:{}: row has {} columns, expected {}", path, lineno,
                      row.size(), rows.front().size()));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

BiosignalDataset import_csv(const std::string& data_path,
                            const std::string& sidecar_path, double fs_hz,
                            int k_hint) {
  const auto sidecar = read_csv_rows(sidecar_path);
  if (sidecar.empty())
    throw data_error(fmt::format("{}: sidecar lists no records", sidecar_path));
  if (sidecar.front().size() != 2)
    throw data_error(fmt::format(
        "{}: sidecar rows must be 'label,subject_id', found {} columns",
        sidecar_path, sidecar.front().size()));

  const auto rows = read_csv_rows(data_path);
  if (rows.empty()) throw data_error(fmt::format("{}: no data rows", data_path));
  const size_t n_records = sidecar.size();
  if (rows.size() % n_records != 0)
    throw data_error(fmt::format(
        "{}: {} data rows do not divide evenly into {} records", data_path,
        rows.size(), n_records));

  BiosignalDataset ds;
  ds.meta.T = static_cast<int>(rows.size() / n_records);
  ds.meta.C = static_cast<int>(rows.front().size());
  ds.meta.sampling_rate_hz = fs_hz;
  ds.meta.modality = "imported";

  int max_label = 0;
  for (size_t i = 0; i < n_records; ++i) {
    BiosignalRecord rec;
    for (int col = 0; col < 2; ++col) {
      const double v = sidecar[i][static_cast<size_t>(col)];
      if (v != std::floor(v) || v < 0)
        throw data_error(fmt::format(
            "{}: record {} {} {} is not a non-negative integer", sidecar_path,
            i, col == 0 ? "label" : "subject_id", v));
    }
    rec.label = static_cast<int>(sidecar[i][0]);
    rec.subject_id = static_cast<int>(sidecar[i][1]);
    max_label = std::max(max_label, rec.label);
    std::vector<double> values;
    values.reserve(static_cast<size_t>(ds.meta.T) * static_cast<size_t>(ds.meta.C));
    for (int t = 0; t < ds.meta.T; ++t)
      for (double v : rows[i * static_cast<size_t>(ds.meta.T) + static_cast<size_t>(t)])
        values.push_back(v);
    rec.sample = Tensor::from_data({ds.meta.T, ds.meta.C}, std::move(values));
    ds.records.push_back(std::move(rec));
  }
  ds.meta.K = k_hint > 0 ? k_hint : std::max(max_label + 1, 2);
  ds.validate();
  return ds;
}

Batch stack_batch(const BiosignalDataset& ds, std::span<const size_t> indices) {
  if (indices.empty()) throw contract_error("stack_batch needs at least one index");
  const int B = static_cast<int>(indices.size());
  const size_t per = static_cast<size_t>(ds.meta.T) * static_cast<size_t>(ds.meta.C);
  std::vector<double> values(static_cast<size_t>(B) * per);
  Batch batch;
  batch.labels.reserve(indices.size());
  for (int b = 0; b < B; ++b) {
    const size_t idx = indices[static_cast<size_t>(b)];
    if (idx >= ds.records.size())
      throw contract_error(
          fmt::format("batch index {} is outside the dataset of {} records",
                      idx, ds.records.size()));
    const auto src = ds.records[idx].sample.values();
    std::copy(src.begin(), src.end(),
              values.begin() + static_cast<long>(static_cast<size_t>(b) * per));
    batch.labels.push_back(ds.records[idx].label);
  }
  batch.x = Tensor::from_data({B, ds.meta.T, ds.meta.C}, std::move(values));
  return batch;
}

}  // namespace biomamba
