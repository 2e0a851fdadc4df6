#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "biomamba/model.hpp"

namespace biomamba {

struct BenchRow {
  std::string component;  // "scan" or "forward"
  int length = 0;
  double median_ms = 0.0;
  int64_t params = 0;
  double flops = 0.0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  double scan_exponent = 0.0;
  double forward_exponent = 0.0;
};

// Least-squares slope of log(y) on log(x); the empirical scaling exponent.
double loglog_slope(std::span<const double> x, std::span<const double> y);

// Times the raw selective scan (batch 1, 32 channels, 16 states) and a
// small full-model forward at each sequence length, single-threaded.
// median_ms is the median of `repeat` runs after one warmup.
BenchReport run_bench(std::span<const int> lengths, int repeat, uint64_t seed);

std::string bench_csv_header();
std::string bench_csv_row(const BenchRow& r);

}  // namespace biomamba
