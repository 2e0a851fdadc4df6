#include "biomamba/bench.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>

#include "biomamba/ssm.hpp"

namespace biomamba {

namespace {

double median_of(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  return xs[xs.size() / 2];
}

template <typename Fn>
double time_median_ms(int repeat, Fn&& fn) {
  fn();  // warmup
  std::vector<double> times;
  times.reserve(static_cast<size_t>(repeat));
  for (int r = 0; r < repeat; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    times.push_back(std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count());
  }
  return median_of(std::move(times));
}

ModelConfig bench_model_config(int T, uint64_t seed) {
  ModelConfig c;
  c.T = T;
  c.C = 3;
  c.K = 2;
  c.D = 32;
  c.M = 2;
  c.d_state = 16;
  c.expand = 1;
  // Non-overlapping windows keep segment count, and so flops, linear in T;
  // lengths below the reference window fall back to a single segment.
  c.window = std::min(128, T);
  c.hop = c.window;
  c.seed = seed;
  return c;
}

}  // namespace

double loglog_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2)
    throw contract_error("slope fit needs two or more matched points");
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0) || !(y[i] > 0))
      throw contract_error("slope fit needs positive values on both axes");
    const double lx = std::log(x[i]);
    const double ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

BenchReport run_bench(std::span<const int> lengths, int repeat, uint64_t seed) {
  if (lengths.empty()) throw config_error("bench needs at least one length");
  if (repeat < 1) throw config_error("bench repeat count must be at least 1");
  for (int L : lengths)
    if (L < 1) throw config_error(fmt::format("bench length {} is not positive", L));

  BenchReport rep;
  NoGradGuard ng;
  const int dm = 32, N = 16;

  for (int L : lengths) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(L)));
    Tensor u = Tensor::uniform({1, L, dm}, rng, -1.0, 1.0);
    Tensor delta = Tensor::uniform({1, L, dm}, rng, 0.01, 0.1);
    Tensor A = Tensor::uniform({dm, N}, rng, -1.5, -0.1);
    Tensor Bt = Tensor::uniform({1, L, N}, rng, -1.0, 1.0);
    Tensor Ct = Tensor::uniform({1, L, N}, rng, -1.0, 1.0);
    Tensor D = Tensor::uniform({dm}, rng, -1.0, 1.0);

    BenchRow row;
    row.component = "scan";
    row.length = L;
    row.median_ms =
        time_median_ms(repeat, [&] { scan_core(u, delta, A, Bt, Ct, D); });
    row.params = static_cast<int64_t>(dm) * N + dm;  // A and the feedthrough
    // 5 MACs per (t, d, n) plus the feedthrough term per (t, d)
    row.flops = static_cast<double>(L) * dm * (5.0 * N + 1.0);
    rep.rows.push_back(row);
  }

  for (int L : lengths) {
    const ModelConfig cfg = bench_model_config(L, seed);
    BioMambaModel m = build_model(cfg);
    Rng rng(mix_seed(seed, static_cast<uint64_t>(L) + 0x10000));
    Tensor x = Tensor::uniform({1, L, cfg.C}, rng, -1.0, 1.0);

    BenchRow row;
    row.component = "forward";
    row.length = L;
    row.median_ms = time_median_ms(repeat, [&] { forward(m, x); });
    row.params = count_params(m).active;
    row.flops = count_flops(m, 1).total;
    rep.rows.push_back(row);
  }

  std::vector<double> ls, ts;
  for (const auto& r : rep.rows) {
    if (r.component != "scan") continue;
    ls.push_back(static_cast<double>(r.length));
    ts.push_back(r.median_ms);
  }
  if (ls.size() >= 2) rep.scan_exponent = loglog_slope(ls, ts);
  ls.clear();
  ts.clear();
  for (const auto& r : rep.rows) {
    if (r.component != "forward") continue;
    ls.push_back(static_cast<double>(r.length));
    ts.push_back(r.median_ms);
  }
  if (ls.size() >= 2) rep.forward_exponent = loglog_slope(ls, ts);
  return rep;
}

std::string bench_csv_header() { return "component,length,median_ms,params,flops"; }

std::string bench_csv_row(const BenchRow& r) {
  return fmt::format("{},{},{},{},{}", r.component, r.length, r.median_ms,
                     r.params, r.flops);
}

}  // namespace biomamba
