#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <vector>

#include "biomamba/ssm.hpp"

using namespace biomamba;

namespace {

Tensor const_rows(int L, const std::vector<double>& row, bool requires_grad = false) {
  const int N = static_cast<int>(row.size());
  std::vector<double> v(static_cast<size_t>(L) * N);
  for (int l = 0; l < L; ++l)
    for (int n = 0; n < N; ++n) v[static_cast<size_t>(l * N + n)] = row[static_cast<size_t>(n)];
  return Tensor::from_data({L, N}, std::move(v), requires_grad);
}

double median5(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace

TEST_CASE("zero-order-hold closed forms") {
  CHECK(zoh_abar(1.0, -1.0) == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
  CHECK(zoh_abar(1.0, -1.0) == doctest::Approx(0.367879).epsilon(1e-5));
  CHECK(zoh_coeff(1.0, -1.0) == doctest::Approx(1.0 - std::exp(-1.0)).epsilon(1e-15));
  CHECK(zoh_coeff(1.0, -1.0) == doctest::Approx(0.632121).epsilon(1e-5));

  SUBCASE("small-step limit: decay to one, coefficient to delta") {
    const double dl = 1e-9, a = -1.0;
    CHECK(zoh_abar(dl, a) == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(zoh_coeff(dl, a) == doctest::Approx(dl).epsilon(1e-8));
  }

  SUBCASE("series and exact branches agree near the crossover") {
    Rng rng(17);
    for (int i = 0; i < 200; ++i) {
      const double a = (rng.uniform01() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 4.0);
      const double z = (rng.uniform01() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2e-6, 2e-6);
      const double dl = z / a;
      if (dl <= 0) continue;
      const double exact = zoh_coeff_exact(dl, a);
      const double series = zoh_coeff_series(dl, a);
      CHECK(std::abs(exact - series) / std::abs(exact) <= 1e-12);
    }
  }
}

TEST_CASE("discretize matches the scalar closed form and rejects nonpositive steps") {
  Tensor delta = Tensor::from_data({2, 2}, {1.0, 0.5, 0.25, 2.0});
  Tensor A = Tensor::from_data({2, 3}, {-1.0, -2.0, -0.5, -3.0, -1.5, -0.1});
  Tensor Bt = Tensor::from_data({2, 3}, {1.0, -1.0, 2.0, 0.5, 0.25, -2.0});
  auto [abar, bbar] = discretize(delta, A, Bt);
  REQUIRE(abar.shape() == Shape{2, 2, 3});
  for (int r = 0; r < 2; ++r)
    for (int d = 0; d < 2; ++d)
      for (int n = 0; n < 3; ++n) {
        const double dl = delta.at({r, d});
        const double a = A.at({d, n});
        CHECK(abar.at({r, d, n}) == doctest::Approx(std::exp(dl * a)).epsilon(1e-15));
        CHECK(bbar.at({r, d, n}) ==
              doctest::Approx(zoh_coeff(dl, a) * Bt.at({r, n})).epsilon(1e-15));
      }
  Tensor bad = Tensor::from_data({2, 2}, {1.0, -0.5, 0.25, 2.0});
  CHECK_THROWS_AS(discretize(bad, A, Bt), contract_error);
}

TEST_CASE("frozen scalar recurrence: half-decay impulse gives 1, 0.5, 0.25") {
  // Abar = 0.5 via delta=1, a = ln(0.5); Bbar coefficient scaled back to 1.
  const double a = std::log(0.5);
  const double bt = 1.0 / zoh_coeff(1.0, a);
  Tensor u = Tensor::from_data({1, 3, 1}, {1.0, 0.0, 0.0});
  Tensor delta = Tensor::full({1, 3, 1}, 1.0);
  Tensor A = Tensor::from_data({1, 1}, {a});
  Tensor Bt = Tensor::full({1, 3, 1}, bt);
  Tensor Ct = Tensor::full({1, 3, 1}, 1.0);
  Tensor skip = Tensor::zeros({1});
  Tensor y = scan_core(u, delta, A, Bt, Ct, skip);
  CHECK(y.at({0, 0, 0}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(y.at({0, 1, 0}) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(y.at({0, 2, 0}) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("zero input produces zero output even with feedthrough enabled") {
  Rng rng(3);
  Tensor u = Tensor::zeros({2, 8, 3});
  Tensor delta = Tensor::uniform({2, 8, 3}, rng, 0.05, 0.5);
  Tensor A = Tensor::uniform({3, 4}, rng, -2.0, -0.1);
  Tensor Bt = Tensor::uniform({2, 8, 4}, rng, -1.0, 1.0);
  Tensor Ct = Tensor::uniform({2, 8, 4}, rng, -1.0, 1.0);
  Tensor skip = Tensor::full({3}, 1.0);
  Tensor y = scan_core(u, delta, A, Bt, Ct, skip);
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("impulse response of the convolution mode equals the kernel") {
  Tensor u = Tensor::from_data({3}, {1.0, 0.0, 0.0});
  Tensor y = conv_kernel_apply(u, Tensor::from_data({1}, {0.5}),
                               Tensor::from_data({1}, {1.0}),
                               Tensor::from_data({1}, {1.0}));
  CHECK(y.at({0}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(y.at({1}) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y.at({2}) == doctest::Approx(0.25).epsilon(1e-15));

  SUBCASE("zero readout gives zero output") {
    Tensor y0 = conv_kernel_apply(Tensor::from_data({4}, {1.0, -2.0, 3.0, 0.5}),
                                  Tensor::from_data({2}, {0.5, 0.9}),
                                  Tensor::from_data({2}, {1.0, -1.0}),
                                  Tensor::zeros({2}));
    for (double v : y0.values()) CHECK(v == 0.0);
  }

  SUBCASE("time-varying parameters are rejected") {
    Tensor ab = Tensor::from_data({3, 1}, {0.5, 0.5, 0.6});
    CHECK_THROWS_AS(conv_kernel_apply(u, ab, Tensor::from_data({1}, {1.0}),
                                      Tensor::from_data({1}, {1.0})),
                    contract_error);
    Tensor ab_ok = Tensor::from_data({3, 1}, {0.5, 0.5, 0.5});
    CHECK_NOTHROW(conv_kernel_apply(u, ab_ok, Tensor::from_data({1}, {1.0}),
                                    Tensor::from_data({1}, {1.0})));
  }
}

TEST_CASE("scan matches the convolution kernel for time-invariant parameters") {
  Rng rng(91);
  for (int rep = 0; rep < 20; ++rep) {
    const int L = 1 + rng.uniform_int(64);
    const int N = 1 + rng.uniform_int(8);
    const double dl = rng.uniform(0.05, 1.0);
    std::vector<double> a(N), b(N), c(N);
    for (int n = 0; n < N; ++n) {
      a[static_cast<size_t>(n)] = -rng.uniform(0.05, 2.0);
      b[static_cast<size_t>(n)] = rng.uniform(-1.0, 1.0);
      c[static_cast<size_t>(n)] = rng.uniform(-1.0, 1.0);
    }
    Tensor u1 = Tensor::uniform({L}, rng, -1.0, 1.0);
    std::vector<double> uv(u1.values().begin(), u1.values().end());
    Tensor u3 = Tensor::from_data({1, L, 1}, std::move(uv));

    Tensor delta = Tensor::full({1, L, 1}, dl);
    Tensor A = Tensor::from_data({1, N}, std::vector<double>(a));
    std::vector<double> brow(b), crow(c);
    Tensor Bt = const_rows(L, brow);
    Tensor Ct = const_rows(L, crow);
    Tensor Bt3 = reshape(Bt, {1, L, N});
    Tensor Ct3 = reshape(Ct, {1, L, N});
    Tensor ys = scan_core(u3, delta, A, Bt3, Ct3, Tensor::zeros({1}));

    std::vector<double> ab(N), bb(N);
    for (int n = 0; n < N; ++n) {
      ab[static_cast<size_t>(n)] = zoh_abar(dl, a[static_cast<size_t>(n)]);
      bb[static_cast<size_t>(n)] = zoh_coeff(dl, a[static_cast<size_t>(n)]) * b[static_cast<size_t>(n)];
    }
    Tensor yc = rep % 2 == 0
                    ? conv_kernel_apply(u1, Tensor::from_data({N}, std::vector<double>(ab)),
                                        Tensor::from_data({N}, std::vector<double>(bb)),
                                        Tensor::from_data({N}, std::vector<double>(c)))
                    : conv_kernel_apply(u1, const_rows(L, ab), const_rows(L, bb),
                                        const_rows(L, c));
    for (int t = 0; t < L; ++t) {
      CHECK(std::abs(ys.at({0, t, 0}) - yc.at({t})) <= 1e-10);
    }
  }
}

TEST_CASE("editing the input at one step leaves earlier outputs bit-identical") {
  Rng rng(7);
  const int L = 16, dm = 5;
  Tensor u = Tensor::uniform({1, L, dm}, rng, -1.0, 1.0);
  SsmParams p = make_ssm_params(dm, 4, 2, rng);
  Tensor y1 = selective_scan(u, p);
  const int t0 = 8;
  Tensor u2 = Tensor::from_data(u.shape(), std::vector<double>(u.values().begin(), u.values().end()));
  for (int d = 0; d < dm; ++d) u2.mutable_values()[static_cast<size_t>(t0 * dm + d)] += 3.0;
  Tensor y2 = selective_scan(u2, p);
  bool later_changed = false;
  for (int t = 0; t < L; ++t)
    for (int d = 0; d < dm; ++d) {
      const double a = y1.at({0, t, d});
      const double b = y2.at({0, t, d});
      if (t < t0) {
        CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
      } else if (a != b) {
        later_changed = true;
      }
    }
  CHECK(later_changed);
}

TEST_CASE("bounded input keeps the state inside the decay bound on long rollouts") {
  Rng rng(23);
  for (int rep = 0; rep < 4; ++rep) {
    const int L = 1024, N = 6;
    const double dl = rng.uniform(0.05, 0.5);
    std::vector<double> a(N), b(N), c(N);
    double max_ab = 0, max_cf = 0, bmax = 0, csum = 0;
    for (int n = 0; n < N; ++n) {
      a[static_cast<size_t>(n)] = -rng.uniform(0.1, 2.0);
      b[static_cast<size_t>(n)] = rng.uniform(-1.0, 1.0);
      c[static_cast<size_t>(n)] = rng.uniform(-1.0, 1.0);
      max_ab = std::max(max_ab, zoh_abar(dl, a[static_cast<size_t>(n)]));
      max_cf = std::max(max_cf, zoh_coeff(dl, a[static_cast<size_t>(n)]));
      bmax = std::max(bmax, std::abs(b[static_cast<size_t>(n)]));
      csum += std::abs(c[static_cast<size_t>(n)]);
    }
    Tensor u = Tensor::uniform({1, L, 1}, rng, -1.0, 1.0);
    Tensor y = scan_core(u, Tensor::full({1, L, 1}, dl), Tensor::from_data({1, N}, std::move(a)),
                         reshape(const_rows(L, b), {1, L, N}),
                         reshape(const_rows(L, c), {1, L, N}), Tensor::full({1}, 1.0));
    const double h_bound = max_cf * bmax / (1.0 - max_ab);
    const double y_bound = csum * h_bound + 1.0;
    for (double v : y.values()) {
      CHECK(std::isfinite(v));
      CHECK(std::abs(v) <= y_bound + 1e-9);
    }
  }
}

TEST_CASE("divergent state is reported with the step index") {
  Tensor u = Tensor::full({1, 3, 1}, 1.0);
  Tensor delta = Tensor::full({1, 3, 1}, 1.0);
  Tensor A = Tensor::from_data({1, 1}, {800.0});
  Tensor Bt = Tensor::full({1, 3, 1}, 1.0);
  Tensor Ct = Tensor::full({1, 3, 1}, 1.0);
  CHECK_THROWS_WITH_AS(scan_core(u, delta, A, Bt, Ct, Tensor::zeros({1})),
                       doctest::Contains("step 0"), check_error);
  Tensor bad_delta = Tensor::from_data({1, 3, 1}, {1.0, 0.0, 1.0});
  CHECK_THROWS_WITH_AS(scan_core(u, bad_delta, Tensor::from_data({1, 1}, {-1.0}), Bt, Ct,
                                 Tensor::zeros({1})),
                       doctest::Contains("step 1"), contract_error);
}

TEST_CASE("scan gradients match finite differences") {
  Rng rng(41);
  const int B = 2, L = 5, dm = 3, N = 4;
  Tensor u = Tensor::uniform({B, L, dm}, rng, -1.0, 1.0, true);
  Tensor delta = Tensor::uniform({B, L, dm}, rng, 0.05, 0.5, true);
  Tensor A = Tensor::uniform({dm, N}, rng, -1.5, -0.1, true);
  Tensor Bt = Tensor::uniform({B, L, N}, rng, -1.0, 1.0, true);
  Tensor Ct = Tensor::uniform({B, L, N}, rng, -1.0, 1.0, true);
  Tensor skip = Tensor::uniform({dm}, rng, -1.0, 1.0, true);
  auto run = [&]() { return sum_all(scan_core(u, delta, A, Bt, Ct, skip)); };
  CHECK(grad_check([&](const Tensor&) { return run(); }, u) < 1e-4);
  CHECK(grad_check([&](const Tensor&) { return run(); }, delta) < 1e-4);
  CHECK(grad_check([&](const Tensor&) { return run(); }, A) < 1e-4);
  CHECK(grad_check([&](const Tensor&) { return run(); }, Bt) < 1e-4);
  CHECK(grad_check([&](const Tensor&) { return run(); }, Ct) < 1e-4);
  CHECK(grad_check([&](const Tensor&) { return run(); }, skip) < 1e-4);

  SUBCASE("series branch of the step-size coefficient") {
    Tensor tiny = Tensor::full({B, L, dm}, 1e-7, false);
    auto run_tiny = [&]() { return sum_all(scan_core(u, tiny, A, Bt, Ct, skip)); };
    CHECK(grad_check([&](const Tensor&) { return run_tiny(); }, A) < 1e-4);
    CHECK(grad_check([&](const Tensor&) { return run_tiny(); }, u) < 1e-4);
  }
}

TEST_CASE("depthwise causal convolution") {
  Tensor x = Tensor::from_data({1, 4, 2}, {1, 10, 2, 20, 3, 30, 4, 40});
  Tensor w = Tensor::from_data({2, 3}, {0.5, 0.25, 1.0, -1.0, 0.0, 2.0});
  Tensor b = Tensor::from_data({2}, {0.0, 100.0});
  Tensor y = depthwise_causal_conv(x, w, b);
  // channel 0, t=2: 0.5*1 + 0.25*2 + 1.0*3 = 4
  CHECK(y.at({0, 0, 0}) == doctest::Approx(1.0));
  CHECK(y.at({0, 1, 0}) == doctest::Approx(0.25 * 1 + 1.0 * 2));
  CHECK(y.at({0, 2, 0}) == doctest::Approx(4.0));
  CHECK(y.at({0, 3, 0}) == doctest::Approx(0.5 * 2 + 0.25 * 3 + 1.0 * 4));
  CHECK(y.at({0, 0, 1}) == doctest::Approx(100.0 + 2.0 * 10));
  CHECK(y.at({0, 3, 1}) == doctest::Approx(100.0 - 1.0 * 20 + 2.0 * 40));

  SUBCASE("gradients") {
    Rng rng(5);
    Tensor xr = Tensor::uniform({2, 6, 3}, rng, -1.0, 1.0, true);
    Tensor wr = Tensor::uniform({3, 4}, rng, -1.0, 1.0, true);
    Tensor br = Tensor::uniform({3}, rng, -1.0, 1.0, true);
    auto run = [&]() { return sum_all(mul(depthwise_causal_conv(xr, wr, br),
                                          depthwise_causal_conv(xr, wr, br))); };
    CHECK(grad_check([&](const Tensor&) { return run(); }, xr) < 1e-4);
    CHECK(grad_check([&](const Tensor&) { return run(); }, wr) < 1e-4);
    CHECK(grad_check([&](const Tensor&) { return run(); }, br) < 1e-4);
  }
}

TEST_CASE("selection parameters are positive and stable by construction") {
  Rng rng(11);
  SsmParams p = make_ssm_params(8, 16, 1, rng);
  // A = -exp(A_log) strictly negative; spectrum per row is -(1..N)
  for (int d = 0; d < 8; ++d)
    for (int n = 0; n < 16; ++n)
      CHECK(-std::exp(p.a_log.at({d, n})) == doctest::Approx(-(n + 1.0)).epsilon(1e-12));
  // softplus(dt_up_b) lies in the configured initial step-size band
  for (int d = 0; d < 8; ++d) {
    const double dt = std::log1p(std::exp(p.dt_up_b.at({d})));
    CHECK(dt >= 0.001 * (1 - 1e-9));
    CHECK(dt <= 0.1 * (1 + 1e-9));
  }
  for (double v : p.d_skip.values()) CHECK(v == 1.0);
  SsmParams frozen = make_ssm_params(8, 16, 1, rng, false);
  CHECK_FALSE(frozen.d_skip.requires_grad());
  for (double v : frozen.d_skip.values()) CHECK(v == 0.0);
}

TEST_CASE("single-token block evaluation matches a hand-composed step") {
  Rng rng(77);
  const int D = 3, dm = 4, N = 2, k = 4, dt_rank = 1;
  MambaBlockParams p = make_mamba_params(D, dm, N, k, dt_rank, rng);
  Tensor z = Tensor::uniform({1, 1, D}, rng, -1.0, 1.0);
  Tensor out = mamba_block(z, p);
  REQUIRE(out.shape() == Shape{1, 1, D});

  auto sigmoid = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  std::vector<double> x1(dm), x2(dm), uvec(dm);
  for (int d = 0; d < dm; ++d) {
    double a1 = p.b_in1.at({d}), a2 = p.b_in2.at({d});
    for (int e = 0; e < D; ++e) {
      a1 += z.at({0, 0, e}) * p.w_in1.at({e, d});
      a2 += z.at({0, 0, e}) * p.w_in2.at({e, d});
    }
    x1[static_cast<size_t>(d)] = a1;
    x2[static_cast<size_t>(d)] = a2;
  }
  // with a single token only the last conv tap contributes
  for (int d = 0; d < dm; ++d) {
    const double conv = p.conv_b.at({d}) + p.conv_w.at({d, k - 1}) * x1[static_cast<size_t>(d)];
    uvec[static_cast<size_t>(d)] = conv * sigmoid(conv);
  }
  std::vector<double> expected(D);
  {
    std::vector<double> yssm(dm);
    std::vector<double> bt(N, 0.0), ct(N, 0.0), dt_low(dt_rank, 0.0);
    for (int n = 0; n < N; ++n)
      for (int d = 0; d < dm; ++d) {
        bt[static_cast<size_t>(n)] += uvec[static_cast<size_t>(d)] * p.ssm.w_b.at({d, n});
        ct[static_cast<size_t>(n)] += uvec[static_cast<size_t>(d)] * p.ssm.w_c.at({d, n});
      }
    for (int r = 0; r < dt_rank; ++r)
      for (int d = 0; d < dm; ++d)
        dt_low[static_cast<size_t>(r)] += uvec[static_cast<size_t>(d)] * p.ssm.dt_down.at({d, r});
    for (int d = 0; d < dm; ++d) {
      double pre = p.ssm.dt_up_b.at({d});
      for (int r = 0; r < dt_rank; ++r) pre += dt_low[static_cast<size_t>(r)] * p.ssm.dt_up_w.at({r, d});
      const double dl = std::log1p(std::exp(pre));
      double acc = 0;
      for (int n = 0; n < N; ++n) {
        const double a = -std::exp(p.ssm.a_log.at({d, n}));
        const double h = zoh_coeff(dl, a) * bt[static_cast<size_t>(n)] * uvec[static_cast<size_t>(d)];
        acc += ct[static_cast<size_t>(n)] * h;
      }
      yssm[static_cast<size_t>(d)] = acc + p.ssm.d_skip.at({d}) * uvec[static_cast<size_t>(d)];
    }
    for (int e = 0; e < D; ++e) {
      double acc = p.b_out.at({e});
      for (int d = 0; d < dm; ++d) {
        const double gate = x2[static_cast<size_t>(d)] * sigmoid(x2[static_cast<size_t>(d)]);
        acc += yssm[static_cast<size_t>(d)] * gate * p.w_out.at({d, e});
      }
      expected[static_cast<size_t>(e)] = acc;
    }
  }
  for (int e = 0; e < D; ++e)
    CHECK(out.at({0, 0, e}) == doctest::Approx(expected[static_cast<size_t>(e)]).epsilon(1e-12));
}

TEST_CASE("zero input with zero biases passes through the block as zero") {
  Rng rng(13);
  MambaBlockParams p = make_mamba_params(4, 8, 4, 4, 1, rng);
  for (Tensor* b : {&p.b_in1, &p.b_in2, &p.conv_b, &p.b_out})
    std::fill(b->mutable_values().begin(), b->mutable_values().end(), 0.0);
  Tensor out = mamba_block(Tensor::zeros({2, 5, 4}), p);
  for (double v : out.values()) CHECK(v == 0.0);
}

TEST_CASE("block gradients pass finite-difference checks") {
  Rng rng(19);
  const int D = 4, dm = 6, N = 3, k = 3, dt_rank = 2;
  MambaBlockParams p = make_mamba_params(D, dm, N, k, dt_rank, rng);
  // The production init puts step sizes in [0.001, 0.1]; gradients through the
  // decay spectrum are then ~delta^2 and the h=1e-5 central difference drowns
  // in rounding noise. Check at a point with O(1) step sizes instead.
  for (int d = 0; d < dm; ++d) {
    p.ssm.dt_up_b.mutable_values()[static_cast<size_t>(d)] =
        std::log(std::expm1(0.3 + 0.1 * d));
  }
  Tensor z = Tensor::uniform({2, 3, D}, rng, -1.0, 1.0, true);
  auto run = [&]() { return sum_all(mul(mamba_block(z, p), mamba_block(z, p))); };
  CHECK(grad_check([&](const Tensor&) { return run(); }, z) < 1e-4);
  for (Tensor* t : {&p.w_in1, &p.b_in1, &p.w_in2, &p.conv_w, &p.conv_b, &p.w_out,
                    &p.b_out, &p.ssm.a_log, &p.ssm.w_b, &p.ssm.w_c, &p.ssm.dt_down,
                    &p.ssm.dt_up_w, &p.ssm.dt_up_b, &p.ssm.d_skip}) {
    CHECK(grad_check([&](const Tensor&) { return run(); }, *t) < 1e-4);
  }
}

TEST_CASE("doubling the sequence length at most 2.5x's the scan wall-clock") {
  Rng rng(57);
  const int dm = 8;
  SsmParams p = make_ssm_params(dm, 16, 1, rng);
  auto time_scan = [&](int L) {
    Tensor u = Tensor::uniform({1, L, dm}, rng, -1.0, 1.0);
    NoGradGuard ng;
    std::vector<double> ms;
    for (int i = 0; i < 5; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      Tensor y = selective_scan(u, p);
      const auto t1 = std::chrono::steady_clock::now();
      ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      CHECK(std::isfinite(y.at({0, L - 1, 0})));
    }
    return median5(ms);
  };
  const double t2048 = time_scan(2048);
  const double t4096 = time_scan(4096);
  CHECK(t4096 <= 2.5 * std::max(t2048, 0.01));
}
