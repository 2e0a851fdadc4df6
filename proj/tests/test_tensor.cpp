#include <doctest.h>

#include <cmath>
#include <vector>

#include "biomamba/tensor.hpp"

using namespace biomamba;

namespace {

// Independent triple-loop product used as the matmul oracle.
std::vector<double> matmul_ref(const std::vector<double>& a,
                               const std::vector<double>& b, int m, int k,
                               int n) {
  std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0;
      for (int l = 0; l < k; ++l) acc += a[i * k + l] * b[l * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  Tensor i2 = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor p = matmul(i2, i2);
  CHECK(p.at({0, 0}) == 1.0);
  CHECK(p.at({0, 1}) == 0.0);
  CHECK(p.at({1, 0}) == 0.0);
  CHECK(p.at({1, 1}) == 1.0);

  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 1}, {1, 1});
  Tensor c = matmul(a, b);
  CHECK(c.at({0, 0}) == 3.0);
  CHECK(c.at({1, 0}) == 7.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(7);
  SUBCASE("5x7 * 7x3") {
    Tensor a = Tensor::uniform({5, 7}, rng, -1, 1);
    Tensor b = Tensor::uniform({7, 3}, rng, -1, 1);
    Tensor c = matmul(a, b);
    auto ref = matmul_ref({a.values().begin(), a.values().end()},
                          {b.values().begin(), b.values().end()}, 5, 7, 3);
    for (size_t i = 0; i < ref.size(); ++i) {
      CHECK(std::abs(c.values()[i] - ref[i]) < 1e-12);
    }
  }
  SUBCASE("random 8x8 cases") {
    for (int trial = 0; trial < 5; ++trial) {
      Tensor a = Tensor::uniform({8, 8}, rng, -2, 2);
      Tensor b = Tensor::uniform({8, 8}, rng, -2, 2);
      Tensor c = matmul(a, b);
      auto ref = matmul_ref({a.values().begin(), a.values().end()},
                            {b.values().begin(), b.values().end()}, 8, 8, 8);
      for (size_t i = 0; i < ref.size(); ++i) {
        CHECK(std::abs(c.values()[i] - ref[i]) < 1e-12);
      }
    }
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  CHECK_THROWS_WITH_AS(matmul(a, b),
                       doctest::Contains("[2,3]"), contract_error);
}

TEST_CASE("elementwise activations") {
  Tensor x = Tensor::from_data({3}, {0.0, -1.0, 1.0});
  Tensor s = silu(x);
  CHECK(s.values()[0] == 0.0);
  for (int i : {1, 2}) {
    const double v = x.values()[static_cast<size_t>(i)];
    const double oracle = v * (1.0 / (1.0 + std::exp(-v)));
    CHECK(std::abs(s.values()[static_cast<size_t>(i)] - oracle) < 1e-12);
  }

  Tensor sp = softplus(Tensor::from_data({1}, {0.0}));
  CHECK(std::abs(sp.item() - std::log(2.0)) < 1e-12);
  // large-argument linearity
  Tensor sp2 = softplus(Tensor::from_data({1}, {40.0}));
  CHECK(std::abs(sp2.item() - 40.0) < 1e-12);
}

TEST_CASE("exp clamps at 709 and flags saturation") {
  reset_exp_saturation_count();
  Tensor x = Tensor::from_data({2}, {1.0, 800.0});
  Tensor y = exp_clamped(x);
  CHECK(std::isfinite(y.values()[1]));
  CHECK(y.values()[1] == std::exp(709.0));
  CHECK(exp_saturation_count() == 1);
  reset_exp_saturation_count();
}

TEST_CASE("reciprocal of zero is a domain error") {
  Tensor x = Tensor::from_data({2}, {1.0, 0.0});
  CHECK_THROWS_AS(reciprocal(x), contract_error);
  Tensor ok = reciprocal(Tensor::from_data({2}, {2.0, -4.0}));
  CHECK(ok.values()[0] == 0.5);
  CHECK(ok.values()[1] == -0.25);
}

TEST_CASE("layer_norm basics") {
  Tensor gamma = Tensor::full({4}, 1.0);
  Tensor beta = Tensor::zeros({4});
  SUBCASE("constant token collapses to zero") {
    Tensor x = Tensor::full({2, 4}, 3.25);
    Tensor y = layer_norm(x, gamma, beta);
    for (double v : y.values()) CHECK(v == 0.0);
  }
  SUBCASE("already normalized token") {
    Tensor g2 = Tensor::full({2}, 1.0);
    Tensor b2 = Tensor::zeros({2});
    Tensor x = Tensor::from_data({1, 2}, {1.0, -1.0});
    Tensor y = layer_norm(x, g2, b2, 1e-12);
    CHECK(std::abs(y.at({0, 0}) - 1.0) < 1e-9);
    CHECK(std::abs(y.at({0, 1}) + 1.0) < 1e-9);
  }
  SUBCASE("random token statistics") {
    Rng rng(3);
    Tensor x = Tensor::uniform({5, 4}, rng, -3, 3);
    Tensor y = layer_norm(x, gamma, beta, 1e-5);
    for (int r = 0; r < 5; ++r) {
      double mean = 0, var = 0;
      for (int j = 0; j < 4; ++j) mean += y.at({r, j});
      mean /= 4;
      for (int j = 0; j < 4; ++j) {
        const double c = y.at({r, j}) - mean;
        var += c * c;
      }
      var /= 4;
      CHECK(std::abs(mean) < 1e-10);
      CHECK(std::abs(var - 1.0) < 1e-3);
    }
  }
}

TEST_CASE("broadcasting leaves operands untouched") {
  Rng rng(11);
  Tensor a = Tensor::uniform({2, 3, 4}, rng, -1, 1);
  Tensor b = Tensor::uniform({4}, rng, -1, 1);
  std::vector<double> a_before(a.values().begin(), a.values().end());
  std::vector<double> b_before(b.values().begin(), b.values().end());
  Tensor c = add(a, b);
  CHECK(c.shape() == Shape{2, 3, 4});
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 4; ++k) {
        CHECK(c.at({i, j, k}) ==
              doctest::Approx(a.at({i, j, k}) + b.values()[static_cast<size_t>(k)])
                  .epsilon(1e-15));
      }
  CHECK(std::equal(a.values().begin(), a.values().end(), a_before.begin()));
  CHECK(std::equal(b.values().begin(), b.values().end(), b_before.begin()));

  // middle-axis singleton
  Tensor m = Tensor::uniform({2, 1, 4}, rng, -1, 1);
  Tensor out = mul(a, m);
  CHECK(out.shape() == Shape{2, 3, 4});
  CHECK(out.at({1, 2, 3}) ==
        doctest::Approx(a.at({1, 2, 3}) * m.at({1, 0, 3})).epsilon(1e-15));
}

TEST_CASE("backward on linear and quadratic sums") {
  SUBCASE("loss = sum(x)") {
    Tensor x = Tensor::from_data({3}, {5, -2, 0.5}, true);
    Tensor loss = sum_all(x);
    backward(loss);
    for (double g : x.grad()) CHECK(g == 1.0);
    CHECK(ComputationTape::current().size() == 0);
  }
  SUBCASE("loss = sum(x*x)") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor loss = sum_all(mul(x, x));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(x.grad()[1] == doctest::Approx(4.0).epsilon(1e-14));
  }
  SUBCASE("non-scalar loss rejected") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(backward(y), contract_error);
    ComputationTape::current().clear();
  }
}

TEST_CASE("grad_check is exact on linear f") {
  Tensor x = Tensor::from_data({4}, {0.3, -1.2, 2.0, 0.0}, true);
  double err = grad_check([](const Tensor& t) { return sum_all(t); }, x);
  CHECK(err < 1e-10);
}

TEST_CASE("grad_check across ops, 10 seeds") {
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    Tensor x = Tensor::uniform({2, 5}, rng, -2, 2, true);
    Tensor w = Tensor::uniform({5, 3}, rng, -1, 1, true);
    Tensor b = Tensor::uniform({3}, rng, -1, 1, true);
    Tensor g = Tensor::uniform({5}, rng, 0.5, 1.5, true);
    Tensor bt = Tensor::uniform({5}, rng, -0.5, 0.5, true);
    Tensor other = Tensor::uniform({2, 5}, rng, 0.5, 2.5, true);

    auto check = [&](const char* name, auto f, Tensor v) {
      const double e = grad_check(f, v);
      INFO(name << " seed " << seed << " err=" << e);
      CHECK(e < 1e-4);
    };
    check("add", [&](const Tensor& t) { return sum_all(add(t, other)); }, x);
    check("mul", [&](const Tensor& t) { return sum_all(mul(t, other)); }, x);
    check("mul-bcast",
          [&](const Tensor& t) { return sum_all(mul(other, t)); },
          Tensor::uniform({5}, rng, 0.5, 1.5, true));
    check("silu", [&](const Tensor& t) { return sum_all(silu(t)); }, x);
    check("softplus", [&](const Tensor& t) { return sum_all(softplus(t)); }, x);
    check("exp", [&](const Tensor& t) { return sum_all(exp_clamped(t)); }, x);
    check("reciprocal",
          [&](const Tensor& t) { return sum_all(reciprocal(t)); }, other);
    check("matmul-lhs",
          [&](const Tensor& t) { return sum_all(mul(matmul(t, w), matmul(t, w))); },
          x);
    check("matmul-rhs",
          [&](const Tensor& t) { return sum_all(mul(matmul(x, t), matmul(x, t))); },
          w);
    check("linear-weight",
          [&](const Tensor& t) { return sum_all(silu(linear(x, t, b))); }, w);
    check("linear-bias",
          [&](const Tensor& t) { return sum_all(silu(linear(x, w, t))); }, b);
    check("layer_norm-x",
          [&](const Tensor& t) { return sum_all(mul(layer_norm(t, g, bt), layer_norm(t, g, bt))); },
          x);
    check("layer_norm-gamma",
          [&](const Tensor& t) { return sum_all(silu(layer_norm(x, t, bt))); },
          g);
    check("mean_axis",
          [&](const Tensor& t) { return sum_all(mul(mean_axis(t, 1), mean_axis(t, 1))); },
          x);
    check("reverse",
          [&](const Tensor& t) { return sum_all(mul(reverse_axis(t, 1), other)); },
          x);
    check("permute",
          [&](const Tensor& t) { return sum_all(mul(permute(t, {1, 0}), permute(t, {1, 0}))); },
          x);
    check("reshape-pad",
          [&](const Tensor& t) { return sum_all(mul(pad_last(reshape(t, {5, 2}), 4), pad_last(reshape(t, {5, 2}), 4))); },
          x);
    check("concat",
          [&](const Tensor& t) {
            Tensor c = concat({t, other}, 1);
            return sum_all(mul(c, c));
          },
          x);
  }
}

TEST_CASE("shape ops round-trip") {
  Rng rng(21);
  Tensor x = Tensor::uniform({2, 3, 4}, rng, -1, 1);
  Tensor p = permute(x, {2, 0, 1});
  CHECK(p.shape() == Shape{4, 2, 3});
  CHECK(p.at({3, 1, 2}) == x.at({1, 2, 3}));
  Tensor back = permute(p, {1, 2, 0});
  for (size_t i = 0; i < back.values().size(); ++i) {
    CHECK(back.values()[i] == x.values()[i]);
  }

  Tensor r = reverse_axis(x, 1);
  CHECK(r.at({0, 0, 1}) == x.at({0, 2, 1}));
  Tensor rr = reverse_axis(r, 1);
  for (size_t i = 0; i < rr.values().size(); ++i) {
    CHECK(rr.values()[i] == x.values()[i]);
  }

  Tensor c = concat({x, x}, 1);
  CHECK(c.shape() == Shape{2, 6, 4});
  CHECK(c.at({1, 5, 3}) == x.at({1, 2, 3}));

  Tensor m = mean_axis(x, 2);
  CHECK(m.shape() == Shape{2, 3});
  double acc = 0;
  for (int k = 0; k < 4; ++k) acc += x.at({1, 2, k});
  CHECK(m.at({1, 2}) == doctest::Approx(acc / 4).epsilon(1e-14));
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  {
    NoGradGuard ng;
    Tensor y = mul(x, x);
    CHECK(ComputationTape::current().size() == 0);
  }
  Tensor y = mul(x, x);
  CHECK(ComputationTape::current().size() == 1);
  ComputationTape::current().clear();
}
