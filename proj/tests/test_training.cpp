#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "biomamba/dataio.hpp"
#include "biomamba/evalmetrics.hpp"
#include "biomamba/model.hpp"
#include "biomamba/training.hpp"

using namespace biomamba;

namespace {

ModelConfig toy_model_config() {
  ModelConfig c;
  c.T = 32;
  c.C = 2;
  c.K = 2;
  c.D = 8;
  c.M = 1;
  c.d_state = 4;
  c.expand = 1;
  c.conv_kernel = 2;
  c.window = 16;
  c.hop = 8;
  c.ffn_sparsity = 0.5;
  c.seed = 5;
  return c;
}

SynthConfig toy_data_config() {
  SynthConfig s;
  s.n_subjects = 5;
  s.trials_per_subject = 8;
  s.T = 32;
  s.C = 2;
  s.f_signal_hz = 8.0;
  s.fs_hz = 32.0;
  s.snr = 5.0;
  s.seed = 21;
  return s;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("cross entropy reproduces closed-form values") {
  const int labels01[] = {0};
  CHECK(cross_entropy(Tensor::from_data({1, 2}, {0.0, 0.0}), labels01).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // extreme logits must not overflow thanks to max subtraction
  const Tensor wide = Tensor::from_data({1, 2}, {50.0, -50.0});
  const double tiny = cross_entropy(wide, labels01).item();
  CHECK(tiny < 1e-20);
  CHECK(tiny >= 0.0);
  CHECK(std::isfinite(tiny));

  // batch mean over two rows
  const int labels2[] = {0, 1};
  const double got =
      cross_entropy(Tensor::from_data({2, 2}, {0.0, 0.0, 3.0, 1.0}), labels2).item();
  const double want = 0.5 * (std::log(2.0) + (std::log(1.0 + std::exp(2.0)) - 0.0 + 2.0 - 2.0));
  CHECK(got == doctest::Approx(0.5 * (std::log(2.0) + std::log(1.0 + std::exp(2.0))))
                   .epsilon(1e-12));
  (void)want;

  SUBCASE("out-of-range labels name the record") {
    const int bad[] = {0, 5};
    CHECK_THROWS_WITH_AS(
        cross_entropy(Tensor::from_data({2, 2}, {0.0, 0.0, 0.0, 0.0}), bad),
        doctest::Contains("record 1"), data_error);
  }
}

TEST_CASE("cross entropy gradient matches finite differences") {
  Rng rng(41);
  Tensor logits = Tensor::uniform({4, 3}, rng, -2.0, 2.0, true);
  const std::vector<int> labels = {0, 2, 1, 0};
  const double err = grad_check(
      [&](const Tensor& l) { return cross_entropy(l, labels); }, logits);
  CHECK(err < 1e-4);
}

TEST_CASE("first adam step moves by roughly the signed learning rate") {
  Tensor w = Tensor::from_data({1}, {3.0}, true);
  Adam opt({w}, {0.1, 0.9, 0.999, 1e-8});
  Tensor loss = mul(w, w);
  backward(loss);
  // grad 6: bias-corrected first step is lr*g/(|g|+eps)
  opt.step();
  CHECK(w.values()[0] == doctest::Approx(3.0 - 0.1 * 6.0 / (6.0 + 1e-8)).epsilon(1e-14));
  CHECK(opt.steps_taken() == 1);
  CHECK_FALSE(w.has_grad());

  SUBCASE("an exactly zero gradient leaves the parameter untouched") {
    Tensor p = Tensor::from_data({2}, {1.25, -0.5}, true);
    Adam o2({p}, {0.1, 0.9, 0.999, 1e-8});
    backward(sum_all(mul(p, Tensor::zeros({2}))));
    REQUIRE(p.has_grad());
    o2.step();
    CHECK(p.values()[0] == 1.25);
    CHECK(p.values()[1] == -0.5);
  }

  SUBCASE("parameters that never saw a backward pass are skipped") {
    Tensor p = Tensor::from_data({1}, {2.0}, true);
    Adam o3({p}, {0.1, 0.9, 0.999, 1e-8});
    o3.step();
    CHECK(p.values()[0] == 2.0);
    CHECK(o3.steps_taken() == 1);
  }
}

TEST_CASE("three adam steps on a quadratic match a hand-stepped oracle") {
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Tensor w = Tensor::from_data({1}, {1.0}, true);
  Adam opt({w}, {lr, b1, b2, eps});
  const Tensor target = Tensor::scalar(5.0);

  double ref_w = 1.0, ref_m = 0.0, ref_v = 0.0;
  for (int step = 1; step <= 3; ++step) {
    Tensor d = sub(w, target);
    backward(mul_scalar(mul(d, d), 0.5));
    opt.step();

    const double g = ref_w - 5.0;
    ref_m = b1 * ref_m + (1 - b1) * g;
    ref_v = b2 * ref_v + (1 - b2) * g * g;
    const double mhat = ref_m / (1 - std::pow(b1, step));
    const double vhat = ref_v / (1 - std::pow(b2, step));
    ref_w -= lr * mhat / (std::sqrt(vhat) + eps);
    CHECK(std::abs(w.values()[0] - ref_w) <= 1e-12);
  }
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.validate();
  cfg.learning_rate = 0.0;  // legal degenerate rate
  cfg.validate();
  cfg.learning_rate = -1e-5;
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg = TrainConfig{};
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg = TrainConfig{};
  cfg.beta2 = 1.0;
  CHECK_THROWS_AS(cfg.validate(), config_error);
}

TEST_CASE("a zero learning rate leaves every parameter bit-identical") {
  BioMambaModel m = build_model(toy_model_config());
  const auto ds = synth_spectral(toy_data_config());
  std::vector<std::vector<double>> before;
  for (const auto& np : parameters(m))
    before.emplace_back(np.tensor.values().begin(), np.tensor.values().end());

  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.batch_size = 8;
  cfg.epochs = 2;
  cfg.seed = 3;
  train_model(m, ds, ds, cfg);

  const auto after = parameters(m);
  for (size_t i = 0; i < after.size(); ++i) {
    const auto now = after[i].tensor.values();
    CHECK(std::equal(now.begin(), now.end(), before[i].begin()));
  }
}

TEST_CASE("identical seeds give identical histories and checkpoints") {
  const auto ds = synth_spectral(toy_data_config());
  SplitSpec split;
  split.seed = 2;
  const SplitResult parts = subject_split(ds, split);

  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 8;
  cfg.epochs = 3;
  cfg.seed = 11;

  BioMambaModel m1 = build_model(toy_model_config());
  BioMambaModel m2 = build_model(toy_model_config());
  const TrainResult r1 = train_model(m1, parts.train, parts.val, cfg);
  const TrainResult r2 = train_model(m2, parts.train, parts.val, cfg);

  REQUIRE(r1.history.size() == r2.history.size());
  for (size_t e = 0; e < r1.history.size(); ++e) {
    CHECK(r1.history[e].train_loss == r2.history[e].train_loss);
    CHECK(r1.history[e].val_accuracy == r2.history[e].val_accuracy);
    CHECK(r1.history[e].val_f1 == r2.history[e].val_f1);
  }
  CHECK(r1.best_epoch == r2.best_epoch);

  const std::string p1 = "test_training_a.bmv1", p2 = "test_training_b.bmv1";
  save_checkpoint(m1, p1);
  save_checkpoint(m2, p2);
  CHECK(slurp(p1) == slurp(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());

  SUBCASE("the restored model reproduces the best validation accuracy") {
    const Tensor probs = predict_probabilities(m1, parts.val, cfg.batch_size);
    std::vector<int> labels;
    for (const auto& rec : parts.val.records) labels.push_back(rec.label);
    const MetricsReport rep = evaluate_predictions(probs, labels);
    CHECK(rep.accuracy == r1.best_val_accuracy);
  }
}

TEST_CASE("a single record is memorized within two hundred epochs") {
  BiosignalDataset one;
  const auto full = synth_spectral(toy_data_config());
  one.meta = full.meta;
  one.records.push_back(full.records[1]);

  BioMambaModel m = build_model(toy_model_config());
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.batch_size = 1;
  cfg.epochs = 200;
  cfg.seed = 9;
  const TrainResult res = train_model(m, one, one, cfg);
  CHECK(res.history.back().train_loss < 1e-3);
  CHECK(res.best_val_accuracy == 1.0);

  SUBCASE("masked feed-forward weights stayed exactly zero all run") {
    size_t masked = 0;
    for (const auto& block : m.blocks) {
      for (const auto* ffn : {&block.ffn1, &block.ffn2}) {
        const auto w = ffn->weight.values();
        for (size_t i = 0; i < w.size(); ++i) {
          if (!(*ffn->mask)[i]) {
            CHECK(w[i] == 0.0);
            ++masked;
          }
        }
      }
    }
    CHECK(masked > 0);
  }
}

TEST_CASE("full-batch loss is non-increasing for most seeds") {
  SynthConfig dc = toy_data_config();
  dc.n_subjects = 4;
  dc.trials_per_subject = 4;  // 16 records
  int monotone = 0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    dc.seed = 100 + seed;
    const auto ds = synth_spectral(dc);
    ModelConfig mc = toy_model_config();
    mc.seed = seed;
    BioMambaModel m = build_model(mc);
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = static_cast<int>(ds.size());
    cfg.epochs = 10;
    cfg.seed = seed;
    const TrainResult res = train_model(m, ds, ds, cfg);
    bool ok = true;
    for (size_t e = 1; e < res.history.size(); ++e)
      ok &= res.history[e].train_loss <= res.history[e - 1].train_loss + 1e-12;
    monotone += ok;
  }
  CHECK(monotone >= 4);
}

TEST_CASE("training rejects unusable splits") {
  BioMambaModel m = build_model(toy_model_config());
  const auto ds = synth_spectral(toy_data_config());
  TrainConfig cfg;
  cfg.epochs = 1;

  BiosignalDataset empty;
  empty.meta = ds.meta;
  CHECK_THROWS_AS(train_model(m, empty, ds, cfg), data_error);
  CHECK_THROWS_AS(train_model(m, ds, empty, cfg), data_error);

  SynthConfig wrong = toy_data_config();
  wrong.T = 64;
  CHECK_THROWS_AS(train_model(m, synth_spectral(wrong), ds, cfg), data_error);
}

TEST_CASE("prediction is invariant to the evaluation batch size") {
  BioMambaModel m = build_model(toy_model_config());
  const auto ds = synth_spectral(toy_data_config());
  const Tensor a = predict_probabilities(m, ds, 7);
  const Tensor b = predict_probabilities(m, ds, static_cast<int>(ds.size()));
  REQUIRE(a.shape() == b.shape());
  const auto av = a.values(), bv = b.values();
  for (size_t i = 0; i < av.size(); ++i) CHECK(av[i] == bv[i]);
  for (int r = 0; r < a.dim(0); ++r) {
    double sum = 0;
    for (int k = 0; k < a.dim(1); ++k) sum += a.at({r, k});
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("history serializes with a fixed column order") {
  CHECK(history_csv_header() == "epoch,train_loss,val_accuracy,val_f1,wall_ms");
  EpochStats e;
  e.epoch = 7;
  e.train_loss = 0.125;
  e.val_accuracy = 0.75;
  e.val_f1 = 0.5;
  e.wall_ms = 12.5;
  CHECK(history_csv_row(e) == "7,0.125,0.75,0.5,12.5");
}
