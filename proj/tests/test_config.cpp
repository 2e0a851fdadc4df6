#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <string>

#include "biomamba/runconfig.hpp"

using namespace biomamba;

TEST_CASE("defaults serialize with every documented key present") {
  const RunConfig cfg;
  const std::string text = cfg.to_text();
  for (const char* key :
       {"T=", "C=", "K=", "D=", "M=", "d_state=", "expand=", "conv_kernel=",
        "dt_rank=", "window=", "hop=", "use_pse=", "use_tde=", "use_hann=",
        "bidirectional=", "d_skip=", "sparsity=", "seed=", "learning_rate=",
        "batch_size=", "epochs=", "beta1=", "beta2=", "epsilon=", "data=", "out="}) {
    CAPTURE(key);
    CHECK(text.find(key) != std::string::npos);
  }
  CHECK(text.find("T=256\n") != std::string::npos);
  CHECK(text.find("use_pse=true\n") != std::string::npos);
  CHECK(text.find("epochs=100\n") != std::string::npos);
  CHECK(cfg.assigned.empty());
}

TEST_CASE("serialized text round-trips to an identical configuration") {
  RunConfig cfg;
  cfg.set("D", "64");
  cfg.set("sparsity", "0.7");
  cfg.set("learning_rate", "0.0005");
  cfg.set("seed", "123");
  cfg.set("use_hann", "true");
  cfg.set("data", "some/file.bsg1");
  const RunConfig back = RunConfig::from_text(cfg.to_text(), "echo");
  CHECK(back.to_text() == cfg.to_text());
  CHECK(back.model.D == 64);
  CHECK(back.model.ffn_sparsity == 0.7);
  CHECK(back.train.learning_rate == 0.0005);
  CHECK(back.model.seed == 123);
  CHECK(back.train.seed == 123);
  CHECK(back.data_path == "some/file.bsg1");
}

TEST_CASE("parser accepts comments, blanks and surrounding whitespace") {
  const RunConfig cfg = RunConfig::from_text(
      "# experiment 12\n"
      "\n"
      "  D = 32  \n"
      "\tepochs=7\n"
      "   # trailing comment line\n",
      "inline");
  CHECK(cfg.model.D == 32);
  CHECK(cfg.train.epochs == 7);
  CHECK(cfg.is_set("D"));
  CHECK(cfg.is_set("epochs"));
  CHECK_FALSE(cfg.is_set("T"));
}

TEST_CASE("strict parsing rejects malformed input with the line number") {
  CHECK_THROWS_WITH_AS(RunConfig::from_text("Dd=32\n", "f"),
                       doctest::Contains("unknown configuration key 'Dd'"),
                       config_error);
  CHECK_THROWS_WITH_AS(RunConfig::from_text("D=32\nD=33\n", "f"),
                       doctest::Contains("f:2"), config_error);
  CHECK_THROWS_WITH_AS(RunConfig::from_text("\n\njust words\n", "f"),
                       doctest::Contains("f:3"), config_error);
  CHECK_THROWS_WITH_AS(RunConfig::from_text("=5\n", "f"),
                       doctest::Contains("empty key"), config_error);
}

TEST_CASE("value parsing is typed and total") {
  RunConfig cfg;
  CHECK_THROWS_WITH_AS(cfg.set("D", "12x"), doctest::Contains("not an integer"),
                       config_error);
  CHECK_THROWS_WITH_AS(cfg.set("D", "1e3"), doctest::Contains("not an integer"),
                       config_error);
  CHECK_THROWS_WITH_AS(cfg.set("use_pse", "yes"), doctest::Contains("boolean"),
                       config_error);
  CHECK_THROWS_WITH_AS(cfg.set("sparsity", "half"), doctest::Contains("not a number"),
                       config_error);
  CHECK_THROWS_WITH_AS(cfg.set("seed", "-1"), doctest::Contains("non-negative"),
                       config_error);
  cfg.set("learning_rate", "5e-4");
  CHECK(cfg.train.learning_rate == 5e-4);
  cfg.set("use_tde", "0");
  CHECK_FALSE(cfg.model.use_tde);
}

TEST_CASE("ablation switches map onto the model flags") {
  RunConfig cfg;
  cfg.apply_ablation("no-pse");
  CHECK_FALSE(cfg.model.use_pse);
  CHECK(cfg.model.use_tde);

  RunConfig c2;
  c2.apply_ablation("no-tde");
  CHECK_FALSE(c2.model.use_tde);
  CHECK(c2.model.use_pse);

  RunConfig c3;
  c3.apply_ablation("no-bidir");
  CHECK_FALSE(c3.model.bidirectional);

  RunConfig c4;
  c4.apply_ablation("dense-ffn");
  CHECK(c4.model.ffn_sparsity == 0.0);
  CHECK(c4.is_set("sparsity"));

  CHECK_THROWS_WITH_AS(cfg.apply_ablation("no-ffn"), doctest::Contains("choices"),
                       config_error);
}

TEST_CASE("config files load from disk") {
  const std::string path = "test_config_tmp.cfg";
  {
    std::ofstream os(path);
    os << "# tiny\nM=2\nbatch_size=16\n";
  }
  const RunConfig cfg = RunConfig::from_file(path);
  CHECK(cfg.model.M == 2);
  CHECK(cfg.train.batch_size == 16);
  std::remove(path.c_str());
  CHECK_THROWS_AS(RunConfig::from_file("does_not_exist.cfg"), config_error);
}
