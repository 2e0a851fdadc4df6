#include <charconv>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "biomamba/bench.hpp"
#include "biomamba/dataio.hpp"
#include "biomamba/evalmetrics.hpp"
#include "biomamba/gradcheck.hpp"
#include "biomamba/model.hpp"
#include "biomamba/runconfig.hpp"
#include "biomamba/training.hpp"

namespace {

using namespace biomamba;

// Default-seed override; an explicit config key or flag still wins.
std::optional<uint64_t> env_seed() {
  const char* s = std::getenv("BIOMAMBA_SEED");
  if (s == nullptr || *s == '\0') return std::nullopt;
  uint64_t v = 0;
  const char* last = s + std::strlen(s);
  auto [p, ec] = std::from_chars(s, last, v);
  if (ec != std::errc() || p != last)
    throw config_error(
        fmt::format("BIOMAMBA_SEED value '{}' is not an unsigned integer", s));
  return v;
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw data_error(fmt::format("cannot open '{}' for writing", path));
  os << text;
  os.flush();
  if (!os) throw data_error(fmt::format("write to '{}' failed", path));
}

std::vector<int> labels_of(const BiosignalDataset& ds) {
  std::vector<int> out;
  out.reserve(ds.size());
  for (const auto& r : ds.records) out.push_back(r.label);
  return out;
}

MetricsReport eval_dataset(const BioMambaModel& m, const BiosignalDataset& ds,
                           int batch_size) {
  Tensor probs = predict_probabilities(m, ds, batch_size);
  const std::vector<int> labels = labels_of(ds);
  return evaluate_predictions(probs, labels);
}

std::vector<int> parse_lengths(const std::string& text) {
  std::vector<int> lengths;
  size_t pos = 0;
  while (pos <= text.size()) {
    size_t comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    const std::string tok = text.substr(pos, comma - pos);
    int v = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size() || v < 2)
      throw config_error(fmt::format("bad length '{}' in --lengths", tok));
    lengths.push_back(v);
    pos = comma + 1;
  }
  if (lengths.size() < 2)
    throw config_error("need at least two lengths for the scaling fit");
  return lengths;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"biosignal state-space classifier"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand(
      "synth", "generate a synthetic two-class spectral dataset");
  std::string synth_out;
  int synth_subjects = 8, synth_trials = 100, synth_T = 256, synth_C = 4;
  double synth_freq = 10.0, synth_fs = 128.0, synth_snr = 3.0;
  uint64_t synth_seed = 42;
  synth->add_option("--out", synth_out, "output dataset path")->required();
  synth->add_option("--subjects", synth_subjects, "number of subjects");
  synth->add_option("--trials", synth_trials,
                    "label-0/label-1 trial pairs per subject");
  synth->add_option("--T", synth_T, "timesteps per trial");
  synth->add_option("--C", synth_C, "channels");
  synth->add_option("--freq-hz", synth_freq, "class-1 tone frequency");
  synth->add_option("--fs-hz", synth_fs, "sampling rate");
  synth->add_option("--snr", synth_snr, "class-1 tone-to-noise power ratio");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->callback([&] {
    SynthConfig cfg;
    cfg.n_subjects = synth_subjects;
    cfg.trials_per_subject = 2 * synth_trials;
    cfg.T = synth_T;
    cfg.C = synth_C;
    cfg.f_signal_hz = synth_freq;
    cfg.fs_hz = synth_fs;
    cfg.snr = synth_snr;
    cfg.seed = synth_seed;
    if (synth->count("--seed") == 0)
      if (auto s = env_seed()) cfg.seed = *s;
    BiosignalDataset ds = synth_spectral(cfg);
    write_dataset(synth_out, ds);
    fmt::print("wrote {} records ({} subjects, T={}, C={}, K={}) to {}\n",
               ds.size(), cfg.n_subjects, ds.meta.T, ds.meta.C, ds.meta.K,
               synth_out);
  });

  auto* import = app.add_subcommand(
      "import", "convert a csv signal and its label sidecar to the container");
  std::string imp_data, imp_labels, imp_out;
  double imp_fs = 0.0;
  int imp_k = 0;
  import->add_option("--data", imp_data, "csv of timesteps x channels")
      ->required();
  import->add_option("--labels", imp_labels, "csv of label,subject_id per record")
      ->required();
  import->add_option("--fs-hz", imp_fs, "sampling rate")->required();
  import->add_option("--k", imp_k, "class count override (default: inferred)");
  import->add_option("--out", imp_out, "output dataset path")->required();
  import->callback([&] {
    BiosignalDataset ds = import_csv(imp_data, imp_labels, imp_fs, imp_k);
    write_dataset(imp_out, ds);
    fmt::print("imported {} records (T={}, C={}, K={}) to {}\n", ds.size(),
               ds.meta.T, ds.meta.C, ds.meta.K, imp_out);
  });

  auto* train = app.add_subcommand(
      "train", "train a model and write checkpoint, history, metrics");
  std::string tr_config, tr_data, tr_out;
  uint64_t tr_seed = 0;
  std::vector<std::string> tr_ablations;
  train->add_option("--config", tr_config, "key=value config file");
  train->add_option("--data", tr_data, "dataset path (overrides the config key)");
  train->add_option("--out", tr_out,
                    "output directory (overrides the config key)");
  train->add_option("--seed", tr_seed,
                    "model + shuffle seed (overrides the config key)");
  train->add_option("--ablation", tr_ablations,
                    "no-pse | no-tde | no-bidir | dense-ffn (repeatable)");
  train->callback([&] {
    RunConfig cfg =
        tr_config.empty() ? RunConfig{} : RunConfig::from_file(tr_config);
    if (train->count("--data") > 0) cfg.set("data", tr_data);
    if (train->count("--out") > 0) cfg.set("out", tr_out);
    if (train->count("--seed") > 0) cfg.set("seed", fmt::format("{}", tr_seed));
    for (const auto& a : tr_ablations) cfg.apply_ablation(a);
    if (!cfg.is_set("seed"))
      if (auto s = env_seed()) cfg.set("seed", fmt::format("{}", *s));
    if (cfg.data_path.empty())
      throw config_error("no dataset given (use --data or the data key)");
    if (cfg.out_dir.empty())
      throw config_error("no output directory given (use --out or the out key)");

    BiosignalDataset ds = read_dataset(cfg.data_path);
    // Shape keys left at defaults adopt the dataset's shape; explicit keys
    // must match it and are checked against it before training.
    if (!cfg.is_set("T")) cfg.set("T", fmt::format("{}", ds.meta.T));
    if (!cfg.is_set("C")) cfg.set("C", fmt::format("{}", ds.meta.C));
    if (!cfg.is_set("K")) cfg.set("K", fmt::format("{}", ds.meta.K));
    cfg.model.validate();
    cfg.train.validate();

    SplitSpec spec;
    spec.seed = cfg.model.seed;
    SplitResult split = subject_split(ds, spec);

    std::filesystem::create_directories(cfg.out_dir);
    const auto out = [&](const char* name) {
      return (std::filesystem::path(cfg.out_dir) / name).string();
    };
    write_file(out("config.resolved"), cfg.to_text());

    fmt::print("training on {} records, validating on {}, testing on {}\n",
               split.train.size(), split.val.size(), split.test.size());
    BioMambaModel model = build_model(cfg.model);
    TrainResult res = train_model(model, split.train, split.val, cfg.train);

    std::string hist = history_csv_header() + "\n";
    for (const auto& e : res.history) hist += history_csv_row(e) + "\n";
    write_file(out("history.csv"), hist);
    save_checkpoint(model, out("model.bmv1"));
    fmt::print("best epoch {} with validation accuracy {:.4f}\n",
               res.best_epoch, res.best_val_accuracy);

    if (split.test.size() == 0) {
      fmt::print(stderr, "warning: test split is empty, metrics skipped\n");
    } else {
      try {
        MetricsReport rep =
            eval_dataset(model, split.test, cfg.train.batch_size);
        write_file(out("metrics.csv"), metrics_csv_header() + "\n" +
                                           report_to_csv_row(rep) + "\n");
        fmt::print("test split metrics\n{}", report_to_kv(rep));
      } catch (const data_error& e) {
        fmt::print(stderr, "warning: test metrics skipped: {}\n", e.what());
      }
    }
    fmt::print("outputs in {}\n", cfg.out_dir);
  });

  auto* eval = app.add_subcommand("eval",
                                  "evaluate a checkpoint on a dataset split");
  std::string ev_model, ev_data, ev_split = "test", ev_out;
  int ev_batch = 64;
  eval->add_option("--model", ev_model, "checkpoint path")->required();
  eval->add_option("--data", ev_data, "dataset path")->required();
  eval->add_option("--split", ev_split, "train | val | test | all")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
  eval->add_option("--out", ev_out, "directory to also write metrics.csv");
  eval->add_option("--batch-size", ev_batch, "evaluation batch size");
  eval->callback([&] {
    if (ev_batch < 1)
      throw config_error(fmt::format("--batch-size {} must be at least 1", ev_batch));
    BioMambaModel model = load_checkpoint(ev_model);
    BiosignalDataset ds = read_dataset(ev_data);
    BiosignalDataset part;
    if (ev_split == "all") {
      part = std::move(ds);
    } else {
      // The checkpoint's seed reproduces the subject split used at training.
      SplitSpec spec;
      spec.seed = model.config.seed;
      SplitResult split = subject_split(ds, spec);
      part = ev_split == "train" ? std::move(split.train)
             : ev_split == "val" ? std::move(split.val)
                                 : std::move(split.test);
    }
    if (part.size() == 0)
      throw data_error(
          fmt::format("split '{}' of {} is empty", ev_split, ev_data));
    MetricsReport rep = eval_dataset(model, part, ev_batch);
    fmt::print("{}", report_to_kv(rep));
    fmt::print("{}\n{}\n", metrics_csv_header(), report_to_csv_row(rep));
    if (!ev_out.empty()) {
      std::filesystem::create_directories(ev_out);
      write_file((std::filesystem::path(ev_out) / "metrics.csv").string(),
                 metrics_csv_header() + "\n" + report_to_csv_row(rep) + "\n");
    }
  });

  auto* gc = app.add_subcommand("gradcheck",
                                "finite-difference gradient verification");
  std::string gc_config, gc_module;
  double gc_tol = 1e-4;
  gc->add_option("--config", gc_config,
                 "config file for the checked model (default: built-in toy)");
  gc->add_option("--tolerance", gc_tol, "max relative error allowed");
  gc->add_option("--module", gc_module, "substring filter on check names");
  gc->callback([&] {
    ModelConfig mc = gradcheck_config();
    if (!gc_config.empty()) {
      mc = RunConfig::from_file(gc_config).model;
      mc.validate();
    }
    GradCheckReport rep = run_grad_checks(gc_module, mc);
    if (rep.checks.empty())
      throw config_error(
          fmt::format("no gradient checks match module filter '{}'", gc_module));
    for (const auto& c : rep.checks)
      fmt::print("{:<28} {:9.3e} {}\n", c.name, c.max_rel_err,
                 c.max_rel_err < gc_tol ? "ok" : "FAIL");
    const auto& w = rep.worst();
    fmt::print("worst {} {:.3e} tolerance {:g}\n", w.name, w.max_rel_err,
               gc_tol);
    if (!rep.passed(gc_tol))
      throw check_error(fmt::format(
          "gradient check failed: {} has max relative error {:.3e} "
          "(tolerance {:g})",
          w.name, w.max_rel_err, gc_tol));
  });

  auto* bench = app.add_subcommand(
      "bench", "scaling benchmark of the scan and the forward pass");
  std::string bench_lengths = "512,1024,2048,4096,8192";
  int bench_repeat = 5;
  uint64_t bench_seed = 42;
  bench->add_option("--lengths", bench_lengths,
                    "comma-separated sequence lengths");
  bench->add_option("--repeat", bench_repeat,
                    "timed runs per length (median reported)");
  bench->add_option("--seed", bench_seed, "parameter seed");
  bench->callback([&] {
    if (bench->count("--seed") == 0)
      if (auto s = env_seed()) bench_seed = *s;
    if (bench_repeat < 1)
      throw config_error(
          fmt::format("--repeat {} must be at least 1", bench_repeat));
    const std::vector<int> lengths = parse_lengths(bench_lengths);
    BenchReport rep = run_bench(lengths, bench_repeat, bench_seed);
    fmt::print("{}\n", bench_csv_header());
    for (const auto& r : rep.rows) fmt::print("{}\n", bench_csv_row(r));
    fmt::print("# scan_exponent={:.4f}\n# forward_exponent={:.4f}\n",
               rep.scan_exponent, rep.forward_exponent);
  });

  auto* report = app.add_subcommand(
      "report", "parameter and flop accounting for a config or checkpoint");
  std::string rp_config, rp_model;
  int rp_batch = 1;
  report->add_option("--config", rp_config, "config file to build and count");
  report->add_option("--model", rp_model, "checkpoint to count");
  report->add_option("--batch", rp_batch, "batch size for the flop table");
  report->callback([&] {
    if (rp_config.empty() == rp_model.empty())
      throw config_error("give exactly one of --config or --model");
    if (rp_batch < 1)
      throw config_error(fmt::format("--batch {} must be at least 1", rp_batch));
    BioMambaModel m = [&] {
      if (!rp_model.empty()) return load_checkpoint(rp_model);
      ModelConfig mc = RunConfig::from_file(rp_config).model;
      mc.validate();
      return build_model(mc);
    }();
    const ModelConfig& c = m.config;
    fmt::print(
        "model T={} C={} K={} D={} M={} d_state={} expand={} conv_kernel={} "
        "dt_rank={} window={} hop={} sparsity={}\n",
        c.T, c.C, c.K, c.D, c.M, c.d_state, c.expand, c.conv_kernel,
        c.resolved_dt_rank(), c.window, c.hop, c.ffn_sparsity);
    ParamReport pr = count_params(m);
    fmt::print("\nparameters (allocated / active)\n");
    for (const auto& g : pr.groups)
      fmt::print("  {:<28} {:>12} {:>12}\n", g.name, g.allocated, g.active);
    fmt::print("  {:<28} {:>12} {:>12}\n", "total", pr.allocated, pr.active);
    FlopReport fr = count_flops(m, rp_batch);
    fmt::print("\nforward flops (batch {})\n", rp_batch);
    for (const auto& g : fr.groups)
      fmt::print("  {:<28} {:>16.0f}\n", g.name, g.flops);
    fmt::print("  {:<28} {:>16.0f}\n", "total", fr.total);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const config_error& e) {
    fmt::print(stderr, "configuration error: {}\n", e.what());
    return 2;
  } catch (const data_error& e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return 3;
  } catch (const check_error& e) {
    fmt::print(stderr, "check failed: {}\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
