#pragma once

#include <set>
#include <string>

#include "biomamba/model.hpp"
#include "biomamba/training.hpp"

namespace biomamba {

// Line-oriented key=value run configuration covering the model, the
// optimizer, and the two path conventions. Parsing is strict: unknown keys,
// duplicate keys, and malformed values are configuration errors, so a typo
// can never silently run a different experiment.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string data_path;  // key "data"
  std::string out_dir;    // key "out"

  // Keys assigned by a file, a flag, or an ablation (not left at defaults).
  std::set<std::string> assigned;

  bool is_set(const std::string& key) const { return assigned.count(key) > 0; }

  // Parses and assigns one key. Throws config_error on unknown keys or
  // unparseable values.
  void set(const std::string& key, const std::string& value);

  // Ablation switches: no-pse, no-tde, no-bidir, dense-ffn.
  void apply_ablation(const std::string& name);

  // One line per key in canonical order; re-parses to an equal config.
  std::string to_text() const;

  static RunConfig from_text(const std::string& text, const std::string& source);
  static RunConfig from_file(const std::string& path);

  // All known keys with their current values, in canonical order.
  std::vector<std::pair<std::string, std::string>> entries() const;
};

}  // namespace biomamba
