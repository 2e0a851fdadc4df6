#include "biomamba/runconfig.hpp"

#include <fmt/format.h>

#include <charconv>
#include <fstream>
#include <sstream>

namespace biomamba {

namespace {

int64_t parse_integer(const std::string& key, const std::string& value) {
  int64_t out = 0;
  const char* first = value.data();
  const char* last = value.data() + value.size();
  const auto res = std::from_chars(first, last, out);
  if (res.ec != std::errc{} || res.ptr != last)
    throw config_error(fmt::format("key {}: '{}' is not an integer", key, value));
  return out;
}

int parse_int(const std::string& key, const std::string& value) {
  const int64_t v = parse_integer(key, value);
  if (v < INT32_MIN || v > INT32_MAX)
    throw config_error(fmt::format("key {}: {} does not fit a 32-bit value", key, v));
  return static_cast<int>(v);
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
  uint64_t out = 0;
  const char* last = value.data() + value.size();
  const auto res = std::from_chars(value.data(), last, out);
  if (res.ec != std::errc{} || res.ptr != last)
    throw config_error(
        fmt::format("key {}: '{}' is not a non-negative integer", key, value));
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  double out = 0;
  const char* last = value.data() + value.size();
  const auto res = std::from_chars(value.data(), last, out);
  if (res.ec != std::errc{} || res.ptr != last)
    throw config_error(fmt::format("key {}: '{}' is not a number", key, value));
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw config_error(
      fmt::format("key {}: '{}' is not a boolean (true/false/1/0)", key, value));
}

std::string bool_str(bool v) { return v ? "true" : "false"; }

std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "T") model.T = parse_int(key, value);
  else if (key == "C") model.C = parse_int(key, value);
  else if (key == "K") model.K = parse_int(key, value);
  else if (key == "D") model.D = parse_int(key, value);
  else if (key == "M") model.M = parse_int(key, value);
  else if (key == "d_state") model.d_state = parse_int(key, value);
  else if (key == "expand") model.expand = parse_int(key, value);
  else if (key == "conv_kernel") model.conv_kernel = parse_int(key, value);
  else if (key == "dt_rank") model.dt_rank = parse_int(key, value);
  else if (key == "window") model.window = parse_int(key, value);
  else if (key == "hop") model.hop = parse_int(key, value);
  else if (key == "use_pse") model.use_pse = parse_bool(key, value);
  else if (key == "use_tde") model.use_tde = parse_bool(key, value);
  else if (key == "use_hann") model.use_hann = parse_bool(key, value);
  else if (key == "bidirectional") model.bidirectional = parse_bool(key, value);
  else if (key == "d_skip") model.d_skip_enabled = parse_bool(key, value);
  else if (key == "sparsity") model.ffn_sparsity = parse_double(key, value);
  else if (key == "seed") {
    model.seed = parse_u64(key, value);
    train.seed = model.seed;
  } else if (key == "learning_rate") train.learning_rate = parse_double(key, value);
  else if (key == "batch_size") train.batch_size = parse_int(key, value);
  else if (key == "epochs") train.epochs = parse_int(key, value);
  else if (key == "beta1") train.beta1 = parse_double(key, value);
  else if (key == "beta2") train.beta2 = parse_double(key, value);
  else if (key == "epsilon") train.epsilon = parse_double(key, value);
  else if (key == "data") data_path = value;
  else if (key == "out") out_dir = value;
  else throw config_error(fmt::format("unknown configuration key '{}'", key));
  assigned.insert(key);
}

void RunConfig::apply_ablation(const std::string& name) {
  if (name == "no-pse") set("use_pse", "false");
  else if (name == "no-tde") set("use_tde", "false");
  else if (name == "no-bidir") set("bidirectional", "false");
  else if (name == "dense-ffn") set("sparsity", "0");
  else
    throw config_error(fmt::format(
        "unknown ablation '{}' (choices: no-pse, no-tde, no-bidir, dense-ffn)",
        name));
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  return {
      {"T", fmt::format("{}", model.T)},
      {"C", fmt::format("{}", model.C)},
      {"K", fmt::format("{}", model.K)},
      {"D", fmt::format("{}", model.D)},
      {"M", fmt::format("{}", model.M)},
      {"d_state", fmt::format("{}", model.d_state)},
      {"expand", fmt::format("{}", model.expand)},
      {"conv_kernel", fmt::format("{}", model.conv_kernel)},
      {"dt_rank", fmt::format("{}", model.dt_rank)},
      {"window", fmt::format("{}", model.window)},
      {"hop", fmt::format("{}", model.hop)},
      {"use_pse", bool_str(model.use_pse)},
      {"use_tde", bool_str(model.use_tde)},
      {"use_hann", bool_str(model.use_hann)},
      {"bidirectional", bool_str(model.bidirectional)},
      {"d_skip", bool_str(model.d_skip_enabled)},
      {"sparsity", fmt::format("{}", model.ffn_sparsity)},
      {"seed", fmt::format("{}", model.seed)},
      {"learning_rate", fmt::format("{}", train.learning_rate)},
      {"batch_size", fmt::format("{}", train.batch_size)},
      {"epochs", fmt::format("{}", train.epochs)},
      {"beta1", fmt::format("{}", train.beta1)},
      {"beta2", fmt::format("{}", train.beta2)},
      {"epsilon", fmt::format("{}", train.epsilon)},
      {"data", data_path},
      {"out", out_dir},
  };
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [key, value] : entries())
    out += fmt::format("{}={}\n", key, value);
  return out;
}

RunConfig RunConfig::from_text(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw config_error(
          fmt::format("{}:{}: expected key=value, got '{}'", source, lineno, stripped));
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (key.empty())
      throw config_error(fmt::format("{}:{}: empty key", source, lineno));
    if (cfg.is_set(key))
      throw config_error(
          fmt::format("{}:{}: duplicate key '{}'", source, lineno, key));
    try {
      cfg.set(key, value);
    } catch (const config_error& e) {
      throw config_error(fmt::format("{}:{}: {}", source, lineno, e.what()));
    }
  }
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw config_error(fmt::format("cannot open config file '{}'", path));
  std::stringstream buf;
  buf << is.rdbuf();
  return from_text(buf.str(), path);
}

}  // namespace biomamba
