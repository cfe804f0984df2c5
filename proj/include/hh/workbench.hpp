#pragma once

// File formats and record plumbing for the hhd command-line workbench:
// key-value run configs, whitespace-separated prompt files, and run
// records. Record lines starting with "time." carry wall-clock data and
// are the only nondeterministic content in any output file.

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "hh/io.hpp"
#include "hh/specializer.hpp"
#include "hh/toy_model.hpp"

namespace hh {

struct WorkbenchConfig {
  ModelConfig model;
  TrainConfig train;
};

// One flat key-value file drives both the model shape and the training
// knobs. Unknown keys are errors.
inline WorkbenchConfig parse_workbench_config(const std::string& text) {
  const auto kv = parse_key_value_text(text);
  static const std::set<std::string> model_keys = {
      "n_layers", "n_q_heads", "n_kv_heads", "d_head",
      "d_ff",     "vocab_size", "max_seq_len", "pos_scheme"};
  static const std::set<std::string> train_keys = {
      "steps",          "lr_gates",      "lr_lambda",        "n_target",
      "token_budget_fraction", "batch_size", "prompt_min",   "prompt_max",
      "passkey_len",    "passkey_alphabet", "z_fd_step",     "export_mc_samples",
      "log_every",      "stretch_lo",    "stretch_hi"};
  for (const auto& [key, value] : kv)
    if (!model_keys.count(key) && !train_keys.count(key))
      throw std::runtime_error("config: unknown key " + key);

  WorkbenchConfig cfg;
  cfg.model = parse_model_config(kv);
  TrainConfig& t = cfg.train;
  auto get_size = [&](const char* key, std::size_t& out) {
    if (auto it = kv.find(key); it != kv.end()) out = std::stoull(it->second);
  };
  auto get_real = [&](const char* key, double& out) {
    if (auto it = kv.find(key); it != kv.end()) out = std::stod(it->second);
  };
  get_size("steps", t.steps);
  get_real("lr_gates", t.lr_gates);
  get_real("lr_lambda", t.lr_lambda);
  get_real("n_target", t.n_target);
  get_real("token_budget_fraction", t.token_budget_fraction);
  get_size("batch_size", t.batch_size);
  get_size("prompt_min", t.prompt_min);
  get_size("prompt_max", t.prompt_max);
  get_size("passkey_len", t.passkey_len);
  get_size("passkey_alphabet", t.passkey_alphabet);
  get_real("z_fd_step", t.z_fd_step);
  get_size("export_mc_samples", t.export_mc_samples);
  get_size("log_every", t.log_every);
  get_real("stretch_lo", t.stretch_lo);
  get_real("stretch_hi", t.stretch_hi);
  t.validate(cfg.model);
  return cfg;
}

inline std::vector<std::int32_t> read_prompt_file(const std::string& path,
                                                  std::size_t vocab_size) {
  std::istringstream in(read_file(path));
  std::vector<std::int32_t> tokens;
  long long v;
  while (in >> v) {
    if (v < 0 || static_cast<std::size_t>(v) >= vocab_size)
      throw std::runtime_error("prompt: token id out of range: " + std::to_string(v));
    tokens.push_back(static_cast<std::int32_t>(v));
  }
  if (tokens.empty()) throw std::runtime_error("prompt: no tokens in " + path);
  return tokens;
}

// Run record: ordered "key value" lines. Every run is reconstructible from
// its record plus seeds; rerunning a command reproduces the file byte for
// byte except for time.* lines.
class RunRecord {
 public:
  explicit RunRecord(const std::string& command) {
    add("command", command);
    add("format_version", "1");
  }

  void add(const std::string& key, const std::string& value) {
    lines_.push_back(key + " " + value);
  }
  void add(const std::string& key, std::uint64_t v) { add(key, std::to_string(v)); }
  void add(const std::string& key, std::int64_t v) { add(key, std::to_string(v)); }
  void add(const std::string& key, double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    add(key, std::string(buf));
  }
  void add_hex(const std::string& key, std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
    add(key, std::string(buf));
  }
  void add_time(const std::string& key, double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    add("time." + key, std::string(buf));
  }
  void add_timestamp() {
    std::time_t now = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    add("time.timestamp", std::string(buf));
  }

  std::string to_text() const {
    std::string out = "# hhd run record\n";
    for (const auto& l : lines_) out += l + "\n";
    return out;
  }

  void save(const std::string& path) const { atomic_write_file(path, to_text()); }

 private:
  std::vector<std::string> lines_;
};

}  // namespace hh
