// hhd: hybrid-head sparse decoding workbench.
//
// Subcommands: init-model, specialize, decode, bench, overlap,
// sparsity-sweep. All outputs are delimited text written atomically; lines
// whose key starts with "time." are wall-clock data and are the only
// nondeterministic bytes for a fixed --seed.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hh/analysis.hpp"
#include "hh/decode_engine.hpp"
#include "hh/io.hpp"
#include "hh/kernel_sim.hpp"
#include "hh/policy.hpp"
#include "hh/rolemap.hpp"
#include "hh/specializer.hpp"
#include "hh/toy_model.hpp"
#include "hh/workbench.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

struct PolicyFlags {
  std::string name = "topk";
  std::size_t k = 0;
  double p = 0.0;
  double tau = 0.0;
  double theta = 0.0;

  hh::SparsityPolicy build() const {
    if (name == "topk") {
      if (k == 0) throw CLI::ValidationError("--policy topk requires --k");
      return hh::SparsityPolicy::top_k(k);
    }
    if (name == "topp") {
      if (p == 0.0) throw CLI::ValidationError("--policy topp requires --p");
      return hh::SparsityPolicy::top_p(p);
    }
    if (name == "threshold") {
      if (tau == 0.0) throw CLI::ValidationError("--policy threshold requires --tau");
      return hh::SparsityPolicy::threshold(tau);
    }
    if (name == "ratio") {
      if (theta == 0.0) throw CLI::ValidationError("--policy ratio requires --theta");
      return hh::SparsityPolicy::ratio(theta);
    }
    throw CLI::ValidationError("unknown policy " + name);
  }

  void record_into(hh::RunRecord& rec) const {
    rec.add("policy", name);
    if (name == "topk") rec.add("k", static_cast<std::uint64_t>(k));
    if (name == "topp") rec.add("p", p);
    if (name == "threshold") rec.add("tau", tau);
    if (name == "ratio") rec.add("theta", theta);
  }
};

std::string format_tokens(const std::vector<std::int32_t>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(tokens[i]);
  }
  out += '\n';
  return out;
}

int cmd_init_model(const std::string& config_path, std::uint64_t seed,
                   const std::string& out_path) {
  const hh::WorkbenchConfig cfg = hh::parse_workbench_config(hh::read_file(config_path));
  const hh::ToyModel model = hh::init_model(cfg.model, seed);
  hh::save_model(model, out_path);
  std::printf("wrote %s (config checksum %016llx)\n", out_path.c_str(),
              static_cast<unsigned long long>(cfg.model.checksum()));
  return 0;
}

int cmd_specialize(const std::string& config_path, const std::string& model_path,
                   const std::string& out_path, const std::string& log_path,
                   const std::string& record_path, std::uint64_t seed) {
  const auto t0 = Clock::now();
  hh::WorkbenchConfig cfg = hh::parse_workbench_config(hh::read_file(config_path));
  cfg.train.seed = seed;
  const hh::ToyModel model = hh::load_model(model_path);
  if (model.config.checksum() != cfg.model.checksum())
    throw std::runtime_error("specialize: model file does not match the config file");

  hh::TrainState state = hh::init_train_state(model.config, cfg.train);
  hh::Rng rng(cfg.train.seed);
  std::string log = "# step\tdistill\texpected_l0\tlambda\n";
  hh::TrainLogEntry last{};
  for (std::size_t step = 0; step < cfg.train.steps; ++step) {
    last = hh::train_step(model, cfg.train, state, rng);
    if (last.step % cfg.train.log_every == 0 || last.step == cfg.train.steps)
      log += hh::format_log_entry(last);
  }
  const hh::RoleMap roles = hh::export_roles(model, cfg.train, state);
  roles.save(out_path);
  if (!log_path.empty()) hh::atomic_write_file(log_path, log);

  hh::RunRecord rec("specialize");
  rec.add("config", config_path);
  rec.add("model", model_path);
  rec.add("seed", seed);
  rec.add_hex("model_checksum", model.config.checksum());
  rec.add("steps", static_cast<std::uint64_t>(cfg.train.steps));
  rec.add("n_target", cfg.train.n_target);
  rec.add("final_distill", last.distill);
  rec.add("final_expected_l0", last.expected_l0);
  rec.add("final_lambda", state.lambda);
  rec.add("constraint_gap", std::abs(last.expected_l0 - cfg.train.n_target));
  rec.add("retrieval_heads", static_cast<std::uint64_t>(roles.retrieval_count_above_layer0()));
  rec.add_timestamp();
  rec.add_time("wall_ms", ms_since(t0));
  if (!record_path.empty()) rec.save(record_path);
  std::printf("wrote %s (%zu retrieval heads above layer 0, constraint gap %.4f)\n",
              out_path.c_str(), roles.retrieval_count_above_layer0(),
              std::abs(last.expected_l0 - cfg.train.n_target));
  return 0;
}

int cmd_decode(const std::string& model_path, const std::string& rolemap_path,
               const std::string& prompt_path, std::size_t steps, const PolicyFlags& policy,
               std::size_t correction_window, bool correction, const std::string& record_path,
               const std::string& tokens_path, std::uint64_t seed) {
  const hh::ToyModel model = hh::load_model(model_path);
  const hh::RoleMap roles = hh::RoleMap::load(rolemap_path, model.config.checksum());
  const std::vector<std::int32_t> prompt =
      hh::read_prompt_file(prompt_path, model.config.vocab_size);

  hh::EngineOptions opt{policy.build()};
  opt.correction_window = correction_window;
  hh::DecodeEngine engine(model, roles, opt);

  const auto t0 = Clock::now();
  engine.prefill(prompt);
  const double prefill_ms = ms_since(t0);

  std::vector<std::int32_t> generated;
  std::vector<double> step_ms;
  std::size_t corrections = 0;
  for (std::size_t i = 0; i < steps; ++i) {
    const std::int32_t next = hh::argmax_token(engine.last_logits());
    const auto ts = Clock::now();
    engine.decode_step(next);
    if (correction && engine.cache_correction()) ++corrections;
    step_ms.push_back(ms_since(ts));
    generated.push_back(next);
  }

  hh::RunRecord rec("decode");
  rec.add("model", model_path);
  rec.add("rolemap", rolemap_path);
  rec.add("prompt", prompt_path);
  rec.add("seed", seed);
  rec.add_hex("model_checksum", model.config.checksum());
  policy.record_into(rec);
  rec.add("steps", static_cast<std::uint64_t>(steps));
  rec.add("prompt_len", static_cast<std::uint64_t>(prompt.size()));
  rec.add("correction", correction ? "on" : "off");
  rec.add("correction_window", static_cast<std::uint64_t>(correction_window));
  rec.add("corrections_applied", static_cast<std::uint64_t>(corrections));
  rec.add("sparsity", steps > 0 ? engine.measure_sparsity() : 0.0);
  rec.add("tokens", [&] {
    std::string s = format_tokens(generated);
    s.pop_back();
    return s;
  }());
  rec.add_timestamp();
  rec.add_time("prefill_ms", prefill_ms);
  rec.add_time("tpot_ms_mean",
               step_ms.empty()
                   ? 0.0
                   : std::accumulate(step_ms.begin(), step_ms.end(), 0.0) / step_ms.size());
  {
    std::string all;
    char buf[32];
    for (std::size_t i = 0; i < step_ms.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s%.6g", i ? " " : "", step_ms[i]);
      all += buf;
    }
    rec.add("time.step_ms", all);
  }
  rec.save(record_path);
  if (!tokens_path.empty()) hh::atomic_write_file(tokens_path, format_tokens(generated));
  std::printf("%s", format_tokens(generated).c_str());
  return 0;
}

int cmd_bench(const std::string& model_path, const std::string& rolemap_path,
              const std::vector<std::size_t>& lengths, const std::vector<std::size_t>& splits,
              double sparsity, std::size_t workers, const std::string& out_path,
              std::uint64_t seed) {
  const hh::ToyModel model = hh::load_model(model_path);
  const hh::RoleMap roles = hh::RoleMap::load(rolemap_path, model.config.checksum());
  const hh::ModelConfig& cfg = model.config;
  const std::size_t block_size = 64;
  const std::size_t bytes_per_block =
      block_size * cfg.d_head * 2 * sizeof(float);  // one K block + one V block

  hh::RunRecord rec("bench");
  rec.add("model", model_path);
  rec.add("rolemap", rolemap_path);
  rec.add("seed", seed);
  rec.add_hex("model_checksum", cfg.checksum());
  rec.add("sparsity", sparsity);
  rec.add("block_size", static_cast<std::uint64_t>(block_size));
  rec.add("bytes_per_block", static_cast<std::uint64_t>(bytes_per_block));
  rec.add("workers", static_cast<std::uint64_t>(workers));
  rec.add_timestamp();

  std::string table =
      "length\tsplits\tlayer\tretrieval_heads\tsparse_heads\tpooled_crit_blocks\t"
      "naive_crit_blocks\tdense_crit_blocks\tbalance_ratio\tdense_over_pooled\n";
  std::string times;

  for (std::size_t length : lengths) {
    for (std::size_t nsplits : splits) {
      double step_wall_ms = 0.0;
      std::size_t pooled_total = 0, dense_total = 0;
      for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
        const std::size_t nb = (length + block_size - 1) / block_size;
        std::size_t n_retr = 0;
        hh::kernel::Workload<float> w;
        w.batch = 1;
        w.n_kv_heads = cfg.n_kv_heads;
        w.group_size = cfg.group_size();
        w.d_head = cfg.d_head;
        w.seq_len = length;
        w.block_size = block_size;
        w.scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(cfg.d_head)));
        w.blocks.batch = 1;
        w.blocks.n_kv_heads = cfg.n_kv_heads;
        w.blocks.ids.resize(cfg.n_kv_heads);
        hh::Rng rng(seed ^ (length * 1315423911ull) ^ layer);
        for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) {
          const bool retrieval = layer == 0 || roles.role(layer, g) == hh::HeadRole::Retrieval;
          n_retr += retrieval;
          auto& list = w.blocks.ids[g];
          if (retrieval) {
            list.resize(nb);
            std::iota(list.begin(), list.end(), 0u);
          } else {
            const std::size_t keep = hh::fraction_budget(1.0 - sparsity, nb);
            std::vector<std::uint32_t> all(nb);
            std::iota(all.begin(), all.end(), 0u);
            for (std::size_t i = nb; i > 1; --i) std::swap(all[i - 1], all[rng.uniform_index(i)]);
            all.resize(keep);
            std::sort(all.begin(), all.end());
            list = all;
          }
        }
        w.keys.resize(cfg.n_kv_heads);
        w.values.resize(cfg.n_kv_heads);
        for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) {
          w.keys[g] = hh::Matrix<float>(length, cfg.d_head);
          w.values[g] = hh::Matrix<float>(length, cfg.d_head);
          for (auto& v : w.keys[g].data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
          for (auto& v : w.values[g].data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
        }
        w.queries.resize(w.n_q_heads());
        for (auto& q : w.queries) {
          q.resize(cfg.d_head);
          for (auto& v : q) v = static_cast<float>(rng.uniform(-1.0, 1.0));
        }

        const auto t0 = Clock::now();
        const auto result = hh::kernel::run(w, nsplits, workers);
        step_wall_ms += ms_since(t0);
        const auto cost = hh::kernel::latency_model(result.schedule, bytes_per_block);
        pooled_total += cost.pooled_critical_blocks;
        dense_total += nb;

        char row[256];
        std::snprintf(row, sizeof row, "%zu\t%zu\t%zu\t%zu\t%zu\t%zu\t%zu\t%zu\t%.6g\t%.6g\n",
                      length, nsplits, layer, n_retr, cfg.n_kv_heads - n_retr,
                      cost.pooled_critical_blocks, cost.naive_critical_blocks, nb,
                      cost.balance_ratio,
                      static_cast<double>(nb) /
                          static_cast<double>(std::max<std::size_t>(1, cost.pooled_critical_blocks)));
        table += row;
      }
      char row[256];
      std::snprintf(row, sizeof row, "%zu\t%zu\tall\t-\t-\t%zu\t-\t%zu\t-\t%.6g\n", length,
                    nsplits, pooled_total, dense_total,
                    static_cast<double>(dense_total) /
                        static_cast<double>(std::max<std::size_t>(1, pooled_total)));
      table += row;
      char tl[128];
      std::snprintf(tl, sizeof tl, "time.step_wall_ms %zu %zu %.6g\n", length, nsplits,
                    step_wall_ms);
      times += tl;
    }
  }
  hh::atomic_write_file(out_path, rec.to_text() + table + times);
  std::printf("wrote %s\n", out_path.c_str());
  return 0;
}

int cmd_overlap(const std::string& model_path, const std::string& prompt_path, std::size_t k,
                const std::string& out_path) {
  const hh::ToyModel model = hh::load_model(model_path);
  const std::vector<std::int32_t> prompt =
      hh::read_prompt_file(prompt_path, model.config.vocab_size);
  const hh::OverlapGrid grid = hh::overlap_grid(model, prompt, k);

  hh::RunRecord rec("overlap");
  rec.add("model", model_path);
  rec.add("prompt", prompt_path);
  rec.add_hex("model_checksum", model.config.checksum());
  rec.add("k", static_cast<std::uint64_t>(k));
  rec.add("prompt_len", static_cast<std::uint64_t>(prompt.size()));
  rec.add("rows", static_cast<std::uint64_t>(grid.values.rows));
  rec.add("cols", static_cast<std::uint64_t>(grid.values.cols));
  rec.add_timestamp();

  std::string table = "# overlap of adjacent-layer top-k sets; row l = layers (l, l+1)\n";
  for (std::size_t l = 0; l < grid.values.rows; ++l) {
    char buf[48];
    for (std::size_t g = 0; g < grid.values.cols; ++g) {
      std::snprintf(buf, sizeof buf, "%s%.10g", g ? "\t" : "", grid.values.at(l, g));
      table += buf;
    }
    table += '\n';
  }
  hh::atomic_write_file(out_path, rec.to_text() + table);
  std::printf("wrote %s\n", out_path.c_str());
  return 0;
}

int cmd_sparsity_sweep(const std::string& model_path, const std::string& rolemap_path,
                       std::size_t steps, std::size_t prompt_len, const std::string& out_path,
                       std::uint64_t seed) {
  const hh::ToyModel model = hh::load_model(model_path);
  const hh::RoleMap roles = hh::RoleMap::load(rolemap_path, model.config.checksum());

  // Synthetic passkey prompt for the task.
  hh::TrainConfig gen;
  gen.prompt_min = prompt_len;
  gen.prompt_max = prompt_len;
  gen.passkey_len = 6;
  gen.passkey_alphabet = 16;
  gen.validate(model.config);
  const hh::DistillBatch batch = hh::gen_passkey_batch(model, gen, seed);

  // Dense greedy reference over the same prompt.
  std::vector<std::int32_t> dense_tokens;
  {
    hh::DecodeEngine dense(model,
                           hh::RoleMap::all_retrieval(model.config.n_layers,
                                                      model.config.n_kv_heads,
                                                      model.config.checksum()),
                           hh::EngineOptions{hh::SparsityPolicy::top_p(1.0)});
    dense.prefill(batch.prompt);
    for (std::size_t i = 0; i < steps; ++i) {
      const std::int32_t next = hh::argmax_token(dense.last_logits());
      dense_tokens.push_back(next);
      dense.decode_step(next);
    }
  }

  struct GridPoint {
    std::string family;
    double param;
    hh::SparsityPolicy policy;
  };
  const std::size_t full = batch.prompt.size() + steps;
  std::vector<GridPoint> grid;
  for (std::size_t k : {full, full / 2, full / 8})
    grid.push_back({"topk", static_cast<double>(k), hh::SparsityPolicy::top_k(std::max<std::size_t>(1, k))});
  for (double p : {0.99, 0.995, 0.999}) grid.push_back({"topp", p, hh::SparsityPolicy::top_p(p)});
  // Thresholds straddle the uniform attention weight of the context.
  const double uniform_w = 1.0 / static_cast<double>(full);
  for (double tau : {2.0 * uniform_w, uniform_w, 0.5 * uniform_w})
    grid.push_back({"threshold", tau, hh::SparsityPolicy::threshold(tau)});
  for (double theta : {0.7, 0.8, 0.9}) grid.push_back({"ratio", theta, hh::SparsityPolicy::ratio(theta)});

  hh::RunRecord rec("sparsity-sweep");
  rec.add("model", model_path);
  rec.add("rolemap", rolemap_path);
  rec.add("seed", seed);
  rec.add_hex("model_checksum", model.config.checksum());
  rec.add("steps", static_cast<std::uint64_t>(steps));
  rec.add("prompt_len", static_cast<std::uint64_t>(batch.prompt.size()));
  rec.add_timestamp();

  std::string table = "family\tparam\tsparsity\tdense_agreement\n";
  for (const GridPoint& point : grid) {
    hh::DecodeEngine engine(model, roles, hh::EngineOptions{point.policy});
    engine.prefill(batch.prompt);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < steps; ++i) {
      const std::int32_t next = hh::argmax_token(engine.last_logits());
      agree += next == dense_tokens[i];
      engine.decode_step(next);
    }
    char row[128];
    std::snprintf(row, sizeof row, "%s\t%.10g\t%.10g\t%.10g\n", point.family.c_str(), point.param,
                  steps > 0 ? engine.measure_sparsity() : 0.0,
                  steps > 0 ? static_cast<double>(agree) / static_cast<double>(steps) : 1.0);
    table += row;
  }
  hh::atomic_write_file(out_path, rec.to_text() + table);
  std::printf("wrote %s\n", out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hybrid-head sparse decoding workbench"};
  app.require_subcommand(1);
  app.fallthrough();

  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "default seed for all subcommands")->envname("HHD_SEED");

  std::string config_path, model_path, rolemap_path, prompt_path, out_path, log_path,
      record_path, tokens_path;

  auto* init = app.add_subcommand("init-model", "create a deterministic toy model file");
  init->add_option("--config", config_path, "key-value config file")->required();
  init->add_option("--out", out_path, "output weight file")->required();

  auto* spc = app.add_subcommand("specialize", "learn head roles on synthetic passkey data");
  spc->add_option("--config", config_path, "key-value config file")->required();
  spc->add_option("--model", model_path, "toy model weight file")->required();
  spc->add_option("--out", out_path, "output role map file")->required();
  spc->add_option("--log", log_path, "training log (tsv)");
  spc->add_option("--record", record_path, "run record file");

  PolicyFlags policy;
  std::size_t steps = 32, correction_window = 32, k_flag = 5, bench_workers = 1,
              sweep_prompt_len = 160;
  bool correction = false;
  double bench_sparsity = 0.9;
  std::vector<std::size_t> bench_lengths{1024, 2048, 4096};
  std::vector<std::size_t> bench_splits{1, 2, 4, 8};

  auto* dec = app.add_subcommand("decode", "greedy decoding with hybrid heads");
  dec->add_option("--model", model_path)->required();
  dec->add_option("--rolemap", rolemap_path)->required();
  dec->add_option("--prompt", prompt_path, "whitespace-separated token ids")->required();
  dec->add_option("--steps", steps, "tokens to generate");
  dec->add_option("--policy", policy.name, "topk|topp|threshold|ratio");
  dec->add_option("--k", policy.k, "topk budget");
  dec->add_option("--p", policy.p, "topp cumulative mass");
  dec->add_option("--tau", policy.tau, "threshold cutoff");
  dec->add_option("--theta", policy.theta, "ratio of context excluded");
  dec->add_option("--correction-window", correction_window, "tokens per correction window");
  dec->add_flag("--correction", correction, "run cache correction every window");
  dec->add_option("--record", record_path, "run record file")->required();
  dec->add_option("--tokens-out", tokens_path, "write generated ids to file");

  auto* bench = app.add_subcommand("bench", "kernel workload/latency sweep");
  bench->add_option("--model", model_path)->required();
  bench->add_option("--rolemap", rolemap_path)->required();
  bench->add_option("--lengths", bench_lengths, "context lengths")->delimiter(',');
  bench->add_option("--splits", bench_splits, "split counts")->delimiter(',');
  bench->add_option("--sparsity", bench_sparsity, "sparse-head excluded fraction");
  bench->add_option("--workers", bench_workers, "simulator worker threads");
  bench->add_option("--out", out_path)->required();

  auto* over = app.add_subcommand("overlap", "adjacent-layer top-k overlap grid");
  over->add_option("--model", model_path)->required();
  over->add_option("--prompt", prompt_path)->required();
  over->add_option("--k", k_flag, "top-k set size");
  over->add_option("--out", out_path)->required();

  auto* sweep = app.add_subcommand("sparsity-sweep", "policy grid vs dense agreement");
  sweep->add_option("--model", model_path)->required();
  sweep->add_option("--rolemap", rolemap_path)->required();
  sweep->add_option("--steps", steps, "tokens to generate per point");
  sweep->add_option("--prompt-len", sweep_prompt_len, "synthetic prompt length");
  sweep->add_option("--out", out_path)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (init->parsed()) return cmd_init_model(config_path, seed, out_path);
    if (spc->parsed())
      return cmd_specialize(config_path, model_path, out_path, log_path, record_path, seed);
    if (dec->parsed())
      return cmd_decode(model_path, rolemap_path, prompt_path, steps, policy, correction_window,
                        correction, record_path, tokens_path, seed);
    if (bench->parsed())
      return cmd_bench(model_path, rolemap_path, bench_lengths, bench_splits, bench_sparsity,
                       bench_workers, out_path, seed);
    if (over->parsed()) return cmd_overlap(model_path, prompt_path, k_flag, out_path);
    if (sweep->parsed())
      return cmd_sparsity_sweep(model_path, rolemap_path, steps, sweep_prompt_len, out_path, seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "hhd: error: %s\n", e.what());
    return 1;
  }
  return 0;
}
