#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hh/attention.hpp"
#include "hh/hardkuma.hpp"
#include "hh/kv_cache.hpp"
#include "hh/policy.hpp"
#include "hh/rng.hpp"
#include "hh/rolemap.hpp"
#include "hh/toy_model.hpp"

namespace hh {

struct TrainConfig {
  std::size_t steps = 3000;
  double lr_gates = 0.01;
  // Multiplier ascent must ramp slowly relative to gate movement: clipped
  // gates receive no distillation gradient, so a penalty overshoot that
  // drives every gate to zero cannot be undone.
  double lr_lambda = 0.0005;
  double n_target = 4.0;               // retrieval-head budget above layer 0
  double token_budget_fraction = 0.30; // selection budget as a fraction of seq_len
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  double stretch_lo = -0.1;
  double stretch_hi = 1.1;
  // synthetic passkey data
  std::size_t prompt_min = 48;
  std::size_t prompt_max = 96;
  std::size_t passkey_len = 6;
  std::size_t passkey_alphabet = 16;
  // gradient and export knobs
  double z_fd_step = 1e-4;             // central FD step for dL/dz
  std::size_t export_mc_samples = 4096;
  std::size_t log_every = 50;

  void validate(const ModelConfig& model) const {
    if (model.n_layers < 2)
      throw std::invalid_argument("TrainConfig: need at least two layers to gate");
    const auto gated = static_cast<double>((model.n_layers - 1) * model.n_kv_heads);
    if (!(n_target > 0.0) || n_target > gated)
      throw std::invalid_argument("TrainConfig: n_target must lie in (0, gated heads]");
    if (!(token_budget_fraction > 0.0 && token_budget_fraction <= 1.0))
      throw std::invalid_argument("TrainConfig: token budget fraction must lie in (0,1]");
    if (batch_size < 1 || steps < 1)
      throw std::invalid_argument("TrainConfig: steps and batch size must be >= 1");
    if (prompt_min < passkey_len + 4 || prompt_max < prompt_min)
      throw std::invalid_argument("TrainConfig: prompt range too small for the passkey");
    if (model.vocab_size < passkey_alphabet + 8)
      throw std::invalid_argument("TrainConfig: vocabulary too small for passkey layout");
    if (prompt_max + passkey_len + 1 > model.max_seq_len)
      throw std::invalid_argument("TrainConfig: prompt range exceeds max_seq_len");
  }
};

struct DistillBatch {
  std::vector<std::int32_t> prompt;
  std::vector<std::int32_t> target;  // the passkey tokens
  std::size_t passkey_pos = 0;       // start of the passkey inside the prompt
};

// Vocabulary layout for the synthetic retrieval task: the top two ids mark
// the passkey and the query, the next band is the passkey alphabet, and
// everything below is filler.
struct PasskeyVocab {
  std::int32_t query_mark, key_mark, alphabet_lo, alphabet_hi;

  explicit PasskeyVocab(const ModelConfig& cfg, const TrainConfig& tcfg)
      : query_mark(static_cast<std::int32_t>(cfg.vocab_size - 1)),
        key_mark(static_cast<std::int32_t>(cfg.vocab_size - 2)),
        alphabet_lo(static_cast<std::int32_t>(cfg.vocab_size - 2 - tcfg.passkey_alphabet)),
        alphabet_hi(static_cast<std::int32_t>(cfg.vocab_size - 2)) {}
};

// Deterministic synthetic passkey sequence: filler tokens with one embedded
// key-marked passkey and a trailing query mark. The generator verifies with
// the dense teacher that the passkey content is recoverable, i.e. that it
// actually moves the logits at the query position, and redraws otherwise.
inline DistillBatch gen_passkey_batch(const ToyModel& model, const TrainConfig& tcfg,
                                      std::uint64_t seed) {
  const ModelConfig& cfg = model.config;
  const PasskeyVocab vocab(cfg, tcfg);
  Rng rng(seed);
  for (int attempt = 0; attempt < 16; ++attempt) {
    const std::size_t prompt_len =
        tcfg.prompt_min + rng.uniform_index(tcfg.prompt_max - tcfg.prompt_min + 1);
    DistillBatch batch;
    batch.prompt.resize(prompt_len);
    for (auto& t : batch.prompt)
      t = static_cast<std::int32_t>(rng.uniform_index(static_cast<std::uint64_t>(vocab.alphabet_lo)));
    batch.prompt.back() = vocab.query_mark;
    // Key mark plus passkey, placed anywhere that leaves the query mark alone.
    const std::size_t span = tcfg.passkey_len + 1;
    const std::size_t pos = rng.uniform_index(prompt_len - span);
    batch.prompt[pos] = vocab.key_mark;
    batch.target.resize(tcfg.passkey_len);
    for (std::size_t i = 0; i < tcfg.passkey_len; ++i) {
      const auto tok = static_cast<std::int32_t>(
          vocab.alphabet_lo + static_cast<std::int32_t>(rng.uniform_index(tcfg.passkey_alphabet)));
      batch.prompt[pos + 1 + i] = tok;
      batch.target[i] = tok;
    }
    batch.passkey_pos = pos + 1;

    // Teacher pre-check: scrambling the passkey must change the next-token
    // logits at the query position.
    std::vector<std::int32_t> scrambled = batch.prompt;
    for (std::size_t i = 0; i < tcfg.passkey_len; ++i)
      scrambled[pos + 1 + i] = static_cast<std::int32_t>(
          vocab.alphabet_lo + (batch.target[i] - vocab.alphabet_lo + 1 + static_cast<std::int32_t>(i)) %
                                  static_cast<std::int32_t>(tcfg.passkey_alphabet));
    const Matrix<double> base = forward_full(model, batch.prompt);
    const Matrix<double> alt = forward_full(model, scrambled);
    double diff = 0.0;
    for (std::size_t j = 0; j < cfg.vocab_size; ++j)
      diff = std::max(diff, std::abs(base.at(prompt_len - 1, j) - alt.at(prompt_len - 1, j)));
    if (diff > 1e-9) return batch;
  }
  throw std::runtime_error("gen_passkey_batch: teacher cannot recover the passkey");
}

// Everything the student needs for one sequence: the dense teacher's prompt
// cache (shared with the student), its logits at the target positions, and
// the token sets selected at the last prompt position.
struct TrainContext {
  DistillBatch batch;
  std::vector<Matrix<double>> prompt_keys, prompt_values;  // [layer*n_kv+g], prompt rows
  Matrix<double> teacher_logits;                           // target_len x vocab
  std::vector<TokenSet> init_sets;                         // per kv head
};

inline TrainContext build_train_context(const ToyModel& model, const TrainConfig& tcfg,
                                        DistillBatch batch) {
  const ModelConfig& cfg = model.config;
  const std::size_t prompt_len = batch.prompt.size();
  const std::size_t target_len = batch.target.size();
  std::vector<std::int32_t> full = batch.prompt;
  full.insert(full.end(), batch.target.begin(), batch.target.end());

  ForwardCapture cap;
  cap.want_kv = true;
  cap.want_last_maps = true;
  cap.maps_position = prompt_len - 1;
  const Matrix<double> logits = forward_full(model, full, &cap);

  TrainContext ctx;
  ctx.batch = std::move(batch);
  ctx.teacher_logits = Matrix<double>(target_len, cfg.vocab_size);
  for (std::size_t i = 0; i < target_len; ++i)
    for (std::size_t j = 0; j < cfg.vocab_size; ++j)
      ctx.teacher_logits.at(i, j) = logits.at(prompt_len + i, j);

  ctx.prompt_keys.resize(cfg.n_layers * cfg.n_kv_heads);
  ctx.prompt_values.resize(cfg.n_layers * cfg.n_kv_heads);
  for (std::size_t s = 0; s < ctx.prompt_keys.size(); ++s) {
    ctx.prompt_keys[s] = Matrix<double>(prompt_len, cfg.d_head);
    ctx.prompt_values[s] = Matrix<double>(prompt_len, cfg.d_head);
    std::copy_n(cap.keys[s].data.begin(), prompt_len * cfg.d_head,
                ctx.prompt_keys[s].data.begin());
    std::copy_n(cap.values[s].data.begin(), prompt_len * cfg.d_head,
                ctx.prompt_values[s].data.begin());
  }

  ctx.init_sets.resize(cfg.n_kv_heads);
  const std::size_t budget = fraction_budget(tcfg.token_budget_fraction, prompt_len);
  for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) {
    // Maps were captured per layer; the set slot starts from the last
    // layer's selection, mirroring the decode engine's prefill.
    const auto& weights = cap.last_pooled_weights[cfg.n_layers - 1][g];
    ctx.init_sets[g] = args_top_k<double>(weights, budget);
  }
  return ctx;
}

// Gate bookkeeping: gates exist for every (layer >= 1, kv head).
struct GateLayout {
  std::size_t n_layers = 0, n_kv_heads = 0;

  explicit GateLayout(const ModelConfig& cfg)
      : n_layers(cfg.n_layers), n_kv_heads(cfg.n_kv_heads) {}

  std::size_t count() const { return (n_layers - 1) * n_kv_heads; }
  std::size_t index(std::size_t layer, std::size_t head) const {
    return (layer - 1) * n_kv_heads + head;
  }
};

struct TrainState {
  std::vector<hardkuma::GateParams> gates;  // GateLayout order
  double lambda = 0.0;
  std::size_t step = 0;
};

inline TrainState init_train_state(const ModelConfig& cfg, const TrainConfig& tcfg) {
  TrainState st;
  const GateLayout layout(cfg);
  st.gates.assign(layout.count(), hardkuma::GateParams::from_alpha_beta(
                                      1.0, 1.0, tcfg.stretch_lo, tcfg.stretch_hi));
  return st;
}

// Token sets consumed by the sparse branches, per target position, layer,
// and kv head; captured on a dynamic pass and replayed during the finite
// difference evaluations so selection jumps cannot pollute the gradient.
using FrozenSets = std::vector<std::vector<std::vector<TokenSet>>>;

// Training-time hybrid forward over the target positions. Every gated head
// computes both branches: the dense map (which also refreshes the token set
// propagated to the next layer) and the sparse map over the inherited set,
// mixed by that head's gate sample z.
inline Matrix<double> hybrid_forward(const ToyModel& model, const TrainConfig& tcfg,
                                     const TrainContext& ctx, std::span<const double> z,
                                     const FrozenSets* frozen = nullptr,
                                     FrozenSets* capture = nullptr) {
  const ModelConfig& cfg = model.config;
  const GateLayout layout(cfg);
  if (z.size() != layout.count())
    throw std::invalid_argument("hybrid_forward: one gate sample per gated head required");
  const std::size_t prompt_len = ctx.batch.prompt.size();
  const std::size_t target_len = ctx.batch.target.size();
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));

  KvCache cache(cfg.n_layers, cfg.n_kv_heads, cfg.d_head);
  cache.adopt_rows(ctx.prompt_keys, ctx.prompt_values, prompt_len);
  std::vector<TokenSet> sets = ctx.init_sets;

  if (capture) capture->assign(target_len, {});
  Matrix<double> logits(target_len, cfg.vocab_size);

  for (std::size_t i = 0; i < target_len; ++i) {
    const std::size_t pos = prompt_len + i;
    const std::size_t seq = pos + 1;
    const std::size_t budget = fraction_budget(tcfg.token_budget_fraction, seq);
    std::vector<double> x = embed(model, ctx.batch.target[i], pos);
    if (capture) (*capture)[i].assign(cfg.n_layers, std::vector<TokenSet>(cfg.n_kv_heads));

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      QkvOut qkv = compute_qkv(model, l, x, pos);
      for (std::size_t g = 0; g < cfg.n_kv_heads; ++g)
        cache.append(l, g, qkv.k_heads[g], qkv.v_heads[g]);
      const auto pooled = gqa_pool_queries(qkv.q_heads, cfg.group_size());

      std::vector<std::vector<double>> head_out(cfg.n_q_heads);
      for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) {
        const TokenSet* inherited = nullptr;
        if (l > 0) {
          inherited = frozen ? &(*frozen)[i][l][g] : &sets[g];
          if (capture) (*capture)[i][l][g] = *inherited;
        }
        const double zg = l == 0 ? 1.0 : z[layout.index(l, g)];

        for (std::size_t j = 0; j < cfg.group_size(); ++j) {
          const std::size_t hd = g * cfg.group_size() + j;
          AttnInput<double> in{qkv.q_heads[hd], cache.key_view(l, g, seq),
                               cache.value_view(l, g, seq), scale};
          if (l == 0 || zg == 1.0) {
            head_out[hd] = dense_attention(in).out;
          } else if (zg == 0.0) {
            head_out[hd] = sparse_attention(in, *inherited);
          } else {
            const auto dense = dense_attention(in).out;
            const auto sparse = sparse_attention(in, *inherited);
            auto& out = head_out[hd];
            out.resize(cfg.d_head);
            for (std::size_t c = 0; c < cfg.d_head; ++c)
              out[c] = zg * dense[c] + (1.0 - zg) * sparse[c];
          }
        }

        // The dense map always drives next-layer selection, frozen replays
        // excepted (their consumers read the recorded sets instead).
        if (!frozen) {
          AttnInput<double> sel{pooled[g], cache.key_view(l, g, seq),
                                cache.value_view(l, g, seq), scale};
          sets[g] = select_tokens(SparsityPolicy::top_k(budget), dense_attention(sel).weights, seq);
        }
      }
      attn_project_residual(model, l, head_out, x);
      ffn_residual(model, l, x);
    }
    const std::vector<double> lg = output_logits(model, x);
    for (std::size_t j = 0; j < cfg.vocab_size; ++j) logits.at(i, j) = lg[j];
  }
  return logits;
}

// Summed squared L2 distance over the target-token logits of one sequence.
inline double distill_loss(const Matrix<double>& student, const Matrix<double>& teacher) {
  if (student.rows != teacher.rows || student.cols != teacher.cols)
    throw std::invalid_argument("distill_loss: logit shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < student.data.size(); ++i) {
    const double d = student.data[i] - teacher.data[i];
    acc += d * d;
  }
  return acc;
}

inline double lagrangian(double distill, std::span<const hardkuma::GateParams> gates,
                         double lambda, double n_target) {
  if (lambda < 0.0) throw std::invalid_argument("lagrangian: lambda must be nonnegative");
  return distill + lambda * (hardkuma::expected_l0(gates) - n_target);
}

// Analytic gradient of 1 - F(-lo/(hi-lo); alpha, beta) wrt (alpha, beta).
inline std::pair<double, double> expected_l0_grad(const hardkuma::GateParams& g) {
  const double x0 = -g.stretch_lo / g.stretch_width();
  const double a = g.alpha(), b = g.beta();
  const double xa = std::pow(x0, a);
  const double one_m = 1.0 - xa;
  const double dF_da = b * std::pow(one_m, b - 1.0) * xa * std::log(x0);
  const double dF_db = -std::pow(one_m, b) * std::log(one_m);
  return {-dF_da, -dF_db};
}

struct GateGrads {
  std::vector<double> raw_alpha;  // d Lagrangian / d raw_alpha
  std::vector<double> raw_beta;
  double distill = 0.0;           // loss at the sampled gates
  double expected_l0 = 0.0;
};

// Pathwise gradient of the Lagrangian wrt the unconstrained gate
// parameters, holding the uniform drivers fixed. dL/dz comes from central
// finite differences on the mixing weight with frozen token sets; the
// budget term is analytic.
inline GateGrads grad_gates(const ToyModel& model, const TrainConfig& tcfg,
                            const std::vector<TrainContext>& batch, const TrainState& state,
                            std::span<const double> drivers) {
  const GateLayout layout(model.config);
  const std::size_t n = layout.count();
  if (drivers.size() != n) throw std::invalid_argument("grad_gates: one driver per gate required");

  std::vector<double> z(n);
  std::vector<hardkuma::PathwiseGrad> path(n);
  for (std::size_t i = 0; i < n; ++i) {
    z[i] = hardkuma::sample(state.gates[i], drivers[i]).z;
    path[i] = hardkuma::pathwise_grad(state.gates[i], drivers[i]);
  }

  GateGrads grads;
  grads.raw_alpha.assign(n, 0.0);
  grads.raw_beta.assign(n, 0.0);
  grads.expected_l0 = hardkuma::expected_l0(state.gates);

  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  std::vector<FrozenSets> frozen(batch.size());
  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    const Matrix<double> logits = hybrid_forward(model, tcfg, batch[bi], z, nullptr, &frozen[bi]);
    grads.distill += inv_batch * distill_loss(logits, batch[bi].teacher_logits);
  }

  const double h = tcfg.z_fd_step;
  for (std::size_t i = 0; i < n; ++i) {
    double dD_dz = 0.0;
    if (path[i].dz_dalpha != 0.0 || path[i].dz_dbeta != 0.0) {
      std::vector<double> zp(z.begin(), z.end()), zm(z.begin(), z.end());
      zp[i] += h;
      zm[i] -= h;
      for (std::size_t bi = 0; bi < batch.size(); ++bi) {
        const double lp = distill_loss(
            hybrid_forward(model, tcfg, batch[bi], zp, &frozen[bi], nullptr),
            batch[bi].teacher_logits);
        const double lm = distill_loss(
            hybrid_forward(model, tcfg, batch[bi], zm, &frozen[bi], nullptr),
            batch[bi].teacher_logits);
        dD_dz += inv_batch * (lp - lm) / (2.0 * h);
      }
    }
    const auto [dE_da, dE_db] = expected_l0_grad(state.gates[i]);
    const double dL_da = dD_dz * path[i].dz_dalpha + state.lambda * dE_da;
    const double dL_db = dD_dz * path[i].dz_dbeta + state.lambda * dE_db;
    grads.raw_alpha[i] = dL_da * state.gates[i].alpha();
    grads.raw_beta[i] = dL_db * state.gates[i].beta();
  }
  return grads;
}

struct TrainLogEntry {
  std::size_t step = 0;
  double distill = 0.0;
  double expected_l0 = 0.0;
  double lambda = 0.0;
};

// One optimization step: gates descend along the pathwise Lagrangian
// gradient, lambda ascends on the budget violation. Model weights stay
// frozen; only the distributional parameters move.
inline TrainLogEntry train_step(const ToyModel& model, const TrainConfig& tcfg,
                                TrainState& state, Rng& rng) {
  const GateLayout layout(model.config);
  std::vector<TrainContext> batch;
  batch.reserve(tcfg.batch_size);
  for (std::size_t b = 0; b < tcfg.batch_size; ++b) {
    const std::uint64_t salt = (state.step + 1) * 1000003ull + b;
    batch.push_back(
        build_train_context(model, tcfg, gen_passkey_batch(model, tcfg, tcfg.seed ^ salt)));
  }
  std::vector<double> drivers(layout.count());
  for (auto& u : drivers) u = rng.uniform_open();

  const GateGrads grads = grad_gates(model, tcfg, batch, state, drivers);
  for (std::size_t i = 0; i < layout.count(); ++i) {
    state.gates[i].raw_alpha -= tcfg.lr_gates * grads.raw_alpha[i];
    state.gates[i].raw_beta -= tcfg.lr_gates * grads.raw_beta[i];
  }
  state.lambda = std::max(0.0, state.lambda + tcfg.lr_lambda * (grads.expected_l0 - tcfg.n_target));
  ++state.step;
  return {state.step, grads.distill, grads.expected_l0, state.lambda};
}

// Deterministic role export: Retrieval iff the seeded Monte Carlo estimate
// of E[z] exceeds 0.5; layer 0 is Retrieval by construction.
inline RoleMap export_roles(const ToyModel& model, const TrainConfig& tcfg,
                            const TrainState& state) {
  const ModelConfig& cfg = model.config;
  const GateLayout layout(cfg);
  RoleMap rm;
  rm.n_layers = cfg.n_layers;
  rm.n_kv_heads = cfg.n_kv_heads;
  rm.model_checksum = cfg.checksum();
  const std::size_t total = cfg.n_layers * cfg.n_kv_heads;
  rm.roles.assign(total, HeadRole::Retrieval);
  rm.expectations.assign(total, 1.0);
  rm.gate_params.assign(total, hardkuma::GateParams::from_alpha_beta(1.0, 1.0, tcfg.stretch_lo,
                                                                     tcfg.stretch_hi));
  for (std::size_t l = 1; l < cfg.n_layers; ++l)
    for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) {
      const std::size_t gi = layout.index(l, g);
      const double e = hardkuma::expected_gate(state.gates[gi], tcfg.export_mc_samples,
                                               tcfg.seed * 0x9e3779b9ull + gi);
      const std::size_t ri = rm.index(l, g);
      rm.expectations[ri] = e;
      rm.roles[ri] = e > 0.5 ? HeadRole::Retrieval : HeadRole::Sparse;
      rm.gate_params[ri] = state.gates[gi];
    }
  rm.validate();
  return rm;
}

// Training-log line format: step, distill loss, expected L0, lambda.
inline std::string format_log_entry(const TrainLogEntry& e) {
  char line[128];
  std::snprintf(line, sizeof line, "%zu\t%.10g\t%.10g\t%.10g\n", e.step, e.distill, e.expected_l0,
                e.lambda);
  return line;
}

}  // namespace hh
