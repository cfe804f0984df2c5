#include "hh/specializer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "test_util.hpp"

using namespace hh;

namespace {

ModelConfig mini_config(std::size_t layers = 2) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_q_heads = 4;
  c.n_kv_heads = 2;
  c.d_head = 4;
  c.d_ff = 16;
  c.vocab_size = 32;
  c.max_seq_len = 64;
  return c;
}

TrainConfig mini_train() {
  TrainConfig t;
  t.prompt_min = 16;
  t.prompt_max = 24;
  t.passkey_len = 3;
  t.passkey_alphabet = 8;
  t.n_target = 1.0;
  t.seed = 11;
  t.lr_lambda = 0.01;  // few gates, small violation: the fast ramp is fine
  return t;
}

TEST(GenPasskeyBatch, DeterministicStructured) {
  const ToyModel m = init_model(mini_config(), 3);
  const TrainConfig t = mini_train();
  t.validate(m.config);
  const DistillBatch a = gen_passkey_batch(m, t, 42);
  const DistillBatch b = gen_passkey_batch(m, t, 42);
  EXPECT_EQ(a.prompt, b.prompt);
  EXPECT_EQ(a.target, b.target);

  EXPECT_GE(a.prompt.size(), t.prompt_min);
  EXPECT_LE(a.prompt.size(), t.prompt_max);
  const PasskeyVocab vocab(m.config, t);
  EXPECT_EQ(a.prompt.back(), vocab.query_mark);
  EXPECT_EQ(a.prompt[a.passkey_pos - 1], vocab.key_mark);
  ASSERT_EQ(a.target.size(), t.passkey_len);
  for (std::size_t i = 0; i < t.passkey_len; ++i) {
    EXPECT_EQ(a.prompt[a.passkey_pos + i], a.target[i]);
    EXPECT_GE(a.target[i], vocab.alphabet_lo);
    EXPECT_LT(a.target[i], vocab.alphabet_hi);
  }

  const DistillBatch c = gen_passkey_batch(m, t, 43);
  EXPECT_NE(a.prompt, c.prompt);
}

TEST(HybridForward, AllOnesIsBitIdenticalToTeacher) {
  const ToyModel m = init_model(mini_config(3), 5);
  const TrainConfig t = mini_train();
  const TrainContext ctx = build_train_context(m, t, gen_passkey_batch(m, t, 7));
  const GateLayout layout(m.config);
  const std::vector<double> ones(layout.count(), 1.0);
  const Matrix<double> student = hybrid_forward(m, t, ctx, ones);
  ASSERT_EQ(student.data.size(), ctx.teacher_logits.data.size());
  for (std::size_t i = 0; i < student.data.size(); ++i)
    EXPECT_EQ(student.data[i], ctx.teacher_logits.data[i]) << "index " << i;
}

TEST(HybridForward, AllZerosWithFullBudgetMatchesTeacher) {
  const ToyModel m = init_model(mini_config(3), 6);
  TrainConfig t = mini_train();
  t.token_budget_fraction = 1.0;
  const TrainContext ctx = build_train_context(m, t, gen_passkey_batch(m, t, 8));
  const std::vector<double> zeros(GateLayout(m.config).count(), 0.0);
  const Matrix<double> student = hybrid_forward(m, t, ctx, zeros);
  double diff = 0.0;
  for (std::size_t i = 0; i < student.data.size(); ++i)
    diff = std::max(diff, std::abs(student.data[i] - ctx.teacher_logits.data[i]));
  EXPECT_LT(diff, 1e-6);
}

// Hand-composed two-layer oracle for the gate mixture: layer 0 dense, layer
// 1 heads combined as z * dense + (1-z) * sparse over the set selected at
// layer 0 by the pooled query.
TEST(HybridForward, MidGateMatchesMixtureOracle) {
  const ModelConfig cfg = mini_config(2);
  const ToyModel m = init_model(cfg, 9);
  const TrainConfig t = mini_train();
  const TrainContext ctx = build_train_context(m, t, gen_passkey_batch(m, t, 10));
  const GateLayout layout(cfg);
  std::vector<double> z(layout.count());
  z[0] = 0.37;
  z[1] = 0.81;
  const Matrix<double> student = hybrid_forward(m, t, ctx, z);

  const std::size_t prompt_len = ctx.batch.prompt.size();
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
  KvCache cache(cfg.n_layers, cfg.n_kv_heads, cfg.d_head);
  cache.adopt_rows(ctx.prompt_keys, ctx.prompt_values, prompt_len);
  std::vector<TokenSet> sets = ctx.init_sets;
  Matrix<double> oracle(ctx.batch.target.size(), cfg.vocab_size);

  for (std::size_t i = 0; i < ctx.batch.target.size(); ++i) {
    const std::size_t pos = prompt_len + i;
    const std::size_t seq = pos + 1;
    const std::size_t budget = fraction_budget(t.token_budget_fraction, seq);
    std::vector<double> x = embed(m, ctx.batch.target[i], pos);
    // Layer 0: dense everywhere, refresh sets from pooled maps.
    {
      QkvOut qkv = compute_qkv(m, 0, x, pos);
      for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) cache.append(0, g, qkv.k_heads[g], qkv.v_heads[g]);
      std::vector<std::vector<double>> head_out(cfg.n_q_heads);
      for (std::size_t hd = 0; hd < cfg.n_q_heads; ++hd) {
        const std::size_t g = hd / cfg.group_size();
        AttnInput<double> in{qkv.q_heads[hd], cache.key_view(0, g, seq), cache.value_view(0, g, seq), scale};
        head_out[hd] = dense_attention(in).out;
      }
      const auto pooled = gqa_pool_queries(qkv.q_heads, cfg.group_size());
      for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) {
        AttnInput<double> in{pooled[g], cache.key_view(0, g, seq), cache.value_view(0, g, seq), scale};
        sets[g] = args_top_k<double>(dense_attention(in).weights, budget);
      }
      attn_project_residual(m, 0, head_out, x);
      ffn_residual(m, 0, x);
    }
    // Layer 1: mixture per head.
    {
      QkvOut qkv = compute_qkv(m, 1, x, pos);
      for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) cache.append(1, g, qkv.k_heads[g], qkv.v_heads[g]);
      std::vector<std::vector<double>> head_out(cfg.n_q_heads);
      for (std::size_t hd = 0; hd < cfg.n_q_heads; ++hd) {
        const std::size_t g = hd / cfg.group_size();
        AttnInput<double> in{qkv.q_heads[hd], cache.key_view(1, g, seq), cache.value_view(1, g, seq), scale};
        const auto dense = dense_attention(in).out;
        const auto sparse = sparse_attention(in, sets[g]);
        std::vector<double> mix(cfg.d_head);
        const double zg = z[layout.index(1, g)];
        for (std::size_t c = 0; c < cfg.d_head; ++c) mix[c] = zg * dense[c] + (1.0 - zg) * sparse[c];
        head_out[hd] = mix;
      }
      attn_project_residual(m, 1, head_out, x);
      ffn_residual(m, 1, x);
    }
    const auto lg = output_logits(m, x);
    for (std::size_t j = 0; j < cfg.vocab_size; ++j) oracle.at(i, j) = lg[j];
    cache.commit_row();
  }

  double diff = 0.0;
  for (std::size_t i = 0; i < student.data.size(); ++i)
    diff = std::max(diff, std::abs(student.data[i] - oracle.data[i]));
  EXPECT_LT(diff, 1e-6);
}

TEST(HybridForward, EmptyInheritedSetIsAnError) {
  const ToyModel m = init_model(mini_config(2), 12);
  const TrainConfig t = mini_train();
  const TrainContext ctx = build_train_context(m, t, gen_passkey_batch(m, t, 13));
  const GateLayout layout(m.config);
  const std::vector<double> z(layout.count(), 0.25);
  FrozenSets frozen(ctx.batch.target.size());
  for (auto& per_layer : frozen)
    per_layer.assign(m.config.n_layers, std::vector<TokenSet>(m.config.n_kv_heads));  // all empty
  EXPECT_THROW(hybrid_forward(m, t, ctx, z, &frozen, nullptr), std::invalid_argument);
}

TEST(DistillLoss, DefinitionAndOracle) {
  Matrix<double> a(2, 3), b(2, 3);
  EXPECT_DOUBLE_EQ(distill_loss(a, b), 0.0);
  // Constant offset c over one target row: loss contribution |c|^2 per row.
  for (std::size_t j = 0; j < 3; ++j) b.at(0, j) = 2.0;
  EXPECT_DOUBLE_EQ(distill_loss(a, b), 3.0 * 4.0);

  Rng rng(14);
  Matrix<double> s = testutil::random_matrix(rng, 4, 7), t = testutil::random_matrix(rng, 4, 7);
  double oracle = 0.0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 7; ++j) {
      const double d = s.at(i, j) - t.at(i, j);
      oracle += d * d;
    }
  EXPECT_NEAR(distill_loss(s, t), oracle, 1e-9);

  Matrix<double> bad(3, 7);
  EXPECT_THROW(distill_loss(s, bad), std::invalid_argument);
}

TEST(Lagrangian, CompositionIdentities) {
  std::vector<hardkuma::GateParams> gates(4, hardkuma::GateParams::from_alpha_beta(1.0, 1.0));
  const double e = hardkuma::expected_l0(gates);
  EXPECT_DOUBLE_EQ(lagrangian(3.25, gates, 0.0, 1.0), 3.25);
  EXPECT_DOUBLE_EQ(lagrangian(3.25, gates, 7.0, e), 3.25);
  Rng rng(15);
  for (int i = 0; i < 20; ++i) {
    const double d = rng.uniform(0.0, 5.0), lam = rng.uniform(0.0, 2.0), tgt = rng.uniform(0.0, 4.0);
    EXPECT_NEAR(lagrangian(d, gates, lam, tgt), d + lam * (e - tgt), 1e-12);
  }
  EXPECT_THROW(lagrangian(1.0, gates, -0.5, 1.0), std::invalid_argument);
}

TEST(ExpectedL0Grad, SignsAndNumericAgreement) {
  Rng rng(16);
  for (int i = 0; i < 100; ++i) {
    const double a = rng.uniform(0.3, 5.0), b = rng.uniform(0.3, 5.0);
    const auto g = hardkuma::GateParams::from_alpha_beta(a, b);
    const auto [da, db] = expected_l0_grad(g);
    EXPECT_GT(da, 0.0);  // raising alpha raises P(Z != 0)
    EXPECT_LT(db, 0.0);
    const double h = 1e-6;
    auto e_of = [&](double aa, double bb) {
      const auto gg = hardkuma::GateParams::from_alpha_beta(aa, bb);
      return 1.0 - hardkuma::prob_zero(gg);
    };
    EXPECT_NEAR(da, (e_of(a + h, b) - e_of(a - h, b)) / (2 * h), 1e-5);
    EXPECT_NEAR(db, (e_of(a, b + h) - e_of(a, b - h)) / (2 * h), 1e-5);
  }
}

TEST(GradGates, ClippedSamplesWithZeroLambdaGiveZeroGradient) {
  const ToyModel m = init_model(mini_config(2), 17);
  const TrainConfig t = mini_train();
  std::vector<TrainContext> batch;
  batch.push_back(build_train_context(m, t, gen_passkey_batch(m, t, 18)));
  TrainState st = init_train_state(m.config, t);
  // Uniform gates: u=0.99 clips to 0, u=0.01 clips to 1.
  const std::vector<double> drivers{0.99, 0.01};
  const GateGrads g = grad_gates(m, t, batch, st, drivers);
  for (double v : g.raw_alpha) EXPECT_EQ(v, 0.0);
  for (double v : g.raw_beta) EXPECT_EQ(v, 0.0);
}

// Central finite differences over the raw gate parameters on a full
// two-layer, two-head training instance.
TEST(GradGates, MatchesFiniteDifferencesOnToyInstance) {
  const ToyModel m = init_model(mini_config(2), 19);
  const TrainConfig t = mini_train();
  std::vector<TrainContext> batch;
  batch.push_back(build_train_context(m, t, gen_passkey_batch(m, t, 20)));
  TrainState st = init_train_state(m.config, t);
  st.lambda = 0.35;
  st.gates[0] = hardkuma::GateParams::from_alpha_beta(1.4, 0.8);
  st.gates[1] = hardkuma::GateParams::from_alpha_beta(0.9, 1.3);

  // Drivers chosen to land strictly inside (0, 1) after stretching.
  Rng rng(21);
  std::vector<double> drivers(st.gates.size());
  for (std::size_t i = 0; i < drivers.size(); ++i) {
    for (;;) {
      const double u = rng.uniform_open();
      const auto s = hardkuma::sample(st.gates[i], u);
      const double stretched = st.gates[i].stretch_lo + st.gates[i].stretch_width() * s.s;
      if (stretched > 0.05 && stretched < 0.95) {
        drivers[i] = u;
        break;
      }
    }
  }

  const GateGrads grads = grad_gates(m, t, batch, st, drivers);

  // Frozen sets from the unperturbed pass keep the loss differentiable.
  std::vector<double> z0(st.gates.size());
  for (std::size_t i = 0; i < z0.size(); ++i)
    z0[i] = hardkuma::sample(st.gates[i], drivers[i]).z;
  FrozenSets frozen;
  hybrid_forward(m, t, batch[0], z0, nullptr, &frozen);

  auto full_loss = [&](const std::vector<hardkuma::GateParams>& gates) {
    std::vector<double> z(gates.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = hardkuma::sample(gates[i], drivers[i]).z;
    const double d =
        distill_loss(hybrid_forward(m, t, batch[0], z, &frozen, nullptr), batch[0].teacher_logits);
    return lagrangian(d, gates, st.lambda, t.n_target);
  };

  const double h = 1e-4;
  for (std::size_t i = 0; i < st.gates.size(); ++i) {
    for (int which = 0; which < 2; ++which) {
      auto up = st.gates, dn = st.gates;
      if (which == 0) {
        up[i].raw_alpha += h;
        dn[i].raw_alpha -= h;
      } else {
        up[i].raw_beta += h;
        dn[i].raw_beta -= h;
      }
      const double fd = (full_loss(up) - full_loss(dn)) / (2 * h);
      const double got = which == 0 ? grads.raw_alpha[i] : grads.raw_beta[i];
      const double denom = std::max(std::abs(fd), 1e-6);
      EXPECT_LT(std::abs(got - fd) / denom, 1e-3)
          << "gate " << i << (which == 0 ? " alpha" : " beta");
    }
  }
}

TEST(TrainStep, LambdaAscentRules) {
  const ToyModel m = init_model(mini_config(2), 22);
  TrainConfig t = mini_train();
  t.n_target = 0.5;  // uniform init has expected_l0 = 2 * 11/12 > 0.5
  TrainState st = init_train_state(m.config, t);
  Rng rng(23);
  const TrainLogEntry e = train_step(m, t, st, rng);
  EXPECT_GT(st.lambda, 0.0);
  EXPECT_GT(e.expected_l0, t.n_target);

  // Under-budget with lambda at zero stays clamped at zero.
  TrainConfig t2 = mini_train();
  t2.n_target = 2.0;  // equals the gate count, above 2 * 11/12
  TrainState st2 = init_train_state(m.config, t2);
  const TrainLogEntry e2 = train_step(m, t2, st2, rng);
  EXPECT_LT(e2.expected_l0, t2.n_target);
  EXPECT_EQ(st2.lambda, 0.0);
}

// With lambda positive and the distillation force absent, one descent step
// along the penalty gradient reduces the expected L0 when above budget.
TEST(TrainStep, MonotonePenaltyDescent) {
  std::vector<hardkuma::GateParams> gates(6, hardkuma::GateParams::from_alpha_beta(1.0, 1.0));
  const double before = hardkuma::expected_l0(gates);
  const double lambda = 2.0, lr = 0.01;
  for (auto& g : gates) {
    const auto [da, db] = expected_l0_grad(g);
    g.raw_alpha -= lr * lambda * da * g.alpha();
    g.raw_beta -= lr * lambda * db * g.beta();
  }
  const double after = hardkuma::expected_l0(gates);
  EXPECT_LT(after, before);
}

TEST(ExportRoles, SaturatedGatesGetTheRightRole) {
  const ModelConfig cfg = mini_config(3);
  const ToyModel m = init_model(cfg, 24);
  const TrainConfig t = mini_train();
  TrainState st = init_train_state(cfg, t);
  const GateLayout layout(cfg);
  // Layer 1 heads hot (P(Z=1) ~ 1), layer 2 heads cold (P(Z=0) ~ 1).
  st.gates[layout.index(1, 0)] = hardkuma::GateParams::from_alpha_beta(200.0, 1.0);
  st.gates[layout.index(1, 1)] = hardkuma::GateParams::from_alpha_beta(150.0, 1.0);
  st.gates[layout.index(2, 0)] = hardkuma::GateParams::from_alpha_beta(0.01, 1.0);
  st.gates[layout.index(2, 1)] = hardkuma::GateParams::from_alpha_beta(0.02, 1.5);
  const RoleMap rm = export_roles(m, t, st);
  EXPECT_EQ(rm.role(1, 0), HeadRole::Retrieval);
  EXPECT_EQ(rm.role(1, 1), HeadRole::Retrieval);
  EXPECT_EQ(rm.role(2, 0), HeadRole::Sparse);
  EXPECT_EQ(rm.role(2, 1), HeadRole::Sparse);
  EXPECT_EQ(rm.role(0, 0), HeadRole::Retrieval);
  EXPECT_NO_THROW(rm.validate());
  // Export is deterministic.
  const RoleMap rm2 = export_roles(m, t, st);
  EXPECT_EQ(rm2.to_text(), rm.to_text());
}

TEST(TrainStep, ShortRunShrinksConstraintGap) {
  const ModelConfig cfg = mini_config(3);  // 4 gated heads
  const ToyModel m = init_model(cfg, 25);
  TrainConfig t = mini_train();
  t.n_target = 1.0;
  t.prompt_min = 12;
  t.prompt_max = 16;
  t.seed = 2;
  TrainState st = init_train_state(cfg, t);
  Rng rng(t.seed);
  double gap = std::abs(hardkuma::expected_l0(st.gates) - t.n_target);
  for (int step = 0; step < 450; ++step) {
    const TrainLogEntry e = train_step(m, t, st, rng);
    gap = std::abs(e.expected_l0 - t.n_target);
  }
  EXPECT_LT(gap, 0.5) << "constraint gap should close on the budget";
}

}  // namespace
