#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "hh/attention.hpp"
#include "hh/kv_cache.hpp"
#include "hh/policy.hpp"
#include "hh/rolemap.hpp"
#include "hh/toy_model.hpp"

namespace hh {

struct EngineOptions {
  SparsityPolicy policy = SparsityPolicy::top_k(1);
  std::size_t correction_window = 32;
  // Whether cache_correction also recomputes the TokenSets from the
  // corrected cache. Off by default.
  bool refresh_sets_on_correction = false;
  bool record_token_sets = false;
};

// Snapshot of one decode step when record_token_sets is on.
struct StepTrace {
  // [layer][kv head]: the set consumed by a sparse head, or the set emitted
  // by a retrieval head after refresh.
  std::vector<std::vector<TokenSet>> sets;
  std::vector<std::vector<HeadRole>> effective_roles;
};

// Hybrid-head greedy decoder: retrieval heads run dense attention and
// refresh the critical-token sets via the active policy; sparse heads
// attend only to the set inherited from the same head index below.
class DecodeEngine {
 public:
  DecodeEngine(const ToyModel& model, const RoleMap& roles, EngineOptions opt)
      : model_(model), roles_(roles), opt_(opt) {
    model_.config.validate();
    roles_.validate();
    if (roles_.n_layers != model_.config.n_layers ||
        roles_.n_kv_heads != model_.config.n_kv_heads)
      throw std::invalid_argument("DecodeEngine: role map shape does not match model");
    if (roles_.model_checksum != model_.config.checksum())
      throw std::invalid_argument("DecodeEngine: role map was built for a different model config");
    if (opt_.correction_window < 1)
      throw std::invalid_argument("DecodeEngine: correction window must be >= 1");
  }

  // Dense prefill over the prompt for all heads; the initial TokenSets come
  // from the final prompt position with every head acting as a retrieval
  // head for that one step.
  void prefill(std::span<const std::int32_t> prompt) {
    if (prompt.empty()) throw std::invalid_argument("prefill: empty prompt");
    if (prefilled_) throw std::logic_error("prefill: already prefilled");
    const ModelConfig& cfg = model_.config;
    cache_ = KvCache(cfg.n_layers, cfg.n_kv_heads, cfg.d_head);
    sets_.assign(cfg.n_kv_heads, TokenSet{});
    const double scale = attn_scale();
    for (std::size_t t = 0; t < prompt.size(); ++t) {
      std::vector<double> x = embed(model_, prompt[t], t);
      const bool last = t + 1 == prompt.size();
      for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        QkvOut qkv = compute_qkv(model_, l, x, t);
        for (std::size_t g = 0; g < cfg.n_kv_heads; ++g)
          cache_.append(l, g, qkv.k_heads[g], qkv.v_heads[g]);
        std::vector<std::vector<double>> head_out(cfg.n_q_heads);
        for (std::size_t hd = 0; hd < cfg.n_q_heads; ++hd) {
          const std::size_t g = hd / cfg.group_size();
          AttnInput<double> in{qkv.q_heads[hd], cache_.key_view(l, g, t + 1),
                               cache_.value_view(l, g, t + 1), scale};
          head_out[hd] = dense_attention(in).out;
        }
        if (last) {
          const auto pooled = gqa_pool_queries(qkv.q_heads, cfg.group_size());
          for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) {
            AttnInput<double> in{pooled[g], cache_.key_view(l, g, t + 1),
                                 cache_.value_view(l, g, t + 1), scale};
            const auto weights = dense_attention(in).weights;
            sets_[g] = select_tokens(opt_.policy, weights, t + 1);
          }
        }
        attn_project_residual(model_, l, head_out, x);
        ffn_residual(model_, l, x);
      }
      cache_.commit_row();
      tokens_.push_back(prompt[t]);
      if (last) last_logits_ = output_logits(model_, x);
    }
    prefilled_ = true;
  }

  std::vector<double> decode_step(std::int32_t token) {
    if (!prefilled_) throw std::logic_error("decode_step: prefill required first");
    const ModelConfig& cfg = model_.config;
    const std::size_t t = cache_.length();
    const std::size_t seq = t + 1;
    const double scale = attn_scale();
    std::vector<double> x = embed(model_, token, t);

    StepTrace trace;
    if (opt_.record_token_sets) {
      trace.sets.resize(cfg.n_layers);
      trace.effective_roles.resize(cfg.n_layers);
    }

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      QkvOut qkv = compute_qkv(model_, l, x, t);
      for (std::size_t g = 0; g < cfg.n_kv_heads; ++g)
        cache_.append(l, g, qkv.k_heads[g], qkv.v_heads[g]);

      std::vector<std::vector<double>> head_out(cfg.n_q_heads);
      std::optional<std::vector<std::vector<double>>> pooled;
      if (opt_.record_token_sets) {
        trace.sets[l].resize(cfg.n_kv_heads);
        trace.effective_roles[l].resize(cfg.n_kv_heads);
      }
      for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) {
        const bool retrieval = l == 0 || roles_.role(l, g) == HeadRole::Retrieval;
        if (retrieval) {
          for (std::size_t j = 0; j < cfg.group_size(); ++j) {
            const std::size_t hd = g * cfg.group_size() + j;
            AttnInput<double> in{qkv.q_heads[hd], cache_.key_view(l, g, seq),
                                 cache_.value_view(l, g, seq), scale};
            head_out[hd] = dense_attention(in).out;
          }
          if (!pooled) pooled = gqa_pool_queries(qkv.q_heads, cfg.group_size());
          AttnInput<double> sel{(*pooled)[g], cache_.key_view(l, g, seq),
                                cache_.value_view(l, g, seq), scale};
          sets_[g] = select_tokens(opt_.policy, dense_attention(sel).weights, seq);
        } else {
          const TokenSet& s = sets_[g];
          if (s.empty()) throw std::logic_error("decode_step: sparse head with empty token set");
          for (std::size_t j = 0; j < cfg.group_size(); ++j) {
            const std::size_t hd = g * cfg.group_size() + j;
            AttnInput<double> in{qkv.q_heads[hd], cache_.key_view(l, g, seq),
                                 cache_.value_view(l, g, seq), scale};
            head_out[hd] = sparse_attention(in, s);
          }
          sparsity_.add(static_cast<double>(s.size()) / static_cast<double>(seq));
        }
        if (opt_.record_token_sets) {
          trace.sets[l][g] = sets_[g];
          trace.effective_roles[l][g] = retrieval ? HeadRole::Retrieval : HeadRole::Sparse;
        }
      }
      attn_project_residual(model_, l, head_out, x);
      ffn_residual(model_, l, x);
    }
    cache_.commit_row();
    tokens_.push_back(token);
    ++decoded_steps_;
    ++since_correction_;
    if (opt_.record_token_sets) last_trace_ = std::move(trace);
    last_logits_ = output_logits(model_, x);
    return last_logits_;
  }

  // Dense-attention prefill over the last W decoded tokens, rewriting their
  // KV rows in every layer. No-op (returns false) until a full window of
  // tokens has been decoded since the previous correction.
  bool cache_correction() {
    if (!prefilled_) throw std::logic_error("cache_correction: prefill required first");
    const std::size_t w = opt_.correction_window;
    if (since_correction_ < w) return false;
    const ModelConfig& cfg = model_.config;
    const std::size_t len = cache_.length();
    const std::size_t start = len - w;
    const double scale = attn_scale();

    std::vector<std::vector<double>> xs(w);
    for (std::size_t i = 0; i < w; ++i)
      xs[i] = embed(model_, tokens_[start + i], start + i);

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      for (std::size_t i = 0; i < w; ++i) {
        const std::size_t p = start + i;
        QkvOut qkv = compute_qkv(model_, l, xs[i], p);
        for (std::size_t g = 0; g < cfg.n_kv_heads; ++g)
          cache_.overwrite(l, g, p, qkv.k_heads[g], qkv.v_heads[g]);
        std::vector<std::vector<double>> head_out(cfg.n_q_heads);
        for (std::size_t hd = 0; hd < cfg.n_q_heads; ++hd) {
          const std::size_t g = hd / cfg.group_size();
          AttnInput<double> in{qkv.q_heads[hd], cache_.key_view(l, g, p + 1),
                               cache_.value_view(l, g, p + 1), scale};
          head_out[hd] = dense_attention(in).out;
        }
        if (opt_.refresh_sets_on_correction && i + 1 == w) {
          const auto pooled = gqa_pool_queries(qkv.q_heads, cfg.group_size());
          for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) {
            AttnInput<double> sel{pooled[g], cache_.key_view(l, g, len),
                                  cache_.value_view(l, g, len), scale};
            sets_[g] = select_tokens(opt_.policy, dense_attention(sel).weights, len);
          }
        }
        attn_project_residual(model_, l, head_out, xs[i]);
        ffn_residual(model_, l, xs[i]);
      }
    }
    since_correction_ = 0;
    return true;
  }

  // Fraction of context excluded by sparse heads: 1 minus the mean kept
  // fraction |S|/seq_len over all sparse-head invocations so far.
  double measure_sparsity() const {
    if (decoded_steps_ == 0) throw std::logic_error("measure_sparsity: no decode steps taken");
    if (sparsity_.count == 0) return 0.0;
    return 1.0 - sparsity_.mean();
  }

  std::size_t seq_len() const { return cache_.length(); }
  std::size_t decoded_steps() const { return decoded_steps_; }
  const KvCache& cache() const { return cache_; }
  const std::vector<TokenSet>& token_sets() const { return sets_; }
  const std::vector<double>& last_logits() const { return last_logits_; }
  const StepTrace& last_trace() const { return last_trace_; }
  const std::vector<std::int32_t>& tokens() const { return tokens_; }
  std::size_t sparse_invocations() const { return sparsity_.count; }

 private:
  double attn_scale() const {
    return 1.0 / std::sqrt(static_cast<double>(model_.config.d_head));
  }

  struct SparsityMeter {
    std::size_t count = 0;
    double sum = 0.0;
    double first = 0.0;
    bool uniform = true;

    void add(double r) {
      if (count == 0)
        first = r;
      else if (r != first)
        uniform = false;
      sum += r;
      ++count;
    }
    // A run whose invocations all saw the same kept fraction reports it
    // exactly; otherwise the arithmetic mean.
    double mean() const { return uniform ? first : sum / static_cast<double>(count); }
  };

  ToyModel model_;
  RoleMap roles_;
  EngineOptions opt_;
  KvCache cache_;
  std::vector<TokenSet> sets_;
  std::vector<std::int32_t> tokens_;
  std::vector<double> last_logits_;
  StepTrace last_trace_;
  SparsityMeter sparsity_;
  std::size_t decoded_steps_ = 0;
  std::size_t since_correction_ = 0;
  bool prefilled_ = false;
};

// Deterministic greedy pick: highest logit, ties to the lowest token id.
inline std::int32_t argmax_token(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<std::int32_t>(best);
}

}  // namespace hh
