#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hh/attention.hpp"

namespace hh {

// Token-selection policy for retrieval heads. Four families: a fixed budget
// (top-k), a cumulative-mass cutoff (top-p), an absolute score cutoff
// (threshold), and a budget proportional to the sequence length (ratio),
// which grows as decoding proceeds.
struct SparsityPolicy {
  enum class Kind { TopK, TopP, Threshold, Ratio };

  Kind kind = Kind::TopK;
  std::size_t k = 1;     // TopK
  double value = 0.0;    // TopP: p, Threshold: tau, Ratio: theta

  static SparsityPolicy top_k(std::size_t k) {
    if (k < 1) throw std::invalid_argument("top_k: k must be >= 1");
    return {Kind::TopK, k, 0.0};
  }
  static SparsityPolicy top_p(double p) {
    if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("top_p: p must lie in (0,1]");
    return {Kind::TopP, 0, p};
  }
  static SparsityPolicy threshold(double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("threshold: tau must be positive");
    return {Kind::Threshold, 0, tau};
  }
  static SparsityPolicy ratio(double theta) {
    if (!(theta > 0.0 && theta < 1.0)) throw std::invalid_argument("ratio: theta must lie in (0,1)");
    return {Kind::Ratio, 0, theta};
  }

  std::string describe() const {
    switch (kind) {
      case Kind::TopK: return "topk k=" + std::to_string(k);
      case Kind::TopP: return "topp p=" + std::to_string(value);
      case Kind::Threshold: return "threshold tau=" + std::to_string(value);
      case Kind::Ratio: return "ratio theta=" + std::to_string(value);
    }
    return "?";
  }
};

// ceil(frac * n) guarded against float noise on exactly-integral products,
// clamped into [1, n].
inline std::size_t fraction_budget(double frac, std::size_t n) {
  const double raw = frac * static_cast<double>(n);
  auto b = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  b = std::max<std::size_t>(b, 1);
  return std::min(b, n);
}

inline TokenSet select_tokens(const SparsityPolicy& policy, std::span<const double> weights,
                              std::size_t seq_len) {
  if (weights.size() != seq_len || seq_len == 0)
    throw std::invalid_argument("select_tokens: weight/seq length mismatch");
  switch (policy.kind) {
    case SparsityPolicy::Kind::TopK:
      return args_top_k(weights, policy.k);
    case SparsityPolicy::Kind::Ratio:
      return args_top_k(weights, fraction_budget(1.0 - policy.value, seq_len));
    case SparsityPolicy::Kind::TopP: {
      std::vector<std::size_t> order(seq_len);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return weights[a] > weights[b]; });
      double cum = 0.0;
      std::size_t take = 0;
      while (take < seq_len) {
        cum += weights[order[take]];
        ++take;
        if (cum >= policy.value) break;
      }
      order.resize(take);
      std::sort(order.begin(), order.end());
      return TokenSet{std::move(order)};
    }
    case SparsityPolicy::Kind::Threshold: {
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < seq_len; ++i)
        if (weights[i] > policy.value) keep.push_back(i);
      if (keep.empty()) {
        // Nothing cleared the bar; fall back to the single argmax.
        std::size_t best = 0;
        for (std::size_t i = 1; i < seq_len; ++i)
          if (weights[i] > weights[best]) best = i;
        keep.push_back(best);
      }
      return TokenSet{std::move(keep)};
    }
  }
  throw std::logic_error("select_tokens: unreachable");
}

}  // namespace hh
