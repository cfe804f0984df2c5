#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "hh/mat.hpp"

namespace hh {

// Ordered, duplicate-free set of token positions, ascending.
struct TokenSet {
  std::vector<std::size_t> indices;

  std::size_t size() const { return indices.size(); }
  bool empty() const { return indices.empty(); }

  void validate(std::size_t seq_len) const {
    std::size_t prev = 0;
    bool first = true;
    for (std::size_t i : indices) {
      if (i >= seq_len) throw std::invalid_argument("TokenSet: index out of range");
      if (!first && i <= prev) throw std::invalid_argument("TokenSet: indices must be strictly ascending");
      prev = i;
      first = false;
    }
  }
};

template <typename T>
struct AttnInput {
  std::span<const T> q;  // single decode query, d_head
  MatView<T> keys;       // seq_len x d_head
  MatView<T> values;     // seq_len x d_head
  T scale;               // 1/sqrt(d_k)
};

template <typename T>
struct AttnResult {
  std::vector<T> out;      // d_head
  std::vector<T> weights;  // seq_len, sums to 1
};

// Softmax(q K^T * scale) V with a two-pass max-shifted softmax.
template <typename T>
AttnResult<T> dense_attention(const AttnInput<T>& in) {
  const std::size_t n = in.keys.rows, d = in.keys.cols;
  if (n == 0) throw std::invalid_argument("dense_attention: empty context");
  if (in.values.rows != n || in.values.cols != d || in.q.size() != d)
    throw std::invalid_argument("dense_attention: shape mismatch");

  std::vector<T> w(n);
  T m = -std::numeric_limits<T>::infinity();
  for (std::size_t t = 0; t < n; ++t) {
    w[t] = dot(in.q.data(), in.keys.row(t), d) * in.scale;
    m = std::max(m, w[t]);
  }
  T l = T(0);
  for (std::size_t t = 0; t < n; ++t) {
    w[t] = std::exp(w[t] - m);
    l += w[t];
  }
  std::vector<T> out(d, T(0));
  for (std::size_t t = 0; t < n; ++t) {
    w[t] /= l;
    const T* v = in.values.row(t);
    for (std::size_t j = 0; j < d; ++j) out[j] += w[t] * v[j];
  }
  return {std::move(out), std::move(w)};
}

// Attention restricted to the token subset s; equals dense attention over
// the gathered sub-matrices K[s], V[s].
template <typename T>
std::vector<T> sparse_attention(const AttnInput<T>& in, const TokenSet& s) {
  if (s.empty()) throw std::invalid_argument("sparse_attention: empty token set");
  s.validate(in.keys.rows);
  const std::size_t d = in.keys.cols;
  const std::size_t k = s.size();

  std::vector<T> w(k);
  T m = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < k; ++i) {
    w[i] = dot(in.q.data(), in.keys.row(s.indices[i]), d) * in.scale;
    m = std::max(m, w[i]);
  }
  T l = T(0);
  for (std::size_t i = 0; i < k; ++i) {
    w[i] = std::exp(w[i] - m);
    l += w[i];
  }
  std::vector<T> out(d, T(0));
  for (std::size_t i = 0; i < k; ++i) {
    w[i] /= l;
    const T* v = in.values.row(s.indices[i]);
    for (std::size_t j = 0; j < d; ++j) out[j] += w[i] * v[j];
  }
  return out;
}

// Indices of the min(k, n) largest weights, ties broken by lower index,
// returned ascending.
template <typename T>
TokenSet args_top_k(std::span<const T> weights, std::size_t k) {
  if (k < 1) throw std::invalid_argument("args_top_k: k must be >= 1");
  const std::size_t n = weights.size();
  const std::size_t take = std::min(k, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + take, order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (weights[a] != weights[b]) return weights[a] > weights[b];
                      return a < b;
                    });
  order.resize(take);
  std::sort(order.begin(), order.end());
  return TokenSet{std::move(order)};
}

// Average-pool groups of query heads down to one query per KV head. Used
// only for token selection, never for output computation.
template <typename T>
std::vector<std::vector<T>> gqa_pool_queries(
    const std::vector<std::vector<T>>& q_heads, std::size_t group_size) {
  if (group_size == 0 || q_heads.size() % group_size != 0)
    throw std::invalid_argument("gqa_pool_queries: head count not divisible by group size");
  const std::size_t groups = q_heads.size() / group_size;
  std::vector<std::vector<T>> pooled(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t d = q_heads[g * group_size].size();
    std::vector<T> acc(d, T(0));
    for (std::size_t j = 0; j < group_size; ++j) {
      const auto& q = q_heads[g * group_size + j];
      if (q.size() != d) throw std::invalid_argument("gqa_pool_queries: ragged head dims");
      for (std::size_t c = 0; c < d; ++c) acc[c] += q[c];
    }
    for (std::size_t c = 0; c < d; ++c) acc[c] /= static_cast<T>(group_size);
    pooled[g] = std::move(acc);
  }
  return pooled;
}

// Streaming softmax state: running max, running normalizer, unnormalized
// value accumulator. Blocks may arrive in any order.
template <typename T>
struct SoftmaxAccumulator {
  std::vector<T> o_partial;
  T m_partial = -std::numeric_limits<T>::infinity();
  T l_partial = T(0);

  explicit SoftmaxAccumulator(std::size_t d) : o_partial(d, T(0)) {}

  bool touched() const { return l_partial > T(0); }
};

template <typename T>
void online_update(SoftmaxAccumulator<T>& acc, std::span<const T> scores_block,
                   MatView<T> v_block) {
  if (scores_block.size() != v_block.rows)
    throw std::invalid_argument("online_update: score/value row mismatch");
  if (scores_block.empty()) return;
  T block_max = -std::numeric_limits<T>::infinity();
  for (T s : scores_block) block_max = std::max(block_max, s);
  const T m_new = std::max(acc.m_partial, block_max);
  const T rescale = std::isinf(acc.m_partial) ? T(0) : std::exp(acc.m_partial - m_new);
  acc.l_partial *= rescale;
  for (T& o : acc.o_partial) o *= rescale;
  const std::size_t d = v_block.cols;
  for (std::size_t t = 0; t < scores_block.size(); ++t) {
    const T e = std::exp(scores_block[t] - m_new);
    acc.l_partial += e;
    const T* v = v_block.row(t);
    for (std::size_t j = 0; j < d; ++j) acc.o_partial[j] += e * v[j];
  }
  acc.m_partial = m_new;
}

template <typename T>
std::vector<T> finalize(const SoftmaxAccumulator<T>& acc) {
  if (!acc.touched()) throw std::invalid_argument("finalize: accumulator never updated");
  std::vector<T> out(acc.o_partial.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = acc.o_partial[j] / acc.l_partial;
  return out;
}

}  // namespace hh
