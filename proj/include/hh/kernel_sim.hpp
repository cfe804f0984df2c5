#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <thread>
#include <vector>

#include "hh/attention.hpp"
#include "hh/mat.hpp"

namespace hh::kernel {

// Per (batch item, KV head) list of KV-cache block ids, strictly ascending.
// Retrieval heads list every block, sparse heads a subset.
struct BlockIndexSet {
  std::size_t batch = 0;
  std::size_t n_kv_heads = 0;
  std::vector<std::vector<std::uint32_t>> ids;  // [b * n_kv_heads + g]

  std::size_t slot(std::size_t b, std::size_t g) const { return b * n_kv_heads + g; }

  void validate(std::size_t n_blocks_total) const {
    if (ids.size() != batch * n_kv_heads)
      throw std::invalid_argument("BlockIndexSet: slot count mismatch");
    for (const auto& list : ids) {
      std::uint32_t prev = 0;
      bool first = true;
      for (std::uint32_t id : list) {
        if (id >= n_blocks_total) throw std::invalid_argument("BlockIndexSet: block id out of range");
        if (!first && id <= prev)
          throw std::invalid_argument("BlockIndexSet: block ids must be strictly ascending");
        prev = id;
        first = false;
      }
    }
  }
};

// One contiguous slice of one head's block list, executed inside one split.
struct WorkUnit {
  std::size_t kv_head = 0;
  std::size_t begin = 0;  // index range into the head's block-id list
  std::size_t end = 0;
  std::size_t head_local_split = 0;
};

// Pooled work plan: per batch item, the concatenated block workload of all
// heads divided into num_splits contiguous, near-equal chunks.
struct SplitSchedule {
  std::size_t batch = 0;
  std::size_t num_splits = 0;
  std::vector<std::vector<std::vector<WorkUnit>>> units;  // [b][split]
  std::vector<std::vector<std::size_t>> split_blocks;     // [b][split]
  std::vector<std::vector<std::size_t>> head_blocks;      // [b][kv head]
  std::vector<std::vector<std::size_t>> head_split_count; // [b][kv head]
};

inline SplitSchedule plan_splits(const BlockIndexSet& blocks, std::size_t num_splits) {
  if (num_splits < 1) throw std::invalid_argument("plan_splits: num_splits must be >= 1");
  SplitSchedule sched;
  sched.batch = blocks.batch;
  sched.num_splits = num_splits;
  sched.units.resize(blocks.batch);
  sched.split_blocks.resize(blocks.batch);
  sched.head_blocks.resize(blocks.batch);
  sched.head_split_count.resize(blocks.batch);
  for (std::size_t b = 0; b < blocks.batch; ++b) {
    std::size_t total = 0;
    sched.head_blocks[b].resize(blocks.n_kv_heads);
    for (std::size_t g = 0; g < blocks.n_kv_heads; ++g) {
      sched.head_blocks[b][g] = blocks.ids[blocks.slot(b, g)].size();
      total += sched.head_blocks[b][g];
    }
    if (total == 0) throw std::invalid_argument("plan_splits: batch item has zero blocks");

    const std::size_t base = total / num_splits;
    const std::size_t rem = total % num_splits;
    sched.units[b].resize(num_splits);
    sched.split_blocks[b].assign(num_splits, 0);
    sched.head_split_count[b].assign(blocks.n_kv_heads, 0);

    std::size_t head = 0, offset = 0;  // cursor into the pooled list
    for (std::size_t s = 0; s < num_splits; ++s) {
      std::size_t want = base + (s < rem ? 1 : 0);
      sched.split_blocks[b][s] = want;
      while (want > 0) {
        while (sched.head_blocks[b][head] == offset) {
          ++head;
          offset = 0;
        }
        const std::size_t avail = sched.head_blocks[b][head] - offset;
        const std::size_t take = std::min(avail, want);
        WorkUnit u;
        u.kv_head = head;
        u.begin = offset;
        u.end = offset + take;
        u.head_local_split = sched.head_split_count[b][head]++;
        sched.units[b][s].push_back(u);
        offset += take;
        want -= take;
      }
    }
  }
  return sched;
}

// Normalized partial output plus its log-sum-exp, one per
// (batch, query head, head-local split).
template <typename T>
struct Partial {
  std::vector<T> o;
  T lse = T(0);
};

template <typename T>
struct Workload {
  std::size_t batch = 0;
  std::size_t n_kv_heads = 0;
  std::size_t group_size = 1;
  std::size_t d_head = 0;
  std::size_t seq_len = 0;
  std::size_t block_size = 64;
  T scale = T(1);
  std::vector<Matrix<T>> keys, values;     // [b * n_kv_heads + g], seq x d
  std::vector<std::vector<T>> queries;     // [b * n_q_heads + h], d
  BlockIndexSet blocks;

  std::size_t n_q_heads() const { return n_kv_heads * group_size; }
  std::size_t n_blocks() const { return (seq_len + block_size - 1) / block_size; }

  void validate() const {
    if (batch < 1 || n_kv_heads < 1 || group_size < 1 || d_head < 1 || seq_len < 1 ||
        block_size < 1)
      throw std::invalid_argument("Workload: all dimensions must be >= 1");
    if (keys.size() != batch * n_kv_heads || values.size() != keys.size())
      throw std::invalid_argument("Workload: KV slot count mismatch");
    if (queries.size() != batch * n_q_heads())
      throw std::invalid_argument("Workload: query slot count mismatch");
    blocks.validate(n_blocks());
  }
};

// [b][q_head] -> partials ordered by head-local split id
template <typename T>
using PartialGrid = std::vector<std::vector<std::vector<Partial<T>>>>;

template <typename T>
PartialGrid<T> make_partial_grid(const Workload<T>& w, const SplitSchedule& sched) {
  PartialGrid<T> grid(w.batch);
  for (std::size_t b = 0; b < w.batch; ++b) {
    grid[b].resize(w.n_q_heads());
    for (std::size_t g = 0; g < w.n_kv_heads; ++g)
      for (std::size_t j = 0; j < w.group_size; ++j)
        grid[b][g * w.group_size + j].resize(sched.head_split_count[b][g]);
  }
  return grid;
}

// Execute one (batch, split) cell: stream the split's blocks through an
// online-softmax accumulator per query head and store normalized partial
// output plus log-sum-exp. The trailing ragged block is padded implicitly
// by only scoring valid rows. exec_counter, when given, counts every
// (batch, head, block-list index) execution for conservation checks.
template <typename T>
void run_split(const Workload<T>& w, const SplitSchedule& sched, std::size_t b, std::size_t s,
               PartialGrid<T>& out, std::vector<std::atomic<std::uint32_t>>* exec_counter = nullptr) {
  for (const WorkUnit& unit : sched.units[b][s]) {
    const std::size_t g = unit.kv_head;
    const auto& block_ids = w.blocks.ids[w.blocks.slot(b, g)];
    const Matrix<T>& keys = w.keys[b * w.n_kv_heads + g];
    const Matrix<T>& values = w.values[b * w.n_kv_heads + g];
    for (std::size_t j = 0; j < w.group_size; ++j) {
      const std::size_t q_head = g * w.group_size + j;
      const std::vector<T>& q = w.queries[b * w.n_q_heads() + q_head];
      SoftmaxAccumulator<T> acc(w.d_head);
      std::vector<T> scores(w.block_size);
      for (std::size_t bi = unit.begin; bi < unit.end; ++bi) {
        const std::size_t id = block_ids[bi];
        const std::size_t lo = id * w.block_size;
        const std::size_t hi = std::min(w.seq_len, lo + w.block_size);
        if (lo >= w.seq_len) throw std::invalid_argument("run_split: block beyond sequence");
        const std::size_t rows = hi - lo;
        for (std::size_t t = 0; t < rows; ++t)
          scores[t] = dot(q.data(), keys.row(lo + t), w.d_head) * w.scale;
        online_update<T>(acc, std::span<const T>(scores.data(), rows),
                         MatView<T>(values.row(lo), rows, w.d_head));
        if (exec_counter && j == 0)
          (*exec_counter)[(b * w.n_kv_heads + g) * w.n_blocks() + bi].fetch_add(1);
      }
      Partial<T> p;
      p.o = finalize(acc);
      p.lse = std::log(acc.l_partial) + acc.m_partial;
      out[b][q_head][unit.head_local_split] = std::move(p);
    }
  }
}

// Max-shifted log-sum-exp merge of the per-split partials. Deterministic:
// fixed reduction order regardless of how the splits were executed.
template <typename T>
std::vector<std::vector<T>> combine(const Workload<T>& w, const PartialGrid<T>& grid) {
  std::vector<std::vector<T>> out(w.batch * w.n_q_heads());
  for (std::size_t b = 0; b < w.batch; ++b)
    for (std::size_t h = 0; h < w.n_q_heads(); ++h) {
      const auto& parts = grid[b][h];
      if (parts.empty()) throw std::invalid_argument("combine: head has no partials");
      T m = -std::numeric_limits<T>::infinity();
      for (const auto& p : parts) m = std::max(m, p.lse);
      T den = T(0);
      std::vector<T> acc(w.d_head, T(0));
      for (const auto& p : parts) {
        const T e = std::exp(p.lse - m);
        den += e;
        for (std::size_t j = 0; j < w.d_head; ++j) acc[j] += e * p.o[j];
      }
      for (std::size_t j = 0; j < w.d_head; ++j) acc[j] /= den;
      out[b * w.n_q_heads() + h] = std::move(acc);
    }
  return out;
}

template <typename T>
struct RunResult {
  std::vector<std::vector<T>> outputs;  // [b * n_q_heads + h]
  SplitSchedule schedule;
  std::vector<std::uint32_t> block_exec_counts;
};

// Plan, execute every (batch, split) cell on n_workers threads, combine.
// Splits are independent; identical inputs give identical outputs for any
// worker count.
template <typename T>
RunResult<T> run(const Workload<T>& w, std::size_t num_splits, std::size_t n_workers = 1) {
  w.validate();
  RunResult<T> res;
  res.schedule = plan_splits(w.blocks, num_splits);
  PartialGrid<T> grid = make_partial_grid(w, res.schedule);

  const std::size_t counter_size = w.n_blocks();
  std::vector<std::atomic<std::uint32_t>> counters(w.batch * w.n_kv_heads * counter_size);
  for (auto& c : counters) c.store(0);

  struct Cell {
    std::size_t b, s;
  };
  std::vector<Cell> cells;
  for (std::size_t b = 0; b < w.batch; ++b)
    for (std::size_t s = 0; s < num_splits; ++s) cells.push_back({b, s});

  auto worker = [&](std::size_t wid) {
    for (std::size_t i = wid; i < cells.size(); i += n_workers)
      run_split(w, res.schedule, cells[i].b, cells[i].s, grid, &counters);
  };
  if (n_workers <= 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(worker, t);
    for (auto& t : pool) t.join();
  }

  // Flatten counters in (b, g, index) order for the conservation check.
  res.block_exec_counts.reserve(counters.size());
  for (std::size_t b = 0; b < w.batch; ++b)
    for (std::size_t g = 0; g < w.n_kv_heads; ++g) {
      const std::size_t n = w.blocks.ids[w.blocks.slot(b, g)].size();
      for (std::size_t i = 0; i < n; ++i)
        res.block_exec_counts.push_back(
            counters[(b * w.n_kv_heads + g) * counter_size + i].load());
    }

  res.outputs = combine(w, grid);
  return res;
}

// I/O-bound cost model: a split's cost is its block count times the bytes
// one block moves. The naive baseline dedicates one worker to each head, so
// its critical path is the largest per-head block count.
struct CostReport {
  std::size_t total_blocks = 0;
  std::size_t pooled_critical_blocks = 0;   // max blocks over (batch, split)
  std::size_t naive_critical_blocks = 0;    // max blocks over (batch, head)
  double mean_split_blocks = 0.0;
  double balance_ratio = 0.0;               // pooled critical / mean split load
  std::size_t bytes_per_block = 0;
  std::size_t pooled_critical_bytes = 0;
  std::size_t naive_critical_bytes = 0;
};

inline CostReport latency_model(const SplitSchedule& sched, std::size_t bytes_per_block) {
  CostReport r;
  r.bytes_per_block = bytes_per_block;
  std::size_t splits_counted = 0;
  for (std::size_t b = 0; b < sched.batch; ++b) {
    for (std::size_t s = 0; s < sched.num_splits; ++s) {
      const std::size_t blk = sched.split_blocks[b][s];
      r.total_blocks += blk;
      r.pooled_critical_blocks = std::max(r.pooled_critical_blocks, blk);
      ++splits_counted;
    }
    for (std::size_t g = 0; g < sched.head_blocks[b].size(); ++g)
      r.naive_critical_blocks = std::max(r.naive_critical_blocks, sched.head_blocks[b][g]);
  }
  r.mean_split_blocks = static_cast<double>(r.total_blocks) / static_cast<double>(splits_counted);
  r.balance_ratio = r.mean_split_blocks > 0.0
                        ? static_cast<double>(r.pooled_critical_blocks) / r.mean_split_blocks
                        : 0.0;
  r.pooled_critical_bytes = r.pooled_critical_blocks * bytes_per_block;
  r.naive_critical_bytes = r.naive_critical_blocks * bytes_per_block;
  return r;
}

}  // namespace hh::kernel
