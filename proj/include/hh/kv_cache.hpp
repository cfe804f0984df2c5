#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "hh/mat.hpp"

namespace hh {

// Per-layer, per-KV-head key/value history. All heads share one length;
// rows are append-only except under cache correction, which rewrites
// exactly the trailing window.
class KvCache {
 public:
  KvCache() = default;
  KvCache(std::size_t n_layers, std::size_t n_kv_heads, std::size_t d_head)
      : n_layers_(n_layers), n_kv_heads_(n_kv_heads), d_head_(d_head),
        keys_(n_layers * n_kv_heads), values_(n_layers * n_kv_heads) {}

  std::size_t length() const { return length_; }

  void append(std::size_t layer, std::size_t head, std::span<const double> k,
              std::span<const double> v) {
    auto& ks = keys_[slot(layer, head)];
    auto& vs = values_[slot(layer, head)];
    ks.insert(ks.end(), k.begin(), k.end());
    vs.insert(vs.end(), v.begin(), v.end());
  }

  // Called once per decoded position after every layer appended its row.
  void commit_row() { ++length_; }

  void overwrite(std::size_t layer, std::size_t head, std::size_t pos,
                 std::span<const double> k, std::span<const double> v) {
    double* kr = keys_[slot(layer, head)].data() + pos * d_head_;
    double* vr = values_[slot(layer, head)].data() + pos * d_head_;
    for (std::size_t j = 0; j < d_head_; ++j) {
      kr[j] = k[j];
      vr[j] = v[j];
    }
  }

  // Seed the cache with externally computed rows (e.g. a shared prompt
  // cache from a dense teacher). Matrices are indexed [layer*n_kv_heads+g].
  void adopt_rows(const std::vector<Matrix<double>>& keys,
                  const std::vector<Matrix<double>>& values, std::size_t rows) {
    for (std::size_t s = 0; s < keys_.size(); ++s) {
      keys_[s].assign(keys[s].data.begin(), keys[s].data.begin() + rows * d_head_);
      values_[s].assign(values[s].data.begin(), values[s].data.begin() + rows * d_head_);
    }
    length_ = rows;
  }

  MatView<double> key_view(std::size_t layer, std::size_t head, std::size_t rows) const {
    return {keys_[slot(layer, head)].data(), rows, d_head_};
  }
  MatView<double> value_view(std::size_t layer, std::size_t head, std::size_t rows) const {
    return {values_[slot(layer, head)].data(), rows, d_head_};
  }

 private:
  std::size_t slot(std::size_t layer, std::size_t head) const {
    return layer * n_kv_heads_ + head;
  }

  std::size_t n_layers_ = 0, n_kv_heads_ = 0, d_head_ = 0, length_ = 0;
  std::vector<std::vector<double>> keys_, values_;
};

}  // namespace hh
