#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "hh/attention.hpp"
#include "hh/mat.hpp"
#include "hh/toy_model.hpp"

namespace hh {

// Overlap of the top-k critical-token sets between same-index heads of
// adjacent layers, measured at the final prompt position. Values lie in
// [0,1]; row l holds the overlap between layer l and layer l+1.
struct OverlapGrid {
  std::size_t n_layers = 0;
  std::size_t n_kv_heads = 0;
  std::size_t k = 0;
  Matrix<double> values;  // (n_layers-1) x n_kv_heads
};

inline OverlapGrid overlap_grid(const ToyModel& model, std::span<const std::int32_t> prompt,
                                std::size_t k) {
  if (k < 1) throw std::invalid_argument("overlap_grid: k must be >= 1");
  if (model.config.n_layers < 2)
    throw std::invalid_argument("overlap_grid: need at least two layers");
  ForwardCapture cap;
  cap.want_last_maps = true;
  forward_full(model, prompt, &cap);

  const std::size_t layers = model.config.n_layers;
  const std::size_t heads = model.config.n_kv_heads;
  std::vector<std::vector<TokenSet>> sets(layers, std::vector<TokenSet>(heads));
  for (std::size_t l = 0; l < layers; ++l)
    for (std::size_t g = 0; g < heads; ++g)
      sets[l][g] = args_top_k<double>(cap.last_pooled_weights[l][g], k);

  OverlapGrid grid;
  grid.n_layers = layers;
  grid.n_kv_heads = heads;
  grid.k = k;
  grid.values = Matrix<double>(layers - 1, heads);
  for (std::size_t l = 0; l + 1 < layers; ++l)
    for (std::size_t g = 0; g < heads; ++g) {
      const auto& a = sets[l][g].indices;
      const auto& b = sets[l + 1][g].indices;
      std::vector<std::size_t> common;
      std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
      grid.values.at(l, g) = static_cast<double>(common.size()) / static_cast<double>(k);
    }
  return grid;
}

}  // namespace hh
