#pragma once

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hh/hardkuma.hpp"
#include "hh/io.hpp"

namespace hh {

enum class HeadRole : std::uint8_t { Retrieval, Sparse };

// Learned per-(layer, KV head) role assignment. Layer 0 is always Retrieval;
// the role flag must agree with the stored gate expectation (> 0.5 means
// Retrieval), both checked on load.
struct RoleMap {
  std::size_t n_layers = 0;
  std::size_t n_kv_heads = 0;
  std::uint64_t model_checksum = 0;
  std::vector<HeadRole> roles;                    // [layer * n_kv_heads + head]
  std::vector<double> expectations;               // E[z] per entry
  std::vector<hardkuma::GateParams> gate_params;  // snapshot per entry

  std::size_t index(std::size_t layer, std::size_t head) const {
    return layer * n_kv_heads + head;
  }
  HeadRole role(std::size_t layer, std::size_t head) const {
    return roles[index(layer, head)];
  }
  double expectation(std::size_t layer, std::size_t head) const {
    return expectations[index(layer, head)];
  }

  std::size_t retrieval_count_above_layer0() const {
    std::size_t n = 0;
    for (std::size_t l = 1; l < n_layers; ++l)
      for (std::size_t h = 0; h < n_kv_heads; ++h)
        n += role(l, h) == HeadRole::Retrieval;
    return n;
  }

  void validate() const {
    const std::size_t total = n_layers * n_kv_heads;
    if (n_layers < 1 || n_kv_heads < 1)
      throw std::invalid_argument("RoleMap: empty shape");
    if (roles.size() != total || expectations.size() != total || gate_params.size() != total)
      throw std::invalid_argument("RoleMap: entry count does not match shape");
    for (std::size_t h = 0; h < n_kv_heads; ++h)
      if (role(0, h) != HeadRole::Retrieval)
        throw std::invalid_argument("RoleMap: layer 0 heads must all be Retrieval");
    for (std::size_t i = 0; i < total; ++i) {
      if ((expectations[i] > 0.5) != (roles[i] == HeadRole::Retrieval))
        throw std::invalid_argument("RoleMap: role flag disagrees with expectation");
      if (!(expectations[i] >= 0.0 && expectations[i] <= 1.0))
        throw std::invalid_argument("RoleMap: expectation out of [0,1]");
    }
  }

  static RoleMap all_retrieval(std::size_t n_layers, std::size_t n_kv_heads,
                               std::uint64_t model_checksum) {
    RoleMap rm;
    rm.n_layers = n_layers;
    rm.n_kv_heads = n_kv_heads;
    rm.model_checksum = model_checksum;
    const std::size_t total = n_layers * n_kv_heads;
    rm.roles.assign(total, HeadRole::Retrieval);
    rm.expectations.assign(total, 1.0);
    rm.gate_params.assign(total, hardkuma::GateParams::from_alpha_beta(1.0, 1.0));
    return rm;
  }

  // All-sparse above layer 0; handy for kernel benchmarks and tests.
  static RoleMap all_sparse(std::size_t n_layers, std::size_t n_kv_heads,
                            std::uint64_t model_checksum) {
    RoleMap rm = all_retrieval(n_layers, n_kv_heads, model_checksum);
    for (std::size_t l = 1; l < n_layers; ++l)
      for (std::size_t h = 0; h < n_kv_heads; ++h) {
        rm.roles[rm.index(l, h)] = HeadRole::Sparse;
        rm.expectations[rm.index(l, h)] = 0.0;
      }
    return rm;
  }

  std::string to_text() const {
    validate();
    std::string out;
    out += "# hybrid-head role map\n";
    out += "version 1\n";
    char line[256];
    std::snprintf(line, sizeof line, "model_checksum %016" PRIx64 "\n", model_checksum);
    out += line;
    out += "n_layers " + std::to_string(n_layers) + "\n";
    out += "n_kv_heads " + std::to_string(n_kv_heads) + "\n";
    out += "# head <layer> <kv_head> <role R|S> <expectation> <alpha> <beta> <stretch_lo> <stretch_hi>\n";
    for (std::size_t l = 0; l < n_layers; ++l)
      for (std::size_t h = 0; h < n_kv_heads; ++h) {
        const std::size_t i = index(l, h);
        const auto& g = gate_params[i];
        std::snprintf(line, sizeof line, "head %zu %zu %c %.17g %.17g %.17g %.17g %.17g\n", l, h,
                      roles[i] == HeadRole::Retrieval ? 'R' : 'S', expectations[i], g.alpha(),
                      g.beta(), g.stretch_lo, g.stretch_hi);
        out += line;
      }
    return out;
  }

  static RoleMap from_text(const std::string& text) {
    RoleMap rm;
    std::istringstream in(text);
    std::string line;
    bool have_version = false, have_checksum = false, have_layers = false, have_heads = false;
    std::size_t entries = 0;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      std::string key;
      ls >> key;
      if (key == "version") {
        int v = 0;
        ls >> v;
        if (v != 1) throw std::runtime_error("RoleMap: unsupported version");
        have_version = true;
      } else if (key == "model_checksum") {
        std::string hex;
        ls >> hex;
        rm.model_checksum = std::stoull(hex, nullptr, 16);
        have_checksum = true;
      } else if (key == "n_layers") {
        ls >> rm.n_layers;
        have_layers = true;
      } else if (key == "n_kv_heads") {
        ls >> rm.n_kv_heads;
        have_heads = true;
      } else if (key == "head") {
        if (!have_layers || !have_heads)
          throw std::runtime_error("RoleMap: head entry before shape declaration");
        if (entries == 0) {
          const std::size_t total = rm.n_layers * rm.n_kv_heads;
          rm.roles.assign(total, HeadRole::Sparse);
          rm.expectations.assign(total, 0.0);
          rm.gate_params.assign(total, hardkuma::GateParams{});
        }
        std::size_t l, h;
        char role;
        double e, a, b, lo, hi;
        if (!(ls >> l >> h >> role >> e >> a >> b >> lo >> hi))
          throw std::runtime_error("RoleMap: malformed head entry: " + line);
        if (l >= rm.n_layers || h >= rm.n_kv_heads)
          throw std::runtime_error("RoleMap: head entry out of declared shape");
        const std::size_t i = rm.index(l, h);
        rm.roles[i] = role == 'R' ? HeadRole::Retrieval : HeadRole::Sparse;
        rm.expectations[i] = e;
        rm.gate_params[i] = hardkuma::GateParams::from_alpha_beta(a, b, lo, hi);
        ++entries;
      } else {
        throw std::runtime_error("RoleMap: unknown key: " + key);
      }
    }
    if (!have_version || !have_checksum)
      throw std::runtime_error("RoleMap: missing version or model_checksum");
    if (entries != rm.n_layers * rm.n_kv_heads)
      throw std::runtime_error("RoleMap: expected " + std::to_string(rm.n_layers * rm.n_kv_heads) +
                               " head entries, got " + std::to_string(entries));
    rm.validate();
    return rm;
  }

  void save(const std::string& path) const { atomic_write_file(path, to_text()); }

  // Load and, when the caller knows the model it will drive, hard-fail on a
  // checksum mismatch.
  static RoleMap load(const std::string& path,
                      std::optional<std::uint64_t> expected_model_checksum = std::nullopt) {
    RoleMap rm = from_text(read_file(path));
    if (expected_model_checksum && *expected_model_checksum != rm.model_checksum)
      throw std::runtime_error("RoleMap: model checksum mismatch for " + path);
    return rm;
  }
};

}  // namespace hh
