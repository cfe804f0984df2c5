// End-to-end checks of the hhd binary: pipeline wiring, file formats,
// determinism of outputs, and failure diagnostics.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hh/decode_engine.hpp"
#include "hh/io.hpp"
#include "hh/rolemap.hpp"
#include "hh/toy_model.hpp"
#include "hh/workbench.hpp"

namespace fs = std::filesystem;
using namespace hh;

namespace {

const fs::path kDir = fs::temp_directory_path() / "hh_cli_test";

int run_cli(const std::string& args) {
  const std::string cmd = std::string(HHD_BINARY) + " " + args + " >" +
                          (kDir / "stdout.txt").string() + " 2>" + (kDir / "stderr.txt").string();
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) { return read_file(p.string()); }

// Drop wall-clock lines; everything else must be reproducible.
std::string strip_time_lines(const std::string& text) {
  std::istringstream in(text);
  std::string line, out;
  while (std::getline(in, line))
    if (line.rfind("time.", 0) != 0 && line.rfind("# time.", 0) != 0) out += line + "\n";
  return out;
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::create_directories(kDir);
    // Tiny config so the specialize run stays fast.
    const std::string cfg =
        "n_layers 3\nn_q_heads 4\nn_kv_heads 2\nd_head 8\nd_ff 32\n"
        "vocab_size 64\nmax_seq_len 1100\npos_scheme absolute\n"
        "steps 30\nlr_lambda 0.03\nn_target 1\nprompt_min 24\nprompt_max 40\n"
        "passkey_len 4\npasskey_alphabet 12\nexport_mc_samples 512\nlog_every 10\n";
    atomic_write_file((kDir / "toy.cfg").string(), cfg);
    ASSERT_EQ(run_cli("init-model --config " + (kDir / "toy.cfg").string() + " --seed 5 --out " +
                      (kDir / "model.bin").string()),
              0);
    // Prompt file: 199 in-vocab ids.
    std::string prompt;
    Rng rng(17);
    for (int i = 0; i < 199; ++i) prompt += std::to_string(rng.uniform_index(64)) + " ";
    atomic_write_file((kDir / "prompt.txt").string(), prompt);
    // Role maps written directly through the library.
    const ToyModel model = load_model((kDir / "model.bin").string());
    RoleMap::all_retrieval(3, 2, model.config.checksum()).save((kDir / "dense.roles").string());
    RoleMap::all_sparse(3, 2, model.config.checksum()).save((kDir / "sparse.roles").string());
  }
};

TEST_F(CliTest, SpecializePipelineProducesLoadableArtifacts) {
  ASSERT_EQ(run_cli("specialize --config " + (kDir / "toy.cfg").string() + " --model " +
                    (kDir / "model.bin").string() + " --out " + (kDir / "learned.roles").string() +
                    " --log " + (kDir / "train.tsv").string() + " --record " +
                    (kDir / "specialize.rec").string() + " --seed 3"),
            0);
  const ToyModel model = load_model((kDir / "model.bin").string());
  const RoleMap rm = RoleMap::load((kDir / "learned.roles").string(), model.config.checksum());
  EXPECT_EQ(rm.n_layers, 3u);
  const std::string log = slurp(kDir / "train.tsv");
  EXPECT_NE(log.find("# step\tdistill\texpected_l0\tlambda"), std::string::npos);
  EXPECT_NE(log.find("\n30\t"), std::string::npos);  // final step logged
  const std::string rec = slurp(kDir / "specialize.rec");
  EXPECT_NE(rec.find("command specialize"), std::string::npos);
  EXPECT_NE(rec.find("constraint_gap "), std::string::npos);
}

TEST_F(CliTest, DecodeIsDeterministicModuloTimeLines) {
  const std::string base = "decode --model " + (kDir / "model.bin").string() + " --rolemap " +
                           (kDir / "sparse.roles").string() + " --prompt " +
                           (kDir / "prompt.txt").string() +
                           " --steps 10 --policy ratio --theta 0.8 --seed 7 --record ";
  ASSERT_EQ(run_cli(base + (kDir / "a.rec").string()), 0);
  ASSERT_EQ(run_cli(base + (kDir / "b.rec").string()), 0);
  EXPECT_EQ(strip_time_lines(slurp(kDir / "a.rec")), strip_time_lines(slurp(kDir / "b.rec")));
  EXPECT_NE(slurp(kDir / "a.rec").find("time.tpot_ms_mean"), std::string::npos);
}

TEST_F(CliTest, FullBudgetTopKReproducesDenseTokens) {
  const std::string dense_cmd = "decode --model " + (kDir / "model.bin").string() +
                                " --rolemap " + (kDir / "dense.roles").string() + " --prompt " +
                                (kDir / "prompt.txt").string() +
                                " --steps 16 --policy topk --k 4 --record " +
                                (kDir / "dense.rec").string() + " --tokens-out " +
                                (kDir / "dense.toks").string();
  ASSERT_EQ(run_cli(dense_cmd), 0);
  // Budget >= seq_len: sparse heads see the full context.
  const std::string full_cmd = "decode --model " + (kDir / "model.bin").string() + " --rolemap " +
                               (kDir / "sparse.roles").string() + " --prompt " +
                               (kDir / "prompt.txt").string() +
                               " --steps 16 --policy topk --k 4096 --record " +
                               (kDir / "full.rec").string() + " --tokens-out " +
                               (kDir / "full.toks").string();
  ASSERT_EQ(run_cli(full_cmd), 0);
  EXPECT_EQ(slurp(kDir / "dense.toks"), slurp(kDir / "full.toks"));
}

TEST_F(CliTest, RatioDecodeReportsTheConfiguredSparsity) {
  ASSERT_EQ(run_cli("decode --model " + (kDir / "model.bin").string() + " --rolemap " +
                    (kDir / "sparse.roles").string() + " --prompt " +
                    (kDir / "prompt.txt").string() +
                    " --steps 16 --policy ratio --theta 0.7 --record " +
                    (kDir / "ratio.rec").string()),
            0);
  const std::string rec = slurp(kDir / "ratio.rec");
  const auto pos = rec.find("sparsity ");
  ASSERT_NE(pos, std::string::npos);
  const double sparsity = std::stod(rec.substr(pos + 9));
  EXPECT_NEAR(sparsity, 0.70, 0.005);  // prints as 0.70 at table precision
}

TEST_F(CliTest, MissingRoleMapFailsWithDiagnostic) {
  EXPECT_NE(run_cli("decode --model " + (kDir / "model.bin").string() + " --rolemap " +
                    (kDir / "nope.roles").string() + " --prompt " + (kDir / "prompt.txt").string() +
                    " --steps 2 --policy topk --k 8 --record " + (kDir / "x.rec").string()),
            0);
  EXPECT_NE(slurp(kDir / "stderr.txt").find("error"), std::string::npos);
}

TEST_F(CliTest, WrongModelChecksumIsAHardError) {
  // Role map built for a different config must be rejected.
  RoleMap::all_retrieval(3, 2, 0xdeadbeefull).save((kDir / "stale.roles").string());
  EXPECT_NE(run_cli("decode --model " + (kDir / "model.bin").string() + " --rolemap " +
                    (kDir / "stale.roles").string() + " --prompt " +
                    (kDir / "prompt.txt").string() + " --steps 2 --policy topk --k 8 --record " +
                    (kDir / "y.rec").string()),
            0);
  EXPECT_NE(slurp(kDir / "stderr.txt").find("checksum"), std::string::npos);
}

TEST_F(CliTest, BenchIsMonotoneAndDeterministic) {
  const std::string cmd = "bench --model " + (kDir / "model.bin").string() + " --rolemap " +
                          (kDir / "sparse.roles").string() +
                          " --lengths 512,1024,2048 --splits 2,4 --sparsity 0.9 --seed 11 --out ";
  ASSERT_EQ(run_cli(cmd + (kDir / "bench_a.tsv").string()), 0);
  ASSERT_EQ(run_cli(cmd + (kDir / "bench_b.tsv").string()), 0);
  EXPECT_EQ(strip_time_lines(slurp(kDir / "bench_a.tsv")),
            strip_time_lines(slurp(kDir / "bench_b.tsv")));

  // Aggregate pooled critical path must not shrink as the context grows.
  std::istringstream in(slurp(kDir / "bench_a.tsv"));
  std::string line;
  std::vector<std::size_t> agg_by_length;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string length, splits, layer, f1, f2, pooled;
    if (!(ls >> length >> splits >> layer >> f1 >> f2 >> pooled)) continue;
    if (layer == "all" && splits == "4") agg_by_length.push_back(std::stoull(pooled));
  }
  ASSERT_EQ(agg_by_length.size(), 3u);
  EXPECT_LE(agg_by_length[0], agg_by_length[1]);
  EXPECT_LE(agg_by_length[1], agg_by_length[2]);

  // At the longest length, the 90%-sparse layers beat the dense workload's
  // critical path by at least 5x.
  std::istringstream in2(slurp(kDir / "bench_a.tsv"));
  bool saw_sparse_layer = false;
  while (std::getline(in2, line)) {
    std::istringstream ls(line);
    std::string length, splits, layer, retr, sparse, pooled, naive, dense, balance, ratio;
    if (!(ls >> length >> splits >> layer >> retr >> sparse >> pooled >> naive >> dense >>
          balance >> ratio))
      continue;
    if (length == "2048" && layer != "all" && layer != "0" && sparse == "2") {
      saw_sparse_layer = true;
      EXPECT_GE(std::stod(ratio), 5.0) << line;
    }
  }
  EXPECT_TRUE(saw_sparse_layer);
}

TEST_F(CliTest, OverlapGridIsWellFormed) {
  ASSERT_EQ(run_cli("overlap --model " + (kDir / "model.bin").string() + " --prompt " +
                    (kDir / "prompt.txt").string() + " --k 5 --out " +
                    (kDir / "overlap.tsv").string()),
            0);
  std::istringstream in(slurp(kDir / "overlap.tsv"));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.find(' ') != std::string::npos) continue;
    std::istringstream ls(line);
    double v;
    std::size_t cols = 0;
    while (ls >> v) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      ++cols;
    }
    if (cols > 0) {
      EXPECT_EQ(cols, 2u);
      ++rows;
    }
  }
  EXPECT_EQ(rows, 2u);  // 3 layers -> 2 adjacent pairs
}

TEST_F(CliTest, SparsitySweepCoversAllFamilies) {
  ASSERT_EQ(run_cli("sparsity-sweep --model " + (kDir / "model.bin").string() + " --rolemap " +
                    (kDir / "sparse.roles").string() + " --steps 8 --prompt-len 120 --seed 13 --out " +
                    (kDir / "sweep.tsv").string()),
            0);
  const std::string sweep = slurp(kDir / "sweep.tsv");
  for (const char* family : {"topk", "topp", "threshold", "ratio"})
    EXPECT_NE(sweep.find(family), std::string::npos);
  // The full-budget point matches dense behaviour exactly.
  EXPECT_NE(sweep.find("topk\t128\t0\t1\n"), std::string::npos);

  // Agreement must not rise as the top-k budget shrinks through
  // {full, 1/2, 1/8}, up to one inversion.
  std::istringstream in(sweep);
  std::string line;
  std::vector<double> topk_accuracy;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string family, param, sparsity, acc;
    if ((ls >> family >> param >> sparsity >> acc) && family == "topk")
      topk_accuracy.push_back(std::stod(acc));
  }
  ASSERT_EQ(topk_accuracy.size(), 3u);
  int inversions = 0;
  for (std::size_t i = 1; i < topk_accuracy.size(); ++i)
    inversions += topk_accuracy[i] > topk_accuracy[i - 1];
  EXPECT_LE(inversions, 1);
}

}  // namespace
