#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pkd/encoder.hpp"
#include "pkd/train.hpp"

namespace pkd {

struct BenchRow {
  std::size_t num_layers = 0;
  std::size_t emb_params = 0;
  std::size_t trm_params = 0;
  std::size_t total_params = 0;
  double inference_seconds = 0.0;  // median over repeats
  double speedup_vs_deepest = 1.0;
  double param_ratio_vs_deepest = 1.0;
};

/// Rows sorted by depth, deepest first.
struct BenchReport {
  std::vector<BenchRow> rows;
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::size_t repeats = 0;
};

/// Times full forward passes of one model per depth (same width, same input
/// batch). A warmup pass is discarded before `repeats` timed passes.
BenchReport bench_inference(const EncoderConfig& config_template, std::span<const std::size_t> depths,
                            std::size_t batch_size, std::size_t seq_len, std::size_t repeats,
                            std::uint64_t seed = 1);

void write_bench_csv(const BenchReport& report, const std::filesystem::path& path);

struct NamedRun {
  std::string run_id;
  RunRecord record;
};

/// Long-format learning curves: one row per (run, epoch, split).
void emit_curves(std::span<const NamedRun> runs, const std::filesystem::path& path);

}  // namespace pkd
