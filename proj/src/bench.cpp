#include "pkd/bench.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include "pkd/error.hpp"

namespace pkd {

namespace {

Batch synthetic_batch(const EncoderConfig& c, std::size_t batch_size, std::size_t seq_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Batch b;
  b.batch_size = batch_size;
  b.seq_len = seq_len;
  for (std::size_t i = 0; i < batch_size; ++i) {
    for (std::size_t t = 0; t < seq_len; ++t) {
      b.token_ids.push_back(t == 0 ? std::min<std::size_t>(2, c.vocab_size - 1) : rng() % c.vocab_size);
      b.segment_ids.push_back(t < seq_len / 2 ? 0 : 1);
      b.position_ids.push_back(t);
      b.mask.push_back(1);
    }
  }
  return b;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string num(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace

BenchReport bench_inference(const EncoderConfig& config_template, std::span<const std::size_t> depths,
                            std::size_t batch_size, std::size_t seq_len, std::size_t repeats, std::uint64_t seed) {
  if (depths.empty()) throw ConfigError("bench needs at least one depth");
  if (repeats < 3) throw ConfigError("bench needs at least 3 repeats, got " + std::to_string(repeats));
  if (batch_size == 0 || seq_len == 0) throw ConfigError("bench batch size and sequence length must be positive");
  if (std::set<std::size_t>(depths.begin(), depths.end()).size() != depths.size())
    throw ConfigError("bench depths must be distinct");

  std::vector<std::size_t> sorted(depths.begin(), depths.end());
  std::sort(sorted.rbegin(), sorted.rend());

  BenchReport report;
  report.batch_size = batch_size;
  report.seq_len = seq_len;
  report.repeats = repeats;
  const Batch batch = synthetic_batch(config_template, batch_size, seq_len, seed);
  for (std::size_t depth : sorted) {
    EncoderConfig c = config_template;
    c.num_layers = depth;
    c.validate();
    const EncoderModel model = build_model(c, seed);
    predict_logits(model, batch);
    std::vector<double> times;
    for (std::size_t r = 0; r < repeats; ++r) {
      const auto start = std::chrono::steady_clock::now();
      predict_logits(model, batch);
      times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    const ParamReport p = count_params(c);
    BenchRow row;
    row.num_layers = depth;
    row.emb_params = p.emb_params;
    row.trm_params = p.trm_params;
    row.total_params = p.total;
    row.inference_seconds = median(times);
    report.rows.push_back(row);
  }
  const BenchRow& deepest = report.rows.front();
  for (BenchRow& row : report.rows) {
    row.speedup_vs_deepest = deepest.inference_seconds / row.inference_seconds;
    row.param_ratio_vs_deepest =
        static_cast<double>(deepest.total_params) / static_cast<double>(row.total_params);
  }
  report.rows.front().speedup_vs_deepest = 1.0;
  return report;
}

void write_bench_csv(const BenchReport& report, const std::filesystem::path& path) {
  std::ofstream out = open_out(path);
  out << "num_layers,emb_params,trm_params,total_params,inference_seconds,speedup_vs_deepest,param_ratio_vs_deepest\n";
  for (const BenchRow& r : report.rows) {
    out << r.num_layers << ',' << r.emb_params << ',' << r.trm_params << ',' << r.total_params << ','
        << num(r.inference_seconds) << ',' << num(r.speedup_vs_deepest) << ',' << num(r.param_ratio_vs_deepest)
        << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

void emit_curves(std::span<const NamedRun> runs, const std::filesystem::path& path) {
  if (runs.empty()) throw ConfigError("emit_curves needs at least one run");
  std::ofstream out = open_out(path);
  out << "run_id,epoch,split,accuracy\n";
  for (const NamedRun& run : runs) {
    for (const EpochRecord& e : run.record.epochs) {
      out << run.run_id << ',' << e.epoch << ",train," << num(e.train_accuracy) << '\n';
      out << run.run_id << ',' << e.epoch << ",dev," << num(e.dev_accuracy) << '\n';
    }
  }
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace pkd
