#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "pkd/data.hpp"
#include "pkd/distill.hpp"
#include "pkd/encoder.hpp"

namespace pkd {

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 32;
  std::size_t epochs = 4;
  std::uint64_t seed = 1;
  std::optional<double> grad_clip;  // max global L2 norm

  void validate() const;
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  LossBreakdown train_loss;  // per-example means
  double train_accuracy = 0.0;
  double dev_accuracy = 0.0;
  double seconds = 0.0;
};

struct RunRecord {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;  // batch-mean objective of every optimizer step
  std::size_t best_epoch = 0;       // 0 when the initial model was never beaten
  double best_dev_accuracy = 0.0;
  std::optional<double> test_accuracy;
  nlohmann::json config;
  double wall_seconds = 0.0;
};

struct TaskData {
  std::vector<EncodedExample> train, dev, test;
};

struct AdamState {
  std::vector<Tensor> m, v;
  std::size_t step = 0;
};

/// One Adam update with bias correction. When `opt.grad_clip` is set the
/// gradients are rescaled to that global norm first.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               const OptimizerConfig& opt);

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::size_t> correct_per_class;
  std::vector<std::size_t> total_per_class;
  std::vector<std::size_t> predictions;
};

EvalResult evaluate(const EncoderModel& model, std::span<const EncodedExample> split);

/// Fraction of examples on which two models predict the same class.
double prediction_agreement(const EncoderModel& a, const EncoderModel& b, std::span<const EncodedExample> split);

struct TrainResult {
  EncoderModel model;
  RunRecord record;
};

/// Batch-mean cross-entropy with Adam; returns the best-dev epoch's model.
TrainResult train_teacher(const EncoderConfig& config, const OptimizerConfig& opt, const TaskData& data);

/// Plain fine-tuning of an n-layer student: initialized from the teacher's
/// first n layers when a teacher is given, else freshly built from `config`.
TrainResult finetune_student(const EncoderModel* teacher, std::size_t student_layers, const EncoderConfig& config,
                             const OptimizerConfig& opt, const TaskData& data);

struct DistillOptions {
  // Precompute teacher logits and [CLS] states for the training split once
  // instead of re-running the teacher on every batch. Results are identical.
  bool cache_teacher = true;
};

/// Student of depth n initialized from the teacher and trained on the
/// batch-mean of (1−α)L_CE + αL_DS + βL_PT. Teacher outputs are constants.
TrainResult distill(const EncoderModel& teacher, std::size_t student_layers, const DistillConfig& config,
                    const OptimizerConfig& opt, const TaskData& data, const DistillOptions& options = {});

struct GridSpec {
  std::vector<double> temperatures;
  std::vector<double> alphas;
  std::vector<double> betas;
  std::vector<double> learning_rates;

  void validate() const;
  std::size_t size() const;
};

struct GridPoint {
  double temperature = 1.0;
  double alpha = 0.0;
  double beta = 0.0;
  double learning_rate = 0.0;
};

struct GridRun {
  std::size_t index = 0;  // enumeration order
  GridPoint point;
  std::optional<RunRecord> record;
  std::string error;
};

struct GridTemplate {
  const EncoderModel* teacher = nullptr;
  std::size_t student_layers = 0;
  DistillConfig base;
  OptimizerConfig opt;
  const TaskData* data = nullptr;
  DistillOptions options;
};

/// Enumerates points in (T, α, β, lr) order, runs each, and ranks by best dev
/// accuracy; ties go to lower β, then lower T, then lower lr, then earlier
/// enumeration. Failed points are kept, ranked last.
std::vector<GridRun> grid_search(const GridSpec& grid, const GridTemplate& fixed);
std::vector<GridPoint> enumerate_grid(const GridSpec& grid);

// Persistence.
void write_metrics_csv(const RunRecord& record, const std::filesystem::path& path);
RunRecord read_metrics_csv(const std::filesystem::path& path);
void write_run_json(const RunRecord& record, const std::filesystem::path& path);
void write_grid_csv(std::span<const GridRun> runs, const std::filesystem::path& path);

}  // namespace pkd
