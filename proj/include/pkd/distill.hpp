#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "pkd/autodiff.hpp"
#include "pkd/encoder.hpp"

namespace pkd {

/// Which teacher layers the student's intermediate [CLS] states imitate.
/// None is vanilla KD: no patient term.
enum class DistillStrategy { Skip, Last, None };

std::string to_string(DistillStrategy s);
DistillStrategy parse_strategy(const std::string& text);

/// Teacher layer indices (1-based) matched by student layers 1..n-1. The
/// teacher's last layer never appears: it feeds the classifier, which the
/// distillation loss already covers.
struct LayerMap {
  std::vector<std::size_t> entries;
  std::size_t student_layers = 0;  // M = n - 1
  std::size_t teacher_layers = 0;

  bool operator==(const LayerMap&) const = default;
};

LayerMap build_layer_map(std::size_t teacher_layers, std::size_t student_layers, DistillStrategy strategy);

struct DistillConfig {
  double alpha = 0.5;
  double beta = 0.0;
  double temperature = 1.0;
  DistillStrategy strategy = DistillStrategy::None;
  // false: teacher softened by T, student at T = 1, no T² factor.
  // true: both softened by T and the distillation term scaled by T².
  bool symmetric_temperature = false;
  double eps_norm = 1e-12;

  void validate() const;
  bool operator==(const DistillConfig&) const = default;
};

void to_json(nlohmann::json& j, const DistillConfig& c);
void from_json(const nlohmann::json& j, DistillConfig& c);

struct LossBreakdown {
  double l_ce = 0.0;
  double l_ds = 0.0;
  double l_pt = 0.0;
  double total = 0.0;
};

// Objective terms. All reduce by summing over the batch; callers wanting a
// batch mean divide afterwards.

/// Teacher class probabilities softened by `temperature`; detached values.
Tensor soft_labels(const EncoderModel& teacher, const Batch& batch, double temperature);

/// −Σ_i Σ_c p_t(c) log p_s(c), with log p_s taken from logits directly.
Var loss_ds(const Var& student_logits, const Tensor& teacher_probs, double temperature, bool symmetric);
double loss_ds(const Tensor& teacher_probs, const Tensor& student_logits, double temperature, bool symmetric);

Var loss_ce(const Var& student_logits, std::span<const std::size_t> labels);
double loss_ce(std::span<const std::size_t> labels, const Tensor& student_logits);

double kd_loss(double alpha, double l_ce, double l_ds);

/// Σ_i Σ_j ‖ĥ^s_{i,j} − ĥ^t_{i,I(j)}‖², ĥ = h / max(‖h‖, eps_norm).
/// `student_layers` holds the first M student layers and `teacher_layers`
/// every teacher layer, each as a [batch × d] matrix.
Var loss_pt(std::span<const Var> student_layers, std::span<const Tensor> teacher_layers, const LayerMap& map,
            double eps_norm);
/// Per-example form: student_cls[i] is M×d, teacher_cls[i] is L_t×d.
double loss_pt(std::span<const Tensor> student_cls, std::span<const Tensor> teacher_cls, const LayerMap& map,
               double eps_norm);

LossBreakdown pkd_loss(const DistillConfig& config, double l_ce, double l_ds, double l_pt);

/// Student of depth n sharing the teacher's embeddings, pooler, classifier
/// and first n transformer layers. The copy is deep.
EncoderModel init_student_from_teacher(const EncoderModel& teacher, std::size_t student_layers);
// Same, with an explicit student config that must equal the teacher's in
// everything but num_layers.
EncoderModel init_student_from_teacher(const EncoderModel& teacher, const EncoderConfig& student_config);

}  // namespace pkd
