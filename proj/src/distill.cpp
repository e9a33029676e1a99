#include "pkd/distill.hpp"

#include <algorithm>
#include <cmath>

#include "pkd/error.hpp"

namespace pkd {

std::string to_string(DistillStrategy s) {
  switch (s) {
    case DistillStrategy::Skip:
      return "skip";
    case DistillStrategy::Last:
      return "last";
    case DistillStrategy::None:
      return "none";
  }
  return "none";
}

DistillStrategy parse_strategy(const std::string& text) {
  if (text == "skip") return DistillStrategy::Skip;
  if (text == "last") return DistillStrategy::Last;
  if (text == "none") return DistillStrategy::None;
  throw ConfigError("unknown strategy '" + text + "' (expected skip, last or none)");
}

LayerMap build_layer_map(std::size_t teacher_layers, std::size_t student_layers, DistillStrategy strategy) {
  if (student_layers > teacher_layers) {
    throw DepthError("student depth " + std::to_string(student_layers) + " exceeds teacher depth " +
                     std::to_string(teacher_layers));
  }
  if (student_layers < 2) throw DepthError("student depth must be at least 2, got " + std::to_string(student_layers));

  LayerMap map;
  map.teacher_layers = teacher_layers;
  if (strategy == DistillStrategy::None) return map;

  map.student_layers = student_layers - 1;
  if (strategy == DistillStrategy::Skip) {
    if (teacher_layers % student_layers != 0) {
      throw DivisibilityError("PKD-Skip needs teacher depth divisible by student depth, got " +
                              std::to_string(teacher_layers) + " and " + std::to_string(student_layers));
    }
    const std::size_t stride = teacher_layers / student_layers;
    for (std::size_t j = 1; j < student_layers; ++j) map.entries.push_back(j * stride);
  } else {
    for (std::size_t t = teacher_layers - student_layers + 1; t < teacher_layers; ++t) map.entries.push_back(t);
  }
  return map;
}

void DistillConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(beta >= 0.0)) throw ConfigError("beta must be non-negative");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (!(eps_norm > 0.0)) throw ConfigError("eps_norm must be positive");
  if (strategy == DistillStrategy::None && beta > 0.0) {
    throw ConfigError("strategy none (vanilla KD) cannot carry a patient weight beta > 0");
  }
}

void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = nlohmann::json{{"alpha", c.alpha},
                     {"beta", c.beta},
                     {"temperature", c.temperature},
                     {"strategy", to_string(c.strategy)},
                     {"symmetric_temperature", c.symmetric_temperature},
                     {"eps_norm", c.eps_norm}};
}

void from_json(const nlohmann::json& j, DistillConfig& c) {
  const DistillConfig d;
  c.alpha = j.value("alpha", d.alpha);
  c.beta = j.value("beta", d.beta);
  c.temperature = j.value("temperature", d.temperature);
  c.strategy = parse_strategy(j.value("strategy", to_string(d.strategy)));
  c.symmetric_temperature = j.value("symmetric_temperature", d.symmetric_temperature);
  c.eps_norm = j.value("eps_norm", d.eps_norm);
}

Tensor soft_labels(const EncoderModel& teacher, const Batch& batch, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  return kernels::softmax_rows(predict_logits(teacher, batch), temperature);
}

Var loss_ds(const Var& student_logits, const Tensor& teacher_probs, double temperature, bool symmetric) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  if (teacher_probs.shape() != student_logits.shape()) {
    throw DimensionError("loss_ds: teacher probabilities " + shape_string(teacher_probs.shape()) +
                         " vs student logits " + shape_string(student_logits.shape()));
  }
  Tape& tape = *student_logits.tape();
  const double student_t = symmetric ? temperature : 1.0;
  Var log_p = ops::log_softmax_rows(student_logits, student_t);
  Var cross = ops::scale(ops::sum(ops::mul(tape.constant(teacher_probs), log_p)), -1.0);
  return symmetric ? ops::scale(cross, temperature * temperature) : cross;
}

double loss_ds(const Tensor& teacher_probs, const Tensor& student_logits, double temperature, bool symmetric) {
  Tape tape(false);
  return loss_ds(tape.constant(student_logits), teacher_probs, temperature, symmetric).value().item();
}

Var loss_ce(const Var& student_logits, std::span<const std::size_t> labels) {
  const std::size_t classes = student_logits.value().cols();
  if (labels.size() != student_logits.value().rows()) throw InputError("loss_ce: label count differs from batch size");
  for (std::size_t y : labels) {
    if (y >= classes) {
      throw InputError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  Var log_p = ops::log_softmax_rows(student_logits, 1.0);
  return ops::scale(ops::sum(ops::pick(log_p, labels)), -1.0);
}

double loss_ce(std::span<const std::size_t> labels, const Tensor& student_logits) {
  Tape tape(false);
  return loss_ce(tape.constant(student_logits), labels).value().item();
}

double kd_loss(double alpha, double l_ce, double l_ds) { return (1.0 - alpha) * l_ce + alpha * l_ds; }

namespace {

Tensor normalize_rows(const Tensor& x, double eps) {
  Tensor out = x;
  const std::size_t m = x.rows(), d = x.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += x[i * d + j] * x[i * d + j];
    const double denom = std::max(std::sqrt(sq), eps);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] / denom;
  }
  return out;
}

void check_widths(std::size_t student_d, std::size_t teacher_d) {
  if (student_d != teacher_d) {
    throw DimensionError("patient loss needs equal student/teacher hidden sizes (got " + std::to_string(student_d) +
                         " vs " + std::to_string(teacher_d) +
                         "); mismatched widths allow only vanilla KD");
  }
}

}  // namespace

Var loss_pt(std::span<const Var> student_layers, std::span<const Tensor> teacher_layers, const LayerMap& map,
            double eps_norm) {
  if (map.entries.size() != student_layers.size()) {
    throw ContractError("layer map has " + std::to_string(map.entries.size()) + " entries for " +
                        std::to_string(student_layers.size()) + " student layers");
  }
  if (teacher_layers.size() != map.teacher_layers) {
    throw ContractError("layer map expects " + std::to_string(map.teacher_layers) + " teacher layers, got " +
                        std::to_string(teacher_layers.size()));
  }
  if (student_layers.empty()) throw ContractError("loss_pt with an empty layer map");
  Tape& tape = *student_layers.front().tape();
  Var total;
  for (std::size_t j = 0; j < student_layers.size(); ++j) {
    const Tensor& teacher = teacher_layers[map.entries[j] - 1];
    const Tensor& student = student_layers[j].value();
    check_widths(student.cols(), teacher.cols());
    if (student.rows() != teacher.rows()) throw DimensionError("loss_pt: batch sizes differ");
    Var s = ops::l2_normalize_rows(student_layers[j], eps_norm);
    Var t = tape.constant(normalize_rows(teacher, eps_norm));
    Var term = ops::sum(ops::square(ops::sub(s, t)));
    total = j == 0 ? term : ops::add(total, term);
  }
  return total;
}

double loss_pt(std::span<const Tensor> student_cls, std::span<const Tensor> teacher_cls, const LayerMap& map,
               double eps_norm) {
  if (student_cls.size() != teacher_cls.size()) throw ContractError("loss_pt: student/teacher batch sizes differ");
  if (student_cls.empty()) throw ContractError("loss_pt: empty batch");
  const std::size_t n = student_cls.size();
  const std::size_t m = student_cls.front().rows();
  const std::size_t lt = teacher_cls.front().rows();
  check_widths(student_cls.front().cols(), teacher_cls.front().cols());
  const std::size_t d = student_cls.front().cols();

  // Regroup per-example [layers × d] into per-layer [batch × d].
  auto by_layer = [n, d](std::span<const Tensor> per_example, std::size_t layers) {
    std::vector<Tensor> out(layers, Tensor(Shape{n, d}));
    for (std::size_t i = 0; i < n; ++i) {
      if (per_example[i].rows() != layers || per_example[i].cols() != d) {
        throw DimensionError("loss_pt: inconsistent per-example state shapes");
      }
      for (std::size_t l = 0; l < layers; ++l)
        std::copy_n(per_example[i].raw() + l * d, d, out[l].raw() + i * d);
    }
    return out;
  };
  const std::vector<Tensor> student = by_layer(student_cls, m);
  const std::vector<Tensor> teacher = by_layer(teacher_cls, lt);

  Tape tape(false);
  std::vector<Var> student_vars;
  for (const Tensor& s : student) student_vars.push_back(tape.constant(s));
  return loss_pt(student_vars, teacher, map, eps_norm).value().item();
}

LossBreakdown pkd_loss(const DistillConfig& config, double l_ce, double l_ds, double l_pt) {
  config.validate();
  LossBreakdown out{l_ce, l_ds, l_pt, 0.0};
  out.total = (1.0 - config.alpha) * l_ce + config.alpha * l_ds + config.beta * l_pt;
  return out;
}

EncoderModel init_student_from_teacher(const EncoderModel& teacher, std::size_t student_layers) {
  EncoderConfig config = teacher.config;
  config.num_layers = student_layers;
  return init_student_from_teacher(teacher, config);
}

EncoderModel init_student_from_teacher(const EncoderModel& teacher, const EncoderConfig& student_config) {
  if (student_config.hidden_dim != teacher.config.hidden_dim) {
    throw ConfigError("student hidden_dim " + std::to_string(student_config.hidden_dim) + " differs from teacher " +
                      std::to_string(teacher.config.hidden_dim));
  }
  EncoderConfig expected = teacher.config;
  expected.num_layers = student_config.num_layers;
  if (!(expected == student_config)) throw ConfigError("student config must match the teacher except num_layers");
  if (student_config.num_layers == 0 || student_config.num_layers > teacher.config.num_layers) {
    throw DepthError("student depth " + std::to_string(student_config.num_layers) + " not in [1, " +
                     std::to_string(teacher.config.num_layers) + "]");
  }
  EncoderModel student = teacher;
  student.config = student_config;
  student.layers.resize(student_config.num_layers);
  return student;
}

}  // namespace pkd
