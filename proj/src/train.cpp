#include "pkd/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "pkd/error.hpp"

namespace pkd {

void OptimizerConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
}

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate}, {"beta1", c.beta1},
                     {"beta2", c.beta2},                 {"adam_eps", c.adam_eps},
                     {"batch_size", c.batch_size},       {"epochs", c.epochs},
                     {"seed", c.seed}};
  j["grad_clip"] = c.grad_clip ? nlohmann::json(*c.grad_clip) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  const OptimizerConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  if (j.contains("grad_clip") && !j.at("grad_clip").is_null()) c.grad_clip = j.at("grad_clip").get<double>();
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               const OptimizerConfig& opt) {
  if (params.size() != grads.size()) throw ContractError("adam_step: parameter and gradient counts differ");
  if (state.m.empty()) {
    for (Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape() || state.m[i].shape() != grads[i].shape()) {
      throw ContractError("adam_step: shape mismatch at parameter " + std::to_string(i) + ": " +
                          shape_string(params[i]->shape()) + " vs gradient " + shape_string(grads[i].shape()));
    }
  }

  double clip_scale = 1.0;
  if (opt.grad_clip) {
    double sq = 0.0;
    for (const Tensor& g : grads)
      for (double v : g.data()) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > *opt.grad_clip) clip_scale = *opt.grad_clip / norm;
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(opt.beta1, t);
  const double correction2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = grads[i];
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const double gk = g[k] * clip_scale;
      m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * gk;
      v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * gk * gk;
      const double m_hat = m[k] / correction1;
      const double v_hat = v[k] / correction2;
      p[k] -= opt.learning_rate * m_hat / (std::sqrt(v_hat) + opt.adam_eps);
    }
  }
}

namespace {

constexpr std::size_t kEvalBatch = 256;

std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t c = logits.cols();
  std::size_t best = 0;
  for (std::size_t j = 1; j < c; ++j)
    if (logits[row * c + j] > logits[row * c + best]) best = j;
  return best;
}

std::vector<std::size_t> predict(const EncoderModel& model, std::span<const EncodedExample> split) {
  std::vector<std::size_t> out;
  out.reserve(split.size());
  for (const auto& indices : batch_iter(split.size(), kEvalBatch, 0, false)) {
    const Tensor logits = predict_logits(model, make_batch(split, indices));
    for (std::size_t r = 0; r < indices.size(); ++r) out.push_back(argmax_row(logits, r));
  }
  return out;
}

}  // namespace

EvalResult evaluate(const EncoderModel& model, std::span<const EncodedExample> split) {
  if (split.empty()) throw InputError("cannot evaluate on an empty split");
  EvalResult r;
  r.predictions = predict(model, split);
  r.correct_per_class.assign(model.config.num_classes, 0);
  r.total_per_class.assign(model.config.num_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const std::size_t y = split[i].label;
    if (y >= model.config.num_classes) throw InputError("label " + std::to_string(y) + " outside model classes");
    ++r.total_per_class[y];
    if (r.predictions[i] == y) {
      ++r.correct_per_class[y];
      ++correct;
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(split.size());
  return r;
}

double prediction_agreement(const EncoderModel& a, const EncoderModel& b, std::span<const EncodedExample> split) {
  if (split.empty()) throw InputError("cannot compare predictions on an empty split");
  const auto pa = predict(a, split);
  const auto pb = predict(b, split);
  std::size_t same = 0;
  for (std::size_t i = 0; i < pa.size(); ++i) same += pa[i] == pb[i] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(split.size());
}

namespace {

/// Summed (not averaged) objective terms of one batch.
struct BatchTerms {
  Var total;  // weighted sum, before the batch-mean division
  Var l_ce;
  std::optional<Var> l_ds;
  std::optional<Var> l_pt;
};

using Objective =
    std::function<BatchTerms(const EncoderActivations&, const Batch&, std::span<const std::size_t> indices)>;

TrainResult run_training(EncoderModel model, const OptimizerConfig& opt, const TaskData& data,
                         const Objective& objective, nlohmann::json config_echo) {
  opt.validate();
  if (data.train.empty()) throw InputError("training split is empty");
  if (data.dev.empty()) throw InputError("dev split is empty");
  const auto run_start = std::chrono::steady_clock::now();

  RunRecord record;
  record.config = std::move(config_echo);
  AdamState adam;
  std::mt19937_64 dropout_rng(opt.seed + 1);
  ForwardOptions fwd;
  if (model.config.dropout_prob > 0.0) fwd.dropout_rng = &dropout_rng;

  EncoderModel best = model;
  bool have_best = false;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    double sum_ce = 0.0, sum_ds = 0.0, sum_pt = 0.0, sum_total = 0.0;
    std::size_t correct = 0;
    const auto batches = batch_iter(data.train.size(), opt.batch_size, opt.seed, true, epoch - 1);
    for (std::size_t step = 0; step < batches.size(); ++step) {
      const auto& indices = batches[step];
      const Batch batch = make_batch(data.train, indices);
      Tape tape;
      const BoundEncoder bound = bind(tape, model, true);
      const EncoderActivations acts = encode(bound, batch, fwd);
      const BatchTerms terms = objective(acts, batch, indices);
      const Var loss = ops::scale(terms.total, 1.0 / static_cast<double>(indices.size()));
      const double loss_value = loss.value().item();
      if (!std::isfinite(loss_value)) {
        throw DivergenceError("loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step + 1) + "; lower the learning rate or enable gradient clipping");
      }
      record.step_losses.push_back(loss_value);
      sum_ce += terms.l_ce.value().item();
      if (terms.l_ds) sum_ds += terms.l_ds->value().item();
      if (terms.l_pt) sum_pt += terms.l_pt->value().item();
      sum_total += terms.total.value().item();
      for (std::size_t r = 0; r < indices.size(); ++r) correct += argmax_row(acts.logits.value(), r) == batch.labels[r];

      const Gradients grads = tape.backward(loss);
      auto params = model.parameters();
      std::vector<Tensor*> ptrs;
      std::vector<Tensor> gs;
      ptrs.reserve(params.size());
      gs.reserve(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        ptrs.push_back(params[i].tensor);
        gs.push_back(grads.at(i));
      }
      adam_step(ptrs, gs, adam, opt);
    }

    const double n = static_cast<double>(data.train.size());
    EpochRecord er;
    er.epoch = epoch;
    er.train_loss = {sum_ce / n, sum_ds / n, sum_pt / n, sum_total / n};
    er.train_accuracy = static_cast<double>(correct) / n;
    er.dev_accuracy = evaluate(model, data.dev).accuracy;
    er.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    record.epochs.push_back(er);
    if (!have_best || er.dev_accuracy > record.best_dev_accuracy) {
      have_best = true;
      best = model;
      record.best_epoch = epoch;
      record.best_dev_accuracy = er.dev_accuracy;
    }
  }
  if (!have_best) record.best_dev_accuracy = evaluate(model, data.dev).accuracy;
  if (!data.test.empty()) record.test_accuracy = evaluate(best, data.test).accuracy;
  record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - run_start).count();
  return {std::move(best), std::move(record)};
}

Objective cross_entropy_objective() {
  return [](const EncoderActivations& acts, const Batch& batch, std::span<const std::size_t>) {
    BatchTerms t;
    t.l_ce = loss_ce(acts.logits, batch.labels);
    t.total = t.l_ce;
    return t;
  };
}

}  // namespace

TrainResult train_teacher(const EncoderConfig& config, const OptimizerConfig& opt, const TaskData& data) {
  nlohmann::json echo{{"kind", "teacher"}, {"encoder", config}, {"optimizer", opt}};
  return run_training(build_model(config, opt.seed), opt, data, cross_entropy_objective(), std::move(echo));
}

TrainResult finetune_student(const EncoderModel* teacher, std::size_t student_layers, const EncoderConfig& config,
                             const OptimizerConfig& opt, const TaskData& data) {
  EncoderConfig student_config = config;
  student_config.num_layers = student_layers;
  EncoderModel student = teacher != nullptr ? init_student_from_teacher(*teacher, student_config)
                                            : build_model(student_config, opt.seed);
  nlohmann::json echo{{"kind", "finetune"},
                      {"encoder", student_config},
                      {"optimizer", opt},
                      {"initialized_from_teacher", teacher != nullptr}};
  return run_training(std::move(student), opt, data, cross_entropy_objective(), std::move(echo));
}

namespace {

// Teacher outputs for the whole training split, indexed by example.
struct TeacherCache {
  Tensor logits;              // [N × C]
  std::vector<Tensor> layers;  // L_t × [N × d]
};

TeacherCache compute_teacher_cache(const EncoderModel& teacher, std::span<const EncodedExample> split) {
  const std::size_t n = split.size();
  const std::size_t c = teacher.config.num_classes;
  const std::size_t d = teacher.config.hidden_dim;
  TeacherCache cache{Tensor(Shape{n, c}), std::vector<Tensor>(teacher.config.num_layers, Tensor(Shape{n, d}))};
  std::size_t row = 0;
  for (const auto& indices : batch_iter(n, kEvalBatch, 0, false)) {
    Tape tape(false);
    const EncoderActivations acts = encode(bind(tape, teacher, false), make_batch(split, indices));
    std::copy_n(acts.logits.value().raw(), indices.size() * c, cache.logits.raw() + row * c);
    for (std::size_t l = 0; l < cache.layers.size(); ++l)
      std::copy_n(acts.cls_states[l].value().raw(), indices.size() * d, cache.layers[l].raw() + row * d);
    row += indices.size();
  }
  return cache;
}

Tensor gather(const Tensor& table, std::span<const std::size_t> rows) {
  const std::size_t w = table.cols();
  Tensor out(Shape{rows.size(), w});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(table.raw() + rows[i] * w, w, out.raw() + i * w);
  return out;
}

}  // namespace

TrainResult distill(const EncoderModel& teacher, std::size_t student_layers, const DistillConfig& config,
                    const OptimizerConfig& opt, const TaskData& data, const DistillOptions& options) {
  config.validate();
  const LayerMap map = build_layer_map(teacher.config.num_layers, student_layers, config.strategy);
  EncoderModel student = init_student_from_teacher(teacher, student_layers);

  auto cache = std::make_shared<std::optional<TeacherCache>>();
  if (options.cache_teacher) *cache = compute_teacher_cache(teacher, data.train);

  const bool patient = config.strategy != DistillStrategy::None;
  Objective objective = [&teacher, config, map, cache, patient](const EncoderActivations& acts, const Batch& batch,
                                                                 std::span<const std::size_t> indices) {
    Tensor teacher_logits;
    std::vector<Tensor> teacher_layers;
    if (cache->has_value()) {
      teacher_logits = gather((*cache)->logits, indices);
      if (patient)
        for (const Tensor& layer : (*cache)->layers) teacher_layers.push_back(gather(layer, indices));
    } else {
      Tape frozen(false);
      const EncoderActivations t = encode(bind(frozen, teacher, false), batch);
      teacher_logits = t.logits.value();
      if (patient)
        for (const Var& layer : t.cls_states) teacher_layers.push_back(layer.value());
    }
    const Tensor soft = kernels::softmax_rows(teacher_logits, config.temperature);

    BatchTerms terms;
    terms.l_ce = loss_ce(acts.logits, batch.labels);
    terms.l_ds = loss_ds(acts.logits, soft, config.temperature, config.symmetric_temperature);
    Var total = ops::add(ops::scale(terms.l_ce, 1.0 - config.alpha), ops::scale(*terms.l_ds, config.alpha));
    if (patient) {
      std::span<const Var> student_states(acts.cls_states.data(), map.entries.size());
      terms.l_pt = loss_pt(student_states, teacher_layers, map, config.eps_norm);
      total = ops::add(total, ops::scale(*terms.l_pt, config.beta));
    }
    terms.total = total;
    return terms;
  };

  nlohmann::json echo{{"kind", "distill"},
                      {"encoder", student.config},
                      {"teacher_layers", teacher.config.num_layers},
                      {"distill", config},
                      {"layer_map", map.entries},
                      {"optimizer", opt},
                      {"cache_teacher", options.cache_teacher}};
  return run_training(std::move(student), opt, data, objective, std::move(echo));
}

// ---------------------------------------------------------------------------
// Grid search

void GridSpec::validate() const {
  if (temperatures.empty() || alphas.empty() || betas.empty() || learning_rates.empty()) {
    throw ConfigError("every grid axis needs at least one value");
  }
}

std::size_t GridSpec::size() const {
  return temperatures.size() * alphas.size() * betas.size() * learning_rates.size();
}

std::vector<GridPoint> enumerate_grid(const GridSpec& grid) {
  grid.validate();
  std::vector<GridPoint> points;
  points.reserve(grid.size());
  for (double t : grid.temperatures)
    for (double a : grid.alphas)
      for (double b : grid.betas)
        for (double lr : grid.learning_rates) points.push_back({t, a, b, lr});
  return points;
}

std::vector<GridRun> grid_search(const GridSpec& grid, const GridTemplate& fixed) {
  if (fixed.teacher == nullptr || fixed.data == nullptr) throw ContractError("grid template needs a teacher and data");
  const auto points = enumerate_grid(grid);
  std::vector<GridRun> runs;
  runs.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    GridRun run;
    run.index = i;
    run.point = points[i];
    DistillConfig dc = fixed.base;
    dc.temperature = points[i].temperature;
    dc.alpha = points[i].alpha;
    dc.beta = points[i].beta;
    OptimizerConfig opt = fixed.opt;
    opt.learning_rate = points[i].learning_rate;
    try {
      run.record = distill(*fixed.teacher, fixed.student_layers, dc, opt, *fixed.data, fixed.options).record;
    } catch (const Error& e) {
      run.error = e.what();
    }
    runs.push_back(std::move(run));
  }
  std::stable_sort(runs.begin(), runs.end(), [](const GridRun& a, const GridRun& b) {
    if (a.record.has_value() != b.record.has_value()) return a.record.has_value();
    if (a.record && a.record->best_dev_accuracy != b.record->best_dev_accuracy)
      return a.record->best_dev_accuracy > b.record->best_dev_accuracy;
    if (a.point.beta != b.point.beta) return a.point.beta < b.point.beta;
    if (a.point.temperature != b.point.temperature) return a.point.temperature < b.point.temperature;
    if (a.point.learning_rate != b.point.learning_rate) return a.point.learning_rate < b.point.learning_rate;
    return a.index < b.index;
  });
  return runs;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

std::string num(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace

void write_metrics_csv(const RunRecord& record, const std::filesystem::path& path) {
  std::ofstream out = open_out(path);
  out << "epoch,split,accuracy,l_ce,l_ds,l_pt,total\n";
  for (const auto& e : record.epochs) {
    const auto& l = e.train_loss;
    out << e.epoch << ",train," << num(e.train_accuracy) << ',' << num(l.l_ce) << ',' << num(l.l_ds) << ','
        << num(l.l_pt) << ',' << num(l.total) << '\n';
    out << e.epoch << ",dev," << num(e.dev_accuracy) << ",,,,\n";
  }
  if (record.test_accuracy) out << record.best_epoch << ",test," << num(*record.test_accuracy) << ",,,,\n";
  if (!out) throw IoError("write failed for " + path.string());
}

RunRecord read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  RunRecord record;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& why) {
    return ParseError(path.string() + ":" + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1) {
      if (line != "epoch,split,accuracy,l_ce,l_ds,l_pt,total") throw fail("unexpected header");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    while (f.size() < 7) f.emplace_back();
    try {
      const std::size_t epoch = std::stoul(f[0]);
      const double acc = std::stod(f[2]);
      if (f[1] == "train") {
        EpochRecord e;
        e.epoch = epoch;
        e.train_accuracy = acc;
        e.train_loss = {std::stod(f[3]), std::stod(f[4]), std::stod(f[5]), std::stod(f[6])};
        record.epochs.push_back(e);
      } else if (f[1] == "dev") {
        if (record.epochs.empty() || record.epochs.back().epoch != epoch) throw fail("dev row without train row");
        record.epochs.back().dev_accuracy = acc;
      } else if (f[1] == "test") {
        record.best_epoch = epoch;
        record.test_accuracy = acc;
      } else {
        throw fail("unknown split '" + f[1] + "'");
      }
    } catch (const std::logic_error&) {
      throw fail("malformed row");
    }
  }
  // The test row, when present, names the selected epoch; otherwise pick the
  // first epoch with the highest dev accuracy, as training does.
  std::size_t best = 0;
  for (const auto& e : record.epochs) {
    if (best == 0 || e.dev_accuracy > record.best_dev_accuracy) {
      best = e.epoch;
      record.best_dev_accuracy = e.dev_accuracy;
    }
  }
  if (!record.test_accuracy) record.best_epoch = best;
  return record;
}

void write_run_json(const RunRecord& record, const std::filesystem::path& path) {
  nlohmann::json j;
  j["config"] = record.config;
  j["selected_epoch"] = record.best_epoch;
  j["best_dev_accuracy"] = record.best_dev_accuracy;
  j["test_accuracy"] = record.test_accuracy ? nlohmann::json(*record.test_accuracy) : nlohmann::json(nullptr);
  j["wall_clock_seconds"] = record.wall_seconds;
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : record.epochs) epochs.push_back({{"epoch", e.epoch}, {"seconds", e.seconds}});
  j["epoch_seconds"] = std::move(epochs);
  std::ofstream out = open_out(path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

void write_grid_csv(std::span<const GridRun> runs, const std::filesystem::path& path) {
  std::ofstream out = open_out(path);
  out << "rank,index,temperature,alpha,beta,learning_rate,best_dev_accuracy,best_epoch,test_accuracy,status\n";
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const GridRun& run = runs[r];
    out << r + 1 << ',' << run.index << ',' << num(run.point.temperature) << ',' << num(run.point.alpha) << ','
        << num(run.point.beta) << ',' << num(run.point.learning_rate) << ',';
    if (run.record) {
      out << num(run.record->best_dev_accuracy) << ',' << run.record->best_epoch << ','
          << (run.record->test_accuracy ? num(*run.record->test_accuracy) : std::string()) << ",ok\n";
    } else {
      std::string msg = run.error;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      out << ",,,failed: " << msg << '\n';
    }
  }
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace pkd
