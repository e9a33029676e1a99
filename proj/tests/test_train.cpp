#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "pkd/error.hpp"
#include "pkd/train.hpp"

using namespace pkd;
using pkd::testing::synthetic_task;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Two classes drawn from disjoint token ranges.
TaskData separable_data(std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto make = [&](std::size_t n) {
    std::vector<EncodedExample> out;
    for (std::size_t i = 0; i < n; ++i) {
      EncodedExample e;
      e.label = i % 2;
      const std::size_t base = e.label == 0 ? 4 : 10;
      const std::size_t len = 3 + rng() % 4;
      e.token_ids.push_back(Vocabulary::kCls);
      for (std::size_t t = 0; t < len; ++t) e.token_ids.push_back(base + rng() % 6);
      e.token_ids.push_back(Vocabulary::kSep);
      e.mask.assign(e.token_ids.size(), 1);
      e.token_ids.resize(8, Vocabulary::kPad);
      e.mask.resize(8, 0);
      e.segment_ids.assign(8, 0);
      out.push_back(std::move(e));
    }
    return out;
  };
  TaskData d;
  d.train = make(count);
  d.dev = make(count / 4);
  d.test = make(count / 4);
  return d;
}

EncoderConfig separable_config(std::size_t layers) {
  EncoderConfig c;
  c.vocab_size = 16;
  c.max_seq_len = 8;
  c.hidden_dim = 8;
  c.num_layers = layers;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.num_classes = 2;
  return c;
}

OptimizerConfig quick_opt(std::size_t epochs = 2) {
  OptimizerConfig o;
  o.learning_rate = 3e-3;
  o.batch_size = 16;
  o.epochs = epochs;
  o.seed = 5;
  return o;
}

// A small majority-vote task and a briefly trained 4-layer teacher, shared
// by the distillation tests.
struct Fixture {
  testing::SyntheticTask task = synthetic_task({TaskKind::Majority, 6, 8, 400, 3}, 8, 4);
  EncoderModel teacher = train_teacher(task.config, quick_opt(2), task.data).model;
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

}  // namespace

TEST_CASE("adam") {
  OptimizerConfig opt;
  opt.learning_rate = 0.1;

  SUBCASE("zero gradient leaves parameters and decays moments") {
    Tensor x = Tensor::vector({1.0, -2.0});
    AdamState state;
    Tensor* p[] = {&x};
    adam_step(p, std::vector<Tensor>{Tensor::vector({0.5, 0.5})}, state, opt);
    const Tensor m = state.m[0], v = state.v[0];
    adam_step(p, std::vector<Tensor>{Tensor(Shape{2}, 0.0)}, state, opt);
    CHECK(state.m[0][0] == doctest::Approx(0.9 * m[0]).epsilon(1e-15));
    CHECK(state.v[0][0] == doctest::Approx(0.999 * v[0]).epsilon(1e-15));

    Tensor y = Tensor::vector({1.0, -2.0});
    AdamState fresh;
    Tensor* q[] = {&y};
    adam_step(q, std::vector<Tensor>{Tensor(Shape{2}, 0.0)}, fresh, opt);
    CHECK(y == Tensor::vector({1.0, -2.0}));
    CHECK(fresh.m[0] == Tensor(Shape{2}, 0.0));
  }

  SUBCASE("descent on x^2 and the two-step trace") {
    Tensor x = Tensor::vector({1.0});
    AdamState state;
    Tensor* p[] = {&x};
    // Oracle: the recurrence written out by hand.
    double xr = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 2; ++t) {
      const double g = 2.0 * xr;
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      xr -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
      adam_step(p, std::vector<Tensor>{Tensor::vector({2.0 * x[0]})}, state, opt);
      CHECK(x[0] == doctest::Approx(xr).epsilon(1e-14));
      if (t == 1) CHECK(x[0] < 1.0);
    }
    CHECK(x[0] == doctest::Approx(0.8004122286917927).epsilon(1e-14));
  }

  SUBCASE("gradient clipping rescales to the global norm") {
    OptimizerConfig clipped = opt;
    clipped.grad_clip = 1.0;
    Tensor a = Tensor::vector({0.0}), b = Tensor::vector({0.0});
    AdamState s1, s2;
    Tensor* pa[] = {&a};
    Tensor* pb[] = {&b};
    adam_step(pa, std::vector<Tensor>{Tensor::vector({30.0})}, s1, clipped);
    adam_step(pb, std::vector<Tensor>{Tensor::vector({1.0})}, s2, opt);
    CHECK(s1.m[0][0] == doctest::Approx(s2.m[0][0]).epsilon(1e-15));
  }

  SUBCASE("shape mismatch") {
    Tensor x = Tensor::vector({1.0, 2.0});
    AdamState state;
    Tensor* p[] = {&x};
    CHECK_THROWS_AS(adam_step(p, std::vector<Tensor>{Tensor::vector({1.0})}, state, opt), ContractError);
  }
}

TEST_CASE("optimizer config json") {
  OptimizerConfig o = quick_opt();
  o.grad_clip = 2.5;
  const nlohmann::json j = o;
  const auto back = j.get<OptimizerConfig>();
  CHECK(back.learning_rate == o.learning_rate);
  CHECK(back.batch_size == o.batch_size);
  CHECK(back.grad_clip == o.grad_clip);
  o.batch_size = 0;
  CHECK_THROWS_AS(o.validate(), ConfigError);
}

TEST_CASE("evaluate") {
  auto data = separable_data(100, 1);
  auto model = build_model(separable_config(1), 1);
  model.classifier_w.fill(0.0);
  model.classifier_b = Tensor::vector({1.0, 0.0});

  std::vector<EncodedExample> split;
  for (std::size_t i = 0; i < 60; ++i) split.push_back(data.train[2 * (i % 50)]);
  for (std::size_t i = 0; i < 40; ++i) split.push_back(data.train[2 * (i % 50) + 1]);
  const EvalResult r = evaluate(model, split);
  CHECK(r.accuracy == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(r.total_per_class == std::vector<std::size_t>{60, 40});
  CHECK(r.correct_per_class == std::vector<std::size_t>{60, 0});

  SUBCASE("order invariant") {
    std::mt19937_64 rng(3);
    auto m = build_model(separable_config(1), 2);
    testing::randomize(m, rng);
    const double acc = evaluate(m, data.dev).accuracy;
    auto shuffled = data.dev;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(evaluate(m, shuffled).accuracy == acc);
  }

  SUBCASE("perfect model") {
    const auto trained = train_teacher(separable_config(1), quick_opt(4), data).model;
    std::vector<EncodedExample> correct;
    const auto preds = evaluate(trained, data.train).predictions;
    for (std::size_t i = 0; i < preds.size(); ++i)
      if (preds[i] == data.train[i].label) correct.push_back(data.train[i]);
    REQUIRE_FALSE(correct.empty());
    CHECK(evaluate(trained, correct).accuracy == 1.0);
  }

  CHECK_THROWS_AS(evaluate(model, std::span<const EncodedExample>{}), InputError);
}

TEST_CASE("teacher training") {
  const TaskData data = separable_data(400, 2);

  SUBCASE("learns a separable task within 4 epochs") {
    const auto r = train_teacher(separable_config(1), quick_opt(4), data);
    CHECK(evaluate(r.model, data.train).accuracy >= 0.99);
    REQUIRE(r.record.epochs.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(r.record.epochs[i].epoch == i + 1);
  }

  SUBCASE("zero learning rate changes nothing") {
    OptimizerConfig opt = quick_opt(2);
    opt.learning_rate = 0.0;
    const auto r = train_teacher(separable_config(1), opt, data);
    const auto initial = build_model(separable_config(1), opt.seed);
    CHECK(r.model == initial);
    CHECK(r.record.best_dev_accuracy == evaluate(initial, data.dev).accuracy);
  }

  SUBCASE("deterministic") {
    const auto a = train_teacher(separable_config(1), quick_opt(2), data);
    const auto b = train_teacher(separable_config(1), quick_opt(2), data);
    CHECK(a.model == b.model);
    CHECK(a.record.step_losses == b.record.step_losses);
    CHECK(a.record.best_epoch == b.record.best_epoch);
    for (std::size_t i = 0; i < a.record.epochs.size(); ++i) {
      CHECK(a.record.epochs[i].train_loss.total == b.record.epochs[i].train_loss.total);
      CHECK(a.record.epochs[i].dev_accuracy == b.record.epochs[i].dev_accuracy);
    }
  }

  SUBCASE("divergence is reported") {
    OptimizerConfig opt = quick_opt(1);
    opt.learning_rate = 1e300;
    CHECK_THROWS_AS(train_teacher(separable_config(1), opt, data), DivergenceError);
  }
}

TEST_CASE("best-dev selection") {
  const auto& f = fixture();
  OptimizerConfig opt = quick_opt(4);
  opt.learning_rate = 1e-2;
  const auto r = finetune_student(&f.teacher, 2, f.task.config, opt, f.task.data);
  double best = 0.0;
  for (const auto& e : r.record.epochs) best = std::max(best, e.dev_accuracy);
  CHECK(r.record.best_dev_accuracy == best);
  CHECK(evaluate(r.model, f.task.data.dev).accuracy == best);
  CHECK(r.record.epochs.at(r.record.best_epoch - 1).dev_accuracy == best);
}

TEST_CASE("objective reductions") {
  const auto& f = fixture();
  const OptimizerConfig opt = quick_opt(2);

  SUBCASE("alpha 0, beta 0 equals fine-tuning") {
    DistillConfig dc;
    dc.alpha = 0.0;
    dc.beta = 0.0;
    dc.temperature = 5.0;
    dc.strategy = DistillStrategy::Skip;
    const auto ft = finetune_student(&f.teacher, 2, f.task.config, opt, f.task.data);
    const auto kd = distill(f.teacher, 2, dc, opt, f.task.data);
    REQUIRE(ft.record.step_losses.size() == kd.record.step_losses.size());
    for (std::size_t i = 0; i < ft.record.step_losses.size(); ++i)
      CHECK(std::abs(ft.record.step_losses[i] - kd.record.step_losses[i]) <= 1e-12);
    CHECK(ft.model == kd.model);
  }

  SUBCASE("beta 0 equals vanilla KD") {
    DistillConfig patient;
    patient.alpha = 0.5;
    patient.temperature = 5.0;
    patient.strategy = DistillStrategy::Last;
    DistillConfig vanilla = patient;
    vanilla.strategy = DistillStrategy::None;
    const auto a = distill(f.teacher, 2, patient, opt, f.task.data);
    const auto b = distill(f.teacher, 2, vanilla, opt, f.task.data);
    REQUIRE(a.record.step_losses.size() == b.record.step_losses.size());
    for (std::size_t i = 0; i < a.record.step_losses.size(); ++i)
      CHECK(std::abs(a.record.step_losses[i] - b.record.step_losses[i]) <= 1e-12);

    // The first step is independent of training: recompute the KD objective directly.
    const auto first = batch_iter(f.task.data.train.size(), opt.batch_size, opt.seed, true, 0).front();
    const Batch batch = make_batch(f.task.data.train, first);
    const auto student = init_student_from_teacher(f.teacher, 2);
    const Tensor logits = predict_logits(student, batch);
    const double ce = loss_ce(batch.labels, logits);
    const double ds = loss_ds(soft_labels(f.teacher, batch, 5.0), logits, 5.0, false);
    CHECK(b.record.step_losses[0] == doctest::Approx(kd_loss(0.5, ce, ds) / first.size()).epsilon(1e-12));
  }

  SUBCASE("cached and per-batch teacher outputs agree") {
    DistillConfig dc;
    dc.alpha = 0.7;
    dc.beta = 10.0;
    dc.temperature = 2.0;
    dc.strategy = DistillStrategy::Skip;
    const auto cached = distill(f.teacher, 2, dc, opt, f.task.data, {.cache_teacher = true});
    const auto live = distill(f.teacher, 2, dc, opt, f.task.data, {.cache_teacher = false});
    CHECK(cached.record.step_losses == live.record.step_losses);
    CHECK(cached.model == live.model);
  }
}

TEST_CASE("distillation run invariants") {
  const auto& f = fixture();
  const EncoderModel teacher_before = f.teacher;
  DistillConfig dc;
  dc.alpha = 0.5;
  dc.beta = 20.0;
  dc.temperature = 5.0;
  dc.strategy = DistillStrategy::Skip;
  const auto r = distill(f.teacher, 2, dc, quick_opt(2), f.task.data);
  CHECK(f.teacher == teacher_before);

  for (const auto& e : r.record.epochs) {
    const auto& l = e.train_loss;
    CHECK(std::abs(l.total - ((1 - dc.alpha) * l.l_ce + dc.alpha * l.l_ds + dc.beta * l.l_pt)) <= 1e-10);
    CHECK(l.l_pt > 0.0);
  }
  CHECK(r.record.config["distill"]["strategy"] == "skip");
  CHECK(r.record.config["layer_map"] == nlohmann::json::array({2}));

  SUBCASE("invalid depth surfaces before training") {
    const auto teacher = build_model(testing::toy_config(4), 1);
    CHECK_THROWS_AS(distill(teacher, 3, dc, quick_opt(1), f.task.data), DivisibilityError);
  }
}

TEST_CASE("self-distillation starts at the fixed point") {
  const auto& f = fixture();
  DistillConfig dc;
  dc.alpha = 1.0;
  dc.beta = 1.0;
  dc.strategy = DistillStrategy::Skip;
  const EncoderModel student = init_student_from_teacher(f.teacher, 4);
  const LayerMap map = build_layer_map(4, 4, DistillStrategy::Skip);
  const Batch batch = make_batch(f.task.data.dev, batch_iter(f.task.data.dev.size(), 64, 1, false).front());

  const auto s = forward(student, batch);
  const auto t = forward(f.teacher, batch);
  std::vector<Tensor> s_cls, t_cls;
  for (const auto& tr : s) {
    const double* first = tr.cls_states.raw();
    s_cls.emplace_back(Shape{3, tr.cls_states.cols()}, std::vector<double>(first, first + 3 * tr.cls_states.cols()));
  }
  for (const auto& tr : t) t_cls.push_back(tr.cls_states);
  CHECK(loss_pt(s_cls, t_cls, map, dc.eps_norm) <= 1e-8);

  const Tensor p_t = soft_labels(f.teacher, batch, 1.0);
  double entropy = 0.0;
  for (double p : p_t.data())
    if (p > 0) entropy -= p * std::log(p);
  CHECK(loss_ds(p_t, predict_logits(student, batch), 1.0, false) - entropy <= 1e-6);
}

TEST_CASE("fine-tuning") {
  const auto& f = fixture();
  SUBCASE("full-depth copy with zero epochs reproduces the teacher") {
    OptimizerConfig opt = quick_opt(0);
    const auto r = finetune_student(&f.teacher, 4, f.task.config, opt, f.task.data);
    CHECK(r.model == f.teacher);
    CHECK(r.record.test_accuracy.value() == evaluate(f.teacher, f.task.data.test).accuracy);
    CHECK(r.record.best_dev_accuracy == evaluate(f.teacher, f.task.data.dev).accuracy);
  }
  SUBCASE("without a teacher the student is freshly built") {
    const auto r = finetune_student(nullptr, 2, f.task.config, quick_opt(0), f.task.data);
    auto c = f.task.config;
    c.num_layers = 2;
    CHECK(r.model == build_model(c, quick_opt().seed));
  }
}

TEST_CASE("grid search") {
  const auto& f = fixture();

  SUBCASE("default KD grid has 27 points in T, alpha, lr order") {
    const GridSpec g{{5, 10, 20}, {0.2, 0.5, 0.7}, {0}, {5e-5, 2e-5, 1e-5}};
    const auto points = enumerate_grid(g);
    CHECK(points.size() == 27);
    CHECK(points[0].temperature == 5);
    CHECK(points[0].learning_rate == 5e-5);
    CHECK(points[1].learning_rate == 2e-5);
    CHECK(points[3].alpha == 0.5);
    CHECK(points[26].temperature == 20);
    CHECK_THROWS_AS(enumerate_grid(GridSpec{{}, {0.5}, {0}, {1e-3}}), ConfigError);
  }

  GridTemplate tmpl;
  tmpl.teacher = &f.teacher;
  tmpl.student_layers = 2;
  tmpl.base.strategy = DistillStrategy::Skip;
  tmpl.opt = quick_opt(1);
  tmpl.data = &f.task.data;

  SUBCASE("one point equals a single distill call") {
    const GridSpec g{{5}, {0.5}, {10}, {3e-3}};
    const auto runs = grid_search(g, tmpl);
    REQUIRE(runs.size() == 1);
    DistillConfig dc = tmpl.base;
    dc.temperature = 5;
    dc.alpha = 0.5;
    dc.beta = 10;
    const auto single = distill(f.teacher, 2, dc, tmpl.opt, f.task.data);
    REQUIRE(runs[0].record.has_value());
    CHECK(runs[0].record->step_losses == single.record.step_losses);
    CHECK(runs[0].record->best_dev_accuracy == single.record.best_dev_accuracy);
  }

  SUBCASE("ranking, tie-breaks and failures") {
    // beta 0 with strategy none is valid; beta 5 with none fails validation.
    tmpl.base.strategy = DistillStrategy::None;
    const GridSpec g{{2, 1}, {0.5}, {5, 0}, {0.0}};
    const auto runs = grid_search(g, tmpl);
    REQUIRE(runs.size() == 4);
    // lr 0: both successful runs have the initial student's accuracy, so the
    // tie goes to the lower temperature.
    CHECK(runs[0].record.has_value());
    CHECK(runs[1].record.has_value());
    CHECK(runs[0].point.temperature == 1);
    CHECK(runs[1].point.temperature == 2);
    CHECK_FALSE(runs[2].record.has_value());
    CHECK_FALSE(runs[3].error.empty());
    CHECK(runs[2].point.temperature < runs[3].point.temperature);

    const auto again = grid_search(g, tmpl);
    for (std::size_t i = 0; i < runs.size(); ++i) CHECK(again[i].index == runs[i].index);

    const auto path = std::filesystem::temp_directory_path() / "pkd_test_train_grid.csv";
    write_grid_csv(runs, path);
    const std::string text = slurp(path);
    CHECK(text.starts_with("rank,index,temperature,alpha,beta,learning_rate,best_dev_accuracy"));
    CHECK(std::count(text.begin(), text.end(), '\n') == 5);
  }
}

TEST_CASE("metrics persistence") {
  const TaskData data = separable_data(200, 4);
  const auto dir = std::filesystem::temp_directory_path() / "pkd_test_train_metrics";
  std::filesystem::remove_all(dir);
  const auto a = train_teacher(separable_config(1), quick_opt(3), data);
  const auto b = train_teacher(separable_config(1), quick_opt(3), data);
  write_metrics_csv(a.record, dir / "a" / "metrics.csv");
  write_metrics_csv(b.record, dir / "b" / "metrics.csv");
  CHECK(slurp(dir / "a" / "metrics.csv") == slurp(dir / "b" / "metrics.csv"));

  const RunRecord back = read_metrics_csv(dir / "a" / "metrics.csv");
  REQUIRE(back.epochs.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.epochs[i].train_loss.total == a.record.epochs[i].train_loss.total);
    CHECK(back.epochs[i].dev_accuracy == a.record.epochs[i].dev_accuracy);
  }
  CHECK(back.best_epoch == a.record.best_epoch);
  CHECK(back.test_accuracy == a.record.test_accuracy);

  write_run_json(a.record, dir / "a" / "run.json");
  const auto j = nlohmann::json::parse(slurp(dir / "a" / "run.json"));
  CHECK(j["selected_epoch"] == a.record.best_epoch);
  CHECK(j["config"]["kind"] == "teacher");
  CHECK(j["epoch_seconds"].size() == 3);
}
