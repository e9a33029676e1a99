#include "pkd/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "pkd/bench.hpp"
#include "pkd/data.hpp"
#include "pkd/distill.hpp"
#include "pkd/encoder.hpp"
#include "pkd/error.hpp"
#include "pkd/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pkd {

namespace {

const std::vector<std::string> kSubcommands = {"gen-data", "train-teacher", "finetune", "distill",
                                               "eval",     "grid",          "bench",    "curves"};

// Every flag any subcommand understands; each subcommand registers the ones
// it uses.
struct Flags {
  std::string config, data, dev, test, out, teacher, model, strategy = "skip", task = "parity";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> student_layers, teacher_layers, batch, epochs, seq_len;
  std::optional<double> alpha, beta, temp, lr, grad_clip;
  std::string depths = "12,6,3", temps, alphas, betas, lrs;
  std::size_t repeats = 5, vocab_size = 8, count = 1000;
  bool symmetric = false, no_cache = false;
  std::vector<std::string> runs;
};

json read_json(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("config " + path + ": " + e.what());
  }
}

json section(const json& cfg, const char* key) {
  return cfg.contains(key) ? cfg.at(key) : json::object();
}

template <typename T>
T from_section(const json& cfg, const char* key) {
  try {
    return section(cfg, key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config section '") + key + "': " + e.what());
  }
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* flag) {
  std::vector<T> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    std::istringstream cell(item);
    T v{};
    if (!(cell >> v) || !(cell >> std::ws).eof()) throw ConfigError(std::string(flag) + ": bad value '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(std::string(flag) + " is empty");
  return out;
}

TsvSchema detect_schema(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tabs = std::count(line.begin(), line.end(), '\t');
    if (tabs == 1) return TsvSchema::Single;
    if (tabs == 2) return TsvSchema::Pair;
    throw ParseError(path + ":1: expected 2 or 3 tab-separated columns");
  }
  throw ParseError(path + ": no rows");
}

std::vector<Example> read_split(const std::string& path) {
  if (path.empty()) return {};
  return load_tsv(path, detect_schema(path));
}

std::size_t encoded_length(const Example& e) {
  return 2 + e.segment_a.size() + (e.segment_b ? e.segment_b->size() + 1 : 0);
}

struct Corpus {
  std::vector<Example> train, dev, test;
};

Corpus read_corpus(const Flags& f) {
  if (f.data.empty()) throw ConfigError("--data <tsv> is required");
  if (f.dev.empty()) throw ConfigError("--dev <tsv> is required");
  return {read_split(f.data), read_split(f.dev), read_split(f.test)};
}

TaskData encode_corpus(const Corpus& c, const Vocabulary& vocab, std::size_t max_seq_len) {
  return {encode_all(vocab, c.train, max_seq_len), encode_all(vocab, c.dev, max_seq_len),
          encode_all(vocab, c.test, max_seq_len)};
}

OptimizerConfig optimizer_from(const json& cfg, const Flags& f) {
  OptimizerConfig opt = from_section<OptimizerConfig>(cfg, "optimizer");
  if (f.seed) opt.seed = *f.seed;
  if (f.lr) opt.learning_rate = *f.lr;
  if (f.batch) opt.batch_size = *f.batch;
  if (f.epochs) opt.epochs = *f.epochs;
  if (f.grad_clip) opt.grad_clip = *f.grad_clip;
  opt.validate();
  if (!(opt.learning_rate > 0.0)) throw ConfigError("--lr must be positive");
  if (opt.epochs < 1) throw ConfigError("--epochs must be at least 1");
  return opt;
}

DistillConfig distill_from(const json& cfg, const Flags& f) {
  DistillConfig dc = from_section<DistillConfig>(cfg, "distill");
  if (!section(cfg, "distill").contains("strategy")) dc.strategy = parse_strategy(f.strategy);
  if (f.alpha) dc.alpha = *f.alpha;
  if (f.beta) dc.beta = *f.beta;
  if (f.temp) dc.temperature = *f.temp;
  if (f.symmetric) dc.symmetric_temperature = true;
  return dc;
}

struct Checkpoint {
  EncoderModel model;
  Vocabulary vocab;
};

Checkpoint read_checkpoint(const std::string& dir) {
  return {load_checkpoint(dir), Vocabulary::load(fs::path(dir) / "vocab.txt")};
}

void require_out(const Flags& f) {
  if (f.out.empty()) throw ConfigError("--out <dir> is required");
}

void save_run(const fs::path& dir, const EncoderModel& model, const Vocabulary& vocab, const RunRecord& record) {
  save_checkpoint(model, dir);
  vocab.save(dir / "vocab.txt");
  write_metrics_csv(record, dir / "metrics.csv");
  write_run_json(record, dir / "run.json");
}

void report_run(std::ostream& out, const RunRecord& r, const fs::path& dir) {
  for (const auto& e : r.epochs) {
    out << "epoch " << e.epoch << "  loss " << e.train_loss.total << "  train_acc " << e.train_accuracy
        << "  dev_acc " << e.dev_accuracy << "  (" << std::fixed << std::setprecision(1) << e.seconds << "s)\n"
        << std::defaultfloat << std::setprecision(6);
  }
  out << "selected epoch " << r.best_epoch << ", dev accuracy " << r.best_dev_accuracy;
  if (r.test_accuracy) out << ", test accuracy " << *r.test_accuracy;
  out << "\nwrote " << dir.string() << '\n';
}

// ---------------------------------------------------------------------------

int run_gen_data(const Flags& f, std::ostream& out) {
  require_out(f);
  SyntheticTaskSpec spec;
  spec.kind = parse_task(f.task);
  spec.vocab_size = f.vocab_size;
  spec.seq_len = f.seq_len.value_or(16);
  spec.sample_count = f.count;
  spec.seed = f.seed.value_or(1);
  const DataSplits s = synthetic_generate(spec);
  const TsvSchema schema = spec.kind == TaskKind::PatternPair ? TsvSchema::Pair : TsvSchema::Single;
  const fs::path dir(f.out);
  fs::create_directories(dir);
  write_tsv(dir / "train.tsv", s.train, schema);
  write_tsv(dir / "dev.tsv", s.dev, schema);
  write_tsv(dir / "test.tsv", s.test, schema);
  out << to_string(spec.kind) << ": " << s.train.size() << " train, " << s.dev.size() << " dev, " << s.test.size()
      << " test examples in " << dir.string() << '\n';
  return 0;
}

int run_train_teacher(const Flags& f, std::ostream& out) {
  require_out(f);
  const json cfg = read_json(f.config);
  const OptimizerConfig opt = optimizer_from(cfg, f);
  const Corpus corpus = read_corpus(f);
  EncoderConfig ec = from_section<EncoderConfig>(cfg, "encoder");
  const Vocabulary vocab = build_vocabulary(corpus.train);
  ec.vocab_size = vocab.size();
  if (!section(cfg, "encoder").contains("max_seq_len")) {
    std::size_t longest = 0;
    for (const auto* split : {&corpus.train, &corpus.dev, &corpus.test})
      for (const auto& e : *split) longest = std::max(longest, encoded_length(e));
    ec.max_seq_len = longest;
  }
  ec.validate();
  const TaskData data = encode_corpus(corpus, vocab, ec.max_seq_len);
  const TrainResult r = train_teacher(ec, opt, data);
  save_run(f.out, r.model, vocab, r.record);
  report_run(out, r.record, f.out);
  return 0;
}

int run_finetune(const Flags& f, std::ostream& out) {
  require_out(f);
  if (!f.student_layers) throw ConfigError("--student-layers is required");
  const json cfg = read_json(f.config);
  const OptimizerConfig opt = optimizer_from(cfg, f);
  const Corpus corpus = read_corpus(f);
  std::optional<Checkpoint> teacher;
  EncoderConfig ec;
  Vocabulary vocab;
  if (!f.teacher.empty()) {
    teacher = read_checkpoint(f.teacher);
    if (*f.student_layers > teacher->model.config.num_layers) {
      throw DepthError("student depth " + std::to_string(*f.student_layers) + " exceeds teacher depth " +
                       std::to_string(teacher->model.config.num_layers));
    }
    ec = teacher->model.config;
    vocab = teacher->vocab;
  } else {
    ec = from_section<EncoderConfig>(cfg, "encoder");
    vocab = build_vocabulary(corpus.train);
    ec.vocab_size = vocab.size();
  }
  ec.num_layers = *f.student_layers;
  ec.validate();
  const TaskData data = encode_corpus(corpus, vocab, ec.max_seq_len);
  const TrainResult r = finetune_student(teacher ? &teacher->model : nullptr, *f.student_layers, ec, opt, data);
  save_run(f.out, r.model, vocab, r.record);
  report_run(out, r.record, f.out);
  return 0;
}

// Teacher depth for the pre-flight check: the flag, else the checkpoint
// manifest (read without loading weights).
std::optional<std::size_t> teacher_depth(const Flags& f) {
  if (f.teacher_layers) return f.teacher_layers;
  if (f.teacher.empty()) return std::nullopt;
  const json manifest = read_json((fs::path(f.teacher) / "manifest.json").string());
  if (!manifest.contains("config")) throw ParseError("teacher manifest has no config");
  return manifest.at("config").get<EncoderConfig>().num_layers;
}

void preflight(const Flags& f, const DistillConfig& dc) {
  if (!f.student_layers) throw ConfigError("--student-layers is required");
  dc.validate();
  const auto depth = teacher_depth(f);
  if (depth) build_layer_map(*depth, *f.student_layers, dc.strategy);
  if (f.teacher_layers && !f.teacher.empty()) {
    const auto actual = read_json((fs::path(f.teacher) / "manifest.json").string())["config"]["num_layers"];
    if (actual != *f.teacher_layers)
      throw ConfigError("--teacher-layers " + std::to_string(*f.teacher_layers) + " disagrees with the teacher (" +
                        actual.dump() + " layers)");
  }
  if (f.teacher.empty()) throw ConfigError("--teacher <ckpt-dir> is required");
}

int run_distill(const Flags& f, std::ostream& out) {
  const json cfg = read_json(f.config);
  const DistillConfig dc = distill_from(cfg, f);
  preflight(f, dc);
  require_out(f);
  const OptimizerConfig opt = optimizer_from(cfg, f);
  const Checkpoint teacher = read_checkpoint(f.teacher);
  const TaskData data = encode_corpus(read_corpus(f), teacher.vocab, teacher.model.config.max_seq_len);
  const TrainResult r = distill(teacher.model, *f.student_layers, dc, opt, data, {.cache_teacher = !f.no_cache});
  save_run(f.out, r.model, teacher.vocab, r.record);
  report_run(out, r.record, f.out);
  return 0;
}

int run_eval(const Flags& f, std::ostream& out) {
  const std::string dir = !f.model.empty() ? f.model : f.teacher;
  if (dir.empty()) throw ConfigError("--model <ckpt-dir> is required");
  if (f.data.empty()) throw ConfigError("--data <tsv> is required");
  const Checkpoint ck = read_checkpoint(dir);
  const auto examples = read_split(f.data);
  const auto encoded = encode_all(ck.vocab, examples, ck.model.config.max_seq_len);
  const EvalResult r = evaluate(ck.model, encoded);
  out << "accuracy " << std::setprecision(17) << r.accuracy << std::setprecision(6) << " on " << encoded.size()
      << " examples\n";
  for (std::size_t c = 0; c < r.total_per_class.size(); ++c)
    out << "class " << c << ": " << r.correct_per_class[c] << "/" << r.total_per_class[c] << '\n';
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    json j{{"model", dir},
           {"data", f.data},
           {"accuracy", r.accuracy},
           {"correct_per_class", r.correct_per_class},
           {"total_per_class", r.total_per_class}};
    std::ofstream(fs::path(f.out) / "eval.json") << j.dump(2) << '\n';
  }
  return 0;
}

int run_grid(const Flags& f, std::ostream& out) {
  const json cfg = read_json(f.config);
  DistillConfig base = distill_from(cfg, f);
  const bool patient = base.strategy != DistillStrategy::None;
  GridSpec grid;
  grid.temperatures = f.temps.empty() ? (f.temp ? std::vector<double>{*f.temp} : std::vector<double>{5, 10, 20})
                                      : parse_list<double>(f.temps, "--temps");
  grid.alphas = f.alphas.empty() ? (f.alpha ? std::vector<double>{*f.alpha} : std::vector<double>{0.2, 0.5, 0.7})
                                 : parse_list<double>(f.alphas, "--alphas");
  grid.betas = !f.betas.empty() ? parse_list<double>(f.betas, "--betas")
               : f.beta         ? std::vector<double>{*f.beta}
               : patient        ? std::vector<double>{10, 100, 500, 1000}
                                : std::vector<double>{0};
  grid.learning_rates = f.lrs.empty() ? (f.lr ? std::vector<double>{*f.lr} : std::vector<double>{5e-5, 2e-5, 1e-5})
                                      : parse_list<double>(f.lrs, "--lrs");
  grid.validate();
  for (double b : grid.betas) {
    DistillConfig probe = base;
    probe.beta = b;
    probe.temperature = grid.temperatures.front();
    probe.alpha = grid.alphas.front();
    preflight(f, probe);
  }
  for (double lr : grid.learning_rates)
    if (!(lr > 0.0)) throw ConfigError("grid learning rates must be positive");
  require_out(f);

  Flags opt_flags = f;
  opt_flags.lr.reset();
  const OptimizerConfig opt = optimizer_from(cfg, opt_flags);
  const Checkpoint teacher = read_checkpoint(f.teacher);
  const TaskData data = encode_corpus(read_corpus(f), teacher.vocab, teacher.model.config.max_seq_len);

  GridTemplate tmpl;
  tmpl.teacher = &teacher.model;
  tmpl.student_layers = *f.student_layers;
  tmpl.base = base;
  tmpl.opt = opt;
  tmpl.data = &data;
  tmpl.options.cache_teacher = !f.no_cache;
  out << "running " << grid.size() << " grid points\n";
  const auto runs = grid_search(grid, tmpl);
  const fs::path dir(f.out);
  write_grid_csv(runs, dir / "grid.csv");
  for (const GridRun& run : runs) {
    if (!run.record) continue;
    const fs::path run_dir = dir / ("run_" + std::to_string(run.index));
    write_metrics_csv(*run.record, run_dir / "metrics.csv");
    write_run_json(*run.record, run_dir / "run.json");
  }
  const GridRun& best = runs.front();
  if (best.record) {
    out << "best: T=" << best.point.temperature << " alpha=" << best.point.alpha << " beta=" << best.point.beta
        << " lr=" << best.point.learning_rate << " dev accuracy " << best.record->best_dev_accuracy << '\n';
  } else {
    out << "every grid point failed; see grid.csv\n";
  }
  out << "wrote " << (dir / "grid.csv").string() << '\n';
  return 0;
}

int run_bench(const Flags& f, std::ostream& out) {
  const json cfg = read_json(f.config);
  EncoderConfig ec;
  ec.vocab_size = 1000;
  ec.max_seq_len = 64;
  ec.hidden_dim = 128;
  ec.num_heads = 4;
  ec.ffn_dim = 512;
  ec.num_layers = 1;
  if (cfg.contains("encoder")) {
    json merged = ec;
    merged.update(cfg.at("encoder"));
    ec = merged.get<EncoderConfig>();
  }
  const std::size_t seq_len = f.seq_len.value_or(std::min<std::size_t>(64, ec.max_seq_len));
  const auto depths = parse_list<std::size_t>(f.depths, "--depths");
  for (std::size_t d : depths)
    if (d == 0) throw ConfigError("--depths entries must be positive");
  if (seq_len > ec.max_seq_len) throw ConfigError("--seq-len exceeds the config's max_seq_len");
  const BenchReport report = bench_inference(ec, depths, f.batch.value_or(64), seq_len, f.repeats, f.seed.value_or(1));
  out << "layers  emb_params  trm_params  total_params  seconds  speedup  param_ratio\n";
  for (const BenchRow& r : report.rows) {
    out << std::setw(6) << r.num_layers << std::setw(12) << r.emb_params << std::setw(12) << r.trm_params
        << std::setw(14) << r.total_params << std::fixed << std::setprecision(4) << std::setw(9)
        << r.inference_seconds << std::setprecision(2) << std::setw(9) << r.speedup_vs_deepest << std::setw(13)
        << r.param_ratio_vs_deepest << std::defaultfloat << std::setprecision(6) << '\n';
  }
  if (!f.out.empty()) {
    write_bench_csv(report, fs::path(f.out) / "bench.csv");
    out << "wrote " << (fs::path(f.out) / "bench.csv").string() << '\n';
  }
  return 0;
}

int run_curves(const Flags& f, std::ostream& out) {
  require_out(f);
  if (f.runs.empty()) throw ConfigError("curves needs at least one run directory");
  std::vector<NamedRun> runs;
  for (const std::string& r : f.runs) {
    fs::path p(r);
    if (fs::is_directory(p)) p /= "metrics.csv";
    const fs::path id_path = p.parent_path();
    std::string id = id_path.filename().string();
    if (id.empty()) id = r;
    runs.push_back({id, read_metrics_csv(p)});
  }
  const fs::path path = fs::path(f.out) / "curves.csv";
  emit_curves(runs, path);
  out << "wrote " << path.string() << '\n';
  return 0;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

}  // namespace

int cmd_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (!args.empty() && !args.front().starts_with("-") &&
      std::find(kSubcommands.begin(), kSubcommands.end(), args.front()) == kSubcommands.end()) {
    err << "pkd: unknown subcommand '" << args.front() << "' (expected one of gen-data, train-teacher, finetune, "
        << "distill, eval, grid, bench, curves)\n";
    return 2;
  }

  Flags f;
  CLI::App app{"Patient knowledge distillation for BERT-style encoders", "pkd"};
  app.require_subcommand(1);

  auto add_seed = [&](CLI::App* s) { s->add_option("--seed", f.seed, "Seed for every random choice in the run"); };
  auto add_data = [&](CLI::App* s) {
    s->add_option("--data", f.data, "Training TSV (sentence[, sentence2], label)");
    s->add_option("--dev", f.dev, "Dev TSV used for checkpoint selection");
    s->add_option("--test", f.test, "Optional test TSV, scored with the selected checkpoint");
  };
  auto add_opt = [&](CLI::App* s) {
    s->add_option("--config", f.config, "JSON config with optional encoder, optimizer and distill sections");
    s->add_option("--lr", f.lr, "Adam learning rate");
    s->add_option("--batch", f.batch, "Batch size");
    s->add_option("--epochs", f.epochs, "Training epochs");
    s->add_option("--grad-clip", f.grad_clip, "Clip gradients to this global L2 norm");
    add_seed(s);
    add_data(s);
  };
  auto add_distill = [&](CLI::App* s) {
    s->add_option("--teacher", f.teacher, "Teacher checkpoint directory");
    s->add_option("--teacher-layers", f.teacher_layers, "Expected teacher depth (checked before any work)");
    s->add_option("--student-layers", f.student_layers, "Student depth n");
    s->add_option("--strategy", f.strategy, "Layer matching: skip, last or none (vanilla KD)")
        ->check(CLI::IsMember({"skip", "last", "none"}));
    s->add_option("--alpha", f.alpha, "Weight of the distillation term");
    s->add_option("--beta", f.beta, "Weight of the patient term");
    s->add_option("--temp", f.temp, "Softmax temperature T");
    s->add_flag("--symmetric-temperature", f.symmetric, "Soften the student by T too and scale the term by T^2");
    s->add_flag("--no-teacher-cache", f.no_cache, "Recompute teacher outputs every batch");
  };

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic task as train/dev/test TSV files");
  gen->add_option("--task", f.task, "parity, majority or pattern-pair")
      ->check(CLI::IsMember({"parity", "majority", "pattern-pair"}));
  gen->add_option("--vocab-size", f.vocab_size, "Number of symbols");
  gen->add_option("--seq-len", f.seq_len, "Tokens per sequence (default 16)");
  gen->add_option("--count", f.count, "Total examples, split 80/10/10");
  gen->add_option("--out", f.out, "Output directory");
  add_seed(gen);

  auto* teach = app.add_subcommand("train-teacher", "Train an encoder with cross-entropy");
  add_opt(teach);
  teach->add_option("--out", f.out, "Checkpoint directory to write");

  auto* ft = app.add_subcommand("finetune", "Fine-tune a student on labels only");
  add_opt(ft);
  ft->add_option("--teacher", f.teacher, "Initialize from this checkpoint's first layers");
  ft->add_option("--student-layers", f.student_layers, "Student depth n");
  ft->add_option("--out", f.out, "Checkpoint directory to write");

  auto* dist = app.add_subcommand("distill", "Train a student with (patient) knowledge distillation");
  add_opt(dist);
  add_distill(dist);
  dist->add_option("--out", f.out, "Checkpoint directory to write");

  auto* ev = app.add_subcommand("eval", "Score a checkpoint on a TSV file");
  ev->add_option("--model", f.model, "Checkpoint directory");
  ev->add_option("--data", f.data, "TSV to score");
  ev->add_option("--out", f.out, "Optional directory for eval.json");

  auto* grid = app.add_subcommand("grid", "Grid search over T, alpha, beta and learning rate");
  add_opt(grid);
  add_distill(grid);
  grid->add_option("--temps", f.temps, "Comma-separated temperatures (default 5,10,20)");
  grid->add_option("--alphas", f.alphas, "Comma-separated alphas (default 0.2,0.5,0.7)");
  grid->add_option("--betas", f.betas, "Comma-separated betas (default 10,100,500,1000; 0 for none)");
  grid->add_option("--lrs", f.lrs, "Comma-separated learning rates (default 5e-5,2e-5,1e-5)");
  grid->add_option("--out", f.out, "Directory for grid.csv and per-run metrics");

  auto* bench = app.add_subcommand("bench", "Time inference and count parameters across depths");
  bench->add_option("--config", f.config, "JSON config whose encoder section sets the width");
  bench->add_option("--depths", f.depths, "Comma-separated depths (default 12,6,3)");
  bench->add_option("--repeats", f.repeats, "Timed passes per depth, median reported (at least 3)");
  bench->add_option("--batch", f.batch, "Sequences per pass (default 64)");
  bench->add_option("--seq-len", f.seq_len, "Tokens per sequence (default 64)");
  bench->add_option("--out", f.out, "Optional directory for bench.csv");
  add_seed(bench);

  auto* curves = app.add_subcommand("curves", "Collect per-epoch accuracies of runs into curves.csv");
  curves->add_option("runs", f.runs, "Run directories (or metrics.csv files)");
  curves->add_option("--out", f.out, "Output directory");

  std::string active;
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
    for (auto* s : app.get_subcommands()) active = s->get_name();
    if (active == "gen-data") return run_gen_data(f, out);
    if (active == "train-teacher") return run_train_teacher(f, out);
    if (active == "finetune") return run_finetune(f, out);
    if (active == "distill") return run_distill(f, out);
    if (active == "eval") return run_eval(f, out);
    if (active == "grid") return run_grid(f, out);
    if (active == "bench") return run_bench(f, out);
    if (active == "curves") return run_curves(f, out);
    err << "pkd: no subcommand given\n";
    return 2;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "pkd: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "pkd " << active << ": " << one_line(e.what()) << '\n';
    return 1;
  }
}

}  // namespace pkd
