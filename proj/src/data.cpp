#include "pkd/data.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <unordered_set>

#include "pkd/error.hpp"

namespace pkd {

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
  for (const char* special : {"[PAD]", "[UNK]", "[CLS]", "[SEP]"}) add(special);
}

std::size_t Vocabulary::add(const std::string& token) {
  auto [it, inserted] = ids_.try_emplace(token, tokens_.size());
  if (inserted) tokens_.push_back(token);
  return it->second;
}

std::size_t Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(const std::string& token) const { return ids_.contains(token); }

const std::string& Vocabulary::token(std::size_t id) const {
  if (id >= tokens_.size()) throw InputError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[id];
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  const char* specials[] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  if (lines.size() < 4) throw ParseError(path.string() + ": vocabulary lacks the reserved tokens");
  for (std::size_t i = 0; i < 4; ++i) {
    if (lines[i] != specials[i]) throw ParseError(path.string() + ": reserved token " + specials[i] + " not at id " + std::to_string(i));
  }
  Vocabulary v;
  for (std::size_t i = 4; i < lines.size(); ++i) {
    if (v.contains(lines[i])) throw ParseError(path.string() + ": duplicate token '" + lines[i] + "'");
    v.add(lines[i]);
  }
  return v;
}

std::vector<std::string> split_whitespace(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

Vocabulary build_vocabulary(std::span<const Example> examples) {
  Vocabulary v;
  for (const auto& e : examples) {
    for (const auto& t : e.segment_a) v.add(t);
    if (e.segment_b)
      for (const auto& t : *e.segment_b) v.add(t);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Encoding

EncodedExample encode(const Vocabulary& vocab, const Example& example, std::size_t max_seq_len) {
  if (example.segment_a.empty()) throw InputError("example has an empty first segment");
  const bool pair = example.segment_b.has_value();
  const std::size_t specials = pair ? 3 : 2;
  if (max_seq_len <= specials) throw InputError("max_seq_len " + std::to_string(max_seq_len) + " leaves no room for tokens");

  std::size_t len_a = example.segment_a.size();
  std::size_t len_b = pair ? example.segment_b->size() : 0;
  const std::size_t budget = max_seq_len - specials;
  EncodedExample out;
  out.label = example.label;
  if (len_a + len_b > budget) {
    out.truncated = true;
    while (len_a + len_b > budget) {
      if (len_a >= len_b) {
        --len_a;
      } else {
        --len_b;
      }
    }
    std::clog << "warning: truncated example from " << example.segment_a.size() + (pair ? example.segment_b->size() : 0)
              << " to " << len_a + len_b << " tokens\n";
  }

  out.token_ids.reserve(max_seq_len);
  out.token_ids.push_back(Vocabulary::kCls);
  for (std::size_t i = 0; i < len_a; ++i) out.token_ids.push_back(vocab.id(example.segment_a[i]));
  out.token_ids.push_back(Vocabulary::kSep);
  out.segment_ids.assign(out.token_ids.size(), 0);
  if (pair) {
    for (std::size_t i = 0; i < len_b; ++i) out.token_ids.push_back(vocab.id((*example.segment_b)[i]));
    out.token_ids.push_back(Vocabulary::kSep);
    out.segment_ids.resize(out.token_ids.size(), 1);
  }
  out.mask.assign(out.token_ids.size(), 1);
  out.token_ids.resize(max_seq_len, Vocabulary::kPad);
  out.segment_ids.resize(max_seq_len, 0);
  out.mask.resize(max_seq_len, 0);
  return out;
}

Example decode(const Vocabulary& vocab, const EncodedExample& encoded) {
  Example out;
  out.label = encoded.label;
  std::vector<std::string>* current = &out.segment_a;
  bool seen_first_sep = false;
  for (std::size_t i = 0; i < encoded.token_ids.size(); ++i) {
    if (encoded.mask[i] == 0) break;
    const std::size_t id = encoded.token_ids[i];
    if (id == Vocabulary::kCls) continue;
    if (id == Vocabulary::kSep) {
      if (!seen_first_sep && i + 1 < encoded.token_ids.size() && encoded.mask[i + 1] != 0) {
        out.segment_b.emplace();
        current = &*out.segment_b;
      }
      seen_first_sep = true;
      continue;
    }
    current->push_back(vocab.token(id));
  }
  return out;
}

std::vector<EncodedExample> encode_all(const Vocabulary& vocab, std::span<const Example> examples,
                                       std::size_t max_seq_len) {
  std::vector<EncodedExample> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(encode(vocab, e, max_seq_len));
  return out;
}

// ---------------------------------------------------------------------------
// TSV

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return fields;
}

std::optional<std::size_t> parse_label(const std::string& text) {
  std::size_t value = 0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || text.empty()) return std::nullopt;
  return value;
}

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i != 0) out += ' ';
    out += tokens[i];
  }
  return out;
}

}  // namespace

std::vector<Example> load_tsv(const std::filesystem::path& path, TsvSchema schema) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  const std::size_t columns = schema == TsvSchema::Pair ? 3 : 2;
  std::vector<Example> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != columns) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(columns) +
                       " tab-separated columns, found " + std::to_string(fields.size()));
    }
    const auto label = parse_label(fields.back());
    if (!label) {
      if (line_no == 1) continue;  // header
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": label '" + fields.back() +
                       "' is not a non-negative integer");
    }
    Example e;
    e.segment_a = split_whitespace(fields[0]);
    if (schema == TsvSchema::Pair) e.segment_b = split_whitespace(fields[1]);
    e.label = *label;
    if (e.segment_a.empty()) throw ParseError(path.string() + ":" + std::to_string(line_no) + ": empty sentence");
    out.push_back(std::move(e));
  }
  return out;
}

void write_tsv(const std::filesystem::path& path, std::span<const Example> examples, TsvSchema schema) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << (schema == TsvSchema::Pair ? "sentence1\tsentence2\tlabel\n" : "sentence\tlabel\n");
  for (const auto& e : examples) {
    out << join(e.segment_a) << '\t';
    if (schema == TsvSchema::Pair) out << (e.segment_b ? join(*e.segment_b) : std::string()) << '\t';
    out << e.label << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Synthetic tasks

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Parity:
      return "parity";
    case TaskKind::Majority:
      return "majority";
    case TaskKind::PatternPair:
      return "pattern-pair";
  }
  return "parity";
}

TaskKind parse_task(const std::string& text) {
  if (text == "parity") return TaskKind::Parity;
  if (text == "majority") return TaskKind::Majority;
  if (text == "pattern-pair") return TaskKind::PatternPair;
  throw ConfigError("unknown synthetic task '" + text + "'");
}

std::size_t synthetic_label(TaskKind kind, const Example& example) {
  switch (kind) {
    case TaskKind::Parity: {
      std::size_t ones = 0;
      for (const auto& t : example.segment_a) ones += t == "1" ? 1 : 0;
      return ones % 2;
    }
    case TaskKind::Majority: {
      std::size_t counts[2] = {0, 0};
      for (const auto& t : example.segment_a) ++counts[std::stoul(t) % 2];
      if (counts[0] != counts[1]) return counts[1] > counts[0] ? 1 : 0;
      return std::stoul(example.segment_a.front()) % 2;
    }
    case TaskKind::PatternPair:
      return example.segment_b && *example.segment_b == example.segment_a ? 1 : 0;
  }
  return 0;
}

namespace {

void shuffle_in_place(std::vector<std::size_t>& items, std::mt19937_64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = rng() % i;
    std::swap(items[i - 1], items[j]);
  }
}

std::vector<std::string> random_sequence(std::size_t len, std::size_t vocab, std::mt19937_64& rng) {
  std::vector<std::string> seq(len);
  for (auto& t : seq) t = std::to_string(rng() % vocab);
  return seq;
}

std::string key_of(const Example& e) {
  std::string key = join(e.segment_a);
  if (e.segment_b) key += '\t' + join(*e.segment_b);
  return key;
}

}  // namespace

DataSplits synthetic_generate(const SyntheticTaskSpec& spec) {
  if (spec.vocab_size < 2) throw ConfigError("synthetic vocab_size must be at least 2");
  if (spec.seq_len == 0) throw ConfigError("synthetic seq_len must be positive");
  if (spec.sample_count < 10) throw ConfigError("synthetic sample_count must be at least 10");
  const double space = std::pow(static_cast<double>(spec.vocab_size), static_cast<double>(spec.seq_len));
  if (space < 4.0 * static_cast<double>(spec.sample_count)) {
    throw ConfigError("vocab_size^seq_len is too small for " + std::to_string(spec.sample_count) +
                      " distinct sequences");
  }

  std::mt19937_64 rng(spec.seed);
  std::vector<Example> all;
  all.reserve(spec.sample_count);
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < spec.sample_count; ++i) {
    const std::size_t target = i % 2;
    while (true) {
      Example e;
      e.segment_a = random_sequence(spec.seq_len, spec.vocab_size, rng);
      if (spec.kind == TaskKind::PatternPair) {
        e.segment_b = e.segment_a;
        if (target == 0) {
          const std::size_t pos = rng() % spec.seq_len;
          const std::size_t old = std::stoul((*e.segment_b)[pos]);
          (*e.segment_b)[pos] = std::to_string((old + 1 + rng() % (spec.vocab_size - 1)) % spec.vocab_size);
        }
      }
      e.label = synthetic_label(spec.kind, e);
      if (e.label != target) continue;
      if (!seen.insert(key_of(e)).second) continue;
      all.push_back(std::move(e));
      break;
    }
  }

  // Consecutive examples carry opposite labels; shuffling them as pairs keeps
  // every split balanced to within one example.
  std::vector<std::size_t> pairs((all.size() + 1) / 2);
  for (std::size_t i = 0; i < pairs.size(); ++i) pairs[i] = i;
  shuffle_in_place(pairs, rng);
  std::vector<std::size_t> order;
  order.reserve(all.size());
  for (std::size_t p : pairs) {
    order.push_back(2 * p);
    if (2 * p + 1 < all.size()) order.push_back(2 * p + 1);
  }

  const std::size_t held_out = spec.sample_count / 10;
  const std::size_t train_count = spec.sample_count - 2 * held_out;
  DataSplits splits;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& dst = i < train_count ? splits.train : (i < train_count + held_out ? splits.dev : splits.test);
    dst.push_back(all[order[i]]);
  }
  for (auto* split : {&splits.train, &splits.dev, &splits.test}) {
    std::vector<std::size_t> perm(split->size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    shuffle_in_place(perm, rng);
    std::vector<Example> shuffled;
    shuffled.reserve(split->size());
    for (std::size_t i : perm) shuffled.push_back(std::move((*split)[i]));
    *split = std::move(shuffled);
  }
  return splits;
}

// ---------------------------------------------------------------------------
// Batching

std::vector<std::vector<std::size_t>> batch_iter(std::size_t example_count, std::size_t batch_size,
                                                 std::uint64_t seed, bool shuffle, std::size_t epoch) {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  std::vector<std::size_t> order(example_count);
  for (std::size_t i = 0; i < example_count; ++i) order[i] = i;
  if (shuffle) {
    std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ull * (epoch + 1)));
    shuffle_in_place(order, rng);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < example_count; start += batch_size) {
    const std::size_t end = std::min(example_count, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

Batch make_batch(std::span<const EncodedExample> examples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw InputError("make_batch with no examples");
  Batch batch;
  batch.batch_size = indices.size();
  batch.seq_len = examples[indices.front()].token_ids.size();
  const std::size_t n = batch.batch_size * batch.seq_len;
  batch.token_ids.reserve(n);
  batch.segment_ids.reserve(n);
  batch.position_ids.reserve(n);
  batch.mask.reserve(n);
  batch.labels.reserve(indices.size());
  for (std::size_t idx : indices) {
    const EncodedExample& e = examples[idx];
    if (e.token_ids.size() != batch.seq_len) throw InputError("make_batch: examples differ in encoded length");
    batch.token_ids.insert(batch.token_ids.end(), e.token_ids.begin(), e.token_ids.end());
    batch.segment_ids.insert(batch.segment_ids.end(), e.segment_ids.begin(), e.segment_ids.end());
    batch.mask.insert(batch.mask.end(), e.mask.begin(), e.mask.end());
    for (std::size_t p = 0; p < batch.seq_len; ++p) batch.position_ids.push_back(p);
    batch.labels.push_back(e.label);
  }
  return batch;
}

}  // namespace pkd
