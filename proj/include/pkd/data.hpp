#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pkd/encoder.hpp"

namespace pkd {

/// Whitespace-token vocabulary. Ids 0..3 are always [PAD], [UNK], [CLS],
/// [SEP]; further ids are dense in insertion order.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kCls = 2;
  static constexpr std::size_t kSep = 3;

  Vocabulary();

  std::size_t add(const std::string& token);
  std::size_t id(const std::string& token) const;  // kUnk when absent
  bool contains(const std::string& token) const;
  const std::string& token(std::size_t id) const;
  std::size_t size() const { return tokens_.size(); }

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

struct Example {
  std::vector<std::string> segment_a;
  std::optional<std::vector<std::string>> segment_b;
  std::size_t label = 0;

  bool operator==(const Example&) const = default;
};

enum class TsvSchema { Single, Pair };

struct EncodedExample {
  std::vector<std::size_t> token_ids;
  std::vector<std::size_t> segment_ids;
  std::vector<int> mask;
  std::size_t label = 0;
  bool truncated = false;
};

std::vector<std::string> split_whitespace(const std::string& text);

Vocabulary build_vocabulary(std::span<const Example> examples);

/// [CLS] a [SEP] (b [SEP]) padded to max_seq_len. Overlong inputs lose tokens
/// from the tail of the longer segment; the special tokens are always kept.
EncodedExample encode(const Vocabulary& vocab, const Example& example, std::size_t max_seq_len);

/// Inverse of encode for in-vocabulary tokens (specials and padding dropped).
Example decode(const Vocabulary& vocab, const EncodedExample& encoded);

/// Tab-separated rows: sentence[, sentence2], integer label. A first row
/// whose label column is not an integer is taken as a header.
std::vector<Example> load_tsv(const std::filesystem::path& path, TsvSchema schema);
void write_tsv(const std::filesystem::path& path, std::span<const Example> examples, TsvSchema schema);

enum class TaskKind { Parity, Majority, PatternPair };

std::string to_string(TaskKind kind);
TaskKind parse_task(const std::string& text);

/// Synthetic sequences over the symbols "0".."vocab_size-1".
///  - parity: label = (number of "1" tokens) mod 2
///  - majority: symbol s belongs to class s mod 2; label = class holding more
///    tokens, ties broken by the class of the first token
///  - pattern-pair: label 1 iff the second segment repeats the first
struct SyntheticTaskSpec {
  TaskKind kind = TaskKind::Parity;
  std::size_t vocab_size = 8;
  std::size_t seq_len = 16;
  std::size_t sample_count = 1000;
  std::uint64_t seed = 1;
};

struct DataSplits {
  std::vector<Example> train, dev, test;
};

/// Deterministic per spec. Labels are generated in exact alternation, no
/// sequence repeats across the whole set, and the 80/10/10 split keeps each
/// part balanced to within one example.
DataSplits synthetic_generate(const SyntheticTaskSpec& spec);

/// Independent re-evaluation of a synthetic labelling rule.
std::size_t synthetic_label(TaskKind kind, const Example& example);

/// Index batches for one epoch: a seeded permutation when `shuffle`, the
/// original order otherwise. The last batch may be partial.
std::vector<std::vector<std::size_t>> batch_iter(std::size_t example_count, std::size_t batch_size,
                                                 std::uint64_t seed, bool shuffle, std::size_t epoch = 0);

Batch make_batch(std::span<const EncodedExample> examples, std::span<const std::size_t> indices);

std::vector<EncodedExample> encode_all(const Vocabulary& vocab, std::span<const Example> examples,
                                       std::size_t max_seq_len);

}  // namespace pkd
