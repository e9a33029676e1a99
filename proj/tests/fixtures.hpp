#pragma once

#include <random>
#include <vector>

#include "pkd/data.hpp"
#include "pkd/encoder.hpp"
#include "pkd/train.hpp"

namespace pkd::testing {

inline EncoderConfig toy_config(std::size_t layers = 2) {
  EncoderConfig c;
  c.vocab_size = 100;
  c.max_seq_len = 16;
  c.hidden_dim = 8;
  c.num_layers = layers;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.num_classes = 2;
  return c;
}

inline EncoderConfig bert_base(std::size_t layers = 12) {
  EncoderConfig c;
  c.vocab_size = 30522;
  c.max_seq_len = 512;
  c.hidden_dim = 768;
  c.num_layers = layers;
  c.num_heads = 12;
  c.ffn_dim = 3072;
  c.num_classes = 2;
  return c;
}

// Init-scale weights give gradients too small to test; spread them out.
inline void randomize(EncoderModel& model, std::mt19937_64& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& p : model.parameters())
    for (double& v : p.tensor->data()) v = u(rng);
}

// Sequences of random lengths in [min_len, seq_len]; the tail is padding.
inline Batch random_batch(const EncoderConfig& c, std::size_t batch_size, std::size_t seq_len, std::mt19937_64& rng,
                          std::size_t min_len = 2) {
  Batch b;
  b.batch_size = batch_size;
  b.seq_len = seq_len;
  std::uniform_int_distribution<std::size_t> tok(4, c.vocab_size - 1);
  std::uniform_int_distribution<std::size_t> len(std::min(min_len, seq_len), seq_len);
  std::uniform_int_distribution<std::size_t> cls(0, c.num_classes - 1);
  for (std::size_t i = 0; i < batch_size; ++i) {
    const std::size_t n = len(rng);
    const std::size_t split = n / 2;
    for (std::size_t t = 0; t < seq_len; ++t) {
      const bool real = t < n;
      b.token_ids.push_back(t == 0 ? 2 : real ? tok(rng) : 0);
      b.segment_ids.push_back(real && t > split ? 1 : 0);
      b.position_ids.push_back(t);
      b.mask.push_back(real ? 1 : 0);
    }
    b.labels.push_back(cls(rng));
  }
  return b;
}

struct SyntheticTask {
  TaskData data;
  EncoderConfig config;  // sized to the task's vocabulary and length
};

inline SyntheticTask synthetic_task(const SyntheticTaskSpec& spec, std::size_t hidden, std::size_t layers) {
  const DataSplits splits = synthetic_generate(spec);
  const Vocabulary vocab = build_vocabulary(splits.train);
  const std::size_t max_len = spec.kind == TaskKind::PatternPair ? 2 * spec.seq_len + 3 : spec.seq_len + 2;
  SyntheticTask task;
  task.data.train = encode_all(vocab, splits.train, max_len);
  task.data.dev = encode_all(vocab, splits.dev, max_len);
  task.data.test = encode_all(vocab, splits.test, max_len);
  task.config.vocab_size = vocab.size();
  task.config.max_seq_len = max_len;
  task.config.hidden_dim = hidden;
  task.config.num_layers = layers;
  task.config.num_heads = 2;
  task.config.ffn_dim = 2 * hidden;
  task.config.num_classes = 2;
  return task;
}

}  // namespace pkd::testing
