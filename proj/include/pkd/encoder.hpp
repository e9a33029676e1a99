#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "pkd/autodiff.hpp"
#include "pkd/tensor.hpp"

namespace pkd {

struct EncoderConfig {
  std::size_t vocab_size = 100;
  std::size_t max_seq_len = 16;
  std::size_t hidden_dim = 8;
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t ffn_dim = 16;
  std::size_t num_classes = 2;
  double dropout_prob = 0.0;
  double layer_norm_eps = 1e-12;

  // Throws ConfigError on the first violated invariant.
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

constexpr std::size_t kSegmentTypes = 2;

struct TransformerLayer {
  Tensor query_w, query_b, key_w, key_b, value_w, value_b, attn_out_w, attn_out_b;
  Tensor attn_norm_gain, attn_norm_bias;
  Tensor ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;
  Tensor ffn_norm_gain, ffn_norm_bias;

  bool operator==(const TransformerLayer&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

struct NamedConstTensor {
  std::string name;
  const Tensor* tensor;
};

/// Parameters of a BERT-style encoder with a tanh pooler and a linear
/// classifier. Weight matrices are stored [in × out].
struct EncoderModel {
  EncoderConfig config;
  Tensor token_embedding, position_embedding, segment_embedding;
  Tensor embedding_norm_gain, embedding_norm_bias;
  std::vector<TransformerLayer> layers;
  Tensor pooler_w, pooler_b;
  Tensor classifier_w, classifier_b;

  // Fixed canonical order; index in this list is the tensor's ParamId.
  std::vector<NamedTensor> parameters();
  std::vector<NamedConstTensor> parameters() const;
  std::size_t parameter_count() const;

  bool operator==(const EncoderModel&) const = default;
};

/// Truncated normal (σ = 0.02, cut at 2σ) for matrices and embeddings,
/// zeros for biases, ones for norm gains. Deterministic per seed.
EncoderModel build_model(const EncoderConfig& config, std::uint64_t seed);

struct ParamReport {
  std::size_t emb_params = 0;
  std::size_t trm_params = 0;
  std::size_t pooler_params = 0;
  std::size_t classifier_params = 0;
  std::size_t total = 0;
};

ParamReport count_params(const EncoderConfig& config);

/// Model input: `batch` sequences of `seq_len` ids each, flattened row-major.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> token_ids;
  std::vector<std::size_t> segment_ids;
  std::vector<std::size_t> position_ids;
  std::vector<int> mask;  // 1 = real token, 0 = padding
  std::vector<std::size_t> labels;  // empty when unlabeled
};

// Per-example output of a forward pass.
struct ForwardTrace {
  Tensor cls_states;    // [num_layers × d]; row j is the [CLS] state after layer j+1
  Tensor final_logits;  // [num_classes]
  std::optional<std::vector<Tensor>> attention;  // per layer [heads × seq × seq]
};

struct ForwardOptions {
  bool keep_attention = false;
  std::mt19937_64* dropout_rng = nullptr;  // dropout is active only when set
};

/// Encoder parameters placed on a tape, either trainable or frozen.
struct BoundEncoder {
  const EncoderModel* model = nullptr;
  Tape* tape = nullptr;
  std::vector<Var> params;  // canonical parameter order
};

BoundEncoder bind(Tape& tape, const EncoderModel& model, bool trainable);

/// Tape-level outputs for a whole batch.
struct EncoderActivations {
  std::vector<Var> cls_states;  // one [batch × d] Var per layer
  Var logits;                   // [batch × num_classes]
  std::vector<Tensor> attention;  // per layer [batch, heads, seq, seq] when requested
};

EncoderActivations encode(const BoundEncoder& encoder, const Batch& batch, const ForwardOptions& options = {});

/// Forward without recording; one trace per example.
std::vector<ForwardTrace> forward(const EncoderModel& model, const Batch& batch, const ForwardOptions& options = {});

/// Raw classifier logits recomputed from the last-layer [CLS] state of `trace`.
Tensor logits(const EncoderModel& model, const ForwardTrace& trace);

/// Batch logits [batch × num_classes] without keeping per-layer traces.
Tensor predict_logits(const EncoderModel& model, const Batch& batch);

// Checkpoint directory: manifest.json + params.bin (little-endian binary64).
void save_checkpoint(const EncoderModel& model, const std::filesystem::path& dir);
EncoderModel load_checkpoint(const std::filesystem::path& dir);

}  // namespace pkd
