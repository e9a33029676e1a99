#include "pkd/encoder.hpp"

#include <cmath>
#include <memory>

#include "pkd/error.hpp"

namespace pkd {

void EncoderConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  positive(hidden_dim, "hidden_dim");
  positive(num_layers, "num_layers");
  positive(num_heads, "num_heads");
  positive(ffn_dim, "ffn_dim");
  if (hidden_dim % num_heads != 0) {
    throw ConfigError("hidden_dim " + std::to_string(hidden_dim) + " is not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (!(dropout_prob >= 0.0 && dropout_prob < 1.0)) throw ConfigError("dropout_prob must lie in [0, 1)");
  if (!(layer_norm_eps > 0.0)) throw ConfigError("layer_norm_eps must be positive");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"hidden_dim", c.hidden_dim},
                     {"num_layers", c.num_layers}, {"num_heads", c.num_heads},     {"ffn_dim", c.ffn_dim},
                     {"num_classes", c.num_classes}, {"dropout_prob", c.dropout_prob},
                     {"layer_norm_eps", c.layer_norm_eps}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  const EncoderConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.num_layers = j.value("num_layers", d.num_layers);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.dropout_prob = j.value("dropout_prob", d.dropout_prob);
  c.layer_norm_eps = j.value("layer_norm_eps", d.layer_norm_eps);
}

namespace {

template <typename Model, typename Entry>
std::vector<Entry> collect(Model& m) {
  std::vector<Entry> out;
  out.reserve(5 + 16 * m.layers.size() + 4);
  out.push_back({"embeddings.token", &m.token_embedding});
  out.push_back({"embeddings.position", &m.position_embedding});
  out.push_back({"embeddings.segment", &m.segment_embedding});
  out.push_back({"embeddings.norm.gain", &m.embedding_norm_gain});
  out.push_back({"embeddings.norm.bias", &m.embedding_norm_bias});
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    auto& l = m.layers[i];
    const std::string p = "layer" + std::to_string(i + 1) + ".";
    out.push_back({p + "attention.query.w", &l.query_w});
    out.push_back({p + "attention.query.b", &l.query_b});
    out.push_back({p + "attention.key.w", &l.key_w});
    out.push_back({p + "attention.key.b", &l.key_b});
    out.push_back({p + "attention.value.w", &l.value_w});
    out.push_back({p + "attention.value.b", &l.value_b});
    out.push_back({p + "attention.output.w", &l.attn_out_w});
    out.push_back({p + "attention.output.b", &l.attn_out_b});
    out.push_back({p + "attention.norm.gain", &l.attn_norm_gain});
    out.push_back({p + "attention.norm.bias", &l.attn_norm_bias});
    out.push_back({p + "ffn.in.w", &l.ffn_in_w});
    out.push_back({p + "ffn.in.b", &l.ffn_in_b});
    out.push_back({p + "ffn.out.w", &l.ffn_out_w});
    out.push_back({p + "ffn.out.b", &l.ffn_out_b});
    out.push_back({p + "ffn.norm.gain", &l.ffn_norm_gain});
    out.push_back({p + "ffn.norm.bias", &l.ffn_norm_bias});
  }
  out.push_back({"pooler.w", &m.pooler_w});
  out.push_back({"pooler.b", &m.pooler_b});
  out.push_back({"classifier.w", &m.classifier_w});
  out.push_back({"classifier.b", &m.classifier_b});
  return out;
}

enum class InitKind { Normal, Zeros, Ones };

InitKind init_kind(const std::string& name) {
  if (name.ends_with(".gain")) return InitKind::Ones;
  if (name.ends_with(".b") || name.ends_with(".bias")) return InitKind::Zeros;
  return InitKind::Normal;
}

}  // namespace

std::vector<NamedTensor> EncoderModel::parameters() { return collect<EncoderModel, NamedTensor>(*this); }

std::vector<NamedConstTensor> EncoderModel::parameters() const {
  return collect<const EncoderModel, NamedConstTensor>(*this);
}

std::size_t EncoderModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor->numel();
  return n;
}

namespace {

// Zero-filled model with every tensor at its config-determined shape.
EncoderModel allocate_model(const EncoderConfig& c) {
  c.validate();
  const std::size_t d = c.hidden_dim, f = c.ffn_dim;
  EncoderModel m;
  m.config = c;
  m.token_embedding = Tensor(Shape{c.vocab_size, d});
  m.position_embedding = Tensor(Shape{c.max_seq_len, d});
  m.segment_embedding = Tensor(Shape{kSegmentTypes, d});
  m.embedding_norm_gain = Tensor(Shape{d});
  m.embedding_norm_bias = Tensor(Shape{d});
  m.layers.resize(c.num_layers);
  for (auto& l : m.layers) {
    for (Tensor* w : {&l.query_w, &l.key_w, &l.value_w, &l.attn_out_w}) *w = Tensor(Shape{d, d});
    for (Tensor* b : {&l.query_b, &l.key_b, &l.value_b, &l.attn_out_b, &l.attn_norm_gain, &l.attn_norm_bias,
                      &l.ffn_out_b, &l.ffn_norm_gain, &l.ffn_norm_bias})
      *b = Tensor(Shape{d});
    l.ffn_in_w = Tensor(Shape{d, f});
    l.ffn_in_b = Tensor(Shape{f});
    l.ffn_out_w = Tensor(Shape{f, d});
  }
  m.pooler_w = Tensor(Shape{d, d});
  m.pooler_b = Tensor(Shape{d});
  m.classifier_w = Tensor(Shape{d, c.num_classes});
  m.classifier_b = Tensor(Shape{c.num_classes});
  return m;
}

}  // namespace

EncoderModel build_model(const EncoderConfig& config, std::uint64_t seed) {
  EncoderModel model = allocate_model(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (auto& [name, tensor] : model.parameters()) {
    switch (init_kind(name)) {
      case InitKind::Ones:
        tensor->fill(1.0);
        break;
      case InitKind::Zeros:
        tensor->fill(0.0);
        break;
      case InitKind::Normal:
        for (double& v : tensor->data()) {
          do {
            v = normal(rng);
          } while (std::abs(v) > 0.04);
        }
        break;
    }
  }
  return model;
}

ParamReport count_params(const EncoderConfig& c) {
  c.validate();
  const std::size_t d = c.hidden_dim, f = c.ffn_dim;
  ParamReport r;
  r.emb_params = (c.vocab_size + c.max_seq_len + kSegmentTypes) * d + 2 * d;
  const std::size_t per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
  r.trm_params = c.num_layers * per_layer;
  r.pooler_params = d * d + d;
  r.classifier_params = d * c.num_classes + c.num_classes;
  r.total = r.emb_params + r.trm_params + r.pooler_params + r.classifier_params;
  return r;
}

// ---------------------------------------------------------------------------
// Forward

BoundEncoder bind(Tape& tape, const EncoderModel& model, bool trainable) {
  BoundEncoder bound{&model, &tape, {}};
  const auto params = model.parameters();
  bound.params.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (trainable) {
      bound.params.push_back(tape.param(*params[i].tensor, i));
    } else {
      // Non-owning alias: frozen weights are read in place for the lifetime
      // of the tape.
      bound.params.push_back(tape.constant(std::shared_ptr<const Tensor>(std::shared_ptr<void>(), params[i].tensor)));
    }
  }
  return bound;
}

namespace {

void validate_batch(const EncoderConfig& c, const Batch& batch) {
  const std::size_t n = batch.batch_size * batch.seq_len;
  if (batch.batch_size == 0 || batch.seq_len == 0) throw InputError("empty batch");
  if (batch.seq_len > c.max_seq_len) {
    throw InputError("sequence length " + std::to_string(batch.seq_len) + " exceeds max_seq_len " +
                     std::to_string(c.max_seq_len));
  }
  if (batch.token_ids.size() != n || batch.segment_ids.size() != n || batch.position_ids.size() != n ||
      batch.mask.size() != n) {
    throw InputError("batch arrays do not match batch_size x seq_len");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (batch.token_ids[i] >= c.vocab_size) {
      throw InputError("token id " + std::to_string(batch.token_ids[i]) + " outside vocabulary of size " +
                       std::to_string(c.vocab_size));
    }
    if (batch.segment_ids[i] >= kSegmentTypes) throw InputError("segment id out of range");
    if (batch.position_ids[i] >= c.max_seq_len) throw InputError("position id out of range");
  }
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    if (batch.mask[b * batch.seq_len] == 0) throw InputError("position 0 must hold the [CLS] token, found padding");
  }
}

Var dropout(const Var& x, double p, std::mt19937_64* rng) {
  if (rng == nullptr || p <= 0.0) return x;
  auto mask = std::make_shared<Tensor>(x.shape());
  std::bernoulli_distribution keep(1.0 - p);
  const double kept = 1.0 / (1.0 - p);
  for (double& m : mask->data()) m = keep(*rng) ? kept : 0.0;
  return ops::mask_scale(x, std::move(mask));
}

Var affine(const Var& x, const Var& w, const Var& b) { return ops::add_bias(ops::matmul(x, w), b); }

}  // namespace

EncoderActivations encode(const BoundEncoder& encoder, const Batch& batch, const ForwardOptions& options) {
  const EncoderModel& model = *encoder.model;
  const EncoderConfig& c = model.config;
  validate_batch(c, batch);
  const auto& p = encoder.params;
  const double eps = c.layer_norm_eps;
  const double drop = c.dropout_prob;

  Var x = ops::add(ops::add(ops::gather_rows(p[0], batch.token_ids), ops::gather_rows(p[1], batch.position_ids)),
                   ops::gather_rows(p[2], batch.segment_ids));
  x = dropout(ops::layer_norm(x, p[3], p[4], eps), drop, options.dropout_rng);

  std::vector<std::size_t> cls_rows(batch.batch_size);
  for (std::size_t b = 0; b < batch.batch_size; ++b) cls_rows[b] = b * batch.seq_len;

  const ops::AttentionShape shape{batch.batch_size, batch.seq_len, c.num_heads};
  EncoderActivations acts;
  acts.cls_states.reserve(c.num_layers);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const Var* w = &p[5 + 16 * l];
    Var q = affine(x, w[0], w[1]);
    Var k = affine(x, w[2], w[3]);
    Var v = affine(x, w[4], w[5]);
    Tensor probs;
    Var attended = ops::attention(q, k, v, batch.mask, shape, options.keep_attention ? &probs : nullptr);
    if (options.keep_attention) acts.attention.push_back(std::move(probs));
    Var projected = dropout(affine(attended, w[6], w[7]), drop, options.dropout_rng);
    Var h = ops::layer_norm(ops::add(x, projected), w[8], w[9], eps);
    Var inner = ops::gelu(affine(h, w[10], w[11]));
    Var ffn = dropout(affine(inner, w[12], w[13]), drop, options.dropout_rng);
    x = ops::layer_norm(ops::add(h, ffn), w[14], w[15], eps);
    acts.cls_states.push_back(ops::gather_rows(x, cls_rows));
  }

  const std::size_t head = 5 + 16 * c.num_layers;
  Var pooled = ops::tanh(affine(acts.cls_states.back(), p[head], p[head + 1]));
  acts.logits = affine(pooled, p[head + 2], p[head + 3]);
  return acts;
}

std::vector<ForwardTrace> forward(const EncoderModel& model, const Batch& batch, const ForwardOptions& options) {
  Tape tape(false);
  const EncoderActivations acts = encode(bind(tape, model, false), batch, options);
  const std::size_t d = model.config.hidden_dim;
  const std::size_t layers = model.config.num_layers;
  const std::size_t classes = model.config.num_classes;
  const std::size_t heads = model.config.num_heads;
  const std::size_t seq = batch.seq_len;

  std::vector<ForwardTrace> traces(batch.batch_size);
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    ForwardTrace& t = traces[b];
    t.cls_states = Tensor(Shape{layers, d});
    for (std::size_t l = 0; l < layers; ++l) {
      const double* src = acts.cls_states[l].value().raw() + b * d;
      std::copy_n(src, d, t.cls_states.raw() + l * d);
    }
    t.final_logits = Tensor(Shape{classes});
    std::copy_n(acts.logits.value().raw() + b * classes, classes, t.final_logits.raw());
    if (options.keep_attention) {
      std::vector<Tensor> per_layer;
      for (const Tensor& probs : acts.attention) {
        Tensor mine(Shape{heads, seq, seq});
        std::copy_n(probs.raw() + b * heads * seq * seq, heads * seq * seq, mine.raw());
        per_layer.push_back(std::move(mine));
      }
      t.attention = std::move(per_layer);
    }
  }
  return traces;
}

Tensor logits(const EncoderModel& model, const ForwardTrace& trace) {
  const std::size_t d = model.config.hidden_dim;
  if (trace.cls_states.rank() != 2 || trace.cls_states.dim(0) != model.config.num_layers ||
      trace.cls_states.dim(1) != d) {
    throw DimensionError("trace cls_states " + shape_string(trace.cls_states.shape()) + " does not fit this model");
  }
  Tape tape(false);
  const BoundEncoder bound = bind(tape, model, false);
  const std::size_t head = 5 + 16 * model.config.num_layers;
  Tensor last(Shape{1, d});
  std::copy_n(trace.cls_states.raw() + (model.config.num_layers - 1) * d, d, last.raw());
  Var pooled = ops::tanh(affine(tape.constant(std::move(last)), bound.params[head], bound.params[head + 1]));
  Var out = affine(pooled, bound.params[head + 2], bound.params[head + 3]);
  return out.value().reshaped(Shape{model.config.num_classes});
}

Tensor predict_logits(const EncoderModel& model, const Batch& batch) {
  Tape tape(false);
  return encode(bind(tape, model, false), batch).logits.value();
}

}  // namespace pkd
