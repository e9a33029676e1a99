#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "grad_check.hpp"
#include "pkd/distill.hpp"
#include "pkd/encoder.hpp"
#include "pkd/error.hpp"

using namespace pkd;
using pkd::testing::max_relative_error;
using pkd::testing::random_batch;
using pkd::testing::toy_config;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("pkd_test_encoder_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("config validation") {
  EncoderConfig c = toy_config();
  CHECK_NOTHROW(c.validate());
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(build_model(c, 1), ConfigError);
  c = toy_config();
  c.num_classes = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy_config();
  c.dropout_prob = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  nlohmann::json j = toy_config(3);
  CHECK(j.get<EncoderConfig>() == toy_config(3));
}

TEST_CASE("build_model is deterministic per seed") {
  const auto c = toy_config();
  CHECK(build_model(c, 1) == build_model(c, 1));
  CHECK_FALSE(build_model(c, 1) == build_model(c, 2));

  const auto m = build_model(c, 7);
  for (const auto& p : m.parameters()) {
    const bool is_bias = p.name.ends_with(".b") || p.name.ends_with(".bias");
    for (double v : p.tensor->data()) {
      if (is_bias)
        CHECK(v == 0.0);
      else if (p.name.ends_with(".gain"))
        CHECK(v == 1.0);
      else
        CHECK(std::abs(v) <= 0.04);
    }
  }
}

TEST_CASE("parameter accounting") {
  SUBCASE("toy config enumerated by hand") {
    const auto c = toy_config();
    const auto r = count_params(c);
    // (100 + 16 + 2)·8 + 2·8
    CHECK(r.emb_params == 960);
    // per layer: 4·(64+8) + (128+16) + (128+8) + 4·8 = 600
    CHECK(r.trm_params == 1200);
    CHECK(r.pooler_params == 72);
    CHECK(r.classifier_params == 18);
    CHECK(r.total == 2250);
  }

  SUBCASE("count equals enumerated tensors") {
    for (std::size_t layers : {1u, 2u, 5u}) {
      for (std::uint64_t seed : {1u, 9u}) {
        auto c = toy_config(layers);
        c.num_classes = 3;
        const auto m = build_model(c, seed);
        std::size_t n = 0;
        for (const auto& p : m.parameters()) n += p.tensor->numel();
        CHECK(n == count_params(c).total);
        CHECK(m.parameter_count() == n);
      }
    }
  }

  SUBCASE("BERT-Base shape") {
    const auto r = count_params(testing::bert_base());
    CHECK(r.emb_params == 23'837'184);
    CHECK(r.trm_params == 85'054'464);
    CHECK(r.pooler_params == 590'592);
  }

  SUBCASE("transformer count is linear in depth") {
    const auto one = count_params(toy_config(1)).trm_params;
    for (std::size_t layers = 1; layers <= 12; ++layers)
      CHECK(count_params(toy_config(layers)).trm_params == layers * one);
  }
}

TEST_CASE("forward shapes and attention rows") {
  const auto c = toy_config();
  std::mt19937_64 rng(3);
  auto m = build_model(c, 3);
  testing::randomize(m, rng);
  const Batch b = random_batch(c, 4, 10, rng);
  const auto traces = forward(m, b, {.keep_attention = true});
  REQUIRE(traces.size() == 4);
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto& t = traces[i];
    CHECK(t.cls_states.shape() == Shape{c.num_layers, c.hidden_dim});
    CHECK(t.final_logits.shape() == Shape{c.num_classes});
    REQUIRE(t.attention.has_value());
    REQUIRE(t.attention->size() == c.num_layers);
    for (const Tensor& a : *t.attention) {
      REQUIRE(a.shape() == Shape{c.num_heads, b.seq_len, b.seq_len});
      for (std::size_t row = 0; row < c.num_heads * b.seq_len; ++row) {
        double s = 0.0;
        for (std::size_t k = 0; k < b.seq_len; ++k) {
          const double p = a[row * b.seq_len + k];
          if (b.mask[i * b.seq_len + k] == 0) CHECK(p == 0.0);
          s += p;
        }
        CHECK(std::abs(s - 1.0) <= 1e-10);
      }
    }
    CHECK(logits(m, t) == t.final_logits);
  }

  const Tensor batch_logits = predict_logits(m, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < c.num_classes; ++k) CHECK(batch_logits.at(i, k) == traces[i].final_logits[k]);
}

TEST_CASE("forward is padding invariant") {
  const auto c = toy_config(3);
  std::mt19937_64 rng(11);
  auto m = build_model(c, 11);
  testing::randomize(m, rng);
  const Batch b = random_batch(c, 6, 12, rng, 3);
  const auto reference = forward(m, b);

  std::uniform_int_distribution<std::size_t> tok(0, c.vocab_size - 1);
  std::uniform_int_distribution<std::size_t> seg(0, 1);
  for (int trial = 0; trial < 5; ++trial) {
    Batch mutated = b;
    for (std::size_t i = 0; i < b.mask.size(); ++i) {
      if (b.mask[i] != 0) continue;
      mutated.token_ids[i] = tok(rng);
      mutated.segment_ids[i] = seg(rng);
    }
    const auto out = forward(m, mutated);
    for (std::size_t i = 0; i < out.size(); ++i) {
      CHECK(out[i].cls_states == reference[i].cls_states);
      CHECK(out[i].final_logits == reference[i].final_logits);
    }
  }
}

TEST_CASE("forward is repeat-stable") {
  const auto c = toy_config();
  std::mt19937_64 rng(5);
  const auto m = build_model(c, 5);
  const Batch b = random_batch(c, 3, 8, rng);
  const auto a = forward(m, b);
  const auto again = forward(m, b);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].cls_states == again[i].cls_states);
    CHECK(a[i].final_logits == again[i].final_logits);
  }
}

TEST_CASE("zero classifier gives zero logits") {
  const auto c = toy_config();
  std::mt19937_64 rng(2);
  auto m = build_model(c, 2);
  m.classifier_w.fill(0.0);
  const auto traces = forward(m, random_batch(c, 2, 6, rng));
  for (const auto& t : traces) {
    CHECK(t.final_logits == Tensor(Shape{c.num_classes}, 0.0));
    const Tensor p = kernels::softmax_rows(t.final_logits.reshaped({1, c.num_classes}), 1.0);
    CHECK(p[0] == doctest::Approx(0.5));
    CHECK(p[1] == doctest::Approx(0.5));
  }
}

TEST_CASE("input validation") {
  const auto c = toy_config();
  std::mt19937_64 rng(4);
  const auto m = build_model(c, 4);
  Batch b = random_batch(c, 2, 6, rng);

  Batch oov = b;
  oov.token_ids[1] = c.vocab_size;
  CHECK_THROWS_AS(forward(m, oov), InputError);

  const Batch overlong = random_batch(toy_config(), 1, c.max_seq_len + 1, rng);
  CHECK_THROWS_AS(forward(m, overlong), InputError);

  Batch no_cls = b;
  no_cls.mask[0] = 0;
  CHECK_THROWS_AS(forward(m, no_cls), InputError);
}

TEST_CASE("cross-entropy gradient through the encoder matches finite differences") {
  auto c = toy_config();
  c.num_classes = 3;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    std::mt19937_64 rng(seed);
    auto m = build_model(c, seed);
    testing::randomize(m, rng);
    const Batch b = random_batch(c, 3, 7, rng);

    Tape tape;
    const auto bound = bind(tape, m, true);
    const auto acts = encode(bound, b);
    const Gradients grads = tape.backward(loss_ce(acts.logits, b.labels));

    auto params = m.parameters();
    std::vector<Tensor*> ptrs;
    for (auto& p : params) ptrs.push_back(p.tensor);
    const auto numeric = finite_diff_grad(
        [&] { return loss_ce(b.labels, predict_logits(m, b)); }, ptrs, 1e-5);

    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i)
      worst = std::max(worst, max_relative_error(grads.at(i), numeric[i], 1e-6));
    INFO("seed " << seed);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto c = toy_config(3);
  const auto m = build_model(c, 21);
  const auto dir = scratch_dir("roundtrip");
  save_checkpoint(m, dir);
  const auto loaded = load_checkpoint(dir);
  CHECK(loaded == m);

  const auto again = scratch_dir("roundtrip2");
  save_checkpoint(loaded, again);
  CHECK(slurp(dir / "params.bin") == slurp(again / "params.bin"));
  CHECK(slurp(dir / "manifest.json") == slurp(again / "manifest.json"));

  const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  CHECK(manifest["format_version"] == 1);
  CHECK(manifest["tensors"].size() == m.parameters().size());
  CHECK(manifest["tensors"][0]["byte_offset"] == 0);

  SUBCASE("truncated params are rejected") {
    std::filesystem::resize_file(dir / "params.bin", std::filesystem::file_size(dir / "params.bin") - 8);
    CHECK_THROWS_AS(load_checkpoint(dir), ParseError);
  }
  SUBCASE("missing directory") { CHECK_THROWS_AS(load_checkpoint(dir / "nope"), IoError); }
}
