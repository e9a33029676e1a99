#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "pkd/tensor.hpp"

namespace pkd {

using ParamId = std::size_t;
using Gradients = std::map<ParamId, Tensor>;

class Tape;

/// Handle to a tensor value, optionally linked to a node of a Tape.
///
/// Values are immutable and shared: copying a Var is cheap. When the owning
/// tape is not recording, `node` is empty and the value lives only as long as
/// the Vars that reference it.
class Var {
 public:
  Var() = default;

  const Tensor& value() const { return *value_; }
  const Shape& shape() const { return value_->shape(); }
  Tape* tape() const { return tape_; }
  std::optional<std::size_t> node() const { return node_; }
  bool requires_grad() const { return requires_grad_; }
  const std::shared_ptr<const Tensor>& shared_value() const { return value_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::shared_ptr<const Tensor> value, std::optional<std::size_t> node, bool requires_grad)
      : tape_(tape), value_(std::move(value)), node_(node), requires_grad_(requires_grad) {}

  Tape* tape_ = nullptr;
  std::shared_ptr<const Tensor> value_;
  std::optional<std::size_t> node_;
  bool requires_grad_ = false;
};

/// Gradient slots handed to a node's local rule during backward. `input(k)`
/// returns nullptr when input k does not need a gradient.
class BackwardContext {
 public:
  BackwardContext(const Tensor& out_grad, std::span<Tensor*> input_grads)
      : out_grad_(out_grad), input_grads_(input_grads) {}
  const Tensor& out_grad() const { return out_grad_; }
  Tensor* input(std::size_t k) const { return input_grads_[k]; }

 private:
  const Tensor& out_grad_;
  std::span<Tensor*> input_grads_;
};

using BackwardRule = std::function<void(const BackwardContext&)>;

/// Append-only record of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node sequence is already a
/// topological order and backward is a single reverse sweep.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  // Trainable leaf; its gradient is reported under `id`.
  Var param(const Tensor& value, ParamId id);
  // Leaf that never receives a gradient (inputs, frozen teacher weights).
  Var constant(Tensor value);
  Var constant(std::shared_ptr<const Tensor> value);

  // Records an op output. `rule` is kept only when recording and at least one
  // input requires a gradient.
  Var record(Tensor value, std::span<const Var> inputs, BackwardRule rule);

  /// Gradients of the scalar `loss` with respect to every param leaf.
  Gradients backward(const Var& loss);

 private:
  struct Node {
    std::shared_ptr<const Tensor> value;
    std::vector<std::size_t> inputs;
    BackwardRule rule;
    std::optional<ParamId> param;
    bool requires_grad = false;
  };

  std::size_t push(Node node);

  bool recording_;
  std::vector<Node> nodes_;
};

/// Tape-aware operations. Each computes its value eagerly with the kernels in
/// tensor.hpp and records the matching local-gradient rule.
namespace ops {

Var matmul(const Var& a, const Var& b);
// x[m×n] + b[n] broadcast over rows.
Var add_bias(const Var& x, const Var& bias);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
Var sum(const Var& x);
Var square(const Var& x);
Var tanh(const Var& x);
Var gelu(const Var& x);
Var softmax_rows(const Var& x, double temperature);
Var log_softmax_rows(const Var& x, double temperature);
// Population variance with eps inside the square root.
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps);
// Rows scaled by 1 / max(||row||_2, eps).
Var l2_normalize_rows(const Var& x, double eps);
// out[i] = table[ids[i]]; gradients scatter back into the table.
Var gather_rows(const Var& table, std::span<const std::size_t> ids);
// out[i, 0] = x[i, columns[i]].
Var pick(const Var& x, std::span<const std::size_t> columns);
// Elementwise multiply by a fixed 0/scale mask (inverted dropout).
Var mask_scale(const Var& x, std::shared_ptr<const Tensor> mask);

struct AttentionShape {
  std::size_t batch = 1;
  std::size_t seq_len = 1;
  std::size_t heads = 1;
};

/// Scaled dot-product multi-head attention over a [batch*seq × d] layout.
/// `key_mask` has batch*seq entries; zero marks a padding key that receives
/// exactly zero probability. When `probabilities` is non-null it receives
/// the [batch, heads, seq, seq] attention weights.
Var attention(const Var& q, const Var& k, const Var& v, std::span<const int> key_mask, AttentionShape shape,
              Tensor* probabilities = nullptr);

}  // namespace ops

/// Central-difference gradient estimate (f(θ+h) − f(θ−h)) / 2h for every
/// coordinate of every tensor in `params`. `f` must be deterministic; the
/// parameters are restored before returning.
std::vector<Tensor> finite_diff_grad(const std::function<double()>& f, std::span<Tensor* const> params, double h);

}  // namespace pkd
