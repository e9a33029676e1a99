#include "pkd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pkd/error.hpp"

namespace pkd {

namespace {

constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

void add_into(Tensor& dst, const Tensor& src) {
  double* __restrict d = dst.raw();
  const double* __restrict s = src.raw();
  const std::size_t n = dst.numel();
  for (std::size_t i = 0; i < n; ++i) d[i] += s[i];
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes differ, " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

Tape& tape_of(std::initializer_list<const Var*> vars) {
  Tape* tape = nullptr;
  for (const Var* v : vars) {
    if (v->tape() == nullptr) throw ContractError("operation on an unbound Var");
    if (tape != nullptr && v->tape() != tape) throw ContractError("operands belong to different tapes");
    tape = v->tape();
  }
  return *tape;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

std::size_t Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

Var Tape::param(const Tensor& value, ParamId id) {
  auto shared = std::make_shared<const Tensor>(value);
  if (!recording_) return Var(this, std::move(shared), std::nullopt, false);
  Node node;
  node.value = shared;
  node.param = id;
  node.requires_grad = true;
  const std::size_t index = push(std::move(node));
  return Var(this, std::move(shared), index, true);
}

Var Tape::constant(Tensor value) { return constant(std::make_shared<const Tensor>(std::move(value))); }

Var Tape::constant(std::shared_ptr<const Tensor> value) { return Var(this, std::move(value), std::nullopt, false); }

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardRule rule) {
  auto shared = std::make_shared<const Tensor>(std::move(value));
  const bool needs_grad =
      recording_ && std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
  if (!needs_grad) return Var(this, std::move(shared), std::nullopt, false);
  Node node;
  node.value = shared;
  node.inputs.reserve(inputs.size());
  for (const Var& in : inputs) node.inputs.push_back(in.requires_grad() ? *in.node() : kNoNode);
  node.rule = std::move(rule);
  node.requires_grad = true;
  const std::size_t index = push(std::move(node));
  return Var(this, std::move(shared), index, true);
}

Gradients Tape::backward(const Var& loss) {
  if (loss.value().numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  if (loss.tape() != this) throw ContractError("loss was not produced by this tape");

  std::vector<std::optional<Tensor>> grads(nodes_.size());
  if (loss.node()) grads[*loss.node()] = Tensor(loss.shape(), 1.0);

  Gradients result;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& node = nodes_[i];
    if (node.param) {
      Tensor g = grads[i] ? std::move(*grads[i]) : Tensor(node.value->shape());
      auto [it, inserted] = result.try_emplace(*node.param, std::move(g));
      if (!inserted) add_into(it->second, g);
      continue;
    }
    if (!grads[i] || !node.rule) continue;

    std::vector<Tensor*> slots(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t in = node.inputs[k];
      if (in == kNoNode) continue;
      if (!grads[in]) grads[in] = Tensor(nodes_[in].value->shape());
      slots[k] = &*grads[in];
    }
    node.rule(BackwardContext(*grads[i], slots));
    grads[i].reset();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Ops

namespace ops {

Var matmul(const Var& a, const Var& b) {
  Tape& tape = tape_of({&a, &b});
  auto av = a.shared_value();
  auto bv = b.shared_value();
  Tensor out = kernels::matmul(*av, *bv);
  const Var inputs[] = {a, b};
  return tape.record(std::move(out), inputs, [av, bv](const BackwardContext& ctx) {
    if (Tensor* ga = ctx.input(0)) add_into(*ga, kernels::matmul_nt(ctx.out_grad(), *bv));
    if (Tensor* gb = ctx.input(1)) add_into(*gb, kernels::matmul_tn(*av, ctx.out_grad()));
  });
}

Var add_bias(const Var& x, const Var& bias) {
  Tape& tape = tape_of({&x, &bias});
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
    throw DimensionError("add_bias: cannot add " + shape_string(bv.shape()) + " to rows of " +
                         shape_string(xv.shape()));
  }
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor out = xv;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.raw()[i * n + j] += bv[j];
  const Var inputs[] = {x, bias};
  return tape.record(std::move(out), inputs, [m, n](const BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    if (Tensor* gx = ctx.input(0)) add_into(*gx, g);
    if (Tensor* gb = ctx.input(1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
    }
  });
}

Var add(const Var& a, const Var& b) {
  Tape& tape = tape_of({&a, &b});
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  add_into(out, b.value());
  const Var inputs[] = {a, b};
  return tape.record(std::move(out), inputs, [](const BackwardContext& ctx) {
    if (Tensor* ga = ctx.input(0)) add_into(*ga, ctx.out_grad());
    if (Tensor* gb = ctx.input(1)) add_into(*gb, ctx.out_grad());
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& tape = tape_of({&a, &b});
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  const Var inputs[] = {a, b};
  return tape.record(std::move(out), inputs, [](const BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    if (Tensor* ga = ctx.input(0)) add_into(*ga, g);
    if (Tensor* gb = ctx.input(1))
      for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] -= g[i];
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& tape = tape_of({&a, &b});
  require_same_shape(a, b, "mul");
  auto av = a.shared_value();
  auto bv = b.shared_value();
  Tensor out = *av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= (*bv)[i];
  const Var inputs[] = {a, b};
  return tape.record(std::move(out), inputs, [av, bv](const BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    if (Tensor* ga = ctx.input(0))
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * (*bv)[i];
    if (Tensor* gb = ctx.input(1))
      for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * (*av)[i];
  });
}

Var scale(const Var& x, double factor) {
  Tape& tape = tape_of({&x});
  Tensor out = x.value();
  for (double& v : out.data()) v *= factor;
  const Var inputs[] = {x};
  return tape.record(std::move(out), inputs, [factor](const BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* gx = ctx.input(0);
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += factor * g[i];
  });
}

Var sum(const Var& x) {
  Tape& tape = tape_of({&x});
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  const Var inputs[] = {x};
  return tape.record(Tensor::scalar(total), inputs, [](const BackwardContext& ctx) {
    const double g = ctx.out_grad().item();
    Tensor* gx = ctx.input(0);
    for (double& v : gx->data()) v += g;
  });
}

Var square(const Var& x) {
  Tape& tape = tape_of({&x});
  auto xv = x.shared_value();
  Tensor out = *xv;
  for (double& v : out.data()) v *= v;
  const Var inputs[] = {x};
  return tape.record(std::move(out), inputs, [xv](const BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* gx = ctx.input(0);
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += 2.0 * (*xv)[i] * g[i];
  });
}

Var tanh(const Var& x) {
  Tape& tape = tape_of({&x});
  Tensor out = x.value();
  for (double& v : out.data()) v = std::tanh(v);
  auto yv = std::make_shared<const Tensor>(out);
  const Var inputs[] = {x};
  return tape.record(std::move(out), inputs, [yv](const BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* gx = ctx.input(0);
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * (1.0 - (*yv)[i] * (*yv)[i]);
  });
}

Var gelu(const Var& x) {
  Tape& tape = tape_of({&x});
  auto xv = x.shared_value();
  Tensor out = *xv;
  for (double& v : out.data()) v = kernels::gelu(v);
  const Var inputs[] = {x};
  return tape.record(std::move(out), inputs, [xv](const BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* gx = ctx.input(0);
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * kernels::gelu_derivative((*xv)[i]);
  });
}

Var softmax_rows(const Var& x, double temperature) {
  Tape& tape = tape_of({&x});
  auto yv = std::make_shared<const Tensor>(kernels::softmax_rows(x.value(), temperature));
  const std::size_t m = yv->rows(), c = yv->cols();
  const Var inputs[] = {x};
  return tape.record(*yv, inputs, [yv, m, c, temperature](const BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* gx = ctx.input(0);
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = yv->raw() + i * c;
      const double* gy = g.raw() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) gx->raw()[i * c + j] += y[j] * (gy[j] - dot) / temperature;
    }
  });
}

Var log_softmax_rows(const Var& x, double temperature) {
  Tape& tape = tape_of({&x});
  auto yv = std::make_shared<const Tensor>(kernels::log_softmax_rows(x.value(), temperature));
  const std::size_t m = yv->rows(), c = yv->cols();
  const Var inputs[] = {x};
  return tape.record(*yv, inputs, [yv, m, c, temperature](const BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* gx = ctx.input(0);
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = yv->raw() + i * c;
      const double* gy = g.raw() + i * c;
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) total += gy[j];
      for (std::size_t j = 0; j < c; ++j) gx->raw()[i * c + j] += (gy[j] - std::exp(y[j]) * total) / temperature;
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  Tape& tape = tape_of({&x, &gain, &bias});
  if (!(eps > 0.0)) throw DomainError("layer_norm eps must be positive");
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), d = xv.cols();
  if (gain.value().numel() != d || bias.value().numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" + shape_string(bias.shape()) +
                         " do not match row width " + std::to_string(d));
  }
  auto normalized = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(m);
  Tensor out(xv.shape());
  const double* g = gain.value().raw();
  const double* b = bias.value().raw();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.raw() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = rstd;
    for (std::size_t j = 0; j < d; ++j) {
      const double xhat = (row[j] - mean) * rstd;
      normalized->raw()[i * d + j] = xhat;
      out.raw()[i * d + j] = xhat * g[j] + b[j];
    }
  }
  auto gv = gain.shared_value();
  const Var inputs[] = {x, gain, bias};
  return tape.record(std::move(out), inputs, [normalized, inv_std, gv, m, d](const BackwardContext& ctx) {
    const Tensor& gy = ctx.out_grad();
    Tensor* gx = ctx.input(0);
    Tensor* gg = ctx.input(1);
    Tensor* gb = ctx.input(2);
    std::vector<double> dxhat(d);
    for (std::size_t i = 0; i < m; ++i) {
      const double* dy = gy.raw() + i * d;
      const double* xhat = normalized->raw() + i * d;
      if (gg)
        for (std::size_t j = 0; j < d; ++j) (*gg)[j] += dy[j] * xhat[j];
      if (gb)
        for (std::size_t j = 0; j < d; ++j) (*gb)[j] += dy[j];
      if (!gx) continue;
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        dxhat[j] = dy[j] * (*gv)[j];
        mean_dxhat += dxhat[j];
        mean_dxhat_xhat += dxhat[j] * xhat[j];
      }
      mean_dxhat /= static_cast<double>(d);
      mean_dxhat_xhat /= static_cast<double>(d);
      const double rstd = (*inv_std)[i];
      for (std::size_t j = 0; j < d; ++j)
        gx->raw()[i * d + j] += rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
    }
  });
}

Var l2_normalize_rows(const Var& x, double eps) {
  Tape& tape = tape_of({&x});
  if (!(eps > 0.0)) throw DomainError("l2_normalize_rows eps must be positive");
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), d = xv.cols();
  Tensor out(xv.shape());
  auto norms = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.raw() + i * d;
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += row[j] * row[j];
    const double norm = std::sqrt(sq);
    (*norms)[i] = norm;
    const double denom = std::max(norm, eps);
    for (std::size_t j = 0; j < d; ++j) out.raw()[i * d + j] = row[j] / denom;
  }
  auto yv = std::make_shared<const Tensor>(out);
  const Var inputs[] = {x};
  return tape.record(std::move(out), inputs, [yv, norms, m, d, eps](const BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* gx = ctx.input(0);
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = yv->raw() + i * d;
      const double* gy = g.raw() + i * d;
      const double norm = (*norms)[i];
      if (norm > eps) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += y[j] * gy[j];
        for (std::size_t j = 0; j < d; ++j) gx->raw()[i * d + j] += (gy[j] - y[j] * dot) / norm;
      } else {
        for (std::size_t j = 0; j < d; ++j) gx->raw()[i * d + j] += gy[j] / eps;
      }
    }
  });
}

Var gather_rows(const Var& table, std::span<const std::size_t> ids) {
  Tape& tape = tape_of({&table});
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw DimensionError("gather_rows expects a matrix, got " + shape_string(tv.shape()));
  if (ids.empty()) throw DimensionError("gather_rows with no ids");
  const std::size_t rows = tv.dim(0), d = tv.dim(1);
  Tensor out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) {
      throw DimensionError("gather_rows: row " + std::to_string(ids[i]) + " outside table " + shape_string(tv.shape()));
    }
    std::copy_n(tv.raw() + ids[i] * d, d, out.raw() + i * d);
  }
  std::vector<std::size_t> index(ids.begin(), ids.end());
  const Var inputs[] = {table};
  return tape.record(std::move(out), inputs, [index = std::move(index), d](const BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* gt = ctx.input(0);
    for (std::size_t i = 0; i < index.size(); ++i) {
      double* dst = gt->raw() + index[i] * d;
      const double* src = g.raw() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

Var pick(const Var& x, std::span<const std::size_t> columns) {
  Tape& tape = tape_of({&x});
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), c = xv.cols();
  if (columns.size() != m) {
    throw DimensionError("pick: " + std::to_string(columns.size()) + " columns for " + std::to_string(m) + " rows");
  }
  Tensor out(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    if (columns[i] >= c) throw DimensionError("pick: column " + std::to_string(columns[i]) + " out of range");
    out[i] = xv[i * c + columns[i]];
  }
  std::vector<std::size_t> cols(columns.begin(), columns.end());
  const Var inputs[] = {x};
  return tape.record(std::move(out), inputs, [cols = std::move(cols), c](const BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* gx = ctx.input(0);
    for (std::size_t i = 0; i < cols.size(); ++i) (*gx)[i * c + cols[i]] += g[i];
  });
}

Var mask_scale(const Var& x, std::shared_ptr<const Tensor> mask) {
  Tape& tape = tape_of({&x});
  if (mask->shape() != x.shape()) throw DimensionError("mask_scale: mask shape differs from input");
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= (*mask)[i];
  const Var inputs[] = {x};
  return tape.record(std::move(out), inputs, [mask](const BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor* gx = ctx.input(0);
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * (*mask)[i];
  });
}

Var attention(const Var& q, const Var& k, const Var& v, std::span<const int> key_mask, AttentionShape shape,
              Tensor* probabilities) {
  Tape& tape = tape_of({&q, &k, &v});
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const std::size_t batch = shape.batch, seq = shape.seq_len, heads = shape.heads;
  const Tensor& qv = q.value();
  if (qv.rank() != 2 || qv.dim(0) != batch * seq) {
    throw DimensionError("attention: expected " + std::to_string(batch * seq) + " rows, got " +
                         shape_string(qv.shape()));
  }
  const std::size_t d = qv.dim(1);
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: width not divisible by head count");
  if (key_mask.size() != batch * seq) throw DimensionError("attention: key mask length mismatch");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  auto qs = q.shared_value();
  auto ks = k.shared_value();
  auto vs = v.shared_value();
  auto probs = std::make_shared<Tensor>(Shape{batch, heads, seq, seq});
  Tensor out(Shape{batch * seq, d});
  std::vector<double> scores(seq);

  for (std::size_t b = 0; b < batch; ++b) {
    const int* mask = key_mask.data() + b * seq;
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = qs->raw() + (b * seq + i) * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          if (mask[j] == 0) continue;
          const double* kj = ks->raw() + (b * seq + j) * d + h * dh;
          double dot = 0.0;
          for (std::size_t t = 0; t < dh; ++t) dot += qi[t] * kj[t];
          scores[j] = dot * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        double* p = probs->raw() + ((b * heads + h) * seq + i) * seq;
        double total = 0.0;
        for (std::size_t j = 0; j < seq; ++j) {
          if (mask[j] == 0) continue;
          p[j] = std::exp(scores[j] - mx);
          total += p[j];
        }
        double* oi = out.raw() + (b * seq + i) * d + h * dh;
        for (std::size_t j = 0; j < seq; ++j) {
          if (mask[j] == 0) continue;
          p[j] /= total;
          const double* vj = vs->raw() + (b * seq + j) * d + h * dh;
          for (std::size_t t = 0; t < dh; ++t) oi[t] += p[j] * vj[t];
        }
      }
    }
  }
  if (probabilities != nullptr) *probabilities = *probs;

  std::vector<int> mask_copy(key_mask.begin(), key_mask.end());
  const Var inputs[] = {q, k, v};
  return tape.record(std::move(out), inputs,
                     [qs, ks, vs, probs, mask_copy = std::move(mask_copy), batch, seq, heads, d, dh,
                      inv_sqrt](const BackwardContext& ctx) {
                       const Tensor& go = ctx.out_grad();
                       Tensor* gq = ctx.input(0);
                       Tensor* gk = ctx.input(1);
                       Tensor* gv = ctx.input(2);
                       std::vector<double> dp(seq);
                       for (std::size_t b = 0; b < batch; ++b) {
                         const int* mask = mask_copy.data() + b * seq;
                         for (std::size_t h = 0; h < heads; ++h) {
                           for (std::size_t i = 0; i < seq; ++i) {
                             const double* p = probs->raw() + ((b * heads + h) * seq + i) * seq;
                             const double* goi = go.raw() + (b * seq + i) * d + h * dh;
                             double weighted = 0.0;
                             for (std::size_t j = 0; j < seq; ++j) {
                               if (mask[j] == 0) continue;
                               const double* vj = vs->raw() + (b * seq + j) * d + h * dh;
                               double dot = 0.0;
                               for (std::size_t t = 0; t < dh; ++t) dot += goi[t] * vj[t];
                               dp[j] = dot;
                               weighted += p[j] * dot;
                               if (gv) {
                                 double* gvj = gv->raw() + (b * seq + j) * d + h * dh;
                                 for (std::size_t t = 0; t < dh; ++t) gvj[t] += p[j] * goi[t];
                               }
                             }
                             const double* qi = qs->raw() + (b * seq + i) * d + h * dh;
                             double* gqi = gq ? gq->raw() + (b * seq + i) * d + h * dh : nullptr;
                             for (std::size_t j = 0; j < seq; ++j) {
                               if (mask[j] == 0) continue;
                               const double ds = p[j] * (dp[j] - weighted) * inv_sqrt;
                               const double* kj = ks->raw() + (b * seq + j) * d + h * dh;
                               if (gqi)
                                 for (std::size_t t = 0; t < dh; ++t) gqi[t] += ds * kj[t];
                               if (gk) {
                                 double* gkj = gk->raw() + (b * seq + j) * d + h * dh;
                                 for (std::size_t t = 0; t < dh; ++t) gkj[t] += ds * qi[t];
                               }
                             }
                           }
                         }
                       }
                     });
}

}  // namespace ops

std::vector<Tensor> finite_diff_grad(const std::function<double()>& f, std::span<Tensor* const> params, double h) {
  if (!(h > 0.0)) throw DomainError("finite difference step must be positive");
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (Tensor* p : params) {
    Tensor g(p->shape());
    for (std::size_t i = 0; i < p->numel(); ++i) {
      const double saved = (*p)[i];
      (*p)[i] = saved + h;
      const double up = f();
      (*p)[i] = saved - h;
      const double down = f();
      (*p)[i] = saved;
      g[i] = (up - down) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace pkd
