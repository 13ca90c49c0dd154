#include "petformer/layers.hpp"

#include <cmath>

namespace petformer::nn {

namespace {

Tensor init_uniform(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = uniform(rng, -bound, bound);
  return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace

// ---------------------------------------------------------------------------

Linear::Linear(std::size_t d_in, std::size_t d_out, Rng& rng) : d_in_(d_in), d_out_(d_out) {
  if (d_in == 0 || d_out == 0) throw ConfigError("Linear: zero-width layer");
  weight = init_uniform({d_in, d_out}, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
  bias = Tensor::zeros({d_out}, true);
}

Tensor Linear::forward(const Tensor& x) const {
  if (x.rank() == 0 || x.shape().back() != d_in_) {
    throw DimensionError("Linear: expected trailing extent " + std::to_string(d_in_) + ", got input " +
                         shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = d_out_;
  Tensor rows = reshape(x, {x.numel() / d_in_, d_in_});
  return reshape(matmul(rows, weight) + bias, std::move(out_shape));
}

void Linear::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

// ---------------------------------------------------------------------------

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: probability must be in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> m(x.numel());
  for (auto& v : m) v = uniform01(rng) < p ? 0.0 : keep_scale;
  return mul(x, Tensor(x.shape(), std::move(m)));
}

// ---------------------------------------------------------------------------

BatchNorm::BatchNorm(std::size_t features, double momentum_, double eps_)
    : gamma(Tensor::full({features}, 1.0, true)),
      beta(Tensor::zeros({features}, true)),
      running_mean(Tensor::zeros({features})),
      running_var(Tensor::full({features}, 1.0)),
      momentum(momentum_),
      eps(eps_),
      features_(features) {}

Tensor BatchNorm::forward(const Tensor& x, bool training) {
  if (x.rank() == 0 || x.shape().back() != features_) {
    throw DimensionError("BatchNorm: expected trailing extent " + std::to_string(features_) + ", got " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / features_;
  Tensor flat = reshape(x, {rows, features_});
  Tensor normalized;
  if (training) {
    if (rows < 2) throw ContractError("BatchNorm: training needs at least two positions per feature");
    Tensor mu = mean(flat, 0, false);
    Tensor sigma2 = var(flat, 0, false);
    normalized = (flat - mu) / sqrt(add_scalar(sigma2, eps));
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t f = 0; f < features_; ++f) {
      rm[f] = (1.0 - momentum) * rm[f] + momentum * mu.data()[f];
      rv[f] = (1.0 - momentum) * rv[f] + momentum * sigma2.data()[f];
    }
  } else {
    std::vector<double> denom(features_);
    for (std::size_t f = 0; f < features_; ++f) denom[f] = std::sqrt(running_var.data()[f] + eps);
    normalized = (flat - running_mean.detach()) / Tensor({features_}, std::move(denom));
  }
  return reshape(normalized * gamma + beta, x.shape());
}

void BatchNorm::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

void BatchNorm::collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.emplace_back(prefix + ".running_mean", running_mean);
  out.emplace_back(prefix + ".running_var", running_var);
}

// ---------------------------------------------------------------------------

PositionalEmbedding::PositionalEmbedding(std::size_t tokens, std::size_t d_model, Rng& rng) {
  std::vector<double> v(tokens * d_model);
  for (auto& x : v) x = normal(rng, 0.0, 0.02);
  table = Tensor({tokens, d_model}, std::move(v), true);
}

Tensor PositionalEmbedding::forward(const Tensor& seq) const {
  if (seq.rank() < 2 || seq.shape()[seq.rank() - 2] != table.dim(0) || seq.shape().back() != table.dim(1)) {
    throw ConfigError("PositionalEmbedding: table is " + shape_str(table.shape()) + " but sequence is " +
                      shape_str(seq.shape()));
  }
  return seq + table;
}

void PositionalEmbedding::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.emplace_back(prefix + ".table", table);
}

// ---------------------------------------------------------------------------

MultiHeadAttention::MultiHeadAttention(std::size_t d_model, std::size_t heads, Rng& rng)
    : d_model_(d_model), heads_(heads) {
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("heads: d_model (" + std::to_string(d_model) + ") must be divisible by heads (" +
                      std::to_string(heads) + ")");
  }
  q = Linear(d_model, d_model, rng);
  k = Linear(d_model, d_model, rng);
  v = Linear(d_model, d_model, rng);
  o = Linear(d_model, d_model, rng);
}

Tensor MultiHeadAttention::forward(const Tensor& query, const Tensor& context, const AttnMask* mask) const {
  if (query.rank() != 3 || context.rank() != 3 || query.dim(0) != context.dim(0) || query.dim(2) != d_model_ ||
      context.dim(2) != d_model_) {
    throw DimensionError("MultiHeadAttention: bad operands " + shape_str(query.shape()) + " / " +
                         shape_str(context.shape()));
  }
  const std::size_t batch = query.dim(0);
  const std::size_t tq = query.dim(1);
  const std::size_t tk = context.dim(1);
  const std::size_t dh = d_model_ / heads_;
  if (mask) {
    if (mask->size() != tq || mask->size() != tk) {
      throw DimensionError("MultiHeadAttention: mask of size " + std::to_string(mask->size()) + " for " +
                           std::to_string(tq) + " queries and " + std::to_string(tk) + " keys");
    }
    if (const std::size_t row = mask->first_empty_row(); row != mask->size()) {
      throw ContractError("MultiHeadAttention: mask row " + std::to_string(row) + " allows no key");
    }
  }

  // [B, T, d] -> [B*H, T, dh]
  auto split_heads = [&](const Tensor& t, std::size_t len) {
    return reshape(permute(reshape(t, {batch, len, heads_, dh}), {0, 2, 1, 3}), {batch * heads_, len, dh});
  };
  Tensor qh = split_heads(q.forward(query), tq);
  Tensor kh = split_heads(k.forward(context), tk);
  Tensor vh = split_heads(v.forward(context), tk);

  Tensor scores = scale(matmul(qh, transpose(kh, 1, 2)), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (mask && !mask->is_full()) scores = scores + mask->additive_bias();
  Tensor weights = softmax(scores, 2);
  Tensor mixed = matmul(weights, vh);  // [B*H, Tq, dh]
  Tensor merged = reshape(permute(reshape(mixed, {batch, heads_, tq, dh}), {0, 2, 1, 3}), {batch, tq, d_model_});
  return o.forward(merged);
}

std::size_t MultiHeadAttention::parameter_count() const {
  return q.parameter_count() + k.parameter_count() + v.parameter_count() + o.parameter_count();
}

void MultiHeadAttention::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  q.collect(prefix + ".q", out);
  k.collect(prefix + ".k", out);
  v.collect(prefix + ".v", out);
  o.collect(prefix + ".o", out);
}

// ---------------------------------------------------------------------------

FeedForward::FeedForward(std::size_t d_model, double factor, Rng& rng) {
  const double width = factor * static_cast<double>(d_model);
  if (!(width >= 1.0) || std::fabs(width - std::round(width)) > 1e-9) {
    throw ConfigError("ff_factor: factor * d_model must be a positive integer, got " + std::to_string(width));
  }
  const auto hidden_width = static_cast<std::size_t>(std::llround(width));
  inner = Linear(d_model, hidden_width, rng);
  outer = Linear(hidden_width, d_model, rng);
}

Tensor FeedForward::forward(const Tensor& x) const { return outer.forward(relu(inner.forward(x))); }

void FeedForward::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  inner.collect(prefix + ".inner", out);
  outer.collect(prefix + ".outer", out);
}

// ---------------------------------------------------------------------------

EncoderBlock::EncoderBlock(std::size_t d_model, std::size_t heads, double ff_factor, double dropout_p_, Rng& rng)
    : attn(d_model, heads, rng),
      ffn(d_model, ff_factor, rng),
      norm_attn(d_model),
      norm_ffn(d_model),
      dropout_p(dropout_p_) {}

Tensor EncoderBlock::forward(const Tensor& x, const AttnMask* mask, bool training, Rng& rng) {
  Tensor h = norm_attn.forward(x + dropout(attn.forward(x, mask), dropout_p, training, rng), training);
  return norm_ffn.forward(h + dropout(ffn.forward(h), dropout_p, training, rng), training);
}

std::size_t EncoderBlock::parameter_count() const {
  return attn.parameter_count() + ffn.parameter_count() + norm_attn.parameter_count() + norm_ffn.parameter_count();
}

void EncoderBlock::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  attn.collect(prefix + ".attn", out);
  ffn.collect(prefix + ".ffn", out);
  norm_attn.collect(prefix + ".norm_attn", out);
  norm_ffn.collect(prefix + ".norm_ffn", out);
}

void EncoderBlock::collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out) const {
  norm_attn.collect_buffers(prefix + ".norm_attn", out);
  norm_ffn.collect_buffers(prefix + ".norm_ffn", out);
}

}  // namespace petformer::nn
