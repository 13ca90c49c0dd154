#pragma once

#include <string>
#include <utility>
#include <vector>

#include "petformer/mask.hpp"
#include "petformer/random.hpp"
#include "petformer/tensor.hpp"

namespace petformer::nn {

using NamedTensor = std::pair<std::string, Tensor>;

/// y = x W + b over the trailing axis. W is [d_in x d_out].
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t d_in, std::size_t d_out, Rng& rng);

  Tensor forward(const Tensor& x) const;

  std::size_t in_features() const { return d_in_; }
  std::size_t out_features() const { return d_out_; }
  std::size_t parameter_count() const { return d_in_ * d_out_ + d_out_; }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;

  Tensor weight;
  Tensor bias;

 private:
  std::size_t d_in_ = 0;
  std::size_t d_out_ = 0;
};

/// Inverted dropout. Identity when `training` is false or p == 0.
/// Throws ConfigError unless 0 <= p < 1.
Tensor dropout(const Tensor& x, double p, bool training, Rng& rng);

/// Normalises each feature (trailing axis) over every other position.
/// Training mode uses batch statistics and updates running averages;
/// inference mode uses the running averages.
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::size_t features, double momentum = 0.1, double eps = 1e-5);

  Tensor forward(const Tensor& x, bool training);

  std::size_t features() const { return features_; }
  std::size_t parameter_count() const { return 2 * features_; }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out) const;

  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

 private:
  std::size_t features_ = 0;
};

/// Learnable per-position offsets added to a [.., T, d_model] sequence.
class PositionalEmbedding {
 public:
  PositionalEmbedding() = default;
  PositionalEmbedding(std::size_t tokens, std::size_t d_model, Rng& rng);

  Tensor forward(const Tensor& seq) const;

  std::size_t tokens() const { return table.dim(0); }
  std::size_t parameter_count() const { return table.numel(); }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;

  Tensor table;
};

/// Scaled dot-product attention over `heads` heads with q/k/v/o projections.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t d_model, std::size_t heads, Rng& rng);

  /// query: [B, Tq, d_model], context: [B, Tk, d_model]. `mask` (Tq x Tk,
  /// nullptr = unrestricted) must allow at least one key per query.
  Tensor forward(const Tensor& query, const Tensor& context, const AttnMask* mask = nullptr) const;
  Tensor forward(const Tensor& tokens, const AttnMask* mask = nullptr) const { return forward(tokens, tokens, mask); }

  std::size_t heads() const { return heads_; }
  std::size_t parameter_count() const;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;

  Linear q, k, v, o;

 private:
  std::size_t d_model_ = 0;
  std::size_t heads_ = 1;
};

/// linear(d_model -> factor*d_model) -> relu -> linear(back to d_model).
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(std::size_t d_model, double factor, Rng& rng);

  Tensor forward(const Tensor& x) const;

  std::size_t hidden() const { return inner.out_features(); }
  std::size_t parameter_count() const { return inner.parameter_count() + outer.parameter_count(); }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;

  Linear inner;
  Linear outer;
};

/// Post-norm encoder layer with batch normalisation:
///   x -> MHA -> dropout -> +x -> BN -> FFN -> dropout -> +x -> BN
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(std::size_t d_model, std::size_t heads, double ff_factor, double dropout_p, Rng& rng);

  /// x: [B, T, d_model].
  Tensor forward(const Tensor& x, const AttnMask* mask, bool training, Rng& rng);

  std::size_t parameter_count() const;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out) const;

  MultiHeadAttention attn;
  FeedForward ffn;
  BatchNorm norm_attn;
  BatchNorm norm_ffn;
  double dropout_p = 0.0;
};

}  // namespace petformer::nn
