#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "petformer/forecaster.hpp"
#include "petformer/layers.hpp"
#include "petformer/mask.hpp"

namespace petformer {

enum class ChannelMode {
  kDCM,  // all channels embedded jointly per patch
  kNCI,  // independent channels, shared weights
  kSA,   // + self-attention across channels on the future tokens
  kCI,   // + learnable channel identifiers added at tokenisation
  kCA,   // + cross-attention with channel identifiers as queries
};

enum class HeadMode {
  kTokenwise,  // shared linear d_model -> w per future token
  kFlatten,    // all history tokens flattened, n*d_model -> h
  kFeature,    // history tokens mean-pooled, d_model -> h
};

std::string to_string(ChannelMode mode);
std::string to_string(HeadMode mode);
ChannelMode parse_channel_mode(std::string_view text);
HeadMode parse_head_mode(std::string_view text);

struct ModelConfig {
  std::size_t lookback = 720;  // l
  std::size_t horizon = 96;    // h
  std::size_t channels = 1;    // d
  std::size_t patch = 48;      // w
  std::size_t stride = 48;     // s
  std::size_t d_model = 512;
  std::size_t layers = 4;  // N (0 is accepted for tests)
  std::size_t heads = 8;
  double dropout = 0.5;
  double ff_factor = 2.0;
  AttentionMode attention = AttentionMode::kFA;
  ChannelMode channel = ChannelMode::kNCI;
  HeadMode head = HeadMode::kTokenwise;
  bool revin = true;

  /// Throws ConfigError naming the offending field(s).
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct PatchCounts {
  std::size_t history;  // n = floor((l - w) / s + 1)
  std::size_t future;   // m = floor((h - w) / s + 1)
};

/// Token counts for look-back and horizon. ConfigError when w > l, w > h,
/// or w / s is zero.
PatchCounts patch_counts(const ModelConfig& cfg);

/// n = floor((length - w) / s) + 1 for a single series length.
std::size_t window_count(std::size_t length, std::size_t w, std::size_t s);

/// Per-sample, per-channel statistics captured by RevIN::normalize.
struct RevInState {
  Tensor mean;    // [B, 1, d]
  Tensor stddev;  // [B, 1, d], sqrt(var + eps)
};

/// Reversible instance normalisation with a learnable per-channel affine.
class RevIN {
 public:
  RevIN() = default;
  explicit RevIN(std::size_t channels, double eps = 1e-5);

  /// x: [B, l, d] -> normalised x and the statistics needed to undo it.
  std::pair<Tensor, RevInState> normalize(const Tensor& x) const;
  /// y: [B, h, d] in normalised units -> original units.
  Tensor denormalize(const Tensor& y, const RevInState& state) const;

  std::size_t parameter_count() const { return gamma.numel() + beta.numel(); }
  void collect(const std::string& prefix, std::vector<nn::NamedTensor>& out) const;

  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;
};

/// Appends m copies of `placeholder` ([d_model]) after the n history tokens
/// of `tokens` ([.., n, d_model]) and adds the positional table row-wise.
/// m = 0 adds positions only.
Tensor inject_placeholders(const Tensor& tokens, const Tensor& placeholder, const nn::PositionalEmbedding& pos,
                           std::size_t m);

struct ParameterReport {
  std::size_t embedding = 0;
  std::size_t positions = 0;
  std::size_t placeholder = 0;
  std::size_t identifiers = 0;
  std::size_t encoder = 0;
  std::size_t interaction = 0;
  std::size_t head = 0;
  std::size_t revin = 0;
  std::size_t total = 0;

  double head_fraction() const { return total ? static_cast<double>(head) / static_cast<double>(total) : 0.0; }
};

/// Placeholder-enhanced Transformer forecaster.
///
/// Shapes below use B = batch, S = token streams (d channels, or 1 under
/// DCM), n/m = history/future token counts.
class PETformer final : public Forecaster {
 public:
  PETformer(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  PatchCounts counts() const { return counts_; }
  std::size_t streams() const;
  /// Future tokens carried through the encoder (0 for flatten/feature heads).
  std::size_t placeholder_count() const;

  /// [B, l, d] -> [B, h, d]. A rank-2 [l, d] input yields [h, d].
  Tensor forward(const Tensor& x, bool training) override;

  // Pipeline stages, exposed for inspection and tests.
  /// [B, l, d] -> [B, S, n, d_model]; CI adds channel identifiers here.
  Tensor tokenize(const Tensor& x) const;
  /// [B, S, n, d_model] -> [B, S, n + m, d_model] (m = placeholder_count()).
  Tensor inject(const Tensor& tokens) const;
  /// Runs the encoder stack over every stream with shared weights and
  /// returns the last m tokens (tokenwise) or all n tokens (other heads).
  Tensor encode(const Tensor& seq, bool training);
  /// [B, d, m, d_model] -> same shape; identity for NCI/CI.
  Tensor interact_channels(const Tensor& future) const;
  /// Head over encoder output -> [B, h, d] (normalised units).
  Tensor predict(const Tensor& tokens) const;

  std::vector<nn::NamedTensor> parameters() const override;
  std::vector<nn::NamedTensor> buffers() const override;
  ParameterReport count_parameters() const;

  const AttnMask* encoder_mask() const { return mask_ ? &*mask_ : nullptr; }

  nn::Linear embed;
  nn::PositionalEmbedding positions;
  Tensor placeholder;   // [d_model]; only with the tokenwise head
  Tensor identifiers;   // [d, d_model]; only for CI / CA
  std::vector<nn::EncoderBlock> blocks;
  nn::MultiHeadAttention channel_attn;  // SA / CA only
  nn::Linear head;
  RevIN revin;

 private:
  ModelConfig cfg_;
  PatchCounts counts_{};
  std::optional<AttnMask> mask_;
  Rng rng_;
};

// Stand-alone heads. Shapes: tokens [B, S, *, d_model]; result [B, h, d].

/// Each future token -> w values (w*d under DCM), concatenated along time.
Tensor predict_tokenwise(const Tensor& future_tokens, const nn::Linear& head, std::size_t horizon,
                         std::size_t channels);
/// n history tokens flattened per stream -> h values.
Tensor predict_flatten(const Tensor& history_tokens, const nn::Linear& head, std::size_t horizon,
                       std::size_t channels);
/// History tokens mean-pooled per stream -> h values.
Tensor predict_feature(const Tensor& history_tokens, const nn::Linear& head, std::size_t horizon,
                       std::size_t channels);

}  // namespace petformer
