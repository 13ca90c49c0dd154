#include "petformer/model.hpp"

#include <cmath>

#include "petformer/errors.hpp"

namespace petformer {

namespace {

std::string sz(std::size_t v) { return std::to_string(v); }

Tensor init_normal(Shape shape, double sd, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(rng, 0.0, sd);
  return Tensor(std::move(shape), std::move(v), true);
}

// y: [B, S, out] -> [B, h, d]. One stream per channel with out == h, or a
// single joint stream with out == h*d laid out time-major.
Tensor streams_to_horizon(const Tensor& y, std::size_t horizon, std::size_t channels, const char* who) {
  const std::size_t batch = y.dim(0);
  const std::size_t streams = y.dim(1);
  const std::size_t out = y.dim(2);
  if (streams == channels && out == horizon) return permute(y, {0, 2, 1});
  if (streams == 1 && out == horizon * channels) return reshape(y, {batch, horizon, channels});
  throw ConfigError(std::string(who) + ": head yields " + sz(out) + " values per stream over " + sz(streams) +
                    " stream(s), which does not cover horizon " + sz(horizon) + " x " + sz(channels) + " channels");
}

void require_tokens(const Tensor& t, std::size_t d_model, const char* who) {
  if (t.rank() != 4 || t.shape().back() != d_model) {
    throw ConfigError(std::string(who) + ": expected [B, S, T, " + sz(d_model) + "] tokens, got " + shape_str(t.shape()));
  }
}

}  // namespace

std::string to_string(ChannelMode mode) {
  switch (mode) {
    case ChannelMode::kDCM: return "dcm";
    case ChannelMode::kNCI: return "nci";
    case ChannelMode::kSA: return "sa";
    case ChannelMode::kCI: return "ci";
    case ChannelMode::kCA: return "ca";
  }
  return "?";
}

std::string to_string(HeadMode mode) {
  switch (mode) {
    case HeadMode::kTokenwise: return "tokenwise";
    case HeadMode::kFlatten: return "flatten";
    case HeadMode::kFeature: return "feature";
  }
  return "?";
}

ChannelMode parse_channel_mode(std::string_view text) {
  for (auto mode : {ChannelMode::kDCM, ChannelMode::kNCI, ChannelMode::kSA, ChannelMode::kCI, ChannelMode::kCA}) {
    if (text == to_string(mode)) return mode;
  }
  throw ConfigError("channel_mode: invalid value '" + std::string(text) + "' (valid: dcm, nci, sa, ci, ca)");
}

HeadMode parse_head_mode(std::string_view text) {
  for (auto mode : {HeadMode::kTokenwise, HeadMode::kFlatten, HeadMode::kFeature}) {
    if (text == to_string(mode)) return mode;
  }
  throw ConfigError("head_mode: invalid value '" + std::string(text) + "' (valid: tokenwise, flatten, feature)");
}

// ---------------------------------------------------------------------------

std::size_t window_count(std::size_t length, std::size_t w, std::size_t s) {
  if (w == 0 || s == 0) throw ConfigError("w/s: patch length and stride must be positive");
  if (w > length) throw ConfigError("w: patch length " + sz(w) + " exceeds series length " + sz(length));
  return (length - w) / s + 1;
}

PatchCounts patch_counts(const ModelConfig& cfg) {
  if (cfg.patch > cfg.lookback) {
    throw ConfigError("w: patch length " + sz(cfg.patch) + " exceeds look-back l=" + sz(cfg.lookback));
  }
  if (cfg.patch > cfg.horizon) {
    throw ConfigError("w: patch length " + sz(cfg.patch) + " exceeds horizon h=" + sz(cfg.horizon));
  }
  return {window_count(cfg.lookback, cfg.patch, cfg.stride), window_count(cfg.horizon, cfg.patch, cfg.stride)};
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string(name) + ": must be at least 1");
  };
  positive(lookback, "l");
  positive(horizon, "h");
  positive(channels, "d");
  positive(patch, "w");
  positive(stride, "s");
  positive(d_model, "d_model");
  positive(heads, "heads");
  if (d_model % heads != 0) {
    throw ConfigError("heads: d_model (" + sz(d_model) + ") must be divisible by heads (" + sz(heads) + ")");
  }
  if (patch > lookback) throw ConfigError("w: patch length " + sz(patch) + " exceeds look-back l=" + sz(lookback));
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw ConfigError("dropout: probability must be in [0, 1), got " + std::to_string(dropout));
  }
  const double width = ff_factor * static_cast<double>(d_model);
  if (!(width >= 1.0) || std::fabs(width - std::round(width)) > 1e-9) {
    throw ConfigError("ff_factor: factor * d_model must be a positive integer, got " + std::to_string(width));
  }
  if (head == HeadMode::kTokenwise) {
    if (patch > horizon) throw ConfigError("w: patch length " + sz(patch) + " exceeds horizon h=" + sz(horizon));
    if ((horizon - patch) % stride != 0) {
      throw ConfigError("s: tokenwise head needs (h - w) divisible by s; h=" + sz(horizon) + ", w=" + sz(patch) +
                        ", s=" + sz(stride));
    }
    const std::size_t m = window_count(horizon, patch, stride);
    if (m * patch != horizon) {
      throw ConfigError("s: tokenwise head emits m*w = " + sz(m * patch) + " steps but h=" + sz(horizon) +
                        " (use s = w with w dividing h)");
    }
  }
}

// ---------------------------------------------------------------------------

RevIN::RevIN(std::size_t channels, double eps_)
    : gamma(Tensor::full({channels}, 1.0, true)), beta(Tensor::zeros({channels}, true)), eps(eps_) {}

std::pair<Tensor, RevInState> RevIN::normalize(const Tensor& x) const {
  if (x.rank() != 3 || x.dim(2) != gamma.numel()) {
    throw DimensionError("RevIN: expected [B, l, " + sz(gamma.numel()) + "], got " + shape_str(x.shape()));
  }
  // Statistics are treated as constants of the sample.
  Tensor x_const = x.detach();
  RevInState state{mean(x_const, 1), sqrt(add_scalar(var(x_const, 1), eps))};
  return {(x - state.mean) / state.stddev * gamma + beta, std::move(state)};
}

Tensor RevIN::denormalize(const Tensor& y, const RevInState& state) const {
  if (y.rank() != 3 || y.dim(2) != gamma.numel()) {
    throw DimensionError("RevIN: expected [B, h, " + sz(gamma.numel()) + "], got " + shape_str(y.shape()));
  }
  return (y - beta) / gamma * state.stddev + state.mean;
}

void RevIN::collect(const std::string& prefix, std::vector<nn::NamedTensor>& out) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

// ---------------------------------------------------------------------------

Tensor inject_placeholders(const Tensor& tokens, const Tensor& placeholder, const nn::PositionalEmbedding& pos,
                           std::size_t m) {
  if (tokens.rank() < 2) throw DimensionError("inject_placeholders: tokens must be [.., n, d_model]");
  const std::size_t d_model = tokens.shape().back();
  const std::size_t n = tokens.dim(tokens.rank() - 2);
  if (pos.tokens() != n + m) {
    throw ConfigError("inject_placeholders: position table has " + sz(pos.tokens()) + " rows, need n + m = " +
                      sz(n + m));
  }
  if (m == 0) return pos.forward(tokens);
  if (placeholder.rank() != 1 || placeholder.numel() != d_model) {
    throw DimensionError("inject_placeholders: placeholder must be [" + sz(d_model) + "], got " +
                         shape_str(placeholder.shape()));
  }
  Shape lead(tokens.shape().begin(), tokens.shape().end() - 2);
  Tensor slots = expand(expand(placeholder, {m}), lead);
  return pos.forward(concat({tokens, slots}, tokens.rank() - 2));
}

// ---------------------------------------------------------------------------

Tensor predict_tokenwise(const Tensor& future_tokens, const nn::Linear& head, std::size_t horizon,
                         std::size_t channels) {
  if (future_tokens.rank() != 4) {
    throw ConfigError("predict_tokenwise: expected [B, S, m, d_model], got " + shape_str(future_tokens.shape()));
  }
  const std::size_t batch = future_tokens.dim(0);
  const std::size_t streams = future_tokens.dim(1);
  const std::size_t m = future_tokens.dim(2);
  const std::size_t patch_values = head.out_features();
  Tensor patches = head.forward(future_tokens);  // [B, S, m, out]
  if (streams == channels && m * patch_values == horizon) {
    return permute(reshape(patches, {batch, channels, horizon}), {0, 2, 1});
  }
  if (streams == 1 && m * patch_values == horizon * channels) {
    // Joint head: each patch is w rows of d values.
    return reshape(patches, {batch, horizon, channels});
  }
  throw ConfigError("predict_tokenwise: m*w = " + sz(m * patch_values) + " does not equal h=" + sz(horizon) +
                    " for " + sz(streams) + " stream(s)");
}

Tensor predict_flatten(const Tensor& history_tokens, const nn::Linear& head, std::size_t horizon,
                       std::size_t channels) {
  if (history_tokens.rank() != 4) {
    throw ConfigError("predict_flatten: expected [B, S, n, d_model], got " + shape_str(history_tokens.shape()));
  }
  const Shape& s = history_tokens.shape();
  if (s[2] * s[3] != head.in_features()) {
    throw ConfigError("predict_flatten: head expects " + sz(head.in_features()) + " inputs, tokens give n*d_model = " +
                      sz(s[2] * s[3]));
  }
  Tensor flat = reshape(history_tokens, {s[0], s[1], s[2] * s[3]});
  return streams_to_horizon(head.forward(flat), horizon, channels, "predict_flatten");
}

Tensor predict_feature(const Tensor& history_tokens, const nn::Linear& head, std::size_t horizon,
                       std::size_t channels) {
  if (history_tokens.rank() != 4 || history_tokens.dim(3) != head.in_features()) {
    throw ConfigError("predict_feature: expected [B, S, n, " + sz(head.in_features()) + "], got " +
                      shape_str(history_tokens.shape()));
  }
  return streams_to_horizon(head.forward(mean(history_tokens, 2, false)), horizon, channels, "predict_feature");
}

// ---------------------------------------------------------------------------

PETformer::PETformer(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), rng_(seed) {
  cfg_.validate();
  const bool tokenwise = cfg_.head == HeadMode::kTokenwise;
  const bool joint = cfg_.channel == ChannelMode::kDCM;
  const std::size_t n = window_count(cfg_.lookback, cfg_.patch, cfg_.stride);
  const std::size_t m = cfg_.patch <= cfg_.horizon ? window_count(cfg_.horizon, cfg_.patch, cfg_.stride) : 0;
  counts_ = {n, m};
  const std::size_t slots = tokenwise ? m : 0;
  const std::size_t d = cfg_.channels;
  const std::size_t dm = cfg_.d_model;

  embed = nn::Linear(joint ? cfg_.patch * d : cfg_.patch, dm, rng_);
  positions = nn::PositionalEmbedding(n + slots, dm, rng_);
  if (tokenwise) placeholder = init_normal({dm}, 0.02, rng_);
  if (cfg_.channel == ChannelMode::kCI || cfg_.channel == ChannelMode::kCA) identifiers = init_normal({d, dm}, 0.02, rng_);
  blocks.reserve(cfg_.layers);
  for (std::size_t i = 0; i < cfg_.layers; ++i) blocks.emplace_back(dm, cfg_.heads, cfg_.ff_factor, cfg_.dropout, rng_);
  if (cfg_.channel == ChannelMode::kSA || cfg_.channel == ChannelMode::kCA) {
    channel_attn = nn::MultiHeadAttention(dm, cfg_.heads, rng_);
  }
  const std::size_t per_stream = joint ? d : 1;
  switch (cfg_.head) {
    case HeadMode::kTokenwise: head = nn::Linear(dm, cfg_.patch * per_stream, rng_); break;
    case HeadMode::kFlatten: head = nn::Linear(n * dm, cfg_.horizon * per_stream, rng_); break;
    case HeadMode::kFeature: head = nn::Linear(dm, cfg_.horizon * per_stream, rng_); break;
  }
  if (cfg_.revin) revin = RevIN(d);
  if (tokenwise) mask_ = build_mask(cfg_.attention, n, m);
}

std::size_t PETformer::streams() const { return cfg_.channel == ChannelMode::kDCM ? 1 : cfg_.channels; }

std::size_t PETformer::placeholder_count() const { return cfg_.head == HeadMode::kTokenwise ? counts_.future : 0; }

Tensor PETformer::tokenize(const Tensor& x) const {
  if (x.rank() != 3 || x.dim(1) != cfg_.lookback || x.dim(2) != cfg_.channels) {
    throw DimensionError("tokenize: expected [B, " + sz(cfg_.lookback) + ", " + sz(cfg_.channels) + "], got " +
                         shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  Tensor patches = unfold(permute(x, {0, 2, 1}), cfg_.patch, cfg_.stride);  // [B, d, n, w]
  if (cfg_.channel == ChannelMode::kDCM) {
    patches = reshape(permute(patches, {0, 2, 3, 1}), {batch, 1, counts_.history, cfg_.patch * cfg_.channels});
  }
  Tensor tokens = embed.forward(patches);
  if (cfg_.channel == ChannelMode::kCI) tokens = tokens + reshape(identifiers, {cfg_.channels, 1, cfg_.d_model});
  return tokens;
}

Tensor PETformer::inject(const Tensor& tokens) const {
  require_tokens(tokens, cfg_.d_model, "inject");
  return inject_placeholders(tokens, placeholder, positions, placeholder_count());
}

Tensor PETformer::encode(const Tensor& seq, bool training) {
  require_tokens(seq, cfg_.d_model, "encode");
  const std::size_t batch = seq.dim(0);
  const std::size_t streams_n = seq.dim(1);
  const std::size_t total = seq.dim(2);
  const std::size_t keep = placeholder_count() ? placeholder_count() : counts_.history;
  if (total != counts_.history + placeholder_count()) {
    throw DimensionError("encode: sequence has " + sz(total) + " tokens, expected " +
                         sz(counts_.history + placeholder_count()));
  }
  Tensor h = reshape(seq, {batch * streams_n, total, cfg_.d_model});
  for (auto& block : blocks) h = block.forward(h, encoder_mask(), training, rng_);
  return reshape(slice(h, 1, total - keep, keep), {batch, streams_n, keep, cfg_.d_model});
}

Tensor PETformer::interact_channels(const Tensor& future) const {
  require_tokens(future, cfg_.d_model, "interact_channels");
  switch (cfg_.channel) {
    case ChannelMode::kDCM:
    case ChannelMode::kNCI:
    case ChannelMode::kCI:
      return future;
    case ChannelMode::kSA:
    case ChannelMode::kCA:
      break;
  }
  const std::size_t batch = future.dim(0);
  const std::size_t d = future.dim(1);
  const std::size_t k = future.dim(2);
  const std::size_t dm = cfg_.d_model;
  Tensor grid = reshape(permute(future, {0, 2, 1, 3}), {batch * k, d, dm});  // channels as tokens
  Tensor mixed;
  if (cfg_.channel == ChannelMode::kSA) {
    mixed = channel_attn.forward(grid);
  } else {
    if (!identifiers.defined() || identifiers.dim(0) != d) {
      throw ConfigError("channel_mode: ca needs a channel identifier table with " + sz(d) + " rows");
    }
    mixed = channel_attn.forward(expand(identifiers, {batch * k}), grid);
  }
  return permute(reshape(grid + mixed, {batch, k, d, dm}), {0, 2, 1, 3});
}

Tensor PETformer::predict(const Tensor& tokens) const {
  switch (cfg_.head) {
    case HeadMode::kTokenwise: return predict_tokenwise(tokens, head, cfg_.horizon, cfg_.channels);
    case HeadMode::kFlatten: return predict_flatten(tokens, head, cfg_.horizon, cfg_.channels);
    case HeadMode::kFeature: return predict_feature(tokens, head, cfg_.horizon, cfg_.channels);
  }
  throw ConfigError("head_mode: unknown");
}

Tensor PETformer::forward(const Tensor& x, bool training) {
  const bool single = x.rank() == 2;
  Tensor batch_x = single ? reshape(x, {1, x.dim(0), x.dim(1)}) : x;
  if (batch_x.rank() != 3 || batch_x.dim(1) != cfg_.lookback || batch_x.dim(2) != cfg_.channels) {
    throw DimensionError("forward: expected [B, " + sz(cfg_.lookback) + ", " + sz(cfg_.channels) + "], got " +
                         shape_str(x.shape()));
  }
  if (!all_finite(batch_x)) throw DataError("forward: input contains non-finite values");

  std::optional<RevInState> stats;
  if (cfg_.revin) {
    auto [normed, state] = revin.normalize(batch_x);
    batch_x = normed;
    stats = std::move(state);
  }
  Tensor out = predict(interact_channels(encode(inject(tokenize(batch_x)), training)));
  if (stats) out = revin.denormalize(out, *stats);
  return single ? reshape(out, {cfg_.horizon, cfg_.channels}) : out;
}

std::vector<nn::NamedTensor> PETformer::parameters() const {
  std::vector<nn::NamedTensor> out;
  embed.collect("embed", out);
  positions.collect("positions", out);
  if (placeholder.defined()) out.emplace_back("placeholder", placeholder);
  if (identifiers.defined()) out.emplace_back("identifiers", identifiers);
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("blocks." + sz(i), out);
  if (channel_attn.q.weight.defined()) channel_attn.collect("channel_attn", out);
  head.collect("head", out);
  if (cfg_.revin) revin.collect("revin", out);
  return out;
}

std::vector<nn::NamedTensor> PETformer::buffers() const {
  std::vector<nn::NamedTensor> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect_buffers("blocks." + sz(i), out);
  return out;
}

ParameterReport PETformer::count_parameters() const {
  ParameterReport r;
  r.embedding = embed.parameter_count();
  r.positions = positions.parameter_count();
  r.placeholder = placeholder.defined() ? placeholder.numel() : 0;
  r.identifiers = identifiers.defined() ? identifiers.numel() : 0;
  for (const auto& b : blocks) r.encoder += b.parameter_count();
  r.interaction = channel_attn.q.weight.defined() ? channel_attn.parameter_count() : 0;
  r.head = head.parameter_count();
  r.revin = cfg_.revin ? revin.parameter_count() : 0;
  r.total = r.embedding + r.positions + r.placeholder + r.identifiers + r.encoder + r.interaction + r.head + r.revin;
  return r;
}

}  // namespace petformer
