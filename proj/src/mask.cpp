#include "petformer/mask.hpp"

#include <algorithm>

namespace petformer {

std::string to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::kFA: return "fa";
    case AttentionMode::kNIFA: return "nifa";
    case AttentionMode::kNIHA: return "niha";
    case AttentionMode::kOFFH: return "offh";
  }
  return "?";
}

AttentionMode parse_attention_mode(std::string_view text) {
  if (text == "fa") return AttentionMode::kFA;
  if (text == "nifa") return AttentionMode::kNIFA;
  if (text == "niha") return AttentionMode::kNIHA;
  if (text == "offh") return AttentionMode::kOFFH;
  throw ConfigError("attention_mode: invalid value '" + std::string(text) + "' (valid: fa, nifa, niha, offh)");
}

AttnMask::AttnMask(std::size_t n, std::size_t m, std::vector<std::uint8_t> allow)
    : n_(n), m_(m), allow_(std::move(allow)) {
  if (allow_.size() != size() * size()) {
    throw DimensionError("AttnMask: expected " + std::to_string(size() * size()) + " entries, got " +
                         std::to_string(allow_.size()));
  }
}

AttnMask AttnMask::full(std::size_t tokens) {
  return AttnMask(tokens, 0, std::vector<std::uint8_t>(tokens * tokens, 1));
}

bool AttnMask::is_full() const {
  return std::all_of(allow_.begin(), allow_.end(), [](std::uint8_t v) { return v != 0; });
}

std::size_t AttnMask::first_empty_row() const {
  const std::size_t t = size();
  for (std::size_t i = 0; i < t; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < t && !any; ++j) any = allowed(i, j);
    if (!any) return i;
  }
  return t;
}

Tensor AttnMask::additive_bias() const {
  std::vector<double> bias(allow_.size());
  for (std::size_t i = 0; i < allow_.size(); ++i) bias[i] = allow_[i] ? 0.0 : kMaskedLogit;
  return Tensor({size(), size()}, std::move(bias));
}

AttnMask build_mask(AttentionMode mode, std::size_t n, std::size_t m) {
  if (n == 0 || m == 0) {
    throw ConfigError("build_mask: need at least one history token and one placeholder (n=" + std::to_string(n) +
                      ", m=" + std::to_string(m) + ")");
  }
  const std::size_t t = n + m;
  std::vector<std::uint8_t> allow(t * t, 0);
  auto set = [&](std::size_t i, std::size_t j) { allow[i * t + j] = 1; };
  for (std::size_t i = 0; i < t; ++i) {
    const bool query_future = i >= n;
    for (std::size_t j = 0; j < t; ++j) {
      const bool key_future = j >= n;
      bool ok = false;
      switch (mode) {
        case AttentionMode::kFA:
          ok = true;
          break;
        case AttentionMode::kNIFA:
          // history <- history; placeholder <- history
          ok = !key_future;
          break;
        case AttentionMode::kNIHA:
          // placeholders see everything; history sees only itself
          ok = query_future;
          break;
        case AttentionMode::kOFFH:
          ok = query_future && !key_future;
          break;
      }
      if (ok || i == j) set(i, j);
    }
  }
  return AttnMask(n, m, std::move(allow));
}

}  // namespace petformer
