#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "petformer/tensor.hpp"

namespace petformer {

/// How history tokens and placeholders may attend to each other.
enum class AttentionMode {
  kFA,    // full attention
  kNIFA,  // no inter-future attention
  kNIHA,  // no inter-history attention
  kOFFH,  // only future focuses on history
};

std::string to_string(AttentionMode mode);
/// Accepts "fa" | "nifa" | "niha" | "offh"; anything else is a ConfigError
/// listing the valid values.
AttentionMode parse_attention_mode(std::string_view text);

/// Boolean query-by-key matrix over n history tokens followed by m
/// placeholders. Row i lists the keys query i may attend.
class AttnMask {
 public:
  AttnMask(std::size_t n, std::size_t m, std::vector<std::uint8_t> allow);

  /// Everything allowed over `tokens` positions (all treated as history).
  static AttnMask full(std::size_t tokens);

  std::size_t size() const { return n_ + m_; }
  std::size_t history() const { return n_; }
  std::size_t placeholders() const { return m_; }
  bool allowed(std::size_t query, std::size_t key) const { return allow_[query * size() + key] != 0; }
  bool is_full() const;
  /// First row without any allowed key, or size() if none.
  std::size_t first_empty_row() const;

  /// [T x T] logits offset: 0 where allowed, -1e30 where not.
  Tensor additive_bias() const;

  friend bool operator==(const AttnMask&, const AttnMask&) = default;

 private:
  std::size_t n_;
  std::size_t m_;
  std::vector<std::uint8_t> allow_;
};

inline constexpr double kMaskedLogit = -1e30;

/// Mask realising `mode` for n history tokens and m placeholders. The
/// diagonal is always allowed. Throws ConfigError when n or m is zero.
AttnMask build_mask(AttentionMode mode, std::size_t n, std::size_t m);

}  // namespace petformer
