#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "petformer/tensor.hpp"

namespace petformer::data {

/// T x d matrix of observations, row-major, with pass-through timestamps.
struct RawSeries {
  std::vector<double> values;
  std::vector<std::string> channel_names;
  std::vector<std::string> timestamps;

  std::size_t length() const { return timestamps.size(); }
  std::size_t channels() const { return channel_names.size(); }
  double at(std::size_t t, std::size_t c) const { return values[t * channels() + c]; }
};

/// Comma-separated, header row required, first column an opaque timestamp,
/// every other column numeric. Quoting is not supported. Errors carry the
/// 1-based file line and column.
RawSeries load_csv(const std::filesystem::path& path);
RawSeries parse_csv(std::string_view text, const std::string& source = "<memory>");
/// Writes the format load_csv reads; values use shortest round-trip form.
void write_csv(const std::filesystem::path& path, const RawSeries& series);

/// Half-open index range [begin, end).
struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t i) const { return begin <= i && i < end; }
  friend bool operator==(const IndexRange&, const IndexRange&) = default;
};

struct SplitSpec {
  std::array<double, 3> ratios{0.7, 0.1, 0.2};  // train, validation, test

  /// "7:1:2", "6:2:2", "0.6,0.2,0.2" ... normalised to sum 1.
  static SplitSpec parse(std::string_view text);
  std::string to_string() const;
  void validate() const;
};

struct SplitRanges {
  IndexRange train;
  IndexRange val;
  IndexRange test;
};

/// Lengths floor(r_i * T) for train and validation; test takes the rest.
/// With min_length > 0 every split shorter than it is a ConfigError.
SplitRanges split_chronological(std::size_t length, const SplitSpec& spec, std::size_t min_length = 0);

/// Per-channel z-score fitted on a range of the series. Zero-variance
/// channels get unit scale.
class StandardScaler {
 public:
  StandardScaler() = default;
  StandardScaler(std::vector<double> mean, std::vector<double> scale);

  static StandardScaler fit(const RawSeries& series, IndexRange range);

  std::vector<double> transform(const std::vector<double>& values) const;
  std::vector<double> inverse(const std::vector<double>& values) const;
  double inverse_one(double value, std::size_t channel) const { return value * scale_[channel] + mean_[channel]; }

  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& scale() const { return scale_; }

 private:
  std::vector<double> mean_;
  std::vector<double> scale_;
};

/// Look-back block [origin - l, origin) and target block [origin, origin + h).
struct WindowedSample {
  std::size_t origin;
};

/// Windows fully inside `range`: origins begin+l, begin+l+stride, ... up to
/// end-h. Count = floor((size - l - h) / stride) + 1, or 0 when size < l+h.
std::vector<WindowedSample> window(IndexRange range, std::size_t l, std::size_t h, std::size_t stride = 1);
std::size_t window_count(std::size_t range_length, std::size_t l, std::size_t h, std::size_t stride = 1);

enum class Split { kTrain, kVal, kTest };
std::string to_string(Split split);

/// Samples whose origin lies in `split` and whose target stays inside it.
/// Validation and test look-back windows may reach back into the preceding
/// split; training windows stay inside the training range.
std::vector<WindowedSample> split_samples(const SplitRanges& ranges, Split split, std::size_t l, std::size_t h,
                                          std::size_t stride = 1);

/// Standardised series plus a list of samples, assembled into batches.
class WindowDataset {
 public:
  WindowDataset() = default;
  WindowDataset(std::vector<double> values, std::size_t channels, std::size_t l, std::size_t h,
                std::vector<WindowedSample> samples);

  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  std::size_t channels() const { return channels_; }
  std::size_t lookback() const { return l_; }
  std::size_t horizon() const { return h_; }
  const std::vector<WindowedSample>& samples() const { return samples_; }

  /// x: [B, l, d], y: [B, h, d] for the listed sample indices, in order.
  std::pair<Tensor, Tensor> batch(const std::vector<std::size_t>& indices) const;
  /// Contiguous chronological batch [first, first + count).
  std::pair<Tensor, Tensor> batch_range(std::size_t first, std::size_t count) const;

 private:
  std::vector<double> values_;
  std::size_t channels_ = 0;
  std::size_t l_ = 0;
  std::size_t h_ = 0;
  std::vector<WindowedSample> samples_;
};

enum class SynthKind { kSine, kSineTrend, kSineNoise };
std::string to_string(SynthKind kind);
/// "sine" | "sine+trend" | "sine+noise".
SynthKind parse_synth_kind(std::string_view text);

/// channel c: amplitude_c * sin(2 pi t / period_c + phase_c) + slope_c * t
///            + noise_sd * N(0, 1).
/// Per-channel lists may be shorter than d; the last entry repeats.
struct SynthParams {
  std::vector<double> amplitude{1.0};
  std::vector<double> period{48.0};
  std::vector<double> phase{0.0};
  std::vector<double> slope{0.0};
  double noise_sd = 0.0;

  /// Defaults for a kind: sine+trend adds slope 1e-3, sine+noise adds
  /// noise 0.3.
  static SynthParams defaults(SynthKind kind);
};

RawSeries synthesize(SynthKind kind, std::size_t length, std::size_t channels, const SynthParams& params,
                     std::uint64_t seed);

}  // namespace petformer::data
