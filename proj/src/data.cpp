#include "petformer/data.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "petformer/errors.hpp"
#include "petformer/random.hpp"

namespace petformer::data {

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::string where(const std::string& source, std::size_t line, std::size_t col) {
  return source + ": row " + std::to_string(line) + ", column " + std::to_string(col);
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double pick(const std::vector<double>& list, std::size_t c, double fallback) {
  if (list.empty()) return fallback;
  return list[std::min(c, list.size() - 1)];
}

}  // namespace

// ---------------------------------------------------------------------------

RawSeries parse_csv(std::string_view text, const std::string& source) {
  RawSeries out;
  std::size_t line_no = 0;
  bool have_header = false;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (trim(line).empty()) continue;

    const auto fields = split_fields(line);
    if (!have_header) {
      if (fields.size() < 2) {
        throw DataError(where(source, line_no, 1) + ": header needs a timestamp column and at least one channel");
      }
      for (std::size_t c = 1; c < fields.size(); ++c) out.channel_names.emplace_back(trim(fields[c]));
      have_header = true;
      continue;
    }
    if (fields.size() != out.channels() + 1) {
      // The first absent (or first surplus) field is the reported column.
      throw DataError(where(source, line_no, std::min(fields.size(), out.channels() + 1) + 1) +
                      ": expected " + std::to_string(out.channels() + 1) + " fields, found " +
                      std::to_string(fields.size()));
    }
    out.timestamps.emplace_back(trim(fields[0]));
    for (std::size_t c = 1; c < fields.size(); ++c) {
      const std::string_view cell = trim(fields[c]);
      if (cell.empty()) throw DataError(where(source, line_no, c + 1) + ": missing value");
      double v = 0.0;
      const char* first = cell.data();
      if (*first == '+') ++first;
      const auto res = std::from_chars(first, cell.data() + cell.size(), v);
      if (res.ec != std::errc() || res.ptr != cell.data() + cell.size()) {
        throw DataError(where(source, line_no, c + 1) + ": non-numeric value '" + std::string(cell) + "'");
      }
      if (!std::isfinite(v)) {
        throw DataError(where(source, line_no, c + 1) + ": non-finite value '" + std::string(cell) + "'");
      }
      out.values.push_back(v);
    }
  }
  if (!have_header) throw DataError(source + ": empty file");
  if (out.length() == 0) throw DataError(source + ": header present but no data rows");
  return out;
}

RawSeries load_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open file");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_csv(buf.str(), path.string());
}

void write_csv(const std::filesystem::path& path, const RawSeries& series) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot open for writing");
  out << "date";
  for (const auto& name : series.channel_names) out << ',' << name;
  out << '\n';
  for (std::size_t t = 0; t < series.length(); ++t) {
    out << series.timestamps[t];
    for (std::size_t c = 0; c < series.channels(); ++c) out << ',' << format_double(series.at(t, c));
    out << '\n';
  }
  if (!out) throw DataError(path.string() + ": write failed");
}

// ---------------------------------------------------------------------------

SplitSpec SplitSpec::parse(std::string_view text) {
  std::vector<double> parts;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t sep = text.find_first_of(":,/", start);
    if (sep == std::string_view::npos) sep = text.size();
    const std::string_view piece = trim(text.substr(start, sep - start));
    double v = 0.0;
    const auto res = std::from_chars(piece.data(), piece.data() + piece.size(), v);
    if (piece.empty() || res.ec != std::errc() || res.ptr != piece.data() + piece.size()) {
      throw ConfigError("split: expected three ratios like 7:1:2, got '" + std::string(text) + "'");
    }
    parts.push_back(v);
    start = sep + 1;
  }
  if (parts.size() != 3) throw ConfigError("split: expected three ratios like 7:1:2, got '" + std::string(text) + "'");
  const double total = parts[0] + parts[1] + parts[2];
  if (!(total > 0.0)) throw ConfigError("split: ratios must have a positive sum");
  SplitSpec spec{{parts[0] / total, parts[1] / total, parts[2] / total}};
  spec.validate();
  return spec;
}

std::string SplitSpec::to_string() const {
  return format_double(ratios[0]) + ":" + format_double(ratios[1]) + ":" + format_double(ratios[2]);
}

void SplitSpec::validate() const {
  double total = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0) || !std::isfinite(r)) throw ConfigError("split: ratios must be finite and nonnegative");
    total += r;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw ConfigError("split: ratios must sum to 1, got " + format_double(total));
}

SplitRanges split_chronological(std::size_t length, const SplitSpec& spec, std::size_t min_length) {
  spec.validate();
  // The epsilon keeps 0.7 * 100 from flooring to 69.
  auto portion = [&](double r) {
    return std::min(length, static_cast<std::size_t>(std::floor(r * static_cast<double>(length) + 1e-9)));
  };
  const std::size_t n_train = portion(spec.ratios[0]);
  const std::size_t n_val = std::min(length - n_train, portion(spec.ratios[1]));
  SplitRanges r{{0, n_train}, {n_train, n_train + n_val}, {n_train + n_val, length}};
  if (min_length > 0) {
    const std::pair<const char*, IndexRange> named[] = {{"train", r.train}, {"validation", r.val}, {"test", r.test}};
    for (const auto& [name, range] : named) {
      if (range.size() < min_length) {
        throw ConfigError("split: " + std::string(name) + " split has " + std::to_string(range.size()) +
                          " steps, fewer than l + h = " + std::to_string(min_length));
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------

StandardScaler::StandardScaler(std::vector<double> mean, std::vector<double> scale)
    : mean_(std::move(mean)), scale_(std::move(scale)) {
  if (mean_.size() != scale_.size()) throw DimensionError("StandardScaler: mean/scale length mismatch");
  for (double s : scale_) {
    if (!(s > 0.0) || !std::isfinite(s)) throw DataError("StandardScaler: scale must be positive and finite");
  }
}

StandardScaler StandardScaler::fit(const RawSeries& series, IndexRange range) {
  if (range.size() == 0 || range.end > series.length()) throw DataError("StandardScaler: empty or invalid fit range");
  const std::size_t d = series.channels();
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  const auto count = static_cast<double>(range.size());
  for (std::size_t t = range.begin; t < range.end; ++t) {
    for (std::size_t c = 0; c < d; ++c) mu[c] += series.at(t, c);
  }
  for (auto& m : mu) m /= count;
  for (std::size_t t = range.begin; t < range.end; ++t) {
    for (std::size_t c = 0; c < d; ++c) {
      const double dev = series.at(t, c) - mu[c];
      sd[c] += dev * dev;
    }
  }
  for (auto& s : sd) {
    s = std::sqrt(s / count);
    if (!(s > 1e-12)) s = 1.0;
  }
  return StandardScaler(std::move(mu), std::move(sd));
}

std::vector<double> StandardScaler::transform(const std::vector<double>& values) const {
  const std::size_t d = mean_.size();
  if (d == 0 || values.size() % d != 0) throw DimensionError("StandardScaler: value count not a multiple of channels");
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - mean_[i % d]) / scale_[i % d];
  return out;
}

std::vector<double> StandardScaler::inverse(const std::vector<double>& values) const {
  const std::size_t d = mean_.size();
  if (d == 0 || values.size() % d != 0) throw DimensionError("StandardScaler: value count not a multiple of channels");
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] * scale_[i % d] + mean_[i % d];
  return out;
}

// ---------------------------------------------------------------------------

std::size_t window_count(std::size_t range_length, std::size_t l, std::size_t h, std::size_t stride) {
  if (stride == 0) throw ConfigError("train_stride: must be at least 1");
  if (range_length < l + h) return 0;
  return (range_length - l - h) / stride + 1;
}

std::vector<WindowedSample> window(IndexRange range, std::size_t l, std::size_t h, std::size_t stride) {
  const std::size_t count = window_count(range.size(), l, h, stride);
  std::vector<WindowedSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back({range.begin + l + i * stride});
  return out;
}

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "validation";
    case Split::kTest: return "test";
  }
  return "?";
}

std::vector<WindowedSample> split_samples(const SplitRanges& ranges, Split split, std::size_t l, std::size_t h,
                                          std::size_t stride) {
  if (split == Split::kTrain) return window(ranges.train, l, h, stride);
  const IndexRange own = split == Split::kVal ? ranges.val : ranges.test;
  // Extend the range backwards so the first origin is the split's first step.
  const std::size_t reach = std::min(own.begin, l);
  return window({own.begin - reach, own.end}, l, h, stride);
}

// ---------------------------------------------------------------------------

WindowDataset::WindowDataset(std::vector<double> values, std::size_t channels, std::size_t l, std::size_t h,
                             std::vector<WindowedSample> samples)
    : values_(std::move(values)), channels_(channels), l_(l), h_(h), samples_(std::move(samples)) {
  if (channels_ == 0 || values_.size() % channels_ != 0) {
    throw DimensionError("WindowDataset: value count not a multiple of channels");
  }
  const std::size_t length = values_.size() / channels_;
  for (const auto& s : samples_) {
    if (s.origin < l_ || s.origin + h_ > length) {
      throw ContractError("WindowDataset: sample origin " + std::to_string(s.origin) + " out of range");
    }
  }
}

std::pair<Tensor, Tensor> WindowDataset::batch(const std::vector<std::size_t>& indices) const {
  const std::size_t b = indices.size();
  std::vector<double> x(b * l_ * channels_), y(b * h_ * channels_);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t origin = samples_.at(indices[i]).origin;
    const auto src = values_.begin();
    std::copy(src + static_cast<std::ptrdiff_t>((origin - l_) * channels_),
              src + static_cast<std::ptrdiff_t>(origin * channels_),
              x.begin() + static_cast<std::ptrdiff_t>(i * l_ * channels_));
    std::copy(src + static_cast<std::ptrdiff_t>(origin * channels_),
              src + static_cast<std::ptrdiff_t>((origin + h_) * channels_),
              y.begin() + static_cast<std::ptrdiff_t>(i * h_ * channels_));
  }
  return {Tensor({b, l_, channels_}, std::move(x)), Tensor({b, h_, channels_}, std::move(y))};
}

std::pair<Tensor, Tensor> WindowDataset::batch_range(std::size_t first, std::size_t count) const {
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
  return batch(idx);
}

// ---------------------------------------------------------------------------

std::string to_string(SynthKind kind) {
  switch (kind) {
    case SynthKind::kSine: return "sine";
    case SynthKind::kSineTrend: return "sine+trend";
    case SynthKind::kSineNoise: return "sine+noise";
  }
  return "?";
}

SynthKind parse_synth_kind(std::string_view text) {
  for (auto k : {SynthKind::kSine, SynthKind::kSineTrend, SynthKind::kSineNoise}) {
    if (text == to_string(k)) return k;
  }
  throw ConfigError("kind: invalid value '" + std::string(text) + "' (valid: sine, sine+trend, sine+noise)");
}

SynthParams SynthParams::defaults(SynthKind kind) {
  SynthParams p;
  if (kind == SynthKind::kSineTrend) p.slope = {1e-3};
  if (kind == SynthKind::kSineNoise) p.noise_sd = 0.3;
  return p;
}

RawSeries synthesize(SynthKind kind, std::size_t length, std::size_t channels, const SynthParams& params,
                     std::uint64_t seed) {
  if (length == 0) throw ConfigError("T: series length must be at least 1");
  if (channels == 0) throw ConfigError("d: channel count must be at least 1");
  for (std::size_t c = 0; c < channels; ++c) {
    const double p = pick(params.period, c, 48.0);
    if (!(p > 0.0) || !std::isfinite(p)) {
      throw ConfigError("period: must be positive, got " + format_double(p) + " for channel " + std::to_string(c));
    }
  }
  if (!(params.noise_sd >= 0.0)) throw ConfigError("noise: standard deviation must be nonnegative");
  // The kind decides which terms are present.
  const bool trend = kind == SynthKind::kSineTrend;
  const bool noisy = kind == SynthKind::kSineNoise;

  RawSeries out;
  out.values.resize(length * channels);
  out.timestamps.reserve(length);
  for (std::size_t c = 0; c < channels; ++c) out.channel_names.push_back("ch" + std::to_string(c));
  Rng rng(seed);
  for (std::size_t t = 0; t < length; ++t) {
    out.timestamps.push_back(std::to_string(t));
    const auto tt = static_cast<double>(t);
    for (std::size_t c = 0; c < channels; ++c) {
      double v = pick(params.amplitude, c, 1.0) *
                 std::sin(2.0 * std::numbers::pi * tt / pick(params.period, c, 48.0) + pick(params.phase, c, 0.0));
      if (trend) v += pick(params.slope, c, 0.0) * tt;
      if (noisy) v += params.noise_sd * normal(rng, 0.0, 1.0);
      out.values[t * channels + c] = v;
    }
  }
  return out;
}

}  // namespace petformer::data
