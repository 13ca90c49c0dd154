#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "petformer/data.hpp"
#include "petformer/model.hpp"
#include "petformer/train.hpp"

namespace petformer {

/// Everything a run needs. JSON keys are the snake_case names below; the
/// command line accepts the same names in kebab-case.
struct RunConfig {
  std::string data;                      // CSV path
  std::string output_dir = "run";
  std::size_t l = 720;
  std::size_t h = 96;
  std::size_t w = 48;
  std::size_t s = 0;                     // 0 means s = w
  std::size_t d_model = 512;
  std::size_t layers = 4;
  std::size_t heads = 8;
  double dropout = 0.5;
  double ff_factor = 2.0;
  std::string attention_mode = "fa";
  std::string channel_mode = "nci";
  std::string head_mode = "tokenwise";
  bool revin = true;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double learning_rate = 1e-4;
  std::size_t patience = 5;
  std::uint64_t seed = 2024;
  std::string loss = "smooth_l1";
  std::string split = "7:1:2";
  std::size_t train_stride = 1;          // keep every k-th training window
  std::size_t channels = 0;              // 0 = take from the data

  std::size_t effective_stride() const { return s == 0 ? w : s; }
  /// Model config for `d` channels. ConfigError naming the field.
  ModelConfig model_config(std::size_t d) const;
  TrainConfig train_config() const;
  /// Checks every field that does not depend on the data.
  void validate() const;
};

nlohmann::ordered_json to_json(const RunConfig& cfg);
/// Applies `j` on top of `base`. Unknown keys and wrong types are
/// ConfigErrors naming the key.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
/// Reads a JSON file into a config (DataError when unreadable, ConfigError
/// when invalid).
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
/// Applies textual overrides keyed by snake_case field name, converting each
/// value to the field's type.
RunConfig apply_overrides(RunConfig cfg, const std::map<std::string, std::string>& overrides);
/// The snake_case names of every RunConfig field, in declaration order.
const std::vector<std::string>& run_config_keys();

struct PreparedData {
  data::SplitRanges ranges;
  data::StandardScaler scaler;
  std::vector<double> standardized;  // T x d
  data::WindowDataset train;
  data::WindowDataset val;
  data::WindowDataset test;
};

/// Splits, fits the scaler on the training range and windows every split.
/// With a scaler given, it is used instead of fitting one.
PreparedData prepare_data(const data::RawSeries& series, const RunConfig& cfg,
                          const data::StandardScaler* scaler = nullptr);

struct RunOutcome {
  TrainResult training;
  Metrics test;
  Metrics baseline;  // repeat-last-value on the same test windows
  ParameterReport parameters;
  double train_seconds = 0.0;
};

/// Train on `series`, evaluate on its test split. With `out_dir` set, writes
/// config.json, history.jsonl, checkpoint.bin and metrics.json there.
/// `log` receives one human-readable line per epoch.
RunOutcome run_training(const RunConfig& cfg, const data::RawSeries& series, const std::filesystem::path* out_dir,
                        const std::function<void(const std::string&)>& log = {});

/// {"mse": .., "mae": .., "n": ..}.
nlohmann::ordered_json to_json(const Metrics& m);
nlohmann::ordered_json to_json(const ParameterReport& r);

}  // namespace petformer
