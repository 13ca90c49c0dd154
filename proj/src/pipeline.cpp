#include "petformer/pipeline.hpp"

#include <charconv>
#include <chrono>
#include <fstream>
#include <functional>
#include <variant>

#include "petformer/checkpoint.hpp"
#include "petformer/errors.hpp"

namespace petformer {

namespace {

// The seed shares the size_t alternative.
static_assert(std::is_same_v<std::size_t, std::uint64_t>, "RunConfig assumes a 64-bit size_t");
using Member = std::variant<std::string RunConfig::*, std::size_t RunConfig::*, double RunConfig::*, bool RunConfig::*>;

struct Field {
  const char* key;
  Member member;
};

// Declaration order doubles as JSON echo order.
const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"data", &RunConfig::data},
      {"output_dir", &RunConfig::output_dir},
      {"l", &RunConfig::l},
      {"h", &RunConfig::h},
      {"w", &RunConfig::w},
      {"s", &RunConfig::s},
      {"d_model", &RunConfig::d_model},
      {"layers", &RunConfig::layers},
      {"heads", &RunConfig::heads},
      {"dropout", &RunConfig::dropout},
      {"ff_factor", &RunConfig::ff_factor},
      {"attention_mode", &RunConfig::attention_mode},
      {"channel_mode", &RunConfig::channel_mode},
      {"head_mode", &RunConfig::head_mode},
      {"revin", &RunConfig::revin},
      {"epochs", &RunConfig::epochs},
      {"batch_size", &RunConfig::batch_size},
      {"learning_rate", &RunConfig::learning_rate},
      {"patience", &RunConfig::patience},
      {"seed", &RunConfig::seed},
      {"loss", &RunConfig::loss},
      {"split", &RunConfig::split},
      {"train_stride", &RunConfig::train_stride},
      {"channels", &RunConfig::channels},
  };
  return table;
}

const Field& find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (key == f.key) return f;
  }
  throw ConfigError(key + ": unknown config key");
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError(key + ": cannot parse '" + text + "' as a number");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "on" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "off" || text == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

void set_from_json(RunConfig& cfg, const Field& f, const nlohmann::json& v) {
  const std::string key = f.key;
  std::visit(
      [&](auto member) {
        using T = std::remove_reference_t<decltype(cfg.*member)>;
        if constexpr (std::is_same_v<T, std::string>) {
          if (!v.is_string()) throw ConfigError(key + ": expected a string");
          cfg.*member = v.get<std::string>();
        } else if constexpr (std::is_same_v<T, bool>) {
          if (!v.is_boolean()) throw ConfigError(key + ": expected true or false");
          cfg.*member = v.get<bool>();
        } else if constexpr (std::is_same_v<T, double>) {
          if (!v.is_number()) throw ConfigError(key + ": expected a number");
          cfg.*member = v.get<double>();
        } else {
          if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0)) {
            throw ConfigError(key + ": expected a nonnegative integer");
          }
          cfg.*member = v.get<T>();
        }
      },
      f.member);
}

void set_from_text(RunConfig& cfg, const Field& f, const std::string& text) {
  const std::string key = f.key;
  std::visit(
      [&](auto member) {
        using T = std::remove_reference_t<decltype(cfg.*member)>;
        if constexpr (std::is_same_v<T, std::string>) {
          cfg.*member = text;
        } else if constexpr (std::is_same_v<T, bool>) {
          cfg.*member = parse_bool(key, text);
        } else {
          cfg.*member = parse_number<T>(key, text);
        }
      },
      f.member);
}

}  // namespace

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.emplace_back(f.key);
    return out;
  }();
  return keys;
}

ModelConfig RunConfig::model_config(std::size_t d) const {
  ModelConfig m;
  m.lookback = l;
  m.horizon = h;
  m.channels = d;
  m.patch = w;
  m.stride = effective_stride();
  m.d_model = d_model;
  m.layers = layers;
  m.heads = heads;
  m.dropout = dropout;
  m.ff_factor = ff_factor;
  m.attention = parse_attention_mode(attention_mode);
  m.channel = parse_channel_mode(channel_mode);
  m.head = parse_head_mode(head_mode);
  m.revin = revin;
  m.validate();
  return m;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.learning_rate = learning_rate;
  t.patience = patience;
  // Decorrelated from the initialisation stream, which uses `seed` directly.
  t.seed = seed ^ 0x9E3779B97F4A7C15ULL;
  t.loss = parse_loss_kind(loss);
  t.validate();
  return t;
}

void RunConfig::validate() const {
  model_config(channels == 0 ? 1 : channels);
  train_config();
  data::SplitSpec::parse(split);
  if (train_stride == 0) throw ConfigError("train_stride: must be at least 1");
  if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
}

nlohmann::ordered_json to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  for (const auto& f : fields()) {
    std::visit([&](auto member) { j[f.key] = cfg.*member; }, f.member);
  }
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  for (const auto& [key, value] : j.items()) set_from_json(base, find_field(key), value);
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string() + ": cannot open config file");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, std::move(base));
}

RunConfig apply_overrides(RunConfig cfg, const std::map<std::string, std::string>& overrides) {
  for (const auto& [key, text] : overrides) set_from_text(cfg, find_field(key), text);
  return cfg;
}

// ---------------------------------------------------------------------------

PreparedData prepare_data(const data::RawSeries& series, const RunConfig& cfg, const data::StandardScaler* scaler) {
  const std::size_t d = series.channels();
  if (cfg.channels != 0 && cfg.channels != d) {
    throw DataError("data: expected d=" + std::to_string(cfg.channels) + " channels, file has d=" + std::to_string(d));
  }
  if (scaler && scaler->mean().size() != d) {
    throw DataError("data: expected d=" + std::to_string(scaler->mean().size()) + " channels, file has d=" +
                    std::to_string(d));
  }
  PreparedData out;
  out.ranges = data::split_chronological(series.length(), data::SplitSpec::parse(cfg.split), cfg.l + cfg.h);
  out.scaler = scaler ? *scaler : data::StandardScaler::fit(series, out.ranges.train);
  out.standardized = out.scaler.transform(series.values);
  auto make = [&](data::Split split, std::size_t stride) {
    return data::WindowDataset(out.standardized, d, cfg.l, cfg.h,
                               data::split_samples(out.ranges, split, cfg.l, cfg.h, stride));
  };
  out.train = make(data::Split::kTrain, cfg.train_stride);
  out.val = make(data::Split::kVal, 1);
  out.test = make(data::Split::kTest, 1);
  return out;
}

nlohmann::ordered_json to_json(const Metrics& m) {
  nlohmann::ordered_json j;
  j["mse"] = m.mse;
  j["mae"] = m.mae;
  j["n"] = m.n;
  return j;
}

nlohmann::ordered_json to_json(const ParameterReport& r) {
  nlohmann::ordered_json j;
  j["embedding"] = r.embedding;
  j["positions"] = r.positions;
  j["placeholder"] = r.placeholder;
  j["identifiers"] = r.identifiers;
  j["encoder"] = r.encoder;
  j["interaction"] = r.interaction;
  j["head"] = r.head;
  j["revin"] = r.revin;
  j["total"] = r.total;
  j["head_fraction"] = r.head_fraction();
  return j;
}

RunOutcome run_training(const RunConfig& cfg, const data::RawSeries& series, const std::filesystem::path* out_dir,
                        const std::function<void(const std::string&)>& log) {
  cfg.validate();
  const ModelConfig mc = cfg.model_config(series.channels());
  const TrainConfig tc = cfg.train_config();
  PreparedData prepared = prepare_data(series, cfg);
  if (prepared.train.empty()) throw ConfigError("train_stride: leaves no training windows");

  std::ofstream history;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    std::ofstream(*out_dir / "config.json") << to_json(cfg).dump(2) << '\n';
    history.open(*out_dir / "history.jsonl", std::ios::binary);
    if (!history) throw DataError((*out_dir / "history.jsonl").string() + ": cannot open for writing");
  }

  PETformer model(mc, cfg.seed);
  RunOutcome outcome;
  outcome.parameters = model.count_parameters();
  auto on_epoch = [&](const EpochRecord& r) {
    if (history) history << to_json_line(r) << '\n' << std::flush;
    if (log) {
      log("epoch " + std::to_string(r.epoch) + "  train " + std::to_string(r.train_loss) + "  val " +
          std::to_string(r.val_loss));
    }
  };
  auto save = [&] {
    if (out_dir) save_checkpoint(*out_dir / "checkpoint.bin", model, &prepared.scaler, to_json(cfg));
  };

  const auto start = std::chrono::steady_clock::now();
  try {
    outcome.training = train(model, prepared.train, prepared.val, tc, on_epoch);
  } catch (const DivergenceError&) {
    save();  // the model already holds its last good state
    throw;
  }
  outcome.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  save();

  outcome.test = evaluate(model, prepared.test, cfg.batch_size);
  outcome.baseline = evaluate_repeat_last(prepared.test);
  if (out_dir) std::ofstream(*out_dir / "metrics.json") << to_json(outcome.test).dump(2) << '\n';
  return outcome;
}

}  // namespace petformer
