#include "petformer/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "petformer/checkpoint.hpp"
#include "petformer/errors.hpp"
#include "petformer/pipeline.hpp"

namespace petformer::cli {

namespace fs = std::filesystem;

namespace {

std::string kebab(std::string key) {
  for (auto& ch : key) {
    if (ch == '_') ch = '-';
  }
  return key;
}

// Shortest text that parses back to the same double.
std::string num(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string csv_field(const std::string& text) {
  if (text.find_first_of(",\"\n") == std::string::npos) return text;
  std::string out = "\"";
  for (char ch : text) {
    if (ch == '"') out += '"';
    out += ch == '\n' ? ' ' : ch;
  }
  return out + "\"";
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot open for writing");
  return out;
}

// Every RunConfig field as a kebab-case flag plus --config. Values are kept
// as text and converted by apply_overrides so flag and file share one parser.
class RunFlags {
 public:
  void attach(CLI::App* app) {
    app->add_option("--config", config_path_, "JSON run config; flags override its values");
    const auto defaults = to_json(RunConfig{});
    for (const auto& key : run_config_keys()) {
      const auto& d = defaults.at(key);
      app->add_option("--" + kebab(key), values_[key], key)
          ->default_str(d.is_string() ? d.get<std::string>() : d.dump())
          ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);  // a later flag overrides an earlier one
      options_[key] = app->get_option("--" + kebab(key));
    }
  }

  // defaults < config file < flags
  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path_.empty()) cfg = load_run_config(config_path_);
    std::map<std::string, std::string> given;
    for (const auto& [key, opt] : options_) {
      if (opt->count() > 0) given[key] = values_.at(key);
    }
    return apply_overrides(std::move(cfg), given);
  }

 private:
  std::string config_path_;
  std::map<std::string, std::string> values_;
  std::map<std::string, CLI::Option*> options_;
};

data::RawSeries load_series(const RunConfig& cfg) {
  if (cfg.data.empty()) throw ConfigError("data: a CSV path is required (--data)");
  return data::load_csv(cfg.data);
}

void print_metrics(std::ostream& out, const char* label, const Metrics& m) {
  out << std::left << std::setw(12) << label << " mse=" << num(m.mse) << " mae=" << num(m.mae) << " n=" << m.n
      << '\n';
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string kind = "sine";
  std::size_t length = 10000;  // long enough for the default l + h in every split
  std::size_t channels = 3;
  std::uint64_t seed = 2024;
  std::vector<double> amplitude, period, phase, slope;
  double noise = 0.0;
  std::string out = "synthetic.csv";
  CLI::Option* noise_opt = nullptr;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  const auto kind = data::parse_synth_kind(a.kind);
  auto params = data::SynthParams::defaults(kind);
  if (!a.amplitude.empty()) params.amplitude = a.amplitude;
  if (!a.period.empty()) params.period = a.period;
  if (!a.phase.empty()) params.phase = a.phase;
  if (!a.slope.empty()) params.slope = a.slope;
  if (a.noise_opt->count() > 0) params.noise_sd = a.noise;
  if (a.length == 0) throw ConfigError("T: series length must be at least 1");
  if (a.channels == 0) throw ConfigError("d: channel count must be at least 1");
  const auto series = data::synthesize(kind, a.length, a.channels, params, a.seed);
  const fs::path path = a.out;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  data::write_csv(path, series);
  out << "wrote " << series.length() << "x" << series.channels() << " series to " << path.string() << '\n';
  return kOk;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  cfg.validate();  // config errors surface before the data is read
  const auto series = load_series(cfg);
  const fs::path dir = cfg.output_dir;
  const auto outcome = run_training(cfg, series, &dir, [&](const std::string& line) { out << line << '\n'; });
  out << "best epoch " << outcome.training.best_epoch << " val " << num(outcome.training.best_val_loss)
      << (outcome.training.stopped_early ? " (early stop)" : "") << '\n';
  print_metrics(out, "test", outcome.test);
  print_metrics(out, "repeat-last", outcome.baseline);
  out << "parameters " << outcome.parameters.total << " (head " << outcome.parameters.head << ")\n";
  out << "outputs in " << dir.string() << '\n';
  return kOk;
}

struct Restored {
  LoadedCheckpoint checkpoint;
  RunConfig cfg;
  data::RawSeries series;
};

Restored restore(const std::string& checkpoint, const std::string& data_override) {
  Restored r;
  r.checkpoint = load_checkpoint(checkpoint);
  if (!r.checkpoint.extra.is_object() || r.checkpoint.extra.empty()) {
    throw DataError(checkpoint + ": no run config stored in checkpoint");
  }
  r.cfg = run_config_from_json(r.checkpoint.extra);
  if (!data_override.empty()) r.cfg.data = data_override;
  r.series = load_series(r.cfg);
  const std::size_t expected = r.checkpoint.model->config().channels;
  if (r.series.channels() != expected) {
    throw DataError("data: expected d=" + std::to_string(expected) + " channels, file has d=" +
                    std::to_string(r.series.channels()));
  }
  return r;
}

fs::path output_dir_for(const std::string& given, const std::string& checkpoint) {
  if (!given.empty()) return given;
  const fs::path parent = fs::path(checkpoint).parent_path();
  return parent.empty() ? fs::path(".") : parent;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& output_dir, std::ostream& out) {
  auto r = restore(checkpoint, data);
  const auto& scaler = r.checkpoint.scaler;
  const auto prepared = prepare_data(r.series, r.cfg, scaler ? &*scaler : nullptr);
  const Metrics m = evaluate(*r.checkpoint.model, prepared.test, r.cfg.batch_size);
  const Metrics base = evaluate_repeat_last(prepared.test);
  print_metrics(out, "test", m);
  print_metrics(out, "repeat-last", base);
  const fs::path dir = output_dir_for(output_dir, checkpoint);
  open_output(dir / "metrics.json") << to_json(m).dump(2) << '\n';
  return kOk;
}

int cmd_forecast(const std::string& checkpoint, const std::string& data, std::size_t origin,
                 const std::string& output_dir, std::ostream& out) {
  auto r = restore(checkpoint, data);
  const auto& mc = r.checkpoint.model->config();
  const std::size_t l = mc.lookback, h = mc.horizon, d = mc.channels, T = r.series.length();
  if (T < l + h) {
    throw ConfigError("origin: series of length " + std::to_string(T) + " is shorter than l+h=" +
                      std::to_string(l + h));
  }
  if (origin < l || origin > T - h) {
    throw ConfigError("origin: " + std::to_string(origin) + " is out of range, valid origins are [" +
                      std::to_string(l) + ", " + std::to_string(T - h) + "]");
  }
  const data::StandardScaler scaler =
      r.checkpoint.scaler ? *r.checkpoint.scaler
                          : data::StandardScaler::fit(
                                r.series, data::split_chronological(T, data::SplitSpec::parse(r.cfg.split)).train);
  std::vector<double> history(r.series.values.begin() + static_cast<std::ptrdiff_t>((origin - l) * d),
                              r.series.values.begin() + static_cast<std::ptrdiff_t>(origin * d));
  const Tensor pred = r.checkpoint.model->forward(Tensor({l, d}, scaler.transform(history)), false);
  const auto p = pred.data();

  const fs::path path = output_dir_for(output_dir, checkpoint) / "forecasts" / ("origin_" + std::to_string(origin) + ".csv");
  auto file = open_output(path);
  file << "index,timestamp,channel,truth,prediction\n";
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t k = 0; k < h; ++k) {
      const std::size_t t = origin + k;
      file << t << ',' << csv_field(r.series.timestamps[t]) << ',' << csv_field(r.series.channel_names[c]) << ','
           << num(r.series.at(t, c)) << ',' << num(scaler.inverse_one(p[k * d + c], c)) << '\n';
    }
  }
  if (!file) throw DataError(path.string() + ": write failed");
  out << "wrote " << h << " steps x " << d << " channels to " << path.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes = {"attention_mode", "channel_mode", "head_mode", "w",
                                                "l",              "loss_kind",    "revin"};
  return axes;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : ", ") + s;
  return out;
}

int cmd_ablate(const RunConfig& base, std::string axis, const std::vector<std::string>& values, std::ostream& out) {
  if (axis == "loss") axis = "loss_kind";
  const auto& axes = ablation_axes();
  if (std::find(axes.begin(), axes.end(), axis) == axes.end()) {
    throw ConfigError("axis: unknown ablation axis '" + axis + "', valid axes are " + join(axes));
  }
  if (values.empty()) throw ConfigError("values: at least one grid value is required");
  const std::string field = axis == "loss_kind" ? "loss" : axis;
  // The base may only become valid once the swept field is set; a base no
  // grid value repairs is rejected before any data is read.
  std::optional<ConfigError> invalid;
  for (const auto& value : values) {
    try {
      apply_overrides(base, {{field, value}}).validate();
      invalid.reset();
      break;
    } catch (const ConfigError& e) {
      if (!invalid) invalid = e;
    }
  }
  if (invalid) throw *invalid;
  const auto series = load_series(base);

  const fs::path dir = base.output_dir;
  fs::create_directories(dir);
  const fs::path path = dir / "ablation.csv";
  auto table = open_output(path);
  table << "axis,value,mse,mae,head_params,total_params,train_seconds,error\n" << std::flush;

  for (const auto& value : values) {
    std::string mse, mae, head, total, seconds, error;
    try {
      RunConfig cfg = apply_overrides(base, {{field, value}});
      // Keep patches non-overlapping when the base stride tracked w.
      if (axis == "w" && base.s == base.w) cfg.s = cfg.w;
      try {
        const auto report = PETformer(cfg.model_config(series.channels()), cfg.seed).count_parameters();
        head = std::to_string(report.head);
        total = std::to_string(report.total);
      } catch (const Error&) {
        // reported through the run below
      }
      const auto outcome = run_training(cfg, series, nullptr);
      mse = num(outcome.test.mse);
      mae = num(outcome.test.mae);
      std::ostringstream secs;
      secs << std::fixed << std::setprecision(3) << outcome.train_seconds;
      seconds = secs.str();
    } catch (const std::exception& e) {
      error = e.what();
    }
    table << axis << ',' << csv_field(value) << ',' << mse << ',' << mae << ',' << head << ',' << total << ','
          << seconds << ',' << csv_field(error) << '\n'
          << std::flush;
    out << axis << '=' << value << "  " << (error.empty() ? "mse=" + mse + " mae=" + mae : "error: " + error) << '\n';
  }
  if (!table) throw DataError(path.string() + ": write failed");
  out << "wrote " << path.string() << '\n';
  return kOk;
}

int cmd_count_params(const RunConfig& cfg, std::ostream& out) {
  std::size_t d = cfg.channels;
  if (d == 0) d = cfg.data.empty() ? 1 : data::load_csv(cfg.data).channels();
  const PETformer model(cfg.model_config(d), cfg.seed);
  out << to_json(model.count_parameters()).dump(2) << '\n';
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"PETformer long-term time-series forecasting"};
  app.name("petformer");
  app.require_subcommand(1, 1);
  // -h would shadow the horizon flag --h; subcommands inherit this.
  app.set_help_flag("--help", "Print this help message and exit");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write a synthetic series as CSV");
  s->add_option("--kind", synth.kind, "sine | sine+trend | sine+noise")->capture_default_str();
  s->add_option("--T,--length", synth.length, "Number of time steps")->capture_default_str();
  s->add_option("--d,--channels", synth.channels, "Number of channels")->capture_default_str();
  s->add_option("--seed", synth.seed, "Noise seed")->capture_default_str();
  s->add_option("--amplitude", synth.amplitude, "Per-channel amplitudes (last repeats)")->delimiter(',');
  s->add_option("--period", synth.period, "Per-channel periods (default 48)")->delimiter(',');
  s->add_option("--phase", synth.phase, "Per-channel phases in radians")->delimiter(',');
  s->add_option("--slope", synth.slope, "Per-channel trend slopes (sine+trend)")->delimiter(',');
  synth.noise_opt = s->add_option("--noise", synth.noise, "Noise standard deviation (sine+noise)");
  s->add_option("--out", synth.out, "Output CSV path")->capture_default_str();

  RunFlags train_flags;
  auto* t = app.add_subcommand("train", "Train a model and evaluate it on the test split");
  train_flags.attach(t);

  std::string checkpoint, eval_data, eval_dir;
  auto* e = app.add_subcommand("eval", "Score a checkpoint on the test split of a series");
  e->add_option("--checkpoint", checkpoint, "checkpoint.bin written by train")->required();
  e->add_option("--data", eval_data, "CSV to score (default: the training data)");
  e->add_option("--output-dir", eval_dir, "Where metrics.json goes (default: the checkpoint's directory)");

  std::size_t origin = 0;
  auto* f = app.add_subcommand("forecast", "Forecast one window and write it as tidy CSV");
  f->add_option("--checkpoint", checkpoint, "checkpoint.bin written by train")->required();
  f->add_option("--data", eval_data, "CSV to forecast (default: the training data)");
  f->add_option("--origin", origin, "Index of the first forecast step")->required();
  f->add_option("--output-dir", eval_dir, "Parent of forecasts/ (default: the checkpoint's directory)");

  RunFlags ablate_flags;
  std::string axis;
  std::vector<std::string> values;
  auto* a = app.add_subcommand("ablate", "Train one run per value of a single config axis");
  ablate_flags.attach(a);
  a->add_option("--axis", axis, join(ablation_axes()))->required();
  a->add_option("--values", values, "Comma-separated grid values")->required()->delimiter(',');

  RunFlags count_flags;
  auto* c = app.add_subcommand("count-params", "Report parameter counts per component as JSON");
  count_flags.attach(c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*s) return cmd_synth(synth, out);
    if (*t) return cmd_train(train_flags.resolve(), out);
    if (*e) return cmd_eval(checkpoint, eval_data, eval_dir, out);
    if (*f) return cmd_forecast(checkpoint, eval_data, origin, eval_dir, out);
    if (*a) return cmd_ablate(ablate_flags.resolve(), axis, values, out);
    if (*c) return cmd_count_params(count_flags.resolve(), out);
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << '\n';
    return kUsage;
  } catch (const DataError& ex) {
    err << "data error: " << ex.what() << '\n';
    return kData;
  } catch (const DimensionError& ex) {
    err << "data error: " << ex.what() << '\n';
    return kData;
  } catch (const DivergenceError& ex) {
    err << "diverged: " << ex.what() << '\n';
    return kDivergence;
  } catch (const fs::filesystem_error& ex) {
    err << "io error: " << ex.what() << '\n';
    return kData;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kFailure;
  }
  return kFailure;
}

}  // namespace petformer::cli
