#include "petformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "petformer/errors.hpp"

namespace petformer {

namespace {

constexpr char kMagic[8] = {'P', 'E', 'T', 'F', 'C', 'K', 'P', '1'};
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(const unsigned char* b) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::vector<nn::NamedTensor> all_tensors(const PETformer& model) {
  auto out = model.parameters();
  for (auto& b : model.buffers()) out.push_back(std::move(b));
  return out;
}

template <typename T>
T field(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string(key) + ": wrong type in config");
  }
}

}  // namespace

nlohmann::ordered_json model_config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["l"] = c.lookback;
  j["h"] = c.horizon;
  j["d"] = c.channels;
  j["w"] = c.patch;
  j["s"] = c.stride;
  j["d_model"] = c.d_model;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["dropout"] = c.dropout;
  j["ff_factor"] = c.ff_factor;
  j["attention_mode"] = to_string(c.attention);
  j["channel_mode"] = to_string(c.channel);
  j["head_mode"] = to_string(c.head);
  j["revin"] = c.revin;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model: config must be a JSON object");
  static const char* const kKeys[] = {"l",      "h",       "d",         "w",              "s",
                                      "d_model", "layers", "heads",     "dropout",        "ff_factor",
                                      "attention_mode", "channel_mode", "head_mode", "revin"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(kKeys), std::end(kKeys), key) == std::end(kKeys)) {
      throw ConfigError(key + ": unknown model config key");
    }
  }
  ModelConfig c;
  c.lookback = field(j, "l", c.lookback);
  c.horizon = field(j, "h", c.horizon);
  c.channels = field(j, "d", c.channels);
  c.patch = field(j, "w", c.patch);
  c.stride = field(j, "s", c.stride);
  c.d_model = field(j, "d_model", c.d_model);
  c.layers = field(j, "layers", c.layers);
  c.heads = field(j, "heads", c.heads);
  c.dropout = field(j, "dropout", c.dropout);
  c.ff_factor = field(j, "ff_factor", c.ff_factor);
  if (j.contains("attention_mode")) c.attention = parse_attention_mode(field<std::string>(j, "attention_mode", ""));
  if (j.contains("channel_mode")) c.channel = parse_channel_mode(field<std::string>(j, "channel_mode", ""));
  if (j.contains("head_mode")) c.head = parse_head_mode(field<std::string>(j, "head_mode", ""));
  c.revin = field(j, "revin", c.revin);
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const PETformer& model, const data::StandardScaler* scaler,
                     const nlohmann::json& extra) {
  nlohmann::ordered_json header;
  header["format"] = 1;
  header["model"] = model_config_to_json(model.config());
  if (scaler) {
    header["scaler"] = {{"mean", scaler->mean()}, {"scale", scaler->scale()}};
  } else {
    header["scaler"] = nullptr;
  }
  header["extra"] = extra;
  auto tensors = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  const auto named = all_tensors(model);
  for (const auto& [name, t] : named) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel() * sizeof(double);
  }
  header["tensors"] = tensors;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot open checkpoint for writing");
  out.write(kMagic, sizeof(kMagic));
  put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : named) {
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!out) throw DataError(path.string() + ": checkpoint write failed");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open checkpoint");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw DataError(where + "not a checkpoint file");
  }
  const std::uint64_t header_len = get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw DataError(where + "truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + "malformed header: " + e.what());
  }
  if (header.value("format", 0) != 1) throw DataError(where + "unsupported checkpoint format");
  const std::size_t payload = 16 + header_len;

  LoadedCheckpoint out;
  out.model = std::make_unique<PETformer>(model_config_from_json(header.at("model")), 0);
  if (!header["scaler"].is_null()) {
    out.scaler = data::StandardScaler(header["scaler"].at("mean").get<std::vector<double>>(),
                                      header["scaler"].at("scale").get<std::vector<double>>());
  }
  out.extra = header.value("extra", nlohmann::json::object());

  std::map<std::string, const nlohmann::json*> entries;
  for (const auto& e : header.at("tensors")) entries[e.at("name").get<std::string>()] = &e;
  const auto named = all_tensors(*out.model);
  if (entries.size() != named.size()) {
    throw DataError(where + "stores " + std::to_string(entries.size()) + " tensors, model expects " +
                    std::to_string(named.size()));
  }
  for (const auto& [name, t] : named) {
    const auto it = entries.find(name);
    if (it == entries.end()) throw DataError(where + "missing tensor '" + name + "'");
    const auto shape = it->second->at("shape").get<Shape>();
    if (shape != t.shape()) {
      throw DataError(where + "tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                      shape_str(t.shape()));
    }
    const auto offset = it->second->at("offset").get<std::uint64_t>();
    const std::size_t len = t.numel() * sizeof(double);
    if (offset > bytes.size() - payload || len > bytes.size() - payload - offset) {
      throw DataError(where + "tensor '" + name + "' extends past end of file");
    }
    std::memcpy(Tensor(t).mutable_data().data(), bytes.data() + payload + offset, len);
  }
  return out;
}

}  // namespace petformer
