#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   bytes 0..7    magic "PETFCKP1"
//   bytes 8..15   u64 header length H
//   next H bytes  UTF-8 JSON header:
//                   {"format": 1,
//                    "model":   {model config},
//                    "scaler":  {"mean": [..], "scale": [..]} | null,
//                    "extra":   {free-form, e.g. the run config},
//                    "tensors": [{"name": s, "shape": [..], "offset": bytes}, ..]}
//   remainder     tensor payload: IEEE-754 f64 values, little-endian,
//                 row-major; "offset" counts from the payload start.
//
// Parameters and buffers (BatchNorm running statistics) are both stored, so
// a load reproduces inference bit for bit.

#include <filesystem>
#include <memory>
#include <optional>

#include <json.hpp>

#include "petformer/data.hpp"
#include "petformer/model.hpp"

namespace petformer {

nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg);
/// Missing keys keep their defaults; unknown keys and type errors are
/// ConfigErrors naming the key.
ModelConfig model_config_from_json(const nlohmann::json& j);

struct LoadedCheckpoint {
  std::unique_ptr<PETformer> model;
  std::optional<data::StandardScaler> scaler;
  nlohmann::json extra;
};

void save_checkpoint(const std::filesystem::path& path, const PETformer& model,
                     const data::StandardScaler* scaler = nullptr, const nlohmann::json& extra = nlohmann::json::object());

/// DataError on a malformed file or a tensor set that does not match the
/// stored config.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace petformer
