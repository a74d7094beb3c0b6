#pragma once

#include <memory>
#include <string>

#include "btlab/model.hpp"
#include "btlab/vocab.hpp"

#include <json.hpp>

namespace btlab::lm {

void to_json(nlohmann::ordered_json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

// Checkpoint file: magic line, 8-byte little-endian header length, JSON
// header (model config, vocab symbols, tensor directory), then the raw
// column-major double payload in tensor order. Bytes are fully determined
// by the model state, so identical runs produce identical files.
inline constexpr std::string_view kCheckpointMagic = "BTLABCKPT v1\n";

void save_checkpoint(const Model& model, const Vocab& vocab, const std::string& path);

struct LoadedCheckpoint {
    std::unique_ptr<Model> model;
    std::unique_ptr<Vocab> vocab;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace btlab::lm
