#pragma once

// Checkpoint container: one JSON header line (config / metadata plus an array
// manifest with name, shape and byte offset), followed by the raw
// little-endian f32 payload. Round-trips are bit-exact.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tiekd/model.hpp"

namespace tiekd {

struct NamedArrays {
    nlohmann::json meta;  // header "meta" object (config, step, rng, ...)
    std::vector<std::pair<std::string, std::vector<float>>> arrays;

    const std::vector<float>& array(const std::string& name) const;
    bool has(const std::string& name) const;
};

void save_named_arrays(const std::string& path, const NamedArrays& content);
NamedArrays load_named_arrays(const std::string& path);

// FNV-1a over a file's bytes; used for distilled-corpus provenance.
std::string file_fnv1a_hex(const std::string& path);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

void save_model(const std::string& path, const Seq2SeqModel& model,
                const nlohmann::json& extra_meta = nlohmann::json::object());
Seq2SeqModel load_model(const std::string& path);

// Loads parameter values from a checkpoint into an already-built model
// (shapes must match). Returns the header meta.
nlohmann::json load_model_params(const std::string& path, Seq2SeqModel& model);

}  // namespace tiekd
