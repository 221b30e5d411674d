#pragma once

// Run configuration: one JSON document that pins everything a training run
// needs (task, model, objective, paths). Emitted resolved into each run
// directory so any experiment reproduces from its own config.json.

#include <string>
#include <vector>

#include "json.hpp"
#include "tiekd/data.hpp"
#include "tiekd/model.hpp"
#include "tiekd/trainer.hpp"

namespace tiekd {

struct RunConfig {
    TaskSpec task;
    ModelConfig model;                  // the model being trained
    TrainConfig train;
    std::string teacher_checkpoint;     // optional path to a frozen teacher
    std::string data_dir;               // optional: load corpora instead of generating
    std::string distilled_corpus;       // optional path (seq_kd / combined)

    // Fills model.vocab_size from the task when unset.
    void resolve();
};

nlohmann::json run_config_to_json(const RunConfig& cfg);
// Strict: unknown keys anywhere are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);

nlohmann::json load_json_file(const std::string& path);
void save_json_file(const std::string& path, const nlohmann::json& j, int indent = 2);

// Applies "dotted.path=value" overrides; values parse as JSON scalars and
// fall back to strings.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// Rejects keys outside `allowed`; context names the object in the error.
void require_known_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                        const std::string& context);

// Shared-id-space vocabulary size a model needs for this task.
int model_vocab_for_task(const TaskSpec& task);

}  // namespace tiekd
