#pragma once

// End-to-end experiment suites: train a teacher once, then sweep KD variants
// across seeds and emit comparison tables (CSV + JSON). Covers the soft-target
// surgery probes, the top-k truncation sweep, the confidence-bucket sweep, the
// sequence-level KD target split, and the ablation grid.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "tiekd/config.hpp"
#include "tiekd/decode.hpp"
#include "tiekd/metrics.hpp"
#include "tiekd/trainer.hpp"

namespace tiekd {

enum class SuiteKind { kSurgery, kTopk, kBucket, kSeqKd, kAblation };

SuiteKind suite_kind_parse(const std::string& text);
std::string suite_kind_to_string(SuiteKind kind);

struct SuiteOptions {
    TaskSpec task;
    std::vector<uint64_t> seeds = {1, 2, 3};
    ModelConfig teacher_model;      // vocab_size 0 = derive from task
    ModelConfig student_model;
    TrainConfig teacher_train;
    TrainConfig student_train;
    BeamConfig distill_beam;        // sequence-level corpus construction
    std::string out_dir;            // empty: nothing written
    std::string teacher_checkpoint; // load when present, else train and save here
    int threads = 1;                // opt-in parallel (variant, seed) cells

    void resolve();
    nlohmann::json to_json() const;
    static SuiteOptions from_json(const nlohmann::json& j);
};

// Frozen desk-scale defaults every table in this project is produced with.
SuiteOptions default_suite_options();

struct SuiteCell {
    std::string variant;
    uint64_t seed = 0;
    RunReport report;
};

struct SuiteAggregate {
    std::string variant;
    RunReport mean;
    RunReport stdev;
};

struct SuiteResult {
    SuiteKind kind = SuiteKind::kSurgery;
    std::vector<std::string> variants;  // row order
    std::vector<SuiteCell> cells;
    std::vector<SuiteAggregate> aggregates;
    double teacher_overlap = 0.0;
    double teacher_token_acc = 0.0;
    double distilled_top1_fraction = -1.0;  // seq-KD suites only

    const RunReport& cell(const std::string& variant, uint64_t seed) const;
    const SuiteAggregate& aggregate(const std::string& variant) const;
    nlohmann::json to_json() const;
    std::string to_csv() const;
};

SuiteResult run_suite(SuiteKind kind, const SuiteOptions& opts);

// Exact mean/stdev over the per-seed rows of one variant (mean summed in
// seed order, stdev is the population deviation).
std::vector<SuiteAggregate> aggregate_cells(const std::vector<std::string>& variants,
                                            const std::vector<SuiteCell>& cells);

}  // namespace tiekd
