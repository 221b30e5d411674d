#pragma once

// Synthetic translation tasks with controllable lexical ambiguity.
//
// Each source symbol owns a synonym set of size m in the target vocabulary;
// the dominant synonym is emitted with probability pi, every alternative with
// (1-pi)/(m-1). Word order is optionally scrambled by one fixed, seeded
// permutation per window size, so the conditional distribution of every
// target token is known in closed form and the teacher/gold top-1 overlap
// rate is tunable through pi.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tiekd/model.hpp"
#include "tiekd/rng.hpp"

namespace tiekd {

struct TaskSpec {
    int src_vocab_size = 52;  // includes the 4 reserved ids
    int tgt_vocab_size = -1;  // -1: derived as 4 + m * (src_vocab_size - 4)
    int synonym_set_size = 2;
    double dominant_prob = 0.75;
    int reorder_window = 0;  // 0 or 1 = monotone
    int min_len = 4;
    int max_len = 10;
    int n_train = 10000;
    int n_valid = 1000;
    int n_test = 1000;
    uint64_t seed = 1;

    int n_symbols() const { return src_vocab_size - kNumSpecialTokens; }
    int tgt_vocab_total() const {
        return tgt_vocab_size > 0 ? tgt_vocab_size : kNumSpecialTokens + synonym_set_size * n_symbols();
    }
    void validate() const;

    bool operator==(const TaskSpec&) const = default;
};

nlohmann::json task_spec_to_json(const TaskSpec& spec);
TaskSpec task_spec_from_json(const nlohmann::json& j);

struct SentencePair {
    std::vector<int> src;
    std::vector<int> tgt;  // content tokens only; EOS/BOS added at batch time

    bool operator==(const SentencePair&) const = default;
};

struct ParallelCorpus {
    std::vector<SentencePair> pairs;

    bool operator==(const ParallelCorpus&) const = default;
    size_t size() const { return pairs.size(); }
};

// Deterministic task instance: fixed window permutations and synonym layout.
class SynonymTask {
  public:
    explicit SynonymTask(TaskSpec spec);

    const TaskSpec& spec() const { return spec_; }
    int n_symbols() const { return spec_.n_symbols(); }

    int dominant_id(int symbol) const { return kNumSpecialTokens + symbol * spec_.synonym_set_size; }
    int synonym_id(int symbol, int variant) const {
        return kNumSpecialTokens + symbol * spec_.synonym_set_size + variant;
    }
    // Source symbol index for src id, -1 for specials.
    int symbol_of_src(int src_id) const { return src_id >= kNumSpecialTokens ? src_id - kNumSpecialTokens : -1; }

    // Pre-reorder source position feeding target position j of a length-n sentence.
    int source_position_for_target(int n, int j) const;

    // Closed-form conditional distribution of the target token at position j
    // (over the full target vocabulary; EOS at position n gets all mass).
    std::vector<double> oracle_distribution(const std::vector<int>& src, int j) const;

    ParallelCorpus generate_split(int count, uint64_t stream) const;

    // train=0, valid=1, test=2 substreams of spec.seed.
    ParallelCorpus train() const { return generate_split(spec_.n_train, 0); }
    ParallelCorpus valid() const { return generate_split(spec_.n_valid, 1); }
    ParallelCorpus test() const { return generate_split(spec_.n_test, 2); }

    nlohmann::json src_vocab_json() const;
    nlohmann::json tgt_vocab_json() const;

  private:
    const std::vector<int>& window_perm(int size) const;

    TaskSpec spec_;
    std::vector<std::vector<int>> perms_;  // index = window size
};

void save_corpus_jsonl(const std::string& path, const ParallelCorpus& corpus);
ParallelCorpus load_corpus_jsonl(const std::string& path);

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

// One padded training batch under teacher forcing. `gold` holds the expected
// output at each decoder position (target shifted left, EOS-terminated);
// `mask` marks supervised (non-PAD) positions.
struct Batch {
    TokenMatrix src;
    TokenMatrix tgt_in;
    std::vector<int> gold;
    std::vector<uint8_t> mask;
    std::vector<uint8_t> flags;            // distilled-corpus top-1 flags, empty for gold data
    std::vector<int64_t> sentence_index;   // per row, index into the source corpus
    int64_t tgt_tokens() const;
};

struct BatchItem {
    const std::vector<int>* src = nullptr;
    std::vector<int> target;              // full target incl. terminal EOS
    std::vector<uint8_t> flags;           // aligned with target; may be empty
    int64_t sentence_index = 0;
};

Batch make_batch(const std::vector<BatchItem>& items);

// Gold-data view: target = tgt + EOS, no flags.
BatchItem gold_item(const ParallelCorpus& corpus, int64_t index);

// Groups `order` into batches of at most `batch_tokens` target tokens
// (at least one sentence per batch), preserving order.
std::vector<std::vector<int64_t>> pack_batches(const std::vector<int64_t>& order,
                                               const std::vector<int64_t>& target_lengths, int64_t batch_tokens);

}  // namespace tiekd
