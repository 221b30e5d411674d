#pragma once

// Evaluation and probing metrics: corpus BLEU-4 (multi-bleu semantics, no
// smoothing), Top-1 Agreement, top-k edit/ranking distances between teacher
// and student rankings, teacher/gold overlap rate, and paired bootstrap
// resampling.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tiekd/data.hpp"
#include "tiekd/model.hpp"

namespace tiekd {

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

// Corpus-level BLEU-4 in [0,100]: geometric mean of modified n-gram
// precisions with brevity penalty; an n-gram order with zero matches gives 0.
double corpus_bleu(const std::vector<std::vector<int>>& hypotheses, const std::vector<std::vector<int>>& references);

// Per-sentence sufficient statistics, summable across any sentence subset.
struct BleuStats {
    std::array<int64_t, 4> matches{};
    std::array<int64_t, 4> totals{};
    int64_t hyp_len = 0;
    int64_t ref_len = 0;

    BleuStats& operator+=(const BleuStats& o);
};

BleuStats bleu_sentence_stats(const std::vector<int>& hyp, const std::vector<int>& ref);
double bleu_from_stats(const BleuStats& stats);

// p-value for "system B beats system A": fraction of resamples where B's
// BLEU falls at or below A's, ties counted as 1/2. Deterministic under seed.
double paired_bootstrap(const std::vector<std::vector<int>>& hyps_a, const std::vector<std::vector<int>>& hyps_b,
                        const std::vector<std::vector<int>>& refs, int n_resamples, uint64_t seed);

// ---------------------------------------------------------------------------
// ranking metrics
// ---------------------------------------------------------------------------

// Teacher and student top-k token lists at one position plus the student's
// full-vocabulary ranking (token id -> 1-based rank), ties toward lower ids.
struct RankingPair {
    std::vector<int> teacher_topk;
    std::vector<int> student_topk;
    std::vector<int> student_rank_of;
};

RankingPair make_ranking_pair(const float* teacher_row, const float* student_row, int vocab, int k);

// Mean Levenshtein distance between teacher and student top-k lists.
double topk_edit_distance(const std::vector<RankingPair>& pairs, int k);

// Mean capped displacement (1/(Nk)) sum_j sum_i min(k, |i - r_s(t_i)|).
double topk_ranking_distance(const std::vector<RankingPair>& pairs, int k);

int levenshtein(const std::vector<int>& a, const std::vector<int>& b);

// ---------------------------------------------------------------------------
// teacher-forced corpus scans
// ---------------------------------------------------------------------------

// Invokes fn at every supervised position of the selected sentences with the
// models' logit rows under teacher forcing (eval mode, grad-free).
// `student_row` is null when `student` is null.
using PositionFn =
    std::function<void(int64_t sentence, int step, const float* student_row, const float* teacher_row, int gold)>;
void teacher_forced_scan(const Seq2SeqModel* student, const Seq2SeqModel* teacher, const ParallelCorpus& corpus,
                         const std::vector<int64_t>& indices, int64_t batch_tokens, const PositionFn& fn);

// Fraction of supervised positions where student and teacher argmax agree.
double top1_agreement(const Seq2SeqModel& student, const Seq2SeqModel& teacher, const ParallelCorpus& corpus,
                      int64_t max_sentences = -1, int64_t batch_tokens = 512);

// Fraction of supervised positions where the student argmax equals gold.
double token_accuracy(const Seq2SeqModel& student, const ParallelCorpus& corpus, int64_t max_sentences = -1,
                      int64_t batch_tokens = 512);

// Teacher-vs-gold argmax overlap over `sample_n` seeded sampled sentences
// (clamped to the corpus size with a warning to stderr).
double overlap_rate(const Seq2SeqModel& teacher, const ParallelCorpus& corpus, int64_t sample_n, uint64_t seed);

// D_edit/D_rank between two models over a corpus slice.
struct RankingDistances {
    double d_edit = 0;
    double d_rank = 0;
};
RankingDistances ranking_distances(const Seq2SeqModel& student, const Seq2SeqModel& teacher,
                                   const ParallelCorpus& corpus, int k, int64_t max_sentences = -1,
                                   int64_t batch_tokens = 512);

// ---------------------------------------------------------------------------
// run reports
// ---------------------------------------------------------------------------

struct RunReport {
    double bleu = 0;
    double token_acc = 0;
    double ta = 0;
    double d_edit = 0;
    double d_rank = 0;
    double overlap = 0;
    std::optional<double> p_value;
    double wall_time_s = 0;

    nlohmann::json to_json() const;
    static RunReport from_json(const nlohmann::json& j);
};

}  // namespace tiekd
