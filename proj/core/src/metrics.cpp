#include "tiekd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <numeric>
#include <stdexcept>

#include "tiekd/ranking.hpp"
#include "tiekd/rng.hpp"

namespace tiekd {

using nlohmann::json;

BleuStats& BleuStats::operator+=(const BleuStats& o) {
    for (int n = 0; n < 4; ++n) {
        matches[n] += o.matches[n];
        totals[n] += o.totals[n];
    }
    hyp_len += o.hyp_len;
    ref_len += o.ref_len;
    return *this;
}

namespace {

// Packs up to 4 token ids into one key; ids are small in this project but a
// map on vectors keeps it general.
using Ngram = std::vector<int>;

std::map<Ngram, int64_t> ngram_counts(const std::vector<int>& tokens, int n) {
    std::map<Ngram, int64_t> counts;
    if (static_cast<int>(tokens.size()) < n) return counts;
    for (size_t i = 0; i + n <= tokens.size(); ++i) counts[Ngram(tokens.begin() + i, tokens.begin() + i + n)]++;
    return counts;
}

}  // namespace

BleuStats bleu_sentence_stats(const std::vector<int>& hyp, const std::vector<int>& ref) {
    BleuStats stats;
    stats.hyp_len = static_cast<int64_t>(hyp.size());
    stats.ref_len = static_cast<int64_t>(ref.size());
    for (int n = 1; n <= 4; ++n) {
        const auto hyp_counts = ngram_counts(hyp, n);
        const auto ref_counts = ngram_counts(ref, n);
        int64_t total = 0, match = 0;
        for (const auto& [gram, count] : hyp_counts) {
            total += count;
            auto it = ref_counts.find(gram);
            if (it != ref_counts.end()) match += std::min(count, it->second);
        }
        stats.totals[n - 1] = total;
        stats.matches[n - 1] = match;
    }
    return stats;
}

double bleu_from_stats(const BleuStats& stats) {
    if (stats.hyp_len == 0) return 0.0;
    double log_precision = 0.0;
    for (int n = 0; n < 4; ++n) {
        if (stats.matches[n] == 0 || stats.totals[n] == 0) return 0.0;
        log_precision += std::log(static_cast<double>(stats.matches[n]) / static_cast<double>(stats.totals[n]));
    }
    const double bp =
        stats.hyp_len >= stats.ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(stats.ref_len) / stats.hyp_len);
    return 100.0 * bp * std::exp(log_precision / 4.0);
}

double corpus_bleu(const std::vector<std::vector<int>>& hypotheses, const std::vector<std::vector<int>>& references) {
    if (hypotheses.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");
    if (hypotheses.size() != references.size())
        throw std::invalid_argument("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                                    std::to_string(references.size()) + " references");
    BleuStats total;
    for (size_t i = 0; i < hypotheses.size(); ++i) total += bleu_sentence_stats(hypotheses[i], references[i]);
    return bleu_from_stats(total);
}

double paired_bootstrap(const std::vector<std::vector<int>>& hyps_a, const std::vector<std::vector<int>>& hyps_b,
                        const std::vector<std::vector<int>>& refs, int n_resamples, uint64_t seed) {
    if (hyps_a.size() != refs.size() || hyps_b.size() != refs.size())
        throw std::invalid_argument("paired_bootstrap: corpora are not aligned");
    if (refs.empty()) throw std::invalid_argument("paired_bootstrap: empty corpus");
    if (n_resamples < 100)
        std::cerr << "[tiekd] warning: paired_bootstrap with n_resamples=" << n_resamples << " (< 100)\n";

    std::vector<BleuStats> stats_a(refs.size()), stats_b(refs.size());
    for (size_t i = 0; i < refs.size(); ++i) {
        stats_a[i] = bleu_sentence_stats(hyps_a[i], refs[i]);
        stats_b[i] = bleu_sentence_stats(hyps_b[i], refs[i]);
    }

    Rng rng(seed);
    double p = 0.0;
    for (int r = 0; r < n_resamples; ++r) {
        BleuStats sum_a, sum_b;
        for (size_t i = 0; i < refs.size(); ++i) {
            const auto idx = rng.uniform_int(refs.size());
            sum_a += stats_a[idx];
            sum_b += stats_b[idx];
        }
        const double bleu_a = bleu_from_stats(sum_a);
        const double bleu_b = bleu_from_stats(sum_b);
        if (bleu_b < bleu_a)
            p += 1.0;
        else if (bleu_b == bleu_a)
            p += 0.5;
    }
    return p / n_resamples;
}

// ---------------------------------------------------------------------------

RankingPair make_ranking_pair(const float* teacher_row, const float* student_row, int vocab, int k) {
    RankingPair pair;
    pair.teacher_topk = topk_desc(teacher_row, vocab, k);
    pair.student_topk = topk_desc(student_row, vocab, k);
    const auto order = full_ranking(student_row, vocab);
    pair.student_rank_of.assign(vocab, 0);
    for (int r = 0; r < vocab; ++r) pair.student_rank_of[order[r]] = r + 1;
    return pair;
}

int levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
    const size_t n = a.size(), m = b.size();
    std::vector<int> prev(m + 1), cur(m + 1);
    std::iota(prev.begin(), prev.end(), 0);
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int>(i);
        for (size_t j = 1; j <= m; ++j) {
            const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

double topk_edit_distance(const std::vector<RankingPair>& pairs, int k) {
    if (pairs.empty()) return 0.0;
    double total = 0.0;
    for (const auto& p : pairs) {
        if (static_cast<int>(p.teacher_topk.size()) > k || static_cast<int>(p.student_topk.size()) > k)
            throw std::invalid_argument("topk_edit_distance: ranking pair longer than k");
        total += levenshtein(p.teacher_topk, p.student_topk);
    }
    return total / static_cast<double>(pairs.size());
}

double topk_ranking_distance(const std::vector<RankingPair>& pairs, int k) {
    if (pairs.empty()) return 0.0;
    double total = 0.0;
    for (const auto& p : pairs) {
        for (size_t i = 0; i < p.teacher_topk.size(); ++i) {
            const int teacher_rank = static_cast<int>(i) + 1;
            const int student_rank = p.student_rank_of[p.teacher_topk[i]];
            total += std::min(k, std::abs(teacher_rank - student_rank));
        }
    }
    return total / (static_cast<double>(pairs.size()) * k);
}

// ---------------------------------------------------------------------------

void teacher_forced_scan(const Seq2SeqModel* student, const Seq2SeqModel* teacher, const ParallelCorpus& corpus,
                         const std::vector<int64_t>& indices, int64_t batch_tokens, const PositionFn& fn) {
    NoGradGuard ng;
    std::vector<int64_t> lengths(corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) lengths[i] = static_cast<int64_t>(corpus.pairs[i].tgt.size()) + 1;
    for (const auto& group : pack_batches(indices, lengths, batch_tokens)) {
        std::vector<BatchItem> items;
        items.reserve(group.size());
        for (int64_t idx : group) items.push_back(gold_item(corpus, idx));
        Batch batch = make_batch(items);
        const int64_t tlen = batch.tgt_in.len;

        Tensor student_logits, teacher_logits;
        if (student) student_logits = student->forward(batch.src, batch.tgt_in);
        if (teacher) teacher_logits = teacher->forward(batch.src, batch.tgt_in);
        const int64_t v = student ? student_logits.shape().back() : teacher_logits.shape().back();

        for (int64_t b = 0; b < batch.src.batch; ++b) {
            for (int64_t j = 0; j < tlen; ++j) {
                const int64_t r = b * tlen + j;
                if (!batch.mask[r]) continue;
                const float* srow = student ? student_logits.data().data() + r * v : nullptr;
                const float* trow = teacher ? teacher_logits.data().data() + r * v : nullptr;
                fn(batch.sentence_index[b], static_cast<int>(j), srow, trow, batch.gold[r]);
            }
        }
    }
}

namespace {

std::vector<int64_t> head_indices(const ParallelCorpus& corpus, int64_t max_sentences) {
    int64_t n = static_cast<int64_t>(corpus.size());
    if (max_sentences >= 0) n = std::min(n, max_sentences);
    std::vector<int64_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
}

}  // namespace

double top1_agreement(const Seq2SeqModel& student, const Seq2SeqModel& teacher, const ParallelCorpus& corpus,
                      int64_t max_sentences, int64_t batch_tokens) {
    int64_t agree = 0, total = 0;
    const int v = student.config().vocab_size;
    teacher_forced_scan(&student, &teacher, corpus, head_indices(corpus, max_sentences), batch_tokens,
                        [&](int64_t, int, const float* s, const float* t, int) {
                            agree += argmax_tie_low(s, v) == argmax_tie_low(t, v);
                            ++total;
                        });
    return total == 0 ? 0.0 : static_cast<double>(agree) / static_cast<double>(total);
}

double token_accuracy(const Seq2SeqModel& student, const ParallelCorpus& corpus, int64_t max_sentences,
                      int64_t batch_tokens) {
    int64_t correct = 0, total = 0;
    const int v = student.config().vocab_size;
    teacher_forced_scan(&student, nullptr, corpus, head_indices(corpus, max_sentences), batch_tokens,
                        [&](int64_t, int, const float* s, const float*, int gold) {
                            correct += argmax_tie_low(s, v) == gold;
                            ++total;
                        });
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

double overlap_rate(const Seq2SeqModel& teacher, const ParallelCorpus& corpus, int64_t sample_n, uint64_t seed) {
    if (sample_n > static_cast<int64_t>(corpus.size())) {
        std::cerr << "[tiekd] warning: overlap_rate sample_n=" << sample_n << " clamped to corpus size "
                  << corpus.size() << "\n";
        sample_n = static_cast<int64_t>(corpus.size());
    }
    std::vector<int64_t> idx(corpus.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    rng.shuffle(idx.begin(), idx.end());
    idx.resize(sample_n);
    std::sort(idx.begin(), idx.end());

    int64_t match = 0, total = 0;
    const int v = teacher.config().vocab_size;
    teacher_forced_scan(nullptr, &teacher, corpus, idx, 512, [&](int64_t, int, const float*, const float* t, int gold) {
        match += argmax_tie_low(t, v) == gold;
        ++total;
    });
    return total == 0 ? 0.0 : static_cast<double>(match) / static_cast<double>(total);
}

RankingDistances ranking_distances(const Seq2SeqModel& student, const Seq2SeqModel& teacher,
                                   const ParallelCorpus& corpus, int k, int64_t max_sentences, int64_t batch_tokens) {
    std::vector<RankingPair> pairs;
    const int v = student.config().vocab_size;
    teacher_forced_scan(&student, &teacher, corpus, head_indices(corpus, max_sentences), batch_tokens,
                        [&](int64_t, int, const float* s, const float* t, int) {
                            pairs.push_back(make_ranking_pair(t, s, v, k));
                        });
    return RankingDistances{topk_edit_distance(pairs, k), topk_ranking_distance(pairs, k)};
}

// ---------------------------------------------------------------------------

json RunReport::to_json() const {
    json j = {{"bleu", bleu},     {"token_acc", token_acc}, {"ta", ta},
              {"d_edit", d_edit}, {"d_rank", d_rank},       {"overlap", overlap},
              {"p_value", nullptr}, {"wall_time_s", wall_time_s}};
    if (p_value) j["p_value"] = *p_value;
    return j;
}

RunReport RunReport::from_json(const json& j) {
    RunReport r;
    r.bleu = j.value("bleu", 0.0);
    r.token_acc = j.value("token_acc", 0.0);
    r.ta = j.value("ta", 0.0);
    r.d_edit = j.value("d_edit", 0.0);
    r.d_rank = j.value("d_rank", 0.0);
    r.overlap = j.value("overlap", 0.0);
    if (j.contains("p_value") && !j.at("p_value").is_null()) r.p_value = j.at("p_value").get<double>();
    r.wall_time_s = j.value("wall_time_s", 0.0);
    return r;
}

}  // namespace tiekd
