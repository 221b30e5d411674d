#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "tiekd/data.hpp"
#include "tiekd/metrics.hpp"
#include "tiekd/ranking.hpp"

using namespace tiekd;
using tiekd::test::micro_model_config;

namespace {

// Independent BLEU-4 recount: linear-search clipping, no maps.
double naive_bleu(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs) {
    double log_p = 0.0;
    int64_t hyp_len = 0, ref_len = 0;
    for (int n = 1; n <= 4; ++n) {
        int64_t match = 0, total = 0;
        for (size_t s = 0; s < hyps.size(); ++s) {
            const auto& h = hyps[s];
            const auto& r = refs[s];
            const int hn = static_cast<int>(h.size()) - n + 1;
            const int rn = static_cast<int>(r.size()) - n + 1;
            std::vector<bool> ref_used(std::max(rn, 0), false);
            for (int i = 0; i < hn; ++i) {
                ++total;
                for (int j = 0; j < rn; ++j) {
                    if (ref_used[j]) continue;
                    bool equal = true;
                    for (int t = 0; t < n; ++t) equal = equal && h[i + t] == r[j + t];
                    if (equal) {
                        ref_used[j] = true;
                        ++match;
                        break;
                    }
                }
            }
        }
        if (match == 0 || total == 0) return 0.0;
        log_p += std::log(static_cast<double>(match) / total);
    }
    for (size_t s = 0; s < hyps.size(); ++s) {
        hyp_len += static_cast<int64_t>(hyps[s].size());
        ref_len += static_cast<int64_t>(refs[s].size());
    }
    const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / hyp_len);
    return 100.0 * bp * std::exp(log_p / 4.0);
}

// Exponential-time reference edit distance.
int naive_edit(const std::vector<int>& a, const std::vector<int>& b, size_t i = 0, size_t j = 0) {
    if (i == a.size()) return static_cast<int>(b.size() - j);
    if (j == b.size()) return static_cast<int>(a.size() - i);
    const int sub = naive_edit(a, b, i + 1, j + 1) + (a[i] == b[j] ? 0 : 1);
    const int del = naive_edit(a, b, i + 1, j) + 1;
    const int ins = naive_edit(a, b, i, j + 1) + 1;
    return std::min({sub, del, ins});
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("bleu: identical corpora score 100") {
    std::vector<std::vector<int>> corpus = {{4, 5, 6, 7, 8}, {9, 10, 11, 12}};
    CHECK(corpus_bleu(corpus, corpus) == doctest::Approx(100.0).epsilon(1e-9));
}

TEST_CASE("bleu: zero unigram overlap scores 0") {
    CHECK(corpus_bleu({{4, 5, 6, 7}}, {{8, 9, 10, 11}}) == 0.0);
}

TEST_CASE("bleu: hand fixture 'a b c d' vs 'a b c d e' gives 77.88") {
    CHECK(corpus_bleu({{1, 2, 3, 4}}, {{1, 2, 3, 4, 5}}) == doctest::Approx(77.8800783071405).epsilon(1e-8));
}

TEST_CASE("bleu: empty corpus rejected, mismatched lengths rejected") {
    CHECK_THROWS_AS(corpus_bleu({}, {}), std::invalid_argument);
    CHECK_THROWS_AS(corpus_bleu({{1}}, {{1}, {2}}), std::invalid_argument);
}

TEST_CASE("bleu: matches an independent recount on a 10-sentence fixture") {
    Rng rng(101);
    std::vector<std::vector<int>> hyps, refs;
    for (int s = 0; s < 10; ++s) {
        const int len = 4 + static_cast<int>(rng.uniform_int(8));
        std::vector<int> ref(len);
        for (auto& t : ref) t = static_cast<int>(rng.uniform_int(6));
        std::vector<int> hyp = ref;
        // corrupt a few tokens and lengths
        for (int c = 0; c < 2; ++c) hyp[rng.uniform_int(hyp.size())] = static_cast<int>(rng.uniform_int(6));
        if (s % 3 == 0) hyp.push_back(static_cast<int>(rng.uniform_int(6)));
        if (s % 4 == 0) hyp.pop_back();
        hyps.push_back(std::move(hyp));
        refs.push_back(std::move(ref));
    }
    CHECK(corpus_bleu(hyps, refs) == doctest::Approx(naive_bleu(hyps, refs)).epsilon(1e-9));
}

TEST_CASE("edit distance: worked examples") {
    std::vector<RankingPair> identical = {{{1, 2, 3}, {1, 2, 3}, {}}};
    CHECK(topk_edit_distance(identical, 3) == 0.0);
    std::vector<RankingPair> swapped = {{{1, 2, 3}, {1, 3, 2}, {}}};
    CHECK(topk_edit_distance(swapped, 3) == 2.0);
    std::vector<RankingPair> disjoint = {{{1, 2, 3}, {4, 5, 6}, {}}};
    CHECK(topk_edit_distance(disjoint, 3) == 3.0);
}

TEST_CASE("ranking distance: worked examples") {
    // student full order (a, c, b) over vocab {a=0, b=1, c=2}
    RankingPair pair;
    pair.teacher_topk = {0, 1};
    pair.student_topk = {0, 2};
    pair.student_rank_of = {1, 3, 2};
    CHECK(topk_ranking_distance({pair}, 2) == doctest::Approx(0.5));

    RankingPair same;
    same.teacher_topk = {0, 1};
    same.student_topk = {0, 1};
    same.student_rank_of = {1, 2, 3};
    CHECK(topk_ranking_distance({same}, 2) == 0.0);
}

TEST_CASE("D_edit and D_rank match brute-force references on 1000 random pairs") {
    Rng rng(103);
    std::vector<RankingPair> pairs;
    double edit_expected = 0, rank_expected = 0;
    const int trials = 1000;
    const int vocab = 12;
    for (int i = 0; i < trials; ++i) {
        const int k = 5;
        auto t_probs = tiekd::test::random_distribution<float>(rng, vocab);
        auto s_probs = tiekd::test::random_distribution<float>(rng, vocab);
        auto pair = make_ranking_pair(t_probs.data(), s_probs.data(), vocab, k);
        edit_expected += naive_edit(pair.teacher_topk, pair.student_topk);
        // brute-force D_rank term: scan the student's full ordering
        for (size_t u = 0; u < pair.teacher_topk.size(); ++u) {
            const auto order = full_ranking(s_probs.data(), vocab);
            int rank = 0;
            for (int r = 0; r < vocab; ++r)
                if (order[r] == pair.teacher_topk[u]) rank = r + 1;
            rank_expected += std::min(k, std::abs(static_cast<int>(u) + 1 - rank));
        }
        pairs.push_back(std::move(pair));
    }
    CHECK(topk_edit_distance(pairs, 5) == edit_expected / trials);
    CHECK(topk_ranking_distance(pairs, 5) == rank_expected / (trials * 5.0));
    CHECK(topk_edit_distance(pairs, 5) >= 0.0);
    CHECK(topk_edit_distance(pairs, 5) <= 5.0);
    CHECK(topk_ranking_distance(pairs, 5) >= 0.0);
    CHECK(topk_ranking_distance(pairs, 5) <= 5.0);
}

TEST_CASE("top1_agreement of a model with itself is 1.0 and batching-invariant") {
    ModelConfig cfg = micro_model_config(14, 55);
    Seq2SeqModel model(cfg);
    TaskSpec spec;
    spec.src_vocab_size = 14;
    spec.tgt_vocab_size = 14;
    spec.synonym_set_size = 1;
    spec.dominant_prob = 1.0;
    spec.n_train = 40;
    spec.max_len = 6;
    SynonymTask task(spec);
    auto corpus = task.train();
    CHECK(top1_agreement(model, model, corpus) == 1.0);

    ModelConfig cfg2 = micro_model_config(14, 56);
    Seq2SeqModel other(cfg2);
    const double a = top1_agreement(model, other, corpus, -1, 64);
    const double b = top1_agreement(model, other, corpus, -1, 4096);
    CHECK(a == b);
}

TEST_CASE("overlap: analytic oracle emitter reproduces pi") {
    TaskSpec spec;
    spec.src_vocab_size = 24;
    spec.synonym_set_size = 2;
    spec.dominant_prob = 0.75;
    spec.n_train = 3000;
    spec.seed = 5;
    SynonymTask task(spec);
    auto corpus = task.train();
    int64_t match = 0, total = 0;
    for (const auto& pair : corpus.pairs) {
        for (size_t j = 0; j < pair.tgt.size(); ++j) {
            auto dist = task.oracle_distribution(pair.src, static_cast<int>(j));
            match += argmax_tie_low(dist) == pair.tgt[j];
            ++total;
        }
    }
    const double rate = static_cast<double>(match) / total;
    CHECK(std::abs(rate - 0.75) < 0.02);
}

TEST_CASE("overlap_rate clamps oversized samples and stays in [0,1]") {
    ModelConfig cfg = micro_model_config(14, 57);
    Seq2SeqModel model(cfg);
    TaskSpec spec;
    spec.src_vocab_size = 14;
    spec.tgt_vocab_size = 14;
    spec.synonym_set_size = 1;
    spec.dominant_prob = 1.0;
    spec.n_train = 20;
    spec.max_len = 6;
    SynonymTask task(spec);
    auto corpus = task.train();
    const double rate = overlap_rate(model, corpus, 1000, 3);
    CHECK(rate >= 0.0);
    CHECK(rate <= 1.0);
}

TEST_CASE("paired bootstrap: ties give 0.5, strict dominance gives 0, seeded determinism") {
    std::vector<std::vector<int>> refs = {{4, 5, 6, 7}, {8, 9, 10, 11}, {4, 6, 8, 10}};
    CHECK(paired_bootstrap(refs, refs, refs, 200, 9) == doctest::Approx(0.5));

    std::vector<std::vector<int>> worse = {{4, 5, 12, 13}, {8, 9, 12, 13}, {4, 6, 12, 13}};
    CHECK(paired_bootstrap(refs, worse, refs, 200, 9) == doctest::Approx(1.0));  // B strictly worse
    CHECK(paired_bootstrap(worse, refs, refs, 200, 9) == doctest::Approx(0.0));  // B strictly better

    const double p1 = paired_bootstrap(worse, refs, refs, 500, 123);
    const double p2 = paired_bootstrap(worse, refs, refs, 500, 123);
    CHECK(p1 == p2);
}

TEST_CASE("run report JSON round-trip") {
    RunReport r;
    r.bleu = 42.5;
    r.token_acc = 0.7;
    r.ta = 0.9;
    r.d_edit = 2.5;
    r.d_rank = 1.5;
    r.overlap = 0.75;
    r.p_value = 0.01;
    r.wall_time_s = 12.5;
    auto j = r.to_json();
    auto back = RunReport::from_json(j);
    CHECK(back.bleu == r.bleu);
    CHECK(back.p_value.has_value());
    CHECK(*back.p_value == 0.01);
    RunReport no_p;
    CHECK_FALSE(RunReport::from_json(no_p.to_json()).p_value.has_value());
}

}  // TEST_SUITE
