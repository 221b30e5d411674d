#include <filesystem>
#include <map>

#include "doctest.h"
#include "helpers.hpp"
#include "tiekd/decode.hpp"

using namespace tiekd;
using tiekd::test::micro_model_config;
using tiekd::test::random_tokens;

namespace {

// Deterministic table model over token ids {0..5} with a=4, b=5: the worked
// two-step example where beam search beats greedy.
BatchScorer<double> toy_scorer() {
    return [](const std::vector<std::vector<int>>& prefixes) {
        std::vector<std::vector<double>> rows;
        for (const auto& prefix : prefixes) {
            std::vector<double> p(6, 1e-12);
            if (prefix.empty()) {
                p[4] = 0.6;
                p[5] = 0.4;
            } else if (prefix.back() == 4) {
                p[kEos] = 0.5;
                p[4] = 0.3;
                p[5] = 0.2;
            } else {
                p[kEos] = 0.9;
                p[4] = 0.05;
                p[5] = 0.05;
            }
            std::vector<double> logp(6);
            for (int i = 0; i < 6; ++i) logp[i] = std::log(p[i]);
            rows.push_back(std::move(logp));
        }
        return rows;
    };
}

// Seeded random distribution per prefix; a stand-in for a model with genuine
// sequence dependence.
BatchScorer<double> hashed_scorer(uint64_t seed, int vocab, double sharpness = 1.0) {
    return [seed, vocab, sharpness](const std::vector<std::vector<int>>& prefixes) {
        std::vector<std::vector<double>> rows;
        for (const auto& prefix : prefixes) {
            uint64_t h = seed;
            for (int t : prefix) h = splitmix64(h) ^ static_cast<uint64_t>(t + 1);
            Rng rng(splitmix64(h));
            std::vector<double> logp(vocab);
            double m = -1e30;
            for (auto& x : logp) {
                x = rng.gaussian() * sharpness;
                m = std::max(m, x);
            }
            double sum = 0;
            for (auto& x : logp) sum += std::exp(x - m);
            const double lse = m + std::log(sum);
            for (auto& x : logp) x -= lse;
            rows.push_back(std::move(logp));
        }
        return rows;
    };
}

// Exhaustive search over every sequence that either ends in EOS or hits
// max_len, under the same length-normalized score.
DecodeResult brute_force_best(const BatchScorer<double>& scorer, int vocab, const BeamConfig& cfg) {
    DecodeResult best;
    double best_score = -std::numeric_limits<double>::infinity();
    std::vector<int> prefix;
    std::function<void(double)> recurse = [&](double logprob) {
        const auto dist = scorer({prefix})[0];
        for (int w = 0; w < vocab; ++w) {
            prefix.push_back(w);
            const double lp = logprob + dist[w];
            const bool closed = w == kEos;
            if (closed || static_cast<int>(prefix.size()) == cfg.max_len) {
                const double score =
                    length_normalized(lp, static_cast<int64_t>(prefix.size()), cfg.length_penalty);
                if (score > best_score) {
                    best_score = score;
                    best.tokens = prefix;
                    best.score = score;
                    best.truncated = !closed;
                }
            }
            if (!closed && static_cast<int>(prefix.size()) < cfg.max_len) recurse(lp);
            prefix.pop_back();
        }
    };
    recurse(0.0);
    return best;
}

}  // namespace

TEST_SUITE("decode") {

TEST_CASE("toy two-step case: beam=2 finds 'b EOS' and beats greedy") {
    BeamConfig cfg{2, 0.0, 2};
    auto result = beam_decode(toy_scorer(), cfg);
    CHECK(result.tokens == std::vector<int>{5, kEos});
    CHECK(result.score == doctest::Approx(-1.0216512475319812).epsilon(1e-6));
    REQUIRE(result.flags.size() == 2);
    CHECK(result.flags[0] == 0);  // b was not the step-1 argmax
    CHECK(result.flags[1] == 1);
    CHECK_FALSE(result.truncated);

    auto greedy = greedy_decode(toy_scorer(), 2);
    CHECK(greedy.tokens == std::vector<int>{4, kEos});
    CHECK(greedy.score == doctest::Approx(-1.203972804325936).epsilon(1e-6));
    CHECK(result.score > greedy.score);
}

TEST_CASE("beam=1 equals greedy with all-true flags on 100 random models") {
    for (uint64_t seed = 1; seed <= 100; ++seed) {
        auto scorer = hashed_scorer(seed, 7, 1.5);
        BeamConfig cfg{1, 0.6, 8};
        auto beam = beam_decode(scorer, cfg);
        auto greedy = greedy_decode(scorer, 8);
        CHECK(beam.tokens == greedy.tokens);
        for (uint8_t f : beam.flags) CHECK(f == 1);
    }
}

TEST_CASE("decoding is deterministic") {
    auto scorer = hashed_scorer(11, 6, 1.0);
    BeamConfig cfg{3, 0.6, 6};
    auto a = beam_decode(scorer, cfg);
    auto b = beam_decode(scorer, cfg);
    CHECK(a.tokens == b.tokens);
    CHECK(a.flags == b.flags);
    CHECK(a.score == b.score);
}

TEST_CASE("exhaustive-search equivalence for tiny spaces") {
    for (uint64_t seed = 1; seed <= 25; ++seed) {
        const int vocab = 5;
        BeamConfig cfg{625, 0.6, 4};  // V^max_len covers everything
        auto scorer = hashed_scorer(seed, vocab, 1.0);
        auto beam = beam_decode(scorer, cfg);
        auto brute = brute_force_best(scorer, vocab, cfg);
        CHECK(beam.tokens == brute.tokens);
        CHECK(beam.score == doctest::Approx(brute.score).epsilon(1e-12));
    }
}

TEST_CASE("beam with penalty 0 never scores below greedy") {
    for (uint64_t seed = 1; seed <= 50; ++seed) {
        auto scorer = hashed_scorer(seed, 6, 1.0);
        BeamConfig cfg{4, 0.0, 8};
        auto beam = beam_decode(scorer, cfg);
        auto greedy = greedy_decode(scorer, 8);
        CHECK(beam.score >= greedy.score - 1e-12);
    }
}

TEST_CASE("max_len truncation is recorded") {
    auto never_eos = [](const std::vector<std::vector<int>>& prefixes) {
        std::vector<std::vector<double>> rows;
        for (size_t i = 0; i < prefixes.size(); ++i) {
            std::vector<double> logp(6, std::log(1e-12));
            logp[4] = std::log(0.5);
            logp[5] = std::log(0.5);
            rows.push_back(std::move(logp));
        }
        return rows;
    };
    auto greedy = greedy_decode<double>(never_eos, 5);
    CHECK(greedy.truncated);
    CHECK(greedy.tokens.size() == 5);
    auto beam = beam_decode<double>(never_eos, BeamConfig{2, 0.6, 5});
    CHECK(beam.truncated);
}

TEST_CASE("beam flags agree with the teacher-forced recomputation oracle") {
    ModelConfig cfg = micro_model_config(14, 91);
    Seq2SeqModel model(cfg);
    Rng rng(17);
    for (int i = 0; i < 20; ++i) {
        std::vector<int> src;
        const int len = 2 + static_cast<int>(rng.uniform_int(5));
        for (int j = 0; j < len; ++j) src.push_back(kNumSpecialTokens + static_cast<int>(rng.uniform_int(10)));
        auto result = beam_decode(model_scorer(model, src), BeamConfig{4, 0.6, 10});
        REQUIRE(result.flags.size() == result.tokens.size());

        // Oracle: teacher-forced forward over the decoded sequence.
        const int64_t n = static_cast<int64_t>(result.tokens.size());
        TokenMatrix src_m(1, len), tgt_in(1, n);
        for (int j = 0; j < len; ++j) src_m.at(0, j) = src[j];
        tgt_in.at(0, 0) = kBos;
        for (int64_t j = 1; j < n; ++j) tgt_in.at(0, j) = result.tokens[j - 1];
        auto probs = forward_probs(model, src_m, tgt_in);
        for (int64_t j = 0; j < n; ++j) {
            const int oracle_argmax = argmax_tie_low(probs[j]);
            CHECK(static_cast<bool>(result.flags[j]) == (result.tokens[j] == oracle_argmax));
        }
    }
}

TEST_CASE("distill_corpus: format, determinism, provenance, flag fraction") {
    ModelConfig cfg = micro_model_config(16, 13);
    Seq2SeqModel teacher(cfg);
    ParallelCorpus corpus;
    Rng rng(19);
    for (int i = 0; i < 12; ++i) {
        SentencePair pair;
        const int len = 2 + static_cast<int>(rng.uniform_int(4));
        for (int j = 0; j < len; ++j) pair.src.push_back(kNumSpecialTokens + static_cast<int>(rng.uniform_int(12)));
        pair.tgt = pair.src;
        corpus.pairs.push_back(std::move(pair));
    }
    BeamConfig beam{4, 0.6, 10};
    auto a = distill_corpus(teacher, corpus, beam, {{"note", "unit"}});
    auto b = distill_corpus(teacher, corpus, beam, {{"note", "unit"}});
    CHECK(a.sentences == b.sentences);
    CHECK(a.size() == corpus.size());
    CHECK(a.top1_fraction() >= 0.0);
    CHECK(a.top1_fraction() <= 1.0);

    // threaded decode preserves input order
    auto c = distill_corpus(teacher, corpus, beam, {{"note", "unit"}}, 3);
    CHECK(c.sentences == a.sentences);

    const auto path = std::filesystem::temp_directory_path() / "tiekd_distilled.jsonl";
    save_distilled_jsonl(path.string(), a);
    auto loaded = load_distilled_jsonl(path.string());
    CHECK(loaded.sentences == a.sentences);
    CHECK(loaded.provenance.at("note") == "unit");
    CHECK(loaded.provenance.at("beam_size") == 4);
    std::filesystem::remove(path);
}

}  // TEST_SUITE
