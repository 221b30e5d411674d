#pragma once

// Greedy and length-normalized beam search over an abstract step scorer, plus
// distilled-corpus construction with per-token top-1 flags.
//
// A scorer is bound to one source sentence and maps a batch of equal-length
// target prefixes (without BOS) to rows of next-token log-probabilities.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tiekd/data.hpp"
#include "tiekd/model.hpp"
#include "tiekd/ranking.hpp"
#include "tiekd/tensor.hpp"

namespace tiekd {

struct BeamConfig {
    int beam_size = 4;
    double length_penalty = 0.6;
    int max_len = 24;

    void validate() const {
        if (beam_size < 1) throw std::invalid_argument("BeamConfig: beam_size must be >= 1");
        if (max_len < 1) throw std::invalid_argument("BeamConfig: max_len must be >= 1");
        if (length_penalty < 0.0) throw std::invalid_argument("BeamConfig: length_penalty must be >= 0");
    }
};

struct DecodeResult {
    std::vector<int> tokens;       // emitted tokens, EOS included when reached
    std::vector<uint8_t> flags;    // tokens[j] was the argmax given this prefix
    bool truncated = false;        // stopped by max_len instead of EOS
    double score = 0.0;            // logprob / len^penalty
};

template <typename T>
using BatchScorer = std::function<std::vector<std::vector<T>>(const std::vector<std::vector<int>>&)>;

// Normalized hypothesis score: logprob / len^penalty (len >= 1).
inline double length_normalized(double logprob, int64_t len, double penalty) {
    return logprob / std::pow(static_cast<double>(len), penalty);
}

template <typename T>
DecodeResult greedy_decode(const BatchScorer<T>& scorer, int max_len) {
    DecodeResult out;
    double logprob = 0.0;
    std::vector<int> prefix;
    for (int step = 0; step < max_len; ++step) {
        const auto dist = scorer({prefix})[0];
        const int best = argmax_tie_low(dist);
        out.tokens.push_back(best);
        out.flags.push_back(1);
        logprob += static_cast<double>(dist[best]);
        prefix.push_back(best);
        if (best == kEos) break;
    }
    out.truncated = out.tokens.empty() || out.tokens.back() != kEos;
    out.score = length_normalized(logprob, static_cast<int64_t>(out.tokens.size()), 0.0);
    return out;
}

template <typename T>
DecodeResult beam_decode(const BatchScorer<T>& scorer, const BeamConfig& cfg) {
    cfg.validate();

    struct Hyp {
        std::vector<int> tokens;
        std::vector<uint8_t> flags;
        double logprob = 0.0;
    };

    std::vector<Hyp> live(1);
    std::vector<Hyp> finished;

    for (int step = 0; step < cfg.max_len && !live.empty(); ++step) {
        std::vector<std::vector<int>> prefixes;
        prefixes.reserve(live.size());
        for (const auto& h : live) prefixes.push_back(h.tokens);
        const auto dists = scorer(prefixes);

        struct Cand {
            double logprob;
            int parent;
            int token;
            uint8_t flag;
        };
        std::vector<Cand> cands;
        cands.reserve(live.size() * dists[0].size());
        for (size_t p = 0; p < live.size(); ++p) {
            const auto& dist = dists[p];
            const int argmax = argmax_tie_low(dist);
            for (size_t w = 0; w < dist.size(); ++w) {
                cands.push_back(Cand{live[p].logprob + static_cast<double>(dist[w]), static_cast<int>(p),
                                     static_cast<int>(w), static_cast<uint8_t>(static_cast<int>(w) == argmax)});
            }
        }
        const size_t keep = std::min<size_t>(cfg.beam_size, cands.size());
        std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(), [](const Cand& a, const Cand& b) {
            if (a.logprob != b.logprob) return a.logprob > b.logprob;
            if (a.parent != b.parent) return a.parent < b.parent;
            return a.token < b.token;
        });

        std::vector<Hyp> next;
        next.reserve(keep);
        for (size_t i = 0; i < keep; ++i) {
            const Cand& c = cands[i];
            Hyp h = live[c.parent];
            h.tokens.push_back(c.token);
            h.flags.push_back(c.flag);
            h.logprob = c.logprob;
            if (c.token == kEos)
                finished.push_back(std::move(h));
            else
                next.push_back(std::move(h));
        }
        live = std::move(next);
    }

    // Truncated survivors compete under the same normalization.
    DecodeResult best;
    double best_score = -std::numeric_limits<double>::infinity();
    bool best_truncated = true;
    auto consider = [&](const Hyp& h, bool truncated) {
        const double s = length_normalized(h.logprob, static_cast<int64_t>(h.tokens.size()), cfg.length_penalty);
        if (s > best_score) {
            best_score = s;
            best.tokens = h.tokens;
            best.flags = h.flags;
            best_truncated = truncated;
        }
    };
    for (const auto& h : finished) consider(h, false);
    for (const auto& h : live) consider(h, true);
    best.truncated = best_truncated;
    best.score = best_score;
    return best;
}

// Scorer bound to one source sentence of a seq2seq model (eval mode, no
// grad). All prefixes in a call must share one length.
template <typename T>
BatchScorer<T> model_scorer(const Seq2SeqModelT<T>& model, const std::vector<int>& src) {
    return [&model, src](const std::vector<std::vector<int>>& prefixes) {
        NoGradGuard ng;
        const int64_t bsz = static_cast<int64_t>(prefixes.size());
        const int64_t plen = static_cast<int64_t>(prefixes[0].size());
        TokenMatrix src_m(bsz, static_cast<int64_t>(src.size()));
        TokenMatrix tgt_in(bsz, plen + 1);
        for (int64_t b = 0; b < bsz; ++b) {
            for (size_t i = 0; i < src.size(); ++i) src_m.at(b, static_cast<int64_t>(i)) = src[i];
            tgt_in.at(b, 0) = kBos;
            for (int64_t j = 0; j < plen; ++j) tgt_in.at(b, j + 1) = prefixes[b][j];
        }
        TensorT<T> logp = log_softmax_lastdim(model.forward(src_m, tgt_in));
        const int64_t v = logp.shape().back();
        std::vector<std::vector<T>> rows(bsz);
        for (int64_t b = 0; b < bsz; ++b) {
            const T* last = logp.data().data() + ((b + 1) * (plen + 1) - 1) * v;
            rows[b].assign(last, last + v);
        }
        return rows;
    };
}

// ---------------------------------------------------------------------------
// distilled corpora
// ---------------------------------------------------------------------------

struct DistilledSentence {
    std::vector<int> src;
    std::vector<int> tgt;           // teacher beam output, EOS included unless truncated
    std::vector<uint8_t> top1;      // per-token flags

    bool operator==(const DistilledSentence&) const = default;
};

struct DistilledCorpus {
    nlohmann::json provenance;      // teacher checkpoint hash + beam config
    std::vector<DistilledSentence> sentences;

    size_t size() const { return sentences.size(); }
    double top1_fraction() const;
};

// Beam-decodes every source of `corpus` with the teacher. `num_threads` > 1
// splits sentences across workers; output order is always by input index.
DistilledCorpus distill_corpus(const Seq2SeqModel& teacher, const ParallelCorpus& corpus, const BeamConfig& cfg,
                               nlohmann::json provenance = nlohmann::json::object(), int num_threads = 1);

void save_distilled_jsonl(const std::string& path, const DistilledCorpus& corpus);
DistilledCorpus load_distilled_jsonl(const std::string& path);

// Batch item view over a distilled sentence (target already EOS-terminated).
BatchItem distilled_item(const DistilledCorpus& corpus, int64_t index);

}  // namespace tiekd
