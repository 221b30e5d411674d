#pragma once

// Soft-target surgery: the probe transforms applied to teacher distributions
// before distillation (keep-top-1, move-top-1-to-gold, top-k truncation,
// label-smoothing replacement, confidence buckets).

#include <cstdint>
#include <string>
#include <vector>

#include "tiekd/ranking.hpp"

namespace tiekd {

// A teacher distribution over the target vocabulary at one decoding
// position. `probs` may be unnormalized after surgery; top1_index/top1_prob
// always describe the argmax of the distribution as it came out of the
// teacher (ties to the lowest id).
template <typename T>
struct SoftTargetT {
    std::vector<T> probs;
    int top1_index = 0;
    T top1_prob = 0;

    static SoftTargetT from_probs(std::vector<T> p) {
        SoftTargetT t;
        t.top1_index = argmax_tie_low(p);
        t.top1_prob = p[t.top1_index];
        t.probs = std::move(p);
        return t;
    }
};

using SoftTarget = SoftTargetT<float>;

struct SurgeryMode {
    enum Kind { kVanilla, kNoCorrelation, kNoTop1, kNoKd, kTopkTruncate, kBucket };

    Kind kind = kVanilla;
    int k = 0;            // kTopkTruncate
    double lo = 0, hi = 0;  // kBucket: kd active iff lo < top1_prob <= hi

    static SurgeryMode vanilla() { return {}; }
    static SurgeryMode no_correlation() { return {kNoCorrelation, 0, 0, 0}; }
    static SurgeryMode no_top1() { return {kNoTop1, 0, 0, 0}; }
    static SurgeryMode no_kd() { return {kNoKd, 0, 0, 0}; }
    static SurgeryMode topk_truncate(int k);
    static SurgeryMode bucket(double lo, double hi);

    // Config-string form: "vanilla", "no_correlation", "no_top1", "no_kd",
    // "topk:3", "bucket:0.4:0.7".
    static SurgeryMode parse(const std::string& text);
    std::string to_string() const;

    bool operator==(const SurgeryMode&) const = default;
};

// The three confidence intervals used by the bucket probes.
inline std::vector<SurgeryMode> bucket_intervals() {
    return {SurgeryMode::bucket(0.0, 0.4), SurgeryMode::bucket(0.4, 0.7), SurgeryMode::bucket(0.7, 1.0)};
}

template <typename T>
struct SurgeryResult {
    SoftTargetT<T> target;
    bool kd_active = true;
};

// Applies `mode` to a normalized soft target. label_smoothing and vocab size
// are only consulted by the no_kd replacement.
template <typename T>
SurgeryResult<T> apply_surgery(const SurgeryMode& mode, const SoftTargetT<T>& target, int gold_id,
                               T label_smoothing) {
    SurgeryResult<T> out{target, true};
    auto& probs = out.target.probs;
    const int v = static_cast<int>(probs.size());
    switch (mode.kind) {
        case SurgeryMode::kVanilla:
            break;
        case SurgeryMode::kNoCorrelation: {
            // Keep only the top-1 entry; deliberately left unnormalized.
            std::vector<T> kept(v, T(0));
            kept[target.top1_index] = probs[target.top1_index];
            probs = std::move(kept);
            break;
        }
        case SurgeryMode::kNoTop1: {
            // Unchanged when the teacher already agrees with gold; otherwise
            // the top-1 mass moves onto the gold token.
            if (target.top1_index != gold_id) {
                probs[gold_id] += probs[target.top1_index];
                probs[target.top1_index] = T(0);
            }
            break;
        }
        case SurgeryMode::kNoKd: {
            const T uniform = label_smoothing / static_cast<T>(v);
            std::vector<T> smoothed(v, uniform);
            smoothed[gold_id] += T(1) - label_smoothing;
            probs = std::move(smoothed);
            break;
        }
        case SurgeryMode::kTopkTruncate: {
            std::vector<T> kept(v, T(0));
            for (int idx : topk_desc(probs, mode.k)) kept[idx] = probs[idx];
            probs = std::move(kept);
            break;
        }
        case SurgeryMode::kBucket: {
            out.kd_active = mode.lo < target.top1_prob && target.top1_prob <= mode.hi;
            break;
        }
    }
    return out;
}

}  // namespace tiekd
