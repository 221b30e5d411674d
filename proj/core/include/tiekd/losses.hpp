#pragma once

// Training objectives: label-smoothed CE, the cross-entropy form of word-level
// KD (well-defined for unnormalized surgery targets), the hierarchical ranking
// loss, their interpolation, and masked sequence-level KD.
//
// Reported values follow the KL convention (teacher self-entropy subtracted
// where the target is a distribution), while the graph scalar optimizes the
// cross-entropy form; the two differ by a constant in the student, so their
// gradients are identical.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "tiekd/ranking.hpp"
#include "tiekd/rng.hpp"
#include "tiekd/surgery.hpp"
#include "tiekd/tensor.hpp"

namespace tiekd {

struct KDWeights {
    double alpha = 0.5;
    int k = 5;
    int n_iterations = 3;
    double label_smoothing = 0.1;

    void validate() const {
        if (alpha < 0.0 || alpha > 1.0)
            throw std::invalid_argument("KDWeights: alpha must be in [0,1], got " + std::to_string(alpha));
        if (k < 1) throw std::invalid_argument("KDWeights: k must be >= 1");
        if (n_iterations < 1) throw std::invalid_argument("KDWeights: n_iterations must be >= 1");
        if (label_smoothing < 0.0 || label_smoothing >= 1.0)
            throw std::invalid_argument("KDWeights: label_smoothing must be in [0,1)");
    }
};

template <typename T>
struct LossReportT {
    TensorT<T> loss;  // scalar graph node; backward() flows into the student
    double value = 0.0;
    std::map<std::string, double> components;
    int64_t token_count = 0;
};

using LossReport = LossReportT<float>;

// Teacher distributions for a whole batch, one row per decoder position.
template <typename T>
struct SoftTargetBatch {
    int64_t rows = 0;
    int64_t vocab = 0;
    std::vector<T> probs;            // rows * vocab, possibly unnormalized
    std::vector<int> top1_index;     // pre-surgery argmax (ties to lowest id)
    std::vector<T> top1_prob;
    std::vector<uint8_t> kd_active;  // bucket masking; all 1 otherwise

    static SoftTargetBatch from_probs(int64_t rows, int64_t vocab, std::vector<T> probs) {
        SoftTargetBatch b;
        b.rows = rows;
        b.vocab = vocab;
        b.probs = std::move(probs);
        b.top1_index.resize(rows);
        b.top1_prob.resize(rows);
        b.kd_active.assign(rows, 1);
        for (int64_t r = 0; r < rows; ++r) {
            const T* row = b.probs.data() + r * vocab;
            const int t1 = argmax_tie_low(row, static_cast<int>(vocab));
            b.top1_index[r] = t1;
            b.top1_prob[r] = row[t1];
        }
        return b;
    }

    SoftTargetT<T> position(int64_t r) const {
        SoftTargetT<T> t;
        t.probs.assign(probs.begin() + r * vocab, probs.begin() + (r + 1) * vocab);
        t.top1_index = top1_index[r];
        t.top1_prob = top1_prob[r];
        return t;
    }

    void apply(const SurgeryMode& mode, const std::vector<int>& gold, const std::vector<uint8_t>& mask,
               T label_smoothing) {
        for (int64_t r = 0; r < rows; ++r) {
            if (!mask.empty() && !mask[r]) continue;
            auto result = apply_surgery(mode, position(r), gold[r], label_smoothing);
            std::copy(result.target.probs.begin(), result.target.probs.end(), probs.begin() + r * vocab);
            kd_active[r] = result.kd_active ? 1 : 0;
        }
    }
};

// Teacher-forced soft targets from a grad-free teacher forward.
template <typename T>
SoftTargetBatch<T> soft_targets_from_logits(const TensorT<T>& teacher_logits) {
    NoGradGuard ng;
    TensorT<T> probs = softmax_lastdim(teacher_logits);
    const int64_t v = probs.shape().back();
    return SoftTargetBatch<T>::from_probs(probs.numel() / v, v, probs.data());
}

namespace detail {

inline int64_t mask_count(const std::vector<uint8_t>& mask) {
    int64_t n = 0;
    for (uint8_t m : mask) n += m;
    return n;
}

template <typename T>
TensorT<T> mask_tensor(const std::vector<uint8_t>& mask, const Shape& shape) {
    std::vector<T> m(mask.size());
    for (size_t i = 0; i < mask.size(); ++i) m[i] = mask[i] ? T(1) : T(0);
    return TensorT<T>::from_data(shape, std::move(m));
}

inline Shape leading_shape(const Shape& s) {
    Shape lead(s.begin(), s.end() - 1);
    if (lead.empty()) lead = {1};
    return lead;
}

}  // namespace detail

namespace detail {

// Core of the label-smoothed CE on a precomputed log-softmax tensor.
template <typename T>
LossReportT<T> ce_from_logp(const TensorT<T>& logp, const std::vector<int>& gold, T eps,
                            const std::vector<uint8_t>& mask, const std::vector<T>* pos_weights) {
    if (eps < T(0) || eps >= T(1))
        throw std::invalid_argument("ce_label_smoothed: eps must be in [0,1), got " + std::to_string(eps));
    const int64_t v = logp.shape().back();
    const int64_t rows = logp.numel() / v;
    if (static_cast<int64_t>(gold.size()) != rows || static_cast<int64_t>(mask.size()) != rows)
        throw std::invalid_argument("ce_label_smoothed: gold/mask length does not match logits rows");
    const int64_t count = mask_count(mask);
    if (count == 0) throw std::invalid_argument("ce_label_smoothed: batch has no supervised tokens (all PAD)");

    TensorT<T> picked = gather_lastdim(logp, gold);  // (rows)
    TensorT<T> per_pos = mul_scalar(picked, T(1) - eps);
    if (eps > T(0)) per_pos = add(per_pos, mul_scalar(sum_lastdim(logp), eps / static_cast<T>(v)));

    std::vector<T> w(rows);
    for (int64_t r = 0; r < rows; ++r) w[r] = mask[r] ? (pos_weights ? (*pos_weights)[r] : T(1)) : T(0);
    per_pos = mul(per_pos, TensorT<T>::from_data(leading_shape(logp.shape()), std::move(w)));

    LossReportT<T> report;
    report.loss = mul_scalar(sum_all(per_pos), T(-1) / static_cast<T>(count));
    report.value = static_cast<double>(report.loss.item());
    report.token_count = count;
    report.components["l_ce"] = report.value;
    return report;
}

// Value-only CE (no graph), for reporting the unweighted component.
template <typename T>
double ce_value_from_logp(const TensorT<T>& logp, const std::vector<int>& gold, T eps,
                          const std::vector<uint8_t>& mask) {
    const int64_t v = logp.shape().back();
    const int64_t rows = logp.numel() / v;
    const T* lp = logp.data().data();
    double total = 0.0;
    int64_t count = 0;
    for (int64_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        double pos = (1.0 - static_cast<double>(eps)) * lp[r * v + gold[r]];
        if (eps > T(0)) {
            double sum = 0.0;
            for (int64_t j = 0; j < v; ++j) sum += lp[r * v + j];
            pos += static_cast<double>(eps) / static_cast<double>(v) * sum;
        }
        total -= pos;
        ++count;
    }
    return total / static_cast<double>(count);
}

}  // namespace detail

// Label-smoothed cross entropy against (1-eps)*onehot(gold) + eps/V, averaged
// over masked-in tokens. Optional per-position weights scale each token's
// contribution without changing the normalizer (used by the bucket fallback).
template <typename T>
LossReportT<T> ce_label_smoothed(const TensorT<T>& logits, const std::vector<int>& gold, T eps,
                                 const std::vector<uint8_t>& mask, const std::vector<T>* pos_weights = nullptr) {
    return detail::ce_from_logp(log_softmax_lastdim(logits), gold, eps, mask, pos_weights);
}

namespace detail {

template <typename T>
LossReportT<T> kd_from_logp(const TensorT<T>& logp, const SoftTargetBatch<T>& targets,
                            const std::vector<uint8_t>& mask) {
    const int64_t v = logp.shape().back();
    const int64_t rows = logp.numel() / v;
    if (targets.rows != rows || targets.vocab != v)
        throw std::invalid_argument("kd_cross_entropy: target grid " + std::to_string(targets.rows) + "x" +
                                    std::to_string(targets.vocab) + " does not match logits " + shape_str(logp.shape()));
    if (static_cast<int64_t>(mask.size()) != rows)
        throw std::invalid_argument("kd_cross_entropy: mask length does not match logits rows");
    for (int64_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        const T* q = targets.probs.data() + r * v;
        for (int64_t j = 0; j < v; ++j)
            if (q[j] < T(0))
                throw std::invalid_argument("kd_cross_entropy: negative soft-target entry at row " + std::to_string(r));
    }
    const int64_t count = mask_count(mask);
    if (count == 0) throw std::invalid_argument("kd_cross_entropy: batch has no supervised tokens (all PAD)");

    std::vector<T> q = targets.probs;
    for (int64_t r = 0; r < rows; ++r) {
        if (!mask[r] || !targets.kd_active[r]) std::fill_n(q.data() + r * v, v, T(0));
    }
    TensorT<T> weighted = mul(logp, TensorT<T>::from_data(logp.shape(), std::move(q)));

    LossReportT<T> report;
    report.loss = mul_scalar(sum_all(weighted), T(-1) / static_cast<T>(count));
    report.value = static_cast<double>(report.loss.item());
    report.token_count = count;
    report.components["l_kd_ce"] = report.value;
    return report;
}

}  // namespace detail

// -sum_j q_j . log p_j over the support of q, averaged over masked-in tokens.
// Numerator positions can additionally be gated by q.kd_active; the
// normalizer stays the full masked token count so bucket masking does not
// rescale the survivors.
template <typename T>
LossReportT<T> kd_cross_entropy(const TensorT<T>& logits, const SoftTargetBatch<T>& targets,
                                const std::vector<uint8_t>& mask) {
    return detail::kd_from_logp(log_softmax_lastdim(logits), targets, mask);
}

// Teacher self cross entropy -sum q log q over the support of q (0 log 0 = 0),
// averaged like kd_cross_entropy. Constant in the student; subtracting it
// from the CE form yields the KL-form value.
template <typename T>
double soft_target_self_ce(const SoftTargetBatch<T>& targets, const std::vector<uint8_t>& mask) {
    double total = 0.0;
    for (int64_t r = 0; r < targets.rows; ++r) {
        if (!mask[r] || !targets.kd_active[r]) continue;
        const T* q = targets.probs.data() + r * targets.vocab;
        for (int64_t j = 0; j < targets.vocab; ++j) {
            const double qi = static_cast<double>(q[j]);
            if (qi > 0.0) total -= qi * std::log(qi);
        }
    }
    return total / static_cast<double>(detail::mask_count(mask));
}

// Hierarchical ranking loss: for teacher top-k [t_1..t_k] and student top-k
// [s_1..s_k] at each position,
//   sum_u sum_v max{0, 1{q(t_u) > q(s_v)} (p(s_v) - p(t_u))}
//   + sum_u max{0, p(t_u) - p(t_1)},
// summed over positions and divided by the masked token count. Subgradient at
// hinge kinks is 0; `student_probs` must already be post-softmax.
template <typename T>
LossReportT<T> hierarchical_ranking(const TensorT<T>& student_probs, const SoftTargetBatch<T>& teacher,
                                    int top_k, const std::vector<uint8_t>& mask) {
    const int64_t v = student_probs.shape().back();
    const int64_t rows = student_probs.numel() / v;
    if (top_k < 1 || top_k > v)
        throw std::invalid_argument("hierarchical_ranking: k must be in [1," + std::to_string(v) + "], got " +
                                    std::to_string(top_k));
    if (teacher.rows != rows || teacher.vocab != v)
        throw std::invalid_argument("hierarchical_ranking: teacher grid does not match student probs " +
                                    shape_str(student_probs.shape()));
    if (static_cast<int64_t>(mask.size()) != rows)
        throw std::invalid_argument("hierarchical_ranking: mask length does not match rows");
    const int64_t count = detail::mask_count(mask);
    if (count == 0) throw std::invalid_argument("hierarchical_ranking: batch has no supervised tokens (all PAD)");

    const T* p = student_probs.data().data();
    std::vector<int64_t> plus_idx, minus_idx;  // grad += at plus, grad -= at minus
    double total = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        if (!mask[r] || !teacher.kd_active[r]) continue;
        const T* q = teacher.probs.data() + r * v;
        const T* pr = p + r * v;
        const auto t_top = topk_desc(q, static_cast<int>(v), top_k);
        const auto s_top = topk_desc(pr, static_cast<int>(v), top_k);
        // Pairwise hinge family, then the top-1 family, in formula order.
        for (int u : t_top) {
            for (int s : s_top) {
                if (!(q[u] > q[s])) continue;
                const T margin = pr[s] - pr[u];
                if (margin > T(0)) {
                    total += static_cast<double>(margin);
                    plus_idx.push_back(r * v + s);
                    minus_idx.push_back(r * v + u);
                }
            }
        }
        for (int u : t_top) {
            const T top1_margin = pr[u] - pr[t_top[0]];
            if (top1_margin > T(0)) {
                total += static_cast<double>(top1_margin);
                plus_idx.push_back(r * v + u);
                minus_idx.push_back(r * v + t_top[0]);
            }
        }
    }

    const T value = static_cast<T>(total / static_cast<double>(count));
    TensorT<T> loss = make_op<T>(
        {1}, {value}, {student_probs},
        [plus = std::move(plus_idx), minus = std::move(minus_idx), count](Node<T>& self) {
            auto& parent = *self.parents[0];
            if (!parent.requires_grad) return;
            parent.ensure_grad();
            const T g = self.grad[0] / static_cast<T>(count);
            for (size_t i = 0; i < plus.size(); ++i) {
                parent.grad[plus[i]] += g;
                parent.grad[minus[i]] -= g;
            }
        });

    LossReportT<T> report;
    report.loss = loss;
    report.value = static_cast<double>(value);
    report.token_count = count;
    report.components["l_hr"] = report.value;
    return report;
}

// (1-alpha) L_ce + alpha (L_kd [+ L_hr]), Eq.-style interpolation. Positions
// whose kd_active flag is off (bucket probes) fall back to plain CE with
// weight 1. The reported value uses the KL form of the KD term; the graph
// optimizes the CE form (identical gradients).
template <typename T>
LossReportT<T> word_kd_loss(const TensorT<T>& logits, const std::vector<int>& gold,
                            const SoftTargetBatch<T>& targets, const KDWeights& weights, bool use_hr,
                            const std::vector<uint8_t>& mask) {
    weights.validate();
    const T alpha = static_cast<T>(weights.alpha);
    const T eps = static_cast<T>(weights.label_smoothing);
    const int64_t rows = logits.numel() / logits.shape().back();

    std::vector<T> ce_weights(rows, T(1));
    for (int64_t r = 0; r < rows; ++r)
        if (targets.kd_active[r]) ce_weights[r] = T(1) - alpha;

    // One shared log-softmax feeds the CE term, the KD term and (through
    // exp) the ranking term.
    TensorT<T> logp = log_softmax_lastdim(logits);
    LossReportT<T> ce_weighted = detail::ce_from_logp(logp, gold, eps, mask, &ce_weights);
    LossReportT<T> kd = detail::kd_from_logp(logp, targets, mask);
    const double self_ce = soft_target_self_ce(targets, mask);

    TensorT<T> loss = add(ce_weighted.loss, mul_scalar(kd.loss, alpha));
    LossReportT<T> report;
    report.token_count = ce_weighted.token_count;
    report.components["l_ce"] = detail::ce_value_from_logp(logp, gold, eps, mask);
    report.components["l_kd_ce"] = kd.value;
    report.components["l_kl"] = kd.value - self_ce;
    double hr_value = 0.0;
    if (use_hr) {
        LossReportT<T> hr = hierarchical_ranking(exp(logp), targets, weights.k, mask);
        loss = add(loss, mul_scalar(hr.loss, alpha));
        hr_value = hr.value;
    }
    report.components["l_hr"] = hr_value;
    report.loss = loss;
    report.value = ce_weighted.value + static_cast<double>(alpha) * (report.components["l_kl"] + hr_value);
    return report;
}

// Position-selection modes for sequence-level KD on a distilled corpus.
struct SeqKdMode {
    enum Kind { kAll, kTop1Only, kNonTop1Only, kTop1FixedFraction, kAllPlusWordTop1 };

    Kind kind = kAll;
    double fraction = 0.0;  // kTop1FixedFraction keep probability
    uint64_t seed = 0;

    static SeqKdMode all() { return {}; }
    static SeqKdMode top1_only() { return {kTop1Only, 0.0, 0}; }
    static SeqKdMode nontop1_only() { return {kNonTop1Only, 0.0, 0}; }
    static SeqKdMode top1_fixed_fraction(double fraction, uint64_t seed) {
        if (fraction < 0.0 || fraction > 1.0) throw std::invalid_argument("SeqKdMode: fraction must be in [0,1]");
        return {kTop1FixedFraction, fraction, seed};
    }
    static SeqKdMode all_plus_word_top1() { return {kAllPlusWordTop1, 0.0, 0}; }

    static SeqKdMode parse(const std::string& text);
    std::string to_string() const;
};

// CE over teacher-decoded targets restricted to the mode-selected positions,
// averaged over the selected count. `flags[r]` marks positions where the
// distilled token was the teacher's step-wise argmax; `sentence_index`/`step`
// give each position a stable identity for the fixed-fraction subset. Mode
// all_plus_word_top1 additionally distills the teacher's kept-top-1 target on
// non-top-1 positions (weight 1), which needs the teacher's top-1 id and
// probability per position.
template <typename T>
LossReportT<T> seq_kd_loss(const TensorT<T>& logits, const std::vector<int>& distilled_gold,
                           const std::vector<uint8_t>& flags, const SeqKdMode& mode,
                           const std::vector<uint8_t>& mask, const std::vector<int64_t>& sentence_index,
                           const std::vector<int>& step_index, T label_smoothing = T(0),
                           const std::vector<int>* teacher_top1_id = nullptr,
                           const std::vector<T>* teacher_top1_prob = nullptr) {
    const int64_t v = logits.shape().back();
    const int64_t rows = logits.numel() / v;
    if (static_cast<int64_t>(flags.size()) != rows || static_cast<int64_t>(mask.size()) != rows)
        throw std::invalid_argument("seq_kd_loss: flags/mask length does not match logits rows");

    std::vector<uint8_t> selected(rows, 0);
    for (int64_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        switch (mode.kind) {
            case SeqKdMode::kAll:
            case SeqKdMode::kAllPlusWordTop1:
                selected[r] = 1;
                break;
            case SeqKdMode::kTop1Only:
                selected[r] = flags[r];
                break;
            case SeqKdMode::kNonTop1Only:
                selected[r] = !flags[r];
                break;
            case SeqKdMode::kTop1FixedFraction:
                selected[r] =
                    flags[r] && hash01(mode.seed, static_cast<uint64_t>(sentence_index[r]),
                                       static_cast<uint64_t>(step_index[r])) < mode.fraction;
                break;
        }
    }
    const int64_t count = detail::mask_count(selected);
    if (count == 0)
        throw std::invalid_argument("seq_kd_loss: mode " + mode.to_string() + " selects zero positions in this batch");

    LossReportT<T> ce = ce_label_smoothed(logits, distilled_gold, label_smoothing, selected);
    LossReportT<T> report;
    report.loss = ce.loss;
    report.value = ce.value;
    report.token_count = count;
    report.components["l_seq_ce"] = ce.value;
    report.components["selected_fraction"] =
        static_cast<double>(count) / std::max<int64_t>(1, detail::mask_count(mask));

    if (mode.kind == SeqKdMode::kAllPlusWordTop1) {
        if (teacher_top1_id == nullptr || teacher_top1_prob == nullptr)
            throw std::invalid_argument("seq_kd_loss: all_plus_word_top1 needs the teacher's top-1 targets");
        // Kept-top-1 soft target on non-top-1 positions: -q(t1) log p(t1).
        SoftTargetBatch<T> t1;
        t1.rows = rows;
        t1.vocab = v;
        t1.probs.assign(static_cast<size_t>(rows * v), T(0));
        t1.top1_index = *teacher_top1_id;
        t1.top1_prob = *teacher_top1_prob;
        t1.kd_active.assign(rows, 0);
        std::vector<uint8_t> nontop1(rows, 0);
        for (int64_t r = 0; r < rows; ++r) {
            if (!mask[r] || flags[r]) continue;
            nontop1[r] = 1;
            t1.kd_active[r] = 1;
            t1.probs[r * v + (*teacher_top1_id)[r]] = (*teacher_top1_prob)[r];
        }
        if (detail::mask_count(nontop1) > 0) {
            LossReportT<T> extra = kd_cross_entropy(logits, t1, selected);
            report.loss = add(report.loss, extra.loss);
            report.value += extra.value;
            report.components["l_word_top1"] = extra.value;
        } else {
            report.components["l_word_top1"] = 0.0;
        }
    }
    return report;
}

}  // namespace tiekd
