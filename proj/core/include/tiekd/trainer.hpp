#pragma once

// Teacher-forcing training for teachers and students, word/sequence-level KD
// flavors, and the iterative KD procedure (student argmax predictions fed
// back as decoder inputs for N rounds of distillation).

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tiekd/data.hpp"
#include "tiekd/decode.hpp"
#include "tiekd/losses.hpp"
#include "tiekd/metrics.hpp"
#include "tiekd/model.hpp"
#include "tiekd/surgery.hpp"

namespace tiekd {

enum class KdFlavor { kNone, kWordKd, kTieKd, kSeqKd, kCombined };

KdFlavor kd_flavor_parse(const std::string& text);
std::string kd_flavor_to_string(KdFlavor flavor);

struct TrainConfig {
    // optimizer: Adam with inverse-sqrt decay after linear warmup
    double lr = 3e-3;
    int64_t warmup_steps = 400;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.98;
    double adam_eps = 1e-9;
    double clip_norm = 1.0;  // 0 disables clipping

    int64_t batch_tokens = 96;
    int64_t max_steps = 8000;
    uint64_t seed = 1;

    KdFlavor flavor = KdFlavor::kNone;
    KDWeights kd;                 // alpha, ranking k, iteration count N, label smoothing
    bool use_hr = false;          // hierarchical ranking term (tie_kd forces true)
    int iterations = 1;           // KD iterations (tie_kd uses kd.n_iterations)
    SurgeryMode surgery;          // word-level KD soft-target surgery
    SeqKdMode seqkd_mode;         // sequence-level KD position selection

    int64_t checkpoint_every = 500;
    int64_t eval_sentences = 400;      // validation cap per cadence eval
    int64_t eval_batch_tokens = 512;
    BeamConfig eval_beam;              // final BLEU decode
    int64_t final_bleu_sentences = 256;
    int64_t overlap_sample = 3000;
    std::string out_dir;  // empty: keep artifacts in memory only

    int effective_iterations() const { return flavor == KdFlavor::kTieKd ? kd.n_iterations : iterations; }
    bool effective_use_hr() const { return flavor == KdFlavor::kTieKd ? true : use_hr; }
    bool is_word_level() const {
        return flavor == KdFlavor::kWordKd || flavor == KdFlavor::kTieKd || flavor == KdFlavor::kCombined;
    }
    void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Teacher-forced teacher distributions precomputed per sentence; rows are
// bit-identical to a live eval forward on any batch that contains the
// sentence (masked attention makes outputs padding-invariant).
class TeacherCache {
  public:
    static TeacherCache build(const Seq2SeqModel& teacher, const std::vector<BatchItem>& items,
                              int64_t batch_tokens = 512);

    // Row of vocab probabilities for (sentence, step).
    const float* row(int64_t sentence, int step) const;
    int top1_id(int64_t sentence, int step) const;
    float top1_prob(int64_t sentence, int step) const;
    int64_t vocab() const { return vocab_; }

  private:
    int64_t vocab_ = 0;
    std::vector<std::vector<float>> probs_;  // per sentence: steps * vocab
};

struct IterativeKdOptions {
    int n_iterations = 1;
    bool use_hr = false;
    SurgeryMode surgery;
    KDWeights weights;
    bool training_mode = false;
    Rng* dropout_rng = nullptr;
    const TeacherCache* cache = nullptr;  // iteration-1 fast path (inputs == batch.tgt_in)

    // Testing hooks: when `frozen_inputs` is set, iterations i>=2 use the
    // given decoder inputs instead of recomputing the student argmax (keeps
    // the loss differentiable for finite-difference checks). When
    // `captured_inputs` is set, the inputs actually used are recorded.
    const std::vector<TokenMatrix>* frozen_inputs = nullptr;
    std::vector<TokenMatrix>* captured_inputs = nullptr;
};

// One training-step loss under iterative KD:
//   y0 = gold decoder inputs; L_ce on gold computed from the first pass;
//   for i in 1..N: distill on inputs y^{i-1}, then y^i = argmax of the
//   student's i-th pass (no gradient through the argmax);
//   total = (1-alpha) L_ce + (alpha/N) sum_i L_kd^i.
// N=1 is exactly the single-pass word-KD loss.
template <typename T>
LossReportT<T> iterative_kd_step(Seq2SeqModelT<T>& student, const Seq2SeqModelT<T>& teacher, const Batch& batch,
                                 const IterativeKdOptions& opts);

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct TrainData {
    const ParallelCorpus* train = nullptr;      // gold parallel data
    const DistilledCorpus* distilled = nullptr; // teacher-decoded data (seq_kd / combined)
    const ParallelCorpus* valid = nullptr;
    const ParallelCorpus* test = nullptr;       // final BLEU decode; optional
    // Prebuilt teacher cache for the training items (suite runs share one);
    // must match the teacher and corpus passed alongside.
    const TeacherCache* teacher_cache = nullptr;
};

// Bit-exact resume support: full optimizer/RNG/cursor state.
struct TrainState {
    std::vector<std::pair<std::string, std::vector<float>>> params;
    std::vector<std::pair<std::string, std::vector<float>>> adam_m;
    std::vector<std::pair<std::string, std::vector<float>>> adam_v;
    int64_t step = 0;
    int64_t epoch = 0;
    int64_t cursor = 0;  // batch index within the epoch
    std::array<uint64_t, 4> rng_state{};
    bool rng_has_spare = false;
    double rng_spare = 0.0;
    std::vector<float> loss_history;
};

void save_train_state(const std::string& path, const TrainState& state);
TrainState load_train_state(const std::string& path);

struct TrainOutcome {
    Seq2SeqModel model;       // final parameters (last-5 checkpoint average when available)
    Seq2SeqModel best_model;  // highest validation token accuracy
    RunReport report;
    std::vector<float> loss_history;
    int64_t best_step = 0;
    double best_val_acc = 0;
    TrainState final_state;
    std::vector<std::vector<int>> test_hypotheses;  // beam output backing report.bleu
};

TrainOutcome train_model(const ModelConfig& model_cfg, const TrainData& data, const TrainConfig& cfg,
                         const Seq2SeqModel* teacher = nullptr, const TrainState* resume_from = nullptr);

double inverse_sqrt_lr(double base_lr, int64_t step, int64_t warmup_steps);

// ---------------------------------------------------------------------------
// iterative KD implementation
// ---------------------------------------------------------------------------

template <typename T>
LossReportT<T> iterative_kd_step(Seq2SeqModelT<T>& student, const Seq2SeqModelT<T>& teacher, const Batch& batch,
                                 const IterativeKdOptions& opts) {
    const int n = opts.n_iterations;
    if (n < 1) throw std::invalid_argument("iterative_kd_step: n_iterations must be >= 1, got " + std::to_string(n));
    opts.weights.validate();
    const T alpha = static_cast<T>(opts.weights.alpha);
    const T eps = static_cast<T>(opts.weights.label_smoothing);
    const int64_t tlen = batch.tgt_in.len;
    const int64_t v = student.config().vocab_size;

    auto teacher_targets = [&](const TokenMatrix& inputs, bool is_gold_inputs) {
        SoftTargetBatch<T> targets;
        if constexpr (std::is_same_v<T, float>) {
            if (opts.cache != nullptr && is_gold_inputs) {
                const int64_t rows = batch.src.batch * tlen;
                std::vector<T> probs(static_cast<size_t>(rows * v), T(0));
                for (int64_t b = 0; b < batch.src.batch; ++b)
                    for (int64_t j = 0; j < tlen; ++j)
                        if (batch.mask[b * tlen + j])
                            std::copy_n(opts.cache->row(batch.sentence_index[b], static_cast<int>(j)), v,
                                        probs.data() + (b * tlen + j) * v);
                targets = SoftTargetBatch<T>::from_probs(rows, v, std::move(probs));
            }
        }
        if (targets.rows == 0) {
            NoGradGuard ng;
            targets = soft_targets_from_logits(teacher.forward(batch.src, inputs));
        }
        targets.apply(opts.surgery, batch.gold, batch.mask, eps);
        return targets;
    };

    // Iteration 1 shares the gold-input forward with the CE loss.
    TokenMatrix inputs = batch.tgt_in;
    TensorT<T> logits = student.forward(batch.src, inputs, opts.training_mode, opts.dropout_rng);
    SoftTargetBatch<T> targets = teacher_targets(inputs, true);
    if (opts.captured_inputs) opts.captured_inputs->push_back(inputs);

    if (n == 1) return word_kd_loss(logits, batch.gold, targets, opts.weights, opts.use_hr, batch.mask);

    std::vector<T> ce_weights(batch.mask.size(), T(1));
    for (size_t r = 0; r < batch.mask.size(); ++r)
        if (targets.kd_active[r]) ce_weights[r] = T(1) - alpha;
    TensorT<T> logp = log_softmax_lastdim(logits);
    LossReportT<T> ce_weighted = detail::ce_from_logp(logp, batch.gold, eps, batch.mask, &ce_weights);
    const double ce_plain_value = detail::ce_value_from_logp(logp, batch.gold, eps, batch.mask);

    TensorT<T> kd_total;
    double kl_total = 0.0, hr_total = 0.0;
    LossReportT<T> report;
    for (int i = 1; i <= n; ++i) {
        if (i > 1) {
            if (opts.frozen_inputs != nullptr) {
                inputs = (*opts.frozen_inputs)[i - 2];
            } else {
                // y^{i-1} = argmax of the previous student pass; BOS kept at
                // position 0, prediction j feeds position j+1, PAD preserved.
                TokenMatrix next(batch.src.batch, tlen);
                const T* p = logits.data().data();
                for (int64_t b = 0; b < batch.src.batch; ++b) {
                    next.at(b, 0) = kBos;
                    for (int64_t j = 1; j < tlen; ++j) {
                        if (batch.tgt_in.at(b, j) == kPad)
                            next.at(b, j) = kPad;
                        else
                            next.at(b, j) = argmax_tie_low(p + (b * tlen + j - 1) * v, static_cast<int>(v));
                    }
                }
                inputs = std::move(next);
            }
            if (opts.captured_inputs) opts.captured_inputs->push_back(inputs);
            logits = student.forward(batch.src, inputs, opts.training_mode, opts.dropout_rng);
            logp = log_softmax_lastdim(logits);
            targets = teacher_targets(inputs, false);
        }
        LossReportT<T> kd = detail::kd_from_logp(logp, targets, batch.mask);
        const double kl_i = kd.value - soft_target_self_ce(targets, batch.mask);
        TensorT<T> kd_i = kd.loss;
        double hr_i = 0.0;
        if (opts.use_hr) {
            LossReportT<T> hr = hierarchical_ranking(exp(logp), targets, opts.weights.k, batch.mask);
            kd_i = add(kd_i, hr.loss);
            hr_i = hr.value;
        }
        kd_total = kd_total.defined() ? add(kd_total, kd_i) : kd_i;
        kl_total += kl_i;
        hr_total += hr_i;
        report.components["l_kd_iter_" + std::to_string(i)] = kl_i + hr_i;
    }

    report.loss = add(ce_weighted.loss, mul_scalar(kd_total, alpha / static_cast<T>(n)));
    report.token_count = ce_weighted.token_count;
    report.components["l_ce"] = ce_plain_value;
    report.components["l_kl"] = kl_total / n;
    report.components["l_hr"] = hr_total / n;
    report.value = ce_weighted.value + static_cast<double>(alpha) / n * (kl_total + hr_total);
    return report;
}

}  // namespace tiekd
