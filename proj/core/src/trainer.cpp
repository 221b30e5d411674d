#include "tiekd/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "tiekd/checkpoint.hpp"

namespace tiekd {

namespace fs = std::filesystem;
using nlohmann::json;

KdFlavor kd_flavor_parse(const std::string& text) {
    if (text == "none") return KdFlavor::kNone;
    if (text == "word_kd") return KdFlavor::kWordKd;
    if (text == "tie_kd") return KdFlavor::kTieKd;
    if (text == "seq_kd") return KdFlavor::kSeqKd;
    if (text == "combined") return KdFlavor::kCombined;
    throw std::invalid_argument("unknown KD flavor '" + text + "'");
}

std::string kd_flavor_to_string(KdFlavor flavor) {
    switch (flavor) {
        case KdFlavor::kNone: return "none";
        case KdFlavor::kWordKd: return "word_kd";
        case KdFlavor::kTieKd: return "tie_kd";
        case KdFlavor::kSeqKd: return "seq_kd";
        case KdFlavor::kCombined: return "combined";
    }
    return "none";
}

void TrainConfig::validate() const {
    if (lr <= 0) throw std::invalid_argument("TrainConfig: lr must be positive");
    if (warmup_steps < 1) throw std::invalid_argument("TrainConfig: warmup_steps must be >= 1");
    if (batch_tokens < 2) throw std::invalid_argument("TrainConfig: batch_tokens too small");
    if (max_steps < 1) throw std::invalid_argument("TrainConfig: max_steps must be >= 1");
    if (checkpoint_every < 1) throw std::invalid_argument("TrainConfig: checkpoint_every must be >= 1");
    if (iterations < 1) throw std::invalid_argument("TrainConfig: iterations must be >= 1");
    kd.validate();
}

json train_config_to_json(const TrainConfig& c) {
    return json{{"lr", c.lr},
                {"warmup_steps", c.warmup_steps},
                {"adam_beta1", c.adam_beta1},
                {"adam_beta2", c.adam_beta2},
                {"adam_eps", c.adam_eps},
                {"clip_norm", c.clip_norm},
                {"batch_tokens", c.batch_tokens},
                {"max_steps", c.max_steps},
                {"seed", c.seed},
                {"flavor", kd_flavor_to_string(c.flavor)},
                {"alpha", c.kd.alpha},
                {"ranking_k", c.kd.k},
                {"kd_iterations", c.kd.n_iterations},
                {"label_smoothing", c.kd.label_smoothing},
                {"use_hr", c.use_hr},
                {"iterations", c.iterations},
                {"surgery", c.surgery.to_string()},
                {"seqkd_mode", c.seqkd_mode.to_string()},
                {"checkpoint_every", c.checkpoint_every},
                {"eval_sentences", c.eval_sentences},
                {"eval_batch_tokens", c.eval_batch_tokens},
                {"beam_size", c.eval_beam.beam_size},
                {"length_penalty", c.eval_beam.length_penalty},
                {"decode_max_len", c.eval_beam.max_len},
                {"final_bleu_sentences", c.final_bleu_sentences},
                {"overlap_sample", c.overlap_sample}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.lr = j.value("lr", c.lr);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.batch_tokens = j.value("batch_tokens", c.batch_tokens);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.seed = j.value("seed", c.seed);
    c.flavor = kd_flavor_parse(j.value("flavor", "none"));
    c.kd.alpha = j.value("alpha", c.kd.alpha);
    c.kd.k = j.value("ranking_k", c.kd.k);
    c.kd.n_iterations = j.value("kd_iterations", c.kd.n_iterations);
    c.kd.label_smoothing = j.value("label_smoothing", c.kd.label_smoothing);
    c.use_hr = j.value("use_hr", c.use_hr);
    c.iterations = j.value("iterations", c.iterations);
    c.surgery = SurgeryMode::parse(j.value("surgery", "vanilla"));
    c.seqkd_mode = SeqKdMode::parse(j.value("seqkd_mode", "all"));
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.eval_sentences = j.value("eval_sentences", c.eval_sentences);
    c.eval_batch_tokens = j.value("eval_batch_tokens", c.eval_batch_tokens);
    c.eval_beam.beam_size = j.value("beam_size", c.eval_beam.beam_size);
    c.eval_beam.length_penalty = j.value("length_penalty", c.eval_beam.length_penalty);
    c.eval_beam.max_len = j.value("decode_max_len", c.eval_beam.max_len);
    c.final_bleu_sentences = j.value("final_bleu_sentences", c.final_bleu_sentences);
    c.overlap_sample = j.value("overlap_sample", c.overlap_sample);
    c.validate();
    return c;
}

double inverse_sqrt_lr(double base_lr, int64_t step, int64_t warmup_steps) {
    if (step < 1) step = 1;
    if (step <= warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    return base_lr * std::sqrt(static_cast<double>(warmup_steps) / static_cast<double>(step));
}

// ---------------------------------------------------------------------------
// teacher cache
// ---------------------------------------------------------------------------

TeacherCache TeacherCache::build(const Seq2SeqModel& teacher, const std::vector<BatchItem>& items,
                                 int64_t batch_tokens) {
    NoGradGuard ng;
    TeacherCache cache;
    cache.vocab_ = teacher.config().vocab_size;
    int64_t max_index = 0;
    for (const auto& it : items) max_index = std::max(max_index, it.sentence_index);
    cache.probs_.resize(max_index + 1);

    std::vector<int64_t> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<int64_t> lengths(items.size());
    for (size_t i = 0; i < items.size(); ++i) lengths[i] = static_cast<int64_t>(items[i].target.size());
    for (const auto& group : pack_batches(order, lengths, batch_tokens)) {
        std::vector<BatchItem> batch_items;
        for (int64_t idx : group) batch_items.push_back(items[idx]);
        Batch batch = make_batch(batch_items);
        Tensor probs = softmax_lastdim(teacher.forward(batch.src, batch.tgt_in));
        const int64_t v = cache.vocab_;
        const int64_t tlen = batch.tgt_in.len;
        for (int64_t b = 0; b < batch.src.batch; ++b) {
            const int64_t steps = static_cast<int64_t>(items[group[b]].target.size());
            auto& rows = cache.probs_[batch.sentence_index[b]];
            rows.assign(static_cast<size_t>(steps * v), 0.0f);
            std::copy_n(probs.data().data() + b * tlen * v, steps * v, rows.data());
        }
    }
    return cache;
}

const float* TeacherCache::row(int64_t sentence, int step) const {
    const auto& rows = probs_[sentence];
    const int64_t offset = static_cast<int64_t>(step) * vocab_;
    if (offset + vocab_ > static_cast<int64_t>(rows.size()))
        throw std::out_of_range("TeacherCache: step " + std::to_string(step) + " out of range for sentence " +
                                std::to_string(sentence));
    return rows.data() + offset;
}

int TeacherCache::top1_id(int64_t sentence, int step) const {
    return argmax_tie_low(row(sentence, step), static_cast<int>(vocab_));
}

float TeacherCache::top1_prob(int64_t sentence, int step) const {
    const float* r = row(sentence, step);
    return r[argmax_tie_low(r, static_cast<int>(vocab_))];
}

// ---------------------------------------------------------------------------
// train state I/O
// ---------------------------------------------------------------------------

void save_train_state(const std::string& path, const TrainState& state) {
    NamedArrays content;
    json rng = json::array();
    for (uint64_t s : state.rng_state) rng.push_back(std::to_string(s));
    content.meta = {{"kind", "train_state"}, {"step", state.step},     {"epoch", state.epoch},
                    {"cursor", state.cursor}, {"rng", rng},            {"rng_has_spare", state.rng_has_spare},
                    {"rng_spare", state.rng_spare}};
    for (const auto& [name, data] : state.params) content.arrays.emplace_back("param/" + name, data);
    for (const auto& [name, data] : state.adam_m) content.arrays.emplace_back("adam_m/" + name, data);
    for (const auto& [name, data] : state.adam_v) content.arrays.emplace_back("adam_v/" + name, data);
    content.arrays.emplace_back("loss_history", state.loss_history);
    save_named_arrays(path, content);
}

TrainState load_train_state(const std::string& path) {
    NamedArrays content = load_named_arrays(path);
    TrainState state;
    state.step = content.meta.at("step");
    state.epoch = content.meta.at("epoch");
    state.cursor = content.meta.at("cursor");
    const auto rng = content.meta.at("rng");
    for (size_t i = 0; i < 4; ++i) state.rng_state[i] = std::stoull(rng.at(i).get<std::string>());
    state.rng_has_spare = content.meta.at("rng_has_spare");
    state.rng_spare = content.meta.at("rng_spare");
    for (const auto& [name, data] : content.arrays) {
        if (name.rfind("param/", 0) == 0)
            state.params.emplace_back(name.substr(6), data);
        else if (name.rfind("adam_m/", 0) == 0)
            state.adam_m.emplace_back(name.substr(7), data);
        else if (name.rfind("adam_v/", 0) == 0)
            state.adam_v.emplace_back(name.substr(7), data);
        else if (name == "loss_history")
            state.loss_history = data;
    }
    return state;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

namespace {

struct Adam {
    std::vector<std::vector<float>> m, v;

    explicit Adam(const Seq2SeqModel& model) {
        for (const auto& [name, t] : model.params()) {
            m.emplace_back(t.numel(), 0.0f);
            v.emplace_back(t.numel(), 0.0f);
        }
    }

    void step(Seq2SeqModel& model, const TrainConfig& cfg, int64_t t_step) {
        const double lr = inverse_sqrt_lr(cfg.lr, t_step, cfg.warmup_steps);
        // Bias-corrected update folded into float constants so the hot loop
        // vectorizes: data -= (lr/bc1) * m / (sqrt(v/bc2) + eps).
        const float beta1 = static_cast<float>(cfg.adam_beta1);
        const float beta2 = static_cast<float>(cfg.adam_beta2);
        const float one_m_beta1 = 1.0f - beta1;
        const float one_m_beta2 = 1.0f - beta2;
        const float lr_over_bc1 =
            static_cast<float>(lr / (1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t_step))));
        const float inv_bc2 = static_cast<float>(1.0 / (1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t_step))));
        const float eps = static_cast<float>(cfg.adam_eps);
        auto& params = model.params();
        for (size_t p = 0; p < params.size(); ++p) {
            auto& tensor = params[p].second;
            if (!tensor.has_grad()) continue;
            const float* __restrict g = tensor.grad().data();
            float* __restrict data = tensor.data().data();
            float* __restrict mp = m[p].data();
            float* __restrict vp = v[p].data();
            const size_t n = tensor.data().size();
            for (size_t i = 0; i < n; ++i) {
                const float gi = g[i];
                mp[i] = beta1 * mp[i] + one_m_beta1 * gi;
                vp[i] = beta2 * vp[i] + one_m_beta2 * gi * gi;
                data[i] -= lr_over_bc1 * mp[i] / (std::sqrt(vp[i] * inv_bc2) + eps);
            }
        }
    }
};

void clip_gradients(Seq2SeqModel& model, double clip_norm) {
    if (clip_norm <= 0) return;
    double sq = 0.0;
    for (const auto& [name, t] : model.params()) {
        if (!t.has_grad()) continue;
        // Four-lane accumulation in a fixed order: vectorizable yet
        // deterministic.
        const float* g = t.grad().data();
        const size_t n = t.grad().size();
        double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
        size_t i = 0;
        for (; i + 4 <= n; i += 4) {
            s0 += static_cast<double>(g[i]) * g[i];
            s1 += static_cast<double>(g[i + 1]) * g[i + 1];
            s2 += static_cast<double>(g[i + 2]) * g[i + 2];
            s3 += static_cast<double>(g[i + 3]) * g[i + 3];
        }
        for (; i < n; ++i) s0 += static_cast<double>(g[i]) * g[i];
        sq += ((s0 + s1) + (s2 + s3));
    }
    const double norm = std::sqrt(sq);
    if (norm <= clip_norm) return;
    const float scale = static_cast<float>(clip_norm / norm);
    for (auto& [name, t] : model.params()) {
        if (!t.has_grad()) continue;
        auto& node = *t.node();
        for (auto& g : node.grad) g *= scale;
    }
}

// Shuffles, buckets by length within local chunks (padding efficiency without
// freezing batch composition across epochs), packs token batches, shuffles
// the batch order.
std::vector<std::vector<int64_t>> epoch_plan(const std::vector<int64_t>& lengths, int64_t batch_tokens, uint64_t seed,
                                             int64_t epoch) {
    std::vector<int64_t> order(lengths.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng::derive(seed, 0xE70C0000ull + static_cast<uint64_t>(epoch));
    rng.shuffle(order.begin(), order.end());
    const int64_t chunk = std::max<int64_t>(1, 32 * batch_tokens);
    int64_t begin = 0, used = 0;
    for (int64_t i = 0; i <= static_cast<int64_t>(order.size()); ++i) {
        if (i == static_cast<int64_t>(order.size()) || used >= chunk) {
            std::stable_sort(order.begin() + begin, order.begin() + i,
                             [&](int64_t a, int64_t b) { return lengths[a] < lengths[b]; });
            begin = i;
            used = 0;
        }
        if (i < static_cast<int64_t>(order.size())) used += lengths[order[i]];
    }
    auto batches = pack_batches(order, lengths, batch_tokens);
    rng.shuffle(batches.begin(), batches.end());
    return batches;
}

std::vector<float> average_params(const std::deque<std::vector<std::vector<float>>>& snaps, size_t param_idx) {
    std::vector<float> avg(snaps.front()[param_idx].size(), 0.0f);
    for (const auto& snap : snaps)
        for (size_t i = 0; i < avg.size(); ++i) avg[i] += snap[param_idx][i];
    const float inv = 1.0f / static_cast<float>(snaps.size());
    for (auto& x : avg) x *= inv;
    return avg;
}

}  // namespace

TrainOutcome train_model(const ModelConfig& model_cfg, const TrainData& data, const TrainConfig& cfg,
                         const Seq2SeqModel* teacher, const TrainState* resume_from) {
    cfg.validate();
    model_cfg.validate();
    const auto t_start = std::chrono::steady_clock::now();

    const bool uses_distilled = cfg.flavor == KdFlavor::kSeqKd || cfg.flavor == KdFlavor::kCombined;
    if (uses_distilled && data.distilled == nullptr)
        throw std::invalid_argument("train: flavor " + kd_flavor_to_string(cfg.flavor) + " needs a distilled corpus");
    if (!uses_distilled && data.train == nullptr) throw std::invalid_argument("train: missing training corpus");
    if (data.valid == nullptr) throw std::invalid_argument("train: missing validation corpus");
    const bool needs_teacher = cfg.is_word_level() ||
                               (cfg.flavor == KdFlavor::kSeqKd && cfg.seqkd_mode.kind == SeqKdMode::kAllPlusWordTop1);
    if (needs_teacher && teacher == nullptr)
        throw std::invalid_argument("train: flavor " + kd_flavor_to_string(cfg.flavor) + " needs a frozen teacher");
    if (teacher != nullptr && teacher->config().vocab_size != model_cfg.vocab_size)
        throw std::invalid_argument("train: teacher vocab " + std::to_string(teacher->config().vocab_size) +
                                    " does not match student vocab " + std::to_string(model_cfg.vocab_size));

    // Training items (gold or distilled view).
    std::vector<BatchItem> items;
    if (uses_distilled) {
        items.reserve(data.distilled->size());
        for (int64_t i = 0; i < static_cast<int64_t>(data.distilled->size()); ++i)
            items.push_back(distilled_item(*data.distilled, i));
    } else {
        items.reserve(data.train->size());
        for (int64_t i = 0; i < static_cast<int64_t>(data.train->size()); ++i) items.push_back(gold_item(*data.train, i));
    }
    if (items.empty()) throw std::invalid_argument("train: empty training corpus");
    std::vector<int64_t> lengths(items.size());
    for (size_t i = 0; i < items.size(); ++i) lengths[i] = static_cast<int64_t>(items[i].target.size());

    // Teacher distributions on fixed training prefixes are cacheable.
    const bool wants_cache = teacher != nullptr && (cfg.is_word_level() ||
                                                    (cfg.flavor == KdFlavor::kSeqKd &&
                                                     cfg.seqkd_mode.kind == SeqKdMode::kAllPlusWordTop1));
    std::optional<TeacherCache> own_cache;
    const TeacherCache* cache = data.teacher_cache;
    if (wants_cache && cache == nullptr) {
        own_cache = TeacherCache::build(*teacher, items, cfg.eval_batch_tokens);
        cache = &*own_cache;
    }

    Seq2SeqModel model(model_cfg);
    Adam adam(model);
    Rng dropout_rng = Rng::derive(cfg.seed, 0xD0);
    int64_t step = 0, epoch = 0, cursor = 0;
    std::vector<float> loss_history;

    if (resume_from != nullptr) {
        const auto& st = *resume_from;
        auto& params = model.params();
        if (st.params.size() != params.size()) throw std::invalid_argument("train: resume state does not match model");
        for (size_t p = 0; p < params.size(); ++p) {
            params[p].second.data() = st.params[p].second;
            adam.m[p] = st.adam_m[p].second;
            adam.v[p] = st.adam_v[p].second;
        }
        step = st.step;
        epoch = st.epoch;
        cursor = st.cursor;
        dropout_rng.restore(st.rng_state, st.rng_has_spare, st.rng_spare);
        loss_history = st.loss_history;
    }

    std::ofstream metrics_out;
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        fs::create_directories(fs::path(cfg.out_dir) / "checkpoints");
        metrics_out.open(fs::path(cfg.out_dir) / "metrics.jsonl", std::ios::binary);
    }

    std::deque<std::vector<std::vector<float>>> recent_snapshots;  // last 5 checkpoints
    std::vector<std::vector<float>> best_params;
    double best_val_acc = -1.0;
    int64_t best_step = 0;
    double loss_accum = 0.0;
    int64_t loss_accum_n = 0;

    auto snapshot = [&]() {
        std::vector<std::vector<float>> snap;
        snap.reserve(model.params().size());
        for (const auto& [name, t] : model.params()) snap.push_back(t.data());
        return snap;
    };

    auto make_batch_for = [&](const std::vector<int64_t>& group) {
        std::vector<BatchItem> batch_items;
        batch_items.reserve(group.size());
        for (int64_t idx : group) batch_items.push_back(items[idx]);
        return make_batch(batch_items);
    };

    auto compute_loss = [&](const Batch& batch) -> LossReport {
        switch (cfg.flavor) {
            case KdFlavor::kNone: {
                Tensor logits = model.forward(batch.src, batch.tgt_in, true, &dropout_rng);
                return ce_label_smoothed(logits, batch.gold, static_cast<float>(cfg.kd.label_smoothing), batch.mask);
            }
            case KdFlavor::kWordKd:
            case KdFlavor::kTieKd:
            case KdFlavor::kCombined: {
                IterativeKdOptions opts;
                opts.n_iterations = cfg.effective_iterations();
                opts.use_hr = cfg.effective_use_hr();
                opts.surgery = cfg.surgery;
                opts.weights = cfg.kd;
                opts.training_mode = true;
                opts.dropout_rng = &dropout_rng;
                opts.cache = cache;
                return iterative_kd_step(model, *teacher, batch, opts);
            }
            case KdFlavor::kSeqKd: {
                Tensor logits = model.forward(batch.src, batch.tgt_in, true, &dropout_rng);
                const int64_t tlen = batch.tgt_in.len;
                const int64_t rows = batch.src.batch * tlen;
                std::vector<int64_t> sent(rows);
                std::vector<int> steps(rows);
                for (int64_t b = 0; b < batch.src.batch; ++b)
                    for (int64_t j = 0; j < tlen; ++j) {
                        sent[b * tlen + j] = batch.sentence_index[b];
                        steps[b * tlen + j] = static_cast<int>(j);
                    }
                std::vector<int> t1_ids;
                std::vector<float> t1_probs;
                if (cfg.seqkd_mode.kind == SeqKdMode::kAllPlusWordTop1) {
                    t1_ids.resize(rows, 0);
                    t1_probs.resize(rows, 0.0f);
                    for (int64_t b = 0; b < batch.src.batch; ++b)
                        for (int64_t j = 0; j < tlen; ++j)
                            if (batch.mask[b * tlen + j]) {
                                t1_ids[b * tlen + j] = cache->top1_id(batch.sentence_index[b], static_cast<int>(j));
                                t1_probs[b * tlen + j] =
                                    cache->top1_prob(batch.sentence_index[b], static_cast<int>(j));
                            }
                }
                return seq_kd_loss(logits, batch.gold, batch.flags, cfg.seqkd_mode, batch.mask, sent, steps,
                                   static_cast<float>(cfg.kd.label_smoothing),
                                   t1_ids.empty() ? nullptr : &t1_ids, t1_probs.empty() ? nullptr : &t1_probs);
            }
        }
        throw std::logic_error("train: unhandled flavor");
    };

    auto run_eval = [&](int64_t at_step) {
        const double val_acc = token_accuracy(model, *data.valid, cfg.eval_sentences, cfg.eval_batch_tokens);
        const double mean_loss = loss_accum_n > 0 ? loss_accum / loss_accum_n : 0.0;
        loss_accum = 0.0;
        loss_accum_n = 0;
        if (metrics_out.is_open()) {
            json line = {{"step", at_step},
                         {"lr", inverse_sqrt_lr(cfg.lr, at_step, cfg.warmup_steps)},
                         {"train_loss", mean_loss},
                         {"val_token_acc", val_acc}};
            metrics_out << line.dump() << "\n";
            metrics_out.flush();
        }
        recent_snapshots.push_back(snapshot());
        if (recent_snapshots.size() > 5) recent_snapshots.pop_front();
        if (!cfg.out_dir.empty()) {
            char name[32];
            std::snprintf(name, sizeof(name), "step%06lld.bin", static_cast<long long>(at_step));
            save_model((fs::path(cfg.out_dir) / "checkpoints" / name).string(), model, {{"step", at_step}});
        }
        if (val_acc > best_val_acc) {
            best_val_acc = val_acc;
            best_step = at_step;
            best_params = snapshot();
        }
    };

    std::vector<std::vector<int64_t>> plan = epoch_plan(lengths, cfg.batch_tokens, cfg.seed, epoch);
    while (step < cfg.max_steps) {
        if (cursor >= static_cast<int64_t>(plan.size())) {
            ++epoch;
            cursor = 0;
            plan = epoch_plan(lengths, cfg.batch_tokens, cfg.seed, epoch);
        }
        Batch batch = make_batch_for(plan[cursor++]);
        model.zero_grad();
        LossReport report = compute_loss(batch);
        backward(report.loss);
        clip_gradients(model, cfg.clip_norm);
        ++step;
        adam.step(model, cfg, step);
        loss_history.push_back(static_cast<float>(report.value));
        loss_accum += report.value;
        ++loss_accum_n;
        if (step % cfg.checkpoint_every == 0 || step == cfg.max_steps) run_eval(step);
    }

    // Final parameters: average of the last 5 checkpoints when available.
    Seq2SeqModel final_model(model_cfg);
    if (recent_snapshots.size() >= 5) {
        auto& params = final_model.params();
        for (size_t p = 0; p < params.size(); ++p) params[p].second.data() = average_params(recent_snapshots, p);
    } else {
        auto& params = final_model.params();
        auto& src = model.params();
        for (size_t p = 0; p < params.size(); ++p) params[p].second.data() = src[p].second.data();
    }
    Seq2SeqModel best_model(model_cfg);
    {
        auto& params = best_model.params();
        if (best_params.empty()) best_params = snapshot();
        for (size_t p = 0; p < params.size(); ++p) params[p].second.data() = best_params[p];
    }

    // Final evaluation.
    TrainOutcome out{std::move(final_model), std::move(best_model), RunReport{}, std::move(loss_history), best_step,
                     std::max(0.0, best_val_acc), TrainState{}};
    out.report.token_acc = token_accuracy(out.model, *data.valid, -1, cfg.eval_batch_tokens);
    if (teacher != nullptr) {
        out.report.ta = top1_agreement(out.model, *teacher, *data.valid, cfg.eval_sentences, cfg.eval_batch_tokens);
        const auto dist = ranking_distances(out.model, *teacher, *data.valid, cfg.kd.k, cfg.eval_sentences,
                                            cfg.eval_batch_tokens);
        out.report.d_edit = dist.d_edit;
        out.report.d_rank = dist.d_rank;
    }
    if (data.train != nullptr) {
        const Seq2SeqModel& overlap_model = teacher != nullptr ? *teacher : out.model;
        out.report.overlap = overlap_rate(overlap_model, *data.train,
                                          std::min<int64_t>(cfg.overlap_sample, data.train->size()), 777);
    }
    if (data.test != nullptr && cfg.final_bleu_sentences > 0) {
        std::vector<std::vector<int>> hyps, refs;
        BeamConfig beam = cfg.eval_beam;
        beam.max_len = std::min(beam.max_len, model_cfg.max_len - 1);
        const int64_t n = std::min<int64_t>(cfg.final_bleu_sentences, data.test->size());
        for (int64_t i = 0; i < n; ++i) {
            const auto& pair = data.test->pairs[i];
            DecodeResult r = beam_decode<float>(model_scorer(out.model, pair.src), beam);
            std::vector<int> hyp = r.tokens;
            if (!hyp.empty() && hyp.back() == kEos) hyp.pop_back();
            hyps.push_back(std::move(hyp));
            refs.push_back(pair.tgt);
        }
        out.report.bleu = corpus_bleu(hyps, refs);
        out.test_hypotheses = std::move(hyps);
    }
    out.report.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

    // Exportable state for bit-exact resume.
    auto& st = out.final_state;
    for (size_t p = 0; p < model.params().size(); ++p) {
        st.params.emplace_back(model.params()[p].first, model.params()[p].second.data());
        st.adam_m.emplace_back(model.params()[p].first, adam.m[p]);
        st.adam_v.emplace_back(model.params()[p].first, adam.v[p]);
    }
    st.step = step;
    st.epoch = epoch;
    st.cursor = cursor;
    st.rng_state = dropout_rng.state();
    st.rng_has_spare = dropout_rng.has_spare();
    st.rng_spare = dropout_rng.spare();
    st.loss_history = out.loss_history;

    if (!cfg.out_dir.empty()) {
        std::ofstream report_out(fs::path(cfg.out_dir) / "report.json", std::ios::binary);
        report_out << out.report.to_json().dump(2) << "\n";
    }
    return out;
}

}  // namespace tiekd
