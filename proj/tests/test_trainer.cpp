#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "tiekd/config.hpp"
#include "tiekd/trainer.hpp"

using namespace tiekd;
using tiekd::test::micro_model_config;

namespace {

TaskSpec micro_task(uint64_t seed = 3) {
    TaskSpec spec;
    spec.src_vocab_size = 12;
    spec.synonym_set_size = 2;
    spec.dominant_prob = 0.75;
    spec.min_len = 2;
    spec.max_len = 5;
    spec.n_train = 60;
    spec.n_valid = 30;
    spec.n_test = 30;
    spec.seed = seed;
    return spec;
}

TrainConfig micro_train(int64_t steps) {
    TrainConfig cfg;
    cfg.lr = 3e-3;
    cfg.warmup_steps = 10;
    cfg.batch_tokens = 24;
    cfg.max_steps = steps;
    cfg.checkpoint_every = 10;
    cfg.eval_sentences = 16;
    cfg.final_bleu_sentences = 8;
    cfg.overlap_sample = 0;
    cfg.seed = 5;
    return cfg;
}

Batch micro_batch(const SynonymTask& task, const ParallelCorpus& corpus) {
    std::vector<BatchItem> items;
    for (int64_t i = 0; i < 4; ++i) items.push_back(gold_item(corpus, i));
    (void)task;
    return make_batch(items);
}

// Central-difference gradient check against sampled parameter coordinates.
template <typename T, typename LossFn>
double max_param_grad_error(Seq2SeqModelT<T>& model, LossFn&& loss_fn, int coords_per_param, T h, Rng& rng) {
    model.zero_grad();
    auto loss = loss_fn();
    backward(loss.loss);
    double worst = 0.0;
    for (auto& [name, param] : model.params()) {
        if (!param.has_grad()) continue;
        for (int c = 0; c < coords_per_param; ++c) {
            const size_t i = rng.uniform_int(param.data().size());
            const T saved = param.data()[i];
            const T step = h * std::max(T(1), std::abs(saved));
            param.data()[i] = saved + step;
            const double fp = loss_fn().value;
            param.data()[i] = saved - step;
            const double fm = loss_fn().value;
            param.data()[i] = saved;
            const double central = (fp - fm) / (2.0 * static_cast<double>(step));
            const double analytic = param.grad()[i];
            worst = std::max(worst, std::abs(analytic - central) / std::max(1.0, std::abs(central)));
        }
    }
    return worst;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("inverse sqrt schedule: linear warmup then sqrt decay") {
    CHECK(inverse_sqrt_lr(1e-3, 1, 100) == doctest::Approx(1e-5));
    CHECK(inverse_sqrt_lr(1e-3, 100, 100) == doctest::Approx(1e-3));
    CHECK(inverse_sqrt_lr(1e-3, 400, 100) == doctest::Approx(5e-4));
    CHECK(inverse_sqrt_lr(1e-3, 50, 100) == doctest::Approx(5e-4));
}

TEST_CASE("iterative N=1 equals the single-pass word-KD loss bit-exactly") {
    SynonymTask task(micro_task());
    auto corpus = task.train();
    const int vocab = model_vocab_for_task(task.spec());
    Seq2SeqModelT<double> student(micro_model_config(vocab, 1));
    Seq2SeqModelT<double> teacher(micro_model_config(vocab, 2));
    Batch batch = micro_batch(task, corpus);

    IterativeKdOptions opts;
    opts.n_iterations = 1;
    opts.use_hr = true;
    opts.weights.alpha = 0.5;
    opts.weights.k = 3;
    auto via_iterative = iterative_kd_step(student, teacher, batch, opts);

    auto logits = student.forward(batch.src, batch.tgt_in);
    SoftTargetBatch<double> targets;
    {
        NoGradGuard ng;
        targets = soft_targets_from_logits(teacher.forward(batch.src, batch.tgt_in));
    }
    targets.apply(SurgeryMode::vanilla(), batch.gold, batch.mask, 0.1);
    auto direct = word_kd_loss(logits, batch.gold, targets, opts.weights, true, batch.mask);
    CHECK(via_iterative.value == direct.value);
    CHECK(via_iterative.loss.item() == direct.loss.item());
}

TEST_CASE("iterative line-10 arithmetic: (1-a)Lce + (a/N) sum of iteration losses") {
    SynonymTask task(micro_task());
    auto corpus = task.train();
    const int vocab = model_vocab_for_task(task.spec());
    Seq2SeqModelT<double> student(micro_model_config(vocab, 3));
    Seq2SeqModelT<double> teacher(micro_model_config(vocab, 4));
    Batch batch = micro_batch(task, corpus);

    IterativeKdOptions opts;
    opts.n_iterations = 2;
    opts.use_hr = true;
    opts.weights.alpha = 0.5;
    opts.weights.k = 3;
    auto report = iterative_kd_step(student, teacher, batch, opts);
    const double recomposed = 0.5 * report.components.at("l_ce") +
                              0.25 * (report.components.at("l_kd_iter_1") + report.components.at("l_kd_iter_2"));
    CHECK(report.value == doctest::Approx(recomposed).epsilon(1e-9));
    // hand case from the contract: N=2, Lkd = 0.8/0.4, Lce = 1.0, a=0.5 -> 0.8
    CHECK(0.5 * 1.0 + 0.25 * (0.8 + 0.4) == doctest::Approx(0.8));
}

TEST_CASE("iteration inputs keep BOS and PAD, and carry the previous argmax") {
    SynonymTask task(micro_task());
    auto corpus = task.train();
    const int vocab = model_vocab_for_task(task.spec());
    Seq2SeqModelT<double> student(micro_model_config(vocab, 5));
    Seq2SeqModelT<double> teacher(micro_model_config(vocab, 6));
    Batch batch = micro_batch(task, corpus);

    IterativeKdOptions opts;
    opts.n_iterations = 2;
    opts.weights.alpha = 0.5;
    std::vector<TokenMatrix> captured;
    opts.captured_inputs = &captured;
    iterative_kd_step(student, teacher, batch, opts);
    REQUIRE(captured.size() == 2);
    CHECK(captured[0].ids == batch.tgt_in.ids);

    // recompute the expected second-iteration input from the first pass
    NoGradGuard ng;
    auto logits = student.forward(batch.src, batch.tgt_in);
    const int64_t tlen = batch.tgt_in.len;
    for (int64_t b = 0; b < batch.src.batch; ++b) {
        CHECK(captured[1].at(b, 0) == kBos);
        for (int64_t j = 1; j < tlen; ++j) {
            if (batch.tgt_in.at(b, j) == kPad) {
                CHECK(captured[1].at(b, j) == kPad);
            } else {
                const double* row = logits.data().data() + (b * tlen + j - 1) * vocab;
                CHECK(captured[1].at(b, j) == argmax_tie_low(row, vocab));
            }
        }
    }
}

TEST_CASE("iterations after the first see no gold supervision") {
    SynonymTask task(micro_task());
    auto corpus = task.train();
    const int vocab = model_vocab_for_task(task.spec());
    Seq2SeqModelT<double> student(micro_model_config(vocab, 7));
    Seq2SeqModelT<double> teacher(micro_model_config(vocab, 8));
    Batch batch = micro_batch(task, corpus);

    IterativeKdOptions opts;
    opts.n_iterations = 3;
    opts.weights.alpha = 0.5;
    auto base = iterative_kd_step(student, teacher, batch, opts);

    Batch altered = batch;
    for (auto& g : altered.gold)
        if (g != kPad) g = g == 4 ? 5 : 4;
    auto other = iterative_kd_step(student, teacher, altered, opts);
    CHECK(base.components.at("l_kd_iter_2") == other.components.at("l_kd_iter_2"));
    CHECK(base.components.at("l_kd_iter_3") == other.components.at("l_kd_iter_3"));
    CHECK(base.components.at("l_ce") != other.components.at("l_ce"));
}

TEST_CASE("iterative N=2 gradients match finite differences with frozen inputs") {
    TaskSpec spec = micro_task();
    spec.src_vocab_size = 9;  // V=5 content tokens, d=8 micro model
    SynonymTask task(spec);
    auto corpus = task.train();
    const int vocab = model_vocab_for_task(spec);
    ModelConfig mc = micro_model_config(vocab, 9);
    mc.d_model = 8;
    mc.d_ffn = 12;
    Seq2SeqModelT<double> student(mc);
    ModelConfig tc = micro_model_config(vocab, 10);
    Seq2SeqModelT<double> teacher(tc);
    Batch batch = micro_batch(task, corpus);

    IterativeKdOptions opts;
    opts.n_iterations = 2;
    opts.use_hr = false;
    opts.weights.alpha = 0.5;
    std::vector<TokenMatrix> captured;
    opts.captured_inputs = &captured;
    iterative_kd_step(student, teacher, batch, opts);
    REQUIRE(captured.size() == 2);
    std::vector<TokenMatrix> frozen = {captured[1]};

    IterativeKdOptions frozen_opts = opts;
    frozen_opts.captured_inputs = nullptr;
    frozen_opts.frozen_inputs = &frozen;
    Rng rng(77);
    const double err = max_param_grad_error(
        student, [&] { return iterative_kd_step(student, teacher, batch, frozen_opts); }, 2, 1e-5, rng);
    CHECK(err < 1e-4);
}

TEST_CASE("teacher cache rows are bit-identical to live forwards") {
    SynonymTask task(micro_task());
    auto corpus = task.train();
    const int vocab = model_vocab_for_task(task.spec());
    Seq2SeqModel teacher(micro_model_config(vocab, 21));

    std::vector<BatchItem> items;
    for (int64_t i = 0; i < static_cast<int64_t>(corpus.size()); ++i) items.push_back(gold_item(corpus, i));
    auto cache = TeacherCache::build(teacher, items, 32);

    // Live forward over a differently-shaped batch (different padding).
    std::vector<BatchItem> group = {items[3], items[7], items[11]};
    Batch batch = make_batch(group);
    NoGradGuard ng;
    Tensor probs = softmax_lastdim(teacher.forward(batch.src, batch.tgt_in));
    const int64_t tlen = batch.tgt_in.len;
    for (int64_t b = 0; b < batch.src.batch; ++b) {
        const int64_t steps = static_cast<int64_t>(group[b].target.size());
        for (int64_t j = 0; j < steps; ++j) {
            const float* live = probs.data().data() + (b * tlen + j) * vocab;
            const float* cached = cache.row(batch.sentence_index[b], static_cast<int>(j));
            CHECK(std::memcmp(live, cached, vocab * sizeof(float)) == 0);
        }
    }
}

TEST_CASE("resume from a saved state continues bit-exactly") {
    TaskSpec spec = micro_task();
    SynonymTask task(spec);
    auto train_c = task.train();
    auto valid_c = task.valid();
    TrainData data{&train_c, nullptr, &valid_c, nullptr, nullptr};
    ModelConfig mc = micro_model_config(model_vocab_for_task(spec), 31);
    mc.dropout_rate = 0.1;

    TrainConfig full = micro_train(40);
    auto straight = train_model(mc, data, full);

    TrainConfig half = micro_train(20);
    auto first = train_model(mc, data, half);
    const auto path = std::filesystem::temp_directory_path() / "tiekd_state.bin";
    save_train_state(path.string(), first.final_state);
    auto restored = load_train_state(path.string());
    auto resumed = train_model(mc, data, full, nullptr, &restored);
    std::filesystem::remove(path);

    REQUIRE(straight.final_state.params.size() == resumed.final_state.params.size());
    for (size_t p = 0; p < straight.final_state.params.size(); ++p) {
        const auto& a = straight.final_state.params[p].second;
        const auto& b = resumed.final_state.params[p].second;
        CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
    }
    CHECK(straight.loss_history == resumed.loss_history);
}

TEST_CASE("word_kd with alpha=0 matches flavor none step for step") {
    TaskSpec spec = micro_task();
    SynonymTask task(spec);
    auto train_c = task.train();
    auto valid_c = task.valid();
    TrainData data{&train_c, nullptr, &valid_c, nullptr, nullptr};
    ModelConfig mc = micro_model_config(model_vocab_for_task(spec), 33);
    mc.dropout_rate = 0.1;
    Seq2SeqModel teacher(micro_model_config(model_vocab_for_task(spec), 34));

    TrainConfig plain = micro_train(25);
    plain.flavor = KdFlavor::kNone;
    auto baseline = train_model(mc, data, plain);

    TrainConfig kd = micro_train(25);
    kd.flavor = KdFlavor::kWordKd;
    kd.kd.alpha = 0.0;
    auto distilled = train_model(mc, data, kd, &teacher);

    CHECK(baseline.loss_history == distilled.loss_history);
    for (size_t p = 0; p < baseline.final_state.params.size(); ++p) {
        const auto& a = baseline.final_state.params[p].second;
        const auto& b = distilled.final_state.params[p].second;
        CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
    }
}

TEST_CASE("metrics.jsonl is byte-identical across reruns") {
    TaskSpec spec = micro_task();
    SynonymTask task(spec);
    auto train_c = task.train();
    auto valid_c = task.valid();
    TrainData data{&train_c, nullptr, &valid_c, nullptr, nullptr};
    ModelConfig mc = micro_model_config(model_vocab_for_task(spec), 35);

    auto run = [&](const std::string& dir) {
        TrainConfig cfg = micro_train(20);
        cfg.out_dir = dir;
        train_model(mc, data, cfg);
        std::ifstream in(std::filesystem::path(dir) / "metrics.jsonl", std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    };
    const auto base = std::filesystem::temp_directory_path();
    const std::string a = run((base / "tiekd_runA").string());
    const std::string b = run((base / "tiekd_runB").string());
    CHECK(a == b);
    CHECK_FALSE(a.empty());
    std::filesystem::remove_all(base / "tiekd_runA");
    std::filesystem::remove_all(base / "tiekd_runB");
}

TEST_CASE("invalid train setups are rejected") {
    TaskSpec spec = micro_task();
    SynonymTask task(spec);
    auto train_c = task.train();
    auto valid_c = task.valid();
    TrainData data{&train_c, nullptr, &valid_c, nullptr, nullptr};
    ModelConfig mc = micro_model_config(model_vocab_for_task(spec), 37);

    TrainConfig kd = micro_train(5);
    kd.flavor = KdFlavor::kWordKd;
    CHECK_THROWS_AS(train_model(mc, data, kd), std::invalid_argument);  // missing teacher

    Seq2SeqModel wrong_vocab(micro_model_config(model_vocab_for_task(spec) + 4, 38));
    CHECK_THROWS_AS(train_model(mc, data, kd, &wrong_vocab), std::invalid_argument);

    TrainConfig seq = micro_train(5);
    seq.flavor = KdFlavor::kSeqKd;
    CHECK_THROWS_AS(train_model(mc, data, seq), std::invalid_argument);  // missing distilled corpus
}

}  // TEST_SUITE
