// Training-step and decoding throughput at the bundled desk scales. The
// word-KD step is benchmarked at 1, 2 and 3 KD iterations; per-step cost is
// expected to grow roughly linearly with the iteration count since every
// extra iteration adds one student pass and one teacher pass.

#include <benchmark/benchmark.h>

#include "tiekd/config.hpp"
#include "tiekd/data.hpp"
#include "tiekd/decode.hpp"
#include "tiekd/losses.hpp"
#include "tiekd/model.hpp"
#include "tiekd/trainer.hpp"

using namespace tiekd;

namespace {

struct Fixture {
    TaskSpec spec;
    SynonymTask task;
    ParallelCorpus corpus;
    Seq2SeqModel teacher;
    Seq2SeqModel student;
    Batch batch;

    static TaskSpec make_spec() {
        TaskSpec spec;
        spec.src_vocab_size = 100;
        spec.synonym_set_size = 2;
        spec.dominant_prob = 0.75;
        spec.reorder_window = 3;
        spec.n_train = 64;
        spec.seed = 11;
        return spec;
    }

    Fixture()
        : spec(make_spec()),
          task(spec),
          corpus(task.train()),
          teacher(default_teacher_config(model_vocab_for_task(spec), 7)),
          student(default_student_config(model_vocab_for_task(spec), 1)) {
        std::vector<BatchItem> items;
        for (int64_t i = 0; i < 12; ++i) items.push_back(gold_item(corpus, i));
        batch = make_batch(items);
    }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

void BM_TeacherForward(benchmark::State& state) {
    auto& f = fixture();
    for (auto _ : state) {
        NoGradGuard ng;
        auto logits = f.teacher.forward(f.batch.src, f.batch.tgt_in);
        benchmark::DoNotOptimize(logits.data().data());
    }
    state.SetItemsProcessed(state.iterations() * f.batch.tgt_tokens());
}
BENCHMARK(BM_TeacherForward);

void BM_CeTrainStep(benchmark::State& state) {
    auto& f = fixture();
    Rng rng(1);
    for (auto _ : state) {
        f.student.zero_grad();
        auto logits = f.student.forward(f.batch.src, f.batch.tgt_in, true, &rng);
        auto loss = ce_label_smoothed(logits, f.batch.gold, 0.1f, f.batch.mask);
        backward(loss.loss);
        benchmark::DoNotOptimize(loss.value);
    }
    state.SetItemsProcessed(state.iterations() * f.batch.tgt_tokens());
}
BENCHMARK(BM_CeTrainStep);

void BM_WordKdStepIterations(benchmark::State& state) {
    auto& f = fixture();
    Rng rng(2);
    IterativeKdOptions opts;
    opts.n_iterations = static_cast<int>(state.range(0));
    opts.use_hr = true;
    opts.training_mode = true;
    opts.dropout_rng = &rng;
    for (auto _ : state) {
        f.student.zero_grad();
        auto loss = iterative_kd_step(f.student, f.teacher, f.batch, opts);
        backward(loss.loss);
        benchmark::DoNotOptimize(loss.value);
    }
    state.SetItemsProcessed(state.iterations() * f.batch.tgt_tokens());
}
BENCHMARK(BM_WordKdStepIterations)->Arg(1)->Arg(2)->Arg(3);

void BM_BeamDecode(benchmark::State& state) {
    auto& f = fixture();
    BeamConfig cfg{static_cast<int>(state.range(0)), 0.6, 14};
    size_t i = 0;
    for (auto _ : state) {
        auto r = beam_decode(model_scorer(f.teacher, f.corpus.pairs[i % f.corpus.size()].src), cfg);
        benchmark::DoNotOptimize(r.tokens.data());
        ++i;
    }
}
BENCHMARK(BM_BeamDecode)->Arg(1)->Arg(4);

}  // namespace

BENCHMARK_MAIN();
