// tiekd: single entry point for the distillation laboratory.
//
// Subcommands: gen-data, train, distill-corpus, probe, evaluate,
// theory-check, report. All runs are deterministic given (config, seed);
// TIEKD_THREADS bounds worker threads (default 1).
//
// Exit codes: 0 success, 1 verification failure, 2 usage/config error.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "tiekd/checkpoint.hpp"
#include "tiekd/config.hpp"
#include "tiekd/data.hpp"
#include "tiekd/decode.hpp"
#include "tiekd/harness.hpp"
#include "tiekd/metrics.hpp"
#include "tiekd/theory.hpp"
#include "tiekd/threads.hpp"
#include "tiekd/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tiekd;

namespace {

struct CorpusSet {
    ParallelCorpus train, valid, test;
};

// Corpora for a run: loaded from data_dir when given, generated otherwise.
CorpusSet corpora_for(const RunConfig& cfg) {
    CorpusSet set;
    if (!cfg.data_dir.empty()) {
        set.train = load_corpus_jsonl((fs::path(cfg.data_dir) / "train.jsonl").string());
        set.valid = load_corpus_jsonl((fs::path(cfg.data_dir) / "valid.jsonl").string());
        set.test = load_corpus_jsonl((fs::path(cfg.data_dir) / "test.jsonl").string());
    } else {
        SynonymTask task(cfg.task);
        set.train = task.train();
        set.valid = task.valid();
        set.test = task.test();
    }
    return set;
}

json config_with_overrides(const std::string& path, const std::vector<std::string>& overrides) {
    json doc = load_json_file(path);
    for (const auto& assignment : overrides) apply_override(doc, assignment);
    return doc;
}

int cmd_gen_data(const std::string& spec_path, const std::string& out_dir,
                 const std::vector<std::string>& overrides) {
    json doc = config_with_overrides(spec_path, overrides);
    TaskSpec spec = task_spec_from_json(doc);
    SynonymTask task(spec);
    fs::create_directories(out_dir);
    save_corpus_jsonl((fs::path(out_dir) / "train.jsonl").string(), task.train());
    save_corpus_jsonl((fs::path(out_dir) / "valid.jsonl").string(), task.valid());
    save_corpus_jsonl((fs::path(out_dir) / "test.jsonl").string(), task.test());
    save_json_file((fs::path(out_dir) / "vocab.src.json").string(), task.src_vocab_json());
    save_json_file((fs::path(out_dir) / "vocab.tgt.json").string(), task.tgt_vocab_json());
    save_json_file((fs::path(out_dir) / "task.json").string(), task_spec_to_json(spec));
    std::cout << "wrote " << spec.n_train << "/" << spec.n_valid << "/" << spec.n_test << " pairs to " << out_dir
              << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::vector<std::string>& overrides) {
    RunConfig cfg = run_config_from_json(config_with_overrides(config_path, overrides));
    cfg.train.out_dir = out_dir;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        save_json_file((fs::path(out_dir) / "config.json").string(), run_config_to_json(cfg));
    }

    CorpusSet set = corpora_for(cfg);
    std::optional<Seq2SeqModel> teacher;
    if (!cfg.teacher_checkpoint.empty()) teacher = load_model(cfg.teacher_checkpoint);
    DistilledCorpus distilled;
    TrainData data{&set.train, nullptr, &set.valid, &set.test, nullptr};
    if (!cfg.distilled_corpus.empty()) {
        distilled = load_distilled_jsonl(cfg.distilled_corpus);
        data.distilled = &distilled;
    }

    TrainOutcome outcome = train_model(cfg.model, data, cfg.train, teacher ? &*teacher : nullptr);
    if (!out_dir.empty()) {
        save_model((fs::path(out_dir) / "model.bin").string(), outcome.model, {{"role", "final"}});
        save_model((fs::path(out_dir) / "best.bin").string(), outcome.best_model,
                   {{"role", "best"}, {"step", outcome.best_step}});
    }
    std::cout << outcome.report.to_json().dump(2) << "\n";
    return 0;
}

int cmd_distill(const std::string& teacher_path, const std::string& data_dir, int beam, double lenpen, int max_len,
                const std::string& out_path) {
    Seq2SeqModel teacher = load_model(teacher_path);
    ParallelCorpus corpus = load_corpus_jsonl((fs::path(data_dir) / "train.jsonl").string());
    BeamConfig cfg{beam, lenpen, max_len};
    json provenance = {{"teacher_checkpoint", teacher_path},
                       {"teacher_hash", file_fnv1a_hex(teacher_path)},
                       {"source", (fs::path(data_dir) / "train.jsonl").string()}};
    DistilledCorpus distilled = distill_corpus(teacher, corpus, cfg, provenance, thread_budget());
    save_distilled_jsonl(out_path, distilled);
    std::cout << "decoded " << distilled.size() << " sentences, top-1 fraction " << distilled.top1_fraction() << "\n";
    return 0;
}

int cmd_probe(const std::string& suite_name, const std::string& task_path, const std::string& seeds_arg,
              const std::string& out_dir, const std::string& teacher_ckpt, bool parallel,
              const std::vector<std::string>& overrides) {
    SuiteKind kind = suite_kind_parse(suite_name);
    SuiteOptions opts = default_suite_options();
    if (!task_path.empty()) {
        json doc = config_with_overrides(task_path, overrides);
        if (doc.contains("task") || doc.contains("student_train") || doc.contains("teacher_train"))
            opts = SuiteOptions::from_json(doc);
        else
            opts.task = task_spec_from_json(doc);
    } else if (!overrides.empty()) {
        json doc = opts.to_json();
        for (const auto& assignment : overrides) apply_override(doc, assignment);
        opts = SuiteOptions::from_json(doc);
    }
    if (!seeds_arg.empty()) {
        opts.seeds.clear();
        size_t begin = 0;
        while (begin <= seeds_arg.size()) {
            const size_t comma = seeds_arg.find(',', begin);
            const std::string tok = seeds_arg.substr(begin, comma == std::string::npos ? std::string::npos : comma - begin);
            if (!tok.empty()) opts.seeds.push_back(std::stoull(tok));
            if (comma == std::string::npos) break;
            begin = comma + 1;
        }
    }
    opts.out_dir = out_dir;
    if (!teacher_ckpt.empty()) opts.teacher_checkpoint = teacher_ckpt;
    opts.threads = parallel ? thread_budget() : 1;
    opts.resolve();

    SuiteResult result = run_suite(kind, opts);
    std::cout << result.to_csv();
    return 0;
}

int cmd_evaluate(const std::string& model_path, const std::string& data_dir, const std::string& teacher_path,
                 int64_t bleu_sentences) {
    Seq2SeqModel model = load_model(model_path);
    ParallelCorpus valid = load_corpus_jsonl((fs::path(data_dir) / "valid.jsonl").string());
    ParallelCorpus test = load_corpus_jsonl((fs::path(data_dir) / "test.jsonl").string());
    ParallelCorpus train;
    const fs::path train_path = fs::path(data_dir) / "train.jsonl";
    if (fs::exists(train_path)) train = load_corpus_jsonl(train_path.string());

    RunReport report;
    report.token_acc = token_accuracy(model, valid);
    std::optional<Seq2SeqModel> teacher;
    if (!teacher_path.empty()) {
        teacher = load_model(teacher_path);
        report.ta = top1_agreement(model, *teacher, valid);
        const auto dist = ranking_distances(model, *teacher, valid, 5);
        report.d_edit = dist.d_edit;
        report.d_rank = dist.d_rank;
        if (!train.pairs.empty())
            report.overlap = overlap_rate(*teacher, train, std::min<int64_t>(3000, train.size()), 777);
    }
    std::vector<std::vector<int>> hyps, refs;
    const int64_t n = std::min<int64_t>(bleu_sentences, test.size());
    BeamConfig beam;
    beam.max_len = std::min(beam.max_len, model.config().max_len - 1);
    for (int64_t i = 0; i < n; ++i) {
        DecodeResult r = beam_decode<float>(model_scorer(model, test.pairs[i].src), beam);
        if (!r.tokens.empty() && r.tokens.back() == kEos) r.tokens.pop_back();
        hyps.push_back(std::move(r.tokens));
        refs.push_back(test.pairs[i].tgt);
    }
    if (!hyps.empty()) report.bleu = corpus_bleu(hyps, refs);
    std::cout << report.to_json().dump(2) << "\n";
    return 0;
}

int cmd_theory_check(int samples, double tol, uint64_t seed) {
    const auto reports = run_all_theory_checks(samples, tol, seed);
    json out = json::array();
    bool all_pass = true;
    for (const auto& r : reports) {
        out.push_back(r.to_json());
        all_pass = all_pass && r.pass;
    }
    std::cout << out.dump(2) << "\n";
    return all_pass ? 0 : 1;
}

int cmd_report(const std::string& rundir, const std::string& format) {
    const fs::path dir(rundir);
    json out = json::object();
    if (fs::exists(dir / "report.json")) out["report"] = load_json_file((dir / "report.json").string());
    json steps = json::array();
    if (fs::exists(dir / "metrics.jsonl")) {
        std::ifstream in(dir / "metrics.jsonl");
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            steps.push_back(json::parse(line));
        }
    }
    out["metrics"] = steps;
    if (fs::exists(dir / "results.json")) out["suite"] = load_json_file((dir / "results.json").string());

    if (format == "json") {
        const fs::path path = dir / "aggregate.json";
        save_json_file(path.string(), out);
        std::cout << out.dump(2) << "\n";
    } else {
        std::string csv = "step,lr,train_loss,val_token_acc\n";
        for (const auto& row : steps) {
            csv += std::to_string(row.value("step", 0L)) + "," + std::to_string(row.value("lr", 0.0)) + "," +
                   std::to_string(row.value("train_loss", 0.0)) + "," + std::to_string(row.value("val_token_acc", 0.0)) +
                   "\n";
        }
        std::ofstream outfile(dir / "aggregate.csv", std::ios::binary);
        outfile << csv;
        std::cout << csv;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale knowledge-distillation laboratory for seq2seq translation models"};
    app.require_subcommand(1);

    std::vector<std::string> overrides;
    app.add_option("--set", overrides, "Override config values as key.path=value")->take_all();

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic parallel corpus");
    std::string spec_path, out_dir;
    gen->add_option("--spec", spec_path, "Task spec JSON")->required();
    gen->add_option("--out", out_dir, "Output directory")->required();

    // train
    auto* train = app.add_subcommand("train", "Train a model (teacher, student, or KD variant)");
    std::string train_config, train_out;
    train->add_option("--config", train_config, "Run config JSON")->required();
    train->add_option("--out", train_out, "Run directory (config.json, checkpoints/, metrics.jsonl, report.json)");

    // distill-corpus
    auto* distill = app.add_subcommand("distill-corpus", "Beam-decode a corpus with a teacher");
    std::string teacher_path, distill_data, distill_out;
    int beam = 4, distill_max_len = 24;
    double lenpen = 0.6;
    distill->add_option("--teacher", teacher_path, "Teacher checkpoint")->required();
    distill->add_option("--data", distill_data, "Data directory (reads train.jsonl)")->required();
    distill->add_option("--beam", beam, "Beam size");
    distill->add_option("--lenpen", lenpen, "Length penalty");
    distill->add_option("--max-len", distill_max_len, "Max decode length");
    distill->add_option("--out", distill_out, "Output JSONL path")->required();

    // probe
    auto* probe = app.add_subcommand("probe", "Run an experiment suite");
    std::string suite_name, probe_task, probe_seeds, probe_out, probe_teacher;
    bool probe_parallel = false;
    probe->add_option("--suite", suite_name, "surgery|topk|bucket|seqkd|ablation")->required();
    probe->add_option("--task", probe_task, "Task spec or full suite-options JSON");
    probe->add_option("--seeds", probe_seeds, "Comma-separated seeds (default 1,2,3)");
    probe->add_option("--out", probe_out, "Output directory");
    probe->add_option("--teacher", probe_teacher, "Teacher checkpoint to reuse");
    probe->add_flag("--parallel", probe_parallel, "Run cells on TIEKD_THREADS workers");

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint");
    std::string eval_model, eval_data, eval_teacher;
    int64_t eval_bleu_sentences = 256;
    evaluate->add_option("--model", eval_model, "Model checkpoint")->required();
    evaluate->add_option("--data", eval_data, "Data directory")->required();
    evaluate->add_option("--teacher", eval_teacher, "Teacher checkpoint for agreement metrics");
    evaluate->add_option("--bleu-sentences", eval_bleu_sentences, "Test sentences to decode");

    // theory-check
    auto* theory = app.add_subcommand("theory-check", "Run the KD identity suite");
    int theory_samples = 1000;
    double theory_tol = 1e-9;
    uint64_t theory_seed = 12345;
    theory->add_option("--samples", theory_samples, "Samples per identity");
    theory->add_option("--tol", theory_tol, "Tolerance");
    theory->add_option("--seed", theory_seed, "Sampling seed");

    // report
    auto* report = app.add_subcommand("report", "Aggregate a run directory into plot-ready files");
    std::string report_dir, report_format = "csv";
    report->add_option("--rundir", report_dir, "Run directory")->required();
    report->add_option("--format", report_format, "csv|json")->check(CLI::IsMember({"csv", "json"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(spec_path, out_dir, overrides);
        if (train->parsed()) return cmd_train(train_config, train_out, overrides);
        if (distill->parsed()) return cmd_distill(teacher_path, distill_data, beam, lenpen, distill_max_len, distill_out);
        if (probe->parsed())
            return cmd_probe(suite_name, probe_task, probe_seeds, probe_out, probe_teacher, probe_parallel, overrides);
        if (evaluate->parsed()) return cmd_evaluate(eval_model, eval_data, eval_teacher, eval_bleu_sentences);
        if (theory->parsed()) return cmd_theory_check(theory_samples, theory_tol, theory_seed);
        if (report->parsed()) return cmd_report(report_dir, report_format);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
