#include "tiekd/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <thread>

#include "tiekd/checkpoint.hpp"

namespace tiekd {

namespace fs = std::filesystem;
using nlohmann::json;

SuiteKind suite_kind_parse(const std::string& text) {
    if (text == "surgery") return SuiteKind::kSurgery;
    if (text == "topk") return SuiteKind::kTopk;
    if (text == "bucket") return SuiteKind::kBucket;
    if (text == "seqkd") return SuiteKind::kSeqKd;
    if (text == "ablation") return SuiteKind::kAblation;
    throw std::invalid_argument("unknown suite '" + text + "'");
}

std::string suite_kind_to_string(SuiteKind kind) {
    switch (kind) {
        case SuiteKind::kSurgery: return "surgery";
        case SuiteKind::kTopk: return "topk";
        case SuiteKind::kBucket: return "bucket";
        case SuiteKind::kSeqKd: return "seqkd";
        case SuiteKind::kAblation: return "ablation";
    }
    return "surgery";
}

void SuiteOptions::resolve() {
    task.validate();
    const int vocab = model_vocab_for_task(task);
    if (teacher_model.vocab_size <= 0) teacher_model.vocab_size = vocab;
    if (student_model.vocab_size <= 0) student_model.vocab_size = vocab;
    teacher_model.validate();
    student_model.validate();
    teacher_train.validate();
    student_train.validate();
    if (teacher_model.vocab_size != student_model.vocab_size)
        throw std::invalid_argument("suite: teacher/student vocab mismatch");
    if (teacher_model.d_model * (teacher_model.n_enc_layers + teacher_model.n_dec_layers) <
        student_model.d_model * (student_model.n_enc_layers + student_model.n_dec_layers))
        throw std::invalid_argument("suite: teacher capacity below student capacity");
    if (seeds.empty()) throw std::invalid_argument("suite: needs at least one seed");
}

json SuiteOptions::to_json() const {
    json seeds_json = json::array();
    for (uint64_t s : seeds) seeds_json.push_back(s);
    return json{{"task", task_spec_to_json(task)},
                {"seeds", seeds_json},
                {"teacher_model", model_config_to_json(teacher_model)},
                {"student_model", model_config_to_json(student_model)},
                {"teacher_train", train_config_to_json(teacher_train)},
                {"student_train", train_config_to_json(student_train)},
                {"distill_beam",
                 {{"beam_size", distill_beam.beam_size},
                  {"length_penalty", distill_beam.length_penalty},
                  {"max_len", distill_beam.max_len}}},
                {"teacher_checkpoint", teacher_checkpoint},
                {"threads", threads}};
}

SuiteOptions SuiteOptions::from_json(const json& j) {
    require_known_keys(j,
                       {"task", "seeds", "teacher_model", "student_model", "teacher_train", "student_train",
                        "distill_beam", "teacher_checkpoint", "threads", "out_dir"},
                       "suite options");
    SuiteOptions opts = default_suite_options();
    if (j.contains("task")) opts.task = task_spec_from_json(j.at("task"));
    if (j.contains("seeds")) {
        opts.seeds.clear();
        for (const auto& s : j.at("seeds")) opts.seeds.push_back(s.get<uint64_t>());
    }
    if (j.contains("teacher_model")) opts.teacher_model = model_config_from_json(j.at("teacher_model"));
    if (j.contains("student_model")) opts.student_model = model_config_from_json(j.at("student_model"));
    if (j.contains("teacher_train")) opts.teacher_train = train_config_from_json(j.at("teacher_train"));
    if (j.contains("student_train")) opts.student_train = train_config_from_json(j.at("student_train"));
    if (j.contains("distill_beam")) {
        const auto& b = j.at("distill_beam");
        opts.distill_beam.beam_size = b.value("beam_size", opts.distill_beam.beam_size);
        opts.distill_beam.length_penalty = b.value("length_penalty", opts.distill_beam.length_penalty);
        opts.distill_beam.max_len = b.value("max_len", opts.distill_beam.max_len);
    }
    opts.teacher_checkpoint = j.value("teacher_checkpoint", "");
    opts.threads = j.value("threads", 1);
    opts.resolve();
    return opts;
}

SuiteOptions default_suite_options() {
    SuiteOptions opts;
    // 1000 source symbols with disjoint synonym pairs: large enough that the
    // student is still climbing at its 8k-step budget, so distillation
    // effects are visible in the orderings.
    opts.task.src_vocab_size = 1004;
    opts.task.synonym_set_size = 2;
    opts.task.dominant_prob = 0.75;
    opts.task.reorder_window = 3;
    opts.task.min_len = 4;
    opts.task.max_len = 9;
    opts.task.n_train = 6000;
    opts.task.n_valid = 800;
    opts.task.n_test = 800;
    opts.task.seed = 2024;

    opts.teacher_model = default_teacher_config(0, 7);
    opts.teacher_model.max_len = 16;
    opts.student_model = default_student_config(0, 1);
    opts.student_model.max_len = 16;

    opts.teacher_train.flavor = KdFlavor::kNone;
    opts.teacher_train.lr = 1.5e-3;
    opts.teacher_train.warmup_steps = 800;
    opts.teacher_train.clip_norm = 5.0;
    opts.teacher_train.batch_tokens = 96;
    opts.teacher_train.max_steps = 12000;
    opts.teacher_train.checkpoint_every = 500;
    opts.teacher_train.seed = 7;
    opts.teacher_train.eval_sentences = 400;
    opts.teacher_train.final_bleu_sentences = 128;

    opts.student_train = opts.teacher_train;
    opts.student_train.flavor = KdFlavor::kWordKd;
    opts.student_train.lr = 2e-3;
    opts.student_train.warmup_steps = 400;
    opts.student_train.batch_tokens = 64;
    opts.student_train.max_steps = 8000;
    opts.student_train.seed = 1;

    opts.distill_beam = BeamConfig{4, 0.6, 15};
    return opts;
}

// ---------------------------------------------------------------------------

const RunReport& SuiteResult::cell(const std::string& variant, uint64_t seed) const {
    for (const auto& c : cells)
        if (c.variant == variant && c.seed == seed) return c.report;
    throw std::out_of_range("suite: no cell (" + variant + ", seed " + std::to_string(seed) + ")");
}

const SuiteAggregate& SuiteResult::aggregate(const std::string& variant) const {
    for (const auto& a : aggregates)
        if (a.variant == variant) return a;
    throw std::out_of_range("suite: no aggregate row for " + variant);
}

std::vector<SuiteAggregate> aggregate_cells(const std::vector<std::string>& variants,
                                            const std::vector<SuiteCell>& cells) {
    std::vector<SuiteAggregate> out;
    for (const auto& variant : variants) {
        std::vector<const RunReport*> rows;
        for (const auto& c : cells)
            if (c.variant == variant) rows.push_back(&c.report);
        if (rows.empty()) continue;
        SuiteAggregate agg;
        agg.variant = variant;
        auto mean_of = [&](auto field) {
            double sum = 0.0;
            for (const auto* r : rows) sum += r->*field;
            return sum / static_cast<double>(rows.size());
        };
        auto stdev_of = [&](auto field, double mean) {
            double sq = 0.0;
            for (const auto* r : rows) {
                const double d = r->*field - mean;
                sq += d * d;
            }
            return std::sqrt(sq / static_cast<double>(rows.size()));
        };
        auto fill = [&](auto field) {
            const double mean = mean_of(field);
            agg.mean.*field = mean;
            agg.stdev.*field = stdev_of(field, mean);
        };
        fill(&RunReport::bleu);
        fill(&RunReport::token_acc);
        fill(&RunReport::ta);
        fill(&RunReport::d_edit);
        fill(&RunReport::d_rank);
        fill(&RunReport::overlap);
        fill(&RunReport::wall_time_s);
        out.push_back(std::move(agg));
    }
    return out;
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void append_csv_row(std::string& csv, const std::string& variant, const std::string& seed, const RunReport& r) {
    csv += variant + "," + seed + "," + fmt_double(r.bleu) + "," + fmt_double(r.token_acc) + "," + fmt_double(r.ta) +
           "," + fmt_double(r.d_edit) + "," + fmt_double(r.d_rank) + "," + fmt_double(r.overlap) + "," +
           fmt_double(r.wall_time_s) + "\n";
}

}  // namespace

std::string SuiteResult::to_csv() const {
    std::string csv = "variant,seed,bleu,token_acc,ta,d_edit,d_rank,overlap,wall_time_s\n";
    for (const auto& c : cells) append_csv_row(csv, c.variant, std::to_string(c.seed), c.report);
    for (const auto& a : aggregates) {
        append_csv_row(csv, a.variant, "mean", a.mean);
        append_csv_row(csv, a.variant, "stdev", a.stdev);
    }
    return csv;
}

json SuiteResult::to_json() const {
    json cells_json = json::array();
    for (const auto& c : cells)
        cells_json.push_back({{"variant", c.variant}, {"seed", c.seed}, {"report", c.report.to_json()}});
    json agg_json = json::array();
    for (const auto& a : aggregates)
        agg_json.push_back(
            {{"variant", a.variant}, {"mean", a.mean.to_json()}, {"stdev", a.stdev.to_json()}});
    json j = {{"suite", suite_kind_to_string(kind)},
              {"variants", variants},
              {"teacher", {{"overlap", teacher_overlap}, {"token_acc", teacher_token_acc}}},
              {"cells", cells_json},
              {"aggregates", agg_json}};
    if (distilled_top1_fraction >= 0.0) j["distilled_top1_fraction"] = distilled_top1_fraction;
    return j;
}

// ---------------------------------------------------------------------------

namespace {

struct Variant {
    std::string name;
    bool uses_distilled = false;
    std::function<void(TrainConfig&)> configure;
};

std::vector<Variant> suite_variants(SuiteKind kind, const SuiteOptions& opts, double fixed_fraction) {
    std::vector<Variant> variants;
    auto word = [](const SurgeryMode& mode) {
        return [mode](TrainConfig& cfg) {
            cfg.flavor = KdFlavor::kWordKd;
            cfg.iterations = 1;
            cfg.use_hr = false;
            cfg.surgery = mode;
        };
    };
    switch (kind) {
        case SuiteKind::kSurgery:
            variants.push_back({"vanilla", false, word(SurgeryMode::vanilla())});
            variants.push_back({"no_correlation", false, word(SurgeryMode::no_correlation())});
            variants.push_back({"no_top1", false, word(SurgeryMode::no_top1())});
            variants.push_back({"no_kd", false, [](TrainConfig& cfg) { cfg.flavor = KdFlavor::kNone; }});
            break;
        case SuiteKind::kTopk: {
            const int vocab = model_vocab_for_task(opts.task);
            for (int k : {1, 3, 5, vocab})
                variants.push_back({"topk_" + std::to_string(k), false, word(SurgeryMode::topk_truncate(k))});
            break;
        }
        case SuiteKind::kBucket:
            for (const auto& mode : bucket_intervals())
                variants.push_back({mode.to_string(), false, word(mode)});
            break;
        case SuiteKind::kSeqKd: {
            auto seq = [](const SeqKdMode& mode) {
                return [mode](TrainConfig& cfg) {
                    cfg.flavor = KdFlavor::kSeqKd;
                    cfg.seqkd_mode = mode;
                };
            };
            variants.push_back({"all", true, seq(SeqKdMode::all())});
            variants.push_back({"top1_only", true, seq(SeqKdMode::top1_only())});
            variants.push_back({"nontop1_only", true, seq(SeqKdMode::nontop1_only())});
            variants.push_back(
                {"top1_fixed_fraction", true, seq(SeqKdMode::top1_fixed_fraction(fixed_fraction, 99))});
            variants.push_back({"all_plus_word_top1", true, seq(SeqKdMode::all_plus_word_top1())});
            break;
        }
        case SuiteKind::kAblation:
            variants.push_back({"word_kd", false, [](TrainConfig& cfg) {
                                    cfg.flavor = KdFlavor::kWordKd;
                                    cfg.iterations = 1;
                                    cfg.use_hr = false;
                                    cfg.surgery = SurgeryMode::vanilla();
                                }});
            variants.push_back({"word_kd_hr", false, [](TrainConfig& cfg) {
                                    cfg.flavor = KdFlavor::kWordKd;
                                    cfg.iterations = 1;
                                    cfg.use_hr = true;
                                    cfg.surgery = SurgeryMode::vanilla();
                                }});
            variants.push_back({"word_kd_iter", false, [](TrainConfig& cfg) {
                                    cfg.flavor = KdFlavor::kWordKd;
                                    cfg.iterations = cfg.kd.n_iterations;
                                    cfg.use_hr = false;
                                    cfg.surgery = SurgeryMode::vanilla();
                                }});
            variants.push_back({"tie_kd", false, [](TrainConfig& cfg) {
                                    cfg.flavor = KdFlavor::kTieKd;
                                    cfg.surgery = SurgeryMode::vanilla();
                                }});
            variants.push_back({"seq_kd", true, [](TrainConfig& cfg) {
                                    cfg.flavor = KdFlavor::kSeqKd;
                                    cfg.seqkd_mode = SeqKdMode::all();
                                }});
            variants.push_back({"tie_kd_seq_kd", true, [](TrainConfig& cfg) {
                                    cfg.flavor = KdFlavor::kCombined;
                                    cfg.surgery = SurgeryMode::vanilla();
                                }});
            break;
    }
    return variants;
}

}  // namespace

SuiteResult run_suite(SuiteKind kind, const SuiteOptions& opts_in) {
    SuiteOptions opts = opts_in;
    opts.resolve();

    const bool emit = !opts.out_dir.empty();
    if (emit) fs::create_directories(opts.out_dir);

    SynonymTask task(opts.task);
    const ParallelCorpus train_corpus = task.train();
    const ParallelCorpus valid_corpus = task.valid();
    const ParallelCorpus test_corpus = task.test();

    // Teacher: load when cached, otherwise train once and persist the best
    // checkpoint.
    std::string teacher_path = opts.teacher_checkpoint;
    if (teacher_path.empty() && emit) teacher_path = (fs::path(opts.out_dir) / "teacher.bin").string();
    std::optional<Seq2SeqModel> teacher;
    if (!teacher_path.empty() && fs::exists(teacher_path)) {
        teacher = load_model(teacher_path);
    } else {
        TrainData teacher_data{&train_corpus, nullptr, &valid_corpus, &test_corpus, nullptr};
        TrainOutcome outcome = train_model(opts.teacher_model, teacher_data, opts.teacher_train);
        teacher = std::move(outcome.best_model);
        if (!teacher_path.empty()) save_model(teacher_path, *teacher, {{"role", "teacher"}});
    }

    SuiteResult result;
    result.kind = kind;
    result.teacher_overlap =
        overlap_rate(*teacher, train_corpus, std::min<int64_t>(3000, train_corpus.size()), 777);
    result.teacher_token_acc = token_accuracy(*teacher, valid_corpus);

    // Distilled corpus for sequence-level rows.
    const bool needs_distilled = kind == SuiteKind::kSeqKd || kind == SuiteKind::kAblation;
    DistilledCorpus distilled;
    double fixed_fraction = 0.3;
    if (needs_distilled) {
        json provenance = {{"teacher_checkpoint", teacher_path},
                           {"teacher_hash", teacher_path.empty() ? "" : file_fnv1a_hex(teacher_path)},
                           {"source", "task:train"}};
        distilled = distill_corpus(*teacher, train_corpus, opts.distill_beam, provenance, opts.threads);
        result.distilled_top1_fraction = distilled.top1_fraction();
        const double top1 = result.distilled_top1_fraction;
        fixed_fraction = top1 > 0.0 ? std::min(1.0, (1.0 - top1) / top1) : 1.0;
        if (emit) save_distilled_jsonl((fs::path(opts.out_dir) / "distilled.jsonl").string(), distilled);
    }

    // Shared teacher caches (gold-prefix and distilled-prefix).
    auto build_items = [](const auto& corpus, auto item_fn) {
        std::vector<BatchItem> items;
        items.reserve(corpus.size());
        for (int64_t i = 0; i < static_cast<int64_t>(corpus.size()); ++i) items.push_back(item_fn(corpus, i));
        return items;
    };
    const auto variants = suite_variants(kind, opts, fixed_fraction);
    bool any_gold_kd = false, any_distilled_kd = false;
    for (const auto& v : variants) {
        TrainConfig probe = opts.student_train;
        v.configure(probe);
        if (probe.is_word_level() && !v.uses_distilled) any_gold_kd = true;
        if ((probe.is_word_level() && v.uses_distilled) ||
            (probe.flavor == KdFlavor::kSeqKd && probe.seqkd_mode.kind == SeqKdMode::kAllPlusWordTop1))
            any_distilled_kd = true;
    }
    std::optional<TeacherCache> gold_cache, distilled_cache;
    if (any_gold_kd)
        gold_cache = TeacherCache::build(*teacher, build_items(train_corpus, [](const auto& c, int64_t i) {
                                             return gold_item(c, i);
                                         }),
                                         opts.student_train.eval_batch_tokens);
    if (any_distilled_kd)
        distilled_cache = TeacherCache::build(*teacher, build_items(distilled, [](const auto& c, int64_t i) {
                                                  return distilled_item(c, i);
                                              }),
                                              opts.student_train.eval_batch_tokens);

    // Cells.
    result.variants.clear();
    for (const auto& v : variants) result.variants.push_back(v.name);
    struct CellSlot {
        SuiteCell cell;
        std::vector<std::vector<int>> hyps;
        std::exception_ptr error;
    };
    std::vector<CellSlot> slots(variants.size() * opts.seeds.size());

    auto run_cell = [&](size_t vi, size_t si) {
        const Variant& variant = variants[vi];
        const uint64_t seed = opts.seeds[si];
        TrainConfig cfg = opts.student_train;
        variant.configure(cfg);
        cfg.seed = seed;
        cfg.overlap_sample = 0;  // stamped from the suite-level teacher scan
        ModelConfig model_cfg = opts.student_model;
        model_cfg.seed = seed;

        RunConfig cell_config;
        cell_config.task = opts.task;
        cell_config.model = model_cfg;
        cell_config.train = cfg;
        cell_config.teacher_checkpoint = teacher_path;
        if (variant.uses_distilled && emit)
            cell_config.distilled_corpus = (fs::path(opts.out_dir) / "distilled.jsonl").string();

        if (emit) {
            const fs::path cell_dir = fs::path(opts.out_dir) / "cells" / (variant.name + "_s" + std::to_string(seed));
            fs::create_directories(cell_dir);
            cfg.out_dir = cell_dir.string();
            save_json_file((cell_dir / "config.json").string(), run_config_to_json(cell_config));
        }

        TrainData data{&train_corpus, variant.uses_distilled ? &distilled : nullptr, &valid_corpus, &test_corpus,
                       nullptr};
        if (cfg.is_word_level())
            data.teacher_cache = variant.uses_distilled ? (distilled_cache ? &*distilled_cache : nullptr)
                                                        : (gold_cache ? &*gold_cache : nullptr);
        else if (cfg.flavor == KdFlavor::kSeqKd && cfg.seqkd_mode.kind == SeqKdMode::kAllPlusWordTop1)
            data.teacher_cache = distilled_cache ? &*distilled_cache : nullptr;

        TrainOutcome outcome = train_model(model_cfg, data, cfg, &*teacher);
        outcome.report.overlap = result.teacher_overlap;
        CellSlot& slot = slots[vi * opts.seeds.size() + si];
        slot.cell = SuiteCell{variant.name, seed, outcome.report};
        slot.hyps = std::move(outcome.test_hypotheses);
    };

    auto guarded = [&](size_t vi, size_t si) {
        try {
            run_cell(vi, si);
        } catch (...) {
            slots[vi * opts.seeds.size() + si].error = std::current_exception();
        }
    };

    const int threads = std::max(1, opts.threads);
    if (threads == 1) {
        for (size_t vi = 0; vi < variants.size(); ++vi)
            for (size_t si = 0; si < opts.seeds.size(); ++si) guarded(vi, si);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) {
            pool.emplace_back([&, t]() {
                const size_t total = variants.size() * opts.seeds.size();
                for (size_t i = t; i < total; i += threads) guarded(i / opts.seeds.size(), i % opts.seeds.size());
            });
        }
        for (auto& th : pool) th.join();
    }

    for (size_t vi = 0; vi < variants.size(); ++vi) {
        for (size_t si = 0; si < opts.seeds.size(); ++si) {
            CellSlot& slot = slots[vi * opts.seeds.size() + si];
            if (slot.error) {
                try {
                    std::rethrow_exception(slot.error);
                } catch (const std::exception& e) {
                    throw std::runtime_error("suite cell (" + variants[vi].name + ", seed " +
                                             std::to_string(opts.seeds[si]) + ") failed: " + e.what());
                }
            }
        }
    }

    // Bootstrap p-values against the first variant, seed-matched.
    std::vector<std::vector<int>> refs;
    const int64_t n_test = std::min<int64_t>(opts.student_train.final_bleu_sentences, test_corpus.size());
    for (int64_t i = 0; i < n_test; ++i) refs.push_back(test_corpus.pairs[i].tgt);
    for (size_t vi = 0; vi < variants.size(); ++vi) {
        for (size_t si = 0; si < opts.seeds.size(); ++si) {
            CellSlot& slot = slots[vi * opts.seeds.size() + si];
            if (vi > 0 && !refs.empty() && !slot.hyps.empty()) {
                const auto& baseline = slots[si].hyps;  // variant 0, same seed
                if (!baseline.empty())
                    slot.cell.report.p_value = paired_bootstrap(baseline, slot.hyps, refs, 1000, 42);
            }
            result.cells.push_back(slot.cell);
        }
    }
    result.aggregates = aggregate_cells(result.variants, result.cells);

    if (emit) {
        std::ofstream csv(fs::path(opts.out_dir) / "results.csv", std::ios::binary);
        csv << result.to_csv();
        save_json_file((fs::path(opts.out_dir) / "results.json").string(), result.to_json());
        json config = opts.to_json();
        config["suite"] = suite_kind_to_string(kind);
        config["teacher_checkpoint"] = teacher_path;
        save_json_file((fs::path(opts.out_dir) / "config.json").string(), config);
    }
    return result;
}

}  // namespace tiekd
