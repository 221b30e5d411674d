#include "tiekd/config.hpp"

#include <algorithm>
#include <fstream>

#include "tiekd/checkpoint.hpp"

namespace tiekd {

using nlohmann::json;

int model_vocab_for_task(const TaskSpec& task) {
    return std::max(task.src_vocab_size, task.tgt_vocab_total());
}

void RunConfig::resolve() {
    task.validate();
    if (model.vocab_size <= 0) model.vocab_size = model_vocab_for_task(task);
    model.validate();
    train.validate();
}

json run_config_to_json(const RunConfig& cfg) {
    json j = {{"task", task_spec_to_json(cfg.task)},
              {"model", model_config_to_json(cfg.model)},
              {"train", train_config_to_json(cfg.train)}};
    if (!cfg.teacher_checkpoint.empty()) j["teacher_checkpoint"] = cfg.teacher_checkpoint;
    if (!cfg.data_dir.empty()) j["data_dir"] = cfg.data_dir;
    if (!cfg.distilled_corpus.empty()) j["distilled_corpus"] = cfg.distilled_corpus;
    return j;
}

void require_known_keys(const json& j, const std::vector<std::string>& allowed, const std::string& context) {
    for (const auto& [key, value] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw std::invalid_argument("config: unknown key '" + key + "' in " + context);
    }
}

RunConfig run_config_from_json(const json& j) {
    require_known_keys(j, {"task", "model", "train", "teacher_checkpoint", "data_dir", "distilled_corpus"},
                       "run config");
    RunConfig cfg;
    if (j.contains("task")) {
        require_known_keys(j.at("task"),
                           {"src_vocab_size", "tgt_vocab_size", "synonym_set_size", "dominant_prob", "reorder_window",
                            "min_len", "max_len", "n_train", "n_valid", "n_test", "seed"},
                           "task");
        cfg.task = task_spec_from_json(j.at("task"));
    }
    if (j.contains("model")) {
        require_known_keys(j.at("model"),
                           {"d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ffn", "vocab_size", "max_len",
                            "dropout_rate", "seed"},
                           "model");
        json m = j.at("model");
        // vocab_size may be left for resolve() to derive
        ModelConfig base;
        cfg.model.d_model = m.value("d_model", base.d_model);
        cfg.model.n_heads = m.value("n_heads", base.n_heads);
        cfg.model.n_enc_layers = m.value("n_enc_layers", base.n_enc_layers);
        cfg.model.n_dec_layers = m.value("n_dec_layers", base.n_dec_layers);
        cfg.model.d_ffn = m.value("d_ffn", base.d_ffn);
        cfg.model.vocab_size = m.value("vocab_size", 0);
        cfg.model.max_len = m.value("max_len", base.max_len);
        cfg.model.dropout_rate = m.value("dropout_rate", base.dropout_rate);
        cfg.model.seed = m.value("seed", base.seed);
    }
    if (j.contains("train")) {
        require_known_keys(j.at("train"),
                           {"lr", "warmup_steps", "adam_beta1", "adam_beta2", "adam_eps", "clip_norm", "batch_tokens",
                            "max_steps", "seed", "flavor", "alpha", "ranking_k", "kd_iterations", "label_smoothing",
                            "use_hr", "iterations", "surgery", "seqkd_mode", "checkpoint_every", "eval_sentences",
                            "eval_batch_tokens", "beam_size", "length_penalty", "decode_max_len",
                            "final_bleu_sentences", "overlap_sample"},
                           "train");
        cfg.train = train_config_from_json(j.at("train"));
    }
    cfg.teacher_checkpoint = j.value("teacher_checkpoint", "");
    cfg.data_dir = j.value("data_dir", "");
    cfg.distilled_corpus = j.value("distilled_corpus", "");
    cfg.resolve();
    return cfg;
}

json load_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw std::runtime_error("config: " + path + " is not valid JSON");
    return j;
}

void save_json_file(const std::string& path, const json& j, int indent) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("config: cannot open for write: " + path);
    out << j.dump(indent) << "\n";
    if (!out) throw std::runtime_error("config: write failed: " + path);
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw std::invalid_argument("--set expects key.path=value, got '" + assignment + "'");
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);

    json* node = &doc;
    size_t begin = 0;
    while (true) {
        const size_t dot = path.find('.', begin);
        const std::string key = path.substr(begin, dot == std::string::npos ? std::string::npos : dot - begin);
        if (key.empty()) throw std::invalid_argument("--set: empty key segment in '" + path + "'");
        if (dot == std::string::npos) {
            json value = json::parse(raw, nullptr, false);
            if (value.is_discarded()) value = raw;  // plain string
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        begin = dot + 1;
    }
}

}  // namespace tiekd
