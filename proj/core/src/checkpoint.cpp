#include "tiekd/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace tiekd {

using nlohmann::json;

const std::vector<float>& NamedArrays::array(const std::string& name) const {
    for (const auto& [n, a] : arrays)
        if (n == name) return a;
    throw std::out_of_range("checkpoint: no array named " + name);
}

bool NamedArrays::has(const std::string& name) const {
    for (const auto& [n, a] : arrays)
        if (n == name) return true;
    return false;
}

void save_named_arrays(const std::string& path, const NamedArrays& content) {
    json manifest = json::array();
    int64_t offset = 0;
    for (const auto& [name, data] : content.arrays) {
        manifest.push_back({{"name", name}, {"len", data.size()}, {"offset", offset}});
        offset += static_cast<int64_t>(data.size() * sizeof(float));
    }
    json header = {{"format", "tiekd-ckpt-v1"}, {"meta", content.meta}, {"arrays", manifest}};

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    out << header.dump() << "\n";
    for (const auto& [name, data] : content.arrays)
        out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
}

NamedArrays load_named_arrays(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open: " + path);
    std::string header_line;
    if (!std::getline(in, header_line)) throw std::runtime_error("checkpoint: missing header: " + path);
    json header = json::parse(header_line, nullptr, false);
    if (header.is_discarded() || header.value("format", "") != "tiekd-ckpt-v1")
        throw std::runtime_error("checkpoint: bad header in " + path);

    const std::streampos blob_start = in.tellg();
    NamedArrays out;
    out.meta = header.at("meta");
    for (const auto& entry : header.at("arrays")) {
        const std::string name = entry.at("name");
        const size_t len = entry.at("len");
        const int64_t offset = entry.at("offset");
        std::vector<float> data(len);
        in.seekg(blob_start + static_cast<std::streamoff>(offset));
        in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(len * sizeof(float)));
        if (!in) throw std::runtime_error("checkpoint: truncated array '" + name + "' in " + path);
        out.arrays.emplace_back(name, std::move(data));
    }
    return out;
}

std::string file_fnv1a_hex(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for hashing: " + path);
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 14];
    while (in) {
        in.read(buf, sizeof(buf));
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ull;
        }
    }
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    return std::string(hex);
}

json model_config_to_json(const ModelConfig& cfg) {
    return json{{"d_model", cfg.d_model},
                {"n_heads", cfg.n_heads},
                {"n_enc_layers", cfg.n_enc_layers},
                {"n_dec_layers", cfg.n_dec_layers},
                {"d_ffn", cfg.d_ffn},
                {"vocab_size", cfg.vocab_size},
                {"max_len", cfg.max_len},
                {"dropout_rate", cfg.dropout_rate},
                {"seed", cfg.seed}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.d_model = j.at("d_model");
    cfg.n_heads = j.at("n_heads");
    cfg.n_enc_layers = j.at("n_enc_layers");
    cfg.n_dec_layers = j.at("n_dec_layers");
    cfg.d_ffn = j.at("d_ffn");
    cfg.vocab_size = j.at("vocab_size");
    cfg.max_len = j.at("max_len");
    cfg.dropout_rate = j.at("dropout_rate");
    cfg.seed = j.at("seed");
    cfg.validate();
    return cfg;
}

void save_model(const std::string& path, const Seq2SeqModel& model, const json& extra_meta) {
    NamedArrays content;
    content.meta = {{"kind", "model"}, {"config", model_config_to_json(model.config())}};
    for (auto& [key, value] : extra_meta.items()) content.meta[key] = value;
    json shapes = json::object();
    for (const auto& [name, t] : model.params()) {
        content.arrays.emplace_back(name, t.data());
        shapes[name] = t.shape();
    }
    content.meta["shapes"] = shapes;
    save_named_arrays(path, content);
}

json load_model_params(const std::string& path, Seq2SeqModel& model) {
    NamedArrays content = load_named_arrays(path);
    for (auto& [name, t] : model.params()) {
        const auto& src = content.array(name);
        if (src.size() != t.data().size())
            throw std::runtime_error("checkpoint: array '" + name + "' in " + path + " has length " +
                                     std::to_string(src.size()) + ", model expects " + std::to_string(t.data().size()));
        t.data() = src;
    }
    return content.meta;
}

Seq2SeqModel load_model(const std::string& path) {
    NamedArrays content = load_named_arrays(path);
    ModelConfig cfg = model_config_from_json(content.meta.at("config"));
    Seq2SeqModel model(cfg);
    for (auto& [name, t] : model.params()) {
        const auto& src = content.array(name);
        if (src.size() != t.data().size())
            throw std::runtime_error("checkpoint: array '" + name + "' in " + path + " has unexpected length");
        t.data() = src;
    }
    return model;
}

}  // namespace tiekd
