#include "tiekd/decode.hpp"

#include <fstream>
#include <thread>

namespace tiekd {

using nlohmann::json;

double DistilledCorpus::top1_fraction() const {
    int64_t total = 0, top1 = 0;
    for (const auto& s : sentences) {
        total += static_cast<int64_t>(s.top1.size());
        for (uint8_t f : s.top1) top1 += f;
    }
    return total == 0 ? 0.0 : static_cast<double>(top1) / static_cast<double>(total);
}

DistilledCorpus distill_corpus(const Seq2SeqModel& teacher, const ParallelCorpus& corpus, const BeamConfig& cfg_in,
                               json provenance, int num_threads) {
    BeamConfig cfg = cfg_in;
    cfg.max_len = std::min(cfg.max_len, teacher.config().max_len - 1);
    cfg.validate();
    DistilledCorpus out;
    out.provenance = std::move(provenance);
    out.provenance["beam_size"] = cfg.beam_size;
    out.provenance["length_penalty"] = cfg.length_penalty;
    out.provenance["max_len"] = cfg.max_len;
    out.sentences.resize(corpus.size());

    auto worker = [&](size_t begin, size_t end) {
        for (size_t i = begin; i < end; ++i) {
            const auto& pair = corpus.pairs[i];
            DecodeResult r = beam_decode<float>(model_scorer(teacher, pair.src), cfg);
            out.sentences[i] = DistilledSentence{pair.src, r.tokens, r.flags};
        }
    };

    const int threads = std::max(1, num_threads);
    if (threads == 1 || corpus.size() < 2) {
        worker(0, corpus.size());
    } else {
        std::vector<std::thread> pool;
        const size_t chunk = (corpus.size() + threads - 1) / threads;
        for (int t = 0; t < threads; ++t) {
            const size_t begin = t * chunk;
            const size_t end = std::min(corpus.size(), begin + chunk);
            if (begin >= end) break;
            pool.emplace_back(worker, begin, end);
        }
        for (auto& th : pool) th.join();
    }
    return out;
}

void save_distilled_jsonl(const std::string& path, const DistilledCorpus& corpus) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("distilled corpus: cannot open for write: " + path);
    out << json{{"provenance", corpus.provenance}}.dump() << "\n";
    for (const auto& s : corpus.sentences) {
        json line = {{"src", s.src}, {"tgt", s.tgt}, {"top1", json::array()}};
        for (uint8_t f : s.top1) line["top1"].push_back(f != 0);
        out << line.dump() << "\n";
    }
    if (!out) throw std::runtime_error("distilled corpus: write failed: " + path);
}

DistilledCorpus load_distilled_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("distilled corpus: cannot open: " + path);
    DistilledCorpus corpus;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw std::runtime_error("distilled corpus: malformed line " + std::to_string(lineno) + " in " + path);
        if (lineno == 1 && j.contains("provenance")) {
            corpus.provenance = j.at("provenance");
            continue;
        }
        if (!j.contains("src") || !j.contains("tgt") || !j.contains("top1"))
            throw std::runtime_error("distilled corpus: malformed line " + std::to_string(lineno) + " in " + path);
        DistilledSentence s;
        s.src = j.at("src").get<std::vector<int>>();
        s.tgt = j.at("tgt").get<std::vector<int>>();
        for (bool f : j.at("top1").get<std::vector<bool>>()) s.top1.push_back(f ? 1 : 0);
        if (s.top1.size() != s.tgt.size())
            throw std::runtime_error("distilled corpus: flags/target length mismatch at line " +
                                     std::to_string(lineno) + " in " + path);
        corpus.sentences.push_back(std::move(s));
    }
    return corpus;
}

BatchItem distilled_item(const DistilledCorpus& corpus, int64_t index) {
    const auto& s = corpus.sentences[index];
    BatchItem item;
    item.src = &s.src;
    item.target = s.tgt;
    item.flags = s.top1;
    item.sentence_index = index;
    return item;
}

}  // namespace tiekd
