#include "tiekd/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace tiekd {

using nlohmann::json;

void TaskSpec::validate() const {
    if (src_vocab_size <= kNumSpecialTokens)
        throw std::invalid_argument("TaskSpec: src_vocab_size must exceed the 4 reserved ids");
    if (synonym_set_size < 1) throw std::invalid_argument("TaskSpec: synonym_set_size must be >= 1");
    if (dominant_prob <= 0.0 || dominant_prob > 1.0)
        throw std::invalid_argument("TaskSpec: dominant_prob must be in (0,1]");
    if (synonym_set_size == 1 && dominant_prob < 1.0)
        throw std::invalid_argument("TaskSpec: degenerate spec, m=1 requires dominant_prob=1");
    if (dominant_prob < 1.0 / synonym_set_size)
        throw std::invalid_argument("TaskSpec: dominant_prob must be >= 1/m");
    if (min_len < 1 || max_len < min_len) throw std::invalid_argument("TaskSpec: bad sentence length range");
    if (reorder_window < 0) throw std::invalid_argument("TaskSpec: reorder_window must be >= 0");
    if (n_train < 0 || n_valid < 0 || n_test < 0) throw std::invalid_argument("TaskSpec: negative corpus size");
    const int needed = kNumSpecialTokens + synonym_set_size * n_symbols();
    if (tgt_vocab_size > 0 && tgt_vocab_size < needed)
        throw std::invalid_argument("TaskSpec: tgt_vocab_size " + std::to_string(tgt_vocab_size) +
                                    " too small for disjoint synonym sets (need " + std::to_string(needed) + ")");
}

json task_spec_to_json(const TaskSpec& s) {
    return json{{"src_vocab_size", s.src_vocab_size},
                {"tgt_vocab_size", s.tgt_vocab_size},
                {"synonym_set_size", s.synonym_set_size},
                {"dominant_prob", s.dominant_prob},
                {"reorder_window", s.reorder_window},
                {"min_len", s.min_len},
                {"max_len", s.max_len},
                {"n_train", s.n_train},
                {"n_valid", s.n_valid},
                {"n_test", s.n_test},
                {"seed", s.seed}};
}

TaskSpec task_spec_from_json(const json& j) {
    TaskSpec s;
    s.src_vocab_size = j.value("src_vocab_size", s.src_vocab_size);
    s.tgt_vocab_size = j.value("tgt_vocab_size", s.tgt_vocab_size);
    s.synonym_set_size = j.value("synonym_set_size", s.synonym_set_size);
    s.dominant_prob = j.value("dominant_prob", s.dominant_prob);
    s.reorder_window = j.value("reorder_window", s.reorder_window);
    s.min_len = j.value("min_len", s.min_len);
    s.max_len = j.value("max_len", s.max_len);
    s.n_train = j.value("n_train", s.n_train);
    s.n_valid = j.value("n_valid", s.n_valid);
    s.n_test = j.value("n_test", s.n_test);
    s.seed = j.value("seed", s.seed);
    s.validate();
    return s;
}

SynonymTask::SynonymTask(TaskSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    const int w = std::max(1, spec_.reorder_window);
    perms_.resize(w + 1);
    Rng rng = Rng::derive(spec_.seed, 0x7065726d);  // permutation substream
    for (int size = 1; size <= w; ++size) {
        std::vector<int> p(size);
        std::iota(p.begin(), p.end(), 0);
        if (spec_.reorder_window >= 2 && size >= 2) rng.shuffle(p.begin(), p.end());
        perms_[size] = std::move(p);
    }
}

const std::vector<int>& SynonymTask::window_perm(int size) const { return perms_[size]; }

int SynonymTask::source_position_for_target(int n, int j) const {
    const int w = spec_.reorder_window;
    if (w < 2) return j;
    const int start = (j / w) * w;
    const int size = std::min(w, n - start);
    const auto& perm = window_perm(size);
    // tgt[start + perm[i]] = pre[start + i]
    const int local = j - start;
    for (int i = 0; i < size; ++i)
        if (perm[i] == local) return start + i;
    return j;  // unreachable for valid perms
}

std::vector<double> SynonymTask::oracle_distribution(const std::vector<int>& src, int j) const {
    const int n = static_cast<int>(src.size());
    std::vector<double> dist(spec_.tgt_vocab_total(), 0.0);
    if (j >= n) {
        dist[kEos] = 1.0;
        return dist;
    }
    const int symbol = symbol_of_src(src[source_position_for_target(n, j)]);
    if (symbol < 0) throw std::invalid_argument("oracle_distribution: source contains reserved ids");
    const int m = spec_.synonym_set_size;
    dist[dominant_id(symbol)] = spec_.dominant_prob;
    for (int r = 1; r < m; ++r) dist[synonym_id(symbol, r)] = (1.0 - spec_.dominant_prob) / (m - 1);
    return dist;
}

ParallelCorpus SynonymTask::generate_split(int count, uint64_t stream) const {
    Rng rng = Rng::derive(spec_.seed, stream);
    const int m = spec_.synonym_set_size;
    ParallelCorpus corpus;
    corpus.pairs.reserve(count);
    for (int s = 0; s < count; ++s) {
        const int len = spec_.min_len + static_cast<int>(rng.uniform_int(spec_.max_len - spec_.min_len + 1));
        SentencePair pair;
        pair.src.resize(len);
        std::vector<int> pre(len);
        for (int i = 0; i < len; ++i) {
            const int symbol = static_cast<int>(rng.uniform_int(n_symbols()));
            pair.src[i] = kNumSpecialTokens + symbol;
            int variant = 0;
            if (m > 1 && rng.uniform() >= spec_.dominant_prob)
                variant = 1 + static_cast<int>(rng.uniform_int(m - 1));
            pre[i] = synonym_id(symbol, variant);
        }
        pair.tgt.assign(len, 0);
        const int w = spec_.reorder_window;
        if (w < 2) {
            pair.tgt = pre;
        } else {
            for (int start = 0; start < len; start += w) {
                const int size = std::min(w, len - start);
                const auto& perm = window_perm(size);
                for (int i = 0; i < size; ++i) pair.tgt[start + perm[i]] = pre[start + i];
            }
        }
        corpus.pairs.push_back(std::move(pair));
    }
    return corpus;
}

json SynonymTask::src_vocab_json() const {
    json v = json::object();
    v["0"] = "<pad>";
    v["1"] = "<bos>";
    v["2"] = "<eos>";
    v["3"] = "<unk>";
    for (int s = 0; s < n_symbols(); ++s) v[std::to_string(kNumSpecialTokens + s)] = "w" + std::to_string(s);
    return v;
}

json SynonymTask::tgt_vocab_json() const {
    json v = json::object();
    v["0"] = "<pad>";
    v["1"] = "<bos>";
    v["2"] = "<eos>";
    v["3"] = "<unk>";
    for (int s = 0; s < n_symbols(); ++s)
        for (int r = 0; r < spec_.synonym_set_size; ++r)
            v[std::to_string(synonym_id(s, r))] = "w" + std::to_string(s) + "_" + std::to_string(r);
    return v;
}

void save_corpus_jsonl(const std::string& path, const ParallelCorpus& corpus) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("corpus: cannot open for write: " + path);
    for (const auto& pair : corpus.pairs) {
        json line = {{"src", pair.src}, {"tgt", pair.tgt}};
        out << line.dump() << "\n";
    }
    if (!out) throw std::runtime_error("corpus: write failed: " + path);
}

ParallelCorpus load_corpus_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("corpus: cannot open: " + path);
    ParallelCorpus corpus;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("src") || !j.contains("tgt"))
            throw std::runtime_error("corpus: malformed line " + std::to_string(lineno) + " in " + path);
        SentencePair pair;
        pair.src = j.at("src").get<std::vector<int>>();
        pair.tgt = j.at("tgt").get<std::vector<int>>();
        corpus.pairs.push_back(std::move(pair));
    }
    return corpus;
}

int64_t Batch::tgt_tokens() const {
    int64_t n = 0;
    for (uint8_t m : mask) n += m;
    return n;
}

BatchItem gold_item(const ParallelCorpus& corpus, int64_t index) {
    BatchItem item;
    item.src = &corpus.pairs[index].src;
    item.target = corpus.pairs[index].tgt;
    item.target.push_back(kEos);
    item.sentence_index = index;
    return item;
}

Batch make_batch(const std::vector<BatchItem>& items) {
    if (items.empty()) throw std::invalid_argument("make_batch: empty batch");
    int64_t src_len = 0, tgt_len = 0;
    for (const auto& it : items) {
        src_len = std::max<int64_t>(src_len, static_cast<int64_t>(it.src->size()));
        tgt_len = std::max<int64_t>(tgt_len, static_cast<int64_t>(it.target.size()));
        if (!it.flags.empty() && it.flags.size() != it.target.size())
            throw std::invalid_argument("make_batch: flags length does not match target length");
    }
    const int64_t bsz = static_cast<int64_t>(items.size());
    Batch batch;
    batch.src = TokenMatrix(bsz, src_len);
    batch.tgt_in = TokenMatrix(bsz, tgt_len);
    batch.gold.assign(static_cast<size_t>(bsz * tgt_len), kPad);
    batch.mask.assign(static_cast<size_t>(bsz * tgt_len), 0);
    batch.flags.assign(static_cast<size_t>(bsz * tgt_len), 0);
    batch.sentence_index.resize(bsz);
    bool any_flags = false;
    for (int64_t b = 0; b < bsz; ++b) {
        const auto& it = items[b];
        batch.sentence_index[b] = it.sentence_index;
        for (size_t i = 0; i < it.src->size(); ++i) batch.src.at(b, static_cast<int64_t>(i)) = (*it.src)[i];
        batch.tgt_in.at(b, 0) = kBos;
        for (size_t j = 0; j < it.target.size(); ++j) {
            if (j + 1 < static_cast<size_t>(tgt_len)) batch.tgt_in.at(b, static_cast<int64_t>(j + 1)) = it.target[j];
            batch.gold[b * tgt_len + j] = it.target[j];
            batch.mask[b * tgt_len + j] = 1;
            if (!it.flags.empty()) {
                batch.flags[b * tgt_len + j] = it.flags[j];
                any_flags = true;
            }
        }
    }
    if (!any_flags) batch.flags.clear();
    return batch;
}

std::vector<std::vector<int64_t>> pack_batches(const std::vector<int64_t>& order,
                                               const std::vector<int64_t>& target_lengths, int64_t batch_tokens) {
    std::vector<std::vector<int64_t>> batches;
    std::vector<int64_t> current;
    int64_t used = 0;
    for (int64_t idx : order) {
        const int64_t need = target_lengths[idx];
        if (!current.empty() && used + need > batch_tokens) {
            batches.push_back(std::move(current));
            current.clear();
            used = 0;
        }
        current.push_back(idx);
        used += need;
    }
    if (!current.empty()) batches.push_back(std::move(current));
    return batches;
}

}  // namespace tiekd
