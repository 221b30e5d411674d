#pragma once

// Tiny post-norm encoder-decoder transformer. Produces per-position target
// vocabulary logits under teacher forcing; decoding lives in decode.hpp.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tiekd/rng.hpp"
#include "tiekd/tensor.hpp"

namespace tiekd {

// Reserved token ids, shared by every vocabulary in the project.
constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kEos = 2;
constexpr int kUnk = 3;
constexpr int kNumSpecialTokens = 4;

// A padded batch of token ids, row-major (batch, len).
struct TokenMatrix {
    int64_t batch = 0;
    int64_t len = 0;
    std::vector<int> ids;

    TokenMatrix() = default;
    TokenMatrix(int64_t b, int64_t l) : batch(b), len(l), ids(static_cast<size_t>(b * l), kPad) {}

    int& at(int64_t b, int64_t t) { return ids[b * len + t]; }
    int at(int64_t b, int64_t t) const { return ids[b * len + t]; }
};

struct ModelConfig {
    int d_model = 64;
    int n_heads = 2;
    int n_enc_layers = 2;
    int n_dec_layers = 2;
    int d_ffn = 128;
    int vocab_size = 0;
    int max_len = 64;
    double dropout_rate = 0.1;
    uint64_t seed = 1;

    void validate() const {
        if (d_model <= 0 || n_heads <= 0 || n_enc_layers <= 0 || n_dec_layers <= 0 || d_ffn <= 0)
            throw std::invalid_argument("ModelConfig: dimensions must be positive");
        if (d_model % n_heads != 0)
            throw std::invalid_argument("ModelConfig: d_model " + std::to_string(d_model) +
                                        " not divisible by n_heads " + std::to_string(n_heads));
        if (vocab_size < kNumSpecialTokens)
            throw std::invalid_argument("ModelConfig: vocab_size " + std::to_string(vocab_size) +
                                        " must be >= " + std::to_string(kNumSpecialTokens));
        if (max_len <= 0) throw std::invalid_argument("ModelConfig: max_len must be positive");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw std::invalid_argument("ModelConfig: dropout_rate must be in [0,1)");
    }

    bool operator==(const ModelConfig&) const = default;
};

inline ModelConfig default_teacher_config(int vocab_size, uint64_t seed = 1) {
    ModelConfig cfg;
    cfg.d_model = 128;
    cfg.n_heads = 4;
    cfg.n_enc_layers = 4;
    cfg.n_dec_layers = 4;
    cfg.d_ffn = 256;
    cfg.vocab_size = vocab_size;
    cfg.dropout_rate = 0.1;
    cfg.seed = seed;
    return cfg;
}

inline ModelConfig default_student_config(int vocab_size, uint64_t seed = 1) {
    ModelConfig cfg;
    cfg.d_model = 64;
    cfg.n_heads = 2;
    cfg.n_enc_layers = 2;
    cfg.n_dec_layers = 2;
    cfg.d_ffn = 128;
    cfg.vocab_size = vocab_size;
    cfg.dropout_rate = 0.1;
    cfg.seed = seed;
    return cfg;
}

template <typename T>
class Seq2SeqModelT {
  public:
    explicit Seq2SeqModelT(ModelConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(cfg_.seed);
        const int d = cfg_.d_model, f = cfg_.d_ffn, v = cfg_.vocab_size;

        enc_embed_ = add_param("enc.embed", {v, d}, embed_scale(), rng);
        dec_embed_ = add_param("dec.embed", {v, d}, embed_scale(), rng);
        for (int l = 0; l < cfg_.n_enc_layers; ++l) {
            const std::string p = "enc.l" + std::to_string(l) + ".";
            enc_layers_.push_back(AttnBlock{
                add_linear(p + "attn", d, d, rng),
                add_norm(p + "ln1"),
                add_ffn(p + "ffn", d, f, rng),
                add_norm(p + "ln2"),
            });
        }
        for (int l = 0; l < cfg_.n_dec_layers; ++l) {
            const std::string p = "dec.l" + std::to_string(l) + ".";
            dec_layers_.push_back(DecBlock{
                add_linear(p + "self", d, d, rng),
                add_norm(p + "ln1"),
                add_linear(p + "cross", d, d, rng),
                add_norm(p + "ln2"),
                add_ffn(p + "ffn", d, f, rng),
                add_norm(p + "ln3"),
            });
        }
        out_proj_ = add_param("out.proj", {d, v}, xavier_limit(d, v), rng);
        out_bias_ = add_zero_param("out.bias", {v});

        build_positional_table();
    }

    const ModelConfig& config() const { return cfg_; }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    std::vector<std::pair<std::string, TensorT<T>>>& params() { return params_; }
    const std::vector<std::pair<std::string, TensorT<T>>>& params() const { return params_; }

    TensorT<T> param(const std::string& name) const {
        for (const auto& [n, t] : params_)
            if (n == name) return t;
        throw std::out_of_range("Seq2SeqModel: no parameter named " + name);
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    // Teacher-forcing forward: logits of shape (batch, tgt_len, vocab).
    // Dropout is active only when training=true, drawing from `rng`.
    TensorT<T> forward(const TokenMatrix& src, const TokenMatrix& tgt_in, bool training = false,
                       Rng* rng = nullptr) const {
        validate_tokens(src, "src");
        validate_tokens(tgt_in, "tgt_in");
        if (tgt_in.len > cfg_.max_len || src.len > cfg_.max_len)
            throw std::invalid_argument("forward: sequence length exceeds max_len " + std::to_string(cfg_.max_len));
        for (int64_t b = 0; b < tgt_in.batch; ++b) {
            if (tgt_in.at(b, 0) != kBos)
                throw std::invalid_argument("forward: tgt_in row " + std::to_string(b) + " does not begin with BOS");
        }
        if (training && cfg_.dropout_rate > 0.0 && rng == nullptr)
            throw std::invalid_argument("forward: training-mode dropout needs an rng");

        const int64_t bsz = src.batch, ts = src.len, tt = tgt_in.len;
        const T scale = std::sqrt(static_cast<T>(cfg_.d_model));

        TensorT<T> x = embed_tokens(enc_embed_, src, scale);
        x = apply_dropout(x, training, rng);
        TensorT<T> src_mask = pad_mask(src, ts);  // (B,1,Ts), expanded per use
        for (const auto& layer : enc_layers_) {
            TensorT<T> h = attention(layer.attn, x, x, expand_mask(src_mask, bsz, ts));
            x = post_norm(layer.ln1, x, h, training, rng);
            h = ffn(layer.ffn, x);
            x = post_norm(layer.ln2, x, h, training, rng);
        }

        TensorT<T> y = embed_tokens(dec_embed_, tgt_in, scale);
        y = apply_dropout(y, training, rng);
        TensorT<T> causal = causal_mask(bsz, tt);
        TensorT<T> cross_mask = expand_mask(src_mask, bsz, tt);
        for (const auto& layer : dec_layers_) {
            TensorT<T> h = attention(layer.self_attn, y, y, causal);
            y = post_norm(layer.ln1, y, h, training, rng);
            h = attention(layer.cross_attn, y, x, cross_mask);
            y = post_norm(layer.ln2, y, h, training, rng);
            h = ffn(layer.ffn, y);
            y = post_norm(layer.ln3, y, h, training, rng);
        }

        return add(matmul(y, out_proj_), out_bias_);
    }

  private:
    struct Linear {
        TensorT<T> wq, wk, wv, wo;
    };
    struct Norm {
        TensorT<T> gain, bias;
    };
    struct Ffn {
        TensorT<T> w1, b1, w2, b2;
    };
    struct AttnBlock {
        Linear attn;
        Norm ln1;
        Ffn ffn;
        Norm ln2;
    };
    struct DecBlock {
        Linear self_attn;
        Norm ln1;
        Linear cross_attn;
        Norm ln2;
        Ffn ffn;
        Norm ln3;
    };

    T embed_scale() const { return T(1) / std::sqrt(static_cast<T>(cfg_.d_model)); }
    static T xavier_limit(int64_t fan_in, int64_t fan_out) {
        return std::sqrt(T(6) / static_cast<T>(fan_in + fan_out));
    }

    TensorT<T> add_param(const std::string& name, Shape shape, T scale, Rng& rng) {
        std::vector<T> data(static_cast<size_t>(shape_numel(shape)));
        for (auto& v : data) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * scale);
        auto t = TensorT<T>::from_data(std::move(shape), std::move(data), true);
        params_.emplace_back(name, t);
        return t;
    }

    TensorT<T> add_zero_param(const std::string& name, Shape shape) {
        auto t = TensorT<T>::zeros(std::move(shape), true);
        params_.emplace_back(name, t);
        return t;
    }

    TensorT<T> add_one_param(const std::string& name, Shape shape) {
        auto t = TensorT<T>::filled(std::move(shape), T(1), true);
        params_.emplace_back(name, t);
        return t;
    }

    // Residual-feeding projections (attention output, FFN output) start
    // 1/sqrt(2 * depth) smaller; post-norm stacks train poorly without it.
    T residual_scale() const {
        return T(1) / std::sqrt(T(2) * static_cast<T>(cfg_.n_enc_layers + cfg_.n_dec_layers));
    }

    Linear add_linear(const std::string& prefix, int64_t d_in, int64_t d_out, Rng& rng) {
        const T lim = xavier_limit(d_in, d_out);
        return Linear{
            add_param(prefix + ".wq", {d_in, d_out}, lim, rng),
            add_param(prefix + ".wk", {d_in, d_out}, lim, rng),
            add_param(prefix + ".wv", {d_in, d_out}, lim, rng),
            add_param(prefix + ".wo", {d_in, d_out}, lim * residual_scale(), rng),
        };
    }

    Norm add_norm(const std::string& prefix) {
        return Norm{add_one_param(prefix + ".gain", {cfg_.d_model}), add_zero_param(prefix + ".bias", {cfg_.d_model})};
    }

    Ffn add_ffn(const std::string& prefix, int64_t d, int64_t f, Rng& rng) {
        return Ffn{
            add_param(prefix + ".w1", {d, f}, xavier_limit(d, f), rng),
            add_zero_param(prefix + ".b1", {f}),
            add_param(prefix + ".w2", {f, d}, xavier_limit(f, d) * residual_scale(), rng),
            add_zero_param(prefix + ".b2", {d}),
        };
    }

    void build_positional_table() {
        pos_table_.assign(static_cast<size_t>(cfg_.max_len) * cfg_.d_model, T(0));
        const int d = cfg_.d_model;
        for (int p = 0; p < cfg_.max_len; ++p) {
            for (int i = 0; i < d / 2; ++i) {
                const double angle = p / std::pow(10000.0, (2.0 * i) / d);
                pos_table_[static_cast<size_t>(p) * d + 2 * i] = static_cast<T>(std::sin(angle));
                pos_table_[static_cast<size_t>(p) * d + 2 * i + 1] = static_cast<T>(std::cos(angle));
            }
        }
    }

    void validate_tokens(const TokenMatrix& m, const char* which) const {
        for (size_t i = 0; i < m.ids.size(); ++i) {
            if (m.ids[i] < 0 || m.ids[i] >= cfg_.vocab_size)
                throw std::out_of_range(std::string("forward: ") + which + " token id " + std::to_string(m.ids[i]) +
                                        " out of range [0," + std::to_string(cfg_.vocab_size) + ") at position " +
                                        std::to_string(i));
        }
    }

    TensorT<T> embed_tokens(const TensorT<T>& table, const TokenMatrix& tokens, T scale) const {
        TensorT<T> e = embedding(table, tokens.ids, {tokens.batch, tokens.len});
        e = mul_scalar(e, scale);
        std::vector<T> pe(static_cast<size_t>(tokens.len) * cfg_.d_model);
        std::copy_n(pos_table_.data(), pe.size(), pe.data());
        return add(e, TensorT<T>::from_data({tokens.len, cfg_.d_model}, std::move(pe)));
    }

    TensorT<T> apply_dropout(const TensorT<T>& x, bool training, Rng* rng) const {
        if (!training || cfg_.dropout_rate <= 0.0) return x;
        const T keep = static_cast<T>(1.0 - cfg_.dropout_rate);
        std::vector<T> mask(x.data().size());
        for (auto& m : mask) m = rng->uniform() < cfg_.dropout_rate ? T(0) : T(1) / keep;
        return mul(x, TensorT<T>::from_data(x.shape(), std::move(mask)));
    }

    // Additive mask (B,1,Tk) with -1e9 on PAD key positions.
    TensorT<T> pad_mask(const TokenMatrix& tokens, int64_t tk) const {
        std::vector<T> m(static_cast<size_t>(tokens.batch) * tk, T(0));
        for (int64_t b = 0; b < tokens.batch; ++b)
            for (int64_t t = 0; t < tk; ++t)
                if (tokens.at(b, t) == kPad) m[b * tk + t] = T(-1e9);
        return TensorT<T>::from_data({tokens.batch, 1, tk}, std::move(m));
    }

    // (B,1,Tk) -> (B,H,Tq,Tk), materialized.
    TensorT<T> expand_mask(const TensorT<T>& mask, int64_t bsz, int64_t tq) const {
        const int64_t tk = mask.shape().back();
        const int64_t h = cfg_.n_heads;
        std::vector<T> out(static_cast<size_t>(bsz * h * tq * tk));
        const T* src = mask.data().data();
        for (int64_t b = 0; b < bsz; ++b) {
            const T* row = src + b * tk;
            for (int64_t i = 0; i < h * tq; ++i)
                std::copy_n(row, tk, out.data() + (b * h * tq + i) * tk);
        }
        return TensorT<T>::from_data({bsz, h, tq, tk}, std::move(out));
    }

    TensorT<T> causal_mask(int64_t bsz, int64_t t) const {
        const int64_t h = cfg_.n_heads;
        std::vector<T> out(static_cast<size_t>(bsz * h * t * t), T(0));
        for (int64_t g = 0; g < bsz * h; ++g) {
            T* block = out.data() + g * t * t;
            for (int64_t i = 0; i < t; ++i)
                for (int64_t j = i + 1; j < t; ++j) block[i * t + j] = T(-1e9);
        }
        return TensorT<T>::from_data({bsz, h, t, t}, std::move(out));
    }

    TensorT<T> attention(const Linear& lin, const TensorT<T>& q_in, const TensorT<T>& kv_in,
                         const TensorT<T>& mask) const {
        const int64_t bsz = q_in.dim(0), tq = q_in.dim(1), tk = kv_in.dim(1);
        const int64_t h = cfg_.n_heads, dh = cfg_.d_model / h;

        auto split_heads = [&](const TensorT<T>& x, int64_t t) {
            return permute(reshape(x, {bsz, t, h, dh}), {0, 2, 1, 3});  // (B,H,T,dh)
        };
        TensorT<T> q = split_heads(matmul(q_in, lin.wq), tq);
        TensorT<T> k = split_heads(matmul(kv_in, lin.wk), tk);
        TensorT<T> v = split_heads(matmul(kv_in, lin.wv), tk);

        TensorT<T> scores = mul_scalar(matmul(q, permute(k, {0, 1, 3, 2})), T(1) / std::sqrt(static_cast<T>(dh)));
        scores = add(scores, mask);
        TensorT<T> attn = softmax_lastdim(scores);
        TensorT<T> ctx = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {bsz, tq, cfg_.d_model});
        return matmul(ctx, lin.wo);
    }

    TensorT<T> ffn(const Ffn& f, const TensorT<T>& x) const {
        return add(matmul(relu(add(matmul(x, f.w1), f.b1)), f.w2), f.b2);
    }

    TensorT<T> post_norm(const Norm& n, const TensorT<T>& x, const TensorT<T>& sublayer, bool training,
                         Rng* rng) const {
        return layer_norm(add(x, apply_dropout(sublayer, training, rng)), n.gain, n.bias, T(1e-5));
    }

    ModelConfig cfg_;
    std::vector<std::pair<std::string, TensorT<T>>> params_;
    TensorT<T> enc_embed_, dec_embed_, out_proj_, out_bias_;
    std::vector<AttnBlock> enc_layers_;
    std::vector<DecBlock> dec_layers_;
    std::vector<T> pos_table_;
};

using Seq2SeqModel = Seq2SeqModelT<float>;

inline Seq2SeqModel make_teacher(const ModelConfig& cfg) { return Seq2SeqModel(cfg); }
inline Seq2SeqModel make_student(const ModelConfig& cfg) { return Seq2SeqModel(cfg); }

// Teacher-forced next-token distributions, eval mode, grad-free.
// Returns (batch*len) rows of vocab-sized probability vectors.
template <typename T>
std::vector<std::vector<T>> forward_probs(const Seq2SeqModelT<T>& model, const TokenMatrix& src,
                                          const TokenMatrix& tgt_in) {
    NoGradGuard ng;
    TensorT<T> logits = model.forward(src, tgt_in, false, nullptr);
    TensorT<T> probs = softmax_lastdim(logits);
    const int64_t v = probs.shape().back();
    const int64_t rows = probs.numel() / v;
    std::vector<std::vector<T>> out(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        out[r].assign(probs.data().begin() + r * v, probs.data().begin() + (r + 1) * v);
    }
    return out;
}

}  // namespace tiekd
