#pragma once

// Shared fixtures for the unit suites: seeded random tensors, micro model
// configs, and tolerances.

#include <vector>

#include "tiekd/model.hpp"
#include "tiekd/rng.hpp"
#include "tiekd/tensor.hpp"

namespace tiekd::test {

template <typename T>
TensorT<T> random_tensor(Rng& rng, Shape shape, T scale = T(1), bool requires_grad = false) {
    std::vector<T> data(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : data) x = static_cast<T>(rng.gaussian()) * scale;
    return TensorT<T>::from_data(std::move(shape), std::move(data), requires_grad);
}

// Random values bounded away from zero (for relu/log kink avoidance).
template <typename T>
TensorT<T> random_tensor_offset(Rng& rng, Shape shape, T min_abs) {
    std::vector<T> data(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : data) {
        double v = rng.gaussian();
        if (std::abs(v) < min_abs) v = v < 0 ? -min_abs * 2 : min_abs * 2;
        x = static_cast<T>(v);
    }
    return TensorT<T>::from_data(std::move(shape), std::move(data));
}

template <typename T>
std::vector<T> random_distribution(Rng& rng, int v) {
    std::vector<T> d(v);
    T sum = 0;
    for (auto& x : d) {
        x = static_cast<T>(std::exp(rng.gaussian()));
        sum += x;
    }
    for (auto& x : d) x /= sum;
    return d;
}

inline ModelConfig micro_model_config(int vocab = 12, uint64_t seed = 11) {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_enc_layers = 1;
    cfg.n_dec_layers = 1;
    cfg.d_ffn = 24;
    cfg.vocab_size = vocab;
    cfg.max_len = 12;
    cfg.dropout_rate = 0.0;
    cfg.seed = seed;
    return cfg;
}

inline TokenMatrix random_tokens(Rng& rng, int64_t batch, int64_t len, int vocab, bool with_bos) {
    TokenMatrix m(batch, len);
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t t = 0; t < len; ++t) {
            if (with_bos && t == 0)
                m.at(b, t) = kBos;
            else
                m.at(b, t) = kNumSpecialTokens + static_cast<int>(rng.uniform_int(vocab - kNumSpecialTokens));
        }
    }
    return m;
}

}  // namespace tiekd::test
