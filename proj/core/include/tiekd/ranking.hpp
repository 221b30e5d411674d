#pragma once

// Ranking helpers shared by target surgery, metrics and decoding. Ties are
// always broken toward the lowest token id so every consumer ranks
// identically.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

namespace tiekd {

template <typename T>
int argmax_tie_low(const T* row, int n) {
    int best = 0;
    for (int j = 1; j < n; ++j) {
        if (row[j] > row[best]) best = j;
    }
    return best;
}

template <typename T>
int argmax_tie_low(const std::vector<T>& row) {
    return argmax_tie_low(row.data(), static_cast<int>(row.size()));
}

// Indices of the k largest entries, descending by value, ascending id on ties.
template <typename T>
std::vector<int> topk_desc(const T* row, int n, int k) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    const int kk = std::min(k, n);
    std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(), [row](int a, int b) {
        if (row[a] != row[b]) return row[a] > row[b];
        return a < b;
    });
    idx.resize(kk);
    return idx;
}

template <typename T>
std::vector<int> topk_desc(const std::vector<T>& row, int k) {
    return topk_desc(row.data(), static_cast<int>(row.size()), k);
}

// Full descending ranking of all n entries (same tie rule).
template <typename T>
std::vector<int> full_ranking(const T* row, int n) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [row](int a, int b) {
        if (row[a] != row[b]) return row[a] > row[b];
        return a < b;
    });
    return idx;
}

}  // namespace tiekd
