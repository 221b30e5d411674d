#pragma once

// Dense row-major tensors with reverse-mode autodiff. Deliberately small:
// only the kernels the seq2seq models and losses in this project need, no
// broadcasting beyond suffix alignment, no views. Graphs are built eagerly;
// backward() walks a topological order once and accumulates into grad
// buffers, so repeated backward calls without zero_grad() accumulate.
//
// Scalar type is a template parameter: float is the training type, double is
// used by the identity/oracle suites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "tiekd/rng.hpp"

namespace tiekd {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

namespace detail {

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

// RAII guard that detaches all ops created in its scope (teacher forwards,
// metric passes).
class NoGradGuard {
  public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
};

template <typename T>
class TensorT {
  public:
    TensorT() = default;

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }

    static TensorT filled(Shape shape, T value, bool requires_grad = false) {
        auto node = std::make_shared<Node<T>>();
        node->data.assign(static_cast<size_t>(shape_numel(shape)), value);
        node->shape = std::move(shape);
        node->requires_grad = requires_grad;
        return TensorT(std::move(node));
    }

    static TensorT from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw std::invalid_argument("Tensor::from_data: shape " + shape_str(shape) + " does not match data length " +
                                        std::to_string(data.size()));
        auto node = std::make_shared<Node<T>>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        node->requires_grad = requires_grad;
        return TensorT(std::move(node));
    }

    static TensorT scalar(T value) { return from_data({1}, {value}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t dim(size_t i) const { return node_->shape[i]; }
    size_t rank() const { return node_->shape.size(); }
    int64_t numel() const { return node_->numel(); }

    std::vector<T>& data() { return node_->data; }
    const std::vector<T>& data() const { return node_->data; }
    const std::vector<T>& grad() const {
        if (node_->grad.empty()) throw std::logic_error("Tensor::grad: no gradient has been accumulated");
        return node_->grad;
    }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_->requires_grad; }

    void set_requires_grad(bool v) { node_->requires_grad = v; }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor has shape " + shape_str(shape()));
        return node_->data[0];
    }

    // A grad-detached copy of the values.
    TensorT detach() const { return from_data(node_->shape, node_->data, false); }

    std::shared_ptr<Node<T>> node() const { return node_; }

  private:
    explicit TensorT(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    template <typename U>
    friend TensorT<U> make_op(Shape shape, std::vector<U> data, std::vector<TensorT<U>> parents,
                              std::function<void(Node<U>&)> backward_fn);

    std::shared_ptr<Node<T>> node_;
};

template <typename T>
TensorT<T> make_op(Shape shape, std::vector<T> data, std::vector<TensorT<T>> parents,
                   std::function<void(Node<T>&)> backward_fn) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    bool needs_grad = false;
    if (grad_enabled()) {
        for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
    }
    node->requires_grad = needs_grad;
    if (needs_grad) {
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node());
        node->backward_fn = std::move(backward_fn);
    }
    return TensorT<T>(std::move(node));
}

// ---------------------------------------------------------------------------
// gemm kernels (row-major, accumulate into c)
// ---------------------------------------------------------------------------

// c (m,n) += a (m,k) * b (k,n)
template <typename T>
void gemm_nn(int64_t m, int64_t n, int64_t k, const T* __restrict a, const T* __restrict b, T* __restrict c) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        int64_t p = 0;
        for (; p + 4 <= k; p += 4) {
            const T a0 = arow[p], a1 = arow[p + 1], a2 = arow[p + 2], a3 = arow[p + 3];
            const T* b0 = b + p * n;
            const T* b1 = b0 + n;
            const T* b2 = b1 + n;
            const T* b3 = b2 + n;
            for (int64_t j = 0; j < n; ++j) crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        for (; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

namespace detail {

// Scratch for operand transposes; per-thread so parallel suite cells do not
// contend.
template <typename T>
std::vector<T>& gemm_scratch() {
    thread_local std::vector<T> scratch;
    return scratch;
}

template <typename T>
void transpose_into(int64_t rows, int64_t cols, const T* __restrict src, T* __restrict dst) {
    // dst (cols, rows) = src (rows, cols)^T
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

}  // namespace detail

// c (m,n) += a (m,k) * b^T, b stored as (n,k). The reduction form does not
// vectorize without reassociation, so transpose b once and reuse the nn
// kernel.
template <typename T>
void gemm_nt(int64_t m, int64_t n, int64_t k, const T* __restrict a, const T* __restrict b, T* __restrict c) {
    auto& scratch = detail::gemm_scratch<T>();
    scratch.resize(static_cast<size_t>(k * n));
    detail::transpose_into(n, k, b, scratch.data());
    gemm_nn(m, n, k, a, scratch.data(), c);
}

// c (m,n) += a^T * b, a stored as (k,m)
template <typename T>
void gemm_tn(int64_t m, int64_t n, int64_t k, const T* __restrict a, const T* __restrict b, T* __restrict c) {
    auto& scratch = detail::gemm_scratch<T>();
    scratch.resize(static_cast<size_t>(m * k));
    detail::transpose_into(k, m, a, scratch.data());
    gemm_nn(m, n, k, scratch.data(), b, c);
}

// ---------------------------------------------------------------------------
// elementwise / structural ops
// ---------------------------------------------------------------------------

namespace detail {

// b broadcasts onto a when b.shape is a suffix of a.shape.
template <typename T>
int64_t suffix_blocks(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sb.size() > sa.size()) shape_error(op, sa, sb);
    for (size_t i = 0; i < sb.size(); ++i) {
        if (sb[sb.size() - 1 - i] != sa[sa.size() - 1 - i]) shape_error(op, sa, sb);
    }
    return b.numel() == 0 ? 0 : a.numel() / b.numel();
}

}  // namespace detail

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    const int64_t blocks = detail::suffix_blocks("add", a, b);
    const int64_t bn = b.numel();
    std::vector<T> out(a.data());
    const T* pb = b.data().data();
    for (int64_t g = 0; g < blocks; ++g) {
        T* po = out.data() + g * bn;
        for (int64_t i = 0; i < bn; ++i) po[i] += pb[i];
    }
    return make_op<T>(a.shape(), std::move(out), {a, b}, [blocks, bn](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pbn = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (int64_t i = 0; i < self.numel(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pbn.requires_grad) {
            pbn.ensure_grad();
            for (int64_t g = 0; g < blocks; ++g) {
                const T* pg = self.grad.data() + g * bn;
                for (int64_t i = 0; i < bn; ++i) pbn.grad[i] += pg[i];
            }
        }
    });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    const int64_t blocks = detail::suffix_blocks("sub", a, b);
    const int64_t bn = b.numel();
    std::vector<T> out(a.data());
    const T* pb = b.data().data();
    for (int64_t g = 0; g < blocks; ++g) {
        T* po = out.data() + g * bn;
        for (int64_t i = 0; i < bn; ++i) po[i] -= pb[i];
    }
    return make_op<T>(a.shape(), std::move(out), {a, b}, [blocks, bn](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pbn = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (int64_t i = 0; i < self.numel(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pbn.requires_grad) {
            pbn.ensure_grad();
            for (int64_t g = 0; g < blocks; ++g) {
                const T* pg = self.grad.data() + g * bn;
                for (int64_t i = 0; i < bn; ++i) pbn.grad[i] -= pg[i];
            }
        }
    });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    const int64_t blocks = detail::suffix_blocks("mul", a, b);
    const int64_t bn = b.numel();
    std::vector<T> out(a.data());
    const T* pb = b.data().data();
    for (int64_t g = 0; g < blocks; ++g) {
        T* po = out.data() + g * bn;
        for (int64_t i = 0; i < bn; ++i) po[i] *= pb[i];
    }
    return make_op<T>(a.shape(), std::move(out), {a, b}, [blocks, bn](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pbn = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (int64_t g = 0; g < blocks; ++g) {
                const T* pg = self.grad.data() + g * bn;
                const T* pbv = pbn.data.data();
                T* pag = pa.grad.data() + g * bn;
                for (int64_t i = 0; i < bn; ++i) pag[i] += pg[i] * pbv[i];
            }
        }
        if (pbn.requires_grad) {
            pbn.ensure_grad();
            for (int64_t g = 0; g < blocks; ++g) {
                const T* pg = self.grad.data() + g * bn;
                const T* pav = pa.data.data() + g * bn;
                for (int64_t i = 0; i < bn; ++i) pbn.grad[i] += pg[i] * pav[i];
            }
        }
    });
}

template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& a, T c) {
    std::vector<T> out(a.data());
    for (auto& v : out) v *= c;
    return make_op<T>(a.shape(), std::move(out), {a}, [c](Node<T>& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) pa.grad[i] += c * self.grad[i];
    });
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T c) {
    std::vector<T> out(a.data());
    for (auto& v : out) v += c;
    return make_op<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) pa.grad[i] += self.grad[i];
    });
}

template <typename T>
TensorT<T> neg(const TensorT<T>& a) {
    return mul_scalar(a, T(-1));
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
    std::vector<T> out(a.data());
    for (auto& v : out) v = v > T(0) ? v : T(0);
    return make_op<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        const T* x = pa.data.data();
        for (int64_t i = 0; i < self.numel(); ++i) {
            if (x[i] > T(0)) pa.grad[i] += self.grad[i];
        }
    });
}

template <typename T>
TensorT<T> log(const TensorT<T>& a) {
    std::vector<T> out(a.data());
    for (auto& v : out) v = std::log(v);
    return make_op<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        const T* x = pa.data.data();
        for (int64_t i = 0; i < self.numel(); ++i) pa.grad[i] += self.grad[i] / x[i];
    });
}

template <typename T>
TensorT<T> exp(const TensorT<T>& a) {
    std::vector<T> out(a.data());
    for (auto& v : out) v = std::exp(v);
    return make_op<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        const T* y = self.data.data();
        for (int64_t i = 0; i < self.numel(); ++i) pa.grad[i] += self.grad[i] * y[i];
    });
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
    return make_op<T>(std::move(shape), a.data(), {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) pa.grad[i] += self.grad[i];
    });
}

namespace detail {

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

template <typename T>
void permute_copy(const Shape& in_shape, const std::vector<int>& perm, const T* in, T* out, bool invert) {
    const size_t r = in_shape.size();

    // Fast paths for the two attention layouts: rank-4 middle-axes swap and
    // rank-4 last-axes swap. Forward: out[out_idx] = in[in_idx]; invert flips
    // the roles for gradient accumulation: out[in_idx] += in[out_idx].
    if (r == 4 && perm == std::vector<int>{0, 2, 1, 3}) {
        const int64_t a = in_shape[0], b = in_shape[1], c = in_shape[2], d = in_shape[3];
        for (int64_t i = 0; i < a; ++i)
            for (int64_t j = 0; j < b; ++j)
                for (int64_t k = 0; k < c; ++k) {
                    const int64_t in_off = ((i * b + j) * c + k) * d;
                    const int64_t out_off = ((i * c + k) * b + j) * d;
                    if (invert)
                        for (int64_t x = 0; x < d; ++x) out[in_off + x] += in[out_off + x];
                    else
                        std::copy_n(in + in_off, d, out + out_off);
                }
        return;
    }
    if (r == 4 && perm == std::vector<int>{0, 1, 3, 2}) {
        const int64_t g = in_shape[0] * in_shape[1], rows = in_shape[2], cols = in_shape[3];
        for (int64_t q = 0; q < g; ++q) {
            const int64_t base = q * rows * cols;
            for (int64_t i = 0; i < rows; ++i)
                for (int64_t j = 0; j < cols; ++j) {
                    const int64_t in_off = base + i * cols + j;
                    const int64_t out_off = base + j * rows + i;
                    if (invert)
                        out[in_off] += in[out_off];
                    else
                        out[out_off] = in[in_off];
                }
        }
        return;
    }

    Shape out_shape(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = in_shape[perm[i]];
    const auto in_strides = row_major_strides(in_shape);
    const int64_t n = shape_numel(in_shape);
    std::vector<int64_t> idx(r, 0);
    for (int64_t flat = 0; flat < n; ++flat) {
        // idx is the multi-index in out coordinates
        int64_t src = 0;
        for (size_t i = 0; i < r; ++i) src += idx[i] * in_strides[perm[i]];
        if (invert)
            out[src] += in[flat];
        else
            out[flat] = in[src];
        for (int i = static_cast<int>(r) - 1; i >= 0; --i) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
}

}  // namespace detail

template <typename T>
TensorT<T> permute(const TensorT<T>& a, std::vector<int> perm) {
    const size_t r = a.rank();
    if (perm.size() != r) throw std::invalid_argument("permute: perm rank " + std::to_string(perm.size()) +
                                                      " does not match tensor shape " + shape_str(a.shape()));
    std::vector<bool> seen(r, false);
    for (int p : perm) {
        if (p < 0 || static_cast<size_t>(p) >= r || seen[p])
            throw std::invalid_argument("permute: invalid permutation for shape " + shape_str(a.shape()));
        seen[p] = true;
    }
    Shape out_shape(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = a.shape()[perm[i]];
    std::vector<T> out(a.data().size());
    detail::permute_copy(a.shape(), perm, a.data().data(), out.data(), false);
    Shape in_shape = a.shape();
    return make_op<T>(std::move(out_shape), std::move(out), {a}, [perm, in_shape](Node<T>& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        detail::permute_copy(in_shape, perm, self.grad.data(), pa.grad.data(), true);
    });
}

// Swap the last two axes.
template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
    std::vector<int> perm(a.rank());
    std::iota(perm.begin(), perm.end(), 0);
    if (a.rank() < 2) throw std::invalid_argument("transpose: needs rank >= 2, got " + shape_str(a.shape()));
    std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
    return permute(a, perm);
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& a) {
    T s = 0;
    for (T v : a.data()) s += v;
    return make_op<T>({1}, {s}, {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        const T g = self.grad[0];
        for (auto& v : pa.grad) v += g;
    });
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& a) {
    return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
TensorT<T> sum_lastdim(const TensorT<T>& a) {
    if (a.rank() < 1) throw std::invalid_argument("sum_lastdim: needs rank >= 1");
    const int64_t v = a.shape().back();
    const int64_t rows = a.numel() / v;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    if (out_shape.empty()) out_shape = {1};
    std::vector<T> out(rows, T(0));
    const T* x = a.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        T s = 0;
        for (int64_t j = 0; j < v; ++j) s += x[r * v + j];
        out[r] = s;
    }
    return make_op<T>(std::move(out_shape), std::move(out), {a}, [rows, v](Node<T>& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const T g = self.grad[r];
            T* pg = pa.grad.data() + r * v;
            for (int64_t j = 0; j < v; ++j) pg[j] += g;
        }
    });
}

template <typename T>
TensorT<T> softmax_lastdim(const TensorT<T>& a) {
    if (a.rank() < 1) throw std::invalid_argument("softmax_lastdim: needs rank >= 1");
    const int64_t v = a.shape().back();
    const int64_t rows = a.numel() / v;
    std::vector<T> out(a.data().size());
    const T* x = a.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = x + r * v;
        T m = row[0];
        for (int64_t j = 1; j < v; ++j) m = std::max(m, row[j]);
        T s = 0;
        T* o = out.data() + r * v;
        for (int64_t j = 0; j < v; ++j) {
            o[j] = std::exp(row[j] - m);
            s += o[j];
        }
        const T inv = T(1) / s;
        for (int64_t j = 0; j < v; ++j) o[j] *= inv;
    }
    return make_op<T>(a.shape(), std::move(out), {a}, [rows, v](Node<T>& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        const T* y = self.data.data();
        const T* g = self.grad.data();
        for (int64_t r = 0; r < rows; ++r) {
            const T* yr = y + r * v;
            const T* gr = g + r * v;
            T dot = 0;
            for (int64_t j = 0; j < v; ++j) dot += gr[j] * yr[j];
            T* pg = pa.grad.data() + r * v;
            for (int64_t j = 0; j < v; ++j) pg[j] += yr[j] * (gr[j] - dot);
        }
    });
}

template <typename T>
TensorT<T> log_softmax_lastdim(const TensorT<T>& a) {
    if (a.rank() < 1) throw std::invalid_argument("log_softmax_lastdim: needs rank >= 1");
    const int64_t v = a.shape().back();
    const int64_t rows = a.numel() / v;
    std::vector<T> out(a.data().size());
    std::vector<T> probs;  // cached for backward; skipped on detached paths
    const bool cache_probs = grad_enabled() && a.requires_grad();
    if (cache_probs) probs.resize(a.data().size());
    const T* x = a.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = x + r * v;
        T m = row[0];
        for (int64_t j = 1; j < v; ++j) m = std::max(m, row[j]);
        T s = 0;
        for (int64_t j = 0; j < v; ++j) s += std::exp(row[j] - m);
        const T lse = m + std::log(s);
        T* o = out.data() + r * v;
        for (int64_t j = 0; j < v; ++j) o[j] = row[j] - lse;
        if (cache_probs) {
            T* p = probs.data() + r * v;
            for (int64_t j = 0; j < v; ++j) p[j] = std::exp(o[j]);
        }
    }
    return make_op<T>(a.shape(), std::move(out), {a}, [rows, v, probs = std::move(probs)](Node<T>& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        const T* g = self.grad.data();
        for (int64_t r = 0; r < rows; ++r) {
            const T* pr = probs.data() + r * v;
            const T* gr = g + r * v;
            T gsum = 0;
            for (int64_t j = 0; j < v; ++j) gsum += gr[j];
            T* pg = pa.grad.data() + r * v;
            for (int64_t j = 0; j < v; ++j) pg[j] += gr[j] - pr[j] * gsum;
        }
    });
}

// Layer normalization over the last axis: y = (x - mu) / sqrt(var + eps) * gain + bias.
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias, T eps) {
    const int64_t d = x.shape().back();
    if (gain.numel() != d || bias.numel() != d) shape_error("layer_norm", x.shape(), gain.shape());
    const int64_t rows = x.numel() / d;
    std::vector<T> out(x.data().size());
    std::vector<T> xhat(x.data().size());
    std::vector<T> inv_sigma(rows);
    const T* px = x.data().data();
    const T* pg = gain.data().data();
    const T* pb = bias.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = px + r * d;
        T mu = 0;
        for (int64_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<T>(d);
        T var = 0;
        for (int64_t j = 0; j < d; ++j) {
            const T c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_sigma[r] = inv;
        T* xh = xhat.data() + r * d;
        T* o = out.data() + r * d;
        for (int64_t j = 0; j < d; ++j) {
            xh[j] = (row[j] - mu) * inv;
            o[j] = xh[j] * pg[j] + pb[j];
        }
    }
    return make_op<T>(x.shape(), std::move(out), {x, gain, bias},
                      [rows, d, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](Node<T>& self) {
                          auto& px_ = *self.parents[0];
                          auto& pg_ = *self.parents[1];
                          auto& pb_ = *self.parents[2];
                          const T* g = self.grad.data();
                          if (pg_.requires_grad) {
                              pg_.ensure_grad();
                              for (int64_t r = 0; r < rows; ++r)
                                  for (int64_t j = 0; j < d; ++j) pg_.grad[j] += g[r * d + j] * xhat[r * d + j];
                          }
                          if (pb_.requires_grad) {
                              pb_.ensure_grad();
                              for (int64_t r = 0; r < rows; ++r)
                                  for (int64_t j = 0; j < d; ++j) pb_.grad[j] += g[r * d + j];
                          }
                          if (px_.requires_grad) {
                              px_.ensure_grad();
                              const T* gamma = pg_.data.data();
                              for (int64_t r = 0; r < rows; ++r) {
                                  const T* gr = g + r * d;
                                  const T* xh = xhat.data() + r * d;
                                  T mean_dxhat = 0, mean_dxhat_xhat = 0;
                                  for (int64_t j = 0; j < d; ++j) {
                                      const T dxh = gr[j] * gamma[j];
                                      mean_dxhat += dxh;
                                      mean_dxhat_xhat += dxh * xh[j];
                                  }
                                  mean_dxhat /= static_cast<T>(d);
                                  mean_dxhat_xhat /= static_cast<T>(d);
                                  T* pxg = px_.grad.data() + r * d;
                                  for (int64_t j = 0; j < d; ++j) {
                                      const T dxh = gr[j] * gamma[j];
                                      pxg[j] += inv_sigma[r] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                                  }
                              }
                          }
                      });
}

// Rows of a (vocab, dim) table selected by token ids; out shape = ids_shape + {dim}.
template <typename T>
TensorT<T> embedding(const TensorT<T>& table, const std::vector<int>& ids, Shape ids_shape) {
    if (table.rank() != 2) throw std::invalid_argument("embedding: table must be rank 2, got " + shape_str(table.shape()));
    if (shape_numel(ids_shape) != static_cast<int64_t>(ids.size()))
        throw std::invalid_argument("embedding: ids shape " + shape_str(ids_shape) + " does not match id count " +
                                    std::to_string(ids.size()));
    const int64_t v = table.dim(0), d = table.dim(1);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= v)
            throw std::out_of_range("embedding: token id " + std::to_string(ids[i]) + " out of range [0," +
                                    std::to_string(v) + ") at position " + std::to_string(i));
    }
    Shape out_shape = ids_shape;
    out_shape.push_back(d);
    std::vector<T> out(ids.size() * static_cast<size_t>(d));
    const T* tb = table.data().data();
    for (size_t i = 0; i < ids.size(); ++i) std::copy_n(tb + static_cast<int64_t>(ids[i]) * d, d, out.data() + i * d);
    return make_op<T>(std::move(out_shape), std::move(out), {table}, [ids, d](Node<T>& self) {
        auto& pt = *self.parents[0];
        if (!pt.requires_grad) return;
        pt.ensure_grad();
        const T* g = self.grad.data();
        for (size_t i = 0; i < ids.size(); ++i) {
            T* row = pt.grad.data() + static_cast<int64_t>(ids[i]) * d;
            const T* gr = g + i * d;
            for (int64_t j = 0; j < d; ++j) row[j] += gr[j];
        }
    });
}

// Select one entry of the last axis per leading index; out shape = a.shape minus last dim.
template <typename T>
TensorT<T> gather_lastdim(const TensorT<T>& a, const std::vector<int>& ids) {
    const int64_t v = a.shape().back();
    const int64_t rows = a.numel() / v;
    if (static_cast<int64_t>(ids.size()) != rows)
        throw std::invalid_argument("gather_lastdim: expected " + std::to_string(rows) + " indices for shape " +
                                    shape_str(a.shape()) + ", got " + std::to_string(ids.size()));
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= v)
            throw std::out_of_range("gather_lastdim: index " + std::to_string(ids[i]) + " out of range [0," +
                                    std::to_string(v) + ") at row " + std::to_string(i));
    }
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    if (out_shape.empty()) out_shape = {1};
    std::vector<T> out(rows);
    const T* x = a.data().data();
    for (int64_t r = 0; r < rows; ++r) out[r] = x[r * v + ids[r]];
    return make_op<T>(std::move(out_shape), std::move(out), {a}, [ids, v, rows](Node<T>& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) pa.grad[r * v + ids[r]] += self.grad[r];
    });
}

// matmul: (m,k)x(k,n), or batched with matching leading dims; a rank-2 rhs is
// shared across the batch.
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) shape_error("matmul", sa, sb);
    const int64_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
    const int64_t kb = sb[sb.size() - 2], n = sb[sb.size() - 1];
    if (k != kb) shape_error("matmul", sa, sb);

    int64_t groups = 1;
    bool shared_b = false;
    Shape out_shape;
    if (sb.size() == 2) {
        shared_b = true;
        out_shape = sa;
        out_shape[out_shape.size() - 1] = n;
        groups = a.numel() / (m * k);
    } else {
        if (sa.size() != sb.size()) shape_error("matmul", sa, sb);
        for (size_t i = 0; i + 2 < sa.size(); ++i) {
            if (sa[i] != sb[i]) shape_error("matmul", sa, sb);
            groups *= sa[i];
        }
        out_shape = sa;
        out_shape[out_shape.size() - 1] = n;
    }

    std::vector<T> out(static_cast<size_t>(groups * m * n), T(0));
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    if (shared_b) {
        gemm_nn(groups * m, n, k, pa, pb, out.data());
    } else {
        for (int64_t g = 0; g < groups; ++g)
            gemm_nn(m, n, k, pa + g * m * k, pb + g * k * n, out.data() + g * m * n);
    }
    return make_op<T>(std::move(out_shape), std::move(out), {a, b}, [groups, m, n, k, shared_b](Node<T>& self) {
        auto& na = *self.parents[0];
        auto& nb = *self.parents[1];
        const T* g = self.grad.data();
        if (na.requires_grad) {
            na.ensure_grad();
            if (shared_b) {
                gemm_nt(groups * m, k, n, g, nb.data.data(), na.grad.data());
            } else {
                for (int64_t q = 0; q < groups; ++q)
                    gemm_nt(m, k, n, g + q * m * n, nb.data.data() + q * k * n, na.grad.data() + q * m * k);
            }
        }
        if (nb.requires_grad) {
            nb.ensure_grad();
            if (shared_b) {
                gemm_tn(k, n, groups * m, na.data.data(), g, nb.grad.data());
            } else {
                for (int64_t q = 0; q < groups; ++q)
                    gemm_tn(k, n, m, na.data.data() + q * m * k, g + q * m * n, nb.grad.data() + q * k * n);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename T>
void backward(const TensorT<T>& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: root must be scalar, got shape " + shape_str(loss.shape()));
    auto root = loss.node();
    if (!root->requires_grad) return;

    // Iterative post-order DFS; each node visited exactly once.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (!visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior grads are traversal temporaries; only leaf (parameter/input)
    // grads accumulate across repeated backward calls.
    for (Node<T>* node : order) {
        if (!node->parents.empty() && !node->grad.empty()) std::fill(node->grad.begin(), node->grad.end(), T(0));
    }
    root->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    int64_t worst_index = -1;
    bool all_finite = true;
    int64_t nonfinite_index = -1;
};

// Central-difference check of a scalar function around `point`. Step per
// coordinate is h_base * max(1, |x_i|); error is
// |analytic - central| / max(1, |central|), maximized over coordinates.
template <typename T, typename F>
GradCheckReport grad_check(F&& f, const TensorT<T>& point, T h_base) {
    TensorT<T> x = TensorT<T>::from_data(point.shape(), point.data(), true);
    TensorT<T> loss = f(x);
    if (loss.numel() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
    backward(loss);
    std::vector<T> analytic = x.has_grad() ? x.grad() : std::vector<T>(x.data().size(), T(0));

    GradCheckReport report;
    std::vector<T> base = point.data();
    for (size_t i = 0; i < base.size(); ++i) {
        const T h = h_base * std::max(T(1), std::abs(base[i]));
        T fp, fm;
        {
            NoGradGuard ng;
            std::vector<T> d = base;
            d[i] += h;
            fp = f(TensorT<T>::from_data(point.shape(), d)).item();
            d[i] = base[i] - h;
            fm = f(TensorT<T>::from_data(point.shape(), d)).item();
        }
        const double central = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * static_cast<double>(h));
        const double err =
            std::abs(static_cast<double>(analytic[i]) - central) / std::max(1.0, std::abs(central));
        if (!std::isfinite(err) || !std::isfinite(central) || !std::isfinite(static_cast<double>(analytic[i]))) {
            report.all_finite = false;
            if (report.nonfinite_index < 0) report.nonfinite_index = static_cast<int64_t>(i);
            continue;
        }
        if (err > report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_index = static_cast<int64_t>(i);
        }
    }
    return report;
}

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

}  // namespace tiekd
