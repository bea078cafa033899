#pragma once

// Dense double-precision tensors with reverse-mode differentiation.
// Every op materializes a contiguous row-major result and records a
// backward closure; backward() replays the tape in reverse creation
// order, accumulating gradients additively across uses.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace vbb {

using Shape = std::vector<int64_t>;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct DeterminismError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

// ---------------------------------------------------------------------------
// Multiply-add counter. Bumped by matmul and depthwise conv; thread_local so
// concurrent units count independently.

inline uint64_t& madd_counter() {
    thread_local uint64_t count = 0;
    return count;
}
inline void reset_madds() { madd_counter() = 0; }
inline uint64_t madds() { return madd_counter(); }

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// distributions are not, so uniform/normal are spelled out here.

inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}
inline uint64_t mix64(uint64_t a, uint64_t b) { return mix64(a ^ mix64(b)); }
inline uint64_t mix64(uint64_t a, uint64_t b, uint64_t c) { return mix64(mix64(a, b), c); }

class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    // uniform in [0,1), 53-bit resolution
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal(double mean = 0.0, double stddev = 1.0) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + stddev * spare_;
        }
        double u1 = 0.0, u2 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        constexpr double two_pi = 6.283185307179586476925287;
        double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(two_pi * u2);
        have_spare_ = true;
        return mean + stddev * r * std::cos(two_pi * u2);
    }

    // integer in [0, n)
    int64_t below(int64_t n) { return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n; }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Tensor

struct TensorNode;

class Tensor {
public:
    Tensor() = default;

    const Shape& shape() const;
    int64_t numel() const;
    int64_t dim(int i) const;
    int rank() const;
    bool defined() const { return static_cast<bool>(node_); }
    bool requires_grad() const;

    std::vector<double>& data();
    const std::vector<double>& data() const;
    std::vector<double>& grad();                // allocates zeros on first access
    const std::vector<double>& grad() const;    // may be empty if never touched

    double item() const;
    double at(std::initializer_list<int64_t> idx) const;

    TensorNode* node() const { return node_.get(); }

    static Tensor make(Shape shape, std::vector<double> data, bool requires_grad = false);

private:
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
    std::shared_ptr<TensorNode> node_;
    friend struct TensorNode;
    friend Tensor wrap_node(std::shared_ptr<TensorNode> n);
};

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until needed; same length as data when set
    bool requires_grad = false;
    uint64_t id = 0;
    std::vector<Tensor> parents;
    std::function<void(TensorNode&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }

    static uint64_t next_id() {
        static std::atomic<uint64_t> counter{1};
        return counter.fetch_add(1, std::memory_order_relaxed);
    }
};

inline Tensor wrap_node(std::shared_ptr<TensorNode> n) { return Tensor(std::move(n)); }

inline Tensor Tensor::make(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("tensor: shape " + shape_str(shape) + " does not match data length " +
                         std::to_string(data.size()));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    n->id = TensorNode::next_id();
    return wrap_node(std::move(n));
}

inline const Shape& Tensor::shape() const { return node_->shape; }
inline int64_t Tensor::numel() const { return node_->numel(); }
inline int Tensor::rank() const { return static_cast<int>(node_->shape.size()); }
inline int64_t Tensor::dim(int i) const {
    if (i < 0) i += rank();
    return node_->shape[i];
}
inline bool Tensor::requires_grad() const { return node_->requires_grad; }
inline std::vector<double>& Tensor::data() { return node_->data; }
inline const std::vector<double>& Tensor::data() const { return node_->data; }
inline std::vector<double>& Tensor::grad() {
    node_->ensure_grad();
    return node_->grad;
}
inline const std::vector<double>& Tensor::grad() const { return node_->grad; }
inline double Tensor::item() const {
    if (numel() != 1) throw ContractError("item(): tensor has " + std::to_string(numel()) + " elements");
    return node_->data[0];
}
inline double Tensor::at(std::initializer_list<int64_t> idx) const {
    const Shape& s = node_->shape;
    if (idx.size() != s.size()) throw ShapeError("at(): index rank mismatch for " + shape_str(s));
    auto st = row_major_strides(s);
    int64_t off = 0;
    int i = 0;
    for (int64_t v : idx) off += v * st[i++];
    return node_->data[off];
}

// factories ------------------------------------------------------------------

inline Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> d(static_cast<size_t>(shape_numel(shape)), 0.0);
    return Tensor::make(std::move(shape), std::move(d), requires_grad);
}

inline Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> d(static_cast<size_t>(shape_numel(shape)), value);
    return Tensor::make(std::move(shape), std::move(d), requires_grad);
}

inline Tensor scalar(double value, bool requires_grad = false) {
    return Tensor::make({1}, {value}, requires_grad);
}

inline Tensor uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                      bool requires_grad = false) {
    std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
    for (double& v : d) v = rng.uniform(lo, hi);
    return Tensor::make(std::move(shape), std::move(d), requires_grad);
}

inline Tensor normal(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0,
                     bool requires_grad = false) {
    std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
    for (double& v : d) v = rng.normal(mean, stddev);
    return Tensor::make(std::move(shape), std::move(d), requires_grad);
}

inline bool all_finite(const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

namespace detail {

inline Tensor op_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                        std::function<void(TensorNode&)> backward_fn) {
    bool rg = false;
    for (const Tensor& p : parents) rg = rg || p.requires_grad();
    Tensor out = Tensor::make(std::move(shape), std::move(data), rg);
    if (rg) {
        out.node()->parents = std::move(parents);
        out.node()->backward_fn = std::move(backward_fn);
    }
    return out;
}

// numpy-style broadcast of two shapes
inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* opname) {
    size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (size_t i = 0; i < r; ++i) {
        int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(opname) + ": shapes " + shape_str(a) + " and " +
                             shape_str(b) + " are not broadcastable");
        out[i] = std::max(da, db);
    }
    return out;
}

// strides of `shape` expanded to `out` with 0 on broadcast dims
inline std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
    auto st = row_major_strides(shape);
    std::vector<int64_t> r(out.size(), 0);
    size_t off = out.size() - shape.size();
    for (size_t i = 0; i < shape.size(); ++i) r[off + i] = shape[i] == 1 ? 0 : st[i];
    return r;
}

// walks the flat output index space mapping to (possibly broadcast) operands
template <typename F>
inline void for_each_broadcast(const Shape& out, const std::vector<int64_t>& sa,
                               const std::vector<int64_t>& sb, F&& f) {
    int64_t n = shape_numel(out);
    size_t r = out.size();
    std::vector<int64_t> idx(r, 0);
    int64_t oa = 0, ob = 0;
    for (int64_t flat = 0; flat < n; ++flat) {
        f(flat, oa, ob);
        for (int i = static_cast<int>(r) - 1; i >= 0; --i) {
            idx[i]++;
            oa += sa[i];
            ob += sb[i];
            if (idx[i] < out[i]) break;
            oa -= sa[i] * out[i];
            ob -= sb[i] * out[i];
            idx[i] = 0;
        }
    }
}

}  // namespace detail

// elementwise -----------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    Shape out_shape = detail::broadcast_shapes(a.shape(), b.shape(), "add");
    auto sa = detail::broadcast_strides(a.shape(), out_shape);
    auto sb = detail::broadcast_strides(b.shape(), out_shape);
    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    const auto& da = a.data();
    const auto& db = b.data();
    detail::for_each_broadcast(out_shape, sa, sb,
                               [&](int64_t o, int64_t ia, int64_t ib) { out[o] = da[ia] + db[ib]; });
    TensorNode* na = a.node();
    TensorNode* nb = b.node();
    return detail::op_result(
        out_shape, std::move(out), {a, b},
        [na, nb, out_shape, sa, sb](TensorNode& self) {
            if (na->requires_grad) na->ensure_grad();
            if (nb->requires_grad) nb->ensure_grad();
            detail::for_each_broadcast(out_shape, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
                double g = self.grad[o];
                if (na->requires_grad) na->grad[ia] += g;
                if (nb->requires_grad) nb->grad[ib] += g;
            });
        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    Shape out_shape = detail::broadcast_shapes(a.shape(), b.shape(), "mul");
    auto sa = detail::broadcast_strides(a.shape(), out_shape);
    auto sb = detail::broadcast_strides(b.shape(), out_shape);
    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    const auto& da = a.data();
    const auto& db = b.data();
    detail::for_each_broadcast(out_shape, sa, sb,
                               [&](int64_t o, int64_t ia, int64_t ib) { out[o] = da[ia] * db[ib]; });
    TensorNode* na = a.node();
    TensorNode* nb = b.node();
    return detail::op_result(
        out_shape, std::move(out), {a, b},
        [na, nb, out_shape, sa, sb](TensorNode& self) {
            if (na->requires_grad) na->ensure_grad();
            if (nb->requires_grad) nb->ensure_grad();
            detail::for_each_broadcast(out_shape, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
                double g = self.grad[o];
                if (na->requires_grad) na->grad[ia] += g * nb->data[ib];
                if (nb->requires_grad) nb->grad[ib] += g * na->data[ia];
            });
        });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.data());
    for (double& v : out) v *= s;
    TensorNode* na = a.node();
    return detail::op_result(a.shape(), std::move(out), {a}, [na, s](TensorNode& self) {
        na->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) na->grad[i] += s * self.grad[i];
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// matmul -----------------------------------------------------------------------

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
inline void mm_accum(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            double aip = arow[p];
            const double* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

inline std::vector<double> transpose2d(const double* src, int64_t rows, int64_t cols) {
    std::vector<double> t(static_cast<size_t>(rows * cols));
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) t[j * rows + i] = src[i * cols + j];
    return t;
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    int64_t m = a.dim(-2), k = a.dim(-1);
    int64_t kb = b.dim(-2), n = b.dim(-1);
    if (k != kb)
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    Shape batch = detail::broadcast_shapes(batch_a, batch_b, "matmul");
    auto sa = detail::broadcast_strides(batch_a, batch);
    auto sb = detail::broadcast_strides(batch_b, batch);
    // batch strides above index matrices, not elements
    int64_t nbatch = shape_numel(batch);
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);

    std::vector<double> out(static_cast<size_t>(nbatch * m * n), 0.0);
    const double* da = a.data().data();
    const double* db = b.data().data();
    // compute per-batch element offsets by walking the broadcast space
    std::vector<int64_t> offs_a(static_cast<size_t>(nbatch)), offs_b(static_cast<size_t>(nbatch));
    detail::for_each_broadcast(batch, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
        offs_a[o] = ia;
        offs_b[o] = ib;
    });
    for (int64_t bi = 0; bi < nbatch; ++bi)
        detail::mm_accum(da + offs_a[bi] * m * k, db + offs_b[bi] * k * n, out.data() + bi * m * n,
                         m, k, n);
    madd_counter() += static_cast<uint64_t>(nbatch) * m * k * n;

    TensorNode* na = a.node();
    TensorNode* nb = b.node();
    return detail::op_result(
        out_shape, std::move(out), {a, b},
        [na, nb, offs_a, offs_b, nbatch, m, k, n](TensorNode& self) {
            if (na->requires_grad) na->ensure_grad();
            if (nb->requires_grad) nb->ensure_grad();
            for (int64_t bi = 0; bi < nbatch; ++bi) {
                const double* g = self.grad.data() + bi * m * n;
                const double* pa = na->data.data() + offs_a[bi] * m * k;
                const double* pb = nb->data.data() + offs_b[bi] * k * n;
                if (na->requires_grad) {
                    // dA += dC * B^T
                    auto bt = detail::transpose2d(pb, k, n);
                    detail::mm_accum(g, bt.data(), na->grad.data() + offs_a[bi] * m * k, m, n, k);
                }
                if (nb->requires_grad) {
                    // dB += A^T * dC
                    auto at = detail::transpose2d(pa, m, k);
                    detail::mm_accum(at.data(), g, nb->grad.data() + offs_b[bi] * k * n, k, m, n);
                }
            }
        });
}

// shape ops --------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    TensorNode* na = a.node();
    return detail::op_result(std::move(shape), a.data(), {a}, [na](TensorNode& self) {
        na->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) na->grad[i] += self.grad[i];
    });
}

inline Tensor transpose_last_two(const Tensor& a) {
    if (a.rank() < 2)
        throw ShapeError("transpose_last_two: rank must be >= 2, got " + shape_str(a.shape()));
    int64_t m = a.dim(-2), n = a.dim(-1);
    int64_t nbatch = a.numel() / (m * n);
    Shape out_shape = a.shape();
    std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
    std::vector<double> out(a.data().size());
    const double* src = a.data().data();
    for (int64_t b = 0; b < nbatch; ++b)
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = src[b * m * n + i * n + j];
    TensorNode* na = a.node();
    return detail::op_result(out_shape, std::move(out), {a}, [na, nbatch, m, n](TensorNode& self) {
        na->ensure_grad();
        for (int64_t b = 0; b < nbatch; ++b)
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j)
                    na->grad[b * m * n + i * n + j] += self.grad[b * m * n + j * m + i];
    });
}

// gather along `dim` with one shared index vector
inline Tensor index_select(const Tensor& a, int dim, const std::vector<int64_t>& idx) {
    if (dim < 0) dim += a.rank();
    if (dim < 0 || dim >= a.rank())
        throw ShapeError("index_select: dim out of range for " + shape_str(a.shape()));
    int64_t dsize = a.shape()[dim];
    for (int64_t v : idx)
        if (v < 0 || v >= dsize)
            throw ShapeError("index_select: index " + std::to_string(v) + " out of range [0," +
                             std::to_string(dsize) + ")");
    Shape out_shape = a.shape();
    out_shape[dim] = static_cast<int64_t>(idx.size());
    int64_t inner = 1;
    for (int i = dim + 1; i < a.rank(); ++i) inner *= a.shape()[i];
    int64_t outer = a.numel() / (inner * dsize);
    std::vector<double> out(static_cast<size_t>(outer * static_cast<int64_t>(idx.size()) * inner));
    const double* src = a.data().data();
    for (int64_t o = 0; o < outer; ++o)
        for (size_t i = 0; i < idx.size(); ++i)
            std::memcpy(out.data() + (o * static_cast<int64_t>(idx.size()) + static_cast<int64_t>(i)) * inner,
                        src + (o * dsize + idx[i]) * inner, sizeof(double) * inner);
    TensorNode* na = a.node();
    return detail::op_result(out_shape, std::move(out), {a},
                             [na, idx, outer, inner, dsize](TensorNode& self) {
                                 na->ensure_grad();
                                 for (int64_t o = 0; o < outer; ++o)
                                     for (size_t i = 0; i < idx.size(); ++i) {
                                         const double* g =
                                             self.grad.data() +
                                             (o * static_cast<int64_t>(idx.size()) + static_cast<int64_t>(i)) * inner;
                                         double* dst = na->grad.data() + (o * dsize + idx[i]) * inner;
                                         for (int64_t j = 0; j < inner; ++j) dst[j] += g[j];
                                     }
                             });
}

// contiguous range along `dim`
inline Tensor narrow(const Tensor& a, int dim, int64_t start, int64_t len) {
    std::vector<int64_t> idx(static_cast<size_t>(len));
    std::iota(idx.begin(), idx.end(), start);
    return index_select(a, dim, idx);
}

// per-sequence gather: out[b,i,:] = x[b, idx[b][i], :]
inline Tensor gather_tokens(const Tensor& x, const std::vector<std::vector<int64_t>>& idx) {
    if (x.rank() != 3) throw ShapeError("gather_tokens: expected [B,L,C], got " + shape_str(x.shape()));
    int64_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    if (static_cast<int64_t>(idx.size()) != B)
        throw ShapeError("gather_tokens: batch index count " + std::to_string(idx.size()) +
                         " does not match batch size " + std::to_string(B));
    int64_t Lout = static_cast<int64_t>(idx[0].size());
    for (const auto& row : idx) {
        if (static_cast<int64_t>(row.size()) != Lout)
            throw ShapeError("gather_tokens: ragged index rows");
        for (int64_t v : row)
            if (v < 0 || v >= L) throw ShapeError("gather_tokens: index out of range");
    }
    std::vector<double> out(static_cast<size_t>(B * Lout * C));
    const double* src = x.data().data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < Lout; ++i)
            std::memcpy(out.data() + (b * Lout + i) * C, src + (b * L + idx[b][i]) * C,
                        sizeof(double) * C);
    TensorNode* nx = x.node();
    return detail::op_result({B, Lout, C}, std::move(out), {x}, [nx, idx, B, L, Lout, C](TensorNode& self) {
        nx->ensure_grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < Lout; ++i) {
                const double* g = self.grad.data() + (b * Lout + i) * C;
                double* dst = nx->grad.data() + (b * L + idx[b][i]) * C;
                for (int64_t c = 0; c < C; ++c) dst[c] += g[c];
            }
    });
}

inline Tensor concat(const std::vector<Tensor>& parts, int dim) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    int rank = parts[0].rank();
    if (dim < 0) dim += rank;
    Shape out_shape = parts[0].shape();
    int64_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < rank; ++i)
            if (i != dim && p.shape()[i] != out_shape[i])
                throw ShapeError("concat: shape mismatch at dim " + std::to_string(i) + ": " +
                                 shape_str(p.shape()) + " vs " + shape_str(out_shape));
        total += p.shape()[dim];
    }
    out_shape[dim] = total;
    int64_t inner = 1;
    for (int i = dim + 1; i < rank; ++i) inner *= out_shape[i];
    int64_t outer = shape_numel(out_shape) / (inner * total);
    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    int64_t off = 0;
    std::vector<int64_t> offsets;
    std::vector<int64_t> widths;
    for (const Tensor& p : parts) {
        int64_t w = p.shape()[dim];
        offsets.push_back(off);
        widths.push_back(w);
        const double* src = p.data().data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * total + off) * inner, src + o * w * inner,
                        sizeof(double) * w * inner);
        off += w;
    }
    std::vector<TensorNode*> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.node());
    return detail::op_result(out_shape, std::move(out), parts,
                             [nodes, offsets, widths, outer, inner, total](TensorNode& self) {
                                 for (size_t pi = 0; pi < nodes.size(); ++pi) {
                                     TensorNode* np = nodes[pi];
                                     if (!np->requires_grad) continue;
                                     np->ensure_grad();
                                     int64_t w = widths[pi], off = offsets[pi];
                                     for (int64_t o = 0; o < outer; ++o) {
                                         const double* g = self.grad.data() + (o * total + off) * inner;
                                         double* dst = np->grad.data() + o * w * inner;
                                         for (int64_t j = 0; j < w * inner; ++j) dst[j] += g[j];
                                     }
                                 }
                             });
}

// reductions & activations -------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    TensorNode* na = a.node();
    return detail::op_result({1}, {s}, {a}, [na](TensorNode& self) {
        na->ensure_grad();
        double g = self.grad[0];
        for (double& v : na->grad) v += g;
    });
}

inline Tensor mean_all(const Tensor& a) {
    double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.data()) s += v;
    s *= inv;
    TensorNode* na = a.node();
    return detail::op_result({1}, {s}, {a}, [na, inv](TensorNode& self) {
        na->ensure_grad();
        double g = self.grad[0] * inv;
        for (double& v : na->grad) v += g;
    });
}

namespace detail {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace detail

inline Tensor gelu(const Tensor& a) {
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        double x = a.data()[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * detail::kInvSqrt2));
    }
    TensorNode* na = a.node();
    return detail::op_result(a.shape(), std::move(out), {a}, [na](TensorNode& self) {
        na->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            double x = na->data[i];
            double cdf = 0.5 * (1.0 + std::erf(x * detail::kInvSqrt2));
            double pdf = detail::kInvSqrt2Pi * std::exp(-0.5 * x * x);
            na->grad[i] += self.grad[i] * (cdf + x * pdf);
        }
    });
}

// softmax over the last dimension, max-subtracted for stability
inline Tensor softmax_lastdim(const Tensor& a) {
    if (a.rank() < 1 || a.dim(-1) < 1)
        throw ShapeError("softmax_lastdim: empty last dimension in " + shape_str(a.shape()));
    int64_t n = a.dim(-1);
    int64_t rows = a.numel() / n;
    std::vector<double> out(a.data().size());
    const double* src = a.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = src + r * n;
        double* y = out.data() + r * n;
        double m = x[0];
        for (int64_t j = 1; j < n; ++j) m = std::max(m, x[j]);
        double s = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - m);
            s += y[j];
        }
        double inv = 1.0 / s;
        for (int64_t j = 0; j < n; ++j) y[j] *= inv;
    }
    TensorNode* na = a.node();
    Shape shape = a.shape();
    return detail::op_result(shape, std::move(out), {a}, [na, rows, n](TensorNode& self) {
        na->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const double* y = self.data.data() + r * n;
            const double* g = self.grad.data() + r * n;
            double dot = 0.0;
            for (int64_t j = 0; j < n; ++j) dot += g[j] * y[j];
            double* dst = na->grad.data() + r * n;
            for (int64_t j = 0; j < n; ++j) dst[j] += y[j] * (g[j] - dot);
        }
    });
}

// layer norm over the last (channel) dimension with affine parameters
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    int64_t c = x.dim(-1);
    if (gamma.numel() != c || beta.numel() != c)
        throw ShapeError("layer_norm: affine params must have " + std::to_string(c) +
                         " entries, got " + shape_str(gamma.shape()) + " / " + shape_str(beta.shape()));
    int64_t rows = x.numel() / c;
    std::vector<double> out(x.data().size());
    std::vector<double> mean(static_cast<size_t>(rows)), inv_std(static_cast<size_t>(rows));
    const double* src = x.data().data();
    const double* g = gamma.data().data();
    const double* b = beta.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = src + r * c;
        double m = 0.0;
        for (int64_t j = 0; j < c; ++j) m += xr[j];
        m /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double d = xr[j] - m;
            var += d * d;
        }
        var /= static_cast<double>(c);
        double is = 1.0 / std::sqrt(var + eps);
        mean[r] = m;
        inv_std[r] = is;
        double* y = out.data() + r * c;
        for (int64_t j = 0; j < c; ++j) y[j] = (xr[j] - m) * is * g[j] + b[j];
    }
    TensorNode* nx = x.node();
    TensorNode* ng = gamma.node();
    TensorNode* nb = beta.node();
    return detail::op_result(
        x.shape(), std::move(out), {x, gamma, beta},
        [nx, ng, nb, rows, c, mean, inv_std](TensorNode& self) {
            if (nx->requires_grad) nx->ensure_grad();
            if (ng->requires_grad) ng->ensure_grad();
            if (nb->requires_grad) nb->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double* xr = nx->data.data() + r * c;
                const double* gy = self.grad.data() + r * c;
                double m = mean[r], is = inv_std[r];
                // dgamma / dbeta
                if (ng->requires_grad || nb->requires_grad) {
                    for (int64_t j = 0; j < c; ++j) {
                        double xh = (xr[j] - m) * is;
                        if (ng->requires_grad) ng->grad[j] += gy[j] * xh;
                        if (nb->requires_grad) nb->grad[j] += gy[j];
                    }
                }
                if (nx->requires_grad) {
                    // dx = is * (gg - mean(gg) - xh * mean(gg * xh)), gg = gy * gamma
                    double s1 = 0.0, s2 = 0.0;
                    for (int64_t j = 0; j < c; ++j) {
                        double gg = gy[j] * ng->data[j];
                        double xh = (xr[j] - m) * is;
                        s1 += gg;
                        s2 += gg * xh;
                    }
                    s1 /= static_cast<double>(c);
                    s2 /= static_cast<double>(c);
                    for (int64_t j = 0; j < c; ++j) {
                        double gg = gy[j] * ng->data[j];
                        double xh = (xr[j] - m) * is;
                        nx->grad[r * c + j] += is * (gg - s1 - xh * s2);
                    }
                }
            }
        });
}

// mean over pool-sized token groups; a trailing partial group averages its members
inline Tensor avg_pool_tokens(const Tensor& x, int64_t pool) {
    if (pool <= 0) throw ConfigError("avg_pool_tokens: pool must be positive, got " + std::to_string(pool));
    if (x.rank() != 3) throw ShapeError("avg_pool_tokens: expected [B,L,C], got " + shape_str(x.shape()));
    int64_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    int64_t Lout = (L + pool - 1) / pool;
    std::vector<double> out(static_cast<size_t>(B * Lout * C), 0.0);
    const double* src = x.data().data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t g = 0; g < Lout; ++g) {
            int64_t start = g * pool;
            int64_t count = std::min(pool, L - start);
            double inv = 1.0 / static_cast<double>(count);
            double* dst = out.data() + (b * Lout + g) * C;
            for (int64_t t = start; t < start + count; ++t) {
                const double* row = src + (b * L + t) * C;
                for (int64_t c = 0; c < C; ++c) dst[c] += row[c];
            }
            for (int64_t c = 0; c < C; ++c) dst[c] *= inv;
        }
    TensorNode* nx = x.node();
    return detail::op_result({B, Lout, C}, std::move(out), {x}, [nx, B, L, C, Lout, pool](TensorNode& self) {
        nx->ensure_grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t g = 0; g < Lout; ++g) {
                int64_t start = g * pool;
                int64_t count = std::min(pool, L - start);
                double inv = 1.0 / static_cast<double>(count);
                const double* gy = self.grad.data() + (b * Lout + g) * C;
                for (int64_t t = start; t < start + count; ++t) {
                    double* dst = nx->grad.data() + (b * L + t) * C;
                    for (int64_t c = 0; c < C; ++c) dst[c] += gy[c] * inv;
                }
            }
    });
}

// mean negative log-likelihood against integer labels, stable log-sum-exp
inline Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int64_t>& labels) {
    if (logits.rank() != 2)
        throw ShapeError("cross_entropy_with_logits: expected [B,K], got " + shape_str(logits.shape()));
    int64_t B = logits.dim(0), K = logits.dim(1);
    if (static_cast<int64_t>(labels.size()) != B)
        throw ShapeError("cross_entropy_with_logits: " + std::to_string(labels.size()) +
                         " labels for batch " + std::to_string(B));
    for (int64_t l : labels)
        if (l < 0 || l >= K) throw ContractError("cross_entropy_with_logits: label out of range");
    const double* src = logits.data().data();
    double loss = 0.0;
    for (int64_t b = 0; b < B; ++b) {
        const double* x = src + b * K;
        double m = x[0];
        for (int64_t j = 1; j < K; ++j) m = std::max(m, x[j]);
        double s = 0.0;
        for (int64_t j = 0; j < K; ++j) s += std::exp(x[j] - m);
        loss += m + std::log(s) - x[labels[b]];
    }
    loss /= static_cast<double>(B);
    TensorNode* nl = logits.node();
    return detail::op_result({1}, {loss}, {logits}, [nl, labels, B, K](TensorNode& self) {
        nl->ensure_grad();
        double g = self.grad[0] / static_cast<double>(B);
        for (int64_t b = 0; b < B; ++b) {
            const double* x = nl->data.data() + b * K;
            double m = x[0];
            for (int64_t j = 1; j < K; ++j) m = std::max(m, x[j]);
            double s = 0.0;
            for (int64_t j = 0; j < K; ++j) s += std::exp(x[j] - m);
            double inv = 1.0 / s;
            for (int64_t j = 0; j < K; ++j) {
                double p = std::exp(x[j] - m) * inv;
                nl->grad[b * K + j] += g * (p - (j == labels[b] ? 1.0 : 0.0));
            }
        }
    });
}

// 3x3 depthwise convolution with zero padding on [B,H,W,C]; taps outside the
// grid contribute explicit zeros, so the counter sees 9 madds per cell.
inline Tensor depthwise_conv3x3(const Tensor& x, const Tensor& kernel) {
    if (x.rank() != 4) throw ShapeError("depthwise_conv3x3: expected [B,H,W,C], got " + shape_str(x.shape()));
    int64_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    if (kernel.rank() != 3 || kernel.dim(0) != C || kernel.dim(1) != 3 || kernel.dim(2) != 3)
        throw ShapeError("depthwise_conv3x3: kernel must be [" + std::to_string(C) + ",3,3], got " +
                         shape_str(kernel.shape()));
    std::vector<double> out(x.data().size(), 0.0);
    const double* src = x.data().data();
    const double* k = kernel.data().data();
    auto in_at = [&](int64_t b, int64_t y, int64_t xx, int64_t c) -> double {
        if (y < 0 || y >= H || xx < 0 || xx >= W) return 0.0;
        return src[((b * H + y) * W + xx) * C + c];
    };
    for (int64_t b = 0; b < B; ++b)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t xx = 0; xx < W; ++xx)
                for (int64_t c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx)
                            acc += k[(c * 3 + dy + 1) * 3 + dx + 1] * in_at(b, y + dy, xx + dx, c);
                    out[((b * H + y) * W + xx) * C + c] = acc;
                }
    madd_counter() += static_cast<uint64_t>(B) * H * W * C * 9;
    TensorNode* nx = x.node();
    TensorNode* nk = kernel.node();
    return detail::op_result(x.shape(), std::move(out), {x, kernel}, [nx, nk, B, H, W, C](TensorNode& self) {
        if (nx->requires_grad) nx->ensure_grad();
        if (nk->requires_grad) nk->ensure_grad();
        const double* k = nk->data.data();
        const double* src = nx->data.data();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t xx = 0; xx < W; ++xx)
                    for (int64_t c = 0; c < C; ++c) {
                        double g = self.grad[((b * H + y) * W + xx) * C + c];
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                int64_t sy = y + dy, sx = xx + dx;
                                if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                                double xv = src[((b * H + sy) * W + sx) * C + c];
                                int64_t ki = (c * 3 + dy + 1) * 3 + dx + 1;
                                if (nk->requires_grad) nk->grad[ki] += g * xv;
                                if (nx->requires_grad)
                                    nx->grad[((b * H + sy) * W + sx) * C + c] += g * k[ki];
                            }
                    }
    });
}

// argsort ------------------------------------------------------------------------

// stable ascending argsort; non-differentiable, used for index construction only
inline std::vector<int64_t> argsort(const double* v, int64_t n) {
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [v](int64_t a, int64_t b) { return v[a] < v[b]; });
    return idx;
}

inline std::vector<int64_t> argsort(const std::vector<double>& v) {
    return argsort(v.data(), static_cast<int64_t>(v.size()));
}

inline std::vector<int64_t> argsort(const std::vector<int64_t>& v) {
    std::vector<int64_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) { return v[a] < v[b]; });
    return idx;
}

// backward ------------------------------------------------------------------------

// Ordered record of the operations reachable from a root. Creation ids are
// assigned monotonically, so sorting by id recovers a topological order in
// which every op follows its inputs.
struct Tape {
    std::vector<TensorNode*> nodes;  // ascending creation order

    static Tape from(const Tensor& root) {
        Tape tape;
        std::unordered_set<TensorNode*> seen;
        std::vector<TensorNode*> stack{root.node()};
        while (!stack.empty()) {
            TensorNode* n = stack.back();
            stack.pop_back();
            if (!seen.insert(n).second) continue;
            tape.nodes.push_back(n);
            for (const Tensor& p : n->parents) stack.push_back(p.node());
        }
        std::sort(tape.nodes.begin(), tape.nodes.end(),
                  [](TensorNode* a, TensorNode* b) { return a->id < b->id; });
        return tape;
    }
};

inline void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    Tape tape = Tape::from(loss);
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
        TensorNode* n = *it;
        if (!n->requires_grad || !n->backward_fn) continue;
        n->ensure_grad();
        n->backward_fn(*n);
    }
}

inline void zero_grad(const std::vector<Tensor>& params) {
    for (const Tensor& p : params) {
        TensorNode* n = p.node();
        if (!n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
}

// grad check ----------------------------------------------------------------------

// Compares analytic gradients of f against central finite differences.
// f must rebuild its graph from the given parameter tensors on every call and
// be bitwise deterministic; two probe evaluations guard that contract.
inline double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double eps = 1e-5) {
    Tensor probe1 = f();
    Tensor probe2 = f();
    if (probe1.numel() != 1) throw ContractError("grad_check: f must return a scalar");
    if (probe1.item() != probe2.item())
        throw DeterminismError("grad_check: f returned different values on two identical calls (" +
                               std::to_string(probe1.item()) + " vs " + std::to_string(probe2.item()) + ")");
    zero_grad(params);
    backward(probe1);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const Tensor& p : params) analytic.push_back(p.node()->grad.empty()
                                                          ? std::vector<double>(p.data().size(), 0.0)
                                                          : p.node()->grad);

    double max_err = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        std::vector<double>& d = params[pi].node()->data;
        for (size_t i = 0; i < d.size(); ++i) {
            double keep = d[i];
            d[i] = keep + eps;
            double fp = f().item();
            d[i] = keep - eps;
            double fm = f().item();
            d[i] = keep;
            double numeric = (fp - fm) / (2.0 * eps);
            double a = analytic[pi][i];
            double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace vbb
