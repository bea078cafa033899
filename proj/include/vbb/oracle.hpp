#pragma once

// Brute-force references, written as explicit per-token loops that share no
// compute path with the batched engine ops. Quadratic and slow on purpose.

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "vbb/tensor.hpp"

namespace vbb::oracle {

struct OracleReport {
    double max_abs_diff = 0.0;
    double max_rel_diff = 0.0;
    bool pass = false;
};

inline OracleReport compare(const std::vector<double>& a, const std::vector<double>& b,
                            double tolerance) {
    OracleReport r;
    for (size_t i = 0; i < a.size() && i < b.size(); ++i) {
        double d = std::abs(a[i] - b[i]);
        r.max_abs_diff = std::max(r.max_abs_diff, d);
        double denom = std::max(std::abs(a[i]), std::abs(b[i]));
        if (denom > 0.0) r.max_rel_diff = std::max(r.max_rel_diff, d / denom);
    }
    if (a.size() != b.size()) r.max_abs_diff = std::numeric_limits<double>::infinity();
    r.pass = r.max_abs_diff <= tolerance;
    return r;
}

// Per-mechanism projection weights as plain containers. The oracle reads the
// same parameter tensors the engine uses but does all arithmetic itself.
struct AttnWeights {
    const Tensor& wq;  // [C,C]
    const Tensor& bq;  // [C]
    const Tensor& wk;
    const Tensor& bk;
    const Tensor& wv;
    const Tensor& bv;
};

namespace detail {

inline void project_token(const double* x, const std::vector<double>& w,
                          const std::vector<double>& b, int64_t C, int64_t col0, int64_t dh,
                          double* out) {
    for (int64_t d = 0; d < dh; ++d) {
        double acc = b[col0 + d];
        for (int64_t c = 0; c < C; ++c) acc += x[c] * w[c * C + col0 + d];
        out[d] = acc;
    }
}

// attention among an explicit member list, one head, writing dh columns
inline void attend_members(const std::vector<const double*>& tokens, int64_t C, int64_t col0,
                           int64_t dh, const AttnWeights& w, double scale,
                           std::vector<double*>& outs) {
    size_t n = tokens.size();
    std::vector<std::vector<double>> q(n, std::vector<double>(dh)), k = q, v = q;
    for (size_t i = 0; i < n; ++i) {
        project_token(tokens[i], w.wq.data(), w.bq.data(), C, col0, dh, q[i].data());
        project_token(tokens[i], w.wk.data(), w.bk.data(), C, col0, dh, k[i].data());
        project_token(tokens[i], w.wv.data(), w.bv.data(), C, col0, dh, v[i].data());
    }
    std::vector<double> scores(n);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (int64_t d = 0; d < dh; ++d) s += q[i][d] * k[j][d];
            scores[j] = s * scale;
        }
        double m = scores[0];
        for (size_t j = 1; j < n; ++j) m = std::max(m, scores[j]);
        double z = 0.0;
        for (size_t j = 0; j < n; ++j) {
            scores[j] = std::exp(scores[j] - m);
            z += scores[j];
        }
        for (int64_t d = 0; d < dh; ++d) {
            double acc = 0.0;
            for (size_t j = 0; j < n; ++j) acc += scores[j] * v[j][d];
            outs[i][col0 + d] = acc / z;
        }
    }
}

}  // namespace detail

// Multi-head self-attention over the whole sequence. x is [B,L,C]; the result
// is raw row-major [B,L,C] data.
inline std::vector<double> full_attention(const Tensor& x, int64_t heads, const AttnWeights& w,
                                          double scale) {
    int64_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    int64_t dh = C / heads;
    std::vector<double> out(static_cast<size_t>(B * L * C), 0.0);
    for (int64_t b = 0; b < B; ++b) {
        std::vector<const double*> tokens(static_cast<size_t>(L));
        std::vector<double*> outs(static_cast<size_t>(L));
        for (int64_t i = 0; i < L; ++i) {
            tokens[i] = x.data().data() + (b * L + i) * C;
            outs[i] = out.data() + (b * L + i) * C;
        }
        for (int64_t h = 0; h < heads; ++h)
            detail::attend_members(tokens, C, h * dh, dh, w, scale, outs);
    }
    return out;
}

// Windowed attention over a given shuffle: window g holds shuffled slots
// [g*window, min((g+1)*window, L)); attention runs among those tokens only and
// results land back at the original positions, so no restore step is needed.
inline std::vector<double> window_attention(const Tensor& x, int64_t heads, const AttnWeights& w,
                                            double scale, int64_t window,
                                            const std::vector<std::vector<int64_t>>& shuffle) {
    int64_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    int64_t dh = C / heads;
    int64_t windows = (L + window - 1) / window;
    std::vector<double> out(static_cast<size_t>(B * L * C), 0.0);
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t g = 0; g < windows; ++g) {
            int64_t lo = g * window;
            int64_t hi = std::min(lo + window, L);
            std::vector<const double*> tokens;
            std::vector<double*> outs;
            for (int64_t p = lo; p < hi; ++p) {
                int64_t orig = shuffle[b][p];
                tokens.push_back(x.data().data() + (b * L + orig) * C);
                outs.push_back(out.data() + (b * L + orig) * C);
            }
            for (int64_t h = 0; h < heads; ++h)
                detail::attend_members(tokens, C, h * dh, dh, w, scale, outs);
        }
    }
    return out;
}

// Direct 3x3 depthwise convolution on [H,W,C] with explicit zero tests at the
// borders. Five nested loops, nothing shared with the engine op.
inline std::vector<double> conv2d(const std::vector<double>& grid, int64_t H, int64_t W, int64_t C,
                                  const std::vector<double>& kernel) {
    std::vector<double> out(grid.size(), 0.0);
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int64_t sy = y + dy, sx = x + dx;
                        if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;  // zero pad
                        acc += kernel[(c * 3 + dy + 1) * 3 + dx + 1] * grid[(sy * W + sx) * C + c];
                    }
                out[(y * W + x) * C + c] = acc;
            }
    return out;
}

// Exact multiply-add count of the matmul/conv ops executed by fn.
inline uint64_t count_multiply_adds(const std::function<void()>& fn) {
    reset_madds();
    fn();
    return madds();
}

}  // namespace vbb::oracle
