#pragma once

// The three parallel mechanisms and the merged block: zero-padded depthwise
// convolution, random-sampling-window attention, and pooled global attention,
// combined per head group with learnable scaling weights.

#include <cstdint>
#include <optional>
#include <vector>

#include "vbb/tensor.hpp"

namespace vbb {

// A sampled permutation and its inverse, one pair per batch element.
struct PermutationPair {
    std::vector<int64_t> shuffle;
    std::vector<int64_t> restore;
};

// shuffle = stable argsort of L uniform draws; restore = argsort of shuffle,
// so restore(shuffle(i)) == i exactly.
inline std::vector<PermutationPair> make_permutation(int64_t batch, int64_t L, uint64_t rng_seed) {
    if (L < 1) throw ConfigError("make_permutation: L must be >= 1");
    Rng rng(rng_seed);
    std::vector<PermutationPair> pairs;
    pairs.reserve(static_cast<size_t>(batch));
    std::vector<double> keys(static_cast<size_t>(L));
    for (int64_t b = 0; b < batch; ++b) {
        for (double& k : keys) k = rng.uniform();
        PermutationPair p;
        p.shuffle = argsort(keys);
        p.restore = argsort(p.shuffle);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

inline std::vector<std::vector<int64_t>> shuffle_indices(const std::vector<PermutationPair>& p) {
    std::vector<std::vector<int64_t>> out;
    for (const auto& pp : p) out.push_back(pp.shuffle);
    return out;
}
inline std::vector<std::vector<int64_t>> restore_indices(const std::vector<PermutationPair>& p) {
    std::vector<std::vector<int64_t>> out;
    for (const auto& pp : p) out.push_back(pp.restore);
    return out;
}

// q/k/v projections of one mechanism group (no output projection here; the
// block-level W_o integrates the three groups).
struct QkvParams {
    Tensor wq, bq;  // [C,C], [C]
    Tensor wk, bk;
    Tensor wv, bv;

    std::vector<Tensor> all() const { return {wq, bq, wk, bk, wv, bv}; }
};

struct ConvBranchParams {
    Tensor pw_in_w, pw_in_b;    // [C,C], [C]
    Tensor dw_kernel;           // [C,3,3]
    Tensor norm_gamma, norm_beta;
    Tensor pw_out_w, pw_out_b;

    std::vector<Tensor> all() const {
        return {pw_in_w, pw_in_b, dw_kernel, norm_gamma, norm_beta, pw_out_w, pw_out_b};
    }
};

// Test-only bypasses; production forward never sets these.
struct TestMode {
    bool skip_block_norm = false;
    bool skip_conv_norm_act = false;
    bool skip_mlp = false;

    static TestMode all() { return {true, true, true}; }
};

struct AttentionConfig {
    int64_t heads_total = 3;   // K, divisible by 3
    int64_t window_size = 1;   // RS-Win tokens per window
    int64_t pool_size = 1;     // K/V pooling granularity for global attention
    int64_t grid_h = 1;
    int64_t grid_w = 1;        // grid_h * grid_w == L
    bool enable_cnn = true;
    bool enable_rswin = true;
    bool enable_ga = true;
};

// All learnable state of one block. Disabled mechanisms carry no parameters.
struct VbbBlockParams {
    Tensor ln1_gamma, ln1_beta;
    std::optional<ConvBranchParams> conv;
    std::optional<QkvParams> qkv_rs;
    std::optional<QkvParams> qkv_ga;
    Tensor w_o;                    // [C,C]
    Tensor alpha, beta, lambda;    // scalar scaling weights
    Tensor ln2_gamma, ln2_beta;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// parameter factories; weights follow the usual truncated-scale normal init,
// scaling weights start at 1 so the merge begins as an unweighted concat
inline QkvParams make_qkv_params(int64_t C, Rng& rng, double w_std = 0.02) {
    QkvParams p;
    p.wq = normal({C, C}, rng, 0.0, w_std, true);
    p.bq = zeros({C}, true);
    p.wk = normal({C, C}, rng, 0.0, w_std, true);
    p.bk = zeros({C}, true);
    p.wv = normal({C, C}, rng, 0.0, w_std, true);
    p.bv = zeros({C}, true);
    return p;
}

inline ConvBranchParams make_conv_params(int64_t C, Rng& rng, double w_std = 0.02) {
    ConvBranchParams p;
    p.pw_in_w = normal({C, C}, rng, 0.0, w_std, true);
    p.pw_in_b = zeros({C}, true);
    p.dw_kernel = normal({C, 3, 3}, rng, 0.0, 1.0 / 3.0, true);  // fan-in of 9 taps
    p.norm_gamma = full({C}, 1.0, true);
    p.norm_beta = zeros({C}, true);
    p.pw_out_w = normal({C, C}, rng, 0.0, w_std, true);
    p.pw_out_b = zeros({C}, true);
    return p;
}

inline VbbBlockParams make_block_params(int64_t C, const AttentionConfig& cfg, Rng& rng,
                                        int64_t mlp_ratio = 4, double w_std = 0.02) {
    if (C % 3 != 0) throw ConfigError("make_block_params: channels must be divisible by 3");
    int64_t Cg = C / 3;
    VbbBlockParams p;
    p.ln1_gamma = full({C}, 1.0, true);
    p.ln1_beta = zeros({C}, true);
    if (cfg.enable_cnn) p.conv = make_conv_params(Cg, rng, w_std);
    if (cfg.enable_rswin) p.qkv_rs = make_qkv_params(Cg, rng, w_std);
    if (cfg.enable_ga) p.qkv_ga = make_qkv_params(Cg, rng, w_std);
    p.w_o = normal({C, C}, rng, 0.0, w_std, true);
    p.alpha = scalar(1.0, true);
    p.beta = scalar(1.0, true);
    p.lambda = scalar(1.0, true);
    p.ln2_gamma = full({C}, 1.0, true);
    p.ln2_beta = zeros({C}, true);
    p.mlp_w1 = normal({C, mlp_ratio * C}, rng, 0.0, w_std, true);
    p.mlp_b1 = zeros({mlp_ratio * C}, true);
    p.mlp_w2 = normal({mlp_ratio * C, C}, rng, 0.0, w_std, true);
    p.mlp_b2 = zeros({C}, true);
    return p;
}

// learnable tensors in declaration order (the checkpoint / optimizer order)
inline std::vector<Tensor> block_param_list(const VbbBlockParams& p) {
    std::vector<Tensor> out{p.ln1_gamma, p.ln1_beta};
    auto append = [&out](const std::vector<Tensor>& v) { out.insert(out.end(), v.begin(), v.end()); };
    if (p.conv) append(p.conv->all());
    if (p.qkv_rs) append(p.qkv_rs->all());
    if (p.qkv_ga) append(p.qkv_ga->all());
    append({p.w_o, p.alpha, p.beta, p.lambda, p.ln2_gamma, p.ln2_beta, p.mlp_w1, p.mlp_b1,
            p.mlp_w2, p.mlp_b2});
    return out;
}

namespace detail {

// scaled dot-product attention per head over the channel dimension;
// q [N,Lq,C], k/v [N,Lk,C]; mask, when defined, is added to the logits.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   int64_t heads, const Tensor& mask) {
    int64_t C = q.dim(-1);
    if (C % heads != 0)
        throw ConfigError("attention: width " + std::to_string(C) + " not divisible by " +
                          std::to_string(heads) + " heads");
    int64_t dh = C / heads;
    double scl = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    for (int64_t h = 0; h < heads; ++h) {
        Tensor qh = narrow(q, 2, h * dh, dh);
        Tensor kh = narrow(k, 2, h * dh, dh);
        Tensor vh = narrow(v, 2, h * dh, dh);
        Tensor scores = scale(matmul(qh, transpose_last_two(kh)), scl);
        if (mask.defined()) scores = add(scores, mask);
        head_outs.push_back(matmul(softmax_lastdim(scores), vh));
    }
    return heads == 1 ? head_outs[0] : concat(head_outs, 2);
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor y = matmul(x, w);
    return b.defined() ? add(y, b) : y;
}

}  // namespace detail

// Random Sampling Windows attention: shuffle tokens with a sampled permutation,
// partition into contiguous windows, attend within each window, and restore.
// When window does not divide L the shuffled sequence is zero-padded at the
// end, padded keys are masked out of the softmax, and the pad rows are dropped
// before the restore gather.
inline Tensor rs_win_attention(const Tensor& x, int64_t heads, int64_t window,
                               const QkvParams& p, uint64_t rng_seed) {
    if (x.rank() != 3) throw ShapeError("rs_win_attention: expected [B,L,C], got " + shape_str(x.shape()));
    int64_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    if (window < 1) throw ConfigError("rs_win_attention: window_size must be >= 1");
    if (window > L)
        throw ConfigError("rs_win_attention: window_size " + std::to_string(window) +
                          " exceeds sequence length " + std::to_string(L));
    auto perm = make_permutation(B, L, rng_seed);
    Tensor xs = gather_tokens(x, shuffle_indices(perm));

    Tensor q = detail::linear(xs, p.wq, p.bq);
    Tensor k = detail::linear(xs, p.wk, p.bk);
    Tensor v = detail::linear(xs, p.wv, p.bv);

    int64_t windows = (L + window - 1) / window;
    int64_t Lp = windows * window;
    Tensor mask;  // stays undefined when no padding
    if (Lp > L) {
        Tensor pad = zeros({B, Lp - L, C});
        q = concat({q, pad}, 1);
        k = concat({k, pad}, 1);
        v = concat({v, pad}, 1);
        // padded slots sit at the tail of the last window of every batch element
        int64_t last_real = L - (windows - 1) * window;
        std::vector<double> m(static_cast<size_t>(B * windows * window * window), 0.0);
        for (int64_t b = 0; b < B; ++b) {
            int64_t base = (b * windows + windows - 1) * window * window;
            for (int64_t i = 0; i < window; ++i)
                for (int64_t j = last_real; j < window; ++j) m[base + i * window + j] = -1e30;
        }
        mask = Tensor::make({B * windows, window, window}, std::move(m));
    }

    q = reshape(q, {B * windows, window, C});
    k = reshape(k, {B * windows, window, C});
    v = reshape(v, {B * windows, window, C});
    Tensor out = detail::multi_head_attention(q, k, v, heads, mask);
    out = reshape(out, {B, Lp, C});
    if (Lp > L) out = narrow(out, 1, 0, L);
    return gather_tokens(out, restore_indices(perm));
}

// Global attention: queries at full resolution, keys/values projected from the
// average-pooled sequence.
inline Tensor global_attention(const Tensor& x, int64_t heads, int64_t pool_size,
                               const QkvParams& p) {
    if (x.rank() != 3) throw ShapeError("global_attention: expected [B,L,C], got " + shape_str(x.shape()));
    if (pool_size < 1) throw ConfigError("global_attention: pool_size must be >= 1");
    Tensor q = detail::linear(x, p.wq, p.bq);
    Tensor pooled = avg_pool_tokens(x, pool_size);
    Tensor k = detail::linear(pooled, p.wk, p.bk);
    Tensor v = detail::linear(pooled, p.wv, p.bv);
    return detail::multi_head_attention(q, k, v, heads, Tensor());
}

// Convolutional branch: pointwise mix, 3x3 zero-padded depthwise conv,
// norm + activation, pointwise mix. The zero padding makes boundary cells see
// fewer taps than interior cells, which is the positional signal.
inline Tensor conv_branch(const Tensor& x, int64_t grid_h, int64_t grid_w,
                          const ConvBranchParams& p, const TestMode& test = {}) {
    if (x.rank() != 3) throw ShapeError("conv_branch: expected [B,L,C], got " + shape_str(x.shape()));
    int64_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    if (grid_h * grid_w != L)
        throw ConfigError("conv_branch: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                          " does not cover " + std::to_string(L) + " tokens");
    Tensor h = reshape(x, {B, grid_h, grid_w, C});
    h = detail::linear(h, p.pw_in_w, p.pw_in_b);
    h = depthwise_conv3x3(h, p.dw_kernel);
    if (!test.skip_conv_norm_act) {
        h = layer_norm(h, p.norm_gamma, p.norm_beta);
        h = gelu(h);
    }
    h = detail::linear(h, p.pw_out_w, p.pw_out_b);
    return reshape(h, {B, L, C});
}

// One block: pre-norm, channel split into three contiguous groups, the three
// mechanisms in parallel, scaling weights, concat + W_o projection, residual,
// then a pre-norm MLP residual.
inline Tensor vbb_block(const Tensor& x, const AttentionConfig& cfg, const VbbBlockParams& p,
                        uint64_t rng_seed, const TestMode& test = {}) {
    if (x.rank() != 3) throw ShapeError("vbb_block: expected [B,L,C], got " + shape_str(x.shape()));
    int64_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    if (C % 3 != 0) throw ConfigError("vbb_block: channels " + std::to_string(C) + " not divisible by 3");
    if (cfg.heads_total % 3 != 0)
        throw ConfigError("vbb_block: heads " + std::to_string(cfg.heads_total) + " not divisible by 3");
    if (cfg.grid_h * cfg.grid_w != L)
        throw ConfigError("vbb_block: grid does not cover sequence length " + std::to_string(L));
    int64_t Cg = C / 3;
    int64_t heads_g = cfg.heads_total / 3;

    Tensor h = test.skip_block_norm ? x : layer_norm(x, p.ln1_gamma, p.ln1_beta);
    Tensor g1 = narrow(h, 2, 0, Cg);
    Tensor g2 = narrow(h, 2, Cg, Cg);
    Tensor g3 = narrow(h, 2, 2 * Cg, Cg);

    Tensor y1 = cfg.enable_cnn ? conv_branch(g1, cfg.grid_h, cfg.grid_w, *p.conv, test)
                               : zeros({B, L, Cg});
    Tensor y2 = cfg.enable_rswin ? rs_win_attention(g2, heads_g, cfg.window_size, *p.qkv_rs, rng_seed)
                                 : zeros({B, L, Cg});
    Tensor y3 = cfg.enable_ga ? global_attention(g3, heads_g, cfg.pool_size, *p.qkv_ga)
                              : zeros({B, L, Cg});

    Tensor merged = concat({mul(y1, p.alpha), mul(y2, p.beta), mul(y3, p.lambda)}, 2);
    Tensor x1 = add(x, matmul(merged, p.w_o));
    if (test.skip_mlp) return x1;

    Tensor m = test.skip_block_norm ? x1 : layer_norm(x1, p.ln2_gamma, p.ln2_beta);
    m = gelu(detail::linear(m, p.mlp_w1, p.mlp_b1));
    m = detail::linear(m, p.mlp_w2, p.mlp_b2);
    return add(x1, m);
}

}  // namespace vbb
