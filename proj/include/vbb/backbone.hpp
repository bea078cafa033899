#pragma once

// Hierarchical backbone: patch embedding, stages of blocks with 2x2 patch
// merging between them, global average pooling and a linear head.

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vbb/attention.hpp"
#include "vbb/tensor.hpp"

namespace vbb {

enum class PositionalEncoding { none, absolute };
enum class Mode { train, eval };

struct StageConfig {
    int64_t depth = 1;
    int64_t channels = 6;   // divisible by 3
    int64_t heads = 3;      // divisible by 3
    int64_t window_size = 1;
    int64_t pool_size = 1;
    bool downsample = false;  // 2x2 patch merge before this stage's blocks
};

struct ModelConfig {
    int64_t image_size = 32;
    int64_t patch_size = 4;
    int64_t num_classes = 4;
    std::vector<StageConfig> stages;
    bool disable_cnn = false;
    bool disable_rswin = false;
    bool disable_ga = false;
    PositionalEncoding positional_encoding = PositionalEncoding::none;
    uint64_t seed = 42;

    void validate() const {
        if (image_size < 1 || patch_size < 1 || num_classes < 2)
            throw ConfigError("model: image_size/patch_size/num_classes out of range");
        if (image_size % patch_size != 0)
            throw ConfigError("model: image_size " + std::to_string(image_size) +
                              " not divisible by patch_size " + std::to_string(patch_size));
        if (stages.empty()) throw ConfigError("model: at least one stage required");
        if (disable_cnn && disable_rswin && disable_ga)
            throw ConfigError("model: at least one mechanism must stay enabled");
        int64_t grid = image_size / patch_size;
        int64_t prev_channels = -1;
        for (size_t s = 0; s < stages.size(); ++s) {
            const StageConfig& st = stages[s];
            if (st.depth < 1) throw ConfigError("stage: depth must be >= 1");
            if (st.channels % 3 != 0)
                throw ConfigError("stage: channels " + std::to_string(st.channels) +
                                  " not divisible by 3");
            if (st.heads % 3 != 0)
                throw ConfigError("stage: heads " + std::to_string(st.heads) + " not divisible by 3");
            if (st.channels % st.heads != 0)
                throw ConfigError("stage: channels " + std::to_string(st.channels) +
                                  " not divisible by heads " + std::to_string(st.heads));
            if (st.downsample) {
                if (s == 0) throw ConfigError("stage: first stage cannot downsample");
                if (grid % 2 != 0)
                    throw ConfigError("stage: grid " + std::to_string(grid) +
                                      " is odd, cannot merge 2x2 patches");
                grid /= 2;
            } else if (s > 0 && st.channels != prev_channels) {
                throw ConfigError("stage: channel width may only change across a downsample");
            }
            int64_t L = grid * grid;
            if (st.window_size < 1 || st.window_size > L)
                throw ConfigError("stage: window_size " + std::to_string(st.window_size) +
                                  " out of range for " + std::to_string(L) + " tokens");
            if (st.pool_size < 1) throw ConfigError("stage: pool_size must be >= 1");
            prev_channels = st.channels;
        }
    }

    // architecture identity; used as the checkpoint header
    std::string canonical_text() const {
        std::ostringstream os;
        os << "image_size=" << image_size << '\n'
           << "patch_size=" << patch_size << '\n'
           << "num_classes=" << num_classes << '\n'
           << "positional_encoding=" << (positional_encoding == PositionalEncoding::none ? "none" : "absolute")
           << '\n'
           << "disable_cnn=" << (disable_cnn ? 1 : 0) << '\n'
           << "disable_rswin=" << (disable_rswin ? 1 : 0) << '\n'
           << "disable_ga=" << (disable_ga ? 1 : 0) << '\n'
           << "stages=";
        for (size_t s = 0; s < stages.size(); ++s) {
            if (s) os << ';';
            const StageConfig& st = stages[s];
            os << st.depth << ':' << st.channels << ':' << st.heads << ':' << st.window_size << ':'
               << st.pool_size << ':' << (st.downsample ? 1 : 0);
        }
        os << '\n';
        return os.str();
    }

    // desk-scale default: two stages over a 32x32 image
    static ModelConfig tiny() {
        ModelConfig cfg;
        cfg.image_size = 32;
        cfg.patch_size = 4;
        cfg.num_classes = 4;
        cfg.stages = {{2, 24, 3, 8, 4, false}, {2, 48, 6, 4, 2, true}};
        return cfg;
    }
};

struct DownsampleParams {
    Tensor norm_gamma, norm_beta;  // over the merged 4*C_prev channels
    Tensor reduce_w;               // [4*C_prev, C]
};

struct Model {
    ModelConfig cfg;
    Tensor patch_w, patch_b;
    Tensor pos_embed;  // defined only with absolute positional encoding
    std::vector<std::optional<DownsampleParams>> downsamples;  // one slot per stage
    std::vector<std::vector<VbbBlockParams>> blocks;           // per stage, per depth
    Tensor final_gamma, final_beta;
    Tensor head_w, head_b;

    std::vector<std::pair<std::string, Tensor>> parameters;  // declaration order

    int64_t stage_grid(size_t stage) const {
        int64_t grid = cfg.image_size / cfg.patch_size;
        for (size_t s = 1; s <= stage; ++s)
            if (cfg.stages[s].downsample) grid /= 2;
        return grid;
    }
};

inline AttentionConfig stage_attention_config(const ModelConfig& cfg, const StageConfig& st,
                                              int64_t grid) {
    AttentionConfig a;
    a.heads_total = st.heads;
    a.window_size = st.window_size;
    a.pool_size = st.pool_size;
    a.grid_h = grid;
    a.grid_w = grid;
    a.enable_cnn = !cfg.disable_cnn;
    a.enable_rswin = !cfg.disable_rswin;
    a.enable_ga = !cfg.disable_ga;
    return a;
}

inline Model build_model(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    Rng rng(mix64(cfg.seed, 0x6d6f64656cULL));

    auto reg = [&m](const std::string& name, const Tensor& t) {
        m.parameters.emplace_back(name, t);
        return t;
    };

    int64_t p = cfg.patch_size;
    int64_t c0 = cfg.stages[0].channels;
    int64_t grid0 = cfg.image_size / p;
    m.patch_w = reg("patch_embed.w", normal({3 * p * p, c0}, rng, 0.0, 0.02, true));
    m.patch_b = reg("patch_embed.b", zeros({c0}, true));
    if (cfg.positional_encoding == PositionalEncoding::absolute)
        m.pos_embed = reg("pos_embed", normal({grid0 * grid0, c0}, rng, 0.0, 0.02, true));

    int64_t prev_channels = c0;
    m.downsamples.resize(cfg.stages.size());
    m.blocks.resize(cfg.stages.size());
    for (size_t s = 0; s < cfg.stages.size(); ++s) {
        const StageConfig& st = cfg.stages[s];
        std::string prefix = "stage" + std::to_string(s + 1);
        if (st.downsample) {
            DownsampleParams d;
            d.norm_gamma = reg(prefix + ".merge.norm_gamma", full({4 * prev_channels}, 1.0, true));
            d.norm_beta = reg(prefix + ".merge.norm_beta", zeros({4 * prev_channels}, true));
            d.reduce_w = reg(prefix + ".merge.reduce_w",
                             normal({4 * prev_channels, st.channels}, rng, 0.0, 0.02, true));
            m.downsamples[s] = std::move(d);
        }
        AttentionConfig acfg = stage_attention_config(cfg, st, m.stage_grid(s));
        for (int64_t b = 0; b < st.depth; ++b) {
            VbbBlockParams bp = make_block_params(st.channels, acfg, rng);
            std::string bp_prefix = prefix + ".block" + std::to_string(b) + ".";
            auto reg_all = [&](const std::string& sub, const std::vector<Tensor>& ts,
                               const std::vector<std::string>& names) {
                for (size_t i = 0; i < ts.size(); ++i) reg(bp_prefix + sub + names[i], ts[i]);
            };
            reg(bp_prefix + "ln1_gamma", bp.ln1_gamma);
            reg(bp_prefix + "ln1_beta", bp.ln1_beta);
            if (bp.conv)
                reg_all("conv.", bp.conv->all(),
                        {"pw_in_w", "pw_in_b", "dw_kernel", "norm_gamma", "norm_beta", "pw_out_w",
                         "pw_out_b"});
            if (bp.qkv_rs)
                reg_all("rswin.", bp.qkv_rs->all(), {"wq", "bq", "wk", "bk", "wv", "bv"});
            if (bp.qkv_ga)
                reg_all("ga.", bp.qkv_ga->all(), {"wq", "bq", "wk", "bk", "wv", "bv"});
            reg(bp_prefix + "w_o", bp.w_o);
            reg(bp_prefix + "alpha", bp.alpha);
            reg(bp_prefix + "beta", bp.beta);
            reg(bp_prefix + "lambda", bp.lambda);
            reg(bp_prefix + "ln2_gamma", bp.ln2_gamma);
            reg(bp_prefix + "ln2_beta", bp.ln2_beta);
            reg(bp_prefix + "mlp_w1", bp.mlp_w1);
            reg(bp_prefix + "mlp_b1", bp.mlp_b1);
            reg(bp_prefix + "mlp_w2", bp.mlp_w2);
            reg(bp_prefix + "mlp_b2", bp.mlp_b2);
            m.blocks[s].push_back(std::move(bp));
        }
        prev_channels = st.channels;
    }
    m.final_gamma = reg("final_norm.gamma", full({prev_channels}, 1.0, true));
    m.final_beta = reg("final_norm.beta", zeros({prev_channels}, true));
    m.head_w = reg("head.w", normal({prev_channels, cfg.num_classes}, rng, 0.0, 0.02, true));
    m.head_b = reg("head.b", zeros({cfg.num_classes}, true));
    return m;
}

inline std::vector<Tensor> parameter_list(const Model& m) {
    std::vector<Tensor> out;
    out.reserve(m.parameters.size());
    for (const auto& [name, t] : m.parameters) out.push_back(t);
    return out;
}

inline int64_t parameter_count(const Model& m) {
    int64_t total = 0;
    for (const auto& [name, t] : m.parameters) total += t.numel();
    return total;
}

// non-overlapping patches, flattened channel-major, linearly projected
inline Tensor patch_embed(const Tensor& image, int64_t patch_size, const Tensor& w, const Tensor& b) {
    if (image.rank() != 4 || image.dim(1) != 3)
        throw ShapeError("patch_embed: expected [B,3,H,W], got " + shape_str(image.shape()));
    int64_t B = image.dim(0), H = image.dim(2), W = image.dim(3);
    if (H % patch_size != 0 || W % patch_size != 0)
        throw ConfigError("patch_embed: image " + std::to_string(H) + "x" + std::to_string(W) +
                          " not divisible by patch size " + std::to_string(patch_size));
    int64_t gh = H / patch_size, gw = W / patch_size;
    int64_t L = gh * gw, pv = 3 * patch_size * patch_size;
    std::vector<int64_t> idx;
    idx.reserve(static_cast<size_t>(L * pv));
    for (int64_t ty = 0; ty < gh; ++ty)
        for (int64_t tx = 0; tx < gw; ++tx)
            for (int64_t c = 0; c < 3; ++c)
                for (int64_t py = 0; py < patch_size; ++py)
                    for (int64_t px = 0; px < patch_size; ++px)
                        idx.push_back((c * H + ty * patch_size + py) * W + tx * patch_size + px);
    Tensor flat = reshape(image, {B, 3 * H * W});
    Tensor patches = reshape(index_select(flat, 1, idx), {B, L, pv});
    return add(matmul(patches, w), b);
}

// 2x2 patch merge with linear reduction; grid dims must be even
inline Tensor downsample(const Tensor& x, int64_t grid_h, int64_t grid_w, const DownsampleParams& p) {
    if (x.rank() != 3) throw ShapeError("downsample: expected [B,L,C], got " + shape_str(x.shape()));
    int64_t L = x.dim(1);
    if (grid_h * grid_w != L)
        throw ConfigError("downsample: grid does not cover sequence length");
    if (grid_h % 2 != 0 || grid_w % 2 != 0)
        throw ConfigError("downsample: odd grid " + std::to_string(grid_h) + "x" +
                          std::to_string(grid_w));
    std::vector<Tensor> quads;
    for (auto [dy, dx] : {std::pair<int64_t, int64_t>{0, 0}, {1, 0}, {0, 1}, {1, 1}}) {
        std::vector<int64_t> idx;
        idx.reserve(static_cast<size_t>(L / 4));
        for (int64_t y = 0; y < grid_h; y += 2)
            for (int64_t xx = 0; xx < grid_w; xx += 2) idx.push_back((y + dy) * grid_w + xx + dx);
        quads.push_back(index_select(x, 1, idx));
    }
    Tensor merged = concat(quads, 2);
    merged = layer_norm(merged, p.norm_gamma, p.norm_beta);
    return matmul(merged, p.reduce_w);
}

// seed for one block's permutation draw: redrawn per step while training,
// frozen per layer in eval
inline uint64_t block_seed(uint64_t model_seed, int64_t layer_index, Mode mode, int64_t step) {
    return mode == Mode::train
               ? mix64(model_seed, static_cast<uint64_t>(layer_index), static_cast<uint64_t>(step))
               : mix64(model_seed, static_cast<uint64_t>(layer_index));
}

inline Tensor forward(const Model& m, const Tensor& image, Mode mode, int64_t step = 0) {
    Tensor x = patch_embed(image, m.cfg.patch_size, m.patch_w, m.patch_b);
    if (m.pos_embed.defined()) x = add(x, m.pos_embed);
    int64_t grid = m.cfg.image_size / m.cfg.patch_size;
    int64_t layer_index = 0;
    for (size_t s = 0; s < m.cfg.stages.size(); ++s) {
        const StageConfig& st = m.cfg.stages[s];
        if (st.downsample) {
            x = downsample(x, grid, grid, *m.downsamples[s]);
            grid /= 2;
        }
        AttentionConfig acfg = stage_attention_config(m.cfg, st, grid);
        for (const VbbBlockParams& bp : m.blocks[s]) {
            uint64_t seed = block_seed(m.cfg.seed, layer_index, mode, step);
            x = vbb_block(x, acfg, bp, seed);
            ++layer_index;
        }
    }
    x = layer_norm(x, m.final_gamma, m.final_beta);
    Tensor pooled = reshape(avg_pool_tokens(x, x.dim(1)), {x.dim(0), x.dim(2)});
    return add(matmul(pooled, m.head_w), m.head_b);
}

struct ScalingWeightStats {
    double alpha_mean = 0.0;
    double beta_mean = 0.0;
    double lambda_mean = 0.0;
};

// arithmetic mean of each scaling weight over the blocks of each stage
inline std::vector<ScalingWeightStats> scaling_weight_stats(const Model& m) {
    std::vector<ScalingWeightStats> out;
    for (const auto& stage_blocks : m.blocks) {
        ScalingWeightStats s;
        for (const VbbBlockParams& bp : stage_blocks) {
            s.alpha_mean += bp.alpha.item();
            s.beta_mean += bp.beta.item();
            s.lambda_mean += bp.lambda.item();
        }
        double inv = 1.0 / static_cast<double>(stage_blocks.size());
        s.alpha_mean *= inv;
        s.beta_mean *= inv;
        s.lambda_mean *= inv;
        out.push_back(s);
    }
    return out;
}

}  // namespace vbb
