#pragma once

// Closed-form multiply-add counts per mechanism, per batch element. The core
// column is the score+mix cost (or the depthwise taps for the conv branch);
// projections are counted separately so the scaling laws read off the core.

#include <cstdint>
#include <string>

#include "vbb/tensor.hpp"

namespace vbb {

enum class Mechanism { conv, rs_win, global_attn, full };

inline const char* mechanism_name(Mechanism m) {
    switch (m) {
        case Mechanism::conv: return "conv";
        case Mechanism::rs_win: return "rs_win";
        case Mechanism::global_attn: return "global";
        case Mechanism::full: return "full";
    }
    return "?";
}

struct FlopEntry {
    Mechanism mechanism;
    int64_t length = 0;
    uint64_t core_madds = 0;
    uint64_t projection_madds = 0;

    uint64_t total() const { return core_madds + projection_madds; }
};

// window_or_pool: window size for rs_win, pool size for global, ignored otherwise.
// C is the full block width; the three mechanisms each run on a C/3 group,
// full attention runs on all C channels.
inline FlopEntry flop_count(Mechanism m, int64_t L, int64_t C, int64_t window_or_pool) {
    if (L < 1 || C < 1) throw ConfigError("flop_count: invalid dimensions");
    FlopEntry e{m, L, 0, 0};
    auto u = [](int64_t v) { return static_cast<uint64_t>(v); };
    switch (m) {
        case Mechanism::conv: {
            if (C % 3 != 0) throw ConfigError("flop_count: C must be divisible by 3");
            int64_t Cg = C / 3;
            e.core_madds = u(9 * L * Cg);
            e.projection_madds = u(2 * L * Cg * Cg);
            break;
        }
        case Mechanism::rs_win: {
            if (C % 3 != 0) throw ConfigError("flop_count: C must be divisible by 3");
            int64_t w = window_or_pool;
            if (w < 1 || w > L) throw ConfigError("flop_count: invalid window size");
            int64_t Cg = C / 3;
            int64_t Lp = (L + w - 1) / w * w;
            e.core_madds = u(2 * Lp * w * Cg);
            e.projection_madds = u(3 * L * Cg * Cg);
            break;
        }
        case Mechanism::global_attn: {
            if (C % 3 != 0) throw ConfigError("flop_count: C must be divisible by 3");
            int64_t pool = window_or_pool;
            if (pool < 1) throw ConfigError("flop_count: invalid pool size");
            int64_t Cg = C / 3;
            int64_t Lk = (L + pool - 1) / pool;
            e.core_madds = u(2 * L * Lk * Cg);
            e.projection_madds = u(L * Cg * Cg + 2 * Lk * Cg * Cg);
            break;
        }
        case Mechanism::full: {
            e.core_madds = u(2 * L * L * C);
            e.projection_madds = u(3 * L * C * C);
            break;
        }
    }
    return e;
}

}  // namespace vbb
