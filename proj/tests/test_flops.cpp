#include <catch2/catch_amalgamated.hpp>

#include "vbb/attention.hpp"
#include "vbb/flops.hpp"
#include "vbb/oracle.hpp"

using namespace vbb;

TEST_CASE("full attention score+mix formula") {
    FlopEntry e = flop_count(Mechanism::full, 64, 32, 0);
    REQUIRE(e.core_madds == 262144);  // 2*64*64*32
}

TEST_CASE("rs_win score+mix formula") {
    FlopEntry e = flop_count(Mechanism::rs_win, 64, 33, 8);
    REQUIRE(e.core_madds == 11264);  // 2*64*8*11
}

TEST_CASE("rs_win core is linear in L at fixed window") {
    for (int64_t L : {64, 256, 512}) {
        FlopEntry a = flop_count(Mechanism::rs_win, L, 24, 16);
        FlopEntry b = flop_count(Mechanism::rs_win, 2 * L, 24, 16);
        REQUIRE(b.core_madds == 2 * a.core_madds);
    }
}

TEST_CASE("full attention core is quadratic in L") {
    FlopEntry a = flop_count(Mechanism::full, 256, 24, 0);
    FlopEntry b = flop_count(Mechanism::full, 512, 24, 0);
    REQUIRE(b.core_madds == 4 * a.core_madds);
}

TEST_CASE("global core is linear when pooling scales with L") {
    // pool chosen so the key count stays fixed at 64
    FlopEntry a = flop_count(Mechanism::global_attn, 256, 24, 256 / 64);
    FlopEntry b = flop_count(Mechanism::global_attn, 512, 24, 512 / 64);
    REQUIRE(b.core_madds == 2 * a.core_madds);
}

TEST_CASE("counts are monotone in L") {
    for (Mechanism m : {Mechanism::conv, Mechanism::rs_win, Mechanism::global_attn, Mechanism::full}) {
        uint64_t prev = 0;
        for (int64_t L = 8; L <= 64; L += 8) {
            FlopEntry e = flop_count(m, L, 24, 4);
            REQUIRE(e.total() > prev);
            prev = e.total();
        }
    }
}

TEST_CASE("counter matches formula: rs_win") {
    Rng rng(1);
    for (auto [L, w] : std::vector<std::pair<int64_t, int64_t>>{{16, 4}, {7, 4}, {24, 8}, {9, 3}}) {
        int64_t C = 9, Cg = 3;
        QkvParams p = make_qkv_params(Cg, rng);
        Tensor x = uniform({1, L, Cg}, rng);
        uint64_t counted = oracle::count_multiply_adds([&]() { rs_win_attention(x, 1, w, p, 5); });
        REQUIRE(counted == flop_count(Mechanism::rs_win, L, C, w).total());
    }
}

TEST_CASE("counter matches formula: global attention") {
    Rng rng(2);
    for (auto [L, pool] : std::vector<std::pair<int64_t, int64_t>>{{16, 4}, {10, 3}, {64, 64}, {12, 1}}) {
        int64_t C = 9, Cg = 3;
        QkvParams p = make_qkv_params(Cg, rng);
        Tensor x = uniform({1, L, Cg}, rng);
        uint64_t counted = oracle::count_multiply_adds([&]() { global_attention(x, 1, pool, p); });
        REQUIRE(counted == flop_count(Mechanism::global_attn, L, C, pool).total());
    }
}

TEST_CASE("counter matches formula: conv branch") {
    Rng rng(3);
    int64_t gh = 4, gw = 6, C = 9, Cg = 3;
    ConvBranchParams p = make_conv_params(Cg, rng);
    Tensor x = uniform({1, gh * gw, Cg}, rng);
    uint64_t counted = oracle::count_multiply_adds([&]() { conv_branch(x, gh, gw, p); });
    REQUIRE(counted == flop_count(Mechanism::conv, gh * gw, C, 0).total());
}

TEST_CASE("counter matches formula: full attention via pool-1 global") {
    Rng rng(4);
    int64_t L = 16, C = 6;
    QkvParams p = make_qkv_params(C, rng);
    Tensor x = uniform({1, L, C}, rng);
    uint64_t counted = oracle::count_multiply_adds([&]() { global_attention(x, 2, 1, p); });
    REQUIRE(counted == flop_count(Mechanism::full, L, C, 1).total());
}

TEST_CASE("flop_count validates its configuration") {
    REQUIRE_THROWS_AS(flop_count(Mechanism::rs_win, 8, 8, 4), ConfigError);   // C % 3
    REQUIRE_THROWS_AS(flop_count(Mechanism::rs_win, 8, 9, 9), ConfigError);   // window > L
    REQUIRE_THROWS_AS(flop_count(Mechanism::global_attn, 8, 9, 0), ConfigError);
}
