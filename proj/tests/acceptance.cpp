// Acceptance suite: one pass/fail line per criterion, non-zero exit on any
// failure. Criteria 6 and 7 run real toy trainings and take a few minutes.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "vbb/oracle.hpp"
#include "vbb/train.hpp"

using namespace vbb;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail, double seconds) {
    std::printf("%s criterion %d: %s (%s; %.1fs)\n", pass ? "PASS" : "FAIL", id, name.c_str(),
                detail.c_str(), seconds);
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

class Timer {
public:
    Timer() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

oracle::AttnWeights weights_of(const QkvParams& p) {
    return oracle::AttnWeights{p.wq, p.bq, p.wk, p.bk, p.wv, p.bv};
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

std::string fmt(double v) { return csv_double(v); }

// ---- criterion 1 -----------------------------------------------------------

void criterion_permutations() {
    Timer t;
    Rng rng(101);
    bool pass = true;
    std::string detail;
    for (int trial = 0; trial < 1000 && pass; ++trial) {
        int64_t L = 1 + rng.below(64);
        uint64_t seed = mix64(0xACCE97, static_cast<uint64_t>(trial));
        auto pairs = make_permutation(2, L, seed);
        for (const auto& p : pairs) {
            std::vector<bool> seen(static_cast<size_t>(L), false);
            for (int64_t i = 0; i < L; ++i) {
                if (p.shuffle[i] < 0 || p.shuffle[i] >= L || seen[p.shuffle[i]]) pass = false;
                if (pass) seen[p.shuffle[i]] = true;
                if (p.restore[p.shuffle[i]] != i) pass = false;
            }
        }
        if (!pass) {
            detail = "restore∘shuffle != identity at trial " + std::to_string(trial);
            break;
        }
        Tensor x = uniform({2, L, 3}, rng);
        Tensor rt = gather_tokens(gather_tokens(x, shuffle_indices(pairs)), restore_indices(pairs));
        if (rt.data() != x.data()) {
            pass = false;
            detail = "tensor round-trip not bit-exact at trial " + std::to_string(trial);
        }
    }
    if (pass) detail = "1000 cases, identity exact, round-trip bit-exact";
    pass = pass && t.seconds() < 5.0;
    report(1, "permutation correctness", pass, detail, t.seconds());
}

// ---- criteria 2 and 3 ------------------------------------------------------

void criterion_degenerate_equivalences() {
    const double tol = 1e-9;
    {
        Timer t;
        Rng rng(202);
        double worst = 0.0;
        for (int64_t B : {1, 2})
            for (int64_t L : {4, 9, 16, 32})
                for (int64_t C : {6, 12})
                    for (int64_t heads : {1, 3}) {
                        QkvParams p = make_qkv_params(C, rng);
                        Tensor x = uniform({B, L, C}, rng);
                        Tensor got = rs_win_attention(x, heads, L, p, mix64(7, L, C));
                        auto ref = oracle::full_attention(
                            x, heads, weights_of(p),
                            1.0 / std::sqrt(static_cast<double>(C / heads)));
                        worst = std::max(worst, max_abs_diff(got.data(), ref));
                    }
        bool pass = worst < tol && t.seconds() < 30.0;
        report(2, "rs-win window==L equals full-attention oracle", pass,
               "max |diff| " + fmt(worst) + " over 32 cases", t.seconds());
    }
    {
        Timer t;
        Rng rng(303);
        double worst = 0.0;
        for (int64_t B : {1, 2})
            for (int64_t L : {4, 9, 16, 32})
                for (int64_t C : {6, 12})
                    for (int64_t heads : {1, 3}) {
                        QkvParams p = make_qkv_params(C, rng);
                        Tensor x = uniform({B, L, C}, rng);
                        Tensor got = global_attention(x, heads, 1, p);
                        auto ref = oracle::full_attention(
                            x, heads, weights_of(p),
                            1.0 / std::sqrt(static_cast<double>(C / heads)));
                        worst = std::max(worst, max_abs_diff(got.data(), ref));
                    }
        bool pass = worst < tol;
        report(3, "global attention pool==1 equals full-attention oracle", pass,
               "max |diff| " + fmt(worst) + " over 32 cases", t.seconds());
    }
}

// ---- criterion 4 -----------------------------------------------------------

void criterion_gradients() {
    Timer t;
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 2;
    cfg.num_classes = 3;
    cfg.stages = {{1, 6, 3, 4, 2, false}, {1, 12, 3, 4, 2, true}};
    cfg.seed = 5;
    Model m = build_model(cfg);
    Rng rng(404);
    Tensor img = uniform({1, 3, 8, 8}, rng);
    Tensor w = uniform({1, 3}, rng);
    auto params = parameter_list(m);
    // the small loss magnitude keeps central-difference roundoff below the
    // 1e-8 absolute floor of the relative-error formula
    auto f = [&]() { return scale(sum_all(mul(forward(m, img, Mode::eval), w)), 0.02); };
    double err = grad_check(f, params, 1e-5);
    bool scaling_ok = true;
    for (const auto& stage_blocks : m.blocks)
        for (const VbbBlockParams& bp : stage_blocks)
            scaling_ok = scaling_ok && std::abs(bp.alpha.grad()[0]) > 1e-12 &&
                         std::abs(bp.beta.grad()[0]) > 1e-12 &&
                         std::abs(bp.lambda.grad()[0]) > 1e-12;
    bool pass = err < 1e-4 && scaling_ok && t.seconds() < 300.0;
    report(4, "full tiny model gradient verification", pass,
           "max rel err " + fmt(err) + " over " + std::to_string(parameter_count(m)) +
               " parameters; scaling-weight grads " + (scaling_ok ? "nonzero" : "ZERO"),
           t.seconds());
}

// ---- criterion 5 -----------------------------------------------------------

void criterion_complexity() {
    Timer t;
    bool pass = true;
    std::string fail_detail;
    Rng rng(505);
    // counter == closed form, exactly, on small instances
    for (int64_t L : {8, 16, 24, 33, 64}) {
        int64_t C = 9, Cg = 3;
        QkvParams qkv = make_qkv_params(Cg, rng);
        ConvBranchParams conv_p = make_conv_params(Cg, rng);
        int64_t w = std::min<int64_t>(8, L);
        int64_t pool = 4;
        Tensor x = uniform({1, L, Cg}, rng);
        if (oracle::count_multiply_adds([&]() { rs_win_attention(x, 1, w, qkv, 3); }) !=
            flop_count(Mechanism::rs_win, L, C, w).total()) {
            pass = false;
            fail_detail = "rs_win counter mismatch at L=" + std::to_string(L);
        }
        if (oracle::count_multiply_adds([&]() { global_attention(x, 1, pool, qkv); }) !=
            flop_count(Mechanism::global_attn, L, C, pool).total()) {
            pass = false;
            fail_detail = "global counter mismatch at L=" + std::to_string(L);
        }
        int64_t gh = 1;
        for (int64_t d = 1; d * d <= L; ++d)
            if (L % d == 0) gh = d;
        if (oracle::count_multiply_adds([&]() { conv_branch(x, gh, L / gh, conv_p); }) !=
            flop_count(Mechanism::conv, L, C, 0).total()) {
            pass = false;
            fail_detail = "conv counter mismatch at L=" + std::to_string(L);
        }
        Tensor xf = uniform({1, L, C}, rng);
        QkvParams qkv_full = make_qkv_params(C, rng);
        if (oracle::count_multiply_adds([&]() { global_attention(xf, 1, 1, qkv_full); }) !=
            flop_count(Mechanism::full, L, C, 1).total()) {
            pass = false;
            fail_detail = "full counter mismatch at L=" + std::to_string(L);
        }
    }
    // scaling ratios at bench sizes: exact doubling laws
    for (int64_t L : {256, 512}) {
        uint64_t rs_a = flop_count(Mechanism::rs_win, L, 24, 16).core_madds;
        uint64_t rs_b = flop_count(Mechanism::rs_win, 2 * L, 24, 16).core_madds;
        if (rs_b != 2 * rs_a) pass = false;
        uint64_t ga_a = flop_count(Mechanism::global_attn, L, 24, L / 64).core_madds;
        uint64_t ga_b = flop_count(Mechanism::global_attn, 2 * L, 24, 2 * L / 64).core_madds;
        if (ga_b != 2 * ga_a) pass = false;
        uint64_t fu_a = flop_count(Mechanism::full, L, 24, 0).core_madds;
        uint64_t fu_b = flop_count(Mechanism::full, 2 * L, 24, 0).core_madds;
        if (fu_b != 4 * fu_a) pass = false;
        if (!pass && fail_detail.empty())
            fail_detail = "ratio law violated at L=" + std::to_string(L);
    }
    report(5, "complexity: counter-exact counts and scaling ratios", pass,
           pass ? "counter==formula for L<=64; 256->512->1024 ratios 2.0/2.0/4.0" : fail_detail,
           t.seconds());
}

// ---- criterion 6 -----------------------------------------------------------

RunConfig quadrant_config() {
    RunConfig cfg;
    cfg.model = ModelConfig::tiny();
    cfg.model.seed = 42;
    cfg.task = "quadrant";
    cfg.samples = 512;
    cfg.batch_size = 32;
    cfg.epochs = 50;
    cfg.lr = 1e-3;
    cfg.weight_decay = 0.05;
    return cfg;
}

void criterion_positional_signal(const std::string& out_root) {
    {
        Timer t;
        RunConfig cfg = quadrant_config();
        cfg.early_stop_accuracy = 0.95;
        TrainResult r = train_run(cfg, out_root + "/quadrant_positive");
        double best = 0.0;
        for (double a : r.epoch_accuracy) best = std::max(best, a);
        bool pass = best >= 0.95 && r.epochs_run <= 50 && t.seconds() < 600.0;
        report(6, "zero-padding positional signal (positive run)", pass,
               "train accuracy " + fmt(best) + " after " + std::to_string(r.epochs_run) +
                   " epochs",
               t.seconds());
    }
    {
        Timer t;
        RunConfig cfg = quadrant_config();
        cfg.model.disable_cnn = true;       // no conv branch, no zero-padding signal
        cfg.model.stages[0].window_size = 64;   // RS-Win degenerates to full attention
        cfg.model.stages[0].pool_size = 64;     // GA sees only the mean token
        cfg.model.stages[1].window_size = 16;
        cfg.model.stages[1].pool_size = 16;
        TrainResult r = train_run(cfg, out_root + "/quadrant_control");
        double final_acc = r.final_accuracy;
        double best = 0.0;
        for (double a : r.epoch_accuracy) best = std::max(best, a);
        bool pass = final_acc >= 0.15 && final_acc <= 0.35 && t.seconds() < 600.0;
        report(6, "position-blind negative control stays at chance", pass,
               "final accuracy " + fmt(final_acc) + ", max epoch accuracy " + fmt(best),
               t.seconds());
    }
}

// ---- criterion 7 -----------------------------------------------------------

void criterion_ablation(const std::string& out_root) {
    Timer t;
    RunConfig cfg = quadrant_config();  // all four runs share the full 50-epoch budget
    AblateResult r = ablate_run(cfg, out_root + "/ablate");
    bool structure = r.rows.size() == 4 && r.rows[0].label == "Remove CNN" &&
                     r.rows[1].label == "Remove RS-Win" && r.rows[2].label == "Remove GA" &&
                     r.rows[3].label == "VBB";
    bool note_written = fs::exists(out_root + "/ablate/seed_sensitivity.txt");
    bool pass = structure && (r.full_is_best || note_written);
    std::string detail;
    for (const AblateRow& row : r.rows)
        detail += row.label + "=" + fmt(row.accuracy) + " ";
    if (!r.full_is_best) detail += "(seed-sensitivity note written)";
    report(7, "four-way ablation table", pass, detail, t.seconds());
}

// ---- criterion 8 -----------------------------------------------------------

int run_cli(const std::string& args) {
    std::string cmd = std::string(VBB_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    if (rc == -1) return -1;
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string read_file(const std::string& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void criterion_determinism(const std::string& out_root) {
    Timer t;
    std::string cfg_path = out_root + "/determinism.cfg";
    {
        std::ofstream os(cfg_path);
        os << "task=quadrant\nimage_size=16\npatch_size=4\nnum_classes=4\n"
              "num_stages=1\nstage1.depth=1\nstage1.channels=6\nstage1.heads=3\n"
              "stage1.window=4\nstage1.pool=2\n"
              "samples=32\nbatch_size=8\nepochs=2\nseed=7\n"
              "bench_lengths=16,64,256,512\nbench_window=16\nbench_keys=16\nbench_channels=24\n";
    }
    bool pass = true;
    std::string detail = "train/bench/check byte-identical across two invocations";

    auto expect = [&](int got, int want, const std::string& what) {
        if (got != want) {
            pass = false;
            detail = what + " exited " + std::to_string(got) + ", expected " + std::to_string(want);
        }
    };
    expect(run_cli("train --config " + cfg_path + " --out " + out_root + "/t1"), 0, "train #1");
    expect(run_cli("train --config " + cfg_path + " --out " + out_root + "/t2"), 0, "train #2");
    for (const char* f : {"metrics.csv", "scaling_weights.csv", "checkpoint.vbb"}) {
        if (read_file(out_root + "/t1/" + f) != read_file(out_root + "/t2/" + f)) {
            pass = false;
            detail = std::string("train outputs differ: ") + f;
        }
        if (read_file(out_root + "/t1/" + f).empty()) {
            pass = false;
            detail = std::string("train output missing: ") + f;
        }
    }
    expect(run_cli("bench --config " + cfg_path + " --out " + out_root + "/b1"), 0, "bench #1");
    expect(run_cli("bench --config " + cfg_path + " --out " + out_root + "/b2"), 0, "bench #2");
    if (read_file(out_root + "/b1/flops.csv") != read_file(out_root + "/b2/flops.csv") ||
        read_file(out_root + "/b1/flops.csv").empty()) {
        pass = false;
        detail = "bench outputs differ or missing";
    }
    expect(run_cli("check --config " + cfg_path + " --out " + out_root + "/c1"), 0, "check #1");
    expect(run_cli("check --config " + cfg_path + " --out " + out_root + "/c2"), 0, "check #2");
    if (read_file(out_root + "/c1/check_report.txt") != read_file(out_root + "/c2/check_report.txt") ||
        read_file(out_root + "/c1/check_report.txt").empty()) {
        pass = false;
        detail = "check reports differ or missing";
    }
    // interface contract: documented exit codes
    expect(run_cli("train --config " + out_root + "/no_such.cfg --out " + out_root + "/t3"), 2,
           "train with missing config");
    expect(run_cli("check --config " + cfg_path + " --inject-permutation-fault"), 1,
           "check with injected fault");
    std::string diverge_cfg = out_root + "/diverge.cfg";
    {
        std::ofstream os(diverge_cfg);
        os << "task=quadrant\nimage_size=16\npatch_size=4\nnum_classes=4\n"
              "num_stages=1\nstage1.depth=2\nstage1.channels=6\nstage1.heads=3\n"
              "stage1.window=4\nstage1.pool=2\n"
              "samples=32\nbatch_size=8\nepochs=12\nseed=7\nlr=1e18\n";
    }
    expect(run_cli("train --config " + diverge_cfg + " --out " + out_root + "/t4"), 3,
           "train with diverging lr");
    report(8, "byte-identical reruns and exit codes", pass, detail, t.seconds());
}

}  // namespace

int main() {
    std::string out_root = (fs::temp_directory_path() / "vbb_acceptance").string();
    fs::remove_all(out_root);
    fs::create_directories(out_root);

    criterion_permutations();
    criterion_degenerate_equivalences();
    criterion_gradients();
    criterion_complexity();
    criterion_positional_signal(out_root);
    criterion_ablation(out_root);
    criterion_determinism(out_root);

    if (g_failures == 0) {
        std::printf("acceptance: all criteria passed\n");
        return 0;
    }
    std::printf("acceptance: %d criterion check(s) FAILED\n", g_failures);
    return 1;
}
