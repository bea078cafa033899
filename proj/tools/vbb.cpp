// vbb: train | bench | ablate | check on toy-scale synthetic data.
// Exit codes: 0 ok, 1 check failure, 2 config error, 3 numeric failure.

#include <CLI11.hpp>
#include <cstdio>
#include <exception>
#include <string>

#include "vbb/train.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    int64_t seed = -1;  // -1: keep the config's seed
};

vbb::RunConfig load_config(const CommonArgs& args) {
    vbb::RunConfig cfg = vbb::load_run_config(args.config_path);
    if (args.seed >= 0) cfg.model.seed = static_cast<uint64_t>(args.seed);
    cfg.validate();
    return cfg;
}

int run_train(const CommonArgs& args) {
    vbb::RunConfig cfg = load_config(args);
    vbb::TrainResult r = vbb::train_run(cfg, args.out_dir);
    std::printf("train: %lld epoch(s), final loss %s, final accuracy %s\n",
                static_cast<long long>(r.epochs_run), vbb::csv_double(r.epoch_loss.back()).c_str(),
                vbb::csv_double(r.final_accuracy).c_str());
    std::printf("train: wrote %s/metrics.csv, scaling_weights.csv, checkpoint.vbb\n",
                args.out_dir.c_str());
    return 0;
}

int run_bench(const CommonArgs& args) {
    vbb::RunConfig cfg = load_config(args);
    vbb::BenchResult r = vbb::bench_run(cfg, args.out_dir);
    std::printf("bench: wrote %s/flops.csv (%zu rows)\n", args.out_dir.c_str(), r.entries.size());
    if (!r.counter_verified) {
        std::printf("FAIL bench: instrumented counter disagrees with the closed-form counts\n");
        return 1;
    }
    std::printf("bench: counter-verified all lengths <= 64\n");
    return 0;
}

int run_ablate(const CommonArgs& args) {
    vbb::RunConfig cfg = load_config(args);
    vbb::AblateResult r = vbb::ablate_run(cfg, args.out_dir);
    for (const vbb::AblateRow& row : r.rows)
        std::printf("%-14s accuracy %s (%lld epochs)\n", row.label.c_str(),
                    vbb::csv_double(row.accuracy).c_str(), static_cast<long long>(row.epochs_run));
    if (!r.full_is_best)
        std::printf("note: full configuration was not best on this seed; see seed_sensitivity.txt\n");
    std::printf("ablate: wrote %s/ablate.csv\n", args.out_dir.c_str());
    return 0;
}

int run_check(const CommonArgs& args, bool inject_fault) {
    vbb::RunConfig cfg = load_config(args);
    auto items = vbb::check_run(cfg, inject_fault);
    bool all_pass = true;
    std::string report;
    for (const vbb::CheckItem& item : items) {
        all_pass = all_pass && item.pass;
        std::string line = std::string(item.pass ? "PASS " : "FAIL ") + item.name;
        if (!item.detail.empty()) line += " (" + item.detail + ")";
        std::printf("%s\n", line.c_str());
        report += line + "\n";
    }
    if (!args.out_dir.empty()) {
        std::filesystem::create_directories(args.out_dir);
        std::ofstream os(args.out_dir + "/check_report.txt");
        os << report;
    }
    return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vbb: three-branch sparse attention block, toy-scale harness"};
    app.require_subcommand(1);

    CommonArgs train_args, bench_args, ablate_args, check_args;
    bool inject_fault = false;

    auto add_common = [](CLI::App* sub, CommonArgs& args, bool out_required) {
        sub->add_option("--config", args.config_path, "key=value config file")->required();
        auto* out = sub->add_option("--out", args.out_dir, "output directory");
        if (out_required) out->required();
        sub->add_option("--seed", args.seed, "override the config seed");
    };

    CLI::App* train = app.add_subcommand("train", "train on synthetic data, write metrics CSVs");
    add_common(train, train_args, true);
    CLI::App* bench = app.add_subcommand("bench", "write per-mechanism multiply-add counts");
    add_common(bench, bench_args, true);
    CLI::App* ablate = app.add_subcommand("ablate", "train full and single-mechanism-removed runs");
    add_common(ablate, ablate_args, true);
    CLI::App* check = app.add_subcommand("check", "run the invariant suite");
    add_common(check, check_args, false);
    check->add_flag("--inject-permutation-fault", inject_fault,
                    "test hook: corrupt a restore index so the permutation check fails")
        ->group("");  // hidden

    try {
        app.parse(argc, argv);
        if (train->parsed()) return run_train(train_args);
        if (bench->parsed()) return run_bench(bench_args);
        if (ablate->parsed()) return run_ablate(ablate_args);
        if (check->parsed()) return run_check(check_args, inject_fault);
        return 2;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    } catch (const vbb::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const vbb::NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
