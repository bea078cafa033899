#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vbb/train.hpp"

using namespace vbb;
namespace fs = std::filesystem;

namespace {

RunConfig micro_config() {
    RunConfig cfg;
    cfg.model.image_size = 16;
    cfg.model.patch_size = 4;
    cfg.model.num_classes = 4;
    cfg.model.stages = {{1, 6, 3, 4, 2, false}};
    cfg.model.seed = 11;
    cfg.task = "quadrant";
    cfg.samples = 10;
    cfg.batch_size = 4;
    cfg.epochs = 2;
    return cfg;
}

std::string read_file(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

size_t line_count(const std::string& s) {
    size_t n = 0;
    for (char c : s)
        if (c == '\n') ++n;
    return n;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("config parsing round trip") {
    std::stringstream ss;
    ss << "# a comment\n"
          "image_size = 16\n"
          "patch_size=4\n"
          "num_classes=2\n"
          "task=stripes\n"
          "num_stages=1\n"
          "stage1.depth=1\n"
          "stage1.channels=6\n"
          "stage1.heads=3\n"
          "stage1.window=4\n"
          "stage1.pool=2\n"
          "samples=32  # trailing comment\n"
          "epochs=3\n"
          "lr=0.002\n"
          "seed=5\n";
    RunConfig cfg = parse_run_config(ss);
    cfg.validate();
    REQUIRE(cfg.model.image_size == 16);
    REQUIRE(cfg.model.stages.size() == 1);
    REQUIRE(cfg.model.stages[0].window_size == 4);
    REQUIRE(cfg.task == "stripes");
    REQUIRE(cfg.lr == 0.002);
    REQUIRE(cfg.model.seed == 5);
}

TEST_CASE("config parsing rejects malformed input") {
    auto parse = [](const std::string& text) {
        std::stringstream ss(text);
        RunConfig cfg = parse_run_config(ss);
        cfg.validate();
        return cfg;
    };
    REQUIRE_THROWS_AS(parse("no_such_key=1\n"), ConfigError);
    REQUIRE_THROWS_AS(parse("epochs=abc\n"), ConfigError);
    REQUIRE_THROWS_AS(parse("image_size=16\nimage_size=32\n"), ConfigError);
    REQUIRE_THROWS_AS(parse("this line has no equals\n"), ConfigError);
    REQUIRE_THROWS_AS(parse("task=stripes\n"), ConfigError);  // 4 classes vs 2-class task
    REQUIRE_THROWS_AS(parse("lr=-1\n"), ConfigError);
    REQUIRE_THROWS_AS(parse("positional_encoding=fancy\n"), ConfigError);
}

TEST_CASE("dataset generation is deterministic and labelled correctly") {
    SyntheticDataset a = make_dataset("quadrant", 24, 16, 3);
    SyntheticDataset b = make_dataset("quadrant", 24, 16, 3);
    REQUIRE(a.images == b.images);
    REQUIRE(a.labels == b.labels);
    SyntheticDataset c = make_dataset("quadrant", 24, 16, 4);
    REQUIRE(a.images != c.images);

    // brightest pixel sits inside the labelled quadrant
    int64_t H = 16;
    for (int64_t n = 0; n < a.size(); ++n) {
        const auto& img = a.images[static_cast<size_t>(n)];
        int64_t best = 0;
        for (int64_t i = 1; i < H * H; ++i)
            if (img[static_cast<size_t>(i)] > img[static_cast<size_t>(best)]) best = i;
        int64_t qy = (best / H) / (H / 2), qx = (best % H) / (H / 2);
        REQUIRE(qy * 2 + qx == a.labels[static_cast<size_t>(n)]);
    }
}

TEST_CASE("stripes dataset varies along the labelled axis only") {
    SyntheticDataset ds = make_dataset("stripes", 8, 16, 9);
    int64_t H = 16;
    for (int64_t n = 0; n < ds.size(); ++n) {
        const auto& img = ds.images[static_cast<size_t>(n)];
        // strip the noise by averaging rows/columns of channel 0
        double row_var = 0.0, col_var = 0.0;
        for (int64_t y = 0; y < H; ++y) {
            double rmean = 0.0, cmean = 0.0;
            for (int64_t x = 0; x < H; ++x) {
                rmean += img[static_cast<size_t>(y * H + x)];
                cmean += img[static_cast<size_t>(x * H + y)];
            }
            row_var += (rmean / H) * (rmean / H);
            col_var += (cmean / H) * (cmean / H);
        }
        if (ds.labels[static_cast<size_t>(n)] == 0)
            REQUIRE(row_var > 10.0 * col_var);  // horizontal: rows are level sets
        else
            REQUIRE(col_var > 10.0 * row_var);
    }
}

TEST_CASE("cosine schedule decays from base towards zero") {
    REQUIRE(cosine_lr(0.1, 0, 10) == Catch::Approx(0.1));
    REQUIRE(cosine_lr(0.1, 5, 10) == Catch::Approx(0.05));
    REQUIRE(cosine_lr(0.1, 9, 10) < 0.01);
}

TEST_CASE("adamw minimizes a quadratic") {
    Tensor x = scalar(10.0, true);
    std::vector<Tensor> params{x};
    AdamW opt(params, 0.0);
    for (int i = 0; i < 400; ++i) {
        Tensor diff = sub(x, scalar(3.0));
        Tensor loss = sum_all(mul(diff, diff));
        zero_grad(params);
        backward(loss);
        opt.step(params, 0.05);
    }
    REQUIRE(std::abs(x.item() - 3.0) < 0.05);
}

TEST_CASE("train_run writes metrics, scaling stats and a checkpoint") {
    TempDir dir("vbb_train_smoke");
    RunConfig cfg = micro_config();
    TrainResult r = train_run(cfg, dir.str());
    REQUIRE(r.epochs_run == 2);
    for (double l : r.epoch_loss) REQUIRE(std::isfinite(l));

    std::string metrics = read_file(dir.path / "metrics.csv");
    REQUIRE(line_count(metrics) == 3);  // header + one row per epoch
    REQUIRE(metrics.rfind("epoch,loss,accuracy\n", 0) == 0);

    std::string scaling = read_file(dir.path / "scaling_weights.csv");
    REQUIRE(line_count(scaling) == 4);  // header + epoch 0 + per-epoch rows
    std::stringstream ss(scaling);
    std::string header, epoch0;
    std::getline(ss, header);
    REQUIRE(header == "epoch,stage1_alpha,stage1_beta,stage1_lambda");
    std::getline(ss, epoch0);
    REQUIRE(epoch0 == "0,1,1,1");

    Model m = build_model(cfg.model);
    REQUIRE_NOTHROW(load_checkpoint(m, (dir.path / "checkpoint.vbb").string()));
}

TEST_CASE("training runs are byte-reproducible") {
    TempDir d1("vbb_det_1"), d2("vbb_det_2");
    RunConfig cfg = micro_config();
    train_run(cfg, d1.str());
    train_run(cfg, d2.str());
    REQUIRE(read_file(d1.path / "metrics.csv") == read_file(d2.path / "metrics.csv"));
    REQUIRE(read_file(d1.path / "scaling_weights.csv") == read_file(d2.path / "scaling_weights.csv"));
    REQUIRE(read_file(d1.path / "checkpoint.vbb") == read_file(d2.path / "checkpoint.vbb"));
}

TEST_CASE("training learns the easy stripes task a little") {
    TempDir dir("vbb_stripes");
    RunConfig cfg = micro_config();
    cfg.task = "stripes";
    cfg.model.num_classes = 2;
    cfg.samples = 48;
    cfg.batch_size = 16;
    cfg.epochs = 6;
    TrainResult r = train_run(cfg, dir.str());
    REQUIRE(r.epoch_loss.back() < r.epoch_loss.front());
}

TEST_CASE("training moves the scaling weights off their init") {
    TempDir dir("vbb_scaling_move");
    RunConfig cfg = micro_config();
    cfg.samples = 32;
    cfg.epochs = 4;
    train_run(cfg, dir.str());
    Model m = build_model(cfg.model);
    load_checkpoint(m, (dir.path / "checkpoint.vbb").string());
    auto stats = scaling_weight_stats(m);
    bool moved = false;
    for (const auto& s : stats)
        moved = moved || s.alpha_mean != 1.0 || s.beta_mean != 1.0 || s.lambda_mean != 1.0;
    REQUIRE(moved);
}

TEST_CASE("early stopping cuts the run short") {
    TempDir dir("vbb_earlystop");
    RunConfig cfg = micro_config();
    cfg.early_stop_accuracy = 1e-9;  // any accuracy satisfies it
    TrainResult r = train_run(cfg, dir.str());
    REQUIRE(r.epochs_run == 1);
}

TEST_CASE("diverging training reports a numeric failure") {
    TempDir dir("vbb_diverge");
    RunConfig cfg = micro_config();
    cfg.lr = 1e18;
    cfg.epochs = 12;
    cfg.model.stages = {{2, 6, 3, 4, 2, false}};
    REQUIRE_THROWS_AS(train_run(cfg, dir.str()), NumericError);
}

TEST_CASE("bench writes verified flop counts with the stated ratios") {
    TempDir dir("vbb_bench");
    RunConfig cfg = micro_config();
    cfg.bench_lengths = {16, 64, 256, 512, 1024};
    cfg.bench_window = 16;
    cfg.bench_keys = 64;
    cfg.bench_channels = 24;
    BenchResult r = bench_run(cfg, dir.str());
    REQUIRE(r.counter_verified);
    REQUIRE(r.entries.size() == 5 * 4);

    auto find = [&](Mechanism m, int64_t L) -> const FlopEntry& {
        for (const FlopEntry& e : r.entries)
            if (e.mechanism == m && e.length == L) return e;
        FAIL("entry not found");
        return r.entries[0];
    };
    REQUIRE(find(Mechanism::rs_win, 512).core_madds == 2 * find(Mechanism::rs_win, 256).core_madds);
    REQUIRE(find(Mechanism::full, 512).core_madds == 4 * find(Mechanism::full, 256).core_madds);
    REQUIRE(find(Mechanism::global_attn, 512).core_madds ==
            2 * find(Mechanism::global_attn, 256).core_madds);

    std::string csv = read_file(dir.path / "flops.csv");
    REQUIRE(csv.rfind("mechanism,length,core_madds,projection_madds,total_madds\n", 0) == 0);
    REQUIRE(line_count(csv) == 21);
}

TEST_CASE("bench is byte-reproducible") {
    TempDir d1("vbb_bench_det1"), d2("vbb_bench_det2");
    RunConfig cfg = micro_config();
    cfg.bench_lengths = {16, 256};
    bench_run(cfg, d1.str());
    bench_run(cfg, d2.str());
    REQUIRE(read_file(d1.path / "flops.csv") == read_file(d2.path / "flops.csv"));
}

TEST_CASE("ablate produces the four-row table") {
    TempDir dir("vbb_ablate");
    RunConfig cfg = micro_config();
    cfg.samples = 8;
    cfg.batch_size = 4;
    cfg.epochs = 1;
    AblateResult r = ablate_run(cfg, dir.str());
    REQUIRE(r.rows.size() == 4);
    REQUIRE(r.rows[0].label == "Remove CNN");
    REQUIRE(r.rows[1].label == "Remove RS-Win");
    REQUIRE(r.rows[2].label == "Remove GA");
    REQUIRE(r.rows[3].label == "VBB");
    std::string csv = read_file(dir.path / "ablate.csv");
    REQUIRE(line_count(csv) == 5);
    for (const AblateRow& row : r.rows) {
        Model m = build_model(RunConfig(cfg).model);  // base arch, for comparing param names
        (void)m;
        REQUIRE(fs::exists(dir.path / row.dir / "metrics.csv"));
        REQUIRE(fs::exists(dir.path / row.dir / "checkpoint.vbb"));
    }
}

TEST_CASE("ablated runs carry no parameters for the removed mechanism") {
    TempDir dir("vbb_ablate_params");
    RunConfig cfg = micro_config();
    cfg.samples = 4;
    cfg.batch_size = 4;
    cfg.epochs = 1;
    cfg.model.disable_cnn = true;
    train_run(cfg, dir.str());
    Model m = build_model(cfg.model);
    for (const auto& [name, t] : m.parameters) REQUIRE(name.find("conv") == std::string::npos);
}

TEST_CASE("ablate is byte-reproducible across thread counts") {
    TempDir d1("vbb_ablate_det1"), d2("vbb_ablate_det2");
    RunConfig cfg = micro_config();
    cfg.samples = 8;
    cfg.batch_size = 4;
    cfg.epochs = 1;
    ablate_run(cfg, d1.str());
    setenv("VBB_THREADS", "1", 1);
    REQUIRE(max_concurrent_units() == 1);
    ablate_run(cfg, d2.str());
    unsetenv("VBB_THREADS");
    REQUIRE(read_file(d1.path / "ablate.csv") == read_file(d2.path / "ablate.csv"));
    REQUIRE(read_file(d1.path / "full" / "metrics.csv") == read_file(d2.path / "full" / "metrics.csv"));
}

TEST_CASE("check suite passes on a healthy build") {
    RunConfig cfg = micro_config();
    auto items = check_run(cfg);
    REQUIRE(items.size() == 5);
    for (const CheckItem& item : items) {
        INFO(item.name << ": " << item.detail);
        REQUIRE(item.pass);
    }
}

TEST_CASE("fault injection makes the permutation check fail") {
    RunConfig cfg = micro_config();
    auto items = check_run(cfg, true);
    REQUIRE_FALSE(items[0].pass);
}

TEST_CASE("csv doubles carry 17 significant digits") {
    REQUIRE(csv_double(1.0) == "1");
    REQUIRE(csv_double(0.1) == "0.10000000000000001");
    REQUIRE(csv_double(1.0 / 3.0) == "0.33333333333333331");
}
