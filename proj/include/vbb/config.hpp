#pragma once

// Flat key=value run configuration, one key per line, '#' comments.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vbb/backbone.hpp"

namespace vbb {

struct RunConfig {
    ModelConfig model = ModelConfig::tiny();
    std::string task = "quadrant";
    int64_t samples = 512;
    int64_t batch_size = 32;
    int64_t epochs = 50;
    double lr = 1e-3;
    double weight_decay = 0.05;
    double early_stop_accuracy = 0.0;  // 0 disables early stopping

    std::vector<int64_t> bench_lengths{256, 512, 1024};
    int64_t bench_window = 16;
    int64_t bench_keys = 64;  // pooled key count; pool_size = max(1, L / bench_keys)
    int64_t bench_channels = 24;

    void validate() const {
        model.validate();
        if (task != "quadrant" && task != "stripes")
            throw ConfigError("config: unknown task '" + task + "'");
        int64_t task_classes = task == "quadrant" ? 4 : 2;
        if (model.num_classes != task_classes)
            throw ConfigError("config: task '" + task + "' has " + std::to_string(task_classes) +
                              " classes, model expects " + std::to_string(model.num_classes));
        if (samples < 1 || batch_size < 1 || epochs < 1)
            throw ConfigError("config: samples/batch_size/epochs must be positive");
        if (lr <= 0.0) throw ConfigError("config: lr must be positive");
        if (weight_decay < 0.0) throw ConfigError("config: weight_decay must be non-negative");
        if (early_stop_accuracy < 0.0 || early_stop_accuracy > 1.0)
            throw ConfigError("config: early_stop_accuracy must lie in [0,1]");
        if (bench_lengths.empty()) throw ConfigError("config: bench_lengths must not be empty");
        for (int64_t L : bench_lengths)
            if (L < 1) throw ConfigError("config: bench lengths must be positive");
        if (bench_window < 1 || bench_keys < 1) throw ConfigError("config: bench settings must be positive");
        if (bench_channels < 3 || bench_channels % 3 != 0)
            throw ConfigError("config: bench_channels must be a positive multiple of 3");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline int64_t to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        int64_t r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "0" || v == "false") return false;
    if (v == "1" || v == "true") return true;
    throw ConfigError("config: key '" + key + "' expects 0/1, got '" + v + "'");
}

}  // namespace detail

inline RunConfig parse_run_config(std::istream& is) {
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + " is not key=value: '" +
                              line + "'");
        std::string key = detail::trim(line.substr(0, eq));
        std::string val = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config: empty key on line " + std::to_string(lineno));
        if (kv.count(key)) throw ConfigError("config: duplicate key '" + key + "'");
        kv[key] = val;
    }

    RunConfig cfg;
    auto take = [&kv](const std::string& key) -> std::string* {
        auto it = kv.find(key);
        return it == kv.end() ? nullptr : &it->second;
    };

    if (auto* v = take("num_stages")) {
        int64_t n = detail::to_int("num_stages", *v);
        if (n < 1 || n > 16) throw ConfigError("config: num_stages out of range");
        cfg.model.stages.assign(static_cast<size_t>(n), StageConfig{});
        for (size_t s = 0; s < cfg.model.stages.size(); ++s) cfg.model.stages[s].downsample = s > 0;
        kv.erase("num_stages");
    }
    for (size_t s = 0; s < cfg.model.stages.size(); ++s) {
        std::string prefix = "stage" + std::to_string(s + 1) + ".";
        StageConfig& st = cfg.model.stages[s];
        if (auto* v = take(prefix + "depth")) st.depth = detail::to_int(prefix + "depth", *v), kv.erase(prefix + "depth");
        if (auto* v = take(prefix + "channels")) st.channels = detail::to_int(prefix + "channels", *v), kv.erase(prefix + "channels");
        if (auto* v = take(prefix + "heads")) st.heads = detail::to_int(prefix + "heads", *v), kv.erase(prefix + "heads");
        if (auto* v = take(prefix + "window")) st.window_size = detail::to_int(prefix + "window", *v), kv.erase(prefix + "window");
        if (auto* v = take(prefix + "pool")) st.pool_size = detail::to_int(prefix + "pool", *v), kv.erase(prefix + "pool");
        if (auto* v = take(prefix + "downsample")) st.downsample = detail::to_bool(prefix + "downsample", *v), kv.erase(prefix + "downsample");
    }

    for (auto& [key, val] : kv) {
        if (key == "image_size") cfg.model.image_size = detail::to_int(key, val);
        else if (key == "patch_size") cfg.model.patch_size = detail::to_int(key, val);
        else if (key == "num_classes") cfg.model.num_classes = detail::to_int(key, val);
        else if (key == "disable_cnn") cfg.model.disable_cnn = detail::to_bool(key, val);
        else if (key == "disable_rswin") cfg.model.disable_rswin = detail::to_bool(key, val);
        else if (key == "disable_ga") cfg.model.disable_ga = detail::to_bool(key, val);
        else if (key == "positional_encoding") {
            if (val == "none") cfg.model.positional_encoding = PositionalEncoding::none;
            else if (val == "absolute") cfg.model.positional_encoding = PositionalEncoding::absolute;
            else throw ConfigError("config: positional_encoding must be none|absolute, got '" + val + "'");
        } else if (key == "seed") cfg.model.seed = static_cast<uint64_t>(detail::to_int(key, val));
        else if (key == "task") cfg.task = val;
        else if (key == "samples") cfg.samples = detail::to_int(key, val);
        else if (key == "batch_size") cfg.batch_size = detail::to_int(key, val);
        else if (key == "epochs") cfg.epochs = detail::to_int(key, val);
        else if (key == "lr") cfg.lr = detail::to_double(key, val);
        else if (key == "weight_decay") cfg.weight_decay = detail::to_double(key, val);
        else if (key == "early_stop_accuracy") cfg.early_stop_accuracy = detail::to_double(key, val);
        else if (key == "bench_lengths") {
            cfg.bench_lengths.clear();
            std::stringstream ss(val);
            std::string item;
            while (std::getline(ss, item, ','))
                cfg.bench_lengths.push_back(detail::to_int(key, detail::trim(item)));
        } else if (key == "bench_window") cfg.bench_window = detail::to_int(key, val);
        else if (key == "bench_keys") cfg.bench_keys = detail::to_int(key, val);
        else if (key == "bench_channels") cfg.bench_channels = detail::to_int(key, val);
        else throw ConfigError("config: unknown key '" + key + "'");
    }
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    return parse_run_config(is);
}

}  // namespace vbb
