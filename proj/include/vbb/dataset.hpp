#pragma once

// Deterministic synthetic datasets.
//
// quadrant: a bright blob in one of four quadrants, label = quadrant. Blob
// centers sit on a lattice chosen so that every image has an exact half-image
// translate in each of the other three quadrants, and the background is a
// constant pedestal with no noise. A position-blind model therefore maps
// colliding inputs to identical logits and cannot beat the per-collision-class
// majority, which pins its train accuracy near chance; the quadrant label is
// recoverable only through a positional channel.
//
// stripes: horizontal vs vertical sinusoidal stripes, solvable from local
// texture alone.

#include <cstdint>
#include <string>
#include <vector>

#include "vbb/tensor.hpp"

namespace vbb {

struct SyntheticDataset {
    std::string task;
    int64_t image_size = 0;
    int64_t num_classes = 0;
    std::vector<std::vector<double>> images;  // each 3*H*W row-major
    std::vector<int64_t> labels;

    int64_t size() const { return static_cast<int64_t>(images.size()); }
};

inline SyntheticDataset make_dataset(const std::string& task, int64_t samples, int64_t image_size,
                                     uint64_t seed) {
    if (task != "quadrant" && task != "stripes")
        throw ConfigError("dataset: unknown task '" + task + "'");
    if (samples < 1 || image_size < 4) throw ConfigError("dataset: samples/image_size out of range");
    SyntheticDataset ds;
    ds.task = task;
    ds.image_size = image_size;
    ds.num_classes = task == "quadrant" ? 4 : 2;
    Rng rng(mix64(seed, 0xda7a5e7ULL));
    int64_t H = image_size, W = image_size;
    constexpr double two_pi = 6.283185307179586476925287;

    for (int64_t n = 0; n < samples; ++n) {
        std::vector<double> img(static_cast<size_t>(3 * H * W));
        int64_t label = 0;
        if (task == "quadrant") {
            for (double& v : img) v = 0.15;  // constant pedestal, no noise
            label = rng.below(4);
            int64_t qy = label / 2, qx = label % 2;
            // centers at quarter-height/half-height of the quadrant interior;
            // the support (radius H/8) never clips an image border or crosses
            // a quadrant boundary, so exact half-image translates exist
            double h2 = static_cast<double>(H) / 2.0;
            double cy = qy * h2 + h2 / 4.0 + rng.below(2) * (h2 / 8.0) - 0.5;
            double cx = qx * h2 + h2 / 4.0 + rng.below(2) * (h2 / 8.0) - 0.5;
            double sigma = static_cast<double>(H) / 16.0;
            double radius = static_cast<double>(H) / 8.0;
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    double dy = y - cy, dx = x - cx;
                    if (std::abs(dy) > radius || std::abs(dx) > radius) continue;
                    double bump = std::exp(-0.5 * (dy * dy + dx * dx) / (sigma * sigma));
                    for (int64_t c = 0; c < 3; ++c) img[(c * H + y) * W + x] += bump;
                }
        } else {
            for (double& v : img) v = rng.uniform(-0.05, 0.05);
            label = rng.below(2);
            double freq = 2.0 + rng.below(2);  // 2 or 3 full periods
            double phase = rng.uniform() * two_pi;
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    double coord = label == 0 ? static_cast<double>(y) : static_cast<double>(x);
                    double v = std::sin(two_pi * freq * coord / static_cast<double>(H) + phase);
                    for (int64_t c = 0; c < 3; ++c) img[(c * H + y) * W + x] += v;
                }
        }
        ds.images.push_back(std::move(img));
        ds.labels.push_back(label);
    }
    return ds;
}

// assembles images[order[first..first+count)] into a [count,3,H,W] tensor
inline Tensor make_batch(const SyntheticDataset& ds, const std::vector<int64_t>& order,
                         int64_t first, int64_t count, std::vector<int64_t>& labels_out) {
    int64_t H = ds.image_size;
    std::vector<double> data;
    data.reserve(static_cast<size_t>(count * 3 * H * H));
    labels_out.clear();
    for (int64_t i = first; i < first + count; ++i) {
        const auto& img = ds.images[static_cast<size_t>(order[static_cast<size_t>(i)])];
        data.insert(data.end(), img.begin(), img.end());
        labels_out.push_back(ds.labels[static_cast<size_t>(order[static_cast<size_t>(i)])]);
    }
    return Tensor::make({count, 3, H, H}, std::move(data));
}

}  // namespace vbb
