#include "afrd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "afrd/error.hpp"

namespace afrd {

namespace {

// Sum of mid-ranks (1-based) of the positive entries, doubled so it stays an
// exact integer: each tie group spanning ranks a..b contributes (a+b) per
// member.
struct RankSums {
    std::uint64_t twice_pos_rank_sum = 0;
    std::uint64_t positives = 0, negatives = 0;
};

RankSums rank_sums(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) {
        throw MetricError("auroc: " + std::to_string(scores.size()) + " scores for " +
                          std::to_string(labels.size()) + " labels");
    }
    for (double s : scores)
        if (std::isnan(s)) throw MetricError("auroc: NaN score");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    RankSums r;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        std::uint64_t pos_in_group = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            pos_in_group += labels[order[j]] != 0;
            ++j;
        }
        // ranks i+1 .. j
        r.twice_pos_rank_sum += pos_in_group * (static_cast<std::uint64_t>(i + 1) + j);
        i = j;
    }
    for (auto l : labels) (l != 0 ? r.positives : r.negatives) += 1;
    return r;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    const RankSums r = rank_sums(scores, labels);
    if (r.positives == 0 || r.negatives == 0) {
        throw MetricError("auroc undefined: need both classes, got " + std::to_string(r.positives) + " positive and " +
                          std::to_string(r.negatives) + " negative");
    }
    // 2U = 2*R+ - n+(n+ + 1)
    const std::uint64_t twice_u = r.twice_pos_rank_sum - r.positives * (r.positives + 1);
    return static_cast<double>(twice_u) / (2.0 * static_cast<double>(r.positives) * static_cast<double>(r.negatives));
}

double pixel_auroc(std::span<const AnomalyResult> results, std::span<const std::vector<std::uint8_t>> masks) {
    if (results.size() != masks.size()) {
        throw MetricError("pixel_auroc: " + std::to_string(results.size()) + " maps for " +
                          std::to_string(masks.size()) + " masks");
    }
    std::size_t total = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& r = results[i];
        if (r.map.size() != r.height * r.width) throw MetricError("pixel_auroc: malformed map for " + r.sample_id);
        if (!masks[i].empty() && masks[i].size() != r.map.size()) {
            throw MetricError("pixel_auroc: mask size mismatch for " + r.sample_id);
        }
        total += r.map.size();
    }
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
    scores.reserve(total);
    labels.reserve(total);
    for (std::size_t i = 0; i < results.size(); ++i) {
        scores.insert(scores.end(), results[i].map.begin(), results[i].map.end());
        if (masks[i].empty()) {
            labels.insert(labels.end(), results[i].map.size(), std::uint8_t{0});
        } else {
            for (auto m : masks[i]) labels.push_back(m != 0);
        }
    }
    try {
        return auroc(scores, labels);
    } catch (const MetricError& e) {
        throw MetricError(std::string("pixel_auroc: ") + e.what());
    }
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    const RankSums r = rank_sums(scores, labels);
    if (r.positives == 0 || r.negatives == 0) throw MetricError("roc_curve undefined: need both classes");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<RocPoint> pts{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
    std::uint64_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double t = scores[order[i]];
        while (i < order.size() && scores[order[i]] == t) {
            (labels[order[i]] != 0 ? tp : fp) += 1;
            ++i;
        }
        pts.push_back({t, static_cast<double>(fp) / static_cast<double>(r.negatives),
                       static_cast<double>(tp) / static_cast<double>(r.positives)});
    }
    return pts;
}

namespace {

// Index into a half-sample symmetric extension of [0, n): period 2n.
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
    const auto period = static_cast<std::ptrdiff_t>(2 * n);
    std::ptrdiff_t k = i % period;
    if (k < 0) k += period;
    return static_cast<std::size_t>(k < static_cast<std::ptrdiff_t>(n) ? k : period - 1 - k);
}

}  // namespace

std::vector<double> gaussian_smooth(std::span<const double> map, std::size_t height, std::size_t width,
                                    double sigma) {
    if (map.size() != height * width) throw MetricError("gaussian_smooth: map size does not match shape");
    if (!(sigma >= 0)) throw MetricError("gaussian_smooth: sigma must be >= 0");
    std::vector<double> out(map.begin(), map.end());
    if (sigma == 0 || map.empty()) return out;

    const auto radius = static_cast<std::ptrdiff_t>(std::ceil(4.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double norm = 0;
    for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
        const double v = std::exp(-0.5 * static_cast<double>(k * k) / (sigma * sigma));
        kernel[static_cast<std::size_t>(k + radius)] = v;
        norm += v;
    }
    for (auto& v : kernel) v /= norm;

    std::vector<double> tmp(map.size());
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            double acc = 0;
            for (std::ptrdiff_t k = -radius; k <= radius; ++k)
                acc += kernel[static_cast<std::size_t>(k + radius)] *
                       out[y * width + reflect_index(static_cast<std::ptrdiff_t>(x) + k, width)];
            tmp[y * width + x] = acc;
        }
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            double acc = 0;
            for (std::ptrdiff_t k = -radius; k <= radius; ++k)
                acc += kernel[static_cast<std::size_t>(k + radius)] *
                       tmp[reflect_index(static_cast<std::ptrdiff_t>(y) + k, height) * width + x];
            out[y * width + x] = acc;
        }
    return out;
}

}  // namespace afrd
