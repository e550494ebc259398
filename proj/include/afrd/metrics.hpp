// Anomaly maps, ROC metrics and map smoothing. Precision independent.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace afrd {

/// Full-resolution anomaly map for one sample plus its scalar score.
struct AnomalyResult {
    std::vector<double> map;  // row-major [height, width], values >= 0
    std::size_t height = 0, width = 0;
    double image_score = 0;
    std::string sample_id;
};

/// Rank-based (Mann-Whitney) AUROC with mid-rank ties; equals the probability
/// that a random positive outscores a random negative, counting ties as 1/2.
/// Throws MetricError unless both classes are present.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// AUROC over the pooled per-pixel population of all samples. An empty mask
/// stands for an all-normal sample. Throws MetricError when no pixel is
/// anomalous (or none is normal).
double pixel_auroc(std::span<const AnomalyResult> results, std::span<const std::vector<std::uint8_t>> masks);

struct RocPoint {
    double threshold, fpr, tpr;
};

/// ROC curve at every distinct score, from (0,0) to (1,1).
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Separable Gaussian blur with a normalized kernel truncated at 4 sigma and
/// half-sample symmetric (reflective) boundaries. sigma = 0 returns the input.
std::vector<double> gaussian_smooth(std::span<const double> map, std::size_t height, std::size_t width,
                                    double sigma);

}  // namespace afrd
