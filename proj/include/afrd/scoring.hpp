// Anomaly maps from teacher/student feature discrepancy, and evaluation.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "afrd/metrics.hpp"
#include "afrd/train.hpp"

AFRD_BEGIN_NAMESPACE

enum class ImageScoreMode { max, topk };

std::string to_string(ImageScoreMode mode);
ImageScoreMode parse_image_score_mode(const std::string& text);

struct ScoreOptions {
    double smooth_sigma = 4.0;  // 0 disables smoothing
    ImageScoreMode image_score = ImageScoreMode::max;
    std::size_t top_k = 10;  // pixels averaged in topk mode

    void validate() const;  // throws ConfigError
};

/// Scalar score of a (smoothed) map: its maximum, or the mean of its top_k
/// largest values.
double image_score(const std::vector<double>& map, const ScoreOptions& options);

/// Per level 1 - cos(target, student), bilinearly resized to height x width,
/// summed over levels, then smoothed. Pyramids must have batch 1.
AnomalyResult anomaly_map(const FeaturePyramid& target, const FeaturePyramid& student, std::size_t height,
                          std::size_t width, const ScoreOptions& options, const std::string& sample_id = {});

/// Throws NumericError when any parameter or buffer is not finite.
void check_finite(const AfrdModel& model);

/// Scores one set against a model in eval mode.
AnomalyResult score(const AfrdModel& model, const ImageSet& set, const ScoreOptions& options = {});
/// Same, from cached per-lighting teacher pyramids of the model's inputs.
AnomalyResult score_features(const AfrdModel& model, const std::vector<FeaturePyramid>& feats, std::size_t height,
                             std::size_t width, const ScoreOptions& options, const std::string& sample_id = {});

struct EvalReport {
    double i_auroc = 0;
    std::optional<double> p_auroc;
    std::vector<AnomalyResult> results;
    std::vector<std::uint8_t> labels;  // 1 = anomalous
    std::vector<RocPoint> roc;

    /// `sample_id,label,image_score`
    std::string scores_csv() const;
    /// `threshold,fpr,tpr`
    std::string roc_csv() const;
    std::string summary() const;
};

/// Metrics over precomputed results. Masks may be empty for normal samples;
/// P-AUROC is reported only when every anomalous sample has a mask.
EvalReport summarize(std::vector<AnomalyResult> results, std::vector<std::uint8_t> labels,
                     const std::vector<std::vector<std::uint8_t>>& masks);

EvalReport evaluate(const AfrdModel& model, const std::vector<ImageSet>& test_sets,
                    const ScoreOptions& options = {}, std::size_t threads = 0);
/// Uses a feature bank extracted from `test_sets` (same order).
EvalReport evaluate(const AfrdModel& model, const std::vector<ImageSet>& test_sets, const FeatureBank& bank,
                    const ScoreOptions& options = {}, std::size_t threads = 0);

/// Writes <dir>/<sample_id>.pgm (min-max normalized to 0..255) and
/// <dir>/<sample_id>.range with the min and max used.
void write_maps(const std::vector<AnomalyResult>& results, const std::string& dir);
/// Inverse of write_maps for one sample, up to 8-bit quantization.
std::vector<double> read_map(const std::string& dir, const std::string& sample_id, std::size_t* height = nullptr,
                             std::size_t* width = nullptr);

AFRD_END_NAMESPACE
