// Knowledge-distillation training: multi-level cosine loss, AdamW and the
// epoch loop over cached teacher features.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "afrd/model.hpp"

AFRD_BEGIN_NAMESPACE

struct TrainConfig {
    double learning_rate = 4e-4;
    std::size_t batch_size = 8;
    std::size_t epochs = 20;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    std::vector<double> level_weights;  // empty: 1.0 per level

    void validate(std::size_t levels) const;  // throws ConfigError
    std::vector<double> resolved_level_weights(std::size_t levels) const;
};

struct TrainReport {
    std::vector<double> epoch_loss;
    // [epoch][level][lighting]: mean fusion weight over the epoch.
    std::vector<std::vector<std::vector<double>>> epoch_weights;
    // [epoch][level]: mean per-sample entropy of the fusion weights (nats).
    std::vector<std::vector<double>> epoch_entropy;
    double wall_seconds = 0;
    std::string checkpoint_path;

    /// Line-oriented human log.
    std::string to_log() const;
    /// `epoch,loss,entropy_l0,...` CSV.
    std::string to_csv() const;
};

// ---------------------------------------------------------------------------
// Loss and optimizer
// ---------------------------------------------------------------------------

/// sum_l w_l * mean_{b,h,w}(1 - cos(F_f^l, F_d^l)).
Tensor distill_loss(const FeaturePyramid& fused, const FeaturePyramid& student,
                    const std::vector<double>& level_weights);

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct AdamState {
    std::vector<std::vector<real>> m, v;  // aligned with the parameter list
    std::uint64_t step = 0;

    void init(const std::vector<Tensor>& params);
    bool matches(const std::vector<Tensor>& params) const;
};

/// Decoupled weight decay Adam update. Parameters without a gradient are
/// treated as having zero gradient; parameters that do not require grad are
/// left untouched. A non-finite gradient aborts the step before any update.
void adamw_step(const std::vector<Tensor>& params, AdamState& state, const AdamWConfig& cfg);

// ---------------------------------------------------------------------------
// Teacher feature cache
// ---------------------------------------------------------------------------

/// Teacher pyramids (batch 1) for every set and every dataset lighting.
/// Valid for any model whose teacher is byte-identical to the one that
/// produced it; `teacher_digest` records that identity.
struct FeatureBank {
    std::vector<std::vector<FeaturePyramid>> per_set;  // [set][dataset lighting]
    std::vector<std::string> sample_ids;
    std::uint64_t teacher_digest = 0;

    /// Throws ConfigError unless `model` carries the extracting teacher.
    void check_teacher(const AfrdModel& model) const;
    /// Model-input pyramids for set i, following the config's lighting subset.
    std::vector<FeaturePyramid> model_inputs(const ModelConfig& config, std::size_t i) const;
};

/// Hash of the teacher's parameter bytes.
std::uint64_t teacher_digest(const AfrdModel& model);

/// `threads` = 0 picks the default worker count (AFRD_THREADS or 1).
FeatureBank extract_features(const AfrdModel& model, const std::vector<ImageSet>& sets, std::size_t threads = 0);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Trains attention, bottleneck and student on anomaly-free sets. The final
/// optimizer state is written to `optimizer` when given.
TrainReport train(AfrdModel& model, const std::vector<ImageSet>& train_sets, const TrainConfig& config,
                  AdamState* optimizer = nullptr);
TrainReport train(AfrdModel& model, const FeatureBank& bank, const TrainConfig& config,
                  AdamState* optimizer = nullptr);

AFRD_END_NAMESPACE
