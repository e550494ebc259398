// The AFRD network: frozen teacher encoder, per-level attention fusion over
// lightings, bottleneck embedding and reversed student decoder.
#pragma once

#include <string>
#include <vector>

#include "afrd/image_set.hpp"
#include "afrd/ops.hpp"

AFRD_BEGIN_NAMESPACE

enum class AttentionMode {
    pooled,   // global average pool before flatten; FC has N*C_l inputs
    literal,  // full spatial flatten; FC has N*C_l*H_l*W_l inputs
};

enum class FusionMode {
    attention,  // learned softmax weights
    mean,       // constant 1/N, no FC parameters
};

std::string to_string(AttentionMode mode);
std::string to_string(FusionMode mode);
AttentionMode parse_attention_mode(const std::string& text);
FusionMode parse_fusion_mode(const std::string& text);

struct ModelConfig {
    std::size_t input_size = 64;
    std::size_t n_lightings = 6;
    // Dataset lighting indices fed to the model, in order. Empty means
    // 0..n_lightings-1; otherwise its length must equal n_lightings.
    std::vector<std::size_t> lighting_subset;
    std::size_t stem_width = 32;
    std::vector<std::size_t> widths{64, 128, 256};  // one entry per pyramid level
    std::size_t embed_width = 256;
    AttentionMode attention_mode = AttentionMode::pooled;
    FusionMode fusion = FusionMode::attention;
    bool normalize_input = true;  // ImageNet mean/std before the teacher

    std::size_t levels() const { return widths.size(); }
    std::size_t level_size(std::size_t level) const { return input_size >> (level + 2); }
    std::size_t downsample_factor() const { return std::size_t{1} << (levels() + 1); }
    /// Dataset lighting index consumed at model input slot j.
    std::size_t source_lighting(std::size_t j) const;

    void validate() const;  // throws ConfigError
    /// Flat `key = value` lines; round-trips through parse().
    std::string to_text() const;
    static ModelConfig parse(const std::string& text);
};

// ---------------------------------------------------------------------------
// Layers. Tensors are shared handles, so layers alias their storage when
// copied; AfrdModel is move-only and offers an explicit deep clone().
// ---------------------------------------------------------------------------

struct Conv2dLayer {
    Tensor weight, bias;
    int stride = 1, padding = 0;
    Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
};

struct ConvTranspose2dLayer {
    Tensor weight, bias;
    int stride = 2, padding = 0;
    Tensor operator()(const Tensor& x) const {
        return conv_transpose2d(x, weight, bias, stride, padding);
    }
};

// Running statistics are buffers: training-mode calls update them, eval-mode
// calls only read them.
struct BatchNorm2dLayer {
    Tensor gamma, beta;
    mutable BatchNormState state;
    Tensor operator()(const Tensor& x, bool training) const {
        return batchnorm2d(x, gamma, beta, state, training);
    }
};

struct LinearLayer {
    Tensor weight, bias;
    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

struct ConvBnRelu {
    Conv2dLayer conv;
    BatchNorm2dLayer bn;
    Tensor operator()(const Tensor& x, bool training) const { return relu(bn(conv(x), training)); }
};

struct UpBlock {
    ConvTranspose2dLayer up;
    BatchNorm2dLayer bn;
    Tensor operator()(const Tensor& x, bool training) const { return relu(bn(up(x), training)); }
};

struct Teacher {
    ConvBnRelu stem;
    std::vector<std::vector<ConvBnRelu>> stages;  // two blocks per stage
};

struct AttentionModule {
    std::vector<LinearLayer> per_level;  // empty in mean fusion
};

struct Bottleneck {
    std::vector<std::vector<ConvBnRelu>> downsample;  // per non-final level
    ConvBnRelu fuse;                                   // 1x1 over concatenated levels
};

struct Student {
    ConvBnRelu entry;                 // embedding -> coarsest level
    std::vector<UpBlock> ups;         // coarse-to-fine, one per finer level
    std::vector<Conv2dLayer> heads;   // per level output projection, index = level
};

enum class ParamRole { teacher, trainable, buffer };

struct NamedTensor {
    std::string name;
    Tensor tensor;
    ParamRole role;
};

/// Per-level feature maps, finest first. Every level carries a batch axis:
/// [B, C_l, H_l, W_l].
struct FeaturePyramid {
    std::vector<Tensor> levels;
    std::size_t size() const { return levels.size(); }
    const Tensor& operator[](std::size_t l) const { return levels[l]; }
};

/// Per-level fusion weights, each [B, N] with rows on the simplex.
struct AttentionWeights {
    std::vector<Tensor> per_level;
};

class AfrdModel {
public:
    AfrdModel() = default;
    AfrdModel(AfrdModel&&) = default;
    AfrdModel& operator=(AfrdModel&&) = default;
    AfrdModel(const AfrdModel&) = delete;
    AfrdModel& operator=(const AfrdModel&) = delete;

    AfrdModel clone() const;

    /// Every parameter and buffer in a fixed order (the checkpoint order).
    std::vector<NamedTensor> named_tensors() const;
    std::vector<NamedTensor> trainable() const;
    std::size_t parameter_count(ParamRole role) const;

    ModelConfig config;
    Teacher teacher;
    AttentionModule attention;
    Bottleneck bottleneck;
    Student student;
};

/// Deterministic initialization: He-uniform convolution weights, zero biases,
/// identity batchnorm. Teacher parameters never require grad.
AfrdModel model_init(const ModelConfig& config, std::uint64_t seed);
/// Same layout as model_init with zero-filled parameters (for loading).
AfrdModel model_skeleton(const ModelConfig& config);

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Stacks one lighting's images from a batch of sets into [B,3,H,W],
/// reading dataset lighting `source`.
Tensor stack_lighting(const std::vector<const ImageSet*>& sets, std::size_t source);

/// Teacher features for a batch of images [B,3,H,W]; never records a graph.
FeaturePyramid teacher_features(const AfrdModel& model, const Tensor& images);

/// One pyramid per model input lighting, each with batch 1.
std::vector<FeaturePyramid> teacher_forward(const AfrdModel& model, const ImageSet& set);

/// Softmax weights for one level from N per-lighting pyramids: [B,N].
Tensor attention_weights(const AfrdModel& model, const std::vector<FeaturePyramid>& feats,
                         std::size_t level);

/// Per level: sum_j w[:,j] * feats[j].levels[l].
FeaturePyramid attention_fuse(const std::vector<FeaturePyramid>& feats, const AttentionWeights& weights);

Tensor bottleneck_forward(const AfrdModel& model, const FeaturePyramid& fused, bool training);

FeaturePyramid student_forward(const AfrdModel& model, const Tensor& embedding, bool training);

struct ForwardResult {
    AttentionWeights weights;
    FeaturePyramid fused;
    Tensor embedding;
    FeaturePyramid student;
};

/// Attention (or mean) fusion, bottleneck and student on teacher features.
ForwardResult afrd_forward(const AfrdModel& model, const std::vector<FeaturePyramid>& feats, bool training);

AFRD_END_NAMESPACE
