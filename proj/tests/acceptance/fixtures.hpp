// Shared helpers for the float32 acceptance suites.
#pragma once

#include <cstring>

#include "afrd/datagen.hpp"
#include "afrd/dataset.hpp"
#include "afrd/model.hpp"
#include "afrd/random.hpp"

namespace acceptance {

using namespace afrd;

inline ModelConfig small_config(std::size_t n, AttentionMode mode = AttentionMode::pooled,
                                FusionMode fusion = FusionMode::attention) {
    ModelConfig c;
    c.input_size = 32;
    c.n_lightings = n;
    c.stem_width = 4;
    c.widths = {4, 6, 8};
    c.embed_width = 8;
    c.attention_mode = mode;
    c.fusion = fusion;
    return c;
}

inline Tensor uniform_tensor(Rng& rng, Shape shape, double lo, double hi) {
    std::vector<real> data(shape_numel(shape));
    for (auto& v : data) v = static_cast<real>(rng.uniform(lo, hi));
    return Tensor(std::move(shape), std::move(data));
}

inline std::vector<FeaturePyramid> random_pyramids(const ModelConfig& c, std::size_t batch, Rng& rng,
                                                   double lo = 0.0, double hi = 1.0) {
    std::vector<FeaturePyramid> out(c.n_lightings);
    for (auto& p : out)
        for (std::size_t l = 0; l < c.levels(); ++l)
            p.levels.push_back(uniform_tensor(rng, {batch, c.widths[l], c.level_size(l), c.level_size(l)}, lo, hi));
    return out;
}

inline std::string teacher_bytes(const AfrdModel& m) {
    std::string out;
    for (const auto& nt : m.named_tensors()) {
        if (nt.role != ParamRole::teacher) continue;
        const auto& d = nt.tensor.data();
        out.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(real));
    }
    return out;
}

inline std::vector<ImageSet> rendered_sets(std::size_t n, std::size_t size, std::size_t count, std::uint64_t seed,
                                           bool anomalous) {
    const SceneSpec spec = SceneSpec::with_lightings(n, size, seed);
    std::vector<ImageSet> out;
    for (std::size_t i = 0; i < count; ++i) {
        const auto r = render_sample(spec, "s" + std::to_string(i), anomalous);
        ImageSet s;
        s.sample_id = r.sample_id;
        s.label = anomalous ? Label::anomalous : Label::normal;
        for (const auto& img : r.images) s.images.push_back(image_to_tensor(img));
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace acceptance
