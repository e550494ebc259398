#include <cmath>
#include <cstdio>

#include "afrd/checkpoint.hpp"
#include "afrd/metrics.hpp"
#include "afrd/train.hpp"
#include "criteria.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

namespace acceptance {

namespace {

using Labels = std::vector<std::uint8_t>;

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2e", v);
    return buf;
}

// Few distinct score levels, so ties are common.
double tied_score(Rng& rng, std::size_t levels, bool positive) {
    double s = static_cast<double>(rng.below(levels)) / static_cast<double>(levels);
    if (positive && rng.uniform() < 0.5) s += 1.0 / static_cast<double>(levels);
    return s;
}

Criterion image_auroc() {
    Stopwatch clock;
    double worst = 0;
    std::size_t ties = 0;
    Rng rng(2024);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 2 + rng.below(300), levels = 2 + rng.below(20);
        std::vector<double> s(n);
        Labels l(n);
        for (std::size_t i = 0; i < n; ++i) {
            l[i] = rng.uniform() < 0.3 + 0.4 * rng.uniform();
            s[i] = tied_score(rng, levels, l[i]);
        }
        l[0] = 1;
        l[n - 1] = 0;
        std::vector<double> sorted = s;
        std::sort(sorted.begin(), sorted.end());
        ties += std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end();
        worst = std::max(worst, std::abs(auroc(s, l) - afrd_test::pairwise_auroc(s, l)));
    }
    return {"oracle: I-AUROC vs pairwise oracle", worst <= 1e-12,
            "100 cases (" + std::to_string(ties) + " with ties), max deviation " + fmt(worst), clock.seconds()};
}

Criterion pixel_level_auroc() {
    Stopwatch clock;
    double worst = 0;
    Rng rng(2025);
    for (int t = 0; t < 100; ++t) {
        const std::size_t sets = 1 + rng.below(5), h = 2 + rng.below(8), w = 2 + rng.below(8);
        const std::size_t levels = 2 + rng.below(10);
        std::vector<AnomalyResult> results;
        std::vector<Labels> masks;
        std::vector<double> pooled;
        Labels pooled_labels;
        bool any_pos = false, any_neg = false;
        for (std::size_t k = 0; k < sets; ++k) {
            AnomalyResult r;
            r.height = h;
            r.width = w;
            const bool has_mask = k == 0 || rng.uniform() < 0.6;
            Labels mask(h * w, 0);
            for (std::size_t i = 0; i < h * w; ++i) {
                if (has_mask) mask[i] = (k == 0 && i == 0) || rng.uniform() < 0.2;
                r.map.push_back(tied_score(rng, levels, mask[i]));
            }
            if (k == 0 && h * w > 1) mask[1] = 0;
            for (std::size_t i = 0; i < h * w; ++i) {
                any_pos |= mask[i] != 0;
                any_neg |= mask[i] == 0;
            }
            pooled.insert(pooled.end(), r.map.begin(), r.map.end());
            pooled_labels.insert(pooled_labels.end(), mask.begin(), mask.end());
            results.push_back(std::move(r));
            masks.push_back(has_mask ? mask : Labels{});
        }
        if (!any_pos || !any_neg) continue;
        worst = std::max(worst, std::abs(pixel_auroc(results, masks) - afrd_test::pairwise_auroc(pooled, pooled_labels)));
    }
    return {"oracle: P-AUROC vs pairwise oracle", worst <= 1e-12, "100 cases, max deviation " + fmt(worst),
            clock.seconds()};
}

Criterion shading() {
    Stopwatch clock;
    double worst = 0;
    std::size_t samples = 0, pixels = 0;
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        for (std::size_t n : {1, 2, 6}) {
            SceneSpec spec = SceneSpec::with_lightings(n, seed % 2 ? 48 : 64, seed);
            if (seed == 3) spec.light_directions = default_light_directions(n, 45.0);
            for (int i = 0; i < 4; ++i) {
                const auto r = render_sample(spec, "x" + std::to_string(i), i % 2 == 1);
                for (std::size_t j = 0; j < n; ++j) {
                    const auto& l = spec.light_directions[j];
                    const auto ref =
                        afrd_test::lambert_oracle(r.height, r.albedo, r.size, {l[0], l[1], l[2]}, spec.ambient);
                    for (std::size_t k = 0; k < ref.size(); ++k) {
                        const double expect = std::clamp(ref[k], 0.0, 1.0) * 255.0;
                        worst = std::max(worst, std::abs(r.images[j].pixels[k] - expect));
                    }
                    pixels += ref.size();
                }
                ++samples;
            }
        }
    }
    char buf[128];
    std::snprintf(buf, sizeof buf, "%zu samples, %zu channel values, max deviation %.3f quantization steps", samples,
                  pixels, worst);
    return {"oracle: synthetic shading vs Lambertian oracle", worst <= 1.0, buf, clock.seconds()};
}

Criterion checkpoints() {
    Stopwatch clock;
    bool ok = true;
    std::size_t cases = 0;
    auto check = [&](const AfrdModel& m, const AdamState* st) {
        const std::string a = encode_checkpoint(m, st);
        const auto back = decode_checkpoint(a);
        ok &= encode_checkpoint(back.model, back.optimizer ? &*back.optimizer : nullptr) == a;
        ok &= back.optimizer.has_value() == (st != nullptr);
        ++cases;
    };
    check(model_init(ModelConfig{}, 0), nullptr);
    ModelConfig literal = small_config(4, AttentionMode::literal);
    check(model_init(literal, 1), nullptr);
    for (FusionMode f : {FusionMode::attention, FusionMode::mean}) {
        AfrdModel m = model_init(small_config(2, AttentionMode::pooled, f), 3);
        TrainConfig tc;
        tc.epochs = 2;
        tc.batch_size = 3;
        AdamState st;
        train(m, rendered_sets(2, 32, 5, 8, false), tc, &st);
        check(m, &st);
        check(m, nullptr);
    }
    ModelConfig single = small_config(1);
    single.lighting_subset = {4};
    check(model_init(single, 2), nullptr);
    return {"oracle: checkpoint byte round trip", ok, std::to_string(cases) + " models incl. default and trained with optimizer state",
            clock.seconds()};
}

}  // namespace

std::vector<Criterion> oracle_suite() { return {image_auroc(), pixel_level_auroc(), shading(), checkpoints()}; }

}  // namespace acceptance
