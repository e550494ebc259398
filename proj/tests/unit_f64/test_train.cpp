#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "afrd/datagen.hpp"
#include "afrd/dataset.hpp"
#include "gradcheck.hpp"

using namespace afrd;
using afrd_test::random_tensor;
using afrd_test::tiny_config;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

FeaturePyramid pyramid_of(std::vector<Tensor> levels) {
    FeaturePyramid p;
    p.levels = std::move(levels);
    return p;
}

FeaturePyramid scaled(const FeaturePyramid& p, double c) {
    FeaturePyramid out;
    for (const auto& t : p.levels) out.levels.push_back(scale(t, c));
    return out;
}

// Loss of f against c*f from the definition, eps = 1e-8 in the cosine
// denominator: per position 1 - c|f|^2 / (|c||f|^2 + eps).
double scaled_loss(const FeaturePyramid& f, double c, const std::vector<double>& w) {
    double total = 0;
    for (std::size_t l = 0; l < f.size(); ++l) {
        const Tensor& t = f[l];
        const std::size_t batch = t.dim(0), ch = t.dim(1), plane = t.dim(2) * t.dim(3);
        double acc = 0;
        for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t p = 0; p < plane; ++p) {
                double sq = 0;
                for (std::size_t k = 0; k < ch; ++k) sq += t.at((n * ch + k) * plane + p) * t.at((n * ch + k) * plane + p);
                acc += 1 - c * sq / (std::abs(c) * sq + 1e-8);
            }
        total += w[l] * acc / static_cast<double>(batch * plane);
    }
    return total;
}

std::string teacher_bytes(const AfrdModel& m) {
    std::string out;
    for (const auto& nt : m.named_tensors())
        if (nt.role == ParamRole::teacher)
            out.append(reinterpret_cast<const char*>(nt.tensor.data().data()), nt.tensor.numel() * sizeof(real));
    return out;
}

std::vector<std::vector<double>> trainable_values(const AfrdModel& m) {
    std::vector<std::vector<double>> out;
    for (const auto& nt : m.trainable()) out.push_back(values(nt.tensor));
    return out;
}

// Normal image sets rendered by the generator at 32x32.
std::vector<ImageSet> rendered_sets(std::size_t count, std::size_t lightings, std::uint64_t seed) {
    const SceneSpec spec = SceneSpec::with_lightings(lightings, 32, seed);
    std::vector<ImageSet> out;
    for (std::size_t i = 0; i < count; ++i) {
        const auto r = render_sample(spec, "train_" + std::to_string(i), false);
        ImageSet s;
        s.sample_id = r.sample_id;
        for (const auto& img : r.images) s.images.push_back(image_to_tensor(img));
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

TEST_CASE("distill loss examples") {
    Rng rng(1);
    const FeaturePyramid f = pyramid_of({random_tensor(rng, {2, 3, 4, 4}, -1, 1, false),
                                         random_tensor(rng, {2, 5, 2, 2}, -1, 1, false)});
    CHECK(std::abs(distill_loss(f, f, {1, 1}).item()) < 1e-6);
    CHECK(std::abs(distill_loss(f, f, {1, 1}).item() - scaled_loss(f, 1, {1, 1})) <= 1e-14);
    CHECK(distill_loss(f, scaled(f, -1), {1, 1}).item() == doctest::Approx(4.0).epsilon(1e-6));
    CHECK(distill_loss(f, scaled(f, -1), {1, 1}).item() == doctest::Approx(scaled_loss(f, -1, {1, 1})).epsilon(1e-14));
    CHECK(distill_loss(f, scaled(f, -1), {1, 0.5}).item() ==
          doctest::Approx(scaled_loss(f, -1, {1, 0.5})).epsilon(1e-14));

    // One level, two positions: cos 1 (up to eps) and cos 0.
    const FeaturePyramid a = pyramid_of({Tensor({1, 2, 1, 2}, {1, 1, 0, 0})});
    const FeaturePyramid b = pyramid_of({Tensor({1, 2, 1, 2}, {1, 0, 0, 1})});
    CHECK(distill_loss(a, b, {1}).item() == doctest::Approx(0.5).epsilon(1e-7));
    CHECK(std::abs(distill_loss(a, b, {1}).item() - (1 - 1 / (1 + 1e-8) + 1) / 2) <= 1e-15);

    CHECK_THROWS_AS(distill_loss(f, a, {1, 1}), DimensionError);
    CHECK_THROWS_AS(distill_loss(f, f, {1}), DimensionError);
}

TEST_CASE("distill loss bounds and positive-scale invariance") {
    Rng rng(2);
    for (int t = 0; t < 30; ++t) {
        const FeaturePyramid f = pyramid_of({random_tensor(rng, {2, 3, 4, 4}, -1, 1, false),
                                             random_tensor(rng, {2, 4, 2, 2}, -1, 1, false),
                                             random_tensor(rng, {2, 6, 1, 1}, -1, 1, false)});
        const FeaturePyramid d = pyramid_of({random_tensor(rng, {2, 3, 4, 4}, -1, 1, false),
                                             random_tensor(rng, {2, 4, 2, 2}, -1, 1, false),
                                             random_tensor(rng, {2, 6, 1, 1}, -1, 1, false)});
        const double loss = distill_loss(f, d, {1, 1, 1}).item();
        CHECK(loss >= 0.0);
        CHECK(loss <= 6.0);
        const double c = rng.uniform(0.01, 100.0);
        const double gap = distill_loss(f, scaled(f, c), {1, 1, 1}).item();
        CHECK(std::abs(gap - scaled_loss(f, c, {1, 1, 1})) <= 1e-14);
        CHECK(gap >= 0.0);
    }
}

TEST_CASE("adamw examples") {
    AdamState st;
    Tensor p({3}, {0.5, -1, 2}, true);
    p.node()->grad_buffer();  // zero gradient
    adamw_step({p}, st, AdamWConfig{1e-3, 0.9, 0.999, 1e-8, 0.0});
    CHECK(values(p) == std::vector<double>{0.5, -1, 2});

    AdamState st1;
    Tensor q({1}, {0}, true);
    q.node()->grad_buffer()[0] = 1.0;
    adamw_step({q}, st1, AdamWConfig{1e-3});
    // m_hat = 1, v_hat = 1: step = lr / (1 + eps)
    CHECK(q.at(0) == doctest::Approx(-1e-3 / (1 + 1e-8)).epsilon(1e-14));

    AdamState st2;
    Tensor r({2}, {1.5, -4}, true);
    r.node()->grad_buffer();
    adamw_step({r}, st2, AdamWConfig{1e-2, 0.9, 0.999, 1e-8, 0.5});
    CHECK(r.at(0) == doctest::Approx(1.5 * (1 - 1e-2 * 0.5)).epsilon(1e-15));
    CHECK(r.at(1) == doctest::Approx(-4 * (1 - 1e-2 * 0.5)).epsilon(1e-15));
}

TEST_CASE("adamw follows an independent reference over several steps") {
    const AdamWConfig cfg{3e-3, 0.85, 0.99, 1e-6, 0.05};
    Rng rng(3);
    Tensor p = random_tensor(rng, {5});
    std::vector<double> ref(p.data().begin(), p.data().end()), m(5, 0), v(5, 0);
    AdamState st;
    for (int t = 1; t <= 7; ++t) {
        std::vector<double> g(5);
        for (auto& x : g) x = rng.uniform(-2, 2);
        p.zero_grad();
        auto& buf = p.node()->grad_buffer();
        std::copy(g.begin(), g.end(), buf.begin());
        adamw_step({p}, st, cfg);
        for (std::size_t k = 0; k < 5; ++k) {
            m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g[k] * g[k];
            const double mh = m[k] / (1 - std::pow(cfg.beta1, t)), vh = v[k] / (1 - std::pow(cfg.beta2, t));
            ref[k] = ref[k] - cfg.lr * mh / (std::sqrt(vh) + cfg.eps) - cfg.lr * cfg.weight_decay * ref[k];
        }
    }
    CHECK(st.step == 7);
    for (std::size_t k = 0; k < 5; ++k) CHECK(p.at(k) == doctest::Approx(ref[k]).epsilon(1e-12));
}

TEST_CASE("adamw leaves frozen parameters alone and aborts on non-finite gradients") {
    Tensor frozen({2}, {1, 2}, false);
    Tensor live({2}, {3, 4}, true);
    live.node()->grad_buffer() = {1, std::numeric_limits<double>::quiet_NaN()};
    AdamState st;
    CHECK_THROWS_AS(adamw_step({frozen, live}, st, AdamWConfig{}), NumericError);
    CHECK(values(live) == std::vector<double>{3, 4});
    CHECK(st.step == 0);

    live.node()->grad_buffer() = {1, 1};
    adamw_step({frozen, live}, st, AdamWConfig{});
    CHECK(values(frozen) == std::vector<double>{1, 2});
    CHECK(live.at(0) < 3);
}

TEST_CASE("train config validation") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate(3));
    c.learning_rate = 0;
    CHECK_THROWS_AS(c.validate(3), ConfigError);
    c = {};
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(3), ConfigError);
    c = {};
    c.level_weights = {1, 1};
    CHECK_THROWS_AS(c.validate(3), ConfigError);
    CHECK(TrainConfig{}.resolved_level_weights(3) == std::vector<double>{1, 1, 1});
}

TEST_CASE("training rejects anomalous and empty data") {
    AfrdModel m = model_init(tiny_config(2), 0);
    auto sets = rendered_sets(3, 2, 0);
    sets[1].label = Label::anomalous;
    CHECK_THROWS_AS(train(m, sets, TrainConfig{}), DataError);
    CHECK_THROWS_AS(train(m, std::vector<ImageSet>{}, TrainConfig{}), DataError);
}

TEST_CASE("zero epochs leaves the model unchanged") {
    AfrdModel m = model_init(tiny_config(2), 1);
    const auto before = trainable_values(m);
    TrainConfig c;
    c.epochs = 0;
    const auto report = train(m, rendered_sets(4, 2, 1), c);
    CHECK(report.epoch_loss.empty());
    CHECK(trainable_values(m) == before);
}

TEST_CASE("training lowers the loss, keeps the teacher frozen and is deterministic") {
    const auto sets = rendered_sets(50, 2, 5);
    TrainConfig c;
    c.epochs = 20;
    c.seed = 3;
    AfrdModel a = model_init(tiny_config(2), 3);
    const std::string teacher_before = teacher_bytes(a);
    AdamState st;
    const auto ra = train(a, sets, c, &st);
    REQUIRE(ra.epoch_loss.size() == 20);
    CHECK(ra.epoch_loss.back() < ra.epoch_loss.front());
    for (double l : ra.epoch_loss) {
        CHECK(std::isfinite(l));
        CHECK(l >= 0.0);
        CHECK(l <= 6.0);
    }
    CHECK(teacher_bytes(a) == teacher_before);
    CHECK(st.step == 20 * 7);  // ceil(50 / 8) steps per epoch

    for (std::size_t e = 0; e < ra.epoch_weights.size(); ++e)
        for (std::size_t l = 0; l < 3; ++l) {
            const auto& w = ra.epoch_weights[e][l];
            CHECK(w[0] + w[1] == doctest::Approx(1.0).epsilon(1e-9));
            CHECK(ra.epoch_entropy[e][l] >= 0.0);
            CHECK(ra.epoch_entropy[e][l] <= std::log(2.0) + 1e-12);
        }

    AfrdModel b = model_init(tiny_config(2), 3);
    const auto rb = train(b, sets, c);
    CHECK(rb.epoch_loss == ra.epoch_loss);
    CHECK(trainable_values(b) == trainable_values(a));

    CHECK(ra.to_csv().rfind("epoch,loss,entropy_l0,entropy_l1,entropy_l2\n", 0) == 0);
    CHECK(ra.to_log().find("epoch 20 loss") != std::string::npos);
}

TEST_CASE("mean fusion logs exactly uniform weights") {
    AfrdModel m = model_init(tiny_config(3, AttentionMode::pooled, FusionMode::mean), 2);
    TrainConfig c;
    c.epochs = 2;
    const auto r = train(m, rendered_sets(5, 3, 2), c);
    for (const auto& epoch : r.epoch_weights)
        for (const auto& level : epoch)
            for (double w : level) CHECK(w == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("feature bank is tied to its teacher") {
    const auto sets = rendered_sets(2, 2, 0);
    AfrdModel a = model_init(tiny_config(2), 0);
    AfrdModel b = model_init(tiny_config(2), 1);
    const FeatureBank bank = extract_features(a, sets);
    CHECK(bank.per_set.size() == 2);
    CHECK(bank.per_set[0].size() == 2);
    CHECK_NOTHROW(bank.check_teacher(a));
    CHECK_THROWS_AS(bank.check_teacher(b), ConfigError);

    ModelConfig single = tiny_config(1);
    single.lighting_subset = {1};
    const auto in = bank.model_inputs(single, 1);
    REQUIRE(in.size() == 1);
    CHECK(values(in[0][0]) == values(bank.per_set[1][1][0]));
}

TEST_CASE("composed loss gradients match central differences") {
    for (AttentionMode mode : {AttentionMode::pooled, AttentionMode::literal}) {
        AfrdModel m = model_init(tiny_config(2, mode), 17);
        Rng rng(17);
        afrd_test::jitter_offsets(m, rng);
        const auto feats = afrd_test::random_pyramids(m.config, 2, rng);
        std::vector<Tensor> params;
        for (const auto& nt : m.trainable()) params.push_back(nt.tensor);
        const auto r = afrd_test::check_gradients(
            [&](const std::vector<Tensor>&) {
                const auto fr = afrd_forward(m, feats, true);
                return distill_loss(fr.fused, fr.student, {1, 1, 1});
            },
            params, 5, 1e-6, 1e-6, {}, 3);
        INFO(to_string(mode) << " worst " << r.worst);
        CHECK(r.max_rel_error < 1e-3);
    }
}
