#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "afrd/datagen.hpp"
#include "afrd/dataset.hpp"
#include "afrd/scoring.hpp"
#include "afrd/random.hpp"

using namespace afrd;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config(std::size_t n) {
    ModelConfig c;
    c.input_size = 32;
    c.n_lightings = n;
    c.stem_width = 4;
    c.widths = {4, 6, 8};
    c.embed_width = 8;
    return c;
}

// Channel vectors e_a at every position of a [1,2,s,s] map.
Tensor basis_map(std::size_t s, std::size_t a) {
    Tensor t = Tensor::zeros({1, 2, s, s});
    for (std::size_t i = 0; i < s * s; ++i) t.mutable_data()[a * s * s + i] = 1;
    return t;
}

std::vector<ImageSet> test_sets(std::size_t n, std::size_t count) {
    const SceneSpec spec = SceneSpec::with_lightings(n, 32, 3);
    std::vector<ImageSet> out;
    for (std::size_t i = 0; i < count; ++i) {
        const bool anomalous = i % 2 == 1;
        const auto r = render_sample(spec, "test_" + std::to_string(i), anomalous);
        ImageSet s;
        s.sample_id = r.sample_id;
        s.label = anomalous ? Label::anomalous : Label::normal;
        for (const auto& img : r.images) s.images.push_back(image_to_tensor(img));
        if (anomalous) {
            Tensor m = Tensor::zeros({32, 32});
            for (std::size_t k = 0; k < m.numel(); ++k) m.mutable_data()[k] = r.mask.pixels[k] >= 128 ? 1.0f : 0.0f;
            s.mask = m;
        }
        out.push_back(std::move(s));
    }
    return out;
}

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("afrd_unit_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("student equal to target gives an all-zero map") {
    Rng rng(1);
    FeaturePyramid p;
    for (std::size_t s : {8, 4, 2}) {
        Tensor t = Tensor::zeros({1, 3, s, s});
        for (auto& v : t.mutable_data()) v = static_cast<real>(rng.uniform(0.1, 1.0));
        p.levels.push_back(t);
    }
    const auto r = anomaly_map(p, p, 16, 16, ScoreOptions{}, "x");
    CHECK(r.map.size() == 256);
    CHECK(r.height == 16);
    // Zero up to float rounding and the eps in the cosine denominator.
    for (double v : r.map) CHECK(std::abs(v) <= 1e-6);
    CHECK(r.image_score <= 1e-6);
    CHECK(r.sample_id == "x");
}

TEST_CASE("three levels of constant discrepancy 1 give a constant 3") {
    FeaturePyramid t, s;
    for (std::size_t sz : {8, 4, 2}) {
        t.levels.push_back(basis_map(sz, 0));
        s.levels.push_back(basis_map(sz, 1));
    }
    for (double sigma : {0.0, 4.0}) {
        ScoreOptions o;
        o.smooth_sigma = sigma;
        const auto r = anomaly_map(t, s, 32, 32, o);
        for (double v : r.map) CHECK(v == doctest::Approx(3.0).epsilon(1e-6));
        CHECK(r.image_score == doctest::Approx(3.0).epsilon(1e-6));
    }
}

TEST_CASE("map is bounded before smoothing") {
    Rng rng(2);
    ScoreOptions o;
    o.smooth_sigma = 0;
    for (int trial = 0; trial < 10; ++trial) {
        FeaturePyramid a, b;
        for (std::size_t sz : {8, 4, 2}) {
            Tensor x = Tensor::zeros({1, 5, sz, sz}), y = Tensor::zeros({1, 5, sz, sz});
            for (auto& v : x.mutable_data()) v = static_cast<real>(rng.uniform(-1, 1));
            for (auto& v : y.mutable_data()) v = static_cast<real>(rng.uniform(-1, 1));
            a.levels.push_back(x);
            b.levels.push_back(y);
        }
        const auto r = anomaly_map(a, b, 24, 24, o);
        for (double v : r.map) {
            CHECK(v >= 0.0);
            CHECK(v <= 6.0 + 1e-5);
        }
    }
}

TEST_CASE("image score modes") {
    std::vector<double> onehot(25, 0.0);
    onehot[7] = 0.625;
    ScoreOptions o;
    CHECK(image_score(onehot, o) == 0.625);
    o.image_score = ImageScoreMode::topk;
    o.top_k = 4;
    CHECK(image_score({1, 5, 2, 4, 3}, o) == doctest::Approx(3.5));
    o.top_k = 10;
    CHECK(image_score({1, 5, 2}, o) == doctest::Approx(8.0 / 3.0));
    CHECK(parse_image_score_mode("topk") == ImageScoreMode::topk);
    CHECK_THROWS_AS(parse_image_score_mode("median"), ConfigError);
    ScoreOptions bad;
    bad.smooth_sigma = -1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = {};
    bad.image_score = ImageScoreMode::topk;
    bad.top_k = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("one-hot map with sigma 0 scores its single value") {
    // One level whose only discrepancy sits at one coarse cell, upsampled 1:1.
    FeaturePyramid t, s;
    t.levels.push_back(basis_map(4, 0));
    Tensor st = basis_map(4, 0);
    st.mutable_data()[5] = 0;
    st.mutable_data()[16 + 5] = 1;  // position 5 becomes orthogonal
    s.levels.push_back(st);
    ScoreOptions o;
    o.smooth_sigma = 0;
    const auto r = anomaly_map(t, s, 4, 4, o);
    CHECK(r.image_score == doctest::Approx(1.0));
    CHECK(r.map[5] == doctest::Approx(1.0));
    CHECK(std::count(r.map.begin(), r.map.end(), 0.0) == 15);
}

TEST_CASE("oracle and constant scorers") {
    std::vector<AnomalyResult> results;
    std::vector<std::uint8_t> labels;
    std::vector<std::vector<std::uint8_t>> masks;
    for (int i = 0; i < 6; ++i) {
        AnomalyResult r;
        r.height = r.width = 3;
        r.sample_id = "s" + std::to_string(i);
        std::vector<std::uint8_t> m(9, 0);
        if (i % 2) m[static_cast<std::size_t>(i)] = 1;
        r.map.assign(m.begin(), m.end());
        r.image_score = *std::max_element(r.map.begin(), r.map.end());
        results.push_back(r);
        labels.push_back(i % 2);
        masks.push_back(i % 2 ? m : std::vector<std::uint8_t>{});
    }
    const auto oracle = summarize(results, labels, masks);
    CHECK(oracle.i_auroc == 1.0);
    REQUIRE(oracle.p_auroc);
    CHECK(*oracle.p_auroc == 1.0);

    for (auto& r : results) {
        std::fill(r.map.begin(), r.map.end(), 0.4);
        r.image_score = 0.4;
    }
    const auto flat = summarize(results, labels, masks);
    CHECK(flat.i_auroc == 0.5);
    CHECK(*flat.p_auroc == 0.5);

    masks[1].clear();  // an anomalous sample without a mask: no P-AUROC
    CHECK_FALSE(summarize(results, labels, masks).p_auroc);

    const auto csv = oracle.scores_csv();
    CHECK(csv.rfind("sample_id,label,image_score\ns0,normal,0\ns1,anomalous,1\n", 0) == 0);
    CHECK(oracle.roc_csv().rfind("threshold,fpr,tpr\n", 0) == 0);
    CHECK(oracle.summary().find("i_auroc") != std::string::npos);
}

TEST_CASE("model scoring paths agree and are deterministic") {
    AfrdModel m = model_init(small_config(2), 5);
    const auto sets = test_sets(2, 6);
    const auto bank = extract_features(m, sets);
    const auto direct = evaluate(m, sets, ScoreOptions{}, 1);
    const auto cached = evaluate(m, sets, bank, ScoreOptions{}, 2);
    REQUIRE(direct.results.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(direct.results[i].map == cached.results[i].map);
        CHECK(direct.results[i].image_score == cached.results[i].image_score);
        CHECK(direct.results[i].map.size() == 32 * 32);
        CHECK(direct.results[i].sample_id == sets[i].sample_id);
        CHECK(direct.results[i].image_score == *std::max_element(direct.results[i].map.begin(), direct.results[i].map.end()));
    }
    CHECK(direct.scores_csv() == cached.scores_csv());
    CHECK(direct.roc_csv() == cached.roc_csv());
    CHECK(direct.p_auroc.has_value());
    CHECK(direct.i_auroc >= 0.0);
    CHECK(direct.i_auroc <= 1.0);
}

TEST_CASE("non-finite parameters are a scoring error") {
    AfrdModel m = model_init(small_config(1), 0);
    auto sets = test_sets(1, 2);
    const auto message = [&] {
        try {
            evaluate(m, sets);
        } catch (const NumericError& e) {
            return std::string(e.what());
        }
        return std::string("<no error>");
    };
    sets[1].images[0].mutable_data()[40] = std::numeric_limits<real>::infinity();
    CHECK(message().find("test_1") != std::string::npos);

    sets = test_sets(1, 2);
    m.student.heads[0].weight.mutable_data()[3] = std::numeric_limits<real>::quiet_NaN();
    CHECK_THROWS_AS(score(m, sets[0]), NumericError);
    CHECK(message().find("student.head0.weight") != std::string::npos);
}

TEST_CASE("map export round trip") {
    const fs::path dir = scratch_dir("maps");
    AnomalyResult r;
    r.sample_id = "test_0007";
    r.height = 5;
    r.width = 4;
    for (std::size_t i = 0; i < 20; ++i) r.map.push_back(0.37 + 0.11 * std::sin(static_cast<double>(i)));
    AnomalyResult flat = r;
    flat.sample_id = "flat";
    std::fill(flat.map.begin(), flat.map.end(), 0.25);
    write_maps({r, flat}, dir.string());
    std::size_t h = 0, w = 0;
    const auto back = read_map(dir.string(), "test_0007", &h, &w);
    CHECK(h == 5);
    CHECK(w == 4);
    const double lo = *std::min_element(r.map.begin(), r.map.end()), hi = *std::max_element(r.map.begin(), r.map.end());
    for (std::size_t i = 0; i < 20; ++i) CHECK(std::abs(back[i] - r.map[i]) <= (hi - lo) / 255.0 / 2 + 1e-15);
    CHECK(back[std::max_element(r.map.begin(), r.map.end()) - r.map.begin()] == hi);
    for (double v : read_map(dir.string(), "flat")) CHECK(v == 0.25);
    const auto pgm = decode_pnm(read_file((dir / "test_0007.pgm").string()), "map");
    CHECK(pgm.channels == 1);
    CHECK(*std::min_element(pgm.pixels.begin(), pgm.pixels.end()) == 0);
    CHECK(*std::max_element(pgm.pixels.begin(), pgm.pixels.end()) == 255);
    fs::remove_all(dir);
}
