#include "afrd/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>

#include "afrd/error.hpp"
#include "afrd/image_io.hpp"
#include "afrd/parallel.hpp"

namespace fs = std::filesystem;

AFRD_BEGIN_NAMESPACE

std::string to_string(ImageScoreMode mode) { return mode == ImageScoreMode::max ? "max" : "topk"; }

ImageScoreMode parse_image_score_mode(const std::string& text) {
    if (text == "max") return ImageScoreMode::max;
    if (text == "topk") return ImageScoreMode::topk;
    throw ConfigError("unknown image score mode '" + text + "' (expected max or topk)");
}

void ScoreOptions::validate() const {
    if (!(smooth_sigma >= 0) || !std::isfinite(smooth_sigma)) throw ConfigError("smooth_sigma must be >= 0");
    if (image_score == ImageScoreMode::topk && top_k < 1) throw ConfigError("top_k must be >= 1");
}

double image_score(const std::vector<double>& map, const ScoreOptions& options) {
    if (map.empty()) throw MetricError("image_score: empty map");
    if (options.image_score == ImageScoreMode::max) return *std::max_element(map.begin(), map.end());
    const std::size_t k = std::min(options.top_k, map.size());
    std::vector<double> v(map);
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k - 1), v.end(), std::greater<>());
    std::sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), std::greater<>());
    double acc = 0;
    for (std::size_t i = 0; i < k; ++i) acc += v[i];
    return acc / static_cast<double>(k);
}

AnomalyResult anomaly_map(const FeaturePyramid& target, const FeaturePyramid& student, std::size_t height,
                          std::size_t width, const ScoreOptions& options, const std::string& sample_id) {
    if (target.size() != student.size() || target.size() == 0) {
        throw DimensionError("anomaly_map", "levels",
                             std::to_string(target.size()) + " vs " + std::to_string(student.size()));
    }
    NoGradGuard no_grad;
    AnomalyResult r;
    r.height = height;
    r.width = width;
    r.sample_id = sample_id;
    r.map.assign(height * width, 0.0);
    for (std::size_t l = 0; l < target.size(); ++l) {
        if (target[l].dim(0) != 1) throw DimensionError("anomaly_map", "batch", "expected batch 1");
        Tensor cos = cosine_map(target[l], student[l]);
        Tensor m = add_scalar(scale(cos, real(-1)), real(1));
        m = reshape(m, {1, 1, m.dim(1), m.dim(2)});
        const Tensor up = bilinear_upsample(m, height, width);
        const auto d = up.data();
        for (std::size_t i = 0; i < r.map.size(); ++i) r.map[i] += static_cast<double>(d[i]);
    }
    // 1 - cos can dip a rounding step below zero.
    for (auto& v : r.map) v = std::max(v, 0.0);
    r.map = gaussian_smooth(r.map, height, width, options.smooth_sigma);
    r.image_score = image_score(r.map, options);
    return r;
}

void check_finite(const AfrdModel& model) {
    for (const auto& nt : model.named_tensors())
        for (real v : nt.tensor.data())
            if (!std::isfinite(static_cast<double>(v))) {
                throw NumericError("scoring: parameter " + nt.name + " is not finite");
            }
}

AnomalyResult score_features(const AfrdModel& model, const std::vector<FeaturePyramid>& feats, std::size_t height,
                             std::size_t width, const ScoreOptions& options, const std::string& sample_id) {
    NoGradGuard no_grad;
    const ForwardResult fr = afrd_forward(model, feats, false);
    auto r = anomaly_map(fr.fused, fr.student, height, width, options, sample_id);
    if (!std::isfinite(r.image_score)) throw NumericError("scoring: non-finite score for " + sample_id);
    return r;
}

AnomalyResult score(const AfrdModel& model, const ImageSet& set, const ScoreOptions& options) {
    options.validate();
    check_finite(model);
    set.validate();
    return score_features(model, teacher_forward(model, set), set.height(), set.width(), options, set.sample_id);
}

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::vector<std::uint8_t> mask_bytes(const ImageSet& s) {
    std::vector<std::uint8_t> out;
    if (!s.mask) return out;
    for (real v : s.mask->data()) out.push_back(v > real(0.5) ? 1 : 0);
    return out;
}

}  // namespace

std::string EvalReport::scores_csv() const {
    std::string out = "sample_id,label,image_score\n";
    for (std::size_t i = 0; i < results.size(); ++i)
        out += results[i].sample_id + "," + (labels[i] ? "anomalous" : "normal") + "," + fmt(results[i].image_score) + "\n";
    return out;
}

std::string EvalReport::roc_csv() const {
    std::string out = "threshold,fpr,tpr\n";
    for (const auto& p : roc) out += fmt(p.threshold) + "," + fmt(p.fpr) + "," + fmt(p.tpr) + "\n";
    return out;
}

std::string EvalReport::summary() const {
    std::string out = "samples = " + std::to_string(results.size()) + "\ni_auroc = " + fmt(i_auroc) + "\n";
    out += "p_auroc = " + (p_auroc ? fmt(*p_auroc) : std::string("n/a")) + "\n";
    return out;
}

EvalReport summarize(std::vector<AnomalyResult> results, std::vector<std::uint8_t> labels,
                     const std::vector<std::vector<std::uint8_t>>& masks) {
    if (labels.size() != results.size() || masks.size() != results.size()) {
        throw MetricError("evaluate: results, labels and masks differ in length");
    }
    EvalReport rep;
    std::vector<double> scores;
    for (const auto& r : results) scores.push_back(r.image_score);
    try {
        rep.i_auroc = auroc(scores, labels);
        rep.roc = roc_curve(scores, labels);
    } catch (const MetricError& e) {
        throw MetricError(std::string("evaluate: image-level ") + e.what());
    }
    bool masks_complete = true;
    for (std::size_t i = 0; i < results.size(); ++i)
        if (labels[i] && masks[i].empty()) masks_complete = false;
    if (masks_complete) rep.p_auroc = pixel_auroc(results, masks);
    rep.results = std::move(results);
    rep.labels = std::move(labels);
    return rep;
}

EvalReport evaluate(const AfrdModel& model, const std::vector<ImageSet>& test_sets, const ScoreOptions& options,
                    std::size_t threads) {
    return evaluate(model, test_sets, extract_features(model, test_sets, threads), options, threads);
}

EvalReport evaluate(const AfrdModel& model, const std::vector<ImageSet>& test_sets, const FeatureBank& bank,
                    const ScoreOptions& options, std::size_t threads) {
    options.validate();
    check_finite(model);
    if (bank.per_set.size() != test_sets.size()) throw DataError("evaluate: feature bank does not match the test sets");
    bank.check_teacher(model);
    std::vector<AnomalyResult> results(test_sets.size());
    parallel_for(test_sets.size(), threads == 0 ? default_threads() : threads, [&](std::size_t i) {
        const auto& s = test_sets[i];
        try {
            results[i] = score_features(model, bank.model_inputs(model.config, i), s.height(), s.width(), options,
                                        s.sample_id);
        } catch (const Error& e) {
            throw NumericError("evaluate: sample " + s.sample_id + ": " + e.what());
        }
    });
    std::vector<std::uint8_t> labels;
    std::vector<std::vector<std::uint8_t>> masks;
    for (const auto& s : test_sets) {
        labels.push_back(s.label == Label::anomalous ? 1 : 0);
        masks.push_back(mask_bytes(s));
    }
    return summarize(std::move(results), std::move(labels), masks);
}

void write_maps(const std::vector<AnomalyResult>& results, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError(dir + ": cannot create directory: " + ec.message());
    for (const auto& r : results) {
        if (r.map.empty()) continue;
        const auto [lo_it, hi_it] = std::minmax_element(r.map.begin(), r.map.end());
        const double lo = *lo_it, hi = *hi_it;
        Image8 img{r.width, r.height, 1, 255, std::vector<std::uint8_t>(r.map.size(), 0)};
        if (hi > lo)
            for (std::size_t i = 0; i < r.map.size(); ++i)
                img.pixels[i] = static_cast<std::uint8_t>(std::lround((r.map[i] - lo) / (hi - lo) * 255.0));
        write_pnm((fs::path(dir) / (r.sample_id + ".pgm")).string(), img);
        char buf[96];
        std::snprintf(buf, sizeof buf, "min = %.17g\nmax = %.17g\n", lo, hi);
        write_file((fs::path(dir) / (r.sample_id + ".range")).string(), buf);
    }
}

std::vector<double> read_map(const std::string& dir, const std::string& sample_id, std::size_t* height,
                             std::size_t* width) {
    const Image8 img = read_pnm((fs::path(dir) / (sample_id + ".pgm")).string());
    const std::string range_path = (fs::path(dir) / (sample_id + ".range")).string();
    double lo = 0, hi = 0;
    if (std::sscanf(read_file(range_path).c_str(), "min = %lf\nmax = %lf", &lo, &hi) != 2) {
        throw FormatError(range_path + ": expected 'min = <v>' and 'max = <v>'");
    }
    std::vector<double> out(img.pixels.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = lo + (hi - lo) * static_cast<double>(img.pixels[i]) / 255.0;
    if (height) *height = img.height;
    if (width) *width = img.width;
    return out;
}

AFRD_END_NAMESPACE
