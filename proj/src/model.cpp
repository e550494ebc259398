#include "afrd/model.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <sstream>

#include "afrd/random.hpp"

AFRD_BEGIN_NAMESPACE

// ============================================================================
// Config
// ============================================================================

std::string to_string(AttentionMode mode) { return mode == AttentionMode::pooled ? "pooled" : "literal"; }
std::string to_string(FusionMode mode) { return mode == FusionMode::attention ? "attention" : "mean"; }

AttentionMode parse_attention_mode(const std::string& text) {
    if (text == "pooled") return AttentionMode::pooled;
    if (text == "literal") return AttentionMode::literal;
    throw ConfigError("unknown attention mode '" + text + "' (expected pooled|literal)");
}

FusionMode parse_fusion_mode(const std::string& text) {
    if (text == "attention") return FusionMode::attention;
    if (text == "mean") return FusionMode::mean;
    throw ConfigError("unknown fusion mode '" + text + "' (expected attention|mean)");
}

std::size_t ModelConfig::source_lighting(std::size_t j) const {
    return lighting_subset.empty() ? j : lighting_subset.at(j);
}

void ModelConfig::validate() const {
    if (n_lightings < 1) throw ConfigError("n_lightings must be >= 1");
    if (!lighting_subset.empty() && lighting_subset.size() != n_lightings) {
        throw ConfigError("lighting_subset has " + std::to_string(lighting_subset.size()) +
                          " entries but n_lightings is " + std::to_string(n_lightings));
    }
    if (widths.empty()) throw ConfigError("widths must name at least one pyramid level");
    for (auto w : widths)
        if (w == 0) throw ConfigError("channel widths must be positive");
    if (stem_width == 0) throw ConfigError("stem_width must be positive");
    if (embed_width == 0) throw ConfigError("embed_width must be positive");
    const auto factor = downsample_factor();
    if (input_size < factor || input_size % factor != 0) {
        throw ConfigError("input_size " + std::to_string(input_size) + " must be a positive multiple of " +
                          std::to_string(factor));
    }
}

namespace {

template <class T>
std::string join(const std::vector<T>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            std::size_t pos = 0;
            out.push_back(std::stoul(item, &pos));
            if (pos != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("model config: bad integer '" + item + "' for " + key);
        }
    }
    return out;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::string ModelConfig::to_text() const {
    std::ostringstream os;
    os << "input_size = " << input_size << '\n'
       << "n_lightings = " << n_lightings << '\n'
       << "lighting_subset = " << join(lighting_subset) << '\n'
       << "stem_width = " << stem_width << '\n'
       << "widths = " << join(widths) << '\n'
       << "embed_width = " << embed_width << '\n'
       << "attention_mode = " << to_string(attention_mode) << '\n'
       << "fusion = " << to_string(fusion) << '\n'
       << "normalize_input = " << (normalize_input ? "true" : "false") << '\n';
    return os.str();
}

ModelConfig ModelConfig::parse(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("model config: expected key = value, got '" + line + "'");
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    ModelConfig c;
    auto one = [&](const std::string& key, std::size_t& dst) {
        if (auto it = kv.find(key); it != kv.end()) {
            auto v = parse_list(key, it->second);
            if (v.size() != 1) throw ConfigError("model config: " + key + " needs one integer");
            dst = v[0];
            kv.erase(it);
        }
    };
    one("input_size", c.input_size);
    one("n_lightings", c.n_lightings);
    one("stem_width", c.stem_width);
    one("embed_width", c.embed_width);
    if (auto it = kv.find("lighting_subset"); it != kv.end()) {
        c.lighting_subset = parse_list(it->first, it->second);
        kv.erase(it);
    }
    if (auto it = kv.find("widths"); it != kv.end()) {
        c.widths = parse_list(it->first, it->second);
        kv.erase(it);
    }
    if (auto it = kv.find("attention_mode"); it != kv.end()) {
        c.attention_mode = parse_attention_mode(it->second);
        kv.erase(it);
    }
    if (auto it = kv.find("fusion"); it != kv.end()) {
        c.fusion = parse_fusion_mode(it->second);
        kv.erase(it);
    }
    if (auto it = kv.find("normalize_input"); it != kv.end()) {
        if (it->second != "true" && it->second != "false")
            throw ConfigError("model config: normalize_input must be true or false");
        c.normalize_input = it->second == "true";
        kv.erase(it);
    }
    if (!kv.empty()) throw ConfigError("model config: unknown key '" + kv.begin()->first + "'");
    c.validate();
    return c;
}

void ImageSet::validate() const {
    if (images.empty()) throw DataError(sample_id + ": image set holds no lightings");
    const Shape& ref = images[0].shape();
    if (ref.size() != 3 || ref[0] != 3) {
        throw DataError(sample_id + ": lighting 0 is not an RGB image [3,H,W]: " + shape_str(ref));
    }
    for (std::size_t j = 1; j < images.size(); ++j) {
        if (images[j].shape() != ref) {
            throw DataError(sample_id + ": lighting " + std::to_string(j) + " has shape " +
                            shape_str(images[j].shape()) + ", expected " + shape_str(ref));
        }
    }
    if (mask) {
        if (mask->shape() != Shape{ref[1], ref[2]}) {
            throw DataError(sample_id + ": mask shape " + shape_str(mask->shape()) + " does not match image");
        }
        if (label == Label::normal) {
            for (auto v : mask->data())
                if (v != real(0)) throw DataError(sample_id + ": normal sample carries a nonzero mask");
        }
    }
}

// ============================================================================
// Construction
// ============================================================================

namespace {

enum class Kind { conv_weight, convt_weight, linear_weight, bias, gamma, beta, running_mean, running_var };

using Visitor = std::function<void(const std::string&, const Tensor&, ParamRole, Kind)>;

void visit_conv(const std::string& p, const Conv2dLayer& c, ParamRole role, const Visitor& fn) {
    fn(p + ".weight", c.weight, role, Kind::conv_weight);
    fn(p + ".bias", c.bias, role, Kind::bias);
}

void visit_bn(const std::string& p, const BatchNorm2dLayer& bn, ParamRole role, const Visitor& fn) {
    fn(p + ".gamma", bn.gamma, role, Kind::gamma);
    fn(p + ".beta", bn.beta, role, Kind::beta);
    fn(p + ".running_mean", bn.state.running_mean, ParamRole::buffer, Kind::running_mean);
    fn(p + ".running_var", bn.state.running_var, ParamRole::buffer, Kind::running_var);
}

void visit_cbr(const std::string& p, const ConvBnRelu& b, ParamRole role, const Visitor& fn) {
    visit_conv(p + ".conv", b.conv, role, fn);
    visit_bn(p + ".bn", b.bn, role, fn);
}

// Teacher tensors are reported with role `teacher`, including its batchnorm
// statistics, so the frozen set is exactly the "teacher." prefix.
void visit_model(const AfrdModel& m, const Visitor& fn) {
    const auto teacher_fn = [&](const std::string& n, const Tensor& t, ParamRole, Kind k) {
        fn(n, t, ParamRole::teacher, k);
    };
    visit_cbr("teacher.stem", m.teacher.stem, ParamRole::teacher, teacher_fn);
    for (std::size_t s = 0; s < m.teacher.stages.size(); ++s)
        for (std::size_t b = 0; b < m.teacher.stages[s].size(); ++b)
            visit_cbr("teacher.stage" + std::to_string(s) + ".block" + std::to_string(b), m.teacher.stages[s][b],
                      ParamRole::teacher, teacher_fn);

    const auto tr = ParamRole::trainable;
    for (std::size_t l = 0; l < m.attention.per_level.size(); ++l) {
        const std::string p = "attention.level" + std::to_string(l);
        fn(p + ".weight", m.attention.per_level[l].weight, tr, Kind::linear_weight);
        fn(p + ".bias", m.attention.per_level[l].bias, tr, Kind::bias);
    }
    for (std::size_t l = 0; l < m.bottleneck.downsample.size(); ++l)
        for (std::size_t k = 0; k < m.bottleneck.downsample[l].size(); ++k)
            visit_cbr("bottleneck.level" + std::to_string(l) + ".down" + std::to_string(k),
                      m.bottleneck.downsample[l][k], tr, fn);
    visit_cbr("bottleneck.fuse", m.bottleneck.fuse, tr, fn);

    visit_cbr("student.entry", m.student.entry, tr, fn);
    for (std::size_t l = 0; l < m.student.ups.size(); ++l) {
        const std::string p = "student.up" + std::to_string(l);
        fn(p + ".up.weight", m.student.ups[l].up.weight, tr, Kind::convt_weight);
        fn(p + ".up.bias", m.student.ups[l].up.bias, tr, Kind::bias);
        visit_bn(p + ".bn", m.student.ups[l].bn, tr, fn);
    }
    for (std::size_t l = 0; l < m.student.heads.size(); ++l)
        visit_conv("student.head" + std::to_string(l), m.student.heads[l], tr, fn);
}

Conv2dLayer make_conv(std::size_t cin, std::size_t cout, std::size_t k, int stride, int pad, bool grad) {
    return {Tensor::zeros({cout, cin, k, k}, grad), Tensor::zeros({cout}, grad), stride, pad};
}

BatchNorm2dLayer make_bn(std::size_t c, bool grad) {
    BatchNorm2dLayer bn{Tensor::full({c}, real(1), grad), Tensor::zeros({c}, grad), {}};
    bn.state.running_mean = Tensor::zeros({c});
    bn.state.running_var = Tensor::full({c}, real(1));
    return bn;
}

ConvBnRelu make_cbr(std::size_t cin, std::size_t cout, std::size_t k, int stride, int pad, bool grad) {
    return {make_conv(cin, cout, k, stride, pad, grad), make_bn(cout, grad)};
}

}  // namespace

AfrdModel model_skeleton(const ModelConfig& config) {
    config.validate();
    AfrdModel m;
    m.config = config;
    const std::size_t levels = config.levels();
    const auto& w = config.widths;

    m.teacher.stem = make_cbr(3, config.stem_width, 3, 2, 1, false);
    std::size_t prev = config.stem_width;
    for (std::size_t l = 0; l < levels; ++l) {
        m.teacher.stages.push_back({make_cbr(prev, w[l], 3, 2, 1, false), make_cbr(w[l], w[l], 3, 1, 1, false)});
        prev = w[l];
    }

    if (config.fusion == FusionMode::attention) {
        const std::size_t n = config.n_lightings;
        for (std::size_t l = 0; l < levels; ++l) {
            std::size_t din = n * w[l];
            if (config.attention_mode == AttentionMode::literal) din *= config.level_size(l) * config.level_size(l);
            m.attention.per_level.push_back({Tensor::zeros({n, din}, true), Tensor::zeros({n}, true)});
        }
    }

    for (std::size_t l = 0; l + 1 < levels; ++l) {
        std::vector<ConvBnRelu> chain;
        for (std::size_t k = l; k + 1 < levels; ++k) chain.push_back(make_cbr(w[k], w[k + 1], 3, 2, 1, true));
        m.bottleneck.downsample.push_back(std::move(chain));
    }
    m.bottleneck.fuse = make_cbr(levels * w[levels - 1], config.embed_width, 1, 1, 0, true);

    m.student.entry = make_cbr(config.embed_width, w[levels - 1], 3, 1, 1, true);
    for (std::size_t l = 0; l + 1 < levels; ++l) {
        m.student.ups.push_back({{Tensor::zeros({w[l + 1], w[l], 2, 2}, true), Tensor::zeros({w[l]}, true), 2, 0},
                                 make_bn(w[l], true)});
    }
    for (std::size_t l = 0; l < levels; ++l) m.student.heads.push_back(make_conv(w[l], w[l], 3, 1, 1, true));
    return m;
}

AfrdModel model_init(const ModelConfig& config, std::uint64_t seed) {
    AfrdModel m = model_skeleton(config);
    visit_model(m, [seed](const std::string& name, const Tensor& t, ParamRole, Kind kind) {
        double bound = 0;
        const auto& s = t.shape();
        switch (kind) {
            case Kind::conv_weight: bound = std::sqrt(6.0 / static_cast<double>(s[1] * s[2] * s[3])); break;
            // Each output of a stride-2 transposed conv sees Cin*k*k/4 inputs.
            case Kind::convt_weight: bound = std::sqrt(6.0 / static_cast<double>(s[0] * s[2] * s[3] / 4)); break;
            case Kind::linear_weight: bound = 1.0 / std::sqrt(static_cast<double>(s[1])); break;
            default: return;
        }
        Rng rng(derive_seed(seed, name));
        Tensor handle = t;
        for (auto& v : handle.mutable_data()) v = static_cast<real>(rng.uniform(-bound, bound));
    });
    return m;
}

AfrdModel AfrdModel::clone() const {
    AfrdModel copy = model_skeleton(config);
    auto src = named_tensors();
    auto dst = copy.named_tensors();
    for (std::size_t i = 0; i < src.size(); ++i) {
        auto from = src[i].tensor.data();
        auto to = dst[i].tensor.mutable_data();
        std::copy(from.begin(), from.end(), to.begin());
    }
    return copy;
}

std::vector<NamedTensor> AfrdModel::named_tensors() const {
    std::vector<NamedTensor> out;
    visit_model(*this, [&](const std::string& n, const Tensor& t, ParamRole r, Kind) { out.push_back({n, t, r}); });
    return out;
}

std::vector<NamedTensor> AfrdModel::trainable() const {
    std::vector<NamedTensor> out;
    for (auto& nt : named_tensors())
        if (nt.role == ParamRole::trainable) out.push_back(std::move(nt));
    return out;
}

std::size_t AfrdModel::parameter_count(ParamRole role) const {
    std::size_t n = 0;
    for (const auto& nt : named_tensors())
        if (nt.role == role) n += nt.tensor.numel();
    return n;
}

// ============================================================================
// Forward passes
// ============================================================================

Tensor stack_lighting(const std::vector<const ImageSet*>& sets, std::size_t source) {
    if (sets.empty()) throw DimensionError("stack_lighting", "batch", "no image sets");
    const Shape& ref = sets[0]->images.at(source).shape();
    const std::size_t per = shape_numel(ref);
    std::vector<real> data(sets.size() * per);
    for (std::size_t b = 0; b < sets.size(); ++b) {
        if (source >= sets[b]->images.size()) {
            throw DimensionError("stack_lighting", "lighting",
                                 sets[b]->sample_id + " has no lighting " + std::to_string(source));
        }
        const Tensor& img = sets[b]->images[source];
        if (img.shape() != ref) {
            throw DimensionError("stack_lighting", "image size",
                                 sets[b]->sample_id + " has " + shape_str(img.shape()) + ", expected " +
                                     shape_str(ref));
        }
        std::copy(img.data().begin(), img.data().end(), data.begin() + static_cast<std::ptrdiff_t>(b * per));
    }
    return Tensor(Shape{sets.size(), ref[0], ref[1], ref[2]}, std::move(data));
}

FeaturePyramid teacher_features(const AfrdModel& model, const Tensor& images) {
    const auto& cfg = model.config;
    if (images.ndim() != 4 || images.dim(1) != 3) {
        throw DimensionError("teacher_forward", "channels", "expected [B,3,H,W], got " + shape_str(images.shape()));
    }
    if (images.dim(2) != cfg.input_size || images.dim(3) != cfg.input_size) {
        throw DimensionError("teacher_forward", "image size",
                             "model expects " + std::to_string(cfg.input_size) + "x" +
                                 std::to_string(cfg.input_size) + ", got " + shape_str(images.shape()));
    }
    NoGradGuard no_grad;
    Tensor x = images;
    if (cfg.normalize_input) {
        static constexpr real kMean[3] = {real(0.485), real(0.456), real(0.406)};
        static constexpr real kStd[3] = {real(0.229), real(0.224), real(0.225)};
        std::vector<real> d(x.data().begin(), x.data().end());
        const std::size_t plane = x.dim(2) * x.dim(3);
        for (std::size_t i = 0; i < d.size(); ++i) {
            const std::size_t c = (i / plane) % 3;
            d[i] = (d[i] - kMean[c]) / kStd[c];
        }
        x = Tensor(x.shape(), std::move(d));
    }
    Tensor h = model.teacher.stem(x, false);
    FeaturePyramid out;
    for (const auto& stage : model.teacher.stages) {
        for (const auto& block : stage) h = block(h, false);
        out.levels.push_back(h);
    }
    return out;
}

std::vector<FeaturePyramid> teacher_forward(const AfrdModel& model, const ImageSet& set) {
    std::vector<FeaturePyramid> out;
    for (std::size_t j = 0; j < model.config.n_lightings; ++j) {
        out.push_back(teacher_features(model, stack_lighting({&set}, model.config.source_lighting(j))));
    }
    return out;
}

namespace {

void check_pyramids(const char* op, const AfrdModel& model, const std::vector<FeaturePyramid>& feats) {
    if (feats.size() != model.config.n_lightings) {
        throw DimensionError(op, "lightings",
                             "model expects N=" + std::to_string(model.config.n_lightings) + ", got " +
                                 std::to_string(feats.size()));
    }
}

}  // namespace

Tensor attention_weights(const AfrdModel& model, const std::vector<FeaturePyramid>& feats, std::size_t level) {
    check_pyramids("attention_weights", model, feats);
    if (level >= model.config.levels()) {
        throw DimensionError("attention_weights", "level", "no pyramid level " + std::to_string(level));
    }
    const std::size_t n = feats.size();
    const std::size_t batch = feats[0][level].dim(0);
    if (model.config.fusion == FusionMode::mean) {
        return Tensor::full({batch, n}, real(1) / static_cast<real>(n));
    }
    std::vector<Tensor> parts;
    parts.reserve(n);
    for (const auto& pyr : feats) {
        parts.push_back(model.config.attention_mode == AttentionMode::pooled ? global_avg_pool(pyr[level])
                                                                            : flatten(pyr[level]));
    }
    Tensor logits = model.attention.per_level[level](concat(parts, 1));
    return softmax(logits, 1);
}

FeaturePyramid attention_fuse(const std::vector<FeaturePyramid>& feats, const AttentionWeights& weights) {
    if (feats.empty()) throw DimensionError("attention_fuse", "lightings", "no pyramids");
    const std::size_t levels = feats[0].size();
    if (weights.per_level.size() != levels) {
        throw DimensionError("attention_fuse", "levels",
                             std::to_string(weights.per_level.size()) + " weight vectors for " +
                                 std::to_string(levels) + " levels");
    }
    FeaturePyramid fused;
    for (std::size_t l = 0; l < levels; ++l) {
        std::vector<Tensor> maps;
        for (const auto& pyr : feats) {
            if (pyr.size() != levels) throw DimensionError("attention_fuse", "levels", "pyramids differ in depth");
            maps.push_back(pyr[l]);
        }
        fused.levels.push_back(weighted_sum(maps, weights.per_level[l]));
    }
    return fused;
}

Tensor bottleneck_forward(const AfrdModel& model, const FeaturePyramid& fused, bool training) {
    const auto& cfg = model.config;
    const std::size_t levels = cfg.levels();
    if (fused.size() != levels) {
        throw DimensionError("bottleneck_forward", "levels",
                             "expected " + std::to_string(levels) + ", got " + std::to_string(fused.size()));
    }
    for (std::size_t l = 0; l < levels; ++l) {
        const auto& t = fused[l];
        const std::size_t s = cfg.level_size(l);
        if (t.ndim() != 4 || t.dim(1) != cfg.widths[l] || t.dim(2) != s || t.dim(3) != s) {
            throw DimensionError("bottleneck_forward", "level " + std::to_string(l),
                                 "expected [B," + std::to_string(cfg.widths[l]) + "," + std::to_string(s) + "," +
                                     std::to_string(s) + "], got " + shape_str(t.shape()));
        }
    }
    std::vector<Tensor> parts;
    for (std::size_t l = 0; l + 1 < levels; ++l) {
        Tensor h = fused[l];
        for (const auto& block : model.bottleneck.downsample[l]) h = block(h, training);
        parts.push_back(h);
    }
    parts.push_back(fused[levels - 1]);
    return model.bottleneck.fuse(concat(parts, 1), training);
}

FeaturePyramid student_forward(const AfrdModel& model, const Tensor& embedding, bool training) {
    const auto& cfg = model.config;
    const std::size_t levels = cfg.levels();
    const std::size_t s = cfg.level_size(levels - 1);
    if (embedding.ndim() != 4 || embedding.dim(1) != cfg.embed_width || embedding.dim(2) != s ||
        embedding.dim(3) != s) {
        throw DimensionError("student_forward", "embedding",
                             "expected [B," + std::to_string(cfg.embed_width) + "," + std::to_string(s) + "," +
                                 std::to_string(s) + "], got " + shape_str(embedding.shape()));
    }
    FeaturePyramid out;
    out.levels.resize(levels);
    Tensor h = model.student.entry(embedding, training);
    out.levels[levels - 1] = model.student.heads[levels - 1](h);
    for (std::size_t l = levels - 1; l-- > 0;) {
        h = model.student.ups[l](h, training);
        out.levels[l] = model.student.heads[l](h);
    }
    return out;
}

ForwardResult afrd_forward(const AfrdModel& model, const std::vector<FeaturePyramid>& feats, bool training) {
    check_pyramids("afrd_forward", model, feats);
    ForwardResult r;
    for (std::size_t l = 0; l < model.config.levels(); ++l) r.weights.per_level.push_back(attention_weights(model, feats, l));
    r.fused = attention_fuse(feats, r.weights);
    r.embedding = bottleneck_forward(model, r.fused, training);
    r.student = student_forward(model, r.embedding, training);
    return r;
}

AFRD_END_NAMESPACE
