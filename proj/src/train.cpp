#include "afrd/train.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "afrd/parallel.hpp"
#include "afrd/random.hpp"

AFRD_BEGIN_NAMESPACE

// ============================================================================
// Config and report
// ============================================================================

void TrainConfig::validate(std::size_t levels) const {
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0,1)");
    if (!(adam_eps > 0)) throw ConfigError("adam eps must be > 0");
    if (!level_weights.empty() && level_weights.size() != levels) {
        throw ConfigError("level_weights has " + std::to_string(level_weights.size()) + " entries for " +
                          std::to_string(levels) + " levels");
    }
    for (double w : level_weights)
        if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("level weights must be finite and >= 0");
}

std::vector<double> TrainConfig::resolved_level_weights(std::size_t levels) const {
    return level_weights.empty() ? std::vector<double>(levels, 1.0) : level_weights;
}

std::string TrainReport::to_log() const {
    std::ostringstream os;
    os << std::setprecision(9);
    for (std::size_t e = 0; e < epoch_loss.size(); ++e) {
        os << "epoch " << e + 1 << " loss " << epoch_loss[e];
        for (std::size_t l = 0; l < epoch_weights[e].size(); ++l) {
            os << " | level" << l << " w=[";
            for (std::size_t j = 0; j < epoch_weights[e][l].size(); ++j)
                os << (j ? "," : "") << epoch_weights[e][l][j];
            os << "] H=" << epoch_entropy[e][l];
        }
        os << '\n';
    }
    os << "wall_seconds " << wall_seconds << '\n';
    if (!checkpoint_path.empty()) os << "checkpoint " << checkpoint_path << '\n';
    return os.str();
}

std::string TrainReport::to_csv() const {
    std::ostringstream os;
    os << std::setprecision(9);
    const std::size_t levels = epoch_entropy.empty() ? 0 : epoch_entropy[0].size();
    os << "epoch,loss";
    for (std::size_t l = 0; l < levels; ++l) os << ",entropy_l" << l;
    os << '\n';
    for (std::size_t e = 0; e < epoch_loss.size(); ++e) {
        os << e + 1 << ',' << epoch_loss[e];
        for (double h : epoch_entropy[e]) os << ',' << h;
        os << '\n';
    }
    return os.str();
}

// ============================================================================
// Loss and optimizer
// ============================================================================

Tensor distill_loss(const FeaturePyramid& fused, const FeaturePyramid& student,
                    const std::vector<double>& level_weights) {
    if (fused.size() != student.size()) {
        throw DimensionError("distill_loss", "levels",
                             std::to_string(fused.size()) + " vs " + std::to_string(student.size()));
    }
    if (level_weights.size() != fused.size()) {
        throw DimensionError("distill_loss", "level weights",
                             std::to_string(level_weights.size()) + " weights for " + std::to_string(fused.size()) +
                                 " levels");
    }
    Tensor total;
    for (std::size_t l = 0; l < fused.size(); ++l) {
        Tensor term = scale(add_scalar(scale(mean(cosine_map(fused[l], student[l])), real(-1)), real(1)),
                            static_cast<real>(level_weights[l]));
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

void AdamState::init(const std::vector<Tensor>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
        m.emplace_back(p.numel(), real(0));
        v.emplace_back(p.numel(), real(0));
    }
    step = 0;
}

bool AdamState::matches(const std::vector<Tensor>& params) const {
    if (m.size() != params.size() || v.size() != params.size()) return false;
    for (std::size_t i = 0; i < params.size(); ++i)
        if (m[i].size() != params[i].numel() || v[i].size() != params[i].numel()) return false;
    return true;
}

void adamw_step(const std::vector<Tensor>& params, AdamState& state, const AdamWConfig& cfg) {
    if (!state.matches(params)) {
        if (state.step != 0 || !state.m.empty()) throw ConfigError("adamw_step: optimizer state does not match parameters");
        state.init(params);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].requires_grad() || !params[i].has_grad()) continue;
        for (real g : params[i].grad()) {
            if (!std::isfinite(g)) {
                throw NumericError("adamw_step: non-finite gradient in parameter " + std::to_string(i) +
                                   "; step aborted");
            }
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    const auto b1 = static_cast<real>(cfg.beta1), b2 = static_cast<real>(cfg.beta2);
    const auto decay = static_cast<real>(1.0 - cfg.lr * cfg.weight_decay);
    const auto step_size = static_cast<real>(cfg.lr / bc1);
    const auto inv_sqrt_bc2 = static_cast<real>(1.0 / std::sqrt(bc2));
    const auto eps = static_cast<real>(cfg.eps);

    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor p = params[i];
        if (!p.requires_grad()) continue;
        auto data = p.mutable_data();
        auto& m = state.m[i];
        auto& v = state.v[i];
        const bool has_grad = p.has_grad();
        const std::span<const real> grad = has_grad ? p.grad() : std::span<const real>{};
        for (std::size_t k = 0; k < data.size(); ++k) {
            const real g = has_grad ? grad[k] : real(0);
            m[k] = b1 * m[k] + (1 - b1) * g;
            v[k] = b2 * v[k] + (1 - b2) * g * g;
            // p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps)
            data[k] = data[k] * decay - step_size * m[k] / (std::sqrt(v[k]) * inv_sqrt_bc2 + eps);
        }
    }
}

// ============================================================================
// Feature cache
// ============================================================================

std::uint64_t teacher_digest(const AfrdModel& model) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& nt : model.named_tensors()) {
        if (nt.role != ParamRole::teacher) continue;
        h ^= fnv1a(nt.name);
        const auto d = nt.tensor.data();
        const auto* bytes = reinterpret_cast<const unsigned char*>(d.data());
        for (std::size_t i = 0; i < d.size_bytes(); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

void FeatureBank::check_teacher(const AfrdModel& model) const {
    if (teacher_digest != afrd::teacher_digest(model)) {
        throw ConfigError("feature bank was extracted with a different teacher");
    }
}

std::vector<FeaturePyramid> FeatureBank::model_inputs(const ModelConfig& config, std::size_t i) const {
    std::vector<FeaturePyramid> out;
    for (std::size_t j = 0; j < config.n_lightings; ++j) {
        const std::size_t src = config.source_lighting(j);
        if (src >= per_set.at(i).size()) {
            throw DimensionError("feature_bank", "lighting",
                                 sample_ids[i] + " has no lighting " + std::to_string(src));
        }
        out.push_back(per_set[i][src]);
    }
    return out;
}

FeatureBank extract_features(const AfrdModel& model, const std::vector<ImageSet>& sets, std::size_t threads) {
    FeatureBank bank;
    bank.teacher_digest = teacher_digest(model);
    bank.per_set.resize(sets.size());
    for (const auto& s : sets) bank.sample_ids.push_back(s.sample_id);
    parallel_for(sets.size(), threads == 0 ? default_threads() : threads, [&](std::size_t i) {
        const ImageSet& set = sets[i];
        set.validate();
        auto& row = bank.per_set[i];
        for (std::size_t src = 0; src < set.lightings(); ++src) {
            row.push_back(teacher_features(model, stack_lighting({&set}, src)));
        }
    });
    return bank;
}

// ============================================================================
// Training loop
// ============================================================================

namespace {

std::vector<FeaturePyramid> assemble_batch(const AfrdModel& model, const FeatureBank& bank,
                                           const std::vector<std::size_t>& indices) {
    const std::size_t n = model.config.n_lightings;
    const std::size_t levels = model.config.levels();
    std::vector<std::vector<FeaturePyramid>> rows;
    rows.reserve(indices.size());
    for (auto i : indices) rows.push_back(bank.model_inputs(model.config, i));
    std::vector<FeaturePyramid> batch(n);
    NoGradGuard no_grad;
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t l = 0; l < levels; ++l) {
            std::vector<Tensor> parts;
            parts.reserve(rows.size());
            for (const auto& r : rows) parts.push_back(r[j][l]);
            batch[j].levels.push_back(parts.size() == 1 ? parts[0] : concat(parts, 0));
        }
    }
    return batch;
}

double entropy(std::span<const real> w) {
    double h = 0;
    for (real x : w)
        if (x > 0) h -= static_cast<double>(x) * std::log(static_cast<double>(x));
    return h;
}

}  // namespace

TrainReport train(AfrdModel& model, const std::vector<ImageSet>& train_sets, const TrainConfig& config,
                  AdamState* optimizer) {
    if (train_sets.empty()) throw DataError("train: empty training set");
    const std::size_t n = train_sets[0].lightings();
    const std::size_t h = train_sets[0].height(), w = train_sets[0].width();
    for (const auto& s : train_sets) {
        if (s.label != Label::normal) {
            throw DataError("train: sample " + s.sample_id + " is anomalous; training uses anomaly-free sets only");
        }
        if (s.lightings() != n) throw DataError("train: sample " + s.sample_id + " has a different lighting count");
        if (s.height() != h || s.width() != w) throw DataError("train: sample " + s.sample_id + " has a different size");
    }
    config.validate(model.config.levels());
    return train(model, extract_features(model, train_sets), config, optimizer);
}

TrainReport train(AfrdModel& model, const FeatureBank& bank, const TrainConfig& config, AdamState* optimizer) {
    const auto start = std::chrono::steady_clock::now();
    const std::size_t levels = model.config.levels();
    config.validate(levels);
    if (bank.per_set.empty()) throw DataError("train: empty training set");
    bank.check_teacher(model);
    const auto level_weights = config.resolved_level_weights(levels);

    std::vector<Tensor> params;
    for (const auto& nt : model.trainable()) params.push_back(nt.tensor);
    AdamState state;
    state.init(params);
    const AdamWConfig opt{config.learning_rate, config.beta1, config.beta2, config.adam_eps, config.weight_decay};

    TrainReport report;
    std::vector<std::size_t> order(bank.per_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(config.seed, "shuffle"));

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

        double loss_sum = 0;
        std::size_t seen = 0;
        std::vector<std::vector<double>> w_sum(levels, std::vector<double>(model.config.n_lightings, 0.0));
        std::vector<double> h_sum(levels, 0.0);

        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            const std::size_t end = std::min(order.size(), begin + config.batch_size);
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
            const auto inputs = assemble_batch(model, bank, idx);
            const ForwardResult fr = afrd_forward(model, inputs, true);
            Tensor loss = distill_loss(fr.fused, fr.student, level_weights);
            const double value = static_cast<double>(loss.item());
            if (!std::isfinite(value)) throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch + 1));

            for (auto& p : params) p.zero_grad();
            backward(loss);
            adamw_step(params, state, opt);

            const std::size_t b = idx.size();
            loss_sum += value * static_cast<double>(b);
            seen += b;
            for (std::size_t l = 0; l < levels; ++l) {
                const auto wd = fr.weights.per_level[l].data();
                const std::size_t nl = model.config.n_lightings;
                for (std::size_t r = 0; r < b; ++r) {
                    for (std::size_t j = 0; j < nl; ++j) w_sum[l][j] += static_cast<double>(wd[r * nl + j]);
                    h_sum[l] += entropy(wd.subspan(r * nl, nl));
                }
            }
        }
        for (auto& p : params) p.zero_grad();

        report.epoch_loss.push_back(loss_sum / static_cast<double>(seen));
        for (auto& lv : w_sum)
            for (auto& x : lv) x /= static_cast<double>(seen);
        for (auto& x : h_sum) x /= static_cast<double>(seen);
        report.epoch_weights.push_back(std::move(w_sum));
        report.epoch_entropy.push_back(std::move(h_sum));
    }
    if (optimizer != nullptr) *optimizer = std::move(state);
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

AFRD_END_NAMESPACE
