#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <mutex>
#include <set>
#include <sstream>

#include "afrd/checkpoint.hpp"
#include "afrd/error.hpp"
#include "afrd/parallel.hpp"

namespace fs = std::filesystem;

namespace afrd::cli {

namespace {

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys{
        "paths.data",        "paths.out",          "paths.out_ckpt",       "paths.ckpt",
        "paths.report",      "paths.maps_dir",     "scene.seed",           "scene.lightings",
        "scene.size",        "scene.train",        "scene.test_normal",    "scene.test_anomalous",
        "scene.test",        "scene.anomaly_rate", "scene.ambient",        "scene.elevation",
        "scene.defects",     "model.fusion",       "model.attention_mode", "model.stem_width",
        "model.widths",      "model.embed_width",  "model.normalize_input", "train.epochs",
        "train.lr",          "train.batch",        "train.weight_decay",   "train.beta1",
        "train.beta2",       "train.adam_eps",     "train.seed",           "train.level_weights",
        "score.sigma",       "score.image_score",  "score.top_k",          "ablate.seeds",
        "ablate.jobs",
    };
    return keys;
}

bool is_path_key(const std::string& key) { return key.rfind("paths.", 0) == 0; }

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
    throw ConfigError(key + ": invalid value '" + value + "' (expected " + expected + ")");
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
    return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
    return static_cast<std::size_t>(parse_u64(key, v));
}

double parse_double(const std::string& key, const std::string& v) {
    double out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) {
        bad_value(key, v, "a finite number");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    bad_value(key, v, "true or false");
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : v) {
        if (c == ',' || c == ' ' || c == '\t') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

template <typename T, typename F>
std::vector<T> parse_list(const std::string& key, const std::string& v, F parse_one) {
    std::vector<T> out;
    for (const auto& item : split_list(v)) out.push_back(parse_one(key, item));
    return out;
}

std::string fmt_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return ec == std::errc() ? std::string(buf, ptr) : std::to_string(v);
}

template <typename T>
std::string join(const std::vector<T>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ", ";
        if constexpr (std::is_floating_point_v<T>) {
            out += fmt_double(xs[i]);
        } else {
            out += std::to_string(xs[i]);
        }
    }
    return out;
}

std::string relative_to(const std::string& path, const std::string& base_dir) {
    if (path.empty()) return path;
    std::error_code ec;
    const fs::path abs = fs::absolute(path, ec).lexically_normal();
    const fs::path base = fs::absolute(base_dir.empty() ? "." : base_dir, ec).lexically_normal();
    const fs::path rel = abs.lexically_relative(base);
    if (rel.empty()) return abs.generic_string();
    return rel.generic_string();
}

}  // namespace

KeyValues parse_config_text(const std::string& text, const std::string& base_dir, const std::string& origin) {
    KeyValues kv;
    std::istringstream is(text);
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::string where = origin + ":" + std::to_string(line_no);
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']') throw ConfigError(where + ": malformed section header");
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
        if (section.empty()) throw ConfigError(where + ": key outside any [section]");
        const std::string key = section + "." + trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (!known_keys().count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
        if (is_path_key(key) && !value.empty() && fs::path(value).is_relative()) {
            value = (fs::path(base_dir) / value).lexically_normal().generic_string();
        }
        kv[key] = value;
    }
    return kv;
}

KeyValues read_config_file(const std::string& path) {
    if (!fs::is_regular_file(path)) throw ConfigError(path + ": config file not found");
    std::string dir = fs::path(path).parent_path().string();
    if (dir.empty()) dir = ".";
    return parse_config_text(read_file(path), dir, path);
}

FusionChoice FusionChoice::parse(const std::string& text) {
    FusionChoice f;
    if (text == "attention") return f;
    if (text == "mean") {
        f.mode = FusionMode::mean;
        return f;
    }
    if (text.rfind("single:", 0) == 0) {
        f.single = parse_size("model.fusion", text.substr(7));
        return f;
    }
    throw ConfigError("model.fusion: invalid value '" + text + "' (expected attention, mean or single:<j>)");
}

std::string FusionChoice::to_string() const {
    if (single) return "single:" + std::to_string(*single);
    return afrd::to_string(mode);
}

void RunConfig::apply(const KeyValues& kv) {
    for (const auto& [key, v] : kv) {
        if (!known_keys().count(key)) throw ConfigError("unknown key '" + key + "'");
        if (key == "paths.data") data = v;
        else if (key == "paths.out") out = v;
        else if (key == "paths.out_ckpt") out_ckpt = v;
        else if (key == "paths.ckpt") ckpt = v;
        else if (key == "paths.report") report = v;
        else if (key == "paths.maps_dir") maps_dir = v;
        else if (key == "scene.seed") scene_seed = parse_u64(key, v);
        else if (key == "scene.lightings") lightings = parse_size(key, v);
        else if (key == "scene.size") size = parse_size(key, v);
        else if (key == "scene.train") n_train = parse_size(key, v);
        else if (key == "scene.test_normal") n_test_normal = parse_size(key, v);
        else if (key == "scene.test_anomalous") n_test_anomalous = parse_size(key, v);
        else if (key == "scene.test") n_test = v.empty() ? std::nullopt : std::optional(parse_size(key, v));
        else if (key == "scene.anomaly_rate") anomaly_rate = parse_double(key, v);
        else if (key == "scene.ambient") ambient = parse_double(key, v);
        else if (key == "scene.elevation") elevation = parse_double(key, v);
        else if (key == "scene.defects") {
            defects.clear();
            for (const auto& item : split_list(v)) defects.push_back(parse_defect_kind(item));
        }
        else if (key == "model.fusion") fusion = FusionChoice::parse(v).to_string();
        else if (key == "model.attention_mode") attention_mode = parse_attention_mode(v);
        else if (key == "model.stem_width") stem_width = parse_size(key, v);
        else if (key == "model.widths") widths = parse_list<std::size_t>(key, v, parse_size);
        else if (key == "model.embed_width") embed_width = parse_size(key, v);
        else if (key == "model.normalize_input") normalize_input = parse_bool(key, v);
        else if (key == "train.epochs") train.epochs = parse_size(key, v);
        else if (key == "train.lr") train.learning_rate = parse_double(key, v);
        else if (key == "train.batch") train.batch_size = parse_size(key, v);
        else if (key == "train.weight_decay") train.weight_decay = parse_double(key, v);
        else if (key == "train.beta1") train.beta1 = parse_double(key, v);
        else if (key == "train.beta2") train.beta2 = parse_double(key, v);
        else if (key == "train.adam_eps") train.adam_eps = parse_double(key, v);
        else if (key == "train.seed") train.seed = parse_u64(key, v);
        else if (key == "train.level_weights") train.level_weights = parse_list<double>(key, v, parse_double);
        else if (key == "score.sigma") score.smooth_sigma = parse_double(key, v);
        else if (key == "score.image_score") score.image_score = parse_image_score_mode(v);
        else if (key == "score.top_k") score.top_k = parse_size(key, v);
        else if (key == "ablate.seeds") seeds = parse_list<std::uint64_t>(key, v, parse_u64);
        else if (key == "ablate.jobs") jobs = parse_size(key, v);
    }
}

void RunConfig::validate() const {
    scene_spec().validate();
    if (n_test && *n_test > 0 && anomaly_rate > 0 && anomaly_rate < 1 && *n_test < 2) {
        throw ConfigError("scene.test: need at least 2 samples to hold both labels");
    }
    FusionChoice::parse(fusion);
    if (widths.empty()) throw ConfigError("model.widths: at least one level is required");
    for (auto w : widths)
        if (w == 0) throw ConfigError("model.widths: widths must be positive");
    if (stem_width == 0 || embed_width == 0) throw ConfigError("model: widths must be positive");
    train.validate(widths.size());
    score.validate();
    if (seeds.empty()) throw ConfigError("ablate.seeds: at least one seed is required");
    if (jobs < 1) throw ConfigError("ablate.jobs must be >= 1");
}

std::string RunConfig::to_text(const std::string& base_dir) const {
    std::ostringstream os;
    os << "[paths]\n"
       << "data = " << relative_to(data, base_dir) << '\n'
       << "out = " << relative_to(out, base_dir) << '\n'
       << "out_ckpt = " << relative_to(out_ckpt, base_dir) << '\n'
       << "ckpt = " << relative_to(ckpt, base_dir) << '\n'
       << "report = " << relative_to(report, base_dir) << '\n'
       << "maps_dir = " << relative_to(maps_dir, base_dir) << '\n'
       << "\n[scene]\n"
       << "seed = " << scene_seed << '\n'
       << "lightings = " << lightings << '\n'
       << "size = " << size << '\n'
       << "train = " << n_train << '\n'
       << "test_normal = " << n_test_normal << '\n'
       << "test_anomalous = " << n_test_anomalous << '\n';
    if (n_test) os << "test = " << *n_test << '\n';
    os << "anomaly_rate = " << fmt_double(anomaly_rate) << '\n'
       << "ambient = " << fmt_double(ambient) << '\n'
       << "elevation = " << fmt_double(elevation) << '\n'
       << "defects = ";
    for (std::size_t i = 0; i < defects.size(); ++i) os << (i ? ", " : "") << afrd::to_string(defects[i]);
    os << "\n\n[model]\n"
       << "fusion = " << fusion << '\n'
       << "attention_mode = " << afrd::to_string(attention_mode) << '\n'
       << "stem_width = " << stem_width << '\n'
       << "widths = " << join(widths) << '\n'
       << "embed_width = " << embed_width << '\n'
       << "normalize_input = " << (normalize_input ? "true" : "false") << '\n'
       << "\n[train]\n"
       << "epochs = " << train.epochs << '\n'
       << "lr = " << fmt_double(train.learning_rate) << '\n'
       << "batch = " << train.batch_size << '\n'
       << "weight_decay = " << fmt_double(train.weight_decay) << '\n'
       << "beta1 = " << fmt_double(train.beta1) << '\n'
       << "beta2 = " << fmt_double(train.beta2) << '\n'
       << "adam_eps = " << fmt_double(train.adam_eps) << '\n'
       << "seed = " << train.seed << '\n'
       << "level_weights = " << join(train.level_weights) << '\n'
       << "\n[score]\n"
       << "sigma = " << fmt_double(score.smooth_sigma) << '\n'
       << "image_score = " << afrd::to_string(score.image_score) << '\n'
       << "top_k = " << score.top_k << '\n'
       << "\n[ablate]\n"
       << "seeds = " << join(seeds) << '\n'
       << "jobs = " << jobs << '\n';
    return os.str();
}

SceneSpec RunConfig::scene_spec() const {
    SceneSpec s;
    s.n_lightings = lightings;
    s.image_size = size;
    s.light_directions = default_light_directions(lightings, elevation);
    s.anomaly_rate = anomaly_rate;
    s.defect_kinds = defects;
    s.ambient = ambient;
    s.seed = scene_seed;
    return s;
}

ModelConfig RunConfig::model_config(const FusionChoice& choice, std::size_t dataset_lightings,
                                    std::size_t image_size) const {
    ModelConfig m;
    m.input_size = image_size;
    m.stem_width = stem_width;
    m.widths = widths;
    m.embed_width = embed_width;
    m.attention_mode = attention_mode;
    m.normalize_input = normalize_input;
    m.fusion = choice.mode;
    if (choice.single) {
        if (*choice.single >= dataset_lightings) {
            throw ConfigError("model.fusion: " + choice.to_string() + " is out of range for a dataset with " +
                              std::to_string(dataset_lightings) + " lightings");
        }
        m.n_lightings = 1;
        m.lighting_subset = {*choice.single};
    } else {
        m.n_lightings = dataset_lightings;
    }
    m.validate();
    return m;
}

// ============================================================================
// Ablation
// ============================================================================

namespace {

std::string fmt_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace

const AblationRow& AblationResult::row(const std::string& variant) const {
    for (const auto& r : rows)
        if (r.variant == variant) return r;
    throw ConfigError("ablation has no variant " + variant);
}

std::string AblationResult::table_csv() const {
    std::string out = "variant,i_auroc,p_auroc\n";
    for (const auto& r : rows)
        out += r.variant + "," + fmt_metric(r.i_auroc) + "," + (r.p_auroc ? fmt_metric(*r.p_auroc) : "") + "\n";
    return out;
}

std::string AblationResult::runs_csv() const {
    std::string out = "seed,variant,i_auroc,p_auroc,final_loss\n";
    for (const auto& r : runs) {
        out += std::to_string(r.seed) + "," + r.variant + "," + fmt_metric(r.i_auroc) + "," +
               (r.p_auroc ? fmt_metric(*r.p_auroc) : "") + "," +
               (r.train.epoch_loss.empty() ? "" : fmt_metric(r.train.epoch_loss.back())) + "\n";
    }
    return out;
}

std::string AblationResult::weights_csv() const {
    std::string out = "seed,variant,level,lighting,weight\n";
    for (const auto& r : runs) {
        if (r.train.epoch_weights.empty()) continue;
        const auto& last = r.train.epoch_weights.back();
        for (std::size_t l = 0; l < last.size(); ++l)
            for (std::size_t j = 0; j < last[l].size(); ++j) {
                char buf[32];
                std::snprintf(buf, sizeof buf, "%.9g", last[l][j]);
                out += std::to_string(r.seed) + "," + r.variant + "," + std::to_string(l) + "," + std::to_string(j) +
                       "," + buf + "\n";
            }
    }
    return out;
}

std::string AblationResult::summary() const {
    std::ostringstream os;
    os << "lightings = " << n_lightings << "\nseeds =";
    std::set<std::uint64_t> seen;
    for (const auto& r : runs)
        if (seen.insert(r.seed).second) os << ' ' << r.seed;
    os << "\n\n";
    for (const auto& r : rows) {
        os << r.variant << ": i_auroc " << fmt_metric(r.i_auroc);
        if (r.p_auroc) os << ", p_auroc " << fmt_metric(*r.p_auroc);
        os << '\n';
    }
    const AblationRow* best_single = nullptr;
    double lo = 2, hi = -1;
    for (const auto& r : rows) {
        if (r.variant.rfind("single:", 0) != 0) continue;
        if (!best_single || r.i_auroc > best_single->i_auroc) best_single = &r;
        lo = std::min(lo, r.i_auroc);
        hi = std::max(hi, r.i_auroc);
    }
    if (best_single) {
        os << "\nbest single lighting = " << best_single->variant << " (" << fmt_metric(best_single->i_auroc) << ")\n"
           << "single lighting spread = " << fmt_metric(hi - lo) << '\n';
    }
    os << "best variant = " << best << '\n';
    return os.str();
}

AblationResult run_ablation(const Dataset& data, const AblationOptions& options) {
    if (data.train.empty()) throw DataError("ablate: dataset has no training samples");
    if (data.test.empty()) throw DataError("ablate: dataset has no test samples");
    if (options.seeds.empty()) throw ConfigError("ablate: no seeds");
    AblationResult result;
    const std::size_t n = data.n_lightings;
    result.n_lightings = n;
    for (std::size_t j = 0; j < n; ++j) result.variants.push_back("single:" + std::to_string(j));
    if (n > 1) result.variants.push_back("mean");
    result.variants.push_back("attention");
    const std::size_t size = data.train[0].height();

    std::mutex log_mutex;
    auto log = [&](const std::string& msg) {
        if (!options.progress) return;
        std::lock_guard lock(log_mutex);
        options.progress(msg);
    };

    for (auto seed : options.seeds) {
        const AfrdModel reference = model_init(options.base.model_config({}, n, size), seed);
        const FeatureBank train_bank = extract_features(reference, data.train);
        const FeatureBank test_bank = extract_features(reference, data.test);
        std::vector<AblationRun> runs(result.variants.size());
        const std::size_t inner_threads = options.jobs > 1 ? 1 : 0;
        parallel_for(result.variants.size(), options.jobs, [&](std::size_t v) {
            const std::string& name = result.variants[v];
            const ModelConfig mc = options.base.model_config(FusionChoice::parse(name), n, size);
            AfrdModel model = model_init(mc, seed);
            TrainConfig tc = options.base.train;
            tc.seed = seed;
            AblationRun run;
            run.seed = seed;
            run.variant = name;
            run.train = train(model, train_bank, tc);
            const EvalReport ev = evaluate(model, data.test, test_bank, options.base.score, inner_threads);
            run.i_auroc = ev.i_auroc;
            run.p_auroc = ev.p_auroc;
            run.scores_csv = ev.scores_csv();
            log("seed " + std::to_string(seed) + " " + name + ": i_auroc " + fmt_metric(run.i_auroc) +
                (run.p_auroc ? ", p_auroc " + fmt_metric(*run.p_auroc) : std::string()));
            runs[v] = std::move(run);
        });
        for (auto& r : runs) result.runs.push_back(std::move(r));
    }

    for (const auto& name : result.variants) {
        AblationRow row;
        row.variant = name;
        double p_sum = 0;
        bool p_all = true;
        for (const auto& r : result.runs) {
            if (r.variant != name) continue;
            row.i_per_seed.push_back(r.i_auroc);
            if (r.p_auroc) {
                p_sum += *r.p_auroc;
            } else {
                p_all = false;
            }
        }
        double i_sum = 0;
        for (double x : row.i_per_seed) i_sum += x;
        const auto k = static_cast<double>(row.i_per_seed.size());
        row.i_auroc = i_sum / k;
        if (p_all) row.p_auroc = p_sum / k;
        result.rows.push_back(std::move(row));
    }
    const AblationRow* best = &result.rows.front();
    for (const auto& r : result.rows)
        if (r.i_auroc > best->i_auroc) best = &r;
    result.best = best->variant;
    return result;
}

// ============================================================================
// Commands
// ============================================================================

namespace {

void require(const std::string& value, const std::string& flag) {
    if (value.empty()) throw ConfigError("missing required setting " + flag);
}

std::string parent_dir(const std::string& path) {
    const auto p = fs::path(path).parent_path();
    return p.empty() ? std::string(".") : p.string();
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError(dir + ": cannot create directory: " + ec.message());
}

int cmd_generate(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    require(cfg.out, "--out");
    std::size_t normal = cfg.n_test_normal, anomalous = cfg.n_test_anomalous;
    if (cfg.n_test) {
        anomalous = static_cast<std::size_t>(std::lround(static_cast<double>(*cfg.n_test) * cfg.anomaly_rate));
        normal = *cfg.n_test - anomalous;
    }
    const auto index = generate(cfg.scene_spec(), cfg.n_train, normal, anomalous, cfg.out);
    write_file((fs::path(cfg.out) / "generate.ini").string(), cfg.to_text(cfg.out));
    err << "generated " << index.entries.size() << " samples (" << cfg.n_train << " train, " << normal
        << " test normal, " << anomalous << " test anomalous) in " << cfg.out << '\n';
    out << tree_hash(cfg.out) << '\n';
    return kExitOk;
}

int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    require(cfg.data, "--data");
    require(cfg.out_ckpt, "--out-ckpt");
    const DatasetIndex index = read_index(cfg.data);
    const FusionChoice choice = FusionChoice::parse(cfg.fusion);
    if (choice.single && *choice.single >= index.n_lightings) {
        throw ConfigError("--fusion " + choice.to_string() + " is out of range for a dataset with " +
                          std::to_string(index.n_lightings) + " lightings");
    }
    const Dataset data = load_dataset(index);
    if (data.train.empty()) throw DataError(cfg.data + ": no training samples");
    const ModelConfig mc = cfg.model_config(choice, data.n_lightings, data.train[0].height());

    AfrdModel model = model_init(mc, cfg.train.seed);
    AdamState state;
    err << "training " << choice.to_string() << " on " << data.train.size() << " sets for " << cfg.train.epochs
        << " epochs\n";
    TrainReport report = train(model, data.train, cfg.train, &state);
    report.checkpoint_path = cfg.out_ckpt;
    ensure_dir(parent_dir(cfg.out_ckpt));
    save_checkpoint(model, &state, cfg.out_ckpt);
    write_file(cfg.out_ckpt + ".log", report.to_log());
    write_file(cfg.out_ckpt + ".csv", report.to_csv());
    write_file(cfg.out_ckpt + ".ini", cfg.to_text(parent_dir(cfg.out_ckpt)));
    if (!report.epoch_loss.empty()) out << "final_loss = " << report.epoch_loss.back() << '\n';
    out << "checkpoint = " << cfg.out_ckpt << '\n';
    return kExitOk;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out, std::ostream&) {
    require(cfg.data, "--data");
    require(cfg.ckpt, "--ckpt");
    require(cfg.report, "--report");
    const LoadedCheckpoint ckpt = load_checkpoint(cfg.ckpt);
    const Dataset data = load_dataset(cfg.data);
    for (std::size_t j = 0; j < ckpt.model.config.n_lightings; ++j) {
        if (ckpt.model.config.source_lighting(j) >= data.n_lightings) {
            throw DataError(cfg.ckpt + ": model reads lighting " + std::to_string(ckpt.model.config.source_lighting(j)) +
                            " but the dataset has " + std::to_string(data.n_lightings));
        }
    }
    const EvalReport report = evaluate(ckpt.model, data.test, cfg.score);
    ensure_dir(cfg.report);
    const fs::path dir(cfg.report);
    write_file((dir / "scores.csv").string(), report.scores_csv());
    write_file((dir / "roc.csv").string(), report.roc_csv());
    write_file((dir / "summary.txt").string(), report.summary());
    write_file((dir / "eval.ini").string(), cfg.to_text(cfg.report));
    if (!cfg.maps_dir.empty()) write_maps(report.results, cfg.maps_dir);
    out << report.summary();
    return kExitOk;
}

int cmd_ablate(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    require(cfg.data, "--data");
    require(cfg.out, "--out");
    const Dataset data = load_dataset(cfg.data);
    if (data.train.empty()) throw DataError(cfg.data + ": no training samples");
    cfg.model_config({}, data.n_lightings, data.train[0].height());
    AblationOptions opts;
    opts.seeds = cfg.seeds;
    opts.base = cfg;
    opts.jobs = cfg.jobs;
    opts.progress = [&](const std::string& msg) { err << msg << std::endl; };
    const AblationResult result = run_ablation(data, opts);
    ensure_dir(cfg.out);
    const fs::path dir(cfg.out);
    write_file((dir / "ablation.csv").string(), result.table_csv());
    write_file((dir / "runs.csv").string(), result.runs_csv());
    write_file((dir / "weights.csv").string(), result.weights_csv());
    write_file((dir / "summary.txt").string(), result.summary());
    write_file((dir / "ablate.ini").string(), cfg.to_text(cfg.out));
    out << result.summary();
    return kExitOk;
}

struct Flag {
    const char* name;
    const char* key;
    const char* help;
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multi-lighting anomaly detection by attention-fused reverse distillation"};
    app.require_subcommand(1, 1);

    const std::vector<std::pair<std::pair<const char*, const char*>, std::vector<Flag>>> commands{
        {{"generate", "Render a synthetic multi-lighting dataset"},
         {{"--out", "paths.out", "Output dataset directory"},
          {"--seed", "scene.seed", "Generator seed"},
          {"--lightings", "scene.lightings", "Number of lightings N"},
          {"--size", "scene.size", "Image size in pixels"},
          {"--train", "scene.train", "Training samples (all normal)"},
          {"--test-normal", "scene.test_normal", "Normal test samples"},
          {"--test-anomalous", "scene.test_anomalous", "Anomalous test samples"},
          {"--test", "scene.test", "Total test samples, split by --anomaly-rate"},
          {"--anomaly-rate", "scene.anomaly_rate", "Anomalous share of --test"},
          {"--elevation", "scene.elevation", "Light ring elevation in degrees"}}},
        {{"train", "Train a model on the normal training split"},
         {{"--data", "paths.data", "Dataset directory"},
          {"--out-ckpt", "paths.out_ckpt", "Checkpoint to write"},
          {"--epochs", "train.epochs", "Training epochs"},
          {"--lr", "train.lr", "Learning rate"},
          {"--batch", "train.batch", "Batch size (image sets)"},
          {"--weight-decay", "train.weight_decay", "AdamW weight decay"},
          {"--seed", "train.seed", "Initialization and shuffling seed"},
          {"--fusion", "model.fusion", "attention, mean or single:<j>"}}},
        {{"eval", "Score the test split and report AUROC"},
         {{"--data", "paths.data", "Dataset directory"},
          {"--ckpt", "paths.ckpt", "Checkpoint to evaluate"},
          {"--report", "paths.report", "Report directory"},
          {"--maps-dir", "paths.maps_dir", "Directory for PGM anomaly maps"},
          {"--sigma", "score.sigma", "Gaussian smoothing sigma (0 disables)"},
          {"--image-score", "score.image_score", "max or topk"},
          {"--top-k", "score.top_k", "Pixels averaged by topk"}}},
        {{"ablate", "Compare single-lighting, mean and attention fusion"},
         {{"--data", "paths.data", "Dataset directory"},
          {"--out", "paths.out", "Output directory"},
          {"--epochs", "train.epochs", "Training epochs"},
          {"--lr", "train.lr", "Learning rate"},
          {"--batch", "train.batch", "Batch size (image sets)"},
          {"--seeds", "ablate.seeds", "Comma-separated seeds"},
          {"--jobs", "ablate.jobs", "Variants trained in parallel"},
          {"--sigma", "score.sigma", "Gaussian smoothing sigma"}}},
    };

    struct Bound {
        CLI::App* sub;
        std::string config;
        std::vector<std::pair<std::string, std::string>> values;  // key, value
        std::vector<std::pair<CLI::Option*, std::string>> options;
    };
    std::vector<Bound> bound(commands.size());
    for (std::size_t c = 0; c < commands.size(); ++c) {
        auto& b = bound[c];
        b.sub = app.add_subcommand(commands[c].first.first, commands[c].first.second);
        b.sub->add_option("--config", b.config, "Config file (key = value with [sections])");
        b.values.resize(commands[c].second.size());
        for (std::size_t f = 0; f < commands[c].second.size(); ++f) {
            const Flag& flag = commands[c].second[f];
            b.values[f].first = flag.key;
            b.options.emplace_back(b.sub->add_option(flag.name, b.values[f].second, flag.help), flag.key);
        }
    }

    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    std::size_t chosen = 0;
    for (std::size_t c = 0; c < bound.size(); ++c)
        if (bound[c].sub->parsed()) chosen = c;
    const auto& b = bound[chosen];
    const std::string name = commands[chosen].first.first;

    RunConfig cfg;
    try {
        if (!b.config.empty()) cfg.apply(read_config_file(b.config));
        KeyValues flags;
        for (std::size_t f = 0; f < b.values.size(); ++f)
            if (b.options[f].first->count() > 0) flags[b.values[f].first] = b.values[f].second;
        cfg.apply(flags);
        cfg.validate();
    } catch (const ConfigError& e) {
        err << name << ": " << e.what() << '\n';
        return kExitUsage;
    }

    try {
        if (name == "generate") return cmd_generate(cfg, out, err);
        if (name == "train") return cmd_train(cfg, out, err);
        if (name == "eval") return cmd_eval(cfg, out, err);
        return cmd_ablate(cfg, out, err);
    } catch (const ConfigError& e) {
        err << name << ": " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << name << ": " << e.what() << '\n';
        return kExitFailure;
    }
}

}  // namespace afrd::cli
