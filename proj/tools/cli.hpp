// Command-line front end: generate, train, eval and ablate.
//
// Settings come from an optional `--config` file (flat `key = value` lines
// under `[section]` headers, paths relative to the file) overridden by flags.
// Exit codes: 0 success, 1 runtime failure, 2 bad flags or configuration.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "afrd/dataset.hpp"
#include "afrd/scoring.hpp"

namespace afrd::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// `section.key` -> value.
using KeyValues = std::map<std::string, std::string>;

/// Parses the config file format. Path-valued keys are resolved against
/// `base_dir`. Throws ConfigError on syntax errors or unknown keys.
KeyValues parse_config_text(const std::string& text, const std::string& base_dir, const std::string& origin);
KeyValues read_config_file(const std::string& path);

/// Fusion variant: learned attention, constant mean, or a single dataset
/// lighting fed through the attention path with N = 1.
struct FusionChoice {
    FusionMode mode = FusionMode::attention;
    std::optional<std::size_t> single;

    static FusionChoice parse(const std::string& text);
    std::string to_string() const;
};

struct RunConfig {
    // [paths]
    std::string data, out, out_ckpt, ckpt, report, maps_dir;
    // [scene]
    std::uint64_t scene_seed = 0;
    std::size_t lightings = 6;
    std::size_t size = 64;
    std::size_t n_train = 150, n_test_normal = 30, n_test_anomalous = 30;
    std::optional<std::size_t> n_test;  // split by anomaly_rate when given
    double anomaly_rate = 0.5;
    double ambient = 0.05;
    double elevation = 20.0;
    std::vector<DefectKind> defects{DefectKind::bump, DefectKind::dent, DefectKind::scratch, DefectKind::stain};
    // [model]
    std::string fusion = "attention";
    AttentionMode attention_mode = AttentionMode::pooled;
    std::size_t stem_width = 32;
    std::vector<std::size_t> widths{64, 128, 256};
    std::size_t embed_width = 256;
    bool normalize_input = true;
    // [train]
    TrainConfig train;
    // [score]
    ScoreOptions score;
    // [ablate]
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::size_t jobs = 1;

    /// Applies key-values over the current settings. Throws ConfigError.
    void apply(const KeyValues& kv);
    void validate() const;  // throws ConfigError
    /// Full config in file format; paths relative to `base_dir`.
    std::string to_text(const std::string& base_dir) const;

    SceneSpec scene_spec() const;
    /// Model architecture for a dataset with `n_lightings` lightings of the
    /// given size under `fusion`.
    ModelConfig model_config(const FusionChoice& fusion, std::size_t dataset_lightings, std::size_t image_size) const;
};

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

struct AblationOptions {
    std::vector<std::uint64_t> seeds{0, 1, 2};
    RunConfig base;  // model, train and score settings
    std::size_t jobs = 1;
    std::function<void(const std::string&)> progress;
};

struct AblationRun {
    std::uint64_t seed = 0;
    std::string variant;
    double i_auroc = 0;
    std::optional<double> p_auroc;
    TrainReport train;
    std::string scores_csv;
};

struct AblationRow {
    std::string variant;
    double i_auroc = 0;               // mean over seeds
    std::optional<double> p_auroc;    // mean over seeds when available
    std::vector<double> i_per_seed;
};

struct AblationResult {
    std::size_t n_lightings = 0;
    std::vector<std::string> variants;
    std::vector<AblationRun> runs;  // seed-major, variants in order
    std::vector<AblationRow> rows;
    std::string best;

    /// `variant,i_auroc,p_auroc` (means over seeds).
    std::string table_csv() const;
    /// `seed,variant,i_auroc,p_auroc,final_loss`
    std::string runs_csv() const;
    /// `seed,variant,level,lighting,weight` from the final training epoch.
    std::string weights_csv() const;
    std::string summary() const;
    const AblationRow& row(const std::string& variant) const;
};

/// single:0..N-1, mean and attention (single:0 and attention when N = 1),
/// each trained and evaluated for every seed. Teacher features are cached
/// per seed and shared by all variants.
AblationResult run_ablation(const Dataset& data, const AblationOptions& options);

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Runs the CLI with argv-style arguments (args[0] is the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace afrd::cli
