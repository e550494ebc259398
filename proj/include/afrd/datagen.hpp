// Synthetic multi-lighting dataset generator and on-disk index.
//
// Each sample is a height-field object shaded with a Lambertian model under
// N directional lights: intensity = albedo * max(0, n.l) + ambient.
// Geometric defects (bump, dent, scratch) perturb the height field, so their
// visibility depends on the light direction; stains perturb the albedo and
// show under every light.
//
// Layout under the dataset root:
//   index.csv  sample_id,split,label,mask_path,img_path_0..img_path_{N-1}
//   <split>/<sample_id>/light_<j>.ppm   P6, 8-bit
//   <split>/<sample_id>/mask.pgm        P5, 0 normal / 255 anomalous
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "afrd/image_io.hpp"

namespace afrd {

enum class DefectKind { bump, dent, scratch, stain };

std::string to_string(DefectKind kind);
DefectKind parse_defect_kind(const std::string& text);
inline bool is_geometric(DefectKind k) { return k != DefectKind::stain; }

using Vec3 = std::array<double, 3>;

/// N lights at `elevation_deg` with equally spaced azimuths; with N = 6, five
/// share the elevation and the sixth is near-vertical (80 degrees).
std::vector<Vec3> default_light_directions(std::size_t n, double elevation_deg = 20.0);

struct SceneSpec {
    std::size_t n_lightings = 6;
    std::size_t image_size = 64;
    std::vector<Vec3> light_directions = default_light_directions(6);
    double anomaly_rate = 0.5;  // anomalous share of the test split when only a total is given
    std::vector<DefectKind> defect_kinds{DefectKind::bump, DefectKind::dent, DefectKind::scratch, DefectKind::stain};
    double ambient = 0.05;
    std::uint64_t seed = 0;

    /// Scene with `n` default light directions.
    static SceneSpec with_lightings(std::size_t n, std::size_t image_size = 64, std::uint64_t seed = 0);
    void validate() const;  // throws ConfigError
};

struct Defect {
    DefectKind kind = DefectKind::bump;
    double cx = 0, cy = 0;       // centre (pixels)
    double amplitude = 0;        // height (px) or albedo darkening fraction
    double size = 0;             // gaussian sigma or scratch half-width (px)
    double length = 0;           // scratch length (px)
    double angle = 0;            // scratch orientation (radians)
};

/// Everything the renderer produced for one sample, before and after
/// quantization. Geometry is kept so shading can be checked independently.
struct RenderedSample {
    std::string sample_id;
    bool anomalous = false;
    std::optional<Defect> defect;
    std::size_t size = 0;
    std::vector<double> height;                // [size*size]
    std::array<std::vector<double>, 3> albedo;  // per channel [size*size]
    std::vector<Image8> images;                 // per lighting, P6
    Image8 mask;                                // P5; all zero for normal samples
    std::vector<double> defect_contrast;        // per lighting, mean in-mask |I - I_clean|
};

/// Deterministic in (spec, sample_id, anomalous).
RenderedSample render_sample(const SceneSpec& spec, const std::string& sample_id, bool anomalous);

struct IndexEntry {
    std::string sample_id;
    std::string split;  // "train" or "test"
    bool anomalous = false;
    std::string mask_path;                 // relative; empty when absent
    std::vector<std::string> image_paths;  // relative, one per lighting
};

struct DatasetIndex {
    std::string root;
    std::size_t n_lightings = 0;
    std::vector<IndexEntry> entries;

    std::string to_csv() const;
    static DatasetIndex parse_csv(const std::string& text, const std::string& root);
};

/// Renders and writes a dataset; returns its index.
DatasetIndex generate(const SceneSpec& spec, std::size_t n_train, std::size_t n_test_normal,
                      std::size_t n_test_anomalous, const std::string& out_dir);

/// Reads and validates root/index.csv (referenced files must exist).
DatasetIndex read_index(const std::string& root);

/// SHA-256 over every regular file below root (sorted relative path, size,
/// bytes), as lowercase hex.
std::string tree_hash(const std::string& root);

}  // namespace afrd
