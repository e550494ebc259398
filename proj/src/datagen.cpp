#include "afrd/datagen.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <numbers>
#include <sstream>

#include "afrd/error.hpp"
#include "afrd/parallel.hpp"
#include "afrd/random.hpp"

namespace fs = std::filesystem;

namespace afrd {

std::string to_string(DefectKind kind) {
    switch (kind) {
        case DefectKind::bump: return "bump";
        case DefectKind::dent: return "dent";
        case DefectKind::scratch: return "scratch";
        case DefectKind::stain: return "stain";
    }
    return "?";
}

DefectKind parse_defect_kind(const std::string& text) {
    for (auto k : {DefectKind::bump, DefectKind::dent, DefectKind::scratch, DefectKind::stain})
        if (to_string(k) == text) return k;
    throw ConfigError("unknown defect kind '" + text + "' (expected bump, dent, scratch or stain)");
}

namespace {

Vec3 light_from_angles(double elevation_deg, double azimuth_deg) {
    const double e = elevation_deg * std::numbers::pi / 180.0;
    const double a = azimuth_deg * std::numbers::pi / 180.0;
    return {std::cos(e) * std::cos(a), std::cos(e) * std::sin(a), std::sin(e)};
}

}  // namespace

std::vector<Vec3> default_light_directions(std::size_t n, double elevation_deg) {
    std::vector<Vec3> out;
    const std::size_t ring = n == 6 ? 5 : n;
    for (std::size_t j = 0; j < ring; ++j)
        out.push_back(light_from_angles(elevation_deg, 360.0 * static_cast<double>(j) / static_cast<double>(ring)));
    if (n == 6) out.push_back(light_from_angles(80.0, 0.0));
    return out;
}

SceneSpec SceneSpec::with_lightings(std::size_t n, std::size_t image_size, std::uint64_t seed) {
    SceneSpec s;
    s.n_lightings = n;
    s.image_size = image_size;
    s.light_directions = default_light_directions(n);
    s.seed = seed;
    return s;
}

void SceneSpec::validate() const {
    if (n_lightings < 1) throw ConfigError("scene: n_lightings must be >= 1");
    if (light_directions.size() != n_lightings) {
        throw ConfigError("scene: " + std::to_string(light_directions.size()) + " light directions for " +
                          std::to_string(n_lightings) + " lightings");
    }
    for (std::size_t j = 0; j < light_directions.size(); ++j) {
        const auto& l = light_directions[j];
        const double norm = std::sqrt(l[0] * l[0] + l[1] * l[1] + l[2] * l[2]);
        if (!(std::abs(norm - 1.0) < 1e-6)) {
            throw ConfigError("scene: light direction " + std::to_string(j) + " is not unit length");
        }
    }
    if (image_size < 8) throw ConfigError("scene: image_size must be >= 8");
    if (!(anomaly_rate >= 0.0 && anomaly_rate <= 1.0)) throw ConfigError("scene: anomaly_rate must be in [0, 1]");
    if (defect_kinds.empty()) throw ConfigError("scene: at least one defect kind is required");
    if (!(ambient >= 0.0 && ambient < 1.0)) throw ConfigError("scene: ambient must be in [0, 1)");
}

namespace {

constexpr int kMaxDefectAttempts = 64;

struct Surface {
    std::vector<double> height;
    std::array<std::vector<double>, 3> albedo;
};

// Smooth dome with low-frequency undulations; albedo is a tinted base with a
// mild periodic texture.
Surface make_surface(std::size_t n, Rng& rng) {
    Surface s;
    s.height.resize(n * n);
    for (auto& a : s.albedo) a.resize(n * n);
    const double sz = static_cast<double>(n);
    const double dome = sz * rng.uniform(0.10, 0.16);
    const double spread = sz * rng.uniform(0.40, 0.50);
    const double cx = sz * rng.uniform(0.45, 0.55), cy = sz * rng.uniform(0.45, 0.55);
    struct Wave {
        double amp, kx, ky, phase;
    };
    std::array<Wave, 2> waves{};
    for (auto& w : waves) {
        const double wavelength = sz * rng.uniform(0.35, 0.6);
        const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
        w = {rng.uniform(0.1, 0.2), std::cos(dir) * 2.0 * std::numbers::pi / wavelength,
             std::sin(dir) * 2.0 * std::numbers::pi / wavelength, rng.uniform(0.0, 2.0 * std::numbers::pi)};
    }
    const double base = rng.uniform(0.62, 0.78);
    std::array<double, 3> tint{};
    for (auto& t : tint) t = base * rng.uniform(0.92, 1.08);
    const double tex_amp = rng.uniform(0.02, 0.04);
    const double tex_dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double tex_k = 2.0 * std::numbers::pi / (sz * rng.uniform(0.2, 0.3));
    const double tex_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const double fx = static_cast<double>(x), fy = static_cast<double>(y);
            const double r2 = (fx - cx) * (fx - cx) + (fy - cy) * (fy - cy);
            double h = dome * std::exp(-0.5 * r2 / (spread * spread));
            for (const auto& w : waves) h += w.amp * std::sin(w.kx * fx + w.ky * fy + w.phase);
            s.height[y * n + x] = h;
            const double t =
                1.0 + tex_amp * std::sin(tex_k * (std::cos(tex_dir) * fx + std::sin(tex_dir) * fy) + tex_phase);
            for (int c = 0; c < 3; ++c) s.albedo[static_cast<std::size_t>(c)][y * n + x] = tint[static_cast<std::size_t>(c)] * t;
        }
    return s;
}

Defect sample_defect(const SceneSpec& spec, Rng& rng) {
    const double sz = static_cast<double>(spec.image_size);
    Defect d;
    d.kind = spec.defect_kinds[rng.below(spec.defect_kinds.size())];
    const double margin = sz * 0.2;
    d.cx = rng.uniform(margin, sz - margin);
    d.cy = rng.uniform(margin, sz - margin);
    switch (d.kind) {
        case DefectKind::bump:
        case DefectKind::dent:
            d.amplitude = rng.uniform(1.5, 2.5);
            d.size = rng.uniform(2.5, 4.0);
            break;
        case DefectKind::scratch:
            d.amplitude = rng.uniform(1.0, 1.5);
            d.size = rng.uniform(0.8, 1.3);
            d.length = std::min(rng.uniform(16.0, 28.0), sz * 0.5);
            d.angle = rng.uniform(0.0, std::numbers::pi);
            break;
        case DefectKind::stain:
            d.amplitude = rng.uniform(0.3, 0.5);
            d.size = rng.uniform(3.0, 5.0);
            break;
    }
    return d;
}

double segment_distance(const Defect& d, double x, double y) {
    const double ux = std::cos(d.angle), uy = std::sin(d.angle);
    const double px = x - d.cx, py = y - d.cy;
    const double t = std::clamp(px * ux + py * uy, -0.5 * d.length, 0.5 * d.length);
    const double qx = px - t * ux, qy = py - t * uy;
    return std::sqrt(qx * qx + qy * qy);
}

// Applies the defect to the surface in place and returns its support mask.
std::vector<std::uint8_t> apply_defect(const Defect& d, std::size_t n, Surface& s) {
    std::vector<std::uint8_t> mask(n * n, 0);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const double fx = static_cast<double>(x), fy = static_cast<double>(y);
            const std::size_t i = y * n + x;
            if (d.kind == DefectKind::scratch) {
                const double dist = segment_distance(d, fx, fy);
                s.height[i] -= d.amplitude * std::exp(-0.5 * dist * dist / (d.size * d.size));
                if (dist < 2.0 * d.size) mask[i] = 255;
                continue;
            }
            const double r2 = (fx - d.cx) * (fx - d.cx) + (fy - d.cy) * (fy - d.cy);
            const double g = std::exp(-0.5 * r2 / (d.size * d.size));
            if (d.kind == DefectKind::bump) s.height[i] += d.amplitude * g;
            if (d.kind == DefectKind::dent) s.height[i] -= d.amplitude * g;
            if (d.kind == DefectKind::stain)
                for (auto& a : s.albedo) a[i] *= 1.0 - d.amplitude * g;
            if (r2 < 4.0 * d.size * d.size) mask[i] = 255;
        }
    return mask;
}

// Unit normals from central differences (one-sided at the border).
std::vector<Vec3> surface_normals(const std::vector<double>& h, std::size_t n) {
    std::vector<Vec3> out(n * n);
    auto at = [&](std::size_t y, std::size_t x) { return h[y * n + x]; };
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const std::size_t x0 = x == 0 ? 0 : x - 1, x1 = x + 1 == n ? x : x + 1;
            const std::size_t y0 = y == 0 ? 0 : y - 1, y1 = y + 1 == n ? y : y + 1;
            const double hx = (at(y, x1) - at(y, x0)) / static_cast<double>(x1 - x0);
            const double hy = (at(y1, x) - at(y0, x)) / static_cast<double>(y1 - y0);
            const double norm = std::sqrt(hx * hx + hy * hy + 1.0);
            out[y * n + x] = {-hx / norm, -hy / norm, 1.0 / norm};
        }
    return out;
}

// Lambertian intensities per lighting, channel-interleaved [n*n*3].
std::vector<std::vector<double>> shade(const SceneSpec& spec, const Surface& s) {
    const std::size_t n = spec.image_size;
    const auto normals = surface_normals(s.height, n);
    std::vector<std::vector<double>> out(spec.n_lightings, std::vector<double>(n * n * 3));
    for (std::size_t j = 0; j < spec.n_lightings; ++j) {
        const auto& l = spec.light_directions[j];
        for (std::size_t i = 0; i < n * n; ++i) {
            const auto& nv = normals[i];
            const double lambert = std::max(0.0, nv[0] * l[0] + nv[1] * l[1] + nv[2] * l[2]);
            for (std::size_t c = 0; c < 3; ++c) out[j][i * 3 + c] = s.albedo[c][i] * lambert + spec.ambient;
        }
    }
    return out;
}

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

std::vector<double> contrast(const std::vector<std::vector<double>>& shaded,
                             const std::vector<std::vector<double>>& clean, const std::vector<std::uint8_t>& mask) {
    std::vector<double> out(shaded.size(), 0.0);
    std::size_t count = 0;
    for (auto m : mask) count += m != 0;
    if (count == 0) return out;
    for (std::size_t j = 0; j < shaded.size(); ++j) {
        double acc = 0;
        for (std::size_t i = 0; i < mask.size(); ++i) {
            if (mask[i] == 0) continue;
            for (std::size_t c = 0; c < 3; ++c) acc += std::abs(shaded[j][i * 3 + c] - clean[j][i * 3 + c]);
        }
        out[j] = acc / static_cast<double>(count * 3);
    }
    return out;
}

bool directional(const std::vector<double>& c) {
    const auto [lo, hi] = std::minmax_element(c.begin(), c.end());
    return *hi > 0 && *hi >= 2.0 * *lo;
}

}  // namespace

RenderedSample render_sample(const SceneSpec& spec, const std::string& sample_id, bool anomalous) {
    spec.validate();
    const std::size_t n = spec.image_size;
    Rng surface_rng(derive_seed(spec.seed, sample_id));
    Surface clean = make_surface(n, surface_rng);
    const auto clean_shaded = shade(spec, clean);

    RenderedSample out;
    out.sample_id = sample_id;
    out.anomalous = anomalous;
    out.size = n;
    out.mask = Image8{n, n, 1, 255, std::vector<std::uint8_t>(n * n, 0)};

    Surface surface = clean;
    auto shaded = clean_shaded;
    if (anomalous) {
        Rng defect_rng(derive_seed(spec.seed, sample_id + "/defect"));
        bool accepted = false;
        for (int attempt = 0; attempt < kMaxDefectAttempts && !accepted; ++attempt) {
            const Defect d = sample_defect(spec, defect_rng);
            surface = clean;
            auto mask = apply_defect(d, n, surface);
            shaded = shade(spec, surface);
            auto c = contrast(shaded, clean_shaded, mask);
            const bool visible = *std::max_element(c.begin(), c.end()) > 0;
            if (!visible) continue;
            if (is_geometric(d.kind) && spec.n_lightings > 1 && !directional(c)) continue;
            out.defect = d;
            out.mask.pixels = std::move(mask);
            out.defect_contrast = std::move(c);
            accepted = true;
        }
        if (!accepted) {
            throw DataError(sample_id + ": no defect met the directional-visibility requirement after " +
                            std::to_string(kMaxDefectAttempts) + " attempts; check the light geometry");
        }
    } else {
        out.defect_contrast.assign(spec.n_lightings, 0.0);
    }

    out.height = std::move(surface.height);
    out.albedo = std::move(surface.albedo);
    for (const auto& img : shaded) {
        Image8 im{n, n, 3, 255, std::vector<std::uint8_t>(img.size())};
        std::transform(img.begin(), img.end(), im.pixels.begin(), quantize);
        out.images.push_back(std::move(im));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Index
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

std::string DatasetIndex::to_csv() const {
    std::ostringstream os;
    os << "sample_id,split,label,mask_path";
    for (std::size_t j = 0; j < n_lightings; ++j) os << ",img_path_" << j;
    os << '\n';
    for (const auto& e : entries) {
        os << e.sample_id << ',' << e.split << ',' << (e.anomalous ? "anomalous" : "normal") << ',' << e.mask_path;
        for (const auto& p : e.image_paths) os << ',' << p;
        os << '\n';
    }
    return os.str();
}

DatasetIndex DatasetIndex::parse_csv(const std::string& text, const std::string& root) {
    const std::string origin = (fs::path(root) / "index.csv").string();
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line)) throw FormatError(origin + ": empty index");
    const auto header = split_csv_line(line);
    if (header.size() < 5 || header[0] != "sample_id" || header[1] != "split" || header[2] != "label" ||
        header[3] != "mask_path") {
        throw FormatError(origin + ": header must be sample_id,split,label,mask_path,img_path_0,...");
    }
    DatasetIndex idx;
    idx.root = root;
    idx.n_lightings = header.size() - 4;
    for (std::size_t j = 0; j < idx.n_lightings; ++j)
        if (header[4 + j] != "img_path_" + std::to_string(j))
            throw FormatError(origin + ": header column " + std::to_string(4 + j) + " should be img_path_" +
                              std::to_string(j));

    std::size_t line_no = 1;
    std::map<std::string, std::size_t> seen;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto f = split_csv_line(line);
        const std::string where = origin + ":" + std::to_string(line_no);
        if (f.size() != header.size()) {
            throw FormatError(where + ": expected " + std::to_string(header.size()) + " fields, got " +
                              std::to_string(f.size()));
        }
        IndexEntry e;
        e.sample_id = f[0];
        e.split = f[1];
        if (e.sample_id.empty()) throw FormatError(where + ": empty sample_id");
        if (!seen.emplace(e.sample_id, line_no).second) throw FormatError(where + ": duplicate sample_id " + e.sample_id);
        if (e.split != "train" && e.split != "test") throw FormatError(where + ": split must be train or test");
        if (f[2] == "anomalous") {
            e.anomalous = true;
        } else if (f[2] != "normal") {
            throw FormatError(where + ": label must be normal or anomalous");
        }
        e.mask_path = f[3];
        for (std::size_t j = 0; j < idx.n_lightings; ++j) {
            if (f[4 + j].empty()) throw FormatError(where + ": empty img_path_" + std::to_string(j));
            e.image_paths.push_back(f[4 + j]);
        }
        idx.entries.push_back(std::move(e));
    }
    return idx;
}

DatasetIndex generate(const SceneSpec& spec, std::size_t n_train, std::size_t n_test_normal,
                      std::size_t n_test_anomalous, const std::string& out_dir) {
    spec.validate();
    DatasetIndex idx;
    idx.root = out_dir;
    idx.n_lightings = spec.n_lightings;
    auto add = [&](const std::string& split, std::size_t i, bool anomalous) {
        char id[32];
        std::snprintf(id, sizeof id, "%s_%04zu", split.c_str(), i);
        IndexEntry e;
        e.sample_id = id;
        e.split = split;
        e.anomalous = anomalous;
        const std::string dir = split + "/" + e.sample_id + "/";
        if (anomalous) e.mask_path = dir + "mask.pgm";
        for (std::size_t j = 0; j < spec.n_lightings; ++j) e.image_paths.push_back(dir + "light_" + std::to_string(j) + ".ppm");
        idx.entries.push_back(std::move(e));
    };
    for (std::size_t i = 0; i < n_train; ++i) add("train", i, false);
    for (std::size_t i = 0; i < n_test_normal + n_test_anomalous; ++i) add("test", i, i >= n_test_normal);

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw DataError(out_dir + ": cannot create directory: " + ec.message());
    for (const auto& e : idx.entries) {
        fs::create_directories(fs::path(out_dir) / e.split / e.sample_id, ec);
        if (ec) throw DataError(out_dir + ": cannot create sample directory for " + e.sample_id + ": " + ec.message());
    }
    parallel_for(idx.entries.size(), default_threads(), [&](std::size_t i) {
        const auto& e = idx.entries[i];
        const auto r = render_sample(spec, e.sample_id, e.anomalous);
        for (std::size_t j = 0; j < spec.n_lightings; ++j)
            write_pnm((fs::path(out_dir) / e.image_paths[j]).string(), r.images[j]);
        if (e.anomalous) write_pnm((fs::path(out_dir) / e.mask_path).string(), r.mask);
    });
    write_file((fs::path(out_dir) / "index.csv").string(), idx.to_csv());
    return idx;
}

DatasetIndex read_index(const std::string& root) {
    const fs::path index_path = fs::path(root) / "index.csv";
    if (!fs::is_regular_file(index_path)) throw DataError(index_path.string() + ": index file not found");
    auto idx = DatasetIndex::parse_csv(read_file(index_path.string()), root);
    for (const auto& e : idx.entries) {
        for (std::size_t j = 0; j < e.image_paths.size(); ++j) {
            const fs::path p = fs::path(root) / e.image_paths[j];
            if (!fs::is_regular_file(p)) {
                throw DataError("sample " + e.sample_id + " lighting " + std::to_string(j) + ": missing file " +
                                p.string());
            }
        }
        if (!e.mask_path.empty() && !fs::is_regular_file(fs::path(root) / e.mask_path)) {
            throw DataError("sample " + e.sample_id + ": missing mask " + (fs::path(root) / e.mask_path).string());
        }
    }
    return idx;
}

std::string tree_hash(const std::string& root) {
    if (!fs::is_directory(root)) throw DataError(root + ": not a directory");
    std::vector<std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(root))
        if (entry.is_regular_file()) files.push_back(fs::relative(entry.path(), root).generic_string());
    std::sort(files.begin(), files.end());

    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
    auto feed = [&](const void* p, std::size_t n) {
        if (EVP_DigestUpdate(ctx.get(), p, n) != 1) throw Error("sha256 update failed");
    };
    for (const auto& rel : files) {
        const std::string bytes = read_file((fs::path(root) / rel).string());
        feed(rel.data(), rel.size() + 1);  // include the terminating NUL as separator
        std::uint8_t len[8];
        for (int b = 0; b < 8; ++b) len[b] = static_cast<std::uint8_t>(static_cast<std::uint64_t>(bytes.size()) >> (8 * b));
        feed(len, sizeof len);
        feed(bytes.data(), bytes.size());
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int digest_len = 0;
    if (EVP_DigestFinal_ex(ctx.get(), digest, &digest_len) != 1) throw Error("sha256 final failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < digest_len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

}  // namespace afrd
