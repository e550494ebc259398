#include <doctest.h>

#include <openssl/evp.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>

#include "afrd/datagen.hpp"
#include "afrd/dataset.hpp"
#include "oracles.hpp"

using namespace afrd;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("afrd_unit_" + name);
    fs::remove_all(p);
    return p;
}

// Max |pixel - oracle| over all lightings and channels, in intensity units.
double oracle_gap(const SceneSpec& spec, const RenderedSample& r) {
    double worst = 0;
    for (std::size_t j = 0; j < spec.n_lightings; ++j) {
        const auto& l = spec.light_directions[j];
        const auto ref = afrd_test::lambert_oracle(r.height, r.albedo, r.size, {l[0], l[1], l[2]}, spec.ambient);
        for (std::size_t i = 0; i < ref.size(); ++i) {
            const double expect = std::clamp(ref[i], 0.0, 1.0);
            worst = std::max(worst, std::abs(r.images[j].pixels[i] / 255.0 - expect));
        }
    }
    return worst;
}

std::string sha256_hex(const std::string& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr);
    std::string out;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", md[i]);
        out += buf;
    }
    return out;
}

}  // namespace

TEST_CASE("light directions") {
    for (std::size_t n : {1, 2, 4, 6, 8}) {
        const auto dirs = default_light_directions(n);
        REQUIRE(dirs.size() == n);
        for (const auto& d : dirs) CHECK(std::hypot(d[0], d[1], d[2]) == doctest::Approx(1.0).epsilon(1e-12));
    }
    const auto six = default_light_directions(6);
    CHECK(six[5][2] == doctest::Approx(std::sin(80.0 * M_PI / 180.0)));
    for (std::size_t j = 0; j < 5; ++j) CHECK(six[j][2] == doctest::Approx(std::sin(20.0 * M_PI / 180.0)));
}

TEST_CASE("scene spec validation") {
    SceneSpec s = SceneSpec::with_lightings(3, 32, 1);
    CHECK_NOTHROW(s.validate());
    s.light_directions[1] = {1, 1, 0};
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = SceneSpec::with_lightings(3, 32, 1);
    s.n_lightings = 4;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = SceneSpec::with_lightings(3, 32, 1);
    s.anomaly_rate = 1.5;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = SceneSpec::with_lightings(3, 32, 1);
    s.defect_kinds.clear();
    CHECK_THROWS_AS(s.validate(), ConfigError);
    CHECK(parse_defect_kind("scratch") == DefectKind::scratch);
    CHECK_THROWS_AS(parse_defect_kind("crack"), ConfigError);
}

TEST_CASE("flat surface under a vertical light shades to albedo plus ambient") {
    const std::size_t n = 8;
    std::array<std::vector<double>, 3> albedo{std::vector<double>(n * n, 0.6), std::vector<double>(n * n, 0.5),
                                              std::vector<double>(n * n, 0.4)};
    const auto img = afrd_test::lambert_oracle(std::vector<double>(n * n, 2.0), albedo, n, {0, 0, 1}, 0.05);
    for (std::size_t i = 0; i < n * n; ++i) {
        CHECK(img[i * 3 + 0] == doctest::Approx(0.65));
        CHECK(img[i * 3 + 2] == doctest::Approx(0.45));
    }
}

TEST_CASE("rendered pixels match the standalone shading oracle") {
    SceneSpec spec = SceneSpec::with_lightings(6, 48, 11);
    for (int i = 0; i < 6; ++i) {
        const auto r = render_sample(spec, "s" + std::to_string(i), i % 2 == 1);
        CHECK(oracle_gap(spec, r) <= 1.0 / 255.0);
    }
    spec.light_directions[0] = {0, 0, 1};
    spec.ambient = 0.0;
    CHECK(oracle_gap(spec, render_sample(spec, "vertical", true)) <= 1.0 / 255.0);
}

TEST_CASE("rendering is deterministic and seed dependent") {
    const SceneSpec a = SceneSpec::with_lightings(3, 32, 5);
    SceneSpec b = a;
    b.seed = 6;
    const auto r1 = render_sample(a, "x", true), r2 = render_sample(a, "x", true), r3 = render_sample(b, "x", true);
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(r1.images[j].pixels == r2.images[j].pixels);
        CHECK(r1.images[j].pixels != r3.images[j].pixels);
    }
    CHECK(r1.mask.pixels == r2.mask.pixels);
}

TEST_CASE("defects: masks and directional visibility") {
    const SceneSpec spec = SceneSpec::with_lightings(6, 64, 2);
    std::size_t geometric = 0;
    for (int i = 0; i < 40; ++i) {
        const auto r = render_sample(spec, "d" + std::to_string(i), true);
        REQUIRE(r.defect.has_value());
        const auto marked = std::count(r.mask.pixels.begin(), r.mask.pixels.end(), 255);
        CHECK(marked > 0);
        CHECK(static_cast<std::size_t>(marked + std::count(r.mask.pixels.begin(), r.mask.pixels.end(), 0)) ==
              r.mask.pixels.size());
        const auto [lo, hi] = std::minmax_element(r.defect_contrast.begin(), r.defect_contrast.end());
        CHECK(*hi > 0.0);
        if (is_geometric(r.defect->kind)) {
            ++geometric;
            CHECK(*hi >= 2.0 * *lo);
        }
    }
    CHECK(geometric > 0);

    const auto normal = render_sample(spec, "n", false);
    CHECK_FALSE(normal.defect.has_value());
    CHECK(std::count(normal.mask.pixels.begin(), normal.mask.pixels.end(), 0) ==
          static_cast<long>(normal.mask.pixels.size()));
}

TEST_CASE("restricting defect kinds") {
    SceneSpec spec = SceneSpec::with_lightings(2, 32, 3);
    spec.defect_kinds = {DefectKind::stain};
    for (int i = 0; i < 5; ++i) {
        const auto r = render_sample(spec, "s" + std::to_string(i), true);
        CHECK(r.defect->kind == DefectKind::stain);
        for (double c : r.defect_contrast) CHECK(c > 0.0);
    }
}

TEST_CASE("generate, hash and load") {
    const fs::path dir = scratch_dir("gen");
    const SceneSpec spec = SceneSpec::with_lightings(3, 32, 7);
    const auto idx = generate(spec, 4, 2, 3, dir.string());
    CHECK(idx.entries.size() == 9);
    CHECK(idx.n_lightings == 3);
    for (const auto& e : idx.entries) {
        CHECK(e.image_paths.size() == 3);
        if (e.split == "train") CHECK_FALSE(e.anomalous);
        CHECK(e.mask_path.empty() == !e.anomalous);
    }
    CHECK(idx.entries[4].sample_id == "test_0000");
    CHECK(idx.entries.back().mask_path == "test/test_0004/mask.pgm");

    const auto parsed = read_index(dir.string());
    CHECK(parsed.to_csv() == idx.to_csv());
    CHECK(read_file((dir / "index.csv").string()).rfind(
              "sample_id,split,label,mask_path,img_path_0,img_path_1,img_path_2\n", 0) == 0);

    const std::string h1 = tree_hash(dir.string());
    CHECK(h1.size() == 64);

    // Hash of the tree recomputed from its documented format.
    std::vector<std::string> files;
    for (const auto& f : fs::recursive_directory_iterator(dir))
        if (f.is_regular_file()) files.push_back(fs::relative(f.path(), dir).generic_string());
    std::sort(files.begin(), files.end());
    std::string stream;
    for (const auto& rel : files) {
        const std::string bytes = read_file((dir / rel).string());
        stream += rel;
        stream += '\0';
        std::uint64_t size = bytes.size();
        for (int b = 0; b < 8; ++b) stream += static_cast<char>((size >> (8 * b)) & 0xff);
        stream += bytes;
    }
    CHECK(sha256_hex(stream) == h1);

    const fs::path dir2 = scratch_dir("gen2");
    setenv("AFRD_THREADS", "3", 1);
    generate(spec, 4, 2, 3, dir2.string());
    unsetenv("AFRD_THREADS");
    CHECK(tree_hash(dir2.string()) == h1);

    const Dataset data = load_dataset(dir.string());
    CHECK(data.n_lightings == 3);
    REQUIRE(data.train.size() == 4);
    REQUIRE(data.test.size() == 5);
    for (const auto& s : data.train) CHECK(s.label == Label::normal);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK((data.test[i].label == Label::anomalous) == (i >= 2));
        CHECK(data.test[i].mask.has_value() == (i >= 2));
        CHECK(data.test[i].sample_id == idx.entries[4 + i].sample_id);
    }
    const Tensor& mask = *data.test[4].mask;
    CHECK(mask.shape() == Shape{32, 32});
    for (double v : mask.data()) CHECK((v == 0.0 || v == 1.0));

    // Loaded images re-encode to the bytes on disk.
    for (std::size_t j = 0; j < 3; ++j) {
        const std::string path = (dir / idx.entries[5].image_paths[j]).string();
        CHECK(encode_pnm(tensor_to_image(data.test[1].images[j])) == read_file(path));
    }
    CHECK(tree_hash(dir.string()) == h1);  // loading does not touch the tree

    fs::remove(dir / "test" / "test_0003" / "light_1.ppm");
    try {
        load_dataset(dir.string());
        FAIL("expected an error");
    } catch (const DataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("test_0003") != std::string::npos);
        CHECK(msg.find("lighting 1") != std::string::npos);
    }
    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST_CASE("empty dataset") {
    const fs::path dir = scratch_dir("empty");
    const auto idx = generate(SceneSpec::with_lightings(2, 32, 0), 0, 0, 0, dir.string());
    CHECK(idx.entries.empty());
    CHECK(read_index(dir.string()).entries.empty());
    const Dataset d = load_dataset(dir.string());
    CHECK(d.train.empty());
    CHECK(d.test.empty());
    fs::remove_all(dir);
}

TEST_CASE("loader errors") {
    const fs::path dir = scratch_dir("bad");
    generate(SceneSpec::with_lightings(2, 32, 1), 1, 1, 1, dir.string());
    const std::string index = read_file((dir / "index.csv").string());

    write_file((dir / "index.csv").string(), index + "extra,train,normal,\n");
    CHECK_THROWS_AS(read_index(dir.string()), FormatError);

    write_file((dir / "index.csv").string(), index);
    write_pnm((dir / "test/test_0001/light_0.ppm").string(), Image8{16, 16, 3, 255, std::vector<std::uint8_t>(768, 9)});
    try {
        load_dataset(dir.string());
        FAIL("expected an error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("test_0001") != std::string::npos);
    }

    write_file((dir / "test/test_0001/light_0.ppm").string(), "P6\n32 32\n255\nshort");
    try {
        load_dataset(dir.string());
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("light_0.ppm") != std::string::npos);
    }
    fs::remove_all(dir);
    CHECK_THROWS_AS(read_index(dir.string()), DataError);
}
