#include "afrd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "afrd/error.hpp"

namespace fs = std::filesystem;

AFRD_BEGIN_NAMESPACE

Tensor image_to_tensor(const Image8& image) {
    if (image.channels != 3) throw FormatError("expected a colour (P6) image");
    const std::size_t plane = image.width * image.height;
    std::vector<real> data(3 * plane);
    const double scale = 1.0 / static_cast<double>(image.maxval);
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c)
            data[c * plane + i] = static_cast<real>(static_cast<double>(image.pixels[i * 3 + c]) * scale);
    return Tensor({3, image.height, image.width}, std::move(data));
}

Image8 tensor_to_image(const Tensor& image) {
    if (image.ndim() != 3 || image.dim(0) != 3) throw DimensionError("tensor_to_image", "channels", shape_str(image.shape()));
    const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
    Image8 out{w, h, 3, 255, std::vector<std::uint8_t>(3 * plane)};
    const auto& d = image.data();
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) {
            const double v = std::clamp(static_cast<double>(d[c * plane + i]), 0.0, 1.0);
            out.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    return out;
}

Dataset load_dataset(const std::string& root) { return load_dataset(read_index(root)); }

Dataset load_dataset(const DatasetIndex& index) {
    Dataset ds;
    ds.n_lightings = index.n_lightings;
    for (const auto& e : index.entries) {
        ImageSet set;
        set.sample_id = e.sample_id;
        set.label = e.anomalous ? Label::anomalous : Label::normal;
        for (std::size_t j = 0; j < e.image_paths.size(); ++j) {
            const std::string path = (fs::path(index.root) / e.image_paths[j]).string();
            Image8 img;
            try {
                img = read_pnm(path);
                if (img.channels != 3) throw FormatError(path + ": expected a colour (P6) image");
            } catch (const Error& err) {
                throw DataError("sample " + e.sample_id + " lighting " + std::to_string(j) + ": " + err.what());
            }
            if (j > 0 && (img.height != set.height() || img.width != set.width())) {
                throw DataError("sample " + e.sample_id + " lighting " + std::to_string(j) + ": " + path + " is " +
                                std::to_string(img.width) + "x" + std::to_string(img.height) + ", expected " +
                                std::to_string(set.width()) + "x" + std::to_string(set.height()));
            }
            set.images.push_back(image_to_tensor(img));
        }
        if (!e.mask_path.empty()) {
            const std::string path = (fs::path(index.root) / e.mask_path).string();
            Image8 m;
            try {
                m = read_pnm(path);
            } catch (const Error& err) {
                throw DataError("sample " + e.sample_id + " mask: " + err.what());
            }
            if (m.channels != 1) throw DataError("sample " + e.sample_id + " mask: " + path + " is not a PGM");
            if (m.height != set.height() || m.width != set.width()) {
                throw DataError("sample " + e.sample_id + " mask: " + path + " does not match the image size");
            }
            std::vector<real> data(m.pixels.size());
            for (std::size_t i = 0; i < data.size(); ++i) data[i] = m.pixels[i] >= 128 ? real(1) : real(0);
            set.mask = Tensor({m.height, m.width}, std::move(data));
        }
        set.validate();
        (e.split == "train" ? ds.train : ds.test).push_back(std::move(set));
    }
    return ds;
}

AFRD_END_NAMESPACE
