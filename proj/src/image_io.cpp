#include "afrd/image_io.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "afrd/error.hpp"

namespace afrd {

std::string encode_pnm(const Image8& image) {
    if (image.channels != 1 && image.channels != 3) throw FormatError("encode_pnm: channels must be 1 or 3");
    if (image.pixels.size() != image.width * image.height * image.channels) {
        throw FormatError("encode_pnm: pixel buffer does not match dimensions");
    }
    std::string out = (image.channels == 3 ? "P6\n" : "P5\n") + std::to_string(image.width) + " " +
                      std::to_string(image.height) + "\n" + std::to_string(image.maxval) + "\n";
    out.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
    return out;
}

namespace {

class HeaderReader {
public:
    HeaderReader(const std::string& bytes, const std::string& origin) : bytes_(bytes), origin_(origin) {}

    std::size_t number(const char* what) {
        skip_space_and_comments();
        std::size_t v = 0;
        std::size_t digits = 0;
        while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
            v = v * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
            if (v > (1u << 24)) fail(std::string(what) + " too large");
            ++pos_;
            ++digits;
        }
        if (digits == 0) fail(std::string("expected ") + what);
        return v;
    }

    // Exactly one whitespace byte separates maxval from the raster.
    std::size_t raster_start() {
        if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
            fail("missing whitespace before raster");
        }
        return pos_ + 1;
    }

    [[noreturn]] void fail(const std::string& msg) const {
        throw FormatError(origin_ + ": malformed PNM: " + msg);
    }

private:
    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            const char c = bytes_[pos_];
            if (c == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos_;
            } else {
                break;
            }
        }
    }

    const std::string& bytes_;
    const std::string& origin_;
    std::size_t pos_ = 2;
};

}  // namespace

Image8 decode_pnm(const std::string& bytes, const std::string& origin) {
    HeaderReader hdr(bytes, origin);
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
        hdr.fail("expected P5 or P6 magic");
    }
    Image8 img;
    img.channels = bytes[1] == '6' ? 3 : 1;
    img.width = hdr.number("width");
    img.height = hdr.number("height");
    const auto maxval = hdr.number("maxval");
    if (img.width == 0 || img.height == 0) hdr.fail("zero dimension");
    if (maxval < 1 || maxval > 255) hdr.fail("maxval " + std::to_string(maxval) + " outside 1..255");
    img.maxval = static_cast<std::uint32_t>(maxval);
    const std::size_t start = hdr.raster_start();
    const std::size_t n = img.width * img.height * img.channels;
    if (bytes.size() < start + n) {
        hdr.fail("raster truncated (" + std::to_string(bytes.size() - std::min(bytes.size(), start)) + " of " +
                 std::to_string(n) + " bytes)");
    }
    if (bytes.size() > start + n) hdr.fail("trailing bytes after raster");
    img.pixels.assign(reinterpret_cast<const std::uint8_t*>(bytes.data()) + start,
                      reinterpret_cast<const std::uint8_t*>(bytes.data()) + start + n);
    for (auto p : img.pixels)
        if (p > img.maxval) hdr.fail("sample exceeds maxval");
    return img;
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open " + path + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("failed writing " + path);
}

Image8 read_pnm(const std::string& path) { return decode_pnm(read_file(path), path); }

void write_pnm(const std::string& path, const Image8& image) { write_file(path, encode_pnm(image)); }

}  // namespace afrd
