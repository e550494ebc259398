// 8-bit binary PNM codec: PPM (P6) colour images and PGM (P5) grey maps.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace afrd {

struct Image8 {
    std::size_t width = 0, height = 0;
    std::size_t channels = 0;  // 3 for PPM, 1 for PGM
    std::uint32_t maxval = 255;
    std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

/// Canonical encoding: "P6\n<w> <h>\n<maxval>\n" (or P5) followed by pixels.
std::string encode_pnm(const Image8& image);

/// Accepts P5/P6 with comments and any whitespace layout; maxval 1..255.
/// `origin` names the source in error messages.
Image8 decode_pnm(const std::string& bytes, const std::string& origin);

Image8 read_pnm(const std::string& path);
void write_pnm(const std::string& path, const Image8& image);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace afrd
