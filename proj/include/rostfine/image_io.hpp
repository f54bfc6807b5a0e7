#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "rostfine/errors.hpp"

namespace rostfine {

/// 8-bit interleaved image, `channels` is 1 (gray) or 3 (RGB).
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 3;
    std::vector<std::uint8_t> pixels;

    std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) {
        return pixels[(y * width + x) * channels + c];
    }
    std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const {
        return pixels[(y * width + x) * channels + c];
    }
};

namespace detail {

inline std::size_t read_pnm_int(std::istream& in, const std::string& path) {
    int c = in.peek();
    // Whitespace and comments may precede each header field.
    while (c != EOF) {
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
        c = in.peek();
    }
    std::size_t v = 0;
    if (!(in >> v)) throw FormatError(FormatError::Kind::Schema, path + ": malformed PNM header");
    return v;
}

} // namespace detail

inline Image read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    std::size_t channels = 0;
    if (magic == "P6") channels = 3;
    else if (magic == "P5") channels = 1;
    else throw FormatError(FormatError::Kind::BadMagic, path.string() + ": not a binary PPM/PGM file");
    Image img;
    img.channels = channels;
    img.width = detail::read_pnm_int(in, path.string());
    img.height = detail::read_pnm_int(in, path.string());
    const std::size_t maxval = detail::read_pnm_int(in, path.string());
    if (maxval != 255)
        throw FormatError(FormatError::Kind::Schema, path.string() + ": only maxval 255 is supported");
    in.get(); // single whitespace byte after maxval
    img.pixels.resize(img.width * img.height * channels);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
        throw FormatError(FormatError::Kind::Truncated, path.string() + ": pixel data truncated");
    return img;
}

/// Writes P6 for RGB images and P5 for grayscale, maxval 255.
inline void write_pnm(const std::filesystem::path& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

} // namespace rostfine
