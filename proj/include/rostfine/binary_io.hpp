#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "rostfine/errors.hpp"

namespace rostfine::binary {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

template <typename U>
void put(std::ostream& out, U v) {
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.write(buf, sizeof(U));
}

/// Reads one little-endian value; short reads raise a Truncated format error.
template <typename U>
U get(std::istream& in, const std::string& what) {
    char buf[sizeof(U)];
    in.read(buf, sizeof(U));
    if (in.gcount() != static_cast<std::streamsize>(sizeof(U)))
        throw FormatError(FormatError::Kind::Truncated, what + ": unexpected end of file");
    U v;
    std::memcpy(&v, buf, sizeof(U));
    return v;
}

inline void get_bytes(std::istream& in, char* dst, std::size_t n, const std::string& what) {
    in.read(dst, static_cast<std::streamsize>(n));
    if (in.gcount() != static_cast<std::streamsize>(n))
        throw FormatError(FormatError::Kind::Truncated, what + ": unexpected end of file");
}

} // namespace rostfine::binary
