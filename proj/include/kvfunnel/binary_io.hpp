#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include "kvfunnel/error.hpp"

namespace kvfunnel::binary {

// Little-endian primitives, independent of host byte order.

inline void write_u32(std::ostream& os, std::uint32_t v) {
    const std::array<char, 4> b{static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                                static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
    os.write(b.data(), 4);
}

inline void write_f32(std::ostream& os, float f) { write_u32(os, std::bit_cast<std::uint32_t>(f)); }

inline void write_f32s(std::ostream& os, std::span<const float> values) {
    for (float f : values) write_f32(os, f);
}

inline void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), 4); }

inline std::uint32_t read_u32(std::istream& is) {
    std::array<unsigned char, 4> b{};
    is.read(reinterpret_cast<char*>(b.data()), 4);
    if (!is) throw InputError("unexpected end of file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline float read_f32(std::istream& is) { return std::bit_cast<float>(read_u32(is)); }

inline void read_f32s(std::istream& is, std::span<float> out) {
    for (float& f : out) f = read_f32(is);
}

inline void expect_magic(std::istream& is, std::string_view magic) {
    std::array<char, 4> b{};
    is.read(b.data(), 4);
    if (!is || std::string_view(b.data(), 4) != magic) {
        throw InputError("bad magic, expected \"" + std::string(magic) + "\"");
    }
}

}  // namespace kvfunnel::binary
