#pragma once

// Little-endian primitive IO shared by the CVFM, CVDS and CVMX formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "cvgl/error.hpp"

namespace cvgl::binio {

template <typename U>
inline void put_uint(std::ostream& os, U value) {
    char bytes[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
    os.write(bytes, sizeof(U));
}

template <typename U>
inline U get_uint(std::istream& is, std::string_view what) {
    unsigned char bytes[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
        throw DataError("truncated file while reading " + std::string(what));
    }
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
    return value;
}

inline void put_u32(std::ostream& os, std::uint32_t v) { put_uint(os, v); }
inline void put_u64(std::ostream& os, std::uint64_t v) { put_uint(os, v); }
inline void put_f32(std::ostream& os, float v) { put_uint(os, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::ostream& os, double v) { put_uint(os, std::bit_cast<std::uint64_t>(v)); }

inline std::uint32_t get_u32(std::istream& is, std::string_view what) { return get_uint<std::uint32_t>(is, what); }
inline std::uint64_t get_u64(std::istream& is, std::string_view what) { return get_uint<std::uint64_t>(is, what); }
inline float get_f32(std::istream& is, std::string_view what) {
    return std::bit_cast<float>(get_uint<std::uint32_t>(is, what));
}
inline double get_f64(std::istream& is, std::string_view what) {
    return std::bit_cast<double>(get_uint<std::uint64_t>(is, what));
}

inline void put_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), 4); }

inline void expect_magic(std::istream& is, std::string_view magic, std::string_view what) {
    char got[4] = {};
    if (!is.read(got, 4) || std::memcmp(got, magic.data(), 4) != 0) {
        throw DataError("bad magic in " + std::string(what) + ": expected " + std::string(magic));
    }
}

inline void put_string(std::ostream& os, std::string_view s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::string_view what, std::uint32_t max_len = 1u << 24) {
    const std::uint32_t len = get_u32(is, what);
    if (len > max_len) throw DataError("implausible string length in " + std::string(what));
    std::string s(len, '\0');
    if (len > 0 && !is.read(s.data(), len)) throw DataError("truncated file while reading " + std::string(what));
    return s;
}

} // namespace cvgl::binio
