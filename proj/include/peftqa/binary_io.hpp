#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "peftqa/errors.hpp"

// Little-endian primitives shared by the checkpoint and quantized-tensor
// wire formats.
namespace peftqa::io {

template <typename T>
    requires std::is_arithmetic_v<T>
void write_le(std::ostream& os, T value) {
    std::array<char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    os.write(bytes.data(), sizeof(T));
}

template <typename T>
    requires std::is_arithmetic_v<T>
T read_le(std::istream& is) {
    std::array<char, sizeof(T)> bytes;
    if (!is.read(bytes.data(), sizeof(T))) throw DataError("unexpected end of stream");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    T value;
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
}

template <typename T>
void write_array(std::ostream& os, const std::vector<T>& values) {
    write_le<std::uint64_t>(os, values.size());
    for (const auto& v : values) write_le<T>(os, v);
}

template <typename T>
std::vector<T> read_array(std::istream& is, std::uint64_t max_count = (1ull << 34)) {
    auto count = read_le<std::uint64_t>(is);
    if (count > max_count) throw DataError("array length " + std::to_string(count) + " exceeds limit");
    std::vector<T> values;
    values.reserve(static_cast<std::size_t>(count));
    for (std::uint64_t i = 0; i < count; ++i) values.push_back(read_le<T>(is));
    return values;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    auto len = read_le<std::uint32_t>(is);
    std::string s(len, '\0');
    if (len && !is.read(s.data(), len)) throw DataError("unexpected end of stream in string");
    return s;
}

}  // namespace peftqa::io
