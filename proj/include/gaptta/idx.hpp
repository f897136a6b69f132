#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace gaptta {

/// IDX element types handled here (MNIST uses unsigned bytes).
enum class IdxType : std::uint8_t { UnsignedByte = 0x08, Float32 = 0x0D };

struct IdxArray {
    IdxType type = IdxType::UnsignedByte;
    std::vector<std::uint32_t> dims;
    std::vector<double> values;  // row-major

    std::size_t count() const noexcept;
};

/// Layout: 00 00 <type> <ndims>, ndims big-endian uint32 sizes, row-major
/// big-endian payload. Throws Format (magic), Unsupported (type byte) or
/// Length (payload size differs from the declared shape).
IdxArray parse_idx(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> serialize_idx(const IdxArray& array);

IdxArray read_idx_file(const std::filesystem::path& path);

}  // namespace gaptta
