#include <gaptta/idx.hpp>

#include <gaptta/error.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

namespace gaptta {

std::size_t IdxArray::count() const noexcept {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t at) {
    return (std::uint32_t{bytes[at]} << 24) | (std::uint32_t{bytes[at + 1]} << 16) |
           (std::uint32_t{bytes[at + 2]} << 8) | std::uint32_t{bytes[at + 3]};
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

std::size_t element_width(IdxType type) { return type == IdxType::UnsignedByte ? 1 : 4; }

}  // namespace

IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
    require(bytes.size() >= 4, ErrorKind::Length, "idx: header shorter than 4 bytes");
    require(bytes[0] == 0 && bytes[1] == 0, ErrorKind::Format, "idx: magic must start with two zero bytes");
    IdxArray out;
    switch (bytes[2]) {
        case 0x08: out.type = IdxType::UnsignedByte; break;
        case 0x0D: out.type = IdxType::Float32; break;
        default:
            fail(ErrorKind::Unsupported, "idx: unsupported type byte 0x" +
                                             std::string(1, "0123456789ABCDEF"[bytes[2] >> 4]) +
                                             std::string(1, "0123456789ABCDEF"[bytes[2] & 0xF]));
    }
    const std::size_t ndims = bytes[3];
    const std::size_t header = 4 + 4 * ndims;
    require(bytes.size() >= header, ErrorKind::Length, "idx: truncated dimension header");
    out.dims.resize(ndims);
    for (std::size_t i = 0; i < ndims; ++i) out.dims[i] = read_be32(bytes, 4 + 4 * i);

    const std::size_t width = element_width(out.type);
    const std::size_t count = out.count();
    const std::size_t payload = bytes.size() - header;
    require(payload == count * width, ErrorKind::Length,
            "idx: payload has " + std::to_string(payload) + " bytes, shape requires " +
                std::to_string(count * width));

    out.values.resize(count);
    const auto body = bytes.subspan(header);
    if (out.type == IdxType::UnsignedByte) {
        for (std::size_t i = 0; i < count; ++i) out.values[i] = body[i];
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            out.values[i] = std::bit_cast<float>(read_be32(body, 4 * i));
        }
    }
    return out;
}

std::vector<std::uint8_t> serialize_idx(const IdxArray& array) {
    require(array.dims.size() <= 255, ErrorKind::InvalidArgument, "idx: too many dimensions");
    require(array.values.size() == array.count(), ErrorKind::Shape, "idx: value count does not match dims");
    std::vector<std::uint8_t> out = {0, 0, static_cast<std::uint8_t>(array.type),
                                     static_cast<std::uint8_t>(array.dims.size())};
    for (auto d : array.dims) write_be32(out, d);
    for (double v : array.values) {
        if (array.type == IdxType::UnsignedByte) {
            require(v >= 0.0 && v <= 255.0 && v == static_cast<double>(static_cast<int>(v)),
                    ErrorKind::InvalidArgument, "idx: value not representable as unsigned byte");
            out.push_back(static_cast<std::uint8_t>(v));
        } else {
            write_be32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        }
    }
    return out;
}

IdxArray read_idx_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open idx file '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_idx(bytes);
}

}  // namespace gaptta
