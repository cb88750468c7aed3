#pragma once

// Parameter checkpoint file:
//
//   magic    "SOMNCKPT" (8 bytes)
//   version  u32
//   precision u8 (4 = 32-bit values, 8 = 64-bit values)
//   count    u32
//   count x { name_len u32, name bytes, ndim u32, dims u64[ndim], values }
//
// All integers and values little-endian. Values are the raw IEEE bit
// patterns, so a reload is bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "somnus/errors.hpp"
#include "somnus/tensor.hpp"

namespace somnus {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'S', 'O', 'M', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct NamedParameter {
    std::string name;
    Tensor<T> tensor;
};

namespace io {

template <typename V>
void write_pod(std::ostream& os, const V& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is, const std::string& what) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw DataError("truncated file while reading " + what);
    return v;
}

}  // namespace io

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedParameter<T>>& params) {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path.string());
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    io::write_pod(os, kCheckpointVersion);
    io::write_pod(os, static_cast<std::uint8_t>(sizeof(T)));
    io::write_pod(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        io::write_pod(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        io::write_pod(os, static_cast<std::uint32_t>(p.tensor.ndim()));
        for (std::size_t d : p.tensor.shape()) io::write_pod(os, static_cast<std::uint64_t>(d));
        os.write(reinterpret_cast<const char*>(p.tensor.data().data()),
                 static_cast<std::streamsize>(p.tensor.numel() * sizeof(T)));
    }
    if (!os) throw DataError("failed writing checkpoint: " + path.string());
}

/// Loads values into existing parameters. Names, order and shapes must match.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, std::vector<NamedParameter<T>>& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path.string());
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw DataError("not a checkpoint file: " + path.string());
    }
    const auto version = io::read_pod<std::uint32_t>(is, "version");
    if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
    const auto precision = io::read_pod<std::uint8_t>(is, "precision");
    if (precision != sizeof(T)) {
        throw DataError("checkpoint precision is " + std::to_string(8 * precision) + "-bit, expected " +
                        std::to_string(8 * sizeof(T)) + "-bit");
    }
    const auto count = io::read_pod<std::uint32_t>(is, "parameter count");
    if (count != params.size()) {
        throw DataError("checkpoint holds " + std::to_string(count) + " parameters, model has " +
                        std::to_string(params.size()));
    }
    for (auto& p : params) {
        const auto name_len = io::read_pod<std::uint32_t>(is, "name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw DataError("truncated checkpoint name");
        if (name != p.name) throw DataError("checkpoint parameter '" + name + "' where '" + p.name + "' expected");
        const auto ndim = io::read_pod<std::uint32_t>(is, "ndim");
        Shape shape(ndim);
        for (auto& d : shape) d = static_cast<std::size_t>(io::read_pod<std::uint64_t>(is, "dimension"));
        if (shape != p.tensor.shape()) {
            throw DataError("parameter '" + name + "' has shape " + shape_str(shape) + " in checkpoint, model expects " +
                            shape_str(p.tensor.shape()));
        }
        is.read(reinterpret_cast<char*>(p.tensor.data().data()), static_cast<std::streamsize>(p.tensor.numel() * sizeof(T)));
        if (!is) throw DataError("truncated values for parameter '" + name + "'");
    }
}

}  // namespace somnus
