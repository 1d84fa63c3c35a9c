#pragma once

// Binary model checkpoints. Little-endian layout:
//   magic "FSLC", u32 version = 1
//   u32 arch_id, u32 block_channels[4], u32 input_h, u32 input_w, u32 input_c
//   f64 tau, u64 seed, u32 implant_channels
//   u32 record_count, then per record:
//     u32 name_len, name bytes (UTF-8), u32 rank, u32 dims[rank], f64 payload
// Round trips are bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "densefew/errors.hpp"
#include "densefew/layers.hpp"
#include "densefew/tensor.hpp"

namespace densefew {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes little-endian host");

enum class ArchId : std::uint32_t { C128F = 1, ResNet12 = 2 };

inline const char* arch_name(ArchId id) {
    switch (id) {
        case ArchId::C128F: return "c128f";
        case ArchId::ResNet12: return "resnet12";
    }
    return "unknown";
}

struct CheckpointMeta {
    ArchId arch = ArchId::ResNet12;
    std::uint32_t block_channels[4] = {64, 128, 256, 512};
    std::uint32_t input_h = 32, input_w = 32, input_c = 3;
    double tau = 10.0;
    std::uint64_t seed = 0;
    std::uint32_t implant_channels = 0;  // 0 = plain base checkpoint
};

struct CheckpointRecord {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    CheckpointMeta meta;
    std::vector<CheckpointRecord> records;

    const CheckpointRecord* find(const std::string& name) const {
        for (const auto& r : records)
            if (r.name == name) return &r;
        return nullptr;
    }
};

namespace detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw FormatError(std::string("checkpoint truncated while reading ") + what);
    return v;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'F', 'S', 'L', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, 4);
    detail::write_pod(os, kCheckpointVersion);
    detail::write_pod(os, static_cast<std::uint32_t>(ckpt.meta.arch));
    for (auto c : ckpt.meta.block_channels) detail::write_pod(os, c);
    detail::write_pod(os, ckpt.meta.input_h);
    detail::write_pod(os, ckpt.meta.input_w);
    detail::write_pod(os, ckpt.meta.input_c);
    detail::write_pod(os, ckpt.meta.tau);
    detail::write_pod(os, ckpt.meta.seed);
    detail::write_pod(os, ckpt.meta.implant_channels);
    detail::write_pod(os, static_cast<std::uint32_t>(ckpt.records.size()));
    for (const auto& r : ckpt.records) {
        detail::write_pod(os, static_cast<std::uint32_t>(r.name.size()));
        os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        detail::write_pod(os, static_cast<std::uint32_t>(r.shape.size()));
        for (auto d : r.shape) detail::write_pod(os, static_cast<std::uint32_t>(d));
        os.write(reinterpret_cast<const char*>(r.values.data()),
                 static_cast<std::streamsize>(r.values.size() * sizeof(double)));
    }
    if (!os) throw FormatError("short write while saving checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw FormatError("bad checkpoint magic in " + path);
    auto version = detail::read_pod<std::uint32_t>(is, "version");
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    auto arch = detail::read_pod<std::uint32_t>(is, "arch id");
    if (arch != static_cast<std::uint32_t>(ArchId::C128F) &&
        arch != static_cast<std::uint32_t>(ArchId::ResNet12))
        throw FormatError("unknown architecture id " + std::to_string(arch));
    ckpt.meta.arch = static_cast<ArchId>(arch);
    for (auto& c : ckpt.meta.block_channels) c = detail::read_pod<std::uint32_t>(is, "block channels");
    ckpt.meta.input_h = detail::read_pod<std::uint32_t>(is, "input height");
    ckpt.meta.input_w = detail::read_pod<std::uint32_t>(is, "input width");
    ckpt.meta.input_c = detail::read_pod<std::uint32_t>(is, "input channels");
    ckpt.meta.tau = detail::read_pod<double>(is, "tau");
    ckpt.meta.seed = detail::read_pod<std::uint64_t>(is, "seed");
    ckpt.meta.implant_channels = detail::read_pod<std::uint32_t>(is, "implant channels");
    auto count = detail::read_pod<std::uint32_t>(is, "record count");
    ckpt.records.resize(count);
    for (auto& r : ckpt.records) {
        auto name_len = detail::read_pod<std::uint32_t>(is, "record name length");
        r.name.resize(name_len);
        if (!is.read(r.name.data(), name_len)) throw FormatError("checkpoint truncated in record name");
        auto rank = detail::read_pod<std::uint32_t>(is, "record rank");
        r.shape.resize(rank);
        std::int64_t n = 1;
        for (auto& d : r.shape) {
            d = detail::read_pod<std::uint32_t>(is, "record dim");
            n *= d;
        }
        r.values.resize(static_cast<std::size_t>(n));
        if (!is.read(reinterpret_cast<char*>(r.values.data()),
                     static_cast<std::streamsize>(r.values.size() * sizeof(double))))
            throw FormatError("checkpoint truncated in record payload of " + r.name);
    }
    bool has_base = false;
    for (const auto& r : ckpt.records)
        if (r.name.rfind("base/", 0) == 0) has_base = true;
    if (ckpt.meta.implant_channels > 0 && !has_base)
        throw FormatError("widened checkpoint lacks base parameters: " + path);
    return ckpt;
}

// Copies checkpoint records into named state refs; every ref must be present
// with a matching shape.
inline void restore_state(const Checkpoint& ckpt, const std::vector<StateRef>& refs) {
    for (const auto& ref : refs) {
        const CheckpointRecord* r = ckpt.find(ref.name);
        if (!r) throw FormatError("checkpoint missing record " + ref.name);
        if (r->shape != ref.shape)
            throw FormatError("checkpoint record " + ref.name + " has shape " + shape_str(r->shape) +
                              ", expected " + shape_str(ref.shape));
        *ref.values = r->values;
    }
}

inline void capture_state(const std::vector<StateRef>& refs, const std::string& prefix,
                          Checkpoint& ckpt) {
    for (const auto& ref : refs) ckpt.records.push_back({prefix + ref.name, ref.shape, *ref.values});
}

}  // namespace densefew
