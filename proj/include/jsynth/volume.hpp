#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "jsynth/common.hpp"

namespace jsynth {

enum class Modality : std::uint8_t { T1, FLAIR, LABEL, SYNTH_FLAIR };

inline const char* modality_name(Modality m) {
    switch (m) {
        case Modality::T1: return "t1";
        case Modality::FLAIR: return "flair";
        case Modality::LABEL: return "label";
        case Modality::SYNTH_FLAIR: return "synth_flair";
    }
    return "?";
}

// 3-D scalar image stored z-major (slice, row, col).
struct Volume {
    Dim depth = 0, height = 0, width = 0;
    Modality modality = Modality::T1;
    std::vector<double> voxels;

    static Volume zeros(Dim d, Dim h, Dim w, Modality m) {
        if (d < 1 || h < 1 || w < 1)
            throw ShapeError(detail::msg("volume dims must be >= 1, got ", d, "x", h, "x", w));
        Volume v;
        v.depth = d;
        v.height = h;
        v.width = w;
        v.modality = m;
        v.voxels.assign(static_cast<std::size_t>(d * h * w), 0.0);
        return v;
    }

    Dim numel() const { return depth * height * width; }

    double& at(Dim z, Dim y, Dim x) {
        return voxels[static_cast<std::size_t>((z * height + y) * width + x)];
    }
    double at(Dim z, Dim y, Dim x) const {
        return voxels[static_cast<std::size_t>((z * height + y) * width + x)];
    }

    std::vector<double> slice(Dim z) const {
        const auto n = static_cast<std::size_t>(height * width);
        std::vector<double> out(n);
        std::copy_n(voxels.begin() + static_cast<std::ptrdiff_t>(z) * static_cast<std::ptrdiff_t>(n),
                    n, out.begin());
        return out;
    }

    void set_slice(Dim z, const std::vector<double>& data) {
        const auto n = static_cast<std::size_t>(height * width);
        if (data.size() != n)
            throw ShapeError(detail::msg("set_slice: expected ", n, " values, got ", data.size()));
        std::copy_n(data.begin(), n,
                    voxels.begin() + static_cast<std::ptrdiff_t>(z) * static_cast<std::ptrdiff_t>(n));
    }

    bool same_dims(const Volume& other) const {
        return depth == other.depth && height == other.height && width == other.width;
    }

    bool is_binary() const {
        for (double v : voxels)
            if (v != 0.0 && v != 1.0) return false;
        return true;
    }
};

// (T1, FLAIR, label) triple; the unit of cohort handling.
struct Subject {
    std::string id;
    Volume t1, flair, label;

    void validate() const {
        if (!t1.same_dims(flair) || !t1.same_dims(label))
            throw DataError(detail::msg("subject ", id, ": volume dims disagree"));
        if (!label.is_binary())
            throw DataError(detail::msg("subject ", id, ": label volume is not binary"));
    }
};

// ---- .mvol file format ----------------------------------------------------------
// magic "MVOL", D,H,W little-endian u32, then D*H*W little-endian f64 z-major.

namespace detail {

constexpr Dim kMaxVolumeVoxels = Dim{1} << 31;

}  // namespace detail

inline void write_volume(const Volume& volume, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError(detail::msg("cannot open '", path, "' for writing"));
    std::string header = "MVOL";
    for (Dim d : {volume.depth, volume.height, volume.width}) {
        const auto u = static_cast<std::uint32_t>(d);
        for (int i = 0; i < 4; ++i) header.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
    }
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    std::string payload;
    payload.reserve(volume.voxels.size() * 8);
    for (double v : volume.voxels) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) payload.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!f) throw IoError(detail::msg("write failed for '", path, "'"));
}

inline Volume read_volume(const std::string& path, Modality modality = Modality::T1) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError(detail::msg("cannot open '", path, "' for reading"));
    char magic[4];
    if (!f.read(magic, 4)) throw IoError(detail::msg("'", path, "': truncated header"));
    if (std::memcmp(magic, "MVOL", 4) != 0)
        throw BadMagic(detail::msg("'", path, "': not an MVOL file"));
    Dim dims[3];
    for (auto& d : dims) {
        unsigned char b[4];
        if (!f.read(reinterpret_cast<char*>(b), 4))
            throw IoError(detail::msg("'", path, "': truncated header"));
        std::uint32_t u = 0;
        for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        d = static_cast<Dim>(u);
    }
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1 ||
        dims[0] * dims[1] * dims[2] > detail::kMaxVolumeVoxels)
        throw DataError(detail::msg("'", path, "': implausible dims ", dims[0], "x", dims[1], "x",
                                    dims[2]));
    Volume v = Volume::zeros(dims[0], dims[1], dims[2], modality);
    std::string payload(static_cast<std::size_t>(v.numel()) * 8, '\0');
    if (!f.read(payload.data(), static_cast<std::streamsize>(payload.size())))
        throw IoError(detail::msg("'", path, "': truncated voxel data"));
    char extra;
    if (f.read(&extra, 1)) throw IoError(detail::msg("'", path, "': trailing bytes"));
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k)
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(payload[i * 8 + k]))
                    << (8 * k);
        v.voxels[i] = std::bit_cast<double>(bits);
    }
    return v;
}

}  // namespace jsynth
