#pragma once

#include <cmath>
#include <vector>

#include "jsynth/volume.hpp"

namespace jsynth {

// Center crop / symmetric zero-pad between two slice geometries. On odd
// differences the extra row/col is cropped from or padded at the bottom/right.
// The plan keeps the overlap-window coordinates so predictions can be mapped
// back into source coordinates.
struct CropPadPlan {
    Dim src_h = 0, src_w = 0;
    Dim dst_h = 0, dst_w = 0;
    Dim src_row0 = 0, src_col0 = 0;  // overlap origin in the source
    Dim dst_row0 = 0, dst_col0 = 0;  // overlap origin in the target
    Dim rows = 0, cols = 0;          // overlap extent

    static CropPadPlan make(Dim src_h, Dim src_w, Dim dst_h, Dim dst_w) {
        if (src_h < 1 || src_w < 1 || dst_h < 1 || dst_w < 1)
            throw ShapeError("crop_or_pad: dims must be >= 1");
        CropPadPlan p;
        p.src_h = src_h;
        p.src_w = src_w;
        p.dst_h = dst_h;
        p.dst_w = dst_w;
        const auto axis = [](Dim src, Dim dst, Dim& src0, Dim& dst0, Dim& n) {
            if (src > dst) {
                src0 = (src - dst) / 2;
                dst0 = 0;
                n = dst;
            } else {
                src0 = 0;
                dst0 = (dst - src) / 2;
                n = src;
            }
        };
        axis(src_h, dst_h, p.src_row0, p.dst_row0, p.rows);
        axis(src_w, dst_w, p.src_col0, p.dst_col0, p.cols);
        return p;
    }

    std::vector<double> apply(const std::vector<double>& slice) const {
        if (slice.size() != static_cast<std::size_t>(src_h * src_w))
            throw ShapeError(detail::msg("crop_or_pad: slice has ", slice.size(),
                                         " values, expected ", src_h * src_w));
        std::vector<double> out(static_cast<std::size_t>(dst_h * dst_w), 0.0);
        for (Dim r = 0; r < rows; ++r)
            for (Dim c = 0; c < cols; ++c)
                out[static_cast<std::size_t>((dst_row0 + r) * dst_w + dst_col0 + c)] =
                    slice[static_cast<std::size_t>((src_row0 + r) * src_w + src_col0 + c)];
        return out;
    }

    // map a target-sized slice back into source coordinates; voxels outside the
    // overlap window are zero.
    std::vector<double> invert(const std::vector<double>& slice) const {
        if (slice.size() != static_cast<std::size_t>(dst_h * dst_w))
            throw ShapeError(detail::msg("crop_or_pad: slice has ", slice.size(),
                                         " values, expected ", dst_h * dst_w));
        std::vector<double> out(static_cast<std::size_t>(src_h * src_w), 0.0);
        for (Dim r = 0; r < rows; ++r)
            for (Dim c = 0; c < cols; ++c)
                out[static_cast<std::size_t>((src_row0 + r) * src_w + src_col0 + c)] =
                    slice[static_cast<std::size_t>((dst_row0 + r) * dst_w + dst_col0 + c)];
        return out;
    }
};

inline std::vector<double> crop_or_pad(const std::vector<double>& slice, Dim src_h, Dim src_w,
                                       Dim dst_h, Dim dst_w) {
    return CropPadPlan::make(src_h, src_w, dst_h, dst_w).apply(slice);
}

// z-score over the nonzero (brain) voxels; background zeros stay zero. The
// support statistics use the population standard deviation.
inline Volume gaussian_normalize(const Volume& volume) {
    if (volume.modality == Modality::LABEL)
        throw ValueError("gaussian_normalize: label volumes are never normalized");
    double s = 0.0;
    Dim n = 0;
    for (double v : volume.voxels) {
        if (v == 0.0) continue;
        s += v;
        ++n;
    }
    if (n < 2) throw DataError("gaussian_normalize: fewer than two support voxels");
    const double mean = s / static_cast<double>(n);
    double ss = 0.0;
    for (double v : volume.voxels) {
        if (v == 0.0) continue;
        const double d = v - mean;
        ss += d * d;
    }
    const double var = ss / static_cast<double>(n);
    if (var <= 0.0)
        throw DataError("gaussian_normalize: constant support, variance is zero");
    const double inv_sd = 1.0 / std::sqrt(var);
    Volume out = volume;
    for (double& v : out.voxels)
        if (v != 0.0) v = (v - mean) * inv_sd;
    return out;
}

}  // namespace jsynth
