#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "jsynth/rng.hpp"
#include "jsynth/volume.hpp"

namespace jsynth {

// Procedural paired-modality cohort. Each axial slice holds an elliptical
// brain with a gray-matter ring around a white-matter core, a dark central
// ventricle, and elliptical lesions. Lesions are hyperintense in FLAIR; in T1
// they sit at gray-matter intensity (non-faint) or just below white matter
// (faint), so a T1-only reader has to separate lesions from the cortical ring
// while FLAIR makes them unambiguous.
struct PhantomSpec {
    std::uint64_t seed = 0;
    Dim n_subjects = 12;
    Dim slices_per_subject = 3;
    Dim height = 64, width = 64;
    Dim lesion_count_min = 2, lesion_count_max = 4;
    double lesion_radius_min = 2.0, lesion_radius_max = 5.0;
    double faint_fraction = 0.4;  // lesions nearly invisible in T1
    double noise_sigma = 0.06;

    void validate() const {
        if (n_subjects < 1) throw ConfigError("phantom: n_subjects must be >= 1");
        if (slices_per_subject < 1) throw ConfigError("phantom: slices_per_subject must be >= 1");
        if (height < 16 || width < 16)
            throw ConfigError(detail::msg("phantom: slice size ", height, "x", width,
                                          " too small"));
        if (lesion_count_min < 0 || lesion_count_max < lesion_count_min)
            throw ConfigError("phantom: bad lesion count range");
        if (lesion_radius_min < 1.0 || lesion_radius_max < lesion_radius_min)
            throw ConfigError("phantom: bad lesion radius range");
        if (faint_fraction < 0.0 || faint_fraction > 1.0)
            throw ConfigError("phantom: faint_fraction not in [0,1]");
        if (noise_sigma < 0.0) throw ConfigError("phantom: noise_sigma must be >= 0");
    }
};

namespace phantom_detail {

// tissue intensities (arbitrary units, background stays exactly 0)
constexpr double kCsfT1 = 0.35, kCsfFlair = 0.30;
constexpr double kGmT1 = 1.00, kGmFlair = 1.00;
constexpr double kWmT1 = 1.35, kWmFlair = 1.10;
constexpr double kLesionFlairDelta = 0.90;   // added on top of WM in FLAIR
constexpr double kLesionT1Delta = 0.45;      // subtracted from WM in T1 (lands on GM)
constexpr double kVoxelFloor = 0.01;         // keeps brain voxels inside the support

struct Ellipse {
    double cy, cx, ry, rx;
    bool contains(double y, double x) const {
        const double dy = (y - cy) / ry;
        const double dx = (x - cx) / rx;
        return dy * dy + dx * dx <= 1.0;
    }
};

}  // namespace phantom_detail

inline std::vector<Subject> generate_phantom(const PhantomSpec& spec) {
    using namespace phantom_detail;
    spec.validate();
    const Dim H = spec.height, W = spec.width, S = spec.slices_per_subject;

    std::vector<Subject> cohort;
    cohort.reserve(static_cast<std::size_t>(spec.n_subjects));
    for (Dim si = 0; si < spec.n_subjects; ++si) {
        Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(si)));
        Subject subject;
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "s%03d", static_cast<int>(si));
        subject.id = idbuf;
        subject.t1 = Volume::zeros(S, H, W, Modality::T1);
        subject.flair = Volume::zeros(S, H, W, Modality::FLAIR);
        subject.label = Volume::zeros(S, H, W, Modality::LABEL);

        for (Dim z = 0; z < S; ++z) {
            const double jy = rng.uniform(-0.04, 0.04), jx = rng.uniform(-0.04, 0.04);
            const Ellipse brain{H * (0.5 + jy), W * (0.5 + jx), H * rng.uniform(0.38, 0.44),
                                W * rng.uniform(0.36, 0.42)};
            const Ellipse wm{brain.cy, brain.cx, brain.ry * 0.64, brain.rx * 0.64};
            const Ellipse ventricle{brain.cy + rng.uniform(-1.5, 1.5),
                                    brain.cx + rng.uniform(-1.5, 1.5), brain.ry * 0.20,
                                    brain.rx * 0.16};

            struct Lesion {
                Ellipse shape;
                bool faint;
            };
            std::vector<Lesion> lesions;
            const Dim count = rng.uniform_int(spec.lesion_count_min, spec.lesion_count_max);
            for (Dim li = 0; li < count; ++li) {
                const double ry = rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max);
                const double rx = rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max);
                const bool faint = rng.uniform() < spec.faint_fraction;
                bool placed = false;
                for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
                    const double cy = rng.uniform(wm.cy - wm.ry, wm.cy + wm.ry);
                    const double cx = rng.uniform(wm.cx - wm.rx, wm.cx + wm.rx);
                    const Ellipse margin{wm.cy, wm.cx, wm.ry - ry - 1.0, wm.rx - rx - 1.0};
                    if (margin.ry <= 0.0 || margin.rx <= 0.0) break;
                    const Ellipse keepout{ventricle.cy, ventricle.cx, ventricle.ry + ry + 1.0,
                                          ventricle.rx + rx + 1.0};
                    if (margin.contains(cy, cx) && !keepout.contains(cy, cx)) {
                        lesions.push_back({Ellipse{cy, cx, ry, rx}, faint});
                        placed = true;
                    }
                }
                // placement can fail on crowded slices; the lesion is skipped
            }

            for (Dim y = 0; y < H; ++y) {
                for (Dim x = 0; x < W; ++x) {
                    const double fy = static_cast<double>(y), fx = static_cast<double>(x);
                    if (!brain.contains(fy, fx)) continue;
                    double t1, flair;
                    if (ventricle.contains(fy, fx)) {
                        t1 = kCsfT1;
                        flair = kCsfFlair;
                    } else if (wm.contains(fy, fx)) {
                        t1 = kWmT1;
                        flair = kWmFlair;
                    } else {
                        t1 = kGmT1;
                        flair = kGmFlair;
                    }
                    for (const auto& lesion : lesions) {
                        if (!lesion.shape.contains(fy, fx)) continue;
                        flair = kWmFlair + kLesionFlairDelta;
                        t1 = kWmT1 - (lesion.faint ? kLesionT1Delta / 10.0 : kLesionT1Delta);
                        subject.label.at(z, y, x) = 1.0;
                        break;
                    }
                    subject.t1.at(z, y, x) = t1;
                    subject.flair.at(z, y, x) = flair;
                }
            }

            // additive noise inside the brain only; the background must stay 0
            // so support masks remain exact
            for (Dim y = 0; y < H; ++y) {
                for (Dim x = 0; x < W; ++x) {
                    if (!brain.contains(static_cast<double>(y), static_cast<double>(x))) continue;
                    subject.t1.at(z, y, x) =
                        std::max(kVoxelFloor, subject.t1.at(z, y, x) +
                                                  rng.normal(0.0, spec.noise_sigma));
                    subject.flair.at(z, y, x) =
                        std::max(kVoxelFloor, subject.flair.at(z, y, x) +
                                                  rng.normal(0.0, spec.noise_sigma));
                }
            }
        }
        subject.validate();
        cohort.push_back(std::move(subject));
    }
    return cohort;
}

// ---- dataset directory layout: <root>/<subject_id>/{t1,flair,label}.mvol --------

inline void write_dataset(const std::vector<Subject>& cohort, const std::string& root) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError(detail::msg("cannot create dataset root '", root, "': ", ec.message()));
    for (const auto& subject : cohort) {
        const fs::path dir = fs::path(root) / subject.id;
        fs::create_directories(dir, ec);
        if (ec) throw IoError(detail::msg("cannot create '", dir.string(), "': ", ec.message()));
        write_volume(subject.t1, (dir / "t1.mvol").string());
        write_volume(subject.flair, (dir / "flair.mvol").string());
        write_volume(subject.label, (dir / "label.mvol").string());
    }
}

inline std::vector<Subject> read_dataset(const std::string& root) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root))
        throw DataError(detail::msg("dataset root '", root, "' is not a directory"));
    std::vector<std::string> ids;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory()) ids.push_back(entry.path().filename().string());
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw DataError(detail::msg("dataset root '", root, "' has no subjects"));
    std::vector<Subject> cohort;
    for (const auto& id : ids) {
        const fs::path dir = fs::path(root) / id;
        Subject s;
        s.id = id;
        s.t1 = read_volume((dir / "t1.mvol").string(), Modality::T1);
        s.flair = read_volume((dir / "flair.mvol").string(), Modality::FLAIR);
        s.label = read_volume((dir / "label.mvol").string(), Modality::LABEL);
        s.validate();
        cohort.push_back(std::move(s));
    }
    return cohort;
}

}  // namespace jsynth
