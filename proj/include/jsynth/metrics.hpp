#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "jsynth/rng.hpp"
#include "jsynth/volume.hpp"

namespace jsynth {

struct ConfusionCounts {
    Dim tp = 0, fp = 0, fn = 0, tn = 0;
    Dim total() const { return tp + fp + fn + tn; }
};

inline ConfusionCounts confusion(const Volume& pred, const Volume& truth) {
    if (!pred.same_dims(truth))
        throw ShapeError(detail::msg("confusion: dims ", pred.depth, "x", pred.height, "x",
                                     pred.width, " vs ", truth.depth, "x", truth.height, "x",
                                     truth.width));
    if (!pred.is_binary() || !truth.is_binary())
        throw ValueError("confusion: inputs must be binary volumes");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.voxels.size(); ++i) {
        const bool p = pred.voxels[i] == 1.0;
        const bool t = truth.voxels[i] == 1.0;
        if (p && t)
            ++c.tp;
        else if (p && !t)
            ++c.fp;
        else if (!p && t)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

// Both volumes empty counts as perfect agreement on absence.
inline double dice(const ConfusionCounts& c) {
    if (c.tp + c.fp + c.fn == 0) return 1.0;
    return 2.0 * static_cast<double>(c.tp) /
           static_cast<double>(2 * c.tp + c.fp + c.fn);
}

// False positives normalized by ground-truth lesion burden (may exceed 1);
// undefined when the truth has no positives.
inline std::optional<double> fpr(const ConfusionCounts& c) {
    const Dim p = c.tp + c.fn;
    if (p == 0) return std::nullopt;
    return static_cast<double>(c.fp) / static_cast<double>(p);
}

// Miss rate fn/(tp+fn); undefined when the truth has no positives.
inline std::optional<double> fnr(const ConfusionCounts& c) {
    const Dim p = c.tp + c.fn;
    if (p == 0) return std::nullopt;
    return static_cast<double>(c.fn) / static_cast<double>(p);
}

// Mean absolute difference over the mask (nonzero voxels of `mask`).
inline double mae(const Volume& a, const Volume& b, const Volume& mask) {
    if (!a.same_dims(b) || !a.same_dims(mask))
        throw ShapeError("mae: volume dims disagree");
    double s = 0.0;
    Dim n = 0;
    for (std::size_t i = 0; i < a.voxels.size(); ++i) {
        if (mask.voxels[i] == 0.0) continue;
        s += std::abs(a.voxels[i] - b.voxels[i]);
        ++n;
    }
    if (n == 0) throw ValueError("mae: empty mask");
    return s / static_cast<double>(n);
}

constexpr double kPsnrCap = 99.0;

// 10*log10(peak^2 / MSE) with the peak taken from the reference volume `a`
// over the mask; identical volumes saturate at the 99 dB cap.
inline double psnr(const Volume& a, const Volume& b, const Volume& mask) {
    if (!a.same_dims(b) || !a.same_dims(mask))
        throw ShapeError("psnr: volume dims disagree");
    double lo = 0.0, hi = 0.0, mse = 0.0;
    Dim n = 0;
    bool first = true;
    for (std::size_t i = 0; i < a.voxels.size(); ++i) {
        if (mask.voxels[i] == 0.0) continue;
        const double av = a.voxels[i];
        if (first) {
            lo = hi = av;
            first = false;
        } else {
            lo = std::min(lo, av);
            hi = std::max(hi, av);
        }
        const double d = av - b.voxels[i];
        mse += d * d;
        ++n;
    }
    if (n == 0) throw ValueError("psnr: empty mask");
    const double peak = hi - lo;
    if (peak == 0.0) throw ValueError("psnr: reference has zero dynamic range over the mask");
    mse /= static_cast<double>(n);
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

// Two-sided paired sign-flip permutation test on the mean difference. When the
// full 2^n enumeration is no larger than the requested Monte-Carlo budget the
// test is exact; otherwise it samples sign patterns with the add-one
// correction p = (1 + #{|T_perm| >= |T_obs|}) / (1 + n_permutations).
inline double permutation_test(const std::vector<double>& a, const std::vector<double>& b,
                               int n_permutations, std::uint64_t seed) {
    if (a.size() != b.size())
        throw ValueError(detail::msg("permutation_test: ", a.size(), " vs ", b.size(), " pairs"));
    if (a.size() < 2) throw ValueError("permutation_test: need at least 2 pairs");
    if (n_permutations < 1) throw ValueError("permutation_test: need at least 1 permutation");
    const std::size_t n = a.size();
    std::vector<double> diff(n);
    for (std::size_t i = 0; i < n; ++i) diff[i] = a[i] - b[i];
    const auto mean_of = [&](auto&& sign) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += sign(i) ? -diff[i] : diff[i];
        return s / static_cast<double>(n);
    };
    const double t_obs = std::abs(mean_of([](std::size_t) { return false; }));

    if (n <= 62 && (Dim{1} << n) <= static_cast<Dim>(n_permutations)) {
        const std::uint64_t patterns = std::uint64_t{1} << n;
        std::uint64_t hits = 0;
        for (std::uint64_t bits = 0; bits < patterns; ++bits) {
            const double t = std::abs(mean_of([&](std::size_t i) { return (bits >> i) & 1u; }));
            if (t >= t_obs) ++hits;
        }
        return static_cast<double>(hits) / static_cast<double>(patterns);
    }

    Rng rng(derive_seed(seed, "permutation"));
    std::uint64_t hits = 0;
    for (int rep = 0; rep < n_permutations; ++rep) {
        std::vector<bool> flips(n);
        for (std::size_t i = 0; i < n; ++i) flips[i] = rng.uniform() < 0.5;
        const double t = std::abs(mean_of([&](std::size_t i) { return bool(flips[i]); }));
        if (t >= t_obs) ++hits;
    }
    return static_cast<double>(1 + hits) / static_cast<double>(1 + n_permutations);
}

// ---- qualitative overlays --------------------------------------------------------

struct RgbImage {
    Dim height = 0, width = 0;
    std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
};

// TP blue, FP green, FN yellow, everything else the min-max scaled background.
inline RgbImage render_overlay(const std::vector<double>& pred, const std::vector<double>& truth,
                               const std::vector<double>& background, Dim height, Dim width) {
    const auto n = static_cast<std::size_t>(height * width);
    if (pred.size() != n || truth.size() != n || background.size() != n)
        throw ShapeError("render_overlay: slice sizes disagree");
    double lo = background[0], hi = background[0];
    for (double v : background) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
    RgbImage img;
    img.height = height;
    img.width = width;
    img.rgb.resize(n * 3);
    for (std::size_t i = 0; i < n; ++i) {
        const bool p = pred[i] == 1.0;
        const bool t = truth[i] == 1.0;
        std::uint8_t r, g, b;
        if (p && t) {
            r = 0; g = 0; b = 255;
        } else if (p) {
            r = 0; g = 255; b = 0;
        } else if (t) {
            r = 255; g = 255; b = 0;
        } else {
            const auto gray = static_cast<std::uint8_t>(
                std::lround(std::clamp((background[i] - lo) * scale, 0.0, 255.0)));
            r = g = b = gray;
        }
        img.rgb[i * 3 + 0] = r;
        img.rgb[i * 3 + 1] = g;
        img.rgb[i * 3 + 2] = b;
    }
    return img;
}

inline void write_ppm(const RgbImage& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError(detail::msg("cannot open '", path, "' for writing"));
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
    if (!f) throw IoError(detail::msg("write failed for '", path, "'"));
}

// ---- report rows and aggregation ---------------------------------------------------

struct SubjectMetrics {
    std::string method, subject;
    double dsc = 0.0;
    std::optional<double> fpr, fnr;  // absent when the truth has no positives
    std::optional<double> mae, psnr; // absent for regimes without a generator
};

struct MethodSummary {
    std::string method;
    double mean_dsc = 0.0;
    std::optional<double> mean_fpr, mean_fnr, mean_mae, mean_psnr;
    // two-sided sign-flip p-values vs the baseline method, where both defined
    std::optional<double> p_dsc, p_fpr, p_fnr, p_mae, p_psnr;
};

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string fmt_opt(const std::optional<double>& v) {
    return v ? fmt_double(*v) : std::string();
}

inline std::optional<double> parse_opt(const std::string& cell) {
    if (cell.empty()) return std::nullopt;
    return std::stod(cell);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        if (pos == std::string::npos) {
            cells.push_back(line.substr(start));
            break;
        }
        cells.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return cells;
}

inline std::optional<double> mean_present(const std::vector<std::optional<double>>& values) {
    double s = 0.0;
    Dim n = 0;
    for (const auto& v : values) {
        if (!v) continue;
        s += *v;
        ++n;
    }
    if (n == 0) return std::nullopt;
    return s / static_cast<double>(n);
}

}  // namespace detail

inline std::string subject_metrics_to_csv(std::vector<SubjectMetrics> rows) {
    std::stable_sort(rows.begin(), rows.end(), [](const SubjectMetrics& a, const SubjectMetrics& b) {
        return a.subject < b.subject;
    });
    std::string out = "method,subject,dsc,fpr,fnr,mae,psnr\n";
    for (const auto& r : rows) {
        out += r.method + "," + r.subject + "," + detail::fmt_double(r.dsc) + "," +
               detail::fmt_opt(r.fpr) + "," + detail::fmt_opt(r.fnr) + "," +
               detail::fmt_opt(r.mae) + "," + detail::fmt_opt(r.psnr) + "\n";
    }
    return out;
}

inline std::vector<SubjectMetrics> subject_metrics_from_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "method,subject,dsc,fpr,fnr,mae,psnr")
        throw DataError("per-subject csv: bad header");
    std::vector<SubjectMetrics> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto cells = detail::split_csv_line(line);
        if (cells.size() != 7) throw DataError(detail::msg("per-subject csv: bad line '", line, "'"));
        SubjectMetrics r;
        r.method = cells[0];
        r.subject = cells[1];
        r.dsc = std::stod(cells[2]);
        r.fpr = detail::parse_opt(cells[3]);
        r.fnr = detail::parse_opt(cells[4]);
        r.mae = detail::parse_opt(cells[5]);
        r.psnr = detail::parse_opt(cells[6]);
        rows.push_back(std::move(r));
    }
    return rows;
}

// Subject-level averaging and paired significance against a baseline method.
// Methods keep their first-appearance order from `rows`.
inline std::vector<MethodSummary> summarize_metrics(const std::vector<SubjectMetrics>& rows,
                                                    const std::string& baseline,
                                                    int n_permutations, std::uint64_t seed) {
    std::vector<std::string> methods;
    for (const auto& r : rows)
        if (std::find(methods.begin(), methods.end(), r.method) == methods.end())
            methods.push_back(r.method);

    const auto rows_of = [&](const std::string& method) {
        std::vector<SubjectMetrics> out;
        for (const auto& r : rows)
            if (r.method == method) out.push_back(r);
        std::stable_sort(out.begin(), out.end(),
                         [](const SubjectMetrics& a, const SubjectMetrics& b) {
                             return a.subject < b.subject;
                         });
        return out;
    };
    const auto baseline_rows = rows_of(baseline);

    std::vector<MethodSummary> summaries;
    for (const auto& method : methods) {
        const auto mrows = rows_of(method);
        MethodSummary s;
        s.method = method;
        {
            double acc = 0.0;
            for (const auto& r : mrows) acc += r.dsc;
            s.mean_dsc = acc / static_cast<double>(mrows.size());
        }
        std::vector<std::optional<double>> fprs, fnrs, maes, psnrs;
        for (const auto& r : mrows) {
            fprs.push_back(r.fpr);
            fnrs.push_back(r.fnr);
            maes.push_back(r.mae);
            psnrs.push_back(r.psnr);
        }
        s.mean_fpr = detail::mean_present(fprs);
        s.mean_fnr = detail::mean_present(fnrs);
        s.mean_mae = detail::mean_present(maes);
        s.mean_psnr = detail::mean_present(psnrs);

        if (method != baseline && !baseline_rows.empty()) {
            const auto paired_p = [&](auto&& get, const char* tag) -> std::optional<double> {
                std::vector<double> xs, ys;
                for (const auto& mr : mrows) {
                    for (const auto& br : baseline_rows) {
                        if (br.subject != mr.subject) continue;
                        const auto x = get(mr);
                        const auto y = get(br);
                        if (x && y) {
                            xs.push_back(*x);
                            ys.push_back(*y);
                        }
                        break;
                    }
                }
                if (xs.size() < 2) return std::nullopt;
                return permutation_test(xs, ys, n_permutations,
                                        derive_seed(seed, method + ":" + tag));
            };
            s.p_dsc = paired_p([](const SubjectMetrics& r) { return std::optional<double>(r.dsc); },
                               "dsc");
            s.p_fpr = paired_p([](const SubjectMetrics& r) { return r.fpr; }, "fpr");
            s.p_fnr = paired_p([](const SubjectMetrics& r) { return r.fnr; }, "fnr");
            s.p_mae = paired_p([](const SubjectMetrics& r) { return r.mae; }, "mae");
            s.p_psnr = paired_p([](const SubjectMetrics& r) { return r.psnr; }, "psnr");
        }
        summaries.push_back(std::move(s));
    }
    return summaries;
}

inline std::string summaries_to_csv(const std::vector<MethodSummary>& summaries) {
    std::string out =
        "method,mean_dsc,mean_fpr,mean_fnr,mean_mae,mean_psnr,"
        "p_dsc_vs_baseline,p_fpr_vs_baseline,p_fnr_vs_baseline,p_mae_vs_baseline,"
        "p_psnr_vs_baseline\n";
    for (const auto& s : summaries) {
        out += s.method + "," + detail::fmt_double(s.mean_dsc) + "," +
               detail::fmt_opt(s.mean_fpr) + "," + detail::fmt_opt(s.mean_fnr) + "," +
               detail::fmt_opt(s.mean_mae) + "," + detail::fmt_opt(s.mean_psnr) + "," +
               detail::fmt_opt(s.p_dsc) + "," + detail::fmt_opt(s.p_fpr) + "," +
               detail::fmt_opt(s.p_fnr) + "," + detail::fmt_opt(s.p_mae) + "," +
               detail::fmt_opt(s.p_psnr) + "\n";
    }
    return out;
}

}  // namespace jsynth
