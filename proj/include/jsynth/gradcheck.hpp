#pragma once

#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "jsynth/ops.hpp"
#include "jsynth/rng.hpp"
#include "jsynth/tensor.hpp"
#include "jsynth/unet.hpp"

namespace jsynth {

struct GradCheckReport {
    std::string name;
    double max_rel_err = 0.0;
    Dim coords_checked = 0;
};

namespace gradcheck {

inline double rel_err(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-2});
    return std::abs(a - b) / denom;
}

// Central finite differences of `objective` w.r.t. each coordinate of `x`,
// compared against the autodiff gradient in `analytic`. The objective must be
// a pure recomputation of the forward pass from current tensor values; it is
// evaluated with no tape active, so probing builds no graph.
inline void fd_compare(Tensor x, const std::vector<double>& analytic,
                       const std::function<double()>& objective, GradCheckReport& report,
                       double h = 1e-5) {
    auto& vals = x.values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const double keep = vals[i];
        vals[i] = keep + h;
        const double fp = objective();
        vals[i] = keep - h;
        const double fm = objective();
        vals[i] = keep;
        const double fd = (fp - fm) / (2.0 * h);
        const double err = rel_err(analytic[i], fd);
        if (err > report.max_rel_err) report.max_rel_err = err;
        ++report.coords_checked;
    }
}

// Runs one op configuration: forward under a tape, random-projection scalar
// loss, backward, then FD probes every requires_grad input.
inline GradCheckReport check_op(const std::string& name, std::vector<Tensor> inputs,
                                const std::function<Tensor()>& forward, std::uint64_t seed) {
    GradCheckReport report{name, 0.0, 0};

    Tensor probe_weights;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor out = forward();
        Rng rng(derive_seed(seed, "projection"));
        probe_weights = Tensor::zeros(out.shape());
        for (double& v : probe_weights.values()) v = rng.uniform(-1.0, 1.0);
        Tensor loss = sum(mul(out, probe_weights));
        tape.backward(loss);
    }

    auto objective = [&]() {
        Tensor out = forward();
        double s = 0.0;
        for (std::size_t i = 0; i < out.values().size(); ++i)
            s += out.values()[i] * probe_weights.values()[i];
        return s;
    };

    for (auto& input : inputs) {
        if (!input.requires_grad()) continue;
        std::vector<double> analytic =
            input.has_grad() ? input.grad() : std::vector<double>(input.values().size(), 0.0);
        fd_compare(input, analytic, objective, report);
        input.zero_grad();
    }
    return report;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

inline Tensor random_binary(Shape shape, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.values()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    return t;
}

inline std::vector<GradCheckReport> op_suite(std::uint64_t seed) {
    std::vector<GradCheckReport> reports;
    Rng rng(derive_seed(seed, "gradcheck"));

    {  // conv2d over three shapes, incl. a strided case
        struct Case {
            Shape x, w;
            Dim pad, stride;
        };
        const Case cases[] = {
            {{1, 1, 5, 5}, {1, 1, 3, 3}, 1, 1},
            {{2, 3, 8, 8}, {4, 3, 3, 3}, 1, 1},
            {{1, 2, 9, 9}, {2, 2, 3, 3}, 1, 2},
        };
        GradCheckReport agg{"conv2d", 0.0, 0};
        for (const auto& c : cases) {
            Tensor x = random_tensor(c.x, rng);
            Tensor w = random_tensor(c.w, rng);
            Tensor b = random_tensor({c.w[0]}, rng);
            auto r = check_op("conv2d", {x, w, b},
                              [=]() { return conv2d(x, w, b, c.pad, c.stride); }, seed);
            agg.max_rel_err = std::max(agg.max_rel_err, r.max_rel_err);
            agg.coords_checked += r.coords_checked;
        }
        reports.push_back(agg);
    }
    {
        const std::pair<Shape, Dim> cases[] = {
            {{1, 2, 4, 4}, 2}, {{2, 3, 6, 6}, 3}, {{1, 1, 8, 8}, 2}};
        GradCheckReport agg{"max_pool2d", 0.0, 0};
        for (const auto& [shape, window] : cases) {
            Tensor x = random_tensor(shape, rng);
            auto r = check_op("max_pool2d", {x}, [=]() { return max_pool2d(x, window); }, seed);
            agg.max_rel_err = std::max(agg.max_rel_err, r.max_rel_err);
            agg.coords_checked += r.coords_checked;
        }
        reports.push_back(agg);
    }
    {
        const Shape cases[] = {{1, 1, 3, 3}, {2, 3, 4, 4}, {1, 2, 5, 5}};
        GradCheckReport agg{"upsample_nearest2", 0.0, 0};
        for (const auto& shape : cases) {
            Tensor x = random_tensor(shape, rng);
            auto r = check_op("upsample_nearest2", {x}, [=]() { return upsample_nearest2(x); },
                              seed);
            agg.max_rel_err = std::max(agg.max_rel_err, r.max_rel_err);
            agg.coords_checked += r.coords_checked;
        }
        reports.push_back(agg);
    }
    {
        const std::pair<Shape, Shape> cases[] = {
            {{1, 1, 3, 3}, {1, 2, 3, 3}}, {{2, 2, 4, 4}, {2, 1, 4, 4}}, {{1, 3, 2, 2}, {1, 3, 2, 2}}};
        GradCheckReport agg{"concat_channels", 0.0, 0};
        for (const auto& [sa, sb] : cases) {
            Tensor a = random_tensor(sa, rng);
            Tensor b = random_tensor(sb, rng);
            auto r = check_op("concat_channels", {a, b}, [=]() { return concat_channels(a, b); },
                              seed);
            agg.max_rel_err = std::max(agg.max_rel_err, r.max_rel_err);
            agg.coords_checked += r.coords_checked;
        }
        reports.push_back(agg);
    }
    {
        const std::pair<Shape, Mode> cases[] = {{{4, 3, 5, 5}, Mode::Train},
                                                {{2, 2, 4, 4}, Mode::Train},
                                                {{3, 1, 6, 6}, Mode::Train},
                                                {{2, 2, 3, 3}, Mode::Eval}};
        GradCheckReport agg{"batch_norm2d", 0.0, 0};
        for (const auto& [shape, mode] : cases) {
            const Dim channels = shape[1];
            Tensor x = random_tensor(shape, rng);
            Tensor gamma = random_tensor({channels}, rng, 0.5, 1.5);
            Tensor beta = random_tensor({channels}, rng, -0.5, 0.5);
            auto state = BatchNormState::init(channels);
            if (mode == Mode::Eval) {
                for (double& v : state.running_mean.values()) v = rng.uniform(-0.3, 0.3);
                for (double& v : state.running_var.values()) v = rng.uniform(0.5, 1.5);
            }
            const Mode m = mode;
            auto shared_state = std::make_shared<BatchNormState>(state);
            auto r = check_op("batch_norm2d", {x, gamma, beta},
                              [=]() { return batch_norm2d(x, gamma, beta, *shared_state, m); },
                              seed);
            agg.max_rel_err = std::max(agg.max_rel_err, r.max_rel_err);
            agg.coords_checked += r.coords_checked;
        }
        reports.push_back(agg);
    }
    {
        const Shape cases[] = {{5}, {2, 3, 4, 4}, {3, 3}};
        GradCheckReport agg{"leaky_relu", 0.0, 0};
        for (const auto& shape : cases) {
            // keep probe points away from the kink at 0
            Tensor x = Tensor::zeros(shape, true);
            for (double& v : x.values()) {
                const double mag = rng.uniform(0.2, 1.0);
                v = rng.uniform() < 0.5 ? -mag : mag;
            }
            auto r = check_op("leaky_relu", {x}, [=]() { return leaky_relu(x, 0.2); }, seed);
            agg.max_rel_err = std::max(agg.max_rel_err, r.max_rel_err);
            agg.coords_checked += r.coords_checked;
        }
        reports.push_back(agg);
    }
    {
        const Shape cases[] = {{5}, {2, 2, 3, 3}, {10}};
        GradCheckReport agg{"sigmoid", 0.0, 0};
        for (const auto& shape : cases) {
            Tensor x = random_tensor(shape, rng, -3.0, 3.0);
            auto r = check_op("sigmoid", {x}, [=]() { return sigmoid(x); }, seed);
            agg.max_rel_err = std::max(agg.max_rel_err, r.max_rel_err);
            agg.coords_checked += r.coords_checked;
        }
        reports.push_back(agg);
    }
    {
        const Shape cases[] = {{6}, {2, 1, 4, 4}, {9}};
        GradCheckReport agg{"bce_loss", 0.0, 0};
        for (const auto& shape : cases) {
            Tensor p = random_tensor(shape, rng, 0.05, 0.95);
            Tensor t = random_binary(shape, rng);
            auto r = check_op("bce_loss", {p}, [=]() { return bce_loss(p, t); }, seed);
            agg.max_rel_err = std::max(agg.max_rel_err, r.max_rel_err);
            agg.coords_checked += r.coords_checked;
        }
        reports.push_back(agg);
    }
    {
        const Shape cases[] = {{7}, {2, 1, 3, 3}, {4, 4}};
        GradCheckReport agg{"l2_loss", 0.0, 0};
        for (const auto& shape : cases) {
            Tensor a = random_tensor(shape, rng);
            Tensor b = random_tensor(shape, rng);
            auto r = check_op("l2_loss", {a, b}, [=]() { return l2_loss(a, b); }, seed);
            agg.max_rel_err = std::max(agg.max_rel_err, r.max_rel_err);
            agg.coords_checked += r.coords_checked;
        }
        reports.push_back(agg);
    }
    {
        const Shape cases[] = {{6}, {2, 2, 2, 2}, {3, 5}};
        GradCheckReport agg{"elementwise", 0.0, 0};
        for (const auto& shape : cases) {
            Tensor a = random_tensor(shape, rng);
            Tensor b = random_tensor(shape, rng);
            auto r = check_op("elementwise", {a, b},
                              [=]() { return add(mul(a, b), scale(a, 0.7)); }, seed);
            agg.max_rel_err = std::max(agg.max_rel_err, r.max_rel_err);
            agg.coords_checked += r.coords_checked;
        }
        reports.push_back(agg);
    }
    return reports;
}

// Generator-through-classifier composite: FD on every generator parameter of a
// two-level pair of U-Nets on a 16x16 batch, against the autodiff gradient of
// the combined reconstruction + segmentation loss.
inline GradCheckReport composite_check(std::uint64_t seed, double lambda_seg = 1.0) {
    Rng rng(derive_seed(seed, "composite"));
    UNetConfig gen_cfg{1, 1, 2, 2, FinalActivation::LeakyReLU, 0.2};
    UNetConfig cls_cfg{2, 1, 2, 2, FinalActivation::Sigmoid, 0.2};
    Network generator = build_generator(gen_cfg, derive_seed(seed, "composite-gen"));
    Network classifier = build_classifier(cls_cfg, derive_seed(seed, "composite-cls"));
    generator.set_mode(Mode::Train);
    classifier.set_mode(Mode::Train);

    Tensor t1 = random_tensor({2, 1, 16, 16}, rng, -1.0, 1.0, false);
    Tensor flair = random_tensor({2, 1, 16, 16}, rng, -1.0, 1.0, false);
    Tensor label = random_binary({2, 1, 16, 16}, rng);

    auto loss_value = [&]() {
        Tensor g = generator.forward(t1);
        Tensor c = classifier.forward(concat_channels(t1, g));
        const Tensor l2 = l2_loss(g, flair);
        const Tensor seg = bce_loss(c, label);
        return l2.item() + lambda_seg * seg.item();
    };

    GradCheckReport report{"generator_composite", 0.0, 0};
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor g = generator.forward(t1);
        Tensor c = classifier.forward(concat_channels(t1, g));
        Tensor loss = add(l2_loss(g, flair), scale(bce_loss(c, label), lambda_seg));
        tape.backward(loss);
        for (const auto& p : generator.parameters()) analytic.push_back(p.grad());
    }
    auto params = generator.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor p = params[i];
        fd_compare(p, analytic[i], loss_value, report);
    }
    generator.zero_grad();
    classifier.zero_grad();
    return report;
}

struct SuiteResult {
    std::vector<GradCheckReport> reports;
    bool all_pass = true;
};

inline SuiteResult run_suite(const std::vector<std::uint64_t>& seeds, double tolerance,
                             std::ostream* log) {
    SuiteResult result;
    std::vector<GradCheckReport> merged;
    for (std::uint64_t seed : seeds) {
        auto reports = op_suite(seed);
        reports.push_back(composite_check(seed));
        for (const auto& r : reports) {
            bool found = false;
            for (auto& m : merged) {
                if (m.name == r.name) {
                    m.max_rel_err = std::max(m.max_rel_err, r.max_rel_err);
                    m.coords_checked += r.coords_checked;
                    found = true;
                }
            }
            if (!found) merged.push_back(r);
        }
    }
    for (const auto& r : merged) {
        const bool pass = r.max_rel_err < tolerance;
        result.all_pass = result.all_pass && pass;
        if (log)
            (*log) << (pass ? "PASS " : "FAIL ") << r.name << ": max rel err " << r.max_rel_err
                   << " over " << r.coords_checked << " coordinates\n";
    }
    result.reports = std::move(merged);
    return result;
}

}  // namespace gradcheck
}  // namespace jsynth
