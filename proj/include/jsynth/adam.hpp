#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "jsynth/tensor.hpp"

namespace jsynth {

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Standard Adam with bias correction over a fixed parameter set. step() expects
// every parameter to carry a populated gradient and zeroes them afterwards.
class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig config = {})
        : params_(std::move(params)), config_(config) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto& p : params_) {
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    void step() {
        for (const auto& p : params_)
            if (!p.has_grad())
                throw ValueError(detail::msg("adam: parameter ", shape_str(p.shape()),
                                             " has no gradient"));
        ++step_count_;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
        for (std::size_t pi = 0; pi < params_.size(); ++pi) {
            auto& p = params_[pi];
            auto& vals = p.values();
            const auto& g = p.grad();
            auto& m = m_[pi];
            auto& v = v_[pi];
            for (std::size_t i = 0; i < vals.size(); ++i) {
                m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
                v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                vals[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.epsilon);
            }
            p.zero_grad();
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    std::int64_t step_count() const { return step_count_; }
    const AdamConfig& config() const { return config_; }
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    AdamConfig config_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t step_count_ = 0;
};

}  // namespace jsynth
