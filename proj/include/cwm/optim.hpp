#pragma once

// AdamW (decoupled weight decay) with a linear-warmup + cosine-decay schedule
// and the linear lr scaling rule: effective lr = base_lr * batch_size / 256.

#include "cwm/tensor.hpp"

#include <cmath>
#include <vector>

namespace cwm {

struct OptimConfig {
    double base_lr = 1.5e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    std::size_t batch_size = 256;
    long warmup_steps = 0;
    long total_steps = 1;
};

template <typename T>
class AdamWT {
public:
    AdamWT(std::vector<TensorT<T>> params, OptimConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto& p : params_) {
            m_.emplace_back(p.numel(), T(0));
            v_.emplace_back(p.numel(), T(0));
        }
    }

    double effective_base_lr() const {
        return cfg_.base_lr * static_cast<double>(cfg_.batch_size) / 256.0;
    }

    double lr_at(long step) const {
        const double eff = effective_base_lr();
        if (cfg_.warmup_steps > 0 && step < cfg_.warmup_steps)
            return eff * static_cast<double>(step + 1) / static_cast<double>(cfg_.warmup_steps);
        const long span = cfg_.total_steps - cfg_.warmup_steps;
        double progress = span > 0
                              ? static_cast<double>(step - cfg_.warmup_steps) /
                                    static_cast<double>(span)
                              : 1.0;
        progress = std::min(std::max(progress, 0.0), 1.0);
        return eff * 0.5 * (1.0 + std::cos(progress * M_PI));
    }

    // One update from each parameter's current gradient. If any gradient is
    // non-finite the step is rejected and no state changes.
    bool step() {
        for (const auto& p : params_) {
            if (!p.has_grad()) return false;
            for (T g : p.grad())
                if (!std::isfinite(static_cast<double>(g))) return false;
        }
        const double lr = lr_at(t_);
        const double b1 = cfg_.beta1, b2 = cfg_.beta2;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_ + 1));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_ + 1));
        for (std::size_t pi = 0; pi < params_.size(); ++pi) {
            auto w = params_[pi].data_mut();
            auto g = params_[pi].grad();
            auto& m = m_[pi];
            auto& v = v_[pi];
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * gi);
                v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * gi * gi);
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                const double upd = mhat / (std::sqrt(vhat) + cfg_.eps) +
                                   cfg_.weight_decay * static_cast<double>(w[i]);
                w[i] = static_cast<T>(w[i] - lr * upd);
            }
        }
        ++t_;
        return true;
    }

    long step_count() const { return t_; }
    const OptimConfig& config() const { return cfg_; }

private:
    std::vector<TensorT<T>> params_;
    std::vector<std::vector<T>> m_, v_;
    OptimConfig cfg_;
    long t_ = 0;
};

using AdamW = AdamWT<float>;

}  // namespace cwm
