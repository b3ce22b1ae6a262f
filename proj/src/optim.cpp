#include "optim.hpp"

#include <cmath>

namespace hpn::nn {

AdamW::AdamW(std::vector<Param*> params, Config cfg) : params_(std::move(params)), cfg_(cfg) {
    if (cfg_.beta1 <= 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 <= 0.0 || cfg_.beta2 >= 1.0)
        throw ConfigError("adamw: betas must lie in (0,1)");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Param* p : params_) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
    }
}

void AdamW::step() {
    ++step_count_;
    if (cfg_.clip_norm > 0.0) {
        double sq = 0.0;
        for (Param* p : params_) {
            if (!p->requires_grad) continue;
            for (int64_t j = 0; j < p->grad.numel(); ++j) sq += p->grad[j] * p->grad[j];
        }
        double norm = std::sqrt(sq);
        if (norm > cfg_.clip_norm) {
            double s = cfg_.clip_norm / norm;
            for (Param* p : params_) {
                if (!p->requires_grad) continue;
                for (int64_t j = 0; j < p->grad.numel(); ++j) p->grad[j] *= s;
            }
        }
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Param* p = params_[i];
        if (!p->requires_grad) continue;
        double* w = p->value.data();
        const double* g = p->grad.data();
        double* m = m_[i].data();
        double* v = v_[i].data();
        for (int64_t j = 0; j < p->value.numel(); ++j) {
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            w[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[j]);
        }
    }
}

void AdamW::zero_grad() {
    for (Param* p : params_) p->zero_grad();
}

}  // namespace hpn::nn
