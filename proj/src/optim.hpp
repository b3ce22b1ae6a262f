#pragma once

#include <vector>

#include "autodiff.hpp"

namespace hpn::nn {

// Decoupled-weight-decay Adam with bias correction. Moment buffers are keyed
// by registration order, so the parameter list must be stable across steps.
class AdamW {
public:
    struct Config {
        double lr = 5e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
        double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
    };

    AdamW(std::vector<Param*> params, Config cfg);

    void step();
    void zero_grad();
    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    int64_t step_count() const { return step_count_; }
    const std::vector<Param*>& params() const { return params_; }

private:
    std::vector<Param*> params_;
    std::vector<Tensor> m_, v_;
    Config cfg_;
    int64_t step_count_ = 0;
};

}  // namespace hpn::nn
