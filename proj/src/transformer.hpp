#pragma once

#include <string>
#include <vector>

#include "autodiff.hpp"

namespace hpn::nn {

// Pre-norm transformer layer: x + Attn(LN(x)), then x + FFN(LN(x)).
// Optionally causal (decoder self-attention) and/or fitted with a
// cross-attention block over an encoder memory.
class TransformerLayer {
public:
    TransformerLayer() = default;
    TransformerLayer(const std::string& prefix, int d_model, int heads, int d_ff,
                     bool causal, bool cross, Rng& rng);

    // Training/no-grad full-sequence pass. `memory` is required iff the layer
    // was built with cross-attention.
    Var forward(Graph& g, Var x, Var memory = Var{});

    // Incremental single-position inference with a KV cache. `x` is one row
    // of width d_model; returns the transformed row.
    struct StepCache {
        std::vector<double> k, v;  // appended rows, [len, d]
        int len = 0;
        Tensor mem_k, mem_v;  // cross-attention keys/values, computed once
        bool mem_ready = false;
    };
    Tensor step(const Tensor& x, StepCache& cache, const Tensor* memory = nullptr);

    void collect(std::vector<Param*>& out);

    int d_model() const { return d_; }

private:
    Var attention(Graph& g, Var q_in, Var kv_in, bool causal_mask);

    int d_ = 0, heads_ = 0, dff_ = 0;
    bool causal_ = false, cross_ = false;
    Param wq_, wk_, wv_, wo_;
    Param bq_, bk_, bv_, bo_;
    Param cwq_, cwk_, cwv_, cwo_;
    Param cbq_, cbk_, cbv_, cbo_;
    Param ln1_g_, ln1_b_, ln2_g_, ln2_b_, ln3_g_, ln3_b_;
    Param ff1_w_, ff1_b_, ff2_w_, ff2_b_;
};

// Stack of layers with a final layer norm (pre-norm convention).
class TransformerStack {
public:
    TransformerStack() = default;
    TransformerStack(const std::string& prefix, int layers, int d_model, int heads,
                     int d_ff, bool causal, bool cross, Rng& rng);

    Var forward(Graph& g, Var x, Var memory = Var{});

    struct StepCache {
        std::vector<TransformerLayer::StepCache> layers;
    };
    Tensor step(const Tensor& x, StepCache& cache, const Tensor* memory = nullptr);

    void collect(std::vector<Param*>& out);
    StepCache make_cache() const { return StepCache{std::vector<TransformerLayer::StepCache>(layers_.size())}; }

private:
    std::vector<TransformerLayer> layers_;
    Param ln_f_g_, ln_f_b_;
};

// no-grad helpers shared by the incremental decode paths
Tensor raw_linear(const Tensor& x, const Param& w, const Param& b);
Tensor raw_layer_norm_row(const Tensor& x, const Param& g, const Param& b,
                          double eps = 1e-5);

}  // namespace hpn::nn
