#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace hpn::nn {

// Trainable tensor. Gradients accumulate into `grad` between optimizer steps.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    bool requires_grad = true;

    Param() = default;
    Param(std::string n, std::vector<int> shape)
        : name(std::move(n)), value(shape), grad(std::move(shape)) {}

    void zero_grad() { grad.zero(); }
};

void init_uniform(Param& p, Rng& rng, double scale);
// U(-sqrt(6/(fan_in+fan_out)), +...) for matrices, small uniform otherwise
void init_xavier(Param& p, Rng& rng);

class Graph;

// Lightweight handle into a Graph's tape.
struct Var {
    Graph* g = nullptr;
    int id = -1;
    const Tensor& val() const;
};

// Dynamic reverse-mode tape. One Graph per forward pass; ops append nodes and
// backward() walks the tape in reverse creation order (which is topological).
class Graph {
public:
    Graph() { nodes_.reserve(256); }

    Var leaf(Tensor t);                       // constant input
    Var param(Param& p);                      // cached per graph
    Var make(Tensor val, bool needs_grad);
    void set_back(int id, std::function<void(Graph&)> back);

    const Tensor& val(int id) const { return nodes_[static_cast<size_t>(id)].val; }
    bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
    // Allocates the gradient buffer on first touch.
    Tensor& grad(int id);
    // nullptr when the node does not require gradients.
    Tensor* maybe_grad(int id);

    void backward(Var loss);

    // Accumulate (scale * node grad) into each registered Param::grad.
    // Call once per sample, in sample order, for deterministic batching.
    void apply_param_grads(double scale);

private:
    struct Node {
        Tensor val;
        Tensor grad;
        bool needs_grad = false;
        Param* src = nullptr;
        std::function<void(Graph&)> back;
    };
    std::vector<Node> nodes_;
    std::vector<std::pair<Param*, int>> param_nodes_;
};

// ---- elementwise / structural ops ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_bias(Var x, Var b);  // x[n,m] + b[m] broadcast over rows
Var relu(Var x);
Var sigmoid(Var x);
Var reshape(Var x, std::vector<int> shape);
Var concat_rows(const std::vector<Var>& xs);
Var concat_cols(const std::vector<Var>& xs);  // all [n, m_i] -> [n, sum m_i]
Var slice_rows(Var x, int start, int count);
Var mean_axis0(Var x);  // [n,m] -> [m]
Var sum_all(Var x);     // -> [1]
Var mean_all(Var x);    // -> [1]

// ---- linear algebra ----
Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
Var bmm(Var a, Var b, bool trans_a = false, bool trans_b = false);  // [B,n,k]x[B,k,m]
// causal-attention specializations touching only the lower triangle:
//   scores[t,i,j] = q[t,i] . k[t,j]    for j <= i (0 above the diagonal)
//   out[t,i]      = sum_{j<=i} p[t,i,j] * v[t,j]
Var bmm_causal_scores(Var q, Var k);
Var bmm_causal_apply(Var p, Var v);
Var linear(Var x, Param& w, Param& b, Graph& g);  // x[n,in] * w[in,out] + b

// ---- attention pieces ----
Var split_heads(Var x, int heads);   // [L,d] -> [h,L,d/h]
Var merge_heads(Var x);              // [h,L,dh] -> [L,h*dh]
Var softmax_rows(Var x);             // softmax over last axis, any rank >= 1
Var softmax_causal(Var x);           // [B,L,L]; row i attends to j <= i

Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var embedding(Var table, const std::vector<int>& ids);

// ---- losses (scalar outputs) ----
// mean over the masked region; empty mask means all elements
Var mse(Var pred, const Tensor& target, const Tensor& mask = {});
Var smooth_l1(Var pred, const Tensor& target, const Tensor& mask = {});
Var binary_cross_entropy(Var pred, const Tensor& target);  // pred in (0,1)
Var cross_entropy(Var logits, const std::vector<int>& targets, int ignore_id = -1);

// Vector quantization straight-through: value is `quantized`, gradient passes
// to y_prime unchanged.
Var straight_through(Var y_prime, const Tensor& quantized);

// ---- schedules / diagnostics ----
double cosine_lr(int64_t step, int64_t total, double base);

// Compares reverse-mode gradients of f against central finite differences at
// `point`; returns the max relative error over all input coordinates.
double check_gradients(const std::function<Var(Graph&, Var)>& f, const Tensor& point,
                       double h = 1e-5);

// Model-scale variant: probes random parameter coordinates. `loss_grad` must
// zero grads, run forward+backward and return the loss; `loss_only` runs the
// same forward without touching grads.
double check_param_gradients(const std::function<double()>& loss_grad,
                             const std::function<double()>& loss_only,
                             std::span<Param* const> params, Rng& rng, int probes,
                             double h = 1e-5);

}  // namespace hpn::nn
