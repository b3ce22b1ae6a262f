#include "transformer.hpp"

#include <cmath>

namespace hpn::nn {

namespace {
Param make_linear_w(const std::string& name, int in, int out, Rng& rng) {
    Param p(name, {in, out});
    init_xavier(p, rng);
    return p;
}
Param make_bias(const std::string& name, int out) { return Param(name, {out}); }
Param make_gain(const std::string& name, int d) {
    Param p(name, {d});
    p.value.fill(1.0);
    return p;
}
}  // namespace

TransformerLayer::TransformerLayer(const std::string& prefix, int d_model, int heads,
                                   int d_ff, bool causal, bool cross, Rng& rng)
    : d_(d_model), heads_(heads), dff_(d_ff), causal_(causal), cross_(cross) {
    if (d_model % heads != 0) throw ConfigError("transformer: d_model % heads != 0");
    wq_ = make_linear_w(prefix + ".wq", d_, d_, rng);
    wk_ = make_linear_w(prefix + ".wk", d_, d_, rng);
    wv_ = make_linear_w(prefix + ".wv", d_, d_, rng);
    wo_ = make_linear_w(prefix + ".wo", d_, d_, rng);
    bq_ = make_bias(prefix + ".bq", d_);
    bk_ = make_bias(prefix + ".bk", d_);
    bv_ = make_bias(prefix + ".bv", d_);
    bo_ = make_bias(prefix + ".bo", d_);
    ln1_g_ = make_gain(prefix + ".ln1.g", d_);
    ln1_b_ = make_bias(prefix + ".ln1.b", d_);
    ln2_g_ = make_gain(prefix + ".ln2.g", d_);
    ln2_b_ = make_bias(prefix + ".ln2.b", d_);
    if (cross_) {
        cwq_ = make_linear_w(prefix + ".cwq", d_, d_, rng);
        cwk_ = make_linear_w(prefix + ".cwk", d_, d_, rng);
        cwv_ = make_linear_w(prefix + ".cwv", d_, d_, rng);
        cwo_ = make_linear_w(prefix + ".cwo", d_, d_, rng);
        cbq_ = make_bias(prefix + ".cbq", d_);
        cbk_ = make_bias(prefix + ".cbk", d_);
        cbv_ = make_bias(prefix + ".cbv", d_);
        cbo_ = make_bias(prefix + ".cbo", d_);
        ln3_g_ = make_gain(prefix + ".ln3.g", d_);
        ln3_b_ = make_bias(prefix + ".ln3.b", d_);
    }
    ff1_w_ = make_linear_w(prefix + ".ff1.w", d_, dff_, rng);
    ff1_b_ = make_bias(prefix + ".ff1.b", dff_);
    ff2_w_ = make_linear_w(prefix + ".ff2.w", dff_, d_, rng);
    ff2_b_ = make_bias(prefix + ".ff2.b", d_);
}

Var TransformerLayer::attention(Graph& g, Var q_in, Var kv_in, bool causal_mask) {
    const int dh = d_ / heads_;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    Var q = split_heads(linear(q_in, wq_, bq_, g), heads_);
    Var k = split_heads(linear(kv_in, wk_, bk_, g), heads_);
    Var v = split_heads(linear(kv_in, wv_, bv_, g), heads_);
    Var ctx;
    if (causal_mask) {
        Var probs = softmax_causal(scale(bmm_causal_scores(q, k), inv));
        ctx = bmm_causal_apply(probs, v);
    } else {
        Var probs = softmax_rows(scale(bmm(q, k, false, true), inv));
        ctx = bmm(probs, v);
    }
    return linear(merge_heads(ctx), wo_, bo_, g);
}

Var TransformerLayer::forward(Graph& g, Var x, Var memory) {
    Var h1 = layer_norm(x, g.param(ln1_g_), g.param(ln1_b_));
    x = add(x, attention(g, h1, h1, causal_));
    if (cross_) {
        if (memory.g == nullptr) throw Error("transformer: cross layer needs memory");
        Var h3 = layer_norm(x, g.param(ln3_g_), g.param(ln3_b_));
        const int dh = d_ / heads_;
        Var q = split_heads(linear(h3, cwq_, cbq_, g), heads_);
        Var k = split_heads(linear(memory, cwk_, cbk_, g), heads_);
        Var v = split_heads(linear(memory, cwv_, cbv_, g), heads_);
        Var scores =
            scale(bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
        Var ctx = merge_heads(bmm(softmax_rows(scores), v));
        x = add(x, linear(ctx, cwo_, cbo_, g));
    }
    Var h2 = layer_norm(x, g.param(ln2_g_), g.param(ln2_b_));
    Var ff = add_bias(matmul(relu(add_bias(matmul(h2, g.param(ff1_w_)), g.param(ff1_b_))),
                             g.param(ff2_w_)),
                      g.param(ff2_b_));
    return add(x, ff);
}

Tensor raw_linear(const Tensor& x, const Param& w, const Param& b) {
    const int in = w.value.dim(0), out = w.value.dim(1);
    if (x.numel() % in != 0) throw ShapeError("raw_linear: width mismatch");
    const int rows = static_cast<int>(x.numel() / in);
    Tensor y({rows, out});
    gemm_acc(x.data(), w.value.data(), y.data(), rows, in, out, false, false);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < out; ++j) y[static_cast<int64_t>(i) * out + j] += b.value[j];
    if (x.rank() == 1) return y.reshaped({out});
    return y;
}

Tensor raw_layer_norm_row(const Tensor& x, const Param& g, const Param& b, double eps) {
    const int d = static_cast<int>(x.numel());
    Tensor y(x.shape());
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += x[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= d;
    double isd = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) y[j] = g.value[j] * ((x[j] - mu) * isd) + b.value[j];
    return y;
}

namespace {
// single-query multi-head attention over cached rows
Tensor cached_attention(const Tensor& q, const double* k, const double* v, int len,
                        int heads, int d) {
    const int dh = d / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor ctx({d});
    std::vector<double> scores(static_cast<size_t>(len));
    std::vector<double> probs(static_cast<size_t>(len));
    for (int h = 0; h < heads; ++h) {
        const int off = h * dh;
        for (int j = 0; j < len; ++j) {
            const double* kj = k + static_cast<int64_t>(j) * d + off;
            double s = 0.0;
            for (int t = 0; t < dh; ++t) s += q[off + t] * kj[t];
            scores[static_cast<size_t>(j)] = s * inv;
        }
        softmax_span(scores.data(), probs.data(), len, len);
        for (int j = 0; j < len; ++j) {
            const double* vj = v + static_cast<int64_t>(j) * d + off;
            double p = probs[static_cast<size_t>(j)];
            for (int t = 0; t < dh; ++t) ctx[off + t] += p * vj[t];
        }
    }
    return ctx;
}
}  // namespace

Tensor TransformerLayer::step(const Tensor& x, StepCache& cache, const Tensor* memory) {
    Tensor h1 = raw_layer_norm_row(x, ln1_g_, ln1_b_);
    Tensor q = raw_linear(h1, wq_, bq_);
    Tensor k = raw_linear(h1, wk_, bk_);
    Tensor v = raw_linear(h1, wv_, bv_);
    cache.k.insert(cache.k.end(), k.values().begin(), k.values().end());
    cache.v.insert(cache.v.end(), v.values().begin(), v.values().end());
    ++cache.len;
    Tensor ctx = cached_attention(q, cache.k.data(), cache.v.data(), cache.len, heads_, d_);
    Tensor out = raw_linear(ctx, wo_, bo_);
    Tensor x1 = x;
    x1.add_(out);

    if (cross_) {
        if (!memory) throw Error("transformer: cross step needs memory");
        if (!cache.mem_ready) {
            cache.mem_k = raw_linear(*memory, cwk_, cbk_);
            cache.mem_v = raw_linear(*memory, cwv_, cbv_);
            cache.mem_ready = true;
        }
        Tensor h3 = raw_layer_norm_row(x1, ln3_g_, ln3_b_);
        Tensor cq = raw_linear(h3, cwq_, cbq_);
        int mem_len = memory->dim(0);
        Tensor cctx =
            cached_attention(cq, cache.mem_k.data(), cache.mem_v.data(), mem_len, heads_, d_);
        x1.add_(raw_linear(cctx, cwo_, cbo_));
    }

    Tensor h2 = raw_layer_norm_row(x1, ln2_g_, ln2_b_);
    Tensor f1 = raw_linear(h2, ff1_w_, ff1_b_);
    for (auto& t : f1.values()) t = t > 0.0 ? t : 0.0;
    Tensor f2 = raw_linear(f1, ff2_w_, ff2_b_);
    x1.add_(f2);
    return x1;
}

void TransformerLayer::collect(std::vector<Param*>& out) {
    for (Param* p : {&wq_, &wk_, &wv_, &wo_, &bq_, &bk_, &bv_, &bo_, &ln1_g_, &ln1_b_,
                     &ln2_g_, &ln2_b_, &ff1_w_, &ff1_b_, &ff2_w_, &ff2_b_})
        out.push_back(p);
    if (cross_)
        for (Param* p : {&cwq_, &cwk_, &cwv_, &cwo_, &cbq_, &cbk_, &cbv_, &cbo_, &ln3_g_,
                         &ln3_b_})
            out.push_back(p);
}

TransformerStack::TransformerStack(const std::string& prefix, int layers, int d_model,
                                   int heads, int d_ff, bool causal, bool cross, Rng& rng) {
    for (int l = 0; l < layers; ++l)
        layers_.emplace_back(prefix + ".l" + std::to_string(l), d_model, heads, d_ff,
                             causal, cross, rng);
    ln_f_g_ = make_gain(prefix + ".ln_f.g", d_model);
    ln_f_b_ = make_bias(prefix + ".ln_f.b", d_model);
}

Var TransformerStack::forward(Graph& g, Var x, Var memory) {
    for (auto& l : layers_) x = l.forward(g, x, memory);
    return layer_norm(x, g.param(ln_f_g_), g.param(ln_f_b_));
}

Tensor TransformerStack::step(const Tensor& x, StepCache& cache, const Tensor* memory) {
    Tensor h = x;
    for (size_t i = 0; i < layers_.size(); ++i) h = layers_[i].step(h, cache.layers[i], memory);
    return raw_layer_norm_row(h, ln_f_g_, ln_f_b_);
}

void TransformerStack::collect(std::vector<Param*>& out) {
    for (auto& l : layers_) l.collect(out);
    out.push_back(&ln_f_g_);
    out.push_back(&ln_f_b_);
}

}  // namespace hpn::nn
