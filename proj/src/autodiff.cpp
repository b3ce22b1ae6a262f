#include "autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace hpn::nn {

namespace {
constexpr double kBceEps = 1e-7;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch");
}

void axpy(Tensor& dst, const Tensor& src, double s = 1.0) {
    double* d = dst.data();
    const double* x = src.data();
    for (int64_t i = 0; i < src.numel(); ++i) d[i] += s * x[i];
}
}  // namespace

void init_uniform(Param& p, Rng& rng, double s) {
    for (auto& x : p.value.values()) x = rng.uniform(-s, s);
}

void init_xavier(Param& p, Rng& rng) {
    const auto& sh = p.value.shape();
    double s;
    if (sh.size() >= 2) {
        double fan_in = static_cast<double>(sh[sh.size() - 2]);
        double fan_out = static_cast<double>(sh[sh.size() - 1]);
        s = std::sqrt(6.0 / (fan_in + fan_out));
    } else {
        s = 0.05;
    }
    init_uniform(p, rng, s);
}

const Tensor& Var::val() const { return g->val(id); }

Var Graph::leaf(Tensor t) {
    nodes_.push_back(Node{std::move(t), {}, false, nullptr, nullptr});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::param(Param& p) {
    for (const auto& [ptr, id] : param_nodes_)
        if (ptr == &p) return Var{this, id};
    nodes_.push_back(Node{p.value, {}, p.requires_grad, &p, nullptr});
    int id = static_cast<int>(nodes_.size()) - 1;
    param_nodes_.emplace_back(&p, id);
    return Var{this, id};
}

Var Graph::make(Tensor val, bool needs_grad) {
    nodes_.push_back(Node{std::move(val), {}, needs_grad, nullptr, nullptr});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Graph::set_back(int id, std::function<void(Graph&)> back) {
    nodes_[static_cast<size_t>(id)].back = std::move(back);
}

Tensor& Graph::grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.numel() == 0) n.grad = Tensor(n.val.shape());
    return n.grad;
}

Tensor* Graph::maybe_grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.needs_grad) return nullptr;
    return &grad(id);
}

void Graph::backward(Var loss) {
    if (loss.g != this) throw Error("backward: var from another graph");
    if (val(loss.id).numel() != 1) throw ShapeError("backward: loss must be scalar");
    grad(loss.id).fill(1.0);
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.needs_grad || !n.back) continue;
        if (n.grad.numel() == 0) continue;  // no gradient reached this node
        n.back(*this);
    }
}

void Graph::apply_param_grads(double scale) {
    for (const auto& [p, id] : param_nodes_) {
        if (!p->requires_grad) continue;
        const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
        if (g.numel() == 0) continue;
        double* dst = p->grad.data();
        const double* src = g.data();
        for (int64_t i = 0; i < g.numel(); ++i) dst[i] += scale * src[i];
    }
}

// ---------------------------------------------------------------------------
// elementwise / structural

Var add(Var a, Var b) {
    Graph& g = *a.g;
    check_same_shape(a.val(), b.val(), "add");
    Tensor out = a.val();
    out.add_(b.val());
    bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ia = a.id, ib = b.id, io = o.id;
        g.set_back(io, [ia, ib, io](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            if (auto* da = gr.maybe_grad(ia)) axpy(*da, dc);
            if (auto* db = gr.maybe_grad(ib)) axpy(*db, dc);
        });
    }
    return o;
}

Var sub(Var a, Var b) {
    Graph& g = *a.g;
    check_same_shape(a.val(), b.val(), "sub");
    Tensor out = a.val();
    const double* bv = b.val().data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ia = a.id, ib = b.id, io = o.id;
        g.set_back(io, [ia, ib, io](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            if (auto* da = gr.maybe_grad(ia)) axpy(*da, dc);
            if (auto* db = gr.maybe_grad(ib)) axpy(*db, dc, -1.0);
        });
    }
    return o;
}

Var mul(Var a, Var b) {
    Graph& g = *a.g;
    check_same_shape(a.val(), b.val(), "mul");
    Tensor out = a.val();
    const double* bv = b.val().data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ia = a.id, ib = b.id, io = o.id;
        g.set_back(io, [ia, ib, io](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            const Tensor& av = gr.val(ia);
            const Tensor& bv2 = gr.val(ib);
            if (auto* da = gr.maybe_grad(ia))
                for (int64_t i = 0; i < dc.numel(); ++i) (*da)[i] += dc[i] * bv2[i];
            if (auto* db = gr.maybe_grad(ib))
                for (int64_t i = 0; i < dc.numel(); ++i) (*db)[i] += dc[i] * av[i];
        });
    }
    return o;
}

Var scale(Var a, double s) {
    Graph& g = *a.g;
    Tensor out = a.val();
    for (auto& x : out.values()) x *= s;
    bool ng = g.needs_grad(a.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ia = a.id, io = o.id;
        g.set_back(io, [ia, io, s](Graph& gr) {
            if (auto* da = gr.maybe_grad(ia)) axpy(*da, gr.grad(io), s);
        });
    }
    return o;
}

Var add_bias(Var x, Var b) {
    Graph& g = *x.g;
    const Tensor& xv = x.val();
    const Tensor& bv = b.val();
    if (xv.rank() < 1 || bv.rank() != 1 || xv.dim(xv.rank() - 1) != bv.dim(0))
        throw ShapeError("add_bias: shape mismatch");
    const int m = bv.dim(0);
    const int64_t rows = xv.numel() / m;
    Tensor out = xv;
    for (int64_t i = 0; i < rows; ++i)
        for (int j = 0; j < m; ++j) out[i * m + j] += bv[j];
    bool ng = g.needs_grad(x.id) || g.needs_grad(b.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ix = x.id, ib = b.id, io = o.id;
        g.set_back(io, [ix, ib, io, rows, m](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            if (auto* dx = gr.maybe_grad(ix)) axpy(*dx, dc);
            if (auto* db = gr.maybe_grad(ib))
                for (int64_t i = 0; i < rows; ++i)
                    for (int j = 0; j < m; ++j) (*db)[j] += dc[i * m + j];
        });
    }
    return o;
}

Var relu(Var x) {
    Graph& g = *x.g;
    Tensor out = x.val();
    for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
    bool ng = g.needs_grad(x.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ix = x.id, io = o.id;
        g.set_back(io, [ix, io](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            const Tensor& xv = gr.val(ix);
            if (auto* dx = gr.maybe_grad(ix))
                for (int64_t i = 0; i < dc.numel(); ++i)
                    if (xv[i] > 0.0) (*dx)[i] += dc[i];
        });
    }
    return o;
}

Var sigmoid(Var x) {
    Graph& g = *x.g;
    Tensor out = x.val();
    for (auto& v : out.values()) {
        if (v >= 0.0) {
            v = 1.0 / (1.0 + std::exp(-v));
        } else {
            double e = std::exp(v);
            v = e / (1.0 + e);
        }
    }
    bool ng = g.needs_grad(x.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ix = x.id, io = o.id;
        g.set_back(io, [ix, io](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            const Tensor& y = gr.val(io);
            if (auto* dx = gr.maybe_grad(ix))
                for (int64_t i = 0; i < dc.numel(); ++i)
                    (*dx)[i] += dc[i] * y[i] * (1.0 - y[i]);
        });
    }
    return o;
}

Var reshape(Var x, std::vector<int> shape) {
    Graph& g = *x.g;
    Tensor out = x.val().reshaped(std::move(shape));
    bool ng = g.needs_grad(x.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ix = x.id, io = o.id;
        g.set_back(io, [ix, io](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            if (auto* dx = gr.maybe_grad(ix)) {
                double* d = dx->data();
                const double* s = dc.data();
                for (int64_t i = 0; i < dc.numel(); ++i) d[i] += s[i];
            }
        });
    }
    return o;
}

Var concat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat_rows: empty input");
    Graph& g = *xs[0].g;
    const int m = xs[0].val().rank() == 1 ? xs[0].val().dim(0) : xs[0].val().dim(1);
    int total = 0;
    bool ng = false;
    for (const Var& x : xs) {
        const Tensor& t = x.val();
        int rows = t.rank() == 1 ? 1 : t.dim(0);
        int cols = t.rank() == 1 ? t.dim(0) : t.dim(1);
        if (cols != m) throw ShapeError("concat_rows: column mismatch");
        total += rows;
        ng = ng || g.needs_grad(x.id);
    }
    Tensor out({total, m});
    int at = 0;
    for (const Var& x : xs) {
        const Tensor& t = x.val();
        std::copy(t.data(), t.data() + t.numel(), out.data() + static_cast<int64_t>(at) * m);
        at += t.rank() == 1 ? 1 : t.dim(0);
    }
    Var o = g.make(std::move(out), ng);
    if (ng) {
        std::vector<int> ids;
        std::vector<int> row_counts;
        for (const Var& x : xs) {
            ids.push_back(x.id);
            row_counts.push_back(x.val().rank() == 1 ? 1 : x.val().dim(0));
        }
        int io = o.id;
        g.set_back(io, [ids, row_counts, io, m](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            int64_t at2 = 0;
            for (size_t i = 0; i < ids.size(); ++i) {
                int64_t n = static_cast<int64_t>(row_counts[i]) * m;
                if (auto* dx = gr.maybe_grad(ids[i])) {
                    double* d = dx->data();
                    const double* s = dc.data() + at2 * m;
                    for (int64_t j = 0; j < n; ++j) d[j] += s[j];
                }
                at2 += row_counts[i];
            }
        });
    }
    return o;
}

Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat_cols: empty input");
    Graph& g = *xs[0].g;
    const int n = xs[0].val().dim(0);
    int total = 0;
    bool ng = false;
    for (const Var& x : xs) {
        if (x.val().rank() != 2 || x.val().dim(0) != n)
            throw ShapeError("concat_cols: row mismatch");
        total += x.val().dim(1);
        ng = ng || g.needs_grad(x.id);
    }
    Tensor out({n, total});
    int at = 0;
    for (const Var& x : xs) {
        const Tensor& t = x.val();
        const int m = t.dim(1);
        for (int i = 0; i < n; ++i)
            std::copy(t.data() + static_cast<int64_t>(i) * m,
                      t.data() + static_cast<int64_t>(i + 1) * m,
                      out.data() + static_cast<int64_t>(i) * total + at);
        at += m;
    }
    Var o = g.make(std::move(out), ng);
    if (ng) {
        std::vector<int> ids, widths;
        for (const Var& x : xs) {
            ids.push_back(x.id);
            widths.push_back(x.val().dim(1));
        }
        int io = o.id;
        g.set_back(io, [ids, widths, io, n, total](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            int at2 = 0;
            for (size_t s = 0; s < ids.size(); ++s) {
                const int m = widths[s];
                if (auto* dx = gr.maybe_grad(ids[s]))
                    for (int i = 0; i < n; ++i) {
                        const double* src = dc.data() + static_cast<int64_t>(i) * total + at2;
                        double* dst = dx->data() + static_cast<int64_t>(i) * m;
                        for (int j = 0; j < m; ++j) dst[j] += src[j];
                    }
                at2 += m;
            }
        });
    }
    return o;
}

Var slice_rows(Var x, int start, int count) {
    Graph& g = *x.g;
    const Tensor& xv = x.val();
    if (xv.rank() != 2 || start < 0 || start + count > xv.dim(0))
        throw ShapeError("slice_rows: bad range");
    const int m = xv.dim(1);
    Tensor out({count, m});
    std::copy(xv.data() + static_cast<int64_t>(start) * m,
              xv.data() + static_cast<int64_t>(start + count) * m, out.data());
    bool ng = g.needs_grad(x.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ix = x.id, io = o.id;
        g.set_back(io, [ix, io, start, count, m](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            if (auto* dx = gr.maybe_grad(ix)) {
                double* d = dx->data() + static_cast<int64_t>(start) * m;
                const double* s = dc.data();
                for (int64_t i = 0; i < static_cast<int64_t>(count) * m; ++i) d[i] += s[i];
            }
        });
    }
    return o;
}

Var mean_axis0(Var x) {
    Graph& g = *x.g;
    const Tensor& xv = x.val();
    if (xv.rank() != 2) throw ShapeError("mean_axis0: rank-2 input required");
    const int n = xv.dim(0), m = xv.dim(1);
    Tensor out({m});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out[j] += xv[static_cast<int64_t>(i) * m + j];
    for (int j = 0; j < m; ++j) out[j] /= n;
    bool ng = g.needs_grad(x.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ix = x.id, io = o.id;
        g.set_back(io, [ix, io, n, m](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            if (auto* dx = gr.maybe_grad(ix))
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < m; ++j)
                        (*dx)[static_cast<int64_t>(i) * m + j] += dc[j] / n;
        });
    }
    return o;
}

Var sum_all(Var x) {
    Graph& g = *x.g;
    double s = 0.0;
    for (double v : x.val().values()) s += v;
    bool ng = g.needs_grad(x.id);
    Var o = g.make(Tensor::scalar(s), ng);
    if (ng) {
        int ix = x.id, io = o.id;
        g.set_back(io, [ix, io](Graph& gr) {
            double d = gr.grad(io)[0];
            if (auto* dx = gr.maybe_grad(ix))
                for (auto& v : dx->values()) v += d;
        });
    }
    return o;
}

Var mean_all(Var x) {
    int64_t n = x.val().numel();
    return scale(sum_all(x), 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// linear algebra

namespace {
struct MmDims {
    int n, k, m;
};

MmDims mm_dims(const Tensor& a, const Tensor& b, bool ta, bool tb, const char* op) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError(std::string(op) + ": rank-2 required");
    int n = ta ? a.dim(1) : a.dim(0);
    int k = ta ? a.dim(0) : a.dim(1);
    int kb = tb ? b.dim(1) : b.dim(0);
    int m = tb ? b.dim(0) : b.dim(1);
    if (k != kb) throw ShapeError(std::string(op) + ": inner dimension mismatch");
    return {n, k, m};
}

// gradient of C = op(A) op(B) into raw buffers
void matmul_backward(const double* a, const double* b, const double* dc, double* da,
                     double* db, int n, int k, int m, bool ta, bool tb) {
    if (da) {
        // dA' = dC * B'^T, transposed back into storage layout when ta
        if (!ta)
            gemm_acc(dc, b, da, n, m, k, false, !tb);
        else
            gemm_acc(b, dc, da, k, m, n, tb, true);
    }
    if (db) {
        // dB' = A'^T * dC
        if (!tb)
            gemm_acc(a, dc, db, k, n, m, !ta, false);
        else
            gemm_acc(dc, a, db, m, n, k, true, ta);
    }
}
}  // namespace

Var matmul(Var a, Var b, bool trans_a, bool trans_b) {
    Graph& g = *a.g;
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    MmDims d = mm_dims(av, bv, trans_a, trans_b, "matmul");
    Tensor out({d.n, d.m});
    gemm_acc(av.data(), bv.data(), out.data(), d.n, d.k, d.m, trans_a, trans_b);
    bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ia = a.id, ib = b.id, io = o.id;
        g.set_back(io, [ia, ib, io, d, trans_a, trans_b](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            Tensor* da = gr.maybe_grad(ia);
            Tensor* db = gr.maybe_grad(ib);
            matmul_backward(gr.val(ia).data(), gr.val(ib).data(), dc.data(),
                            da ? da->data() : nullptr, db ? db->data() : nullptr, d.n, d.k,
                            d.m, trans_a, trans_b);
        });
    }
    return o;
}

Var bmm(Var a, Var b, bool trans_a, bool trans_b) {
    Graph& g = *a.g;
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0))
        throw ShapeError("bmm: rank-3 with equal batch required");
    const int batch = av.dim(0);
    int an = av.dim(1), ak = av.dim(2), bn = bv.dim(1), bk = bv.dim(2);
    int n = trans_a ? ak : an;
    int k = trans_a ? an : ak;
    int kb = trans_b ? bk : bn;
    int m = trans_b ? bn : bk;
    if (k != kb) throw ShapeError("bmm: inner dimension mismatch");
    Tensor out({batch, n, m});
    const int64_t sa = static_cast<int64_t>(an) * ak, sb = static_cast<int64_t>(bn) * bk;
    const int64_t so = static_cast<int64_t>(n) * m;
    for (int t = 0; t < batch; ++t)
        gemm_acc(av.data() + t * sa, bv.data() + t * sb, out.data() + t * so, n, k, m,
                 trans_a, trans_b);
    bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ia = a.id, ib = b.id, io = o.id;
        g.set_back(io, [ia, ib, io, batch, n, k, m, sa, sb, so, trans_a, trans_b](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            Tensor* da = gr.maybe_grad(ia);
            Tensor* db = gr.maybe_grad(ib);
            for (int t = 0; t < batch; ++t)
                matmul_backward(gr.val(ia).data() + t * sa, gr.val(ib).data() + t * sb,
                                dc.data() + t * so, da ? da->data() + t * sa : nullptr,
                                db ? db->data() + t * sb : nullptr, n, k, m, trans_a,
                                trans_b);
        });
    }
    return o;
}

Var linear(Var x, Param& w, Param& b, Graph& g) {
    return add_bias(matmul(x, g.param(w)), g.param(b));
}

Var bmm_causal_scores(Var q, Var k) {
    Graph& g = *q.g;
    const Tensor& qv = q.val();
    const Tensor& kv = k.val();
    if (qv.rank() != 3 || !qv.same_shape(kv))
        throw ShapeError("bmm_causal_scores: [B,L,dh] pair required");
    const int B = qv.dim(0), L = qv.dim(1), dh = qv.dim(2);
    Tensor out({B, L, L});
    for (int t = 0; t < B; ++t)
        for (int i = 0; i < L; ++i) {
            const double* qi = qv.data() + (static_cast<int64_t>(t) * L + i) * dh;
            double* oi = out.data() + (static_cast<int64_t>(t) * L + i) * L;
            for (int j = 0; j <= i; ++j) {
                const double* kj = kv.data() + (static_cast<int64_t>(t) * L + j) * dh;
                double s = 0.0;
                for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
                oi[j] = s;
            }
        }
    bool ng = g.needs_grad(q.id) || g.needs_grad(k.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int iq = q.id, ik = k.id, io = o.id;
        g.set_back(io, [iq, ik, io, B, L, dh](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            const Tensor& qv2 = gr.val(iq);
            const Tensor& kv2 = gr.val(ik);
            Tensor* dq = gr.maybe_grad(iq);
            Tensor* dk = gr.maybe_grad(ik);
            for (int t = 0; t < B; ++t)
                for (int i = 0; i < L; ++i) {
                    const double* dci = dc.data() + (static_cast<int64_t>(t) * L + i) * L;
                    for (int j = 0; j <= i; ++j) {
                        double d = dci[j];
                        if (d == 0.0) continue;
                        const double* qi =
                            qv2.data() + (static_cast<int64_t>(t) * L + i) * dh;
                        const double* kj =
                            kv2.data() + (static_cast<int64_t>(t) * L + j) * dh;
                        if (dq) {
                            double* dqi = dq->data() + (static_cast<int64_t>(t) * L + i) * dh;
                            for (int c = 0; c < dh; ++c) dqi[c] += d * kj[c];
                        }
                        if (dk) {
                            double* dkj = dk->data() + (static_cast<int64_t>(t) * L + j) * dh;
                            for (int c = 0; c < dh; ++c) dkj[c] += d * qi[c];
                        }
                    }
                }
        });
    }
    return o;
}

Var bmm_causal_apply(Var p, Var v) {
    Graph& g = *p.g;
    const Tensor& pv = p.val();
    const Tensor& vv = v.val();
    if (pv.rank() != 3 || vv.rank() != 3 || pv.dim(0) != vv.dim(0) ||
        pv.dim(1) != pv.dim(2) || pv.dim(2) != vv.dim(1))
        throw ShapeError("bmm_causal_apply: [B,L,L] x [B,L,dh] required");
    const int B = pv.dim(0), L = pv.dim(1), dh = vv.dim(2);
    Tensor out({B, L, dh});
    for (int t = 0; t < B; ++t)
        for (int i = 0; i < L; ++i) {
            double* oi = out.data() + (static_cast<int64_t>(t) * L + i) * dh;
            const double* pi = pv.data() + (static_cast<int64_t>(t) * L + i) * L;
            for (int j = 0; j <= i; ++j) {
                const double* vj = vv.data() + (static_cast<int64_t>(t) * L + j) * dh;
                const double pj = pi[j];
                for (int c = 0; c < dh; ++c) oi[c] += pj * vj[c];
            }
        }
    bool ng = g.needs_grad(p.id) || g.needs_grad(v.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ip = p.id, iv = v.id, io = o.id;
        g.set_back(io, [ip, iv, io, B, L, dh](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            const Tensor& pv2 = gr.val(ip);
            const Tensor& vv2 = gr.val(iv);
            Tensor* dp = gr.maybe_grad(ip);
            Tensor* dv = gr.maybe_grad(iv);
            for (int t = 0; t < B; ++t)
                for (int i = 0; i < L; ++i) {
                    const double* dci = dc.data() + (static_cast<int64_t>(t) * L + i) * dh;
                    const double* pi = pv2.data() + (static_cast<int64_t>(t) * L + i) * L;
                    double* dpi =
                        dp ? dp->data() + (static_cast<int64_t>(t) * L + i) * L : nullptr;
                    for (int j = 0; j <= i; ++j) {
                        const double* vj =
                            vv2.data() + (static_cast<int64_t>(t) * L + j) * dh;
                        if (dpi) {
                            double s = 0.0;
                            for (int c = 0; c < dh; ++c) s += dci[c] * vj[c];
                            dpi[j] += s;
                        }
                        if (dv) {
                            double* dvj =
                                dv->data() + (static_cast<int64_t>(t) * L + j) * dh;
                            const double pj = pi[j];
                            for (int c = 0; c < dh; ++c) dvj[c] += pj * dci[c];
                        }
                    }
                }
        });
    }
    return o;
}

// ---------------------------------------------------------------------------
// attention pieces

Var split_heads(Var x, int heads) {
    Graph& g = *x.g;
    const Tensor& xv = x.val();
    if (xv.rank() != 2 || xv.dim(1) % heads != 0) throw ShapeError("split_heads: bad shape");
    const int L = xv.dim(0), d = xv.dim(1), dh = d / heads;
    Tensor out({heads, L, dh});
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < dh; ++j)
                out[(static_cast<int64_t>(h) * L + i) * dh + j] =
                    xv[static_cast<int64_t>(i) * d + h * dh + j];
    bool ng = g.needs_grad(x.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ix = x.id, io = o.id;
        g.set_back(io, [ix, io, heads, L, d, dh](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            if (auto* dx = gr.maybe_grad(ix))
                for (int h = 0; h < heads; ++h)
                    for (int i = 0; i < L; ++i)
                        for (int j = 0; j < dh; ++j)
                            (*dx)[static_cast<int64_t>(i) * d + h * dh + j] +=
                                dc[(static_cast<int64_t>(h) * L + i) * dh + j];
        });
    }
    return o;
}

Var merge_heads(Var x) {
    Graph& g = *x.g;
    const Tensor& xv = x.val();
    if (xv.rank() != 3) throw ShapeError("merge_heads: rank-3 required");
    const int heads = xv.dim(0), L = xv.dim(1), dh = xv.dim(2), d = heads * dh;
    Tensor out({L, d});
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < dh; ++j)
                out[static_cast<int64_t>(i) * d + h * dh + j] =
                    xv[(static_cast<int64_t>(h) * L + i) * dh + j];
    bool ng = g.needs_grad(x.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ix = x.id, io = o.id;
        g.set_back(io, [ix, io, heads, L, d, dh](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            if (auto* dx = gr.maybe_grad(ix))
                for (int h = 0; h < heads; ++h)
                    for (int i = 0; i < L; ++i)
                        for (int j = 0; j < dh; ++j)
                            (*dx)[(static_cast<int64_t>(h) * L + i) * dh + j] +=
                                dc[static_cast<int64_t>(i) * d + h * dh + j];
        });
    }
    return o;
}

namespace {

void softmax_row_backward(const double* y, const double* dy, double* dx, int /*m*/,
                          int valid) {
    double dot = 0.0;
    for (int j = 0; j < valid; ++j) dot += y[j] * dy[j];
    for (int j = 0; j < valid; ++j) dx[j] += y[j] * (dy[j] - dot);
}
}  // namespace

Var softmax_rows(Var x) {
    Graph& g = *x.g;
    const Tensor& xv = x.val();
    if (xv.rank() < 1) throw ShapeError("softmax_rows: empty");
    const int m = xv.dim(xv.rank() - 1);
    const int64_t rows = xv.numel() / m;
    Tensor out(xv.shape());
    for (int64_t i = 0; i < rows; ++i)
        softmax_span(xv.data() + i * m, out.data() + i * m, m, m);
    bool ng = g.needs_grad(x.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ix = x.id, io = o.id;
        g.set_back(io, [ix, io, rows, m](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            const Tensor& y = gr.val(io);
            if (auto* dx = gr.maybe_grad(ix))
                for (int64_t i = 0; i < rows; ++i)
                    softmax_row_backward(y.data() + i * m, dc.data() + i * m,
                                         dx->data() + i * m, m, m);
        });
    }
    return o;
}

Var softmax_causal(Var x) {
    Graph& g = *x.g;
    const Tensor& xv = x.val();
    if (xv.rank() != 3 || xv.dim(1) != xv.dim(2))
        throw ShapeError("softmax_causal: [B,L,L] required");
    const int B = xv.dim(0), L = xv.dim(1);
    Tensor out(xv.shape());
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < L; ++i) {
            int64_t off = (static_cast<int64_t>(b) * L + i) * L;
            softmax_span(xv.data() + off, out.data() + off, L, i + 1);
        }
    bool ng = g.needs_grad(x.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ix = x.id, io = o.id;
        g.set_back(io, [ix, io, B, L](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            const Tensor& y = gr.val(io);
            if (auto* dx = gr.maybe_grad(ix))
                for (int b = 0; b < B; ++b)
                    for (int i = 0; i < L; ++i) {
                        int64_t off = (static_cast<int64_t>(b) * L + i) * L;
                        softmax_row_backward(y.data() + off, dc.data() + off,
                                             dx->data() + off, L, i + 1);
                    }
        });
    }
    return o;
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    Graph& g = *x.g;
    const Tensor& xv = x.val();
    const int d = xv.dim(xv.rank() - 1);
    if (gain.val().numel() != d || bias.val().numel() != d)
        throw ShapeError("layer_norm: gain/bias mismatch");
    const int64_t rows = xv.numel() / d;
    Tensor out(xv.shape());
    Tensor xhat(xv.shape());
    Tensor inv_sd({static_cast<int>(rows)});
    const double* gv = gain.val().data();
    const double* bv = bias.val().data();
    for (int64_t i = 0; i < rows; ++i) {
        const double* xi = xv.data() + i * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += xi[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= d;
        double isd = 1.0 / std::sqrt(var + eps);
        inv_sd[i] = isd;
        for (int j = 0; j < d; ++j) {
            double xh = (xi[j] - mu) * isd;
            xhat[i * d + j] = xh;
            out[i * d + j] = gv[j] * xh + bv[j];
        }
    }
    bool ng = g.needs_grad(x.id) || g.needs_grad(gain.id) || g.needs_grad(bias.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int ix = x.id, ig = gain.id, ib = bias.id, io = o.id;
        auto xh = std::make_shared<Tensor>(std::move(xhat));
        auto isd_t = std::make_shared<Tensor>(std::move(inv_sd));
        g.set_back(io, [ix, ig, ib, io, rows, d, xh, isd_t](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            const Tensor& gv2 = gr.val(ig);
            Tensor* dx = gr.maybe_grad(ix);
            Tensor* dg = gr.maybe_grad(ig);
            Tensor* db = gr.maybe_grad(ib);
            for (int64_t i = 0; i < rows; ++i) {
                const double* dci = dc.data() + i * d;
                const double* xhi = xh->data() + i * d;
                if (dg)
                    for (int j = 0; j < d; ++j) (*dg)[j] += dci[j] * xhi[j];
                if (db)
                    for (int j = 0; j < d; ++j) (*db)[j] += dci[j];
                if (dx) {
                    double isd = (*isd_t)[i];
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (int j = 0; j < d; ++j) {
                        double dxh = dci[j] * gv2[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhi[j];
                    }
                    for (int j = 0; j < d; ++j) {
                        double dxh = dci[j] * gv2[j];
                        (*dx)[i * d + j] +=
                            isd * (dxh - sum_dxh / d - xhi[j] * sum_dxh_xh / d);
                    }
                }
            }
        });
    }
    return o;
}

Var embedding(Var table, const std::vector<int>& ids) {
    Graph& g = *table.g;
    const Tensor& tv = table.val();
    if (tv.rank() != 2) throw ShapeError("embedding: table must be [V,d]");
    const int V = tv.dim(0), d = tv.dim(1);
    Tensor out({static_cast<int>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= V) throw ValidationError("embedding: index out of range");
        std::copy(tv.data() + static_cast<int64_t>(ids[i]) * d,
                  tv.data() + static_cast<int64_t>(ids[i] + 1) * d,
                  out.data() + static_cast<int64_t>(i) * d);
    }
    bool ng = g.needs_grad(table.id);
    Var o = g.make(std::move(out), ng);
    if (ng) {
        int it = table.id, io = o.id;
        g.set_back(io, [it, io, ids, d](Graph& gr) {
            const Tensor& dc = gr.grad(io);
            if (auto* dt = gr.maybe_grad(it))
                for (size_t i = 0; i < ids.size(); ++i) {
                    double* dst = dt->data() + static_cast<int64_t>(ids[i]) * d;
                    const double* src = dc.data() + static_cast<int64_t>(i) * d;
                    for (int j = 0; j < d; ++j) dst[j] += src[j];
                }
        });
    }
    return o;
}

// ---------------------------------------------------------------------------
// losses

namespace {
int64_t mask_count(const Tensor& mask, int64_t fallback) {
    if (mask.numel() == 0) return fallback;
    double c = 0.0;
    for (double v : mask.values()) c += v;
    return std::max<int64_t>(1, static_cast<int64_t>(c));
}
}  // namespace

Var mse(Var pred, const Tensor& target, const Tensor& mask) {
    Graph& g = *pred.g;
    const Tensor& pv = pred.val();
    check_same_shape(pv, target, "mse");
    if (mask.numel() != 0) check_same_shape(pv, mask, "mse mask");
    const int64_t cnt = mask_count(mask, pv.numel());
    double s = 0.0;
    for (int64_t i = 0; i < pv.numel(); ++i) {
        double m = mask.numel() ? mask[i] : 1.0;
        double d = pv[i] - target[i];
        s += m * d * d;
    }
    bool ng = g.needs_grad(pred.id);
    Var o = g.make(Tensor::scalar(s / static_cast<double>(cnt)), ng);
    if (ng) {
        int ip = pred.id, io = o.id;
        auto tgt = std::make_shared<Tensor>(target);
        auto msk = std::make_shared<Tensor>(mask);
        g.set_back(io, [ip, io, tgt, msk, cnt](Graph& gr) {
            double d0 = gr.grad(io)[0];
            const Tensor& pv2 = gr.val(ip);
            if (auto* dp = gr.maybe_grad(ip))
                for (int64_t i = 0; i < pv2.numel(); ++i) {
                    double m = msk->numel() ? (*msk)[i] : 1.0;
                    (*dp)[i] += d0 * 2.0 * m * (pv2[i] - (*tgt)[i]) / static_cast<double>(cnt);
                }
        });
    }
    return o;
}

Var smooth_l1(Var pred, const Tensor& target, const Tensor& mask) {
    Graph& g = *pred.g;
    const Tensor& pv = pred.val();
    check_same_shape(pv, target, "smooth_l1");
    if (mask.numel() != 0) check_same_shape(pv, mask, "smooth_l1 mask");
    const int64_t cnt = mask_count(mask, pv.numel());
    double s = 0.0;
    for (int64_t i = 0; i < pv.numel(); ++i) {
        double m = mask.numel() ? mask[i] : 1.0;
        double d = pv[i] - target[i];
        double ad = std::abs(d);
        s += m * (ad < 1.0 ? 0.5 * d * d : ad - 0.5);
    }
    bool ng = g.needs_grad(pred.id);
    Var o = g.make(Tensor::scalar(s / static_cast<double>(cnt)), ng);
    if (ng) {
        int ip = pred.id, io = o.id;
        auto tgt = std::make_shared<Tensor>(target);
        auto msk = std::make_shared<Tensor>(mask);
        g.set_back(io, [ip, io, tgt, msk, cnt](Graph& gr) {
            double d0 = gr.grad(io)[0];
            const Tensor& pv2 = gr.val(ip);
            if (auto* dp = gr.maybe_grad(ip))
                for (int64_t i = 0; i < pv2.numel(); ++i) {
                    double m = msk->numel() ? (*msk)[i] : 1.0;
                    double d = pv2[i] - (*tgt)[i];
                    double e = std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0);
                    (*dp)[i] += d0 * m * e / static_cast<double>(cnt);
                }
        });
    }
    return o;
}

Var binary_cross_entropy(Var pred, const Tensor& target) {
    Graph& g = *pred.g;
    const Tensor& pv = pred.val();
    check_same_shape(pv, target, "binary_cross_entropy");
    const int64_t n = pv.numel();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double p = std::clamp(pv[i], kBceEps, 1.0 - kBceEps);
        s += -(target[i] * std::log(p) + (1.0 - target[i]) * std::log(1.0 - p));
    }
    bool ng = g.needs_grad(pred.id);
    Var o = g.make(Tensor::scalar(s / static_cast<double>(n)), ng);
    if (ng) {
        int ip = pred.id, io = o.id;
        auto tgt = std::make_shared<Tensor>(target);
        g.set_back(io, [ip, io, tgt, n](Graph& gr) {
            double d0 = gr.grad(io)[0];
            const Tensor& pv2 = gr.val(ip);
            if (auto* dp = gr.maybe_grad(ip))
                for (int64_t i = 0; i < n; ++i) {
                    double p = std::clamp(pv2[i], kBceEps, 1.0 - kBceEps);
                    (*dp)[i] += d0 * (-(*tgt)[i] / p + (1.0 - (*tgt)[i]) / (1.0 - p)) /
                                static_cast<double>(n);
                }
        });
    }
    return o;
}

Var cross_entropy(Var logits, const std::vector<int>& targets, int ignore_id) {
    Graph& g = *logits.g;
    const Tensor& lv = logits.val();
    if (lv.rank() != 2 || lv.dim(0) != static_cast<int>(targets.size()))
        throw ShapeError("cross_entropy: logits [n,V] with n targets required");
    const int n = lv.dim(0), V = lv.dim(1);
    auto probs = std::make_shared<Tensor>(lv.shape());
    int valid = 0;
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        softmax_span(lv.data() + static_cast<int64_t>(i) * V,
                    probs->data() + static_cast<int64_t>(i) * V, V, V);
        if (targets[i] == ignore_id) continue;
        if (targets[i] < 0 || targets[i] >= V)
            throw ValidationError("cross_entropy: target index out of range");
        ++valid;
        double p = (*probs)[static_cast<int64_t>(i) * V + targets[i]];
        s += -std::log(std::max(p, 1e-300));
    }
    if (valid == 0) throw ValidationError("cross_entropy: no valid targets");
    bool ng = g.needs_grad(logits.id);
    Var o = g.make(Tensor::scalar(s / valid), ng);
    if (ng) {
        int il = logits.id, io = o.id;
        g.set_back(io, [il, io, probs, targets, ignore_id, n, V, valid](Graph& gr) {
            double d0 = gr.grad(io)[0];
            if (auto* dl = gr.maybe_grad(il))
                for (int i = 0; i < n; ++i) {
                    if (targets[i] == ignore_id) continue;
                    const double* pi = probs->data() + static_cast<int64_t>(i) * V;
                    double* di = dl->data() + static_cast<int64_t>(i) * V;
                    for (int j = 0; j < V; ++j) di[j] += d0 * pi[j] / valid;
                    di[targets[i]] -= d0 / valid;
                }
        });
    }
    return o;
}

Var straight_through(Var y_prime, const Tensor& quantized) {
    Graph& g = *y_prime.g;
    check_same_shape(y_prime.val(), quantized, "straight_through");
    bool ng = g.needs_grad(y_prime.id);
    Var o = g.make(quantized, ng);
    if (ng) {
        int iy = y_prime.id, io = o.id;
        g.set_back(io, [iy, io](Graph& gr) {
            if (auto* dy = gr.maybe_grad(iy)) axpy(*dy, gr.grad(io));
        });
    }
    return o;
}

// ---------------------------------------------------------------------------

double cosine_lr(int64_t step, int64_t total, double base) {
    if (total < 1 || step < 0 || step > total) throw ConfigError("cosine_lr: bad step/total");
    return base * 0.5 * (1.0 + std::cos(3.141592653589793 * static_cast<double>(step) /
                                        static_cast<double>(total)));
}

double check_gradients(const std::function<Var(Graph&, Var)>& f, const Tensor& point,
                       double h) {
    Param p("x", point.shape());
    p.value = point;
    Graph g;
    Var x = g.param(p);
    Var loss = f(g, x);
    g.backward(loss);
    g.apply_param_grads(1.0);

    double max_rel = 0.0;
    Tensor pt = point;
    for (int64_t i = 0; i < pt.numel(); ++i) {
        double orig = pt[i];
        auto eval = [&](double v) {
            pt[i] = v;
            Graph g2;
            Var x2 = g2.leaf(pt);
            return f(g2, x2).val()[0];
        };
        double fd = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
        pt[i] = orig;
        double an = p.grad[i];
        double denom = std::max({std::abs(an), std::abs(fd), 1e-6});
        max_rel = std::max(max_rel, std::abs(an - fd) / denom);
    }
    return max_rel;
}

double check_param_gradients(const std::function<double()>& loss_grad,
                             const std::function<double()>& loss_only,
                             std::span<Param* const> params, Rng& rng, int probes,
                             double h) {
    for (Param* p : params) p->zero_grad();
    loss_grad();

    std::vector<std::pair<Param*, int64_t>> picks;
    std::vector<Param*> trainable;
    for (Param* p : params)
        if (p->requires_grad && p->value.numel() > 0) trainable.push_back(p);
    if (trainable.empty()) return 0.0;
    for (int i = 0; i < probes; ++i) {
        Param* p = trainable[rng.below(trainable.size())];
        picks.emplace_back(p, static_cast<int64_t>(rng.below(p->value.numel())));
    }

    double max_rel = 0.0;
    for (auto& [p, idx] : picks) {
        double orig = p->value[idx];
        p->value[idx] = orig + h;
        double lp = loss_only();
        p->value[idx] = orig - h;
        double lm = loss_only();
        p->value[idx] = orig;
        double fd = (lp - lm) / (2.0 * h);
        double an = p->grad[idx];
        double denom = std::max({std::abs(an), std::abs(fd), 1e-6});
        max_rel = std::max(max_rel, std::abs(an - fd) / denom);
    }
    return max_rel;
}

}  // namespace hpn::nn
