#include "pdm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>

#include "checkpoint.hpp"
#include "json.hpp"

namespace hpn::pdm {

using nn::Graph;
using nn::Param;
using nn::Tensor;
using nn::Var;

void PdmConfig::validate() const {
    if (codebook_size < 2 || latent_dim < 1 || token_count < 1)
        throw ConfigError("pdm: bad bottleneck sizes");
    if (grid.h_max < 1 || grid.w_max < 1) throw ConfigError("pdm: bad grid");
    if (patch_w < 1 || grid.w_max % patch_w != 0)
        throw ConfigError("pdm: patch_w must divide w_max");
    if (latent_dim % heads != 0) throw ConfigError("pdm: latent_dim % heads != 0");
}

std::pair<Tensor, std::vector<int>> quantize(const Tensor& y_prime, const Tensor& codebook) {
    if (y_prime.rank() != 2 || codebook.rank() != 2 || y_prime.dim(1) != codebook.dim(1))
        throw ShapeError("quantize: dimensionality mismatch");
    const int s = y_prime.dim(0), d = y_prime.dim(1), K = codebook.dim(0);
    Tensor q(y_prime.shape());
    std::vector<int> tokens(static_cast<size_t>(s));
    for (int i = 0; i < s; ++i) {
        const double* yi = y_prime.data() + static_cast<int64_t>(i) * d;
        int best = 0;
        double best_d = 0.0;
        for (int k = 0; k < K; ++k) {
            const double* ek = codebook.data() + static_cast<int64_t>(k) * d;
            double dist = 0.0;
            for (int t = 0; t < d; ++t) {
                double diff = yi[t] - ek[t];
                dist += diff * diff;
            }
            if (k == 0 || dist < best_d) {  // ties keep the lowest index
                best_d = dist;
                best = k;
            }
        }
        tokens[static_cast<size_t>(i)] = best;
        std::copy(codebook.data() + static_cast<int64_t>(best) * d,
                  codebook.data() + static_cast<int64_t>(best + 1) * d,
                  q.data() + static_cast<int64_t>(i) * d);
    }
    return {std::move(q), std::move(tokens)};
}

void LossBreakdown::accumulate(const LossBreakdown& o, double w) {
    total += w * o.total;
    data_mse += w * o.data_mse;
    scale_l1 += w * o.scale_l1;
    bce_cols += w * o.bce_cols;
    bce_rows += w * o.bce_rows;
    codebook += w * o.codebook;
    commitment += w * o.commitment;
    adversarial += w * o.adversarial;
}

namespace {

Tensor pad_rows_tensor(const Tensor& t, int rows) {
    Tensor out({rows, t.dim(1)});
    std::copy(t.data(), t.data() + t.numel(), out.data());
    return out;
}

int ceil_div(int a, int b) { return (a + b - 1) / b; }

Var pad_rows_var(Graph& g, Var x, int target) {
    const int n = x.val().dim(0);
    if (n == target) return x;
    Tensor zeros({target - n, x.val().dim(1)});
    return nn::concat_rows({x, g.leaf(std::move(zeros))});
}

double raw_sigmoid(double v) {
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

}  // namespace

// ---------------------------------------------------------------------------
// MultiHeadEncoder

MultiHeadEncoder::MultiHeadEncoder(const std::string& prefix, const PdmConfig& cfg,
                                   Rng& rng)
    : cfg_(cfg) {
    const int d = cfg.latent_dim;
    for (int t = 0; t < 5; ++t) {
        ChartType type = ChartType::from_index(t);
        std::string n = std::string(type.name());
        data_w_[t] = Param(prefix + ".data_head." + n + ".w", {type.feature_count(), d});
        nn::init_xavier(data_w_[t], rng);
        data_b_[t] = Param(prefix + ".data_head." + n + ".b", {d});
        scale_w_[t] =
            Param(prefix + ".scale_head." + n + ".w", {scaling::scale_width(type), d});
        nn::init_xavier(scale_w_[t], rng);
        scale_b_[t] = Param(prefix + ".scale_head." + n + ".b", {d});
    }
    pos_top_ = Param(prefix + ".pos_top", {cfg.cells(), d});
    nn::init_uniform(pos_top_, rng, 0.05);
    pos_bottom_ = Param(prefix + ".pos_bottom", {cfg.grid.h_max, d});
    nn::init_uniform(pos_bottom_, rng, 0.05);
    const int s_total = cfg.cells() + cfg.grid.h_max;
    stride_ = ceil_div(s_total, cfg.token_count);
    down_w_ = Param(prefix + ".down.w", {stride_ * d, d});
    nn::init_xavier(down_w_, rng);
    down_b_ = Param(prefix + ".down.b", {d});
    tf_ = nn::TransformerStack(prefix + ".tf", cfg.layers, d, cfg.heads, cfg.d_ff,
                               /*causal=*/false, /*cross=*/false, rng);
}

Var MultiHeadEncoder::forward_flat(Graph& g, Var data_flat, Var scale_padded,
                                   ChartType type) {
    const int d = cfg_.latent_dim;
    const int ti = type.index();
    if (data_flat.val().dim(0) != cfg_.cells() ||
        data_flat.val().dim(1) != type.feature_count())
        throw ShapeError("encoder: data shape does not match grid");
    if (scale_padded.val().dim(0) != cfg_.grid.h_max ||
        scale_padded.val().dim(1) != scaling::scale_width(type))
        throw ShapeError("encoder: scale shape mismatch");

    Var top = nn::add(nn::linear(data_flat, data_w_[ti], data_b_[ti], g), g.param(pos_top_));
    Var bottom = nn::add(nn::linear(scale_padded, scale_w_[ti], scale_b_[ti], g),
                         g.param(pos_bottom_));
    Var y = nn::concat_rows({top, bottom});  // [S, d]
    y = pad_rows_var(g, y, cfg_.token_count * stride_);
    y = nn::reshape(y, {cfg_.token_count, stride_ * d});
    y = nn::linear(y, down_w_, down_b_, g);  // strided 1-D conv
    return tf_.forward(g, y);
}

Var MultiHeadEncoder::forward(Graph& g, const scaling::NormalizedTensor& xn,
                              const scaling::ScaleParams& t, ChartType type) {
    Var data_flat = g.leaf(xn.values.reshaped({cfg_.cells(), type.feature_count()}));
    Var scale_padded = g.leaf(pad_rows_tensor(t.t, cfg_.grid.h_max));
    return forward_flat(g, data_flat, scale_padded, type);
}

void MultiHeadEncoder::collect(std::vector<Param*>& out) {
    for (int t = 0; t < 5; ++t) {
        out.push_back(&data_w_[t]);
        out.push_back(&data_b_[t]);
        out.push_back(&scale_w_[t]);
        out.push_back(&scale_b_[t]);
    }
    out.push_back(&pos_top_);
    out.push_back(&pos_bottom_);
    out.push_back(&down_w_);
    out.push_back(&down_b_);
    tf_.collect(out);
}

// ---------------------------------------------------------------------------
// PlotDataModel

PlotDataModel::PlotDataModel(PdmConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x9d70));
    const int d = cfg_.latent_dim;
    encoder_ = MultiHeadEncoder("enc", cfg_, rng);

    codebook_ = Param("codebook", {cfg_.codebook_size, d});
    nn::init_uniform(codebook_, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    codebook_.requires_grad = false;  // EMA-updated
    ema_cluster_size_ = Param("codebook.cluster_size", {cfg_.codebook_size});
    ema_cluster_size_.value.fill(1.0);
    ema_cluster_size_.requires_grad = false;
    ema_embed_avg_ = Param("codebook.embed_avg", {cfg_.codebook_size, d});
    ema_embed_avg_.value = codebook_.value;
    ema_embed_avg_.requires_grad = false;
    trained_flag_ = Param("trained_flag", {1});
    trained_flag_.requires_grad = false;

    type_emb_ = Param("dec.type_emb", {5, d});
    nn::init_uniform(type_emb_, rng, 0.05);

    const int T = cfg_.top_steps();
    top_up_k_ = ceil_div(T, cfg_.cond_len());
    top_up_w_ = Param("dec.top.up.w", {d, top_up_k_ * d});
    nn::init_xavier(top_up_w_, rng);
    top_up_b_ = Param("dec.top.up.b", {top_up_k_ * d});
    top_pos_ = Param("dec.top.pos", {T, d});
    nn::init_uniform(top_pos_, rng, 0.05);
    top_start_ = Param("dec.top.start", {1, d});
    nn::init_uniform(top_start_, rng, 0.05);
    for (int t = 0; t < 5; ++t) {
        ChartType type = ChartType::from_index(t);
        std::string n = std::string(type.name());
        top_in_w_[t] =
            Param("dec.top.in_head." + n + ".w", {cfg_.patch_w * type.feature_count(), d});
        nn::init_xavier(top_in_w_[t], rng);
        top_in_b_[t] = Param("dec.top.in_head." + n + ".b", {d});
        top_out_w_[t] = Param("dec.top.out_head." + n + ".w", {d, type.feature_count()});
        nn::init_xavier(top_out_w_[t], rng);
        for (auto& v : top_out_w_[t].value.values()) v *= 0.25;
        top_out_b_[t] = Param("dec.top.out_head." + n + ".b", {type.feature_count()});
    }
    for (int o = 0; o < cfg_.patch_w; ++o) {
        top_expand_w_.emplace_back("dec.top.expand" + std::to_string(o) + ".w",
                                   std::vector<int>{d, d});
        nn::init_xavier(top_expand_w_.back(), rng);
        top_expand_b_.emplace_back("dec.top.expand" + std::to_string(o) + ".b",
                                   std::vector<int>{d});
    }
    col_w_ = Param("dec.top.col.w", {d, 1});
    nn::init_xavier(col_w_, rng);
    col_b_ = Param("dec.top.col.b", {1});
    top_tf_ = nn::TransformerStack("dec.top.tf", cfg_.layers, d, cfg_.heads, cfg_.d_ff,
                                   /*causal=*/true, /*cross=*/false, rng);

    bottom_mix_ = Param("dec.bottom.mix", {cfg_.grid.h_max, cfg_.cond_len()});
    nn::init_xavier(bottom_mix_, rng);
    bottom_pos_ = Param("dec.bottom.pos", {cfg_.grid.h_max, d});
    nn::init_uniform(bottom_pos_, rng, 0.05);
    bottom_start_ = Param("dec.bottom.start", {1, d});
    nn::init_uniform(bottom_start_, rng, 0.05);
    for (int t = 0; t < 5; ++t) {
        ChartType type = ChartType::from_index(t);
        std::string n = std::string(type.name());
        const int width = scaling::scale_width(type);
        bottom_in_w_[t] = Param("dec.bottom.in_head." + n + ".w", {width, d});
        nn::init_xavier(bottom_in_w_[t], rng);
        bottom_in_b_[t] = Param("dec.bottom.in_head." + n + ".b", {d});
        bottom_out_w_[t] = Param("dec.bottom.out_head." + n + ".w", {d, width});
        nn::init_xavier(bottom_out_w_[t], rng);
        for (auto& v : bottom_out_w_[t].value.values()) v *= 0.25;
        bottom_out_b_[t] = Param("dec.bottom.out_head." + n + ".b", {width});
        // scale targets are nonnegative; a positive bias keeps the ReLU head
        // alive at the start of training
        bottom_out_b_[t].value.fill(0.5);
    }
    row_w_ = Param("dec.bottom.row.w", {d, 1});
    nn::init_xavier(row_w_, rng);
    row_b_ = Param("dec.bottom.row.b", {1});
    bottom_tf_ = nn::TransformerStack("dec.bottom.tf", cfg_.layers, d, cfg_.heads,
                                      cfg_.d_ff, /*causal=*/true, /*cross=*/false, rng);
}

Tensor PlotDataModel::pad_scale_rows(const scaling::ScaleParams& sp, ChartType type) const {
    if (sp.t.dim(1) != scaling::scale_width(type))
        throw ShapeError("pdm: scale params width mismatch");
    return pad_rows_tensor(sp.t, cfg_.grid.h_max);
}

PlotDataModel::TeacherInputs PlotDataModel::teacher_inputs(
    const scaling::NormalizedTensor& xn, const Tensor& t_padded, ChartType type) const {
    const int D = type.feature_count();
    const int T = cfg_.top_steps();
    const int patch_vals = cfg_.patch_w * D;
    TeacherInputs out;
    out.top = Tensor({T, patch_vals});
    // step p is fed the ground-truth values of patch p-1 (zeros for p=0)
    for (int p = 1; p < T; ++p) {
        const int64_t src = static_cast<int64_t>(p - 1) * patch_vals;
        for (int v = 0; v < patch_vals; ++v)
            out.top[static_cast<int64_t>(p) * patch_vals + v] = xn.values[src + v];
    }
    const int H = cfg_.grid.h_max, width = t_padded.dim(1);
    out.bottom = Tensor({H, width});
    for (int r = 1; r < H; ++r)
        for (int c = 0; c < width; ++c) out.bottom.at(r, c) = t_padded.at(r - 1, c);
    return out;
}

PlotDataModel::DecodeVars PlotDataModel::decode_graph(Graph& g, Var quantized,
                                                      ChartType type,
                                                      const TeacherInputs& inputs) {
    const int d = cfg_.latent_dim;
    const int ti = type.index();
    const int T = cfg_.top_steps();
    const int H = cfg_.grid.h_max, W = cfg_.grid.w_max;

    Var type_row = nn::embedding(g.param(type_emb_), {ti});
    Var cond = nn::concat_rows({quantized, type_row});  // [s+1, d]

    // top pathway
    Var up = nn::linear(cond, top_up_w_, top_up_b_, g);
    up = nn::reshape(up, {cfg_.cond_len() * top_up_k_, d});
    Var cond_top = nn::slice_rows(up, 0, T);

    Var in_top = nn::linear(g.leaf(inputs.top), top_in_w_[ti], top_in_b_[ti], g);
    Var start_mat = nn::concat_rows({g.param(top_start_), g.leaf(Tensor({T - 1, d}))});
    Var x = nn::add(nn::add(nn::add(in_top, cond_top), g.param(top_pos_)), start_mat);
    Var h_seq = top_tf_.forward(g, x);  // [T, d]

    std::vector<Var> offsets;
    offsets.reserve(static_cast<size_t>(cfg_.patch_w));
    for (int o = 0; o < cfg_.patch_w; ++o)
        offsets.push_back(nn::linear(h_seq, top_expand_w_[static_cast<size_t>(o)],
                                     top_expand_b_[static_cast<size_t>(o)], g));
    // interleave the per-offset rows back into raster order
    Var h_top = nn::reshape(nn::concat_cols(offsets), {cfg_.cells(), d});

    Var recon_norm = nn::sigmoid(nn::linear(h_top, top_out_w_[ti], top_out_b_[ti], g));
    Var pooled = nn::reshape(nn::mean_axis0(nn::reshape(h_top, {H, W * d})), {W, d});
    Var col_probs = nn::reshape(nn::sigmoid(nn::linear(pooled, col_w_, col_b_, g)), {W});

    // bottom pathway
    Var cond_bottom = nn::matmul(g.param(bottom_mix_), cond);  // [H, d]
    Var in_bottom = nn::linear(g.leaf(inputs.bottom), bottom_in_w_[ti], bottom_in_b_[ti], g);
    Var bstart = nn::concat_rows({g.param(bottom_start_), g.leaf(Tensor({H - 1, d}))});
    Var xb = nn::add(nn::add(nn::add(in_bottom, cond_bottom), g.param(bottom_pos_)), bstart);
    Var h_bottom = bottom_tf_.forward(g, xb);  // [H, d]

    Var recon_scale =
        nn::relu(nn::linear(h_bottom, bottom_out_w_[ti], bottom_out_b_[ti], g));
    Var row_probs = nn::reshape(nn::sigmoid(nn::linear(h_bottom, row_w_, row_b_, g)), {H});

    return {recon_norm, recon_scale, col_probs, row_probs, h_top, h_bottom};
}

Tensor PlotDataModel::shape_targets(int true_count, int padded) {
    Tensor t({padded});
    for (int i = 0; i < true_count && i < padded; ++i) t[i] = 1.0;
    return t;
}

PlotDataModel::ForwardArtifacts PlotDataModel::forward_training(
    Graph& g, const ChartRecord& chart, const EncoderOutput* frozen) {
    const ChartType type = chart.type;
    ForwardArtifacts art;
    auto [xn, sp] = scaling::normalize(chart.data, type, cfg_.gamma);
    art.xn = std::move(xn);
    art.t_pad = pad_scale_rows(sp, type);

    Var y_prime = encoder_.forward(g, art.xn, sp, type);
    Tensor q;
    std::vector<int> tokens;
    Var quantized;
    if (frozen) {
        q = frozen->quantized;
        tokens = frozen->tokens;
        // smooth surrogate: q0 + (y' - y'0); equals q0 at the freeze point
        Tensor shift = q;
        for (int64_t i = 0; i < shift.numel(); ++i) shift[i] -= frozen->pre_quant[i];
        quantized = nn::add(y_prime, g.leaf(std::move(shift)));
    } else {
        auto qt = quantize(y_prime.val(), codebook_.value);
        q = std::move(qt.first);
        tokens = std::move(qt.second);
        quantized = nn::straight_through(y_prime, q);
    }

    // squared distance summed over d, averaged over the s rows
    Var commit = nn::scale(nn::mse(y_prime, q), static_cast<double>(cfg_.latent_dim));

    TeacherInputs inputs = teacher_inputs(art.xn, art.t_pad, type);
    art.dec = decode_graph(g, quantized, type, inputs);

    const int D = type.feature_count();
    Tensor data_mask(art.xn.values.shape());
    for (int i = 0; i < art.xn.h; ++i)
        for (int j = 0; j < art.xn.w; ++j)
            for (int k = 0; k < D; ++k)
                data_mask[(static_cast<int64_t>(i) * cfg_.grid.w_max + j) * D + k] = 1.0;
    Var data_loss =
        nn::mse(nn::reshape(art.dec.recon_norm, art.xn.values.shape()), art.xn.values,
                data_mask);

    Tensor scale_mask(art.t_pad.shape());
    for (int i = 0; i < art.xn.h; ++i)
        for (int c = 0; c < art.t_pad.dim(1); ++c) scale_mask.at(i, c) = 1.0;
    Var scale_loss = nn::smooth_l1(art.dec.recon_scale, art.t_pad, scale_mask);

    Var col_loss =
        nn::binary_cross_entropy(art.dec.col_probs, shape_targets(art.xn.w, cfg_.grid.w_max));
    Var row_loss =
        nn::binary_cross_entropy(art.dec.row_probs, shape_targets(art.xn.h, cfg_.grid.h_max));

    Var total = nn::add(nn::add(data_loss, scale_loss), nn::add(col_loss, row_loss));
    total = nn::add(total, nn::scale(commit, cfg_.commitment_beta));

    art.bd.data_mse = data_loss.val()[0];
    art.bd.scale_l1 = scale_loss.val()[0];
    art.bd.bce_cols = col_loss.val()[0];
    art.bd.bce_rows = row_loss.val()[0];
    art.bd.codebook = commit.val()[0];  // identical value with stop-gradient swapped
    art.bd.commitment = commit.val()[0];
    art.bd.total = total.val()[0];
    art.eo.pre_quant = y_prime.val();
    art.eo.quantized = std::move(q);
    art.eo.tokens = std::move(tokens);
    art.total = total;
    return art;
}

Var PlotDataModel::build_loss(Graph& g, const ChartRecord& chart, LossBreakdown* bd,
                              EncoderOutput* eo, const EncoderOutput* frozen) {
    ForwardArtifacts art = forward_training(g, chart, frozen);
    if (bd) *bd = art.bd;
    if (eo) *eo = art.eo;
    return art.total;
}

EncoderOutput PlotDataModel::encode(const scaling::NormalizedTensor& xn,
                                    const scaling::ScaleParams& t, ChartType type) {
    Graph g;
    Var y_prime = encoder_.forward(g, xn, t, type);
    auto [q, tokens] = quantize(y_prime.val(), codebook_.value);
    return {y_prime.val(), std::move(q), std::move(tokens)};
}

std::pair<int, int> PlotDataModel::predict_shape(const Tensor& col_probs,
                                                 const Tensor& row_probs) {
    auto leading = [](const Tensor& p) {
        int n = 0;
        for (int64_t i = 0; i < p.numel(); ++i) {
            if (p[i] > 0.5)
                ++n;
            else
                break;
        }
        return std::max(1, n);
    };
    return {leading(row_probs), leading(col_probs)};
}

DecoderOutput PlotDataModel::decode(const std::vector<int>& tokens, ChartType type) {
    DecoderOutput first = decode_single_pass(tokens, type, nullptr);
    auto region = predict_shape(first.col_probs, first.row_probs);
    return decode_single_pass(tokens, type, &region);
}

DecoderOutput PlotDataModel::decode_single_pass(const std::vector<int>& tokens,
                                                ChartType type,
                                                const std::pair<int, int>* region) {
    if (static_cast<int>(tokens.size()) != cfg_.token_count)
        throw ValidationError("decode: expected " + std::to_string(cfg_.token_count) +
                              " tokens");
    for (int t : tokens)
        if (t < 0 || t >= cfg_.codebook_size)
            throw ValidationError("decode: token index out of range");

    const int d = cfg_.latent_dim;
    const int ti = type.index();
    const int D = type.feature_count();
    const int T = cfg_.top_steps();
    const int H = cfg_.grid.h_max, W = cfg_.grid.w_max;
    const int width = scaling::scale_width(type);

    Tensor cond({cfg_.cond_len(), d});
    for (int i = 0; i < cfg_.token_count; ++i) {
        const int64_t tok = tokens[static_cast<size_t>(i)];
        std::copy(codebook_.value.data() + tok * d, codebook_.value.data() + (tok + 1) * d,
                  cond.data() + static_cast<int64_t>(i) * d);
    }
    std::copy(type_emb_.value.data() + static_cast<int64_t>(ti) * d,
              type_emb_.value.data() + static_cast<int64_t>(ti + 1) * d,
              cond.data() + static_cast<int64_t>(cfg_.token_count) * d);

    Tensor cond_top_full =
        nn::raw_linear(cond, top_up_w_, top_up_b_).reshaped({cfg_.cond_len() * top_up_k_, d});
    Tensor cond_bottom({H, d});
    nn::gemm_acc(bottom_mix_.value.data(), cond.data(), cond_bottom.data(), H,
                 cfg_.cond_len(), d, false, false);

    DecoderOutput out;
    out.hidden_top = Tensor({H, W, d});
    out.recon_norm = Tensor({H, W, D});
    out.col_probs = Tensor({W});
    out.hidden_bottom = Tensor({H, d});
    out.recon_scale = Tensor({H, width});
    out.row_probs = Tensor({H});

    // top pathway: raster order patch by patch, feeding back its own outputs
    auto cache = top_tf_.make_cache();
    Tensor prev_patch({cfg_.patch_w * D});
    for (int p = 0; p < T; ++p) {
        Tensor x = nn::raw_linear(prev_patch, top_in_w_[ti], top_in_b_[ti]);
        for (int j = 0; j < d; ++j) {
            x[j] += cond_top_full[static_cast<int64_t>(p) * d + j];
            x[j] += top_pos_.value[static_cast<int64_t>(p) * d + j];
            x[j] += p == 0 ? top_start_.value[j] : 0.0;
        }
        Tensor h = top_tf_.step(x, cache);
        for (int o = 0; o < cfg_.patch_w; ++o) {
            Tensor cell = nn::raw_linear(h, top_expand_w_[static_cast<size_t>(o)],
                                         top_expand_b_[static_cast<size_t>(o)]);
            const int64_t raster = static_cast<int64_t>(p) * cfg_.patch_w + o;
            std::copy(cell.data(), cell.data() + d, out.hidden_top.data() + raster * d);
            Tensor feat = nn::raw_linear(cell, top_out_w_[ti], top_out_b_[ti]);
            const int row = static_cast<int>(raster / W), col = static_cast<int>(raster % W);
            const bool outside =
                region && (row >= region->first || col >= region->second);
            for (int k = 0; k < D; ++k) {
                double v = raw_sigmoid(feat[k]);
                out.recon_norm[raster * D + k] = v;
                prev_patch[static_cast<int64_t>(o) * D + k] = outside ? 0.0 : v;
            }
        }
    }
    // column head over row-pooled hidden cells
    for (int j = 0; j < W; ++j) {
        Tensor pooled({d});
        for (int i = 0; i < H; ++i)
            for (int t = 0; t < d; ++t)
                pooled[t] += out.hidden_top[(static_cast<int64_t>(i) * W + j) * d + t];
        for (int t = 0; t < d; ++t) pooled[t] /= H;
        Tensor logit = nn::raw_linear(pooled, col_w_, col_b_);
        out.col_probs[j] = raw_sigmoid(logit[0]);
    }

    // bottom pathway, row by row
    auto bcache = bottom_tf_.make_cache();
    Tensor prev_row({width});
    for (int r = 0; r < H; ++r) {
        Tensor x = nn::raw_linear(prev_row, bottom_in_w_[ti], bottom_in_b_[ti]);
        for (int j = 0; j < d; ++j) {
            x[j] += cond_bottom[static_cast<int64_t>(r) * d + j];
            x[j] += bottom_pos_.value[static_cast<int64_t>(r) * d + j];
            x[j] += r == 0 ? bottom_start_.value[j] : 0.0;
        }
        Tensor h = bottom_tf_.step(x, bcache);
        std::copy(h.data(), h.data() + d,
                  out.hidden_bottom.data() + static_cast<int64_t>(r) * d);
        Tensor srow = nn::raw_linear(h, bottom_out_w_[ti], bottom_out_b_[ti]);
        const bool outside_row = region && r >= region->first;
        for (int c = 0; c < width; ++c) {
            double v = srow[c] > 0.0 ? srow[c] : 0.0;
            out.recon_scale[static_cast<int64_t>(r) * width + c] = v;
            prev_row[c] = outside_row ? 0.0 : v;
        }
        Tensor logit = nn::raw_linear(h, row_w_, row_b_);
        out.row_probs[r] = raw_sigmoid(logit[0]);
    }
    return out;
}

DecoderOutput PlotDataModel::decode_teacher_forced(const std::vector<int>& tokens,
                                                   ChartType type,
                                                   const Tensor& teacher_top,
                                                   const Tensor& teacher_bottom) {
    const int d = cfg_.latent_dim;
    Tensor q({cfg_.token_count, d});
    for (int i = 0; i < cfg_.token_count; ++i) {
        const int64_t tok = tokens[static_cast<size_t>(i)];
        std::copy(codebook_.value.data() + tok * d, codebook_.value.data() + (tok + 1) * d,
                  q.data() + static_cast<int64_t>(i) * d);
    }
    Graph g;
    TeacherInputs inputs{teacher_top, teacher_bottom};
    DecodeVars dec = decode_graph(g, g.leaf(std::move(q)), type, inputs);
    DecoderOutput out;
    const int H = cfg_.grid.h_max, W = cfg_.grid.w_max;
    out.hidden_top = dec.hidden_top.val().reshaped({H, W, d});
    out.hidden_bottom = dec.hidden_bottom.val();
    out.recon_norm = dec.recon_norm.val().reshaped({H, W, type.feature_count()});
    out.recon_scale = dec.recon_scale.val();
    out.col_probs = dec.col_probs.val();
    out.row_probs = dec.row_probs.val();
    return out;
}

std::pair<int, std::vector<int>> PlotDataModel::data_to_tokens(const ChartRecord& chart) {
    if (!trained()) throw DependencyError("pdm: model has not been trained");
    auto [xn, sp] = scaling::normalize(chart.data, chart.type, cfg_.gamma);
    EncoderOutput eo = encode(xn, sp, chart.type);
    return {chart.type.index(), eo.tokens};
}

ChartTensor PlotDataModel::tokens_to_data(ChartType type, const std::vector<int>& tokens) {
    if (!trained()) throw DependencyError("pdm: model has not been trained");
    DecoderOutput dec = decode(tokens, type);
    auto [h, w] = predict_shape(dec.col_probs, dec.row_probs);
    scaling::NormalizedTensor xn;
    xn.values = dec.recon_norm;
    xn.h = h;
    xn.w = w;
    scaling::ScaleParams sp;
    sp.t = dec.recon_scale;
    sp.gamma = cfg_.gamma;
    return scaling::denormalize(xn, sp, type);
}

std::vector<Param*> PlotDataModel::parameters() {
    std::vector<Param*> out = trainable_parameters();
    out.push_back(&codebook_);
    out.push_back(&ema_cluster_size_);
    out.push_back(&ema_embed_avg_);
    out.push_back(&trained_flag_);
    return out;
}

std::vector<Param*> PlotDataModel::trainable_parameters() {
    std::vector<Param*> out;
    encoder_.collect(out);
    out.push_back(&type_emb_);
    out.push_back(&top_up_w_);
    out.push_back(&top_up_b_);
    out.push_back(&top_pos_);
    out.push_back(&top_start_);
    for (int t = 0; t < 5; ++t) {
        out.push_back(&top_in_w_[t]);
        out.push_back(&top_in_b_[t]);
        out.push_back(&top_out_w_[t]);
        out.push_back(&top_out_b_[t]);
    }
    for (auto& p : top_expand_w_) out.push_back(&p);
    for (auto& p : top_expand_b_) out.push_back(&p);
    out.push_back(&col_w_);
    out.push_back(&col_b_);
    top_tf_.collect(out);
    out.push_back(&bottom_mix_);
    out.push_back(&bottom_pos_);
    out.push_back(&bottom_start_);
    for (int t = 0; t < 5; ++t) {
        out.push_back(&bottom_in_w_[t]);
        out.push_back(&bottom_in_b_[t]);
        out.push_back(&bottom_out_w_[t]);
        out.push_back(&bottom_out_b_[t]);
    }
    out.push_back(&row_w_);
    out.push_back(&row_b_);
    bottom_tf_.collect(out);
    return out;
}

void PlotDataModel::ema_update(const std::vector<std::pair<std::vector<int>, Tensor>>& batch) {
    const int K = cfg_.codebook_size, d = cfg_.latent_dim;
    std::vector<double> counts(static_cast<size_t>(K), 0.0);
    Tensor sums({K, d});
    for (const auto& [tokens, y] : batch)
        for (size_t i = 0; i < tokens.size(); ++i) {
            counts[static_cast<size_t>(tokens[i])] += 1.0;
            const double* row = y.data() + static_cast<int64_t>(i) * d;
            double* dst = sums.data() + static_cast<int64_t>(tokens[i]) * d;
            for (int t = 0; t < d; ++t) dst[t] += row[t];
        }
    const double decay = cfg_.ema_decay, eps = 1e-5;
    double total = 0.0;
    for (int k = 0; k < K; ++k) {
        ema_cluster_size_.value[k] = decay * ema_cluster_size_.value[k] +
                                     (1.0 - decay) * counts[static_cast<size_t>(k)];
        total += ema_cluster_size_.value[k];
    }
    for (int64_t i = 0; i < ema_embed_avg_.value.numel(); ++i)
        ema_embed_avg_.value[i] = decay * ema_embed_avg_.value[i] + (1.0 - decay) * sums[i];
    for (int k = 0; k < K; ++k) {
        double smoothed = (ema_cluster_size_.value[k] + eps) / (total + K * eps) * total;
        for (int t = 0; t < d; ++t)
            codebook_.value[static_cast<int64_t>(k) * d + t] =
                ema_embed_avg_.value[static_cast<int64_t>(k) * d + t] / smoothed;
    }
}

void PlotDataModel::reseed_dead_entries(const std::vector<char>& used, const Tensor& pool,
                                        Rng& rng) {
    const int d = cfg_.latent_dim;
    const int rows = pool.numel() > 0 ? pool.dim(0) : 0;
    if (rows == 0) return;
    for (int k = 0; k < cfg_.codebook_size; ++k) {
        if (used[static_cast<size_t>(k)]) continue;
        int pick = static_cast<int>(rng.below(static_cast<uint64_t>(rows)));
        for (int t = 0; t < d; ++t) {
            double v = pool[static_cast<int64_t>(pick) * d + t];
            codebook_.value[static_cast<int64_t>(k) * d + t] = v;
            ema_embed_avg_.value[static_cast<int64_t>(k) * d + t] = v;
        }
        ema_cluster_size_.value[k] = 1.0;
    }
}

std::vector<EpochStats> PlotDataModel::train(const std::vector<ChartRecord>& charts,
                                             uint64_t seed) {
    return train_impl(charts, seed, false);
}

std::vector<EpochStats> PlotDataModel::train_adversarial(
    const std::vector<ChartRecord>& charts, uint64_t seed) {
    return train_impl(charts, seed, true);
}

std::vector<EpochStats> PlotDataModel::train_impl(const std::vector<ChartRecord>& charts,
                                                  uint64_t seed, bool adversarial) {
    if (charts.empty()) throw ValidationError("empty input");
    nn::AdamW opt(trainable_parameters(), {.lr = cfg_.lr, .clip_norm = 1.0});
    Rng rng(mix_seed(seed, 0x77a1));
    const int n = static_cast<int>(charts.size());
    const int batches_per_epoch = ceil_div(n, cfg_.batch_size);
    const int64_t total_steps = static_cast<int64_t>(cfg_.epochs) * batches_per_epoch;
    int64_t global_step = 0;

    // the discriminator trains on its own RNG streams so that lambda=0 keeps
    // the generator trajectory identical to plain training
    std::optional<DataClassifier> disc;
    std::optional<nn::AdamW> disc_opt;
    if (adversarial) {
        disc.emplace(cfg_, mix_seed(seed, 0xd15c));
        disc_opt.emplace(disc->parameters(),
                         nn::AdamW::Config{.lr = cfg_.lr, .clip_norm = 1.0});
    }

    std::vector<EpochStats> stats;
    std::vector<size_t> order(charts.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
        rng.shuffle(order);
        LossBreakdown epoch_mean;
        std::vector<char> used(static_cast<size_t>(cfg_.codebook_size), 0);
        Tensor pool;
        int disc_correct = 0, disc_total = 0;
        for (int b = 0; b < batches_per_epoch; ++b) {
            const int lo = b * cfg_.batch_size;
            const int hi = std::min(n, lo + cfg_.batch_size);
            const int bs = hi - lo;
            opt.zero_grad();
            std::vector<std::pair<std::vector<int>, Tensor>> batch_latents;
            struct FakeSample {
                Tensor data_flat, scale_pad;
                ChartType type;
            };
            std::vector<FakeSample> fakes;
            for (int i = lo; i < hi; ++i) {
                const ChartRecord& chart = charts[order[static_cast<size_t>(i)]];
                Graph g;
                ForwardArtifacts art = forward_training(g, chart);
                Var loss = art.total;
                if (adversarial && cfg_.adv_lambda > 0.0) {
                    // non-saturating generator term: D(reconstruction) -> real
                    Var fake_flat = nn::reshape(
                        art.dec.recon_norm, {cfg_.cells(), chart.type.feature_count()});
                    Var dlogit = disc->logit_flat(g, fake_flat, art.dec.recon_scale,
                                                  chart.type);
                    Var adv =
                        nn::binary_cross_entropy(nn::sigmoid(dlogit), Tensor({1}, {1.0}));
                    art.bd.adversarial = adv.val()[0];
                    art.bd.total += cfg_.adv_lambda * art.bd.adversarial;
                    loss = nn::add(loss, nn::scale(adv, cfg_.adv_lambda));
                }
                g.backward(loss);
                g.apply_param_grads(1.0 / bs);
                epoch_mean.accumulate(art.bd, 1.0 / n);
                for (int tok : art.eo.tokens) used[static_cast<size_t>(tok)] = 1;
                batch_latents.emplace_back(art.eo.tokens, art.eo.pre_quant);
                if (adversarial) {
                    fakes.push_back({art.dec.recon_norm.val().reshaped(
                                         {cfg_.cells(), chart.type.feature_count()}),
                                     art.dec.recon_scale.val(), chart.type});
                }
            }
            opt.set_lr(nn::cosine_lr(global_step, total_steps, cfg_.lr));
            opt.step();
            ema_update(batch_latents);

            if (adversarial) {
                // the generator pass above may have left gradients in the
                // discriminator params; clear before its own update
                disc_opt->zero_grad();
                int disc_samples = 0;
                for (int i = lo; i < hi; ++i) {
                    const ChartRecord& chart = charts[order[static_cast<size_t>(i)]];
                    auto [xn, sp] = scaling::normalize(chart.data, chart.type, cfg_.gamma);
                    Graph g;
                    Var real_logit = disc->logit(g, xn, sp, chart.type);
                    Var real_loss = nn::binary_cross_entropy(nn::sigmoid(real_logit),
                                                             Tensor({1}, {1.0}));
                    const FakeSample& fk = fakes[static_cast<size_t>(i - lo)];
                    Var fake_logit = disc->logit_flat(g, g.leaf(fk.data_flat),
                                                      g.leaf(fk.scale_pad), fk.type);
                    Var fake_loss = nn::binary_cross_entropy(nn::sigmoid(fake_logit),
                                                             Tensor({1}, {0.0}));
                    Var dloss = nn::add(real_loss, fake_loss);
                    g.backward(dloss);
                    g.apply_param_grads(1.0);
                    disc_samples += 2;
                    disc_correct += (real_logit.val()[0] > 0.0 ? 1 : 0) +
                                    (fake_logit.val()[0] < 0.0 ? 1 : 0);
                    disc_total += 2;
                }
                if (disc_samples > 0) {
                    for (Param* p : disc_opt->params()) {
                        double* gp = p->grad.data();
                        for (int64_t t = 0; t < p->grad.numel(); ++t)
                            gp[t] /= disc_samples;
                    }
                    disc_opt->step();
                }
            }
            ++global_step;

            pool = Tensor({bs * cfg_.token_count, cfg_.latent_dim});
            for (int i = 0; i < bs; ++i)
                std::copy(batch_latents[static_cast<size_t>(i)].second.data(),
                          batch_latents[static_cast<size_t>(i)].second.data() +
                              batch_latents[static_cast<size_t>(i)].second.numel(),
                          pool.data() +
                              static_cast<int64_t>(i) * cfg_.token_count * cfg_.latent_dim);
        }
        reseed_dead_entries(used, pool, rng);
        int used_count = 0;
        for (char u : used) used_count += u;
        EpochStats es;
        es.mean = epoch_mean;
        es.codebook_used = used_count;
        if (disc_total > 0)
            es.disc_accuracy = static_cast<double>(disc_correct) / disc_total;
        stats.push_back(es);
    }
    trained_flag_.value[0] = 1.0;
    return stats;
}

int PlotDataModel::codebook_usage(const std::vector<ChartRecord>& charts) {
    std::vector<char> used(static_cast<size_t>(cfg_.codebook_size), 0);
    for (const auto& chart : charts) {
        auto [ti, tokens] = data_to_tokens(chart);
        (void)ti;
        for (int t : tokens) used[static_cast<size_t>(t)] = 1;
    }
    int count = 0;
    for (char u : used) count += u;
    return count;
}

void PlotDataModel::save(const std::string& path) const {
    auto* self = const_cast<PlotDataModel*>(this);
    std::vector<const Param*> params;
    for (Param* p : self->parameters()) params.push_back(p);
    nn::save_checkpoint(path, params);
    nlohmann::ordered_json meta;
    meta["model"] = "pdm";
    meta["codebook_size"] = cfg_.codebook_size;
    meta["latent_dim"] = cfg_.latent_dim;
    meta["token_count"] = cfg_.token_count;
    meta["h_max"] = cfg_.grid.h_max;
    meta["w_max"] = cfg_.grid.w_max;
    meta["gamma"] = cfg_.gamma;
    meta["patch_w"] = cfg_.patch_w;
    meta["chart_types"] = {{"line", 0}, {"scatter", 1}, {"vbar", 2}, {"hbar", 3}, {"box", 4}};
    std::ofstream out(path + ".meta.json");
    if (!out) throw IoError("cannot write " + path + ".meta.json");
    out << meta.dump(2) << '\n';
}

void PlotDataModel::load(const std::string& path) {
    auto store = nn::load_checkpoint(path);
    nn::load_params(store, parameters());
}

// ---------------------------------------------------------------------------
// DataClassifier

DataClassifier::DataClassifier(PdmConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0xc1a5));
    encoder_ = MultiHeadEncoder("clf.enc", cfg_, rng);
    feat_w_ = Param("clf.feat.w", {cfg_.latent_dim, 32});
    nn::init_xavier(feat_w_, rng);
    feat_b_ = Param("clf.feat.b", {32});
    out_w_ = Param("clf.out.w", {32, 1});
    nn::init_xavier(out_w_, rng);
    out_b_ = Param("clf.out.b", {1});
}

Var DataClassifier::logit(Graph& g, const scaling::NormalizedTensor& xn,
                          const scaling::ScaleParams& t, ChartType type) {
    Var latent = encoder_.forward(g, xn, t, type);
    Var pooled = nn::reshape(nn::mean_axis0(latent), {1, cfg_.latent_dim});
    Var feats = nn::relu(nn::linear(pooled, feat_w_, feat_b_, g));
    return nn::reshape(nn::linear(feats, out_w_, out_b_, g), {1});
}

Var DataClassifier::logit_flat(Graph& g, Var data_flat, Var scale_padded, ChartType type) {
    Var latent = encoder_.forward_flat(g, data_flat, scale_padded, type);
    Var pooled = nn::reshape(nn::mean_axis0(latent), {1, cfg_.latent_dim});
    Var feats = nn::relu(nn::linear(pooled, feat_w_, feat_b_, g));
    return nn::reshape(nn::linear(feats, out_w_, out_b_, g), {1});
}

double DataClassifier::prob_real(const ChartRecord& chart) {
    auto [xn, sp] = scaling::normalize(chart.data, chart.type, cfg_.gamma);
    Graph g;
    Var l = logit(g, xn, sp, chart.type);
    return raw_sigmoid(l.val()[0]);
}

Tensor DataClassifier::features(const ChartRecord& chart) {
    auto [xn, sp] = scaling::normalize(chart.data, chart.type, cfg_.gamma);
    Graph g;
    Var latent = encoder_.forward(g, xn, sp, chart.type);
    Var pooled = nn::reshape(nn::mean_axis0(latent), {1, cfg_.latent_dim});
    Var feats = nn::relu(nn::linear(pooled, feat_w_, feat_b_, g));
    return feats.val().reshaped({32});
}

std::vector<Param*> DataClassifier::parameters() {
    std::vector<Param*> out;
    encoder_.collect(out);
    out.push_back(&feat_w_);
    out.push_back(&feat_b_);
    out.push_back(&out_w_);
    out.push_back(&out_b_);
    return out;
}

void DataClassifier::save(const std::string& path) const {
    auto* self = const_cast<DataClassifier*>(this);
    std::vector<const Param*> params;
    for (Param* p : self->parameters()) params.push_back(p);
    nn::save_checkpoint(path, params);
}

void DataClassifier::load(const std::string& path) {
    auto store = nn::load_checkpoint(path);
    nn::load_params(store, parameters());
}

}  // namespace hpn::pdm
