#pragma once

#include <array>
#include <optional>
#include <utility>

#include "chart.hpp"
#include "optim.hpp"
#include "scaling.hpp"
#include "transformer.hpp"

namespace hpn::pdm {

struct PdmConfig {
    int codebook_size = 256;  // K
    int latent_dim = 32;      // d
    int token_count = 28;     // s
    GridLimits grid;          // padded H x W
    double gamma = scaling::kDefaultGamma;
    int layers = 2;
    int heads = 4;
    int d_ff = 128;
    // raster cells emitted per autoregressive step of the data pathway;
    // must divide grid.w_max
    int patch_w = 4;
    double commitment_beta = 0.25;
    double ema_decay = 0.99;
    // training
    int epochs = 30;
    int batch_size = 16;
    double lr = 5e-4;
    double adv_lambda = 0.0;  // generator weight of the adversarial term

    int cells() const { return grid.h_max * grid.w_max; }
    int top_steps() const { return cells() / patch_w; }
    int cond_len() const { return token_count + 1; }  // + chart-type embedding
    void validate() const;
};

// Per-row argmin over squared Euclidean distance; ties break to the lowest
// index. Returns the quantized rows and their codebook indices.
std::pair<nn::Tensor, std::vector<int>> quantize(const nn::Tensor& y_prime,
                                                 const nn::Tensor& codebook);

struct EncoderOutput {
    nn::Tensor pre_quant;   // [s, d]
    nn::Tensor quantized;   // [s, d]
    std::vector<int> tokens;
};

struct DecoderOutput {
    nn::Tensor hidden_top;     // [H, W, d]
    nn::Tensor hidden_bottom;  // [H, d]
    nn::Tensor recon_norm;     // [H, W, D], sigmoid range
    nn::Tensor recon_scale;    // [H, 2D] (box [H, 2]), ReLU range
    nn::Tensor col_probs;      // [W]
    nn::Tensor row_probs;      // [H]
};

struct LossBreakdown {
    double total = 0, data_mse = 0, scale_l1 = 0, bce_cols = 0, bce_rows = 0,
           codebook = 0, commitment = 0, adversarial = 0;
    void accumulate(const LossBreakdown& o, double w);
};

struct EpochStats {
    LossBreakdown mean;
    int codebook_used = 0;
    double disc_accuracy = -1.0;  // adversarial runs only
};

// Chart-type conditioned multi-head encoder trunk: per-type heads over the
// normalized data and scale pathways, positional embeddings, strided
// downsample to `s` latent vectors, then a transformer encoder.
class MultiHeadEncoder {
public:
    MultiHeadEncoder() = default;
    MultiHeadEncoder(const std::string& prefix, const PdmConfig& cfg, Rng& rng);

    // returns y' [s, d]
    nn::Var forward(nn::Graph& g, const scaling::NormalizedTensor& xn,
                    const scaling::ScaleParams& t, ChartType type);
    // graph-input variant: data as [cells, D], scale rows padded to [H, width]
    nn::Var forward_flat(nn::Graph& g, nn::Var data_flat, nn::Var scale_padded,
                         ChartType type);

    void collect(std::vector<nn::Param*>& out);

private:
    PdmConfig cfg_;
    std::array<nn::Param, 5> data_w_, data_b_;    // D -> d per chart type
    std::array<nn::Param, 5> scale_w_, scale_b_;  // (2D|2) -> d per chart type
    nn::Param pos_top_, pos_bottom_;
    nn::Param down_w_, down_b_;  // strided conv as [stride*d, d]
    nn::TransformerStack tf_;
    int stride_ = 0;
};

class PlotDataModel {
public:
    PlotDataModel(PdmConfig cfg, uint64_t seed);

    const PdmConfig& config() const { return cfg_; }

    EncoderOutput encode(const scaling::NormalizedTensor& xn,
                         const scaling::ScaleParams& t, ChartType type);
    // Two-pass sampling: a raw pass picks a provisional shape, then the final
    // pass zeroes the feedback outside that region, matching the zero padding
    // the teacher-forced training inputs carry.
    DecoderOutput decode(const std::vector<int>& tokens, ChartType type);
    // single autoregressive pass; `region` (h, w), when given, masks feedback
    DecoderOutput decode_single_pass(const std::vector<int>& tokens, ChartType type,
                                     const std::pair<int, int>* region = nullptr);
    // teacher-forced decoder pass on explicit shifted inputs; used to verify
    // that the incremental decode path agrees with the training graph
    DecoderOutput decode_teacher_forced(const std::vector<int>& tokens, ChartType type,
                                        const nn::Tensor& teacher_top,
                                        const nn::Tensor& teacher_bottom);

    // leading run of probabilities > 0.5, floor 1
    static std::pair<int, int> predict_shape(const nn::Tensor& col_probs,
                                             const nn::Tensor& row_probs);
    static nn::Tensor shape_targets(int true_count, int padded);

    // full pipeline: normalize -> encode -> (type index, tokens) and back
    std::pair<int, std::vector<int>> data_to_tokens(const ChartRecord& chart);
    ChartTensor tokens_to_data(ChartType type, const std::vector<int>& tokens);

    // Teacher-forced loss graph for one chart (used by training and the
    // finite-difference check). When `frozen` is given, the quantization
    // assignment is pinned to it and the decoder input becomes the smooth
    // straight-through surrogate q0 + (y' - y'0), which is the function the
    // reverse-mode gradient actually differentiates.
    nn::Var build_loss(nn::Graph& g, const ChartRecord& chart, LossBreakdown* bd,
                       EncoderOutput* eo, const EncoderOutput* frozen = nullptr);

    std::vector<EpochStats> train(const std::vector<ChartRecord>& charts, uint64_t seed);
    std::vector<EpochStats> train_adversarial(const std::vector<ChartRecord>& charts,
                                              uint64_t seed);

    std::vector<nn::Param*> parameters();  // includes the codebook buffers
    std::vector<nn::Param*> trainable_parameters();

    void save(const std::string& path) const;
    void load(const std::string& path);

    // distinct codebook entries used across a corpus
    int codebook_usage(const std::vector<ChartRecord>& charts);

    const nn::Tensor& codebook() const { return codebook_.value; }
    nn::Tensor& codebook_for_test() { return codebook_.value; }

    bool trained() const { return trained_flag_.value[0] != 0.0; }
    void set_trained(bool t) { trained_flag_.value[0] = t ? 1.0 : 0.0; }

private:
    friend class DataClassifier;

    struct TeacherInputs {
        nn::Tensor top;     // [top_steps, patch_w * D]
        nn::Tensor bottom;  // [H, scale_width]
    };
    TeacherInputs teacher_inputs(const scaling::NormalizedTensor& xn,
                                 const nn::Tensor& t_padded, ChartType type) const;

    // shared decoder trunk on an explicit input sequence (teacher or sampled)
    struct DecodeVars {
        nn::Var recon_norm, recon_scale, col_probs, row_probs, hidden_top, hidden_bottom;
    };
    DecodeVars decode_graph(nn::Graph& g, nn::Var quantized, ChartType type,
                            const TeacherInputs& inputs);

    struct ForwardArtifacts {
        nn::Var total;  // reconstruction terms + weighted commitment
        DecodeVars dec;
        EncoderOutput eo;
        LossBreakdown bd;
        nn::Tensor t_pad;
        scaling::NormalizedTensor xn;
    };
    ForwardArtifacts forward_training(nn::Graph& g, const ChartRecord& chart,
                                      const EncoderOutput* frozen = nullptr);

    nn::Tensor pad_scale_rows(const scaling::ScaleParams& sp, ChartType type) const;

    void ema_update(const std::vector<std::pair<std::vector<int>, nn::Tensor>>& batch);
    void reseed_dead_entries(const std::vector<char>& used_this_epoch,
                             const nn::Tensor& sample_pool, Rng& rng);

    std::vector<EpochStats> train_impl(const std::vector<ChartRecord>& charts,
                                       uint64_t seed, bool adversarial);

    PdmConfig cfg_;
    MultiHeadEncoder encoder_;
    nn::Param codebook_;          // [K, d], EMA-updated, not gradient-trained
    nn::Param ema_cluster_size_;  // [K]
    nn::Param ema_embed_avg_;     // [K, d]
    nn::Param trained_flag_;      // [1]; persisted so loads restore the state

    nn::Param type_emb_;  // [5, d]
    // top pathway
    nn::Param top_up_w_, top_up_b_;  // d -> up_k * d
    nn::Param top_pos_, top_start_;
    std::array<nn::Param, 5> top_in_w_, top_in_b_;    // patch_w*D -> d
    std::vector<nn::Param> top_expand_w_, top_expand_b_;  // per in-patch offset, d -> d
    std::array<nn::Param, 5> top_out_w_, top_out_b_;  // d -> D
    nn::Param col_w_, col_b_;
    nn::TransformerStack top_tf_;
    // bottom pathway
    nn::Param bottom_mix_;  // [H, s+1]
    nn::Param bottom_pos_, bottom_start_;
    std::array<nn::Param, 5> bottom_in_w_, bottom_in_b_;   // (2D|2) -> d
    std::array<nn::Param, 5> bottom_out_w_, bottom_out_b_;  // d -> (2D|2)
    nn::Param row_w_, row_b_;
    nn::TransformerStack bottom_tf_;

    int top_up_k_ = 0;
};

// Multi-head-encoder-backed binary classifier: trunk -> mean pool -> 32-unit
// penultimate layer -> scalar probability. Doubles as the VQGAN discriminator
// and the FID feature extractor.
class DataClassifier {
public:
    DataClassifier(PdmConfig cfg, uint64_t seed);

    nn::Var logit(nn::Graph& g, const scaling::NormalizedTensor& xn,
                  const scaling::ScaleParams& t, ChartType type);
    // graph-input variant used when the generator's reconstruction must stay
    // differentiable through the discriminator
    nn::Var logit_flat(nn::Graph& g, nn::Var data_flat, nn::Var scale_padded,
                       ChartType type);

    double prob_real(const ChartRecord& chart);
    nn::Tensor features(const ChartRecord& chart);  // penultimate, length 32

    std::vector<nn::Param*> parameters();
    const PdmConfig& config() const { return cfg_; }

    void save(const std::string& path) const;
    void load(const std::string& path);

private:
    PdmConfig cfg_;
    MultiHeadEncoder encoder_;
    nn::Param feat_w_, feat_b_;  // d -> 32
    nn::Param out_w_, out_b_;    // 32 -> 1
};

}  // namespace hpn::pdm
