#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bpe.hpp"
#include "chart.hpp"
#include "corpus.hpp"
#include "pdm.hpp"
#include "transformer.hpp"

namespace hpn::mmt {

enum class TaskTag { Caption, Axis, Series, Categorical, Data };

int tag_token(TaskTag tag);

struct MmtConfig {
    int width = 128;
    int layers = 2;  // encoder depth and per-decoder depth
    int heads = 4;
    int d_ff = 256;
    int max_len = 512;     // encoder input cap
    int max_target = 160;  // language target cap
    int chart_types = 5;
    int codebook_size = 256;
    int data_tokens = 28;
    SnippetConfig snippet;  // caption-task context window
    int epochs_stage1 = 20;
    int epochs_stage2 = 20;
    int batch_size = 16;
    double lr = 5e-4;

    // data vocabulary: 0 pad, 1 bos, 2 eos, then chart types, then data tokens
    int data_vocab() const { return 3 + chart_types + codebook_size; }
    int data_type_base() const { return 3; }
    int data_token_base() const { return 3 + chart_types; }
};

struct SamplingConfig {
    double temperature = 0.0;  // 0 = greedy
    uint64_t seed = 0;
    int forced_chart_type = -1;  // constrain the first data id when >= 0
};

// Shared-encoder dual-decoder multitask sequence model. Stage 1 trains the
// encoder + language decoder on the four text tasks; stage 2 freezes them and
// trains the data decoder on chart-type + data-token sequences.
class MultitaskModel {
public:
    MultitaskModel(MmtConfig cfg, Vocabulary vocab, uint64_t seed);

    const MmtConfig& config() const { return cfg_; }
    const Vocabulary& vocab() const { return vocab_; }

    std::vector<double> train_stage1(const std::vector<DocumentChartPair>& corpus,
                                     uint64_t seed);
    // targets come from the trained PDM; only data-decoder parameters move
    std::vector<double> train_stage2(const std::vector<DocumentChartPair>& corpus,
                                     pdm::PlotDataModel& pdm, uint64_t seed);

    std::string generate_text(TaskTag task, const std::string& context,
                              const SamplingConfig& sc = {});
    std::vector<std::string> generate_list(TaskTag task, const std::string& context,
                                           const SamplingConfig& sc = {});
    std::pair<ChartType, std::vector<int>> generate_data_tokens(
        const std::string& caption, const SamplingConfig& sc = {});

    // mean of final encoder hidden states; the KSM embedder (length = width)
    nn::Tensor embed_text(const std::string& text);

    // language-head distribution for the first generated position
    std::vector<double> lang_step_probs(TaskTag task, const std::string& context);

    // losses for explicit id sequences (training + gradient checks)
    nn::Var lang_loss(nn::Graph& g, const std::vector<int>& input_ids,
                      const std::vector<int>& target_ids);
    nn::Var data_loss(nn::Graph& g, const std::vector<int>& input_ids,
                      const std::vector<int>& target_ids);

    std::vector<int> encode_input(TaskTag task, const std::string& text) const;
    std::vector<int> lang_target_ids(const std::string& text) const;

    std::vector<nn::Param*> parameters();
    std::vector<nn::Param*> shared_and_lang_parameters();
    std::vector<nn::Param*> data_parameters();

    bool stage1_done() const { return stage_flags_.value[0] != 0.0; }
    bool stage2_done() const { return stage_flags_.value[1] != 0.0; }
    void set_stage_flags(bool stage1, bool stage2) {
        stage_flags_.value[0] = stage1 ? 1.0 : 0.0;
        stage_flags_.value[1] = stage2 ? 1.0 : 0.0;
    }

    void save(const std::string& path) const;
    void load(const std::string& path);

private:
    nn::Var encode_graph(nn::Graph& g, const std::vector<int>& input_ids);
    nn::Tensor encode_memory(const std::vector<int>& input_ids);  // no-grad
    nn::Var decoder_logits(nn::Graph& g, nn::Var memory, const std::vector<int>& ids,
                           bool data_side);

    struct DecodeState;
    std::vector<int> sample_sequence(const nn::Tensor& memory, bool data_side,
                                     int max_steps, const SamplingConfig& sc);

    MmtConfig cfg_;
    Vocabulary vocab_;

    nn::Param enc_emb_, enc_pos_;
    nn::TransformerStack enc_tf_;
    nn::Param lang_emb_, lang_pos_, lang_head_w_, lang_head_b_;
    nn::TransformerStack lang_tf_;
    nn::Param data_emb_, data_pos_, data_head_w_, data_head_b_;
    nn::TransformerStack data_tf_;
    nn::Param stage_flags_;  // [2]; persisted training-state marker
};

}  // namespace hpn::mmt
