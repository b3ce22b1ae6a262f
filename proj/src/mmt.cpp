#include "mmt.hpp"

#include <algorithm>
#include <cmath>

#include "checkpoint.hpp"
#include "optim.hpp"

namespace hpn::mmt {

using nn::Graph;
using nn::Param;
using nn::Tensor;
using nn::Var;

int tag_token(TaskTag tag) {
    switch (tag) {
        case TaskTag::Caption: return Vocabulary::kTagCaption;
        case TaskTag::Axis: return Vocabulary::kTagAxis;
        case TaskTag::Series: return Vocabulary::kTagSeries;
        case TaskTag::Categorical: return Vocabulary::kTagCategorical;
        case TaskTag::Data: return Vocabulary::kTagData;
    }
    return Vocabulary::kPad;
}

MultitaskModel::MultitaskModel(MmtConfig cfg, Vocabulary vocab, uint64_t seed)
    : cfg_(cfg), vocab_(std::move(vocab)) {
    if (cfg_.width % cfg_.heads != 0) throw ConfigError("mmt: width % heads != 0");
    Rng rng(mix_seed(seed, 0x3117));
    const int d = cfg_.width;
    const int v = vocab_.size();
    const int vd = cfg_.data_vocab();

    enc_emb_ = Param("mmt.enc.emb", {v, d});
    nn::init_uniform(enc_emb_, rng, 0.05);
    enc_pos_ = Param("mmt.enc.pos", {cfg_.max_len, d});
    nn::init_uniform(enc_pos_, rng, 0.05);
    enc_tf_ = nn::TransformerStack("mmt.enc.tf", cfg_.layers, d, cfg_.heads, cfg_.d_ff,
                                   /*causal=*/false, /*cross=*/false, rng);

    lang_emb_ = Param("mmt.lang.emb", {v, d});
    nn::init_uniform(lang_emb_, rng, 0.05);
    lang_pos_ = Param("mmt.lang.pos", {cfg_.max_target, d});
    nn::init_uniform(lang_pos_, rng, 0.05);
    lang_tf_ = nn::TransformerStack("mmt.lang.tf", cfg_.layers, d, cfg_.heads, cfg_.d_ff,
                                    /*causal=*/true, /*cross=*/true, rng);
    lang_head_w_ = Param("mmt.lang.head.w", {d, v});
    nn::init_xavier(lang_head_w_, rng);
    lang_head_b_ = Param("mmt.lang.head.b", {v});

    const int data_len = cfg_.data_tokens + 3;  // bos + type + tokens + eos
    data_emb_ = Param("mmt.data.emb", {vd, d});
    nn::init_uniform(data_emb_, rng, 0.05);
    data_pos_ = Param("mmt.data.pos", {data_len, d});
    nn::init_uniform(data_pos_, rng, 0.05);
    data_tf_ = nn::TransformerStack("mmt.data.tf", cfg_.layers, d, cfg_.heads, cfg_.d_ff,
                                    /*causal=*/true, /*cross=*/true, rng);
    data_head_w_ = Param("mmt.data.head.w", {d, vd});
    nn::init_xavier(data_head_w_, rng);
    data_head_b_ = Param("mmt.data.head.b", {vd});
    stage_flags_ = Param("mmt.stage_flags", {2});
    stage_flags_.requires_grad = false;
}

std::vector<int> MultitaskModel::encode_input(TaskTag task, const std::string& text) const {
    std::vector<int> ids{tag_token(task)};
    std::vector<int> body = vocab_.encode(text);
    for (int id : body) {
        if (static_cast<int>(ids.size()) >= cfg_.max_len) break;
        ids.push_back(id);
    }
    return ids;
}

std::vector<int> MultitaskModel::lang_target_ids(const std::string& text) const {
    std::vector<int> ids{Vocabulary::kBos};
    std::vector<int> body = vocab_.encode(text);
    for (int id : body) {
        if (static_cast<int>(ids.size()) >= cfg_.max_target - 1) break;
        ids.push_back(id);
    }
    ids.push_back(Vocabulary::kEos);
    return ids;
}

Var MultitaskModel::encode_graph(Graph& g, const std::vector<int>& input_ids) {
    if (input_ids.empty()) throw ValidationError("mmt: empty encoder input");
    Var emb = nn::embedding(g.param(enc_emb_), input_ids);
    Var pos = nn::slice_rows(g.param(enc_pos_), 0, static_cast<int>(input_ids.size()));
    return enc_tf_.forward(g, nn::add(emb, pos));
}

Tensor MultitaskModel::encode_memory(const std::vector<int>& input_ids) {
    Graph g;
    return encode_graph(g, input_ids).val();
}

Var MultitaskModel::decoder_logits(Graph& g, Var memory, const std::vector<int>& ids,
                                   bool data_side) {
    Param& emb = data_side ? data_emb_ : lang_emb_;
    Param& pos = data_side ? data_pos_ : lang_pos_;
    Param& hw = data_side ? data_head_w_ : lang_head_w_;
    Param& hb = data_side ? data_head_b_ : lang_head_b_;
    nn::TransformerStack& tf = data_side ? data_tf_ : lang_tf_;
    Var x = nn::add(nn::embedding(g.param(emb), ids),
                    nn::slice_rows(g.param(pos), 0, static_cast<int>(ids.size())));
    Var h = tf.forward(g, x, memory);
    return nn::linear(h, hw, hb, g);
}

Var MultitaskModel::lang_loss(Graph& g, const std::vector<int>& input_ids,
                              const std::vector<int>& target_ids) {
    if (target_ids.size() < 2) throw ValidationError("mmt: target too short");
    Var memory = encode_graph(g, input_ids);
    std::vector<int> dec_in(target_ids.begin(), target_ids.end() - 1);
    std::vector<int> dec_tgt(target_ids.begin() + 1, target_ids.end());
    Var logits = decoder_logits(g, memory, dec_in, /*data_side=*/false);
    return nn::cross_entropy(logits, dec_tgt, Vocabulary::kPad);
}

Var MultitaskModel::data_loss(Graph& g, const std::vector<int>& input_ids,
                              const std::vector<int>& target_ids) {
    if (target_ids.size() < 2) throw ValidationError("mmt: target too short");
    Var memory = encode_graph(g, input_ids);
    std::vector<int> dec_in(target_ids.begin(), target_ids.end() - 1);
    std::vector<int> dec_tgt(target_ids.begin() + 1, target_ids.end());
    Var logits = decoder_logits(g, memory, dec_in, /*data_side=*/true);
    return nn::cross_entropy(logits, dec_tgt, /*ignore_id=*/0);
}

namespace {
std::string task_target(const DocumentChartPair& pair, TaskTag task) {
    switch (task) {
        case TaskTag::Caption: return pair.chart.caption;
        case TaskTag::Axis: return serialize_list(pair.chart.axis_titles);
        case TaskTag::Series: return serialize_list(pair.chart.series_names);
        case TaskTag::Categorical: return serialize_list(pair.chart.categorical_labels);
        case TaskTag::Data: break;
    }
    throw ValidationError("mmt: no text target for the data task");
}
}  // namespace

std::vector<double> MultitaskModel::train_stage1(
    const std::vector<DocumentChartPair>& corpus, uint64_t seed) {
    if (corpus.empty()) throw ValidationError("empty input");
    std::vector<Param*> params = shared_and_lang_parameters();
    nn::AdamW opt(params, {.lr = cfg_.lr, .clip_norm = 1.0});
    Rng rng(mix_seed(seed, 0x57a6e1));
    const int n = static_cast<int>(corpus.size());
    const int batches = (n + cfg_.batch_size - 1) / cfg_.batch_size;
    const int64_t total_steps = static_cast<int64_t>(cfg_.epochs_stage1) * batches;
    int64_t step = 0;

    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    static constexpr TaskTag kLangTasks[4] = {TaskTag::Caption, TaskTag::Axis,
                                              TaskTag::Series, TaskTag::Categorical};
    std::vector<double> epoch_losses;
    for (int epoch = 0; epoch < cfg_.epochs_stage1; ++epoch) {
        rng.shuffle(order);
        double sum = 0.0;
        for (int b = 0; b < batches; ++b) {
            const int lo = b * cfg_.batch_size;
            const int hi = std::min(n, lo + cfg_.batch_size);
            opt.zero_grad();
            for (int i = lo; i < hi; ++i) {
                const DocumentChartPair& pair = corpus[order[static_cast<size_t>(i)]];
                TaskTag task = kLangTasks[rng.below(4)];
                std::string input = task == TaskTag::Caption
                                        ? corpus::extract_snippet(pair, cfg_.snippet,
                                                                  rng.next_u64())
                                        : pair.chart.caption;
                Graph g;
                Var loss = lang_loss(g, encode_input(task, input),
                                     lang_target_ids(task_target(pair, task)));
                g.backward(loss);
                g.apply_param_grads(1.0 / (hi - lo));
                sum += loss.val()[0];
            }
            opt.set_lr(nn::cosine_lr(step, total_steps, cfg_.lr));
            opt.step();
            ++step;
        }
        epoch_losses.push_back(sum / n);
    }
    stage_flags_.value[0] = 1.0;
    return epoch_losses;
}

std::vector<double> MultitaskModel::train_stage2(
    const std::vector<DocumentChartPair>& corpus, pdm::PlotDataModel& pdm,
    uint64_t seed) {
    if (corpus.empty()) throw ValidationError("empty input");

    // precompute data-token targets once; the PDM is frozen during stage 2
    std::vector<std::vector<int>> targets;
    targets.reserve(corpus.size());
    for (const auto& pair : corpus) {
        auto [type_index, tokens] = pdm.data_to_tokens(pair.chart);
        std::vector<int> t{Vocabulary::kBos, cfg_.data_type_base() + type_index};
        for (int tok : tokens) t.push_back(cfg_.data_token_base() + tok);
        t.push_back(Vocabulary::kEos);
        targets.push_back(std::move(t));
    }

    std::vector<Param*> frozen = shared_and_lang_parameters();
    for (Param* p : frozen) p->requires_grad = false;
    std::vector<Param*> params = data_parameters();
    nn::AdamW opt(params, {.lr = cfg_.lr, .clip_norm = 1.0});
    Rng rng(mix_seed(seed, 0x57a6e2));
    const int n = static_cast<int>(corpus.size());
    const int batches = (n + cfg_.batch_size - 1) / cfg_.batch_size;
    const int64_t total_steps = static_cast<int64_t>(cfg_.epochs_stage2) * batches;
    int64_t step = 0;

    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<double> epoch_losses;
    for (int epoch = 0; epoch < cfg_.epochs_stage2; ++epoch) {
        rng.shuffle(order);
        double sum = 0.0;
        for (int b = 0; b < batches; ++b) {
            const int lo = b * cfg_.batch_size;
            const int hi = std::min(n, lo + cfg_.batch_size);
            opt.zero_grad();
            for (int i = lo; i < hi; ++i) {
                const size_t idx = order[static_cast<size_t>(i)];
                const DocumentChartPair& pair = corpus[idx];
                Graph g;
                Var loss = data_loss(
                    g, encode_input(TaskTag::Data, pair.chart.caption), targets[idx]);
                g.backward(loss);
                g.apply_param_grads(1.0 / (hi - lo));
                sum += loss.val()[0];
            }
            opt.set_lr(nn::cosine_lr(step, total_steps, cfg_.lr));
            opt.step();
            ++step;
        }
        epoch_losses.push_back(sum / n);
    }
    for (Param* p : frozen) p->requires_grad = true;
    stage_flags_.value[1] = 1.0;
    return epoch_losses;
}

std::vector<int> MultitaskModel::sample_sequence(const Tensor& memory, bool data_side,
                                                 int max_steps, const SamplingConfig& sc) {
    Param& emb = data_side ? data_emb_ : lang_emb_;
    Param& pos = data_side ? data_pos_ : lang_pos_;
    Param& hw = data_side ? data_head_w_ : lang_head_w_;
    Param& hb = data_side ? data_head_b_ : lang_head_b_;
    nn::TransformerStack& tf = data_side ? data_tf_ : lang_tf_;
    const int d = cfg_.width;
    const int vsize = data_side ? cfg_.data_vocab() : vocab_.size();

    auto cache = tf.make_cache();
    Rng rng(sc.seed);
    std::vector<int> out;
    int prev = Vocabulary::kBos;
    for (int step = 0; step < max_steps; ++step) {
        Tensor x({d});
        const double* erow = emb.value.data() + static_cast<int64_t>(prev) * d;
        const double* prow = pos.value.data() + static_cast<int64_t>(step) * d;
        for (int j = 0; j < d; ++j) x[j] = erow[j] + prow[j];
        Tensor h = tf.step(x, cache, &memory);
        Tensor logits = nn::raw_linear(h, hw, hb);

        // constrain to well-formed continuations
        auto allowed = [&](int id) {
            if (data_side) {
                if (step == 0) {
                    if (sc.forced_chart_type >= 0)
                        return id == cfg_.data_type_base() + sc.forced_chart_type;
                    return id >= cfg_.data_type_base() &&
                           id < cfg_.data_type_base() + cfg_.chart_types;
                }
                if (step <= cfg_.data_tokens)
                    return id >= cfg_.data_token_base() &&
                           id < cfg_.data_token_base() + cfg_.codebook_size;
                return id == Vocabulary::kEos;
            }
            if (id == Vocabulary::kPad || id == Vocabulary::kBos) return false;
            if (id > Vocabulary::kEos && id < Vocabulary::kSpecialCount)
                return id == Vocabulary::kSep;
            return true;
        };
        for (int id = 0; id < vsize; ++id)
            if (!allowed(id)) logits[id] = -1e30;

        int next = 0;
        if (sc.temperature <= 0.0) {
            for (int id = 1; id < vsize; ++id)
                if (logits[id] > logits[next]) next = id;
        } else {
            std::vector<double> probs(static_cast<size_t>(vsize));
            for (int id = 0; id < vsize; ++id) logits[id] /= sc.temperature;
            nn::softmax_span(logits.data(), probs.data(), vsize, vsize);
            double u = rng.next_double();
            double acc = 0.0;
            next = vsize - 1;
            for (int id = 0; id < vsize; ++id) {
                acc += probs[static_cast<size_t>(id)];
                if (u < acc) {
                    next = id;
                    break;
                }
            }
        }
        if (!data_side && next == Vocabulary::kEos) break;
        if (data_side && next == Vocabulary::kEos) break;
        out.push_back(next);
        prev = next;
        if (data_side && static_cast<int>(out.size()) == cfg_.data_tokens + 1) break;
    }
    return out;
}

std::string MultitaskModel::generate_text(TaskTag task, const std::string& context,
                                          const SamplingConfig& sc) {
    if (task == TaskTag::Data)
        throw ValidationError("generate_text: use generate_data_tokens for the data task");
    if (!stage1_done()) throw DependencyError("mmt: stage 1 has not been trained");
    Tensor memory = encode_memory(encode_input(task, context));
    std::vector<int> ids = sample_sequence(memory, /*data_side=*/false,
                                           cfg_.max_target - 1, sc);
    return vocab_.decode(ids);
}

std::vector<std::string> MultitaskModel::generate_list(TaskTag task,
                                                       const std::string& context,
                                                       const SamplingConfig& sc) {
    return deserialize_list(generate_text(task, context, sc));
}

std::pair<ChartType, std::vector<int>> MultitaskModel::generate_data_tokens(
    const std::string& caption, const SamplingConfig& sc) {
    if (!stage2_done()) throw DependencyError("mmt: stage 2 has not been trained");
    Tensor memory = encode_memory(encode_input(TaskTag::Data, caption));
    std::vector<int> ids =
        sample_sequence(memory, /*data_side=*/true, cfg_.data_tokens + 2, sc);
    if (static_cast<int>(ids.size()) != cfg_.data_tokens + 1)
        throw Error("generate_data_tokens: malformed sample");
    ChartType type = ChartType::from_index(ids[0] - cfg_.data_type_base());
    std::vector<int> tokens;
    for (size_t i = 1; i < ids.size(); ++i)
        tokens.push_back(ids[i] - cfg_.data_token_base());
    return {type, std::move(tokens)};
}

Tensor MultitaskModel::embed_text(const std::string& text) {
    std::vector<int> ids = vocab_.encode(text);
    if (ids.empty()) throw ValidationError("embed_text: empty text");
    if (static_cast<int>(ids.size()) > cfg_.max_len)
        ids.resize(static_cast<size_t>(cfg_.max_len));
    Graph g;
    Var h = encode_graph(g, ids);
    Var pooled = nn::mean_axis0(h);
    return pooled.val();
}

std::vector<double> MultitaskModel::lang_step_probs(TaskTag task,
                                                    const std::string& context) {
    Tensor memory = encode_memory(encode_input(task, context));
    auto cache = lang_tf_.make_cache();
    const int d = cfg_.width;
    Tensor x({d});
    for (int j = 0; j < d; ++j)
        x[j] = lang_emb_.value[static_cast<int64_t>(Vocabulary::kBos) * d + j] +
               lang_pos_.value[j];
    Tensor h = lang_tf_.step(x, cache, &memory);
    Tensor logits = nn::raw_linear(h, lang_head_w_, lang_head_b_);
    std::vector<double> probs(static_cast<size_t>(vocab_.size()));
    nn::softmax_span(logits.data(), probs.data(), vocab_.size(), vocab_.size());
    return probs;
}

std::vector<Param*> MultitaskModel::shared_and_lang_parameters() {
    std::vector<Param*> out{&enc_emb_, &enc_pos_};
    enc_tf_.collect(out);
    out.push_back(&lang_emb_);
    out.push_back(&lang_pos_);
    lang_tf_.collect(out);
    out.push_back(&lang_head_w_);
    out.push_back(&lang_head_b_);
    return out;
}

std::vector<Param*> MultitaskModel::data_parameters() {
    std::vector<Param*> out{&data_emb_, &data_pos_};
    data_tf_.collect(out);
    out.push_back(&data_head_w_);
    out.push_back(&data_head_b_);
    return out;
}

std::vector<Param*> MultitaskModel::parameters() {
    std::vector<Param*> out = shared_and_lang_parameters();
    for (Param* p : data_parameters()) out.push_back(p);
    out.push_back(&stage_flags_);
    return out;
}

void MultitaskModel::save(const std::string& path) const {
    auto* self = const_cast<MultitaskModel*>(this);
    std::vector<const Param*> params;
    for (Param* p : self->parameters()) params.push_back(p);
    nn::save_checkpoint(path, params);
}

void MultitaskModel::load(const std::string& path) {
    auto store = nn::load_checkpoint(path);
    nn::load_params(store, parameters());
}

}  // namespace hpn::mmt
