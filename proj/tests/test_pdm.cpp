#include <cmath>
#include <filesystem>

#include "checkpoint.hpp"
#include "doctest.h"
#include "pdm.hpp"
#include "support/synthetic.hpp"

using namespace hpn;
using namespace hpn::pdm;

namespace {

PdmConfig tiny_config() {
    PdmConfig c;
    c.codebook_size = 32;
    c.latent_dim = 16;
    c.token_count = 6;
    c.grid = {4, 8};
    c.layers = 2;
    c.heads = 4;
    c.d_ff = 32;
    c.patch_w = 2;
    c.epochs = 4;
    c.batch_size = 8;
    c.lr = 2e-3;
    return c;
}

std::vector<ChartRecord> tiny_charts(int n, uint64_t seed, const GridLimits& grid) {
    Rng rng(seed);
    std::vector<ChartRecord> out;
    for (int i = 0; i < n; ++i) {
        ChartRecord rec;
        rec.id = "c" + std::to_string(i);
        rec.type = ChartType::from_index(i % 5);
        rec.data = testsupport::random_valid_chart(rec.type, rng, grid, grid.h_max,
                                                   std::min(6, grid.w_max));
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace

TEST_CASE("quantize basics and ties") {
    SUBCASE("toy codebook nearest neighbor") {
        nn::Tensor cb({2, 2}, {0.0, 0.0, 1.0, 1.0});
        nn::Tensor y({1, 2}, {0.9, 0.8});
        auto [q, tokens] = quantize(y, cb);
        CHECK(tokens[0] == 1);
        CHECK(q[0] == 1.0);
    }
    SUBCASE("equidistant row breaks toward index 0") {
        nn::Tensor cb({2, 2}, {0.0, 0.0, 1.0, 1.0});
        nn::Tensor y({1, 2}, {0.5, 0.5});
        auto [q, tokens] = quantize(y, cb);
        CHECK(tokens[0] == 0);
    }
    SUBCASE("duplicate entries tie to the lowest index") {
        nn::Tensor cb({8, 2});
        Rng rng(4);
        for (auto& v : cb.values()) v = rng.uniform(-1, 1);
        for (int t = 0; t < 2; ++t) cb.at(7, t) = cb.at(3, t);
        nn::Tensor y({1, 2}, {cb.at(3, 0) + 0.01, cb.at(3, 1)});
        auto [q, tokens] = quantize(y, cb);
        CHECK(tokens[0] == 3);
    }
    SUBCASE("row equal to an entry has zero error") {
        nn::Tensor cb({8, 3});
        Rng rng(5);
        for (auto& v : cb.values()) v = rng.uniform(-1, 1);
        nn::Tensor y({1, 3}, {cb.at(5, 0), cb.at(5, 1), cb.at(5, 2)});
        auto [q, tokens] = quantize(y, cb);
        CHECK(tokens[0] == 5);
        for (int t = 0; t < 3; ++t) CHECK(q[t] == cb.at(5, t));
    }
}

TEST_CASE("quantize equals exhaustive scan on 1000 random rows") {
    Rng rng(20240229);
    const int K = 256, d = 32;
    nn::Tensor cb({K, d});
    for (auto& v : cb.values()) v = rng.uniform(-1, 1);
    // plant exact duplicates to exercise ties
    for (int t = 0; t < d; ++t) {
        cb.at(100, t) = cb.at(17, t);
        cb.at(200, t) = cb.at(17, t);
    }
    nn::Tensor y({1000, d});
    for (auto& v : y.values()) v = rng.uniform(-1, 1);
    for (int t = 0; t < d; ++t) y.at(999, t) = cb.at(17, t);  // exact hit on the dup

    auto [q, tokens] = quantize(y, cb);
    for (int i = 0; i < 1000; ++i) {
        int best = 0;
        double best_d = 0.0;
        for (int k = 0; k < K; ++k) {
            double dist = 0.0;
            for (int t = 0; t < d; ++t) {
                double diff = y.at(i, t) - cb.at(k, t);
                dist += diff * diff;
            }
            if (k == 0 || dist < best_d) {
                best_d = dist;
                best = k;
            }
        }
        REQUIRE(tokens[static_cast<size_t>(i)] == best);
    }
    CHECK(tokens[999] == 17);
}

TEST_CASE("encode produces 28 tokens in range with default config") {
    PdmConfig cfg;
    cfg.epochs = 1;
    PlotDataModel model(cfg, 11);
    auto corpus = testsupport::synthetic_corpus(3, 5);
    for (const auto& pair : corpus) {
        auto [ti, tokens] = model.data_to_tokens(pair.chart);
        CHECK(ti == pair.chart.type.index());
        CHECK(tokens.size() == 28);
        for (int t : tokens) {
            CHECK(t >= 0);
            CHECK(t < 256);
        }
    }
}

TEST_CASE("chart type index mapping is fixed") {
    CHECK(ChartType(ChartKind::Line).index() == 0);
    CHECK(ChartType(ChartKind::Scatter).index() == 1);
    CHECK(ChartType(ChartKind::VerticalBar).index() == 2);
    CHECK(ChartType(ChartKind::HorizontalBar).index() == 3);
    CHECK(ChartType(ChartKind::Box).index() == 4);
}

TEST_CASE("predict_shape rule") {
    nn::Tensor w({5}, {0.9, 0.8, 0.6, 0.4, 0.1});
    nn::Tensor r({3}, {0.7, 0.2, 0.9});
    auto [h, width] = PlotDataModel::predict_shape(w, r);
    CHECK(width == 3);
    CHECK(h == 1);

    nn::Tensor all_low({4}, {0.4, 0.3, 0.2, 0.1});
    auto [h2, w2] = PlotDataModel::predict_shape(all_low, all_low);
    CHECK(w2 == 1);
    CHECK(h2 == 1);

    nn::Tensor target = PlotDataModel::shape_targets(3, 5);
    CHECK(target.values() == std::vector<double>{1, 1, 1, 0, 0});
}

TEST_CASE("decode respects activation ranges and is deterministic") {
    PdmConfig cfg = tiny_config();
    PlotDataModel model(cfg, 3);
    Rng rng(8);
    for (int it = 0; it < 20; ++it) {
        std::vector<int> tokens;
        for (int i = 0; i < cfg.token_count; ++i)
            tokens.push_back(rng.range_int(0, cfg.codebook_size - 1));
        ChartType type = ChartType::from_index(it % 5);
        DecoderOutput a = model.decode(tokens, type);
        for (double v : a.recon_norm.values()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        for (double v : a.recon_scale.values()) CHECK(v >= 0.0);
        for (double v : a.col_probs.values()) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
        for (double v : a.row_probs.values()) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
        DecoderOutput b = model.decode(tokens, type);
        for (int64_t i = 0; i < a.recon_norm.numel(); ++i)
            REQUIRE(a.recon_norm[i] == b.recon_norm[i]);
        for (int64_t i = 0; i < a.recon_scale.numel(); ++i)
            REQUIRE(a.recon_scale[i] == b.recon_scale[i]);
    }
}

TEST_CASE("incremental decode matches the teacher-forced graph on its own outputs") {
    PdmConfig cfg = tiny_config();
    PlotDataModel model(cfg, 17);
    Rng rng(21);
    std::vector<int> tokens;
    for (int i = 0; i < cfg.token_count; ++i)
        tokens.push_back(rng.range_int(0, cfg.codebook_size - 1));
    const int T = cfg.top_steps();
    const int H = cfg.grid.h_max, W = cfg.grid.w_max;

    for (int ti = 0; ti < 5; ++ti) {
        ChartType type = ChartType::from_index(ti);
        const int D = type.feature_count();
        const int width = scaling::scale_width(type);
        DecoderOutput raw = model.decode_single_pass(tokens, type);

        // teacher inputs = the incremental decoder's own outputs, shifted by
        // one patch (top) / one row (bottom)
        nn::Tensor teacher_top({T, cfg.patch_w * D});
        for (int p = 1; p < T; ++p)
            for (int v = 0; v < cfg.patch_w * D; ++v)
                teacher_top[static_cast<int64_t>(p) * cfg.patch_w * D + v] =
                    raw.recon_norm[static_cast<int64_t>(p - 1) * cfg.patch_w * D + v];
        nn::Tensor teacher_bottom({H, width});
        for (int r = 1; r < H; ++r)
            for (int c = 0; c < width; ++c)
                teacher_bottom.at(r, c) = raw.recon_scale.at(r - 1, c);

        DecoderOutput tf = model.decode_teacher_forced(tokens, type, teacher_top,
                                                       teacher_bottom);
        for (int64_t i = 0; i < raw.recon_norm.numel(); ++i)
            REQUIRE(std::abs(tf.recon_norm[i] - raw.recon_norm[i]) < 1e-9);
        for (int64_t i = 0; i < raw.recon_scale.numel(); ++i)
            REQUIRE(std::abs(tf.recon_scale[i] - raw.recon_scale[i]) < 1e-9);
        for (int j = 0; j < W; ++j)
            REQUIRE(std::abs(tf.col_probs[j] - raw.col_probs[j]) < 1e-9);
        for (int i = 0; i < H; ++i)
            REQUIRE(std::abs(tf.row_probs[i] - raw.row_probs[i]) < 1e-9);

        // tokens_to_data keeps the final decode's predicted shape and box validity
        ChartTensor data = model.tokens_to_data(type, tokens);
        DecoderOutput fin = model.decode(tokens, type);
        auto [h, w] = PlotDataModel::predict_shape(fin.col_probs, fin.row_probs);
        CHECK(data.h == h);
        CHECK(data.w == w);
        if (type.kind == ChartKind::Box)
            for (int i = 0; i < data.h; ++i)
                for (int j = 0; j < data.w; ++j)
                    for (int k = 1; k < 5; ++k)
                        CHECK(data.at(i, j, k) >= data.at(i, j, k - 1));
    }
}

TEST_CASE("loss terms vanish for perfect reconstruction inputs") {
    // the loss is a sum of primitives; each must sit at its floor when
    // prediction equals target
    nn::Graph g;
    nn::Tensor x({3, 4});
    Rng rng(2);
    for (auto& v : x.values()) v = rng.uniform(0.05, 0.95);
    CHECK(nn::mse(g.leaf(x), x).val()[0] == 0.0);
    CHECK(nn::smooth_l1(g.leaf(x), x).val()[0] == 0.0);
    nn::Tensor targets({6}, {1, 1, 1, 0, 0, 0});
    CHECK(nn::binary_cross_entropy(g.leaf(targets), targets).val()[0] <= 1e-6);
}

TEST_CASE("commitment term hand value") {
    nn::Graph g;
    nn::Tensor yp({1, 2}, {0.9, 0.8});
    nn::Tensor q({1, 2}, {1.0, 1.0});
    nn::Var commit = nn::scale(nn::mse(g.leaf(yp), q), 2.0);  // sum over d, mean over rows
    CHECK(commit.val()[0] == doctest::Approx(0.05).epsilon(1e-12));
}

TEST_CASE("masked mse ignores padding") {
    nn::Graph g;
    nn::Tensor target({2, 3}, {1, 2, 3, 0, 0, 0});
    nn::Tensor mask({2, 3}, {1, 1, 1, 0, 0, 0});
    nn::Tensor pred_a({2, 3}, {1, 2, 3, 9, 9, 9});
    nn::Tensor pred_b({2, 3}, {1, 2, 3, -5, 0, 2});
    CHECK(nn::mse(g.leaf(pred_a), target, mask).val()[0] == 0.0);
    CHECK(nn::mse(g.leaf(pred_b), target, mask).val()[0] == 0.0);
}

TEST_CASE("training reduces loss and touches every head in a mixed batch") {
    PdmConfig cfg = tiny_config();
    cfg.epochs = 6;
    PlotDataModel model(cfg, 101);
    auto charts = tiny_charts(20, 31, cfg.grid);

    // snapshot data-head weights before training
    std::vector<uint64_t> head_hashes;
    for (nn::Param* p : model.trainable_parameters())
        if (p->name.find("data_head") != std::string::npos && p->name.ends_with(".w"))
            head_hashes.push_back(nn::tensor_hash(p->value));

    auto stats = model.train(charts, 7);
    REQUIRE(stats.size() == 6);
    CHECK(stats.back().mean.total < stats.front().mean.total);

    size_t idx = 0;
    for (nn::Param* p : model.trainable_parameters())
        if (p->name.find("data_head") != std::string::npos && p->name.ends_with(".w")) {
            CHECK(nn::tensor_hash(p->value) != head_hashes[idx]);
            ++idx;
        }
}

TEST_CASE("training is bit-reproducible for a fixed seed") {
    PdmConfig cfg = tiny_config();
    cfg.epochs = 2;
    auto charts = tiny_charts(10, 12, cfg.grid);
    PlotDataModel a(cfg, 55), b(cfg, 55);
    a.train(charts, 9);
    b.train(charts, 9);
    std::vector<const nn::Param*> pa, pb;
    for (auto* p : a.parameters()) pa.push_back(p);
    for (auto* p : b.parameters()) pb.push_back(p);
    CHECK(nn::params_hash(pa) == nn::params_hash(pb));
}

TEST_CASE("adversarial training with lambda 0 matches plain training") {
    PdmConfig cfg = tiny_config();
    cfg.epochs = 2;
    cfg.adv_lambda = 0.0;
    auto charts = tiny_charts(8, 40, cfg.grid);
    PlotDataModel a(cfg, 77), b(cfg, 77);
    a.train(charts, 13);
    b.train_adversarial(charts, 13);
    std::vector<const nn::Param*> pa, pb;
    for (auto* p : a.parameters()) pa.push_back(p);
    for (auto* p : b.parameters()) pb.push_back(p);
    CHECK(nn::params_hash(pa) == nn::params_hash(pb));
}

TEST_CASE("discriminator learns to separate real data from untrained reconstructions") {
    PdmConfig cfg = tiny_config();
    cfg.epochs = 5;
    cfg.adv_lambda = 0.1;
    auto charts = tiny_charts(24, 91, cfg.grid);
    PlotDataModel model(cfg, 5);
    auto stats = model.train_adversarial(charts, 19);
    REQUIRE(!stats.empty());
    CHECK(stats.back().disc_accuracy > 0.6);
}

TEST_CASE("inference never mutates parameters") {
    PdmConfig cfg = tiny_config();
    PlotDataModel model(cfg, 23);
    std::vector<const nn::Param*> ps;
    for (auto* p : model.parameters()) ps.push_back(p);
    uint64_t before = nn::params_hash(ps);
    auto charts = tiny_charts(4, 3, cfg.grid);
    for (const auto& c : charts) {
        auto [ti, tokens] = model.data_to_tokens(c);
        (void)ti;
        (void)model.tokens_to_data(c.type, tokens);
    }
    CHECK(nn::params_hash(ps) == before);
}

TEST_CASE("gradient check: full PDM loss on a 2-chart batch") {
    PdmConfig cfg = tiny_config();
    PlotDataModel model(cfg, 99);
    auto charts = tiny_charts(2, 77, cfg.grid);
    auto params = model.trainable_parameters();

    // pin the quantization assignment so the finite differences probe the
    // same (straight-through surrogate) function the tape differentiates
    std::vector<EncoderOutput> frozen(2);
    for (int i = 0; i < 2; ++i) {
        nn::Graph g;
        model.build_loss(g, charts[static_cast<size_t>(i)], nullptr,
                         &frozen[static_cast<size_t>(i)]);
    }
    auto loss_only = [&]() {
        double total = 0.0;
        for (int i = 0; i < 2; ++i) {
            nn::Graph g;
            total += model.build_loss(g, charts[static_cast<size_t>(i)], nullptr, nullptr,
                                      &frozen[static_cast<size_t>(i)])
                         .val()[0];
        }
        return total / 2.0;
    };
    auto loss_grad = [&]() {
        for (auto* p : params) p->zero_grad();
        double total = 0.0;
        for (int i = 0; i < 2; ++i) {
            nn::Graph g;
            nn::Var l = model.build_loss(g, charts[static_cast<size_t>(i)], nullptr, nullptr,
                                         &frozen[static_cast<size_t>(i)]);
            g.backward(l);
            g.apply_param_grads(0.5);
            total += l.val()[0];
        }
        return total / 2.0;
    };
    Rng rng(123);
    double err = nn::check_param_gradients(loss_grad, loss_only,
                                           std::span<nn::Param* const>(params), rng, 60);
    CHECK(err < 1e-4);
}

TEST_CASE("overfit a single chart: reconstruction mse and round trip") {
    PdmConfig cfg;
    cfg.codebook_size = 64;
    cfg.latent_dim = 16;
    cfg.token_count = 10;
    cfg.grid = {8, 16};
    cfg.layers = 2;
    cfg.heads = 4;
    cfg.d_ff = 64;
    cfg.patch_w = 4;
    cfg.epochs = 420;
    cfg.batch_size = 1;
    cfg.lr = 3e-3;
    PlotDataModel model(cfg, 7);

    ChartRecord chart;
    chart.id = "single";
    chart.type = ChartType(ChartKind::VerticalBar);
    chart.data = ChartTensor(cfg.grid, chart.type, 1, 4);
    double vals[4] = {12.0, 30.0, 22.0, 44.0};
    for (int j = 0; j < 4; ++j) chart.data.at(0, j, 0) = vals[j];

    auto stats = model.train({chart}, 3);
    CHECK(stats.back().mean.total < stats.front().mean.total);

    // teacher-forced reconstruction error on the training chart
    auto [xn, sp] = scaling::normalize(chart.data, chart.type, cfg.gamma);
    nn::Graph g;
    LossBreakdown bd;
    model.build_loss(g, chart, &bd, nullptr);
    CHECK(bd.data_mse < 1e-3);

    // full round trip through discrete tokens
    auto [ti, tokens] = model.data_to_tokens(chart);
    CHECK(ti == 2);
    ChartTensor back = model.tokens_to_data(chart.type, tokens);
    CHECK(back.h == 1);
    CHECK(back.w == 4);
    for (int j = 0; j < 4; ++j) {
        double rel = std::abs(back.at(0, j, 0) - vals[j]) / vals[j];
        CHECK(rel < 0.10);
    }
}

TEST_CASE("checkpoint round trip restores the model") {
    PdmConfig cfg = tiny_config();
    PlotDataModel a(cfg, 42);
    auto charts = tiny_charts(6, 8, cfg.grid);
    cfg.epochs = 1;
    a.train(charts, 2);
    auto path = (std::filesystem::temp_directory_path() / "pdm_test.ckpt").string();
    a.save(path);

    PlotDataModel b(cfg, 999);  // different init
    b.load(path);
    auto [ta, _qa] = a.data_to_tokens(charts[0]);
    auto [tb, _qb] = b.data_to_tokens(charts[0]);
    (void)ta;
    (void)tb;
    CHECK(_qa == _qb);
    std::filesystem::remove(path);
    std::filesystem::remove(path + ".meta.json");
}
