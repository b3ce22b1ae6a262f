#include "metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>

#include "optim.hpp"

namespace hpn::metrics {

using nn::Tensor;

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            cur += static_cast<char>(std::tolower(c));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

namespace {
RougeScore f1_from_counts(double overlap, double gen_total, double ref_total) {
    RougeScore s;
    if (gen_total <= 0.0 || ref_total <= 0.0) return s;
    s.precision = overlap / gen_total;
    s.recall = overlap / ref_total;
    if (s.precision + s.recall > 0.0)
        s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}
}  // namespace

RougeScore rouge_n(const std::string& reference, const std::string& generated, int n) {
    if (n < 1) throw ConfigError("rouge_n: n must be >= 1");
    auto ref = tokenize(reference);
    auto gen = tokenize(generated);
    if (static_cast<int>(ref.size()) < n || static_cast<int>(gen.size()) < n) return {};
    auto grams = [n](const std::vector<std::string>& words) {
        std::map<std::vector<std::string>, int> counts;
        for (size_t i = 0; i + n <= words.size(); ++i)
            ++counts[std::vector<std::string>(words.begin() + static_cast<long>(i),
                                              words.begin() + static_cast<long>(i) + n)];
        return counts;
    };
    auto ref_counts = grams(ref);
    auto gen_counts = grams(gen);
    double overlap = 0.0, gen_total = 0.0, ref_total = 0.0;
    for (const auto& [g, c] : gen_counts) {
        gen_total += c;
        auto it = ref_counts.find(g);
        if (it != ref_counts.end()) overlap += std::min(c, it->second);
    }
    for (const auto& [g, c] : ref_counts) ref_total += c;
    return f1_from_counts(overlap, gen_total, ref_total);
}

RougeScore rouge_l(const std::string& reference, const std::string& generated) {
    auto ref = tokenize(reference);
    auto gen = tokenize(generated);
    if (ref.empty() || gen.empty()) return {};
    const size_t n = ref.size(), m = gen.size();
    std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j) {
            if (ref[i - 1] == gen[j - 1])
                cur[j] = prev[j - 1] + 1;
            else
                cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    double lcs = prev[m];
    return f1_from_counts(lcs, static_cast<double>(m), static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// keywords

namespace {

const std::set<std::string>& stopwords() {
    static const std::set<std::string> kStop = {
        "a",    "an",   "and",  "are", "as",   "at",   "be",   "by",   "for", "from",
        "has",  "have", "in",   "is",  "it",   "its",  "of",   "on",   "or",  "that",
        "the",  "their", "this", "to",  "was",  "were", "with", "which", "we",  "our",
        "these", "those", "than", "then", "but", "not",  "can",  "also"};
    return kStop;
}

struct Word {
    std::string original;
    std::string lower;
    size_t pos = 0;
    bool break_after = false;  // punctuation boundary: phrases must not cross
};

std::vector<Word> words_with_positions(const std::string& text) {
    std::vector<Word> out;
    std::string cur;
    bool pending_break = false;
    auto flush = [&]() {
        if (cur.empty()) return;
        Word w;
        w.original = cur;
        for (char c : cur) w.lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        w.pos = out.size();
        out.push_back(std::move(w));
        cur.clear();
    };
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            if (pending_break && !out.empty() && cur.empty()) out.back().break_after = true;
            pending_break = false;
            cur += static_cast<char>(c);
        } else {
            if (c != ' ' && !std::isspace(c)) pending_break = true;
            flush();
        }
    }
    flush();
    if (pending_break && !out.empty()) out.back().break_after = true;
    return out;
}

}  // namespace

KeywordSet extract_keywords(const std::string& text, int max_keywords) {
    auto words = words_with_positions(text);
    if (words.empty()) throw ValidationError("extract_keywords: empty input");
    if (max_keywords < 1) throw ConfigError("extract_keywords: max_keywords must be >= 1");

    if (words.size() < 20) {
        // short text: the whole text is the keyword
        std::string trimmed = text;
        size_t a = trimmed.find_first_not_of(" \t\r\n");
        size_t b = trimmed.find_last_not_of(" \t\r\n");
        trimmed = a == std::string::npos ? "" : trimmed.substr(a, b - a + 1);
        return {{trimmed}};
    }

    // per-term statistics
    struct TermStat {
        int tf = 0;
        int caps = 0;
        size_t first_pos = 0;
    };
    std::map<std::string, TermStat> stats;
    for (const Word& w : words) {
        auto [it, inserted] = stats.try_emplace(w.lower);
        if (inserted) it->second.first_pos = w.pos;
        ++it->second.tf;
        if (std::isupper(static_cast<unsigned char>(w.original[0]))) ++it->second.caps;
    }
    const double n = static_cast<double>(words.size());
    auto term_score = [&](const std::string& lower) {
        const TermStat& st = stats.at(lower);
        double cap_ratio = static_cast<double>(st.caps) / st.tf;
        return (1.0 + static_cast<double>(st.first_pos) / n) /
               (static_cast<double>(st.tf) * (1.0 + cap_ratio));
    };

    // candidate phrases: 1-3 word windows not crossing punctuation, not
    // starting or ending on a stopword
    struct Candidate {
        double score = 0.0;
        size_t first_pos = 0;
        std::string display;
    };
    std::map<std::string, Candidate> candidates;
    std::map<std::string, int> phrase_tf;
    std::vector<std::pair<std::string, std::vector<size_t>>> windows;
    for (size_t i = 0; i < words.size(); ++i) {
        for (size_t len = 1; len <= 3 && i + len <= words.size(); ++len) {
            bool crosses = false;
            for (size_t k = 0; k + 1 < len; ++k)
                if (words[i + k].break_after) crosses = true;
            if (crosses) break;
            if (stopwords().count(words[i].lower) ||
                stopwords().count(words[i + len - 1].lower))
                continue;
            std::string key;
            for (size_t k = 0; k < len; ++k) {
                if (k) key += ' ';
                key += words[i + k].lower;
            }
            ++phrase_tf[key];
            std::vector<size_t> idx;
            for (size_t k = 0; k < len; ++k) idx.push_back(i + k);
            windows.emplace_back(std::move(key), std::move(idx));
        }
    }
    for (const auto& [key, idx] : windows) {
        if (candidates.count(key)) continue;
        double prod = 1.0, sum = 0.0;
        for (size_t wi : idx) {
            double s = term_score(words[wi].lower);
            prod *= s;
            sum += s;
        }
        Candidate c;
        c.score = prod / (static_cast<double>(phrase_tf.at(key)) * (1.0 + sum));
        c.first_pos = words[idx[0]].pos;
        for (size_t k = 0; k < idx.size(); ++k) {
            if (k) c.display += ' ';
            c.display += words[idx[k]].original;
        }
        candidates.emplace(key, std::move(c));
    }
    if (candidates.empty()) {
        // every window touched a stopword; fall back to single non-stop terms
        for (const Word& w : words)
            if (!candidates.count(w.lower))
                candidates.emplace(w.lower,
                                   Candidate{term_score(w.lower), w.pos, w.original});
    }

    std::vector<std::pair<std::string, Candidate>> ranked(candidates.begin(),
                                                          candidates.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second.score != b.second.score) return a.second.score < b.second.score;
        return a.second.first_pos < b.second.first_pos;
    });

    KeywordSet out;
    for (const auto& [key, c] : ranked) {
        if (static_cast<int>(out.keywords.size()) >= max_keywords) break;
        out.keywords.push_back(c.display);
    }
    return out;
}

// ---------------------------------------------------------------------------
// KSM

namespace {
double cosine(const Tensor& a, const Tensor& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na < 1e-24 || nb < 1e-24) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}
}  // namespace

double ksm_keywords(const KeywordSet& reference, const KeywordSet& generated,
                    const Embedder& embedder) {
    if (reference.keywords.empty() || generated.keywords.empty())
        throw ValidationError("ksm: empty keyword set");
    std::vector<Tensor> ref_vecs, gen_vecs;
    for (const auto& k : reference.keywords) ref_vecs.push_back(embedder(k));
    for (const auto& k : generated.keywords) gen_vecs.push_back(embedder(k));
    double sum = 0.0;
    for (const Tensor& r : ref_vecs)
        for (const Tensor& g : gen_vecs) {
            if (!r.same_shape(g)) throw ShapeError("ksm: embedder width mismatch");
            sum += cosine(r, g);
        }
    return sum / (static_cast<double>(ref_vecs.size()) * gen_vecs.size());
}

double ksm(const std::string& reference, const std::string& generated,
           const Embedder& embedder) {
    return ksm_keywords(extract_keywords(reference), extract_keywords(generated), embedder);
}

// ---------------------------------------------------------------------------
// chart perturbation + FID

ChartTensor perturb_fake_chart(const ChartTensor& chart, uint64_t seed) {
    Rng rng(mix_seed(seed, 0xfa4e));
    ChartTensor out = chart;
    const int d = chart.features();
    for (int i = 0; i < chart.h; ++i)
        for (int j = 0; j < chart.w; ++j) {
            for (int k = 0; k < d; ++k) out.at(i, j, k) = chart.at(i, j, k) * rng.uniform(0.5, 1.5);
            if (d == 5) {  // box rows must stay ordered
                double vals[5];
                for (int k = 0; k < 5; ++k) vals[k] = out.at(i, j, k);
                std::sort(vals, vals + 5);
                for (int k = 0; k < 5; ++k) out.at(i, j, k) = vals[k];
            }
        }
    return out;
}

FidFeatures feature_stats(const std::vector<Tensor>& features) {
    if (features.size() < 2) throw ValidationError("feature_stats: need at least 2 samples");
    const int w = static_cast<int>(features[0].numel());
    FidFeatures out;
    out.mu = Tensor({w});
    out.cov = Tensor({w, w});
    out.count = static_cast<int64_t>(features.size());
    for (const Tensor& f : features) {
        if (f.numel() != w) throw ShapeError("feature_stats: width mismatch");
        for (int i = 0; i < w; ++i) out.mu[i] += f[i];
    }
    for (int i = 0; i < w; ++i) out.mu[i] /= static_cast<double>(out.count);
    for (const Tensor& f : features)
        for (int i = 0; i < w; ++i)
            for (int j = 0; j < w; ++j)
                out.cov.at(i, j) += (f[i] - out.mu[i]) * (f[j] - out.mu[j]);
    for (auto& v : out.cov.values()) v /= static_cast<double>(out.count - 1);
    return out;
}

void jacobi_eigh(const Tensor& sym, Tensor& values, Tensor& vectors) {
    if (sym.rank() != 2 || sym.dim(0) != sym.dim(1))
        throw ShapeError("jacobi_eigh: square matrix required");
    const int n = sym.dim(0);
    Tensor a = sym;
    vectors = Tensor({n, n});
    for (int i = 0; i < n; ++i) vectors.at(i, i) = 1.0;

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                double apq = a.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (int k = 0; k < n; ++k) {
                    double akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    double apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    double vkp = vectors.at(k, p), vkq = vectors.at(k, q);
                    vectors.at(k, p) = c * vkp - s * vkq;
                    vectors.at(k, q) = s * vkp + c * vkq;
                }
            }
    }
    values = Tensor({n});
    for (int i = 0; i < n; ++i) values[i] = a.at(i, i);
}

namespace {
// B = V diag(f(lambda)) V^T for symmetric input
Tensor sym_apply(const Tensor& sym, const std::function<double(double)>& f) {
    Tensor values, vectors;
    jacobi_eigh(sym, values, vectors);
    const int n = sym.dim(0);
    Tensor scaled({n, n});  // V * diag(f)
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) scaled.at(i, j) = vectors.at(i, j) * f(values[j]);
    Tensor out({n, n});
    nn::gemm_acc(scaled.data(), vectors.data(), out.data(), n, n, n, false, true);
    return out;
}

Tensor matmul_sq(const Tensor& a, const Tensor& b) {
    const int n = a.dim(0);
    Tensor out({n, n});
    nn::gemm_acc(a.data(), b.data(), out.data(), n, n, n, false, false);
    return out;
}
}  // namespace

double fid(const FidFeatures& a, const FidFeatures& b) {
    if (a.mu.numel() != b.mu.numel()) throw ShapeError("fid: feature width mismatch");
    const int n = static_cast<int>(a.mu.numel());
    if (a.cov.rank() != 2 || a.cov.dim(0) != n || b.cov.dim(0) != n)
        throw ShapeError("fid: covariance shape mismatch");
    for (double v : a.mu.values())
        if (!std::isfinite(v)) throw ValidationError("fid: non-finite input");
    for (double v : b.mu.values())
        if (!std::isfinite(v)) throw ValidationError("fid: non-finite input");
    for (double v : a.cov.values())
        if (!std::isfinite(v)) throw ValidationError("fid: non-finite input");
    for (double v : b.cov.values())
        if (!std::isfinite(v)) throw ValidationError("fid: non-finite input");

    double mean_term = 0.0;
    for (int i = 0; i < n; ++i) {
        double d = a.mu[i] - b.mu[i];
        mean_term += d * d;
    }
    double trace_a = 0.0, trace_b = 0.0;
    for (int i = 0; i < n; ++i) {
        trace_a += a.cov.at(i, i);
        trace_b += b.cov.at(i, i);
    }
    auto sqrt_clamped = [](double x) { return x > 0.0 ? std::sqrt(x) : 0.0; };
    Tensor b_half = sym_apply(b.cov, sqrt_clamped);
    Tensor m = matmul_sq(matmul_sq(b_half, a.cov), b_half);
    // symmetrize against rounding before the second eigendecomposition
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            double v = 0.5 * (m.at(i, j) + m.at(j, i));
            m.at(i, j) = v;
            m.at(j, i) = v;
        }
    Tensor values, vectors;
    jacobi_eigh(m, values, vectors);
    double trace_sqrt = 0.0;
    for (int i = 0; i < n; ++i) trace_sqrt += sqrt_clamped(values[i]);

    double d2 = mean_term + trace_a + trace_b - 2.0 * trace_sqrt;
    return d2 > 0.0 ? d2 : 0.0;
}

// ---------------------------------------------------------------------------
// FID extractor

std::vector<Tensor> extract_features(pdm::DataClassifier& classifier,
                                     const std::vector<ChartRecord>& charts) {
    std::vector<Tensor> out;
    out.reserve(charts.size());
    for (const auto& c : charts) out.push_back(classifier.features(c));
    return out;
}

namespace {
// deterministic perturbation that respects the scaling domain
ChartRecord make_fake(const ChartRecord& real, uint64_t seed) {
    for (uint64_t attempt = 0; attempt < 8; ++attempt) {
        ChartRecord fake = real;
        fake.data = perturb_fake_chart(real.data, mix_seed(seed, attempt));
        bool ok = true;
        for (int i = 0; i < fake.data.h && ok; ++i)
            for (int j = 0; j < fake.data.w && ok; ++j)
                for (int k = 0; k < fake.data.features(); ++k)
                    if (fake.data.at(i, j, k) <= -1.1) {
                        ok = false;
                        break;
                    }
        if (ok) return fake;
    }
    return real;  // pathological chart; harmless as an easy negative
}
}  // namespace

FidExtractor train_fid_extractor(const std::vector<ChartRecord>& real_charts,
                                 const pdm::PdmConfig& arch, uint64_t seed,
                                 const FidTrainConfig& cfg) {
    if (real_charts.size() < 100)
        throw ConfigError("fid extractor: need at least 100 charts");
    FidExtractor out{pdm::DataClassifier(arch, seed), 0.0};
    Rng rng(mix_seed(seed, 0xf1d));

    std::vector<size_t> order(real_charts.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    const size_t holdout =
        std::max<size_t>(2, static_cast<size_t>(cfg.holdout_fraction *
                                                static_cast<double>(order.size())));
    std::vector<size_t> test_idx(order.begin(), order.begin() + static_cast<long>(holdout));
    std::vector<size_t> train_idx(order.begin() + static_cast<long>(holdout), order.end());

    auto params = out.classifier.parameters();
    nn::AdamW opt(params, {.lr = cfg.lr, .clip_norm = 1.0});
    const int batches =
        (static_cast<int>(train_idx.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const int64_t total_steps = static_cast<int64_t>(cfg.epochs) * batches;
    int64_t step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(train_idx);
        for (int b = 0; b < batches; ++b) {
            const int lo = b * cfg.batch_size;
            const int hi = std::min(static_cast<int>(train_idx.size()),
                                    lo + cfg.batch_size);
            if (lo >= hi) break;
            opt.zero_grad();
            const double inv = 1.0 / (2.0 * (hi - lo));
            for (int i = lo; i < hi; ++i) {
                const ChartRecord& real = real_charts[train_idx[static_cast<size_t>(i)]];
                ChartRecord fake = make_fake(real, rng.next_u64());
                for (int lbl = 0; lbl < 2; ++lbl) {
                    const ChartRecord& sample = lbl ? real : fake;
                    auto [xn, sp] =
                        scaling::normalize(sample.data, sample.type, arch.gamma);
                    nn::Graph g;
                    nn::Var logit = out.classifier.logit(g, xn, sp, sample.type);
                    nn::Var loss = nn::binary_cross_entropy(
                        nn::sigmoid(logit), Tensor({1}, {static_cast<double>(lbl)}));
                    g.backward(loss);
                    g.apply_param_grads(inv);
                }
            }
            opt.set_lr(nn::cosine_lr(step, total_steps, cfg.lr));
            opt.step();
            ++step;
        }
    }

    int correct = 0, total = 0;
    for (size_t idx : test_idx) {
        const ChartRecord& real = real_charts[idx];
        ChartRecord fake = make_fake(real, mix_seed(seed, 0xh01d + idx));
        correct += out.classifier.prob_real(real) > 0.5 ? 1 : 0;
        correct += out.classifier.prob_real(fake) < 0.5 ? 1 : 0;
        total += 2;
    }
    out.holdout_accuracy = total ? static_cast<double>(correct) / total : 0.0;
    return out;
}

}  // namespace hpn::metrics
