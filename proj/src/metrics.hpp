#pragma once

#include <functional>
#include <string>
#include <vector>

#include "chart.hpp"
#include "pdm.hpp"

namespace hpn::metrics {

struct RougeScore {
    double precision = 0.0, recall = 0.0, f1 = 0.0;
};

// metric tokenization: lowercase, split on non-alphanumeric runs
std::vector<std::string> tokenize(const std::string& text);

RougeScore rouge_n(const std::string& reference, const std::string& generated, int n);
RougeScore rouge_l(const std::string& reference, const std::string& generated);

struct KeywordSet {
    std::vector<std::string> keywords;
};

// Statistical keyword extraction (frequency, first occurrence, capitalization;
// 1-3 word phrases, lower score = better). Texts under 20 words skip
// extraction and come back as a single whole-text keyword.
KeywordSet extract_keywords(const std::string& text, int max_keywords = 10);

// text -> fixed-width vector; wired to the trained shared encoder in the
// pipeline, stubbed freely in tests
using Embedder = std::function<nn::Tensor(const std::string&)>;

// mean pairwise cosine similarity between embedded keywords
double ksm(const std::string& reference, const std::string& generated,
           const Embedder& embedder);
double ksm_keywords(const KeywordSet& reference, const KeywordSet& generated,
                    const Embedder& embedder);

// Each true-region value is scaled by an independent U(0.5, 1.5) draw.
// Rows of box charts (5 features) are re-sorted so they stay valid.
ChartTensor perturb_fake_chart(const ChartTensor& chart, uint64_t seed);

struct FidFeatures {
    nn::Tensor mu;   // [width]
    nn::Tensor cov;  // [width, width], symmetric
    int64_t count = 0;
};

FidFeatures feature_stats(const std::vector<nn::Tensor>& features);

// squared Frechet distance between two Gaussians fitted to feature clouds;
// the matrix square root comes from a symmetric eigendecomposition with
// negative eigenvalues clamped to zero
double fid(const FidFeatures& a, const FidFeatures& b);

// symmetric eigendecomposition via cyclic Jacobi rotations; eigenvectors are
// returned as columns
void jacobi_eigh(const nn::Tensor& sym, nn::Tensor& values, nn::Tensor& vectors);

struct FidTrainConfig {
    int epochs = 10;
    int batch_size = 16;
    double lr = 1e-3;
    double holdout_fraction = 0.2;
};

struct FidExtractor {
    pdm::DataClassifier classifier;
    double holdout_accuracy = 0.0;
};

// Real-vs-perturbed binary classifier on the multi-head encoder trunk; the
// 32-unit penultimate layer provides FID features.
FidExtractor train_fid_extractor(const std::vector<ChartRecord>& real_charts,
                                 const pdm::PdmConfig& arch, uint64_t seed,
                                 const FidTrainConfig& cfg = {});

// convenience: penultimate features for a set of charts
std::vector<nn::Tensor> extract_features(pdm::DataClassifier& classifier,
                                         const std::vector<ChartRecord>& charts);

}  // namespace hpn::metrics
