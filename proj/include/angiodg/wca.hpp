#pragma once

#include "angiodg/feature_block.hpp"
#include "angiodg/importance.hpp"

#include <random>
#include <span>
#include <string>
#include <vector>

// Weighted channel attention over flattened first-layer features.
//
// For one sample X ∈ R^{C×HW}:
//   S  = X Xᵀ
//   M  = S ⊙ Dʷ
//   A  = softmax_row(φ · (M - rowmax(M)))
//   A' = A · dropout(X)
//   Y  = X + γ · A'
// Attention is computed per sample; there is no mixing across the batch.

namespace angiodg::wca {

struct WcaParams {
    std::vector<double> weight_diag;  // trainable, initialized from channel importance
    double gamma = 0.25;              // trainable
    double phi = 0.10;                // fixed softmax scale
    double dropout_p = 0.20;          // inverted dropout on V
    bool training = false;            // module bypassed when false

    // Throws std::invalid_argument on phi <= 0, dropout_p outside [0,1) or empty weights.
    void validate() const;
};

WcaParams make_params(std::span<const double> weights, double gamma = 0.25, double phi = 0.10,
                      double dropout_p = 0.20);

struct AttentionTrace {
    RowMatrix similarity;  // S
    RowMatrix weighted;    // φ·(S⊙Dʷ - rowmax)
    RowMatrix attention;   // A, row-stochastic
};

// Throws ShapeError if Dʷ is not C×C and NumericError on non-finite input.
AttentionTrace attention_matrix(const Eigen::Ref<const RowMatrix>& x_flat,
                                const importance::WeightMatrix& d_w, double phi);

// Intermediate values kept for the backward pass.
struct WcaCache {
    FeatureBlock input;
    std::vector<RowMatrix> similarity;
    std::vector<RowMatrix> attention;
    std::vector<RowMatrix> values;     // dropout(X), per sample
    std::vector<RowMatrix> dropout_scale;  // per-element multiplier applied to X
    std::vector<RowMatrix> attended;   // A·V'
    bool active = false;
};

// Applies the module to every sample of `x`. When params.training is false the
// input is returned unchanged. `rng` is required only when dropout is active.
FeatureBlock wca_forward(const FeatureBlock& x, const WcaParams& params,
                         const importance::WeightMatrix& d_w, std::mt19937_64* rng = nullptr,
                         WcaCache* cache = nullptr);

struct WcaGradients {
    FeatureBlock input;
    double gamma = 0.0;
    std::vector<double> weight_diag;
};

WcaGradients wca_backward(const WcaCache& cache, const FeatureBlock& grad_output,
                          const WcaParams& params, const importance::WeightMatrix& d_w);

struct ParameterView {
    std::string name;
    std::span<double> values;
};

// {gamma, weight_diag}: C + 1 scalars. phi and dropout_p are fixed.
std::vector<ParameterView> trainable_parameters(WcaParams& params);

}  // namespace angiodg::wca
