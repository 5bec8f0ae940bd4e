#pragma once

#include "angiodg/feature_block.hpp"

#include <vector>

// Instance-wise channel decorrelation penalty on pre-normalization
// first-layer features, and the delayed linear anneal of its weight.

namespace angiodg::whitening {

inline constexpr double kDefaultEpsilon = 1e-5;

struct WhiteningConfig {
    double norm_epsilon = kDefaultEpsilon;  // instance normalization
    double diag_epsilon = kDefaultEpsilon;  // added to the covariance diagonal
};

struct LossBreakdown {
    double l_main = 0.0;
    double l_offdiag = 0.0;
    double beta = 0.0;
    double l_total = 0.0;
};

// Per-sample, per-channel (x - mean) / sqrt(var + eps), biased variance, no affine.
FeatureBlock instance_normalize(const FeatureBlock& x, double eps = kDefaultEpsilon);

// X_flat X_flatᵀ / (H·W - 1) for sample `sample_index`. Throws ShapeError if H·W < 2.
RowMatrix channel_covariance(const FeatureBlock& x_norm, std::size_t sample_index);

// Batch mean of ‖Σ - Diag(diag Σ)‖_F where Σ is the covariance of the
// instance-normalized sample plus eps·I. Throws ShapeError for C == 0 or H·W < 2.
double off_diagonal_loss(const FeatureBlock& x, const WhiteningConfig& cfg = {});

struct OffDiagonalGradient {
    double loss = 0.0;
    std::vector<double> per_sample;
    FeatureBlock grad;  // d loss / d x, same shape as x
};

// Loss together with its analytic gradient with respect to the raw input.
// Where a sample's off-diagonal norm is exactly zero the subgradient 0 is used.
OffDiagonalGradient off_diagonal_loss_grad(const FeatureBlock& x, const WhiteningConfig& cfg = {});

// β(e): 0 for e <= e0, then 1 - (e - (e0+1)) / (E - (e0+1)). Epochs count from 1.
// Throws InvalidScheduleError when E <= e0 + 1 or e outside [0, E].
double anneal_weight(int epoch, int e0, int total_epochs);

// l_main + beta·l_offdiag. Throws std::invalid_argument for beta outside [0, 1].
LossBreakdown total_loss(double l_main, double l_offdiag, double beta);

}  // namespace angiodg::whitening
