#include "angiodg/whitening.hpp"

#include "angiodg/errors.hpp"

#include <cmath>
#include <string>

namespace angiodg::whitening {
namespace {

void require_valid(const FeatureBlock& x, const char* op) {
    if (x.c == 0) throw ShapeError(std::string(op) + ": feature block has no channels");
    if (x.spatial() < 2) throw ShapeError(std::string(op) + ": H·W must be >= 2");
    if (x.values.size() != x.n * x.sample_size()) {
        throw ShapeError(std::string(op) + ": value count does not match (N, C, H, W)");
    }
}

struct ChannelStats {
    double mean;
    double inv_std;
};

ChannelStats stats(std::span<const double> ch, double eps) {
    double mean = 0.0;
    for (double v : ch) mean += v;
    mean /= static_cast<double>(ch.size());
    double var = 0.0;
    for (double v : ch) var += (v - mean) * (v - mean);
    var /= static_cast<double>(ch.size());
    return {mean, 1.0 / std::sqrt(var + eps)};
}

// Off-diagonal part of the eps-regularized covariance of one normalized sample.
RowMatrix off_diagonal(const FeatureBlock& x_norm, std::size_t s, double diag_eps) {
    RowMatrix sigma = channel_covariance(x_norm, s);
    sigma.diagonal().array() += diag_eps;
    sigma.diagonal().setZero();
    return sigma;
}

}  // namespace

FeatureBlock instance_normalize(const FeatureBlock& x, double eps) {
    FeatureBlock out = x;
    for (std::size_t ni = 0; ni < x.n; ++ni) {
        for (std::size_t ci = 0; ci < x.c; ++ci) {
            const auto src = x.channel(ni, ci);
            const ChannelStats st = stats(src, eps);
            auto dst = out.channel(ni, ci);
            for (std::size_t i = 0; i < src.size(); ++i) dst[i] = (src[i] - st.mean) * st.inv_std;
        }
    }
    return out;
}

RowMatrix channel_covariance(const FeatureBlock& x_norm, std::size_t sample_index) {
    if (x_norm.spatial() < 2) throw ShapeError("channel_covariance: H·W must be >= 2");
    if (sample_index >= x_norm.n) throw ShapeError("channel_covariance: sample index out of range");
    const auto flat = x_norm.flat(sample_index);
    RowMatrix sigma = flat * flat.transpose();
    sigma /= static_cast<double>(x_norm.spatial() - 1);
    return sigma;
}

double off_diagonal_loss(const FeatureBlock& x, const WhiteningConfig& cfg) {
    require_valid(x, "off_diagonal_loss");
    if (x.n == 0) return 0.0;
    const FeatureBlock xn = instance_normalize(x, cfg.norm_epsilon);
    double total = 0.0;
    for (std::size_t s = 0; s < x.n; ++s) total += off_diagonal(xn, s, cfg.diag_epsilon).norm();
    return total / static_cast<double>(x.n);
}

OffDiagonalGradient off_diagonal_loss_grad(const FeatureBlock& x, const WhiteningConfig& cfg) {
    require_valid(x, "off_diagonal_loss_grad");
    OffDiagonalGradient out;
    out.grad = FeatureBlock(x.n, x.c, x.h, x.w);
    if (x.n == 0) return out;

    const FeatureBlock xn = instance_normalize(x, cfg.norm_epsilon);
    const double hw = static_cast<double>(x.spatial());
    const double batch_scale = 1.0 / static_cast<double>(x.n);
    out.per_sample.reserve(x.n);

    for (std::size_t s = 0; s < x.n; ++s) {
        const RowMatrix off = off_diagonal(xn, s, cfg.diag_epsilon);
        const double norm = off.norm();
        out.per_sample.push_back(norm);
        out.loss += norm * batch_scale;
        if (norm == 0.0) continue;

        // d‖Σ̃‖/dΣ = Σ̃/‖Σ̃‖ (symmetric, zero diagonal); dΣ/dX̂ contributes 2·G·X̂/(HW-1).
        const RowMatrix g_norm = (2.0 * batch_scale / (norm * (hw - 1.0))) * off * xn.flat(s);

        // Instance-norm backward per channel.
        for (std::size_t ci = 0; ci < x.c; ++ci) {
            const ChannelStats st = stats(x.channel(s, ci), cfg.norm_epsilon);
            const auto xhat = xn.channel(s, ci);
            double mean_g = 0.0;
            double mean_gx = 0.0;
            for (std::size_t i = 0; i < xhat.size(); ++i) {
                mean_g += g_norm(ci, i);
                mean_gx += g_norm(ci, i) * xhat[i];
            }
            mean_g /= hw;
            mean_gx /= hw;
            auto dst = out.grad.channel(s, ci);
            for (std::size_t i = 0; i < xhat.size(); ++i) {
                dst[i] = st.inv_std * (g_norm(ci, i) - mean_g - xhat[i] * mean_gx);
            }
        }
    }
    return out;
}

double anneal_weight(int epoch, int e0, int total_epochs) {
    if (e0 < 0 || total_epochs <= e0 + 1) {
        throw InvalidScheduleError("anneal_weight: need 0 <= e0 < E - 1 (e0=" + std::to_string(e0) +
                                   ", E=" + std::to_string(total_epochs) + ")");
    }
    if (epoch < 0 || epoch > total_epochs) {
        throw InvalidScheduleError("anneal_weight: epoch " + std::to_string(epoch) + " outside [0, E]");
    }
    if (epoch <= e0) return 0.0;
    return 1.0 - static_cast<double>(epoch - (e0 + 1)) / static_cast<double>(total_epochs - (e0 + 1));
}

LossBreakdown total_loss(double l_main, double l_offdiag, double beta) {
    if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("total_loss: beta outside [0, 1]");
    return {l_main, l_offdiag, beta, l_main + beta * l_offdiag};
}

}  // namespace angiodg::whitening
