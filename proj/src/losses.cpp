#include "angiodg/losses.hpp"

#include "angiodg/errors.hpp"

#include <cmath>

namespace angiodg::losses {

namespace {

void check(const Tensor& logits, const Tensor& targets) {
    if (!logits.same_shape(targets) || logits.c != 1) throw ShapeError("loss: logits and targets must both be (N, 1, H, W)");
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

double SoftDiceLoss::evaluate(const Tensor& logits, const Tensor& targets, Tensor* grad) const {
    check(logits, targets);
    const std::size_t plane = logits.h * logits.w;
    if (grad) *grad = Tensor(logits.n, 1, logits.h, logits.w);
    double total = 0.0;
    std::vector<double> p(plane);
    for (std::size_t s = 0; s < logits.n; ++s) {
        const float* z = logits.data.data() + s * plane;
        const float* g = targets.data.data() + s * plane;
        double inter = 0.0, sum_p = 0.0, sum_g = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
            p[i] = sigmoid(z[i]);
            inter += p[i] * g[i];
            sum_p += p[i];
            sum_g += g[i];
        }
        const double num = 2.0 * inter + 1.0;
        const double den = sum_p + sum_g + 1.0;
        total += 1.0 - num / den;
        if (grad) {
            float* dz = grad->data.data() + s * plane;
            const double scale = -1.0 / static_cast<double>(logits.n);
            for (std::size_t i = 0; i < plane; ++i) {
                const double dd_dp = (2.0 * g[i] * den - num) / (den * den);
                dz[i] = static_cast<float>(scale * dd_dp * p[i] * (1.0 - p[i]));
            }
        }
    }
    return total / static_cast<double>(logits.n);
}

double BceLoss::evaluate(const Tensor& logits, const Tensor& targets, Tensor* grad) const {
    check(logits, targets);
    const std::size_t total = logits.data.size();
    if (grad) *grad = Tensor(logits.n, 1, logits.h, logits.w);
    double sum = 0.0;
    const double inv = 1.0 / static_cast<double>(total);
    for (std::size_t i = 0; i < total; ++i) {
        const double z = logits.data[i];
        const double g = targets.data[i];
        sum += std::max(z, 0.0) - z * g + std::log1p(std::exp(-std::abs(z)));
        if (grad) grad->data[i] = static_cast<float>((sigmoid(z) - g) * inv);
    }
    return sum * inv;
}

double DiceBceLoss::evaluate(const Tensor& logits, const Tensor& targets, Tensor* grad) const {
    if (!grad) return 0.5 * dice_.evaluate(logits, targets, nullptr) + 0.5 * bce_.evaluate(logits, targets, nullptr);
    Tensor gd, gb;
    const double l = 0.5 * dice_.evaluate(logits, targets, &gd) + 0.5 * bce_.evaluate(logits, targets, &gb);
    *grad = std::move(gd);
    for (std::size_t i = 0; i < grad->data.size(); ++i) grad->data[i] = 0.5f * (grad->data[i] + gb.data[i]);
    return l;
}

std::unique_ptr<MainLoss> make_main_loss(const std::string& name) {
    if (name == "dice_bce") return std::make_unique<DiceBceLoss>();
    if (name == "dice") return std::make_unique<SoftDiceLoss>();
    if (name == "bce") return std::make_unique<BceLoss>();
    throw ConfigError("unknown main loss '" + name + "'");
}

}  // namespace angiodg::losses
