#pragma once

#include "angiodg/tensor.hpp"

#include <memory>
#include <string>

namespace angiodg::losses {

// Segmentation objective evaluated on logits. Implementations return the
// scalar loss and, when `grad` is non-null, write dL/dlogits into it.
class MainLoss {
public:
    virtual ~MainLoss() = default;
    virtual std::string name() const = 0;
    virtual double evaluate(const Tensor& logits, const Tensor& targets, Tensor* grad) const = 0;
};

// Per-sample soft Dice loss (smoothing 1) averaged over the batch.
class SoftDiceLoss : public MainLoss {
public:
    std::string name() const override { return "dice"; }
    double evaluate(const Tensor& logits, const Tensor& targets, Tensor* grad) const override;
};

// Pixel-mean binary cross-entropy on logits.
class BceLoss : public MainLoss {
public:
    std::string name() const override { return "bce"; }
    double evaluate(const Tensor& logits, const Tensor& targets, Tensor* grad) const override;
};

// Equal-weight mean of soft Dice and BCE.
class DiceBceLoss : public MainLoss {
public:
    std::string name() const override { return "dice_bce"; }
    double evaluate(const Tensor& logits, const Tensor& targets, Tensor* grad) const override;

private:
    SoftDiceLoss dice_;
    BceLoss bce_;
};

// "dice_bce" (default), "dice" or "bce"; throws ConfigError otherwise.
std::unique_ptr<MainLoss> make_main_loss(const std::string& name);

}  // namespace angiodg::losses
