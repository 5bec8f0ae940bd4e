#pragma once

#include "angiodg/importance.hpp"
#include "angiodg/layers.hpp"
#include "angiodg/tensor.hpp"
#include "angiodg/wca.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

// Small U-Net with an exposed first convolution:
//
//   image -> conv1 -> [X: pre-norm hook] -> [WCA, fine-tune only] -> bn1 -> ReLU
//         -> block2 (conv-bn-relu, full resolution)                 = skip 0
//         -> depth x (maxpool, conv-bn-relu), channels doubling      = skips 1..depth-1, bottleneck
//         -> depth x (upsample, concat skip, conv-bn-relu)
//         -> 1x1 head -> logits
//
// conv1 has no bias, so zeroing its filter i zeroes pre-norm channel i exactly.

namespace angiodg::segnet {

enum class Phase { initial, finetune, eval };

std::string to_string(Phase p);
Phase phase_from_string(const std::string& s);

struct NetConfig {
    std::size_t first_layer_channels = 16;
    std::size_t encoder_depth = 2;
    std::size_t bottleneck_channels = 0;  // 0: first_layer_channels * 2^encoder_depth
    std::size_t input_height = 128;
    std::size_t input_width = 128;

    std::size_t bottleneck() const noexcept;
    // Throws ConfigError when C1 == 0 or the input is not divisible by 2^depth.
    void validate() const;
};

nlohmann::json to_json(const NetConfig& cfg);
NetConfig net_config_from_json(const nlohmann::json& j);

struct ForwardOptions {
    // Per-channel multipliers applied to the pre-norm conv1 output.
    std::optional<std::vector<float>> channel_mask;
    // Keep a copy of the pre-norm conv1 output (before the mask).
    bool capture_pre_norm = false;
    // Dropout stream for the WCA module in the fine-tune phase.
    std::mt19937_64* rng = nullptr;
};

struct WcaSettings {
    double phi = 0.10;
    double dropout_p = 0.20;
};

class SegNet {
public:
    SegNet(const NetConfig& cfg, std::uint64_t seed);

    const NetConfig& config() const noexcept { return cfg_; }

    // Logits (N, 1, H, W) for images (N, 1, H, W) in [0, 1].
    Tensor forward(const Tensor& images, const ForwardOptions& opts = {});
    // Sigmoid of forward().
    Tensor predict(const Tensor& images, const ForwardOptions& opts = {});

    // Back-propagates dL/dlogits. `grad_pre_norm`, if given, is added to the
    // gradient of the captured pre-norm conv1 output. Parameter gradients accumulate.
    void backward(const Tensor& grad_logits, const Tensor* grad_pre_norm = nullptr);

    const Tensor& captured_pre_norm() const noexcept { return captured_; }
    // Output of bn1 (before ReLU) from the last forward.
    const Tensor& last_post_norm() const noexcept { return post_norm_; }

    // initial: batch statistics, everything trainable, WCA unused.
    // finetune: running statistics frozen, norm affine frozen, only conv1,
    //   block2 and WCA trainable, WCA applied before bn1 (default WCA if none attached).
    // eval: running statistics, WCA bypassed.
    void set_phase(Phase p);
    Phase phase() const noexcept { return phase_; }

    // Installs WCA with the given initial diagonal weights and gamma.
    void attach_wca(const std::vector<double>& weights, double gamma, const WcaSettings& settings = {});
    bool has_wca() const noexcept { return wca_gamma_.has_value(); }
    wca::WcaParams wca_params() const;
    nn::Parameter* wca_gamma() { return wca_gamma_ ? &*wca_gamma_ : nullptr; }
    nn::Parameter* wca_weights() { return wca_weights_ ? &*wca_weights_ : nullptr; }

    std::vector<nn::Parameter*> parameters();
    std::vector<nn::Parameter*> trainable_parameters();
    std::size_t trainable_count();
    void zero_grad();

    nn::Conv2d& conv1() noexcept { return conv1_; }
    nn::BatchNorm2d& bn1() noexcept { return bn1_; }
    nn::ConvBnRelu& block2() noexcept { return block2_; }
    std::vector<const nn::BatchNorm2d*> norm_layers() const;

    nlohmann::json state_dict() const;
    void load_state_dict(const nlohmann::json& j);

private:
    std::vector<nn::BatchNorm2d*> mutable_norm_layers();

    NetConfig cfg_;
    Phase phase_ = Phase::initial;

    nn::Conv2d conv1_;
    nn::BatchNorm2d bn1_;
    nn::ReLU relu1_;
    nn::ConvBnRelu block2_;
    std::vector<nn::MaxPool2> pools_;
    std::vector<nn::ConvBnRelu> down_;
    std::vector<nn::ConvBnRelu> up_;
    nn::Conv2d head_;

    std::optional<nn::Parameter> wca_gamma_;
    std::optional<nn::Parameter> wca_weights_;
    WcaSettings wca_settings_;
    wca::WcaCache wca_cache_;
    bool wca_ran_ = false;

    std::optional<std::vector<float>> mask_;
    Tensor captured_;
    Tensor post_norm_;
    std::vector<std::size_t> skip_channels_;
};

}  // namespace angiodg::segnet
