#pragma once

#include "angiodg/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

// Building blocks of the segmentation network. Each layer keeps the cache of
// its most recent forward call; backward() must follow the matching forward().

namespace angiodg::nn {

struct Parameter {
    std::string name;
    std::vector<float> value;
    std::vector<float> grad;
    bool requires_grad = true;

    Parameter() = default;
    Parameter(std::string n, std::size_t size) : name(std::move(n)), value(size, 0.0f), grad(size, 0.0f) {}
    std::size_t size() const noexcept { return value.size(); }
    void zero_grad();
};

// Square-kernel convolution, stride 1, "same" zero padding (kernel 1 or 3).
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
           bool bias);

    // Kaiming-normal weights (fan_in, ReLU gain), zero bias.
    void init(std::mt19937_64& rng);

    Tensor forward(const Tensor& x);
    // Accumulates parameter gradients; returns dL/dx unless want_input_grad is false.
    Tensor backward(const Tensor& dy, bool want_input_grad = true);

    std::size_t in_channels() const noexcept { return in_; }
    std::size_t out_channels() const noexcept { return out_; }
    std::size_t kernel() const noexcept { return k_; }
    bool has_bias() const noexcept { return has_bias_; }

    Parameter weight;  // [out, in, k, k]
    Parameter bias;    // [out] when present

private:
    std::size_t in_ = 0;
    std::size_t out_ = 0;
    std::size_t k_ = 3;
    bool has_bias_ = false;
    Tensor input_;
    std::vector<float> col_;
};

// Batch normalization over (N, H, W) per channel.
class BatchNorm2d {
public:
    BatchNorm2d() = default;
    BatchNorm2d(std::string name, std::size_t channels);

    // use_batch_stats: normalize with batch statistics and update running
    // averages. Otherwise running statistics are used and left untouched.
    Tensor forward(const Tensor& x, bool use_batch_stats);
    Tensor backward(const Tensor& dy);

    std::size_t channels() const noexcept { return ch_; }

    Parameter gamma;
    Parameter beta;
    std::vector<float> running_mean;
    std::vector<float> running_var;
    float momentum = 0.1f;
    float eps = 1e-5f;

private:
    std::size_t ch_ = 0;
    bool batch_mode_ = false;
    Tensor xhat_;
    std::vector<float> inv_std_;
};

// In-place ReLU; keeps the output for the backward mask.
class ReLU {
public:
    void forward(Tensor& x);
    void backward(Tensor& dy) const;

private:
    Tensor out_;
};

class MaxPool2 {
public:
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy) const;

private:
    std::size_t in_h_ = 0, in_w_ = 0;
    std::vector<std::uint32_t> argmax_;
};

Tensor upsample2_nearest(const Tensor& x);
Tensor upsample2_nearest_backward(const Tensor& dy);

Tensor concat_channels(const Tensor& a, const Tensor& b);
// Splits a gradient for concat_channels(a, b) back into the two parts.
void split_channels(const Tensor& d, std::size_t a_channels, Tensor& da, Tensor& db);

// conv -> batch norm -> ReLU
class ConvBnRelu {
public:
    ConvBnRelu() = default;
    ConvBnRelu(const std::string& name, std::size_t in_channels, std::size_t out_channels);

    Tensor forward(const Tensor& x, bool use_batch_stats);
    Tensor backward(const Tensor& dy, bool want_input_grad = true);

    Conv2d conv;
    BatchNorm2d bn;

private:
    ReLU relu_;
};

}  // namespace angiodg::nn
