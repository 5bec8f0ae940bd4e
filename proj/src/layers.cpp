#include "angiodg/layers.hpp"

#include "angiodg/errors.hpp"
#include "angiodg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

namespace angiodg::nn {

void Parameter::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }

namespace {

// Expands one sample (C, H, W) into (C·k·k, H·W) patches for a "same" convolution.
void im2col(const float* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
            float* col) {
    const std::size_t hw = h * w;
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    for (std::size_t ci = 0; ci < channels; ++ci) {
        const float* src = x + ci * hw;
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                float* dst = col + ((ci * k + ky) * k + kx) * hw;
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
                for (std::size_t y = 0; y < h; ++y) {
                    float* row = dst + y * w;
                    const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
                    if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) {
                        std::fill(row, row + w, 0.0f);
                        continue;
                    }
                    const float* srow = src + static_cast<std::size_t>(sy) * w;
                    if (dx == 0) {
                        std::memcpy(row, srow, w * sizeof(float));
                    } else if (dx < 0) {
                        const auto s = static_cast<std::size_t>(-dx);
                        std::fill(row, row + s, 0.0f);
                        std::memcpy(row + s, srow, (w - s) * sizeof(float));
                    } else {
                        const auto s = static_cast<std::size_t>(dx);
                        std::memcpy(row, srow + s, (w - s) * sizeof(float));
                        std::fill(row + w - s, row + w, 0.0f);
                    }
                }
            }
        }
    }
}

}  // namespace

Conv2d::Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
               bool with_bias)
    : weight(name + ".weight", out_channels * in_channels * kernel * kernel),
      in_(in_channels),
      out_(out_channels),
      k_(kernel),
      has_bias_(with_bias) {
    if (kernel != 1 && kernel != 3) throw std::invalid_argument("Conv2d: kernel must be 1 or 3");
    if (with_bias) bias = Parameter(name + ".bias", out_channels);
}

void Conv2d::init(std::mt19937_64& rng) {
    const double fan_in = static_cast<double>(in_ * k_ * k_);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (float& v : weight.value) v = static_cast<float>(dist(rng));
    std::fill(bias.value.begin(), bias.value.end(), 0.0f);
}

Tensor Conv2d::forward(const Tensor& x) {
    if (x.c != in_) {
        throw ShapeError(weight.name + ": expected " + std::to_string(in_) + " input channels, got " +
                         std::to_string(x.c));
    }
    input_ = x;
    Tensor y(x.n, out_, x.h, x.w);
    const std::size_t hw = x.spatial();
    const std::size_t kk = in_ * k_ * k_;
    if (k_ > 1) col_.resize(kk * hw);
    for (std::size_t s = 0; s < x.n; ++s) {
        const float* cols = x.sample(s);
        if (k_ > 1) {
            im2col(x.sample(s), in_, x.h, x.w, k_, col_.data());
            cols = col_.data();
        }
        float* ys = y.sample(s);
        if (has_bias_) {
            for (std::size_t o = 0; o < out_; ++o) std::fill(ys + o * hw, ys + (o + 1) * hw, bias.value[o]);
        }
        kernels::gemm_nn(out_, hw, kk, weight.value.data(), kk, cols, hw, ys, hw);
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& dy, bool want_input_grad) {
    const Tensor& x = input_;
    const std::size_t hw = x.spatial();
    const std::size_t kk = in_ * k_ * k_;
    const std::size_t taps = k_ * k_;
    // The input gradient is a "same" convolution of dy with the weights
    // transposed over (out, in) and flipped spatially: wt is (in, out·k·k).
    Tensor dx;
    std::vector<float> wt;
    std::vector<float> dcol;
    if (want_input_grad) {
        dx = Tensor(x.n, in_, x.h, x.w);
        wt.resize(in_ * out_ * taps);
        for (std::size_t o = 0; o < out_; ++o) {
            for (std::size_t i = 0; i < in_; ++i) {
                for (std::size_t t = 0; t < taps; ++t) {
                    wt[(i * out_ + o) * taps + (taps - 1 - t)] = weight.value[(o * in_ + i) * taps + t];
                }
            }
        }
        if (k_ > 1) dcol.resize(out_ * taps * hw);
    }
    for (std::size_t s = 0; s < x.n; ++s) {
        const float* dys = dy.sample(s);
        if (weight.requires_grad) {
            const float* cols = x.sample(s);
            if (k_ > 1) {
                im2col(x.sample(s), in_, x.h, x.w, k_, col_.data());
                cols = col_.data();
            }
            kernels::gemm_nt(out_, kk, hw, dys, hw, cols, hw, weight.grad.data(), kk);
        }
        if (has_bias_ && bias.requires_grad) {
            for (std::size_t o = 0; o < out_; ++o) {
                float acc = 0.0f;
                for (std::size_t i = 0; i < hw; ++i) acc += dys[o * hw + i];
                bias.grad[o] += acc;
            }
        }
        if (want_input_grad) {
            const float* cols = dys;
            if (k_ > 1) {
                im2col(dys, out_, x.h, x.w, k_, dcol.data());
                cols = dcol.data();
            }
            kernels::gemm_nn(in_, hw, out_ * taps, wt.data(), out_ * taps, cols, hw, dx.sample(s), hw);
        }
    }
    return dx;
}

BatchNorm2d::BatchNorm2d(std::string name, std::size_t channels)
    : gamma(name + ".gamma", channels),
      beta(name + ".beta", channels),
      running_mean(channels, 0.0f),
      running_var(channels, 1.0f),
      ch_(channels) {
    std::fill(gamma.value.begin(), gamma.value.end(), 1.0f);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool use_batch_stats) {
    if (x.c != ch_) throw ShapeError(gamma.name + ": channel mismatch");
    batch_mode_ = use_batch_stats;
    xhat_ = Tensor(x.n, x.c, x.h, x.w);
    inv_std_.assign(ch_, 0.0f);
    Tensor y(x.n, x.c, x.h, x.w);
    const std::size_t hw = x.spatial();
    const double m = static_cast<double>(x.n * hw);
    for (std::size_t c = 0; c < ch_; ++c) {
        double mean = running_mean[c];
        double var = running_var[c];
        if (use_batch_stats) {
            double s = 0.0;
            for (std::size_t ni = 0; ni < x.n; ++ni) {
                const float* p = x.channel(ni, c);
                for (std::size_t i = 0; i < hw; ++i) s += p[i];
            }
            mean = s / m;
            double ss = 0.0;
            for (std::size_t ni = 0; ni < x.n; ++ni) {
                const float* p = x.channel(ni, c);
                for (std::size_t i = 0; i < hw; ++i) ss += (p[i] - mean) * (p[i] - mean);
            }
            var = ss / m;
            const double unbiased = m > 1.0 ? var * m / (m - 1.0) : var;
            running_mean[c] = static_cast<float>((1.0 - momentum) * running_mean[c] + momentum * mean);
            running_var[c] = static_cast<float>((1.0 - momentum) * running_var[c] + momentum * unbiased);
        }
        const float istd = static_cast<float>(1.0 / std::sqrt(var + eps));
        const float fmean = static_cast<float>(mean);
        inv_std_[c] = istd;
        const float g = gamma.value[c];
        const float b = beta.value[c];
        for (std::size_t ni = 0; ni < x.n; ++ni) {
            const float* p = x.channel(ni, c);
            float* xh = xhat_.channel(ni, c);
            float* out = y.channel(ni, c);
            for (std::size_t i = 0; i < hw; ++i) {
                xh[i] = (p[i] - fmean) * istd;
                out[i] = g * xh[i] + b;
            }
        }
    }
    return y;
}

Tensor BatchNorm2d::backward(const Tensor& dy) {
    Tensor dx(dy.n, dy.c, dy.h, dy.w);
    const std::size_t hw = dy.spatial();
    const double m = static_cast<double>(dy.n * hw);
    for (std::size_t c = 0; c < ch_; ++c) {
        double sum_dy = 0.0;
        double sum_dy_xhat = 0.0;
        for (std::size_t ni = 0; ni < dy.n; ++ni) {
            const float* d = dy.channel(ni, c);
            const float* xh = xhat_.channel(ni, c);
            for (std::size_t i = 0; i < hw; ++i) {
                sum_dy += d[i];
                sum_dy_xhat += static_cast<double>(d[i]) * xh[i];
            }
        }
        if (gamma.requires_grad) gamma.grad[c] += static_cast<float>(sum_dy_xhat);
        if (beta.requires_grad) beta.grad[c] += static_cast<float>(sum_dy);

        const float g = gamma.value[c];
        const float istd = inv_std_[c];
        if (batch_mode_) {
            const float mean_dy = static_cast<float>(sum_dy / m);
            const float mean_dy_xhat = static_cast<float>(sum_dy_xhat / m);
            for (std::size_t ni = 0; ni < dy.n; ++ni) {
                const float* d = dy.channel(ni, c);
                const float* xh = xhat_.channel(ni, c);
                float* out = dx.channel(ni, c);
                for (std::size_t i = 0; i < hw; ++i) out[i] = g * istd * (d[i] - mean_dy - xh[i] * mean_dy_xhat);
            }
        } else {
            const float scale = g * istd;
            for (std::size_t ni = 0; ni < dy.n; ++ni) {
                const float* d = dy.channel(ni, c);
                float* out = dx.channel(ni, c);
                for (std::size_t i = 0; i < hw; ++i) out[i] = scale * d[i];
            }
        }
    }
    return dx;
}

void ReLU::forward(Tensor& x) {
    for (float& v : x.data) v = v > 0.0f ? v : 0.0f;
    out_ = x;
}

void ReLU::backward(Tensor& dy) const {
    for (std::size_t i = 0; i < dy.data.size(); ++i) {
        if (out_.data[i] <= 0.0f) dy.data[i] = 0.0f;
    }
}

Tensor MaxPool2::forward(const Tensor& x) {
    if (x.h % 2 != 0 || x.w % 2 != 0) throw ShapeError("MaxPool2: odd spatial size");
    in_h_ = x.h;
    in_w_ = x.w;
    Tensor y(x.n, x.c, x.h / 2, x.w / 2);
    argmax_.assign(y.size(), 0);
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < x.n * x.c; ++nc) {
        const float* src = x.data.data() + nc * x.spatial();
        for (std::size_t yy = 0; yy < y.h; ++yy) {
            for (std::size_t xx = 0; xx < y.w; ++xx, ++o) {
                const std::size_t base = 2 * yy * x.w + 2 * xx;
                std::size_t best = base;
                for (std::size_t cand : {base + 1, base + x.w, base + x.w + 1}) {
                    if (src[cand] > src[best]) best = cand;
                }
                y.data[o] = src[best];
                argmax_[o] = static_cast<std::uint32_t>(best);
            }
        }
    }
    return y;
}

Tensor MaxPool2::backward(const Tensor& dy) const {
    Tensor dx(dy.n, dy.c, in_h_, in_w_);
    const std::size_t out_sp = dy.spatial();
    const std::size_t in_sp = in_h_ * in_w_;
    for (std::size_t nc = 0; nc < dy.n * dy.c; ++nc) {
        for (std::size_t i = 0; i < out_sp; ++i) {
            const std::size_t o = nc * out_sp + i;
            dx.data[nc * in_sp + argmax_[o]] += dy.data[o];
        }
    }
    return dx;
}

Tensor upsample2_nearest(const Tensor& x) {
    Tensor y(x.n, x.c, x.h * 2, x.w * 2);
    for (std::size_t nc = 0; nc < x.n * x.c; ++nc) {
        const float* src = x.data.data() + nc * x.spatial();
        float* dst = y.data.data() + nc * y.spatial();
        for (std::size_t yy = 0; yy < y.h; ++yy) {
            const float* srow = src + (yy / 2) * x.w;
            float* drow = dst + yy * y.w;
            for (std::size_t xx = 0; xx < y.w; ++xx) drow[xx] = srow[xx / 2];
        }
    }
    return y;
}

Tensor upsample2_nearest_backward(const Tensor& dy) {
    Tensor dx(dy.n, dy.c, dy.h / 2, dy.w / 2);
    for (std::size_t nc = 0; nc < dy.n * dy.c; ++nc) {
        const float* src = dy.data.data() + nc * dy.spatial();
        float* dst = dx.data.data() + nc * dx.spatial();
        for (std::size_t yy = 0; yy < dy.h; ++yy) {
            const float* srow = src + yy * dy.w;
            float* drow = dst + (yy / 2) * dx.w;
            for (std::size_t xx = 0; xx < dy.w; ++xx) drow[xx / 2] += srow[xx];
        }
    }
    return dx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.n != b.n || a.h != b.h || a.w != b.w) throw ShapeError("concat_channels: shape mismatch");
    Tensor y(a.n, a.c + b.c, a.h, a.w);
    for (std::size_t s = 0; s < a.n; ++s) {
        std::copy(a.sample(s), a.sample(s) + a.sample_size(), y.sample(s));
        std::copy(b.sample(s), b.sample(s) + b.sample_size(), y.sample(s) + a.sample_size());
    }
    return y;
}

void split_channels(const Tensor& d, std::size_t a_channels, Tensor& da, Tensor& db) {
    da = Tensor(d.n, a_channels, d.h, d.w);
    db = Tensor(d.n, d.c - a_channels, d.h, d.w);
    for (std::size_t s = 0; s < d.n; ++s) {
        std::copy(d.sample(s), d.sample(s) + da.sample_size(), da.sample(s));
        std::copy(d.sample(s) + da.sample_size(), d.sample(s) + d.sample_size(), db.sample(s));
    }
}

ConvBnRelu::ConvBnRelu(const std::string& name, std::size_t in_channels, std::size_t out_channels)
    : conv(name + ".conv", in_channels, out_channels, 3, false), bn(name + ".bn", out_channels) {}

Tensor ConvBnRelu::forward(const Tensor& x, bool use_batch_stats) {
    Tensor y = bn.forward(conv.forward(x), use_batch_stats);
    relu_.forward(y);
    return y;
}

Tensor ConvBnRelu::backward(const Tensor& dy, bool want_input_grad) {
    Tensor d = dy;
    relu_.backward(d);
    return conv.backward(bn.backward(d), want_input_grad);
}

}  // namespace angiodg::nn
