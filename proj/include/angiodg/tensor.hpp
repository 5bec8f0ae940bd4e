#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace angiodg {

// Dense float tensor in NCHW order.
struct Tensor {
    std::size_t n = 0;
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::size_t n_, std::size_t c_, std::size_t h_, std::size_t w_, float fill = 0.0f)
        : n(n_), c(c_), h(h_), w(w_), data(n_ * c_ * h_ * w_, fill) {}

    std::size_t spatial() const noexcept { return h * w; }
    std::size_t sample_size() const noexcept { return c * h * w; }
    std::size_t size() const noexcept { return data.size(); }
    bool same_shape(const Tensor& o) const noexcept { return n == o.n && c == o.c && h == o.h && w == o.w; }

    float* sample(std::size_t ni) noexcept { return data.data() + ni * sample_size(); }
    const float* sample(std::size_t ni) const noexcept { return data.data() + ni * sample_size(); }
    float* channel(std::size_t ni, std::size_t ci) noexcept { return sample(ni) + ci * spatial(); }
    const float* channel(std::size_t ni, std::size_t ci) const noexcept { return sample(ni) + ci * spatial(); }

    float& at(std::size_t ni, std::size_t ci, std::size_t y, std::size_t x) noexcept {
        return data[((ni * c + ci) * h + y) * w + x];
    }
    float at(std::size_t ni, std::size_t ci, std::size_t y, std::size_t x) const noexcept {
        return data[((ni * c + ci) * h + y) * w + x];
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

}  // namespace angiodg
