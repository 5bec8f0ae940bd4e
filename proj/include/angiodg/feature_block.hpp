#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <vector>

namespace angiodg {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// First-layer activations (N, C, H, W) in double precision, NCHW order.
struct FeatureBlock {
    std::size_t n = 0;
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;
    std::vector<double> values;

    FeatureBlock() = default;
    FeatureBlock(std::size_t n_, std::size_t c_, std::size_t h_, std::size_t w_)
        : n(n_), c(c_), h(h_), w(w_), values(n_ * c_ * h_ * w_, 0.0) {}

    std::size_t spatial() const noexcept { return h * w; }
    std::size_t sample_size() const noexcept { return c * h * w; }

    double& at(std::size_t ni, std::size_t ci, std::size_t y, std::size_t x) noexcept {
        return values[((ni * c + ci) * h + y) * w + x];
    }
    double at(std::size_t ni, std::size_t ci, std::size_t y, std::size_t x) const noexcept {
        return values[((ni * c + ci) * h + y) * w + x];
    }

    std::span<double> channel(std::size_t ni, std::size_t ci) noexcept {
        return {values.data() + (ni * c + ci) * spatial(), spatial()};
    }
    std::span<const double> channel(std::size_t ni, std::size_t ci) const noexcept {
        return {values.data() + (ni * c + ci) * spatial(), spatial()};
    }

    // Sample `ni` viewed as the (C, H·W) flattening.
    Eigen::Map<RowMatrix> flat(std::size_t ni) noexcept {
        return {values.data() + ni * sample_size(), static_cast<Eigen::Index>(c),
                static_cast<Eigen::Index>(spatial())};
    }
    Eigen::Map<const RowMatrix> flat(std::size_t ni) const noexcept {
        return {values.data() + ni * sample_size(), static_cast<Eigen::Index>(c),
                static_cast<Eigen::Index>(spatial())};
    }

    friend bool operator==(const FeatureBlock&, const FeatureBlock&) = default;
};

}  // namespace angiodg
