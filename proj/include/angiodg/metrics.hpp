#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace angiodg::metrics {

// Binary segmentation mask, row-major, values strictly 0 or 1.
class BinaryMask {
public:
    BinaryMask() = default;
    // All-zero mask. Throws ShapeError if either dimension is zero.
    BinaryMask(std::size_t height, std::size_t width);
    // Throws ShapeError on size mismatch and std::invalid_argument on non-binary values.
    BinaryMask(std::size_t height, std::size_t width, std::vector<std::uint8_t> pixels);

    // Thresholds probabilities at `threshold` (p >= threshold -> 1).
    static BinaryMask from_probabilities(std::size_t height, std::size_t width,
                                         std::span<const float> probs, float threshold = 0.5f);

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t size() const noexcept { return pixels_.size(); }

    std::uint8_t operator()(std::size_t row, std::size_t col) const noexcept {
        return pixels_[row * width_ + col];
    }
    void set(std::size_t row, std::size_t col, bool on) noexcept {
        pixels_[row * width_ + col] = on ? 1 : 0;
    }

    std::span<const std::uint8_t> pixels() const noexcept { return pixels_; }
    std::size_t count() const noexcept;
    bool empty_foreground() const noexcept { return count() == 0; }

    friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<std::uint8_t> pixels_;
};

struct MetricPair {
    double dice = 0.0;
    double cl_dice = 0.0;
};

// 2|P∩G| / (|P|+|G|). Both masks empty gives 1.0.
double dice(const BinaryMask& pred, const BinaryMask& gt);

// Zhang–Suen two-subiteration thinning, iterated to a fixed point. Pixels
// outside the grid count as background.
BinaryMask skeletonize(const BinaryMask& mask);

// Harmonic mean of topological precision |S(P)∩G|/|S(P)| and topological
// sensitivity |S(G)∩P|/|S(G)|. Both skeletons empty gives 1.0, exactly one
// empty gives 0.0.
double cl_dice(const BinaryMask& pred, const BinaryMask& gt);

MetricPair evaluate_pair(const BinaryMask& pred, const BinaryMask& gt);

// (dropped - baseline) / baseline. Throws UndefinedBaselineError when baseline == 0.
double relative_change(double dropped_score, double baseline_score);

}  // namespace angiodg::metrics
