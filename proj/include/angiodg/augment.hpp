#pragma once

#include "angiodg/metrics.hpp"

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include <random>
#include <utility>

// Training-time augmentation of image/mask pairs. Geometric transforms are
// applied identically to image and mask (mask rebinarized at 0.5 after
// resampling); photometric jitter touches the image only.

namespace angiodg::augment {

struct AugConfig {
    double hue_deg = 30.0;      // ± range
    double saturation = 5.0;    // ± range, 8-bit HSV units
    double value = 15.0;        // ± range, 8-bit HSV units
    bool hflip = true;
    bool vflip = true;
    bool rot90 = true;
    double shift = 0.05;        // ± fraction of image size
    double scale = 0.1;         // ± relative
    double aspect = 0.1;        // ± relative
    double rotation_deg = 30.0; // ± range
    double probability = 0.5;   // per transform

    static AugConfig disabled();
};

nlohmann::json to_json(const AugConfig& cfg);
AugConfig aug_config_from_json(const nlohmann::json& j);

// Parameters of a shift-scale-rotate about the image centre. A source point p
// maps to c + shift + R(angle)·diag(sx, sy)·(p - c), with R the rotation in
// (x right, y down) pixel coordinates and sx = (1+scale)·(1+aspect), sy = 1+scale.
struct AffineDraw {
    double shift_x = 0.0;  // fraction of width
    double shift_y = 0.0;  // fraction of height
    double scale = 0.0;
    double aspect = 0.0;
    double angle_deg = 0.0;

    bool identity() const noexcept;
};

struct AugDraw {
    bool hflip = false;
    bool vflip = false;
    int rot90 = 0;  // quarter turns, 0..3
    AffineDraw affine;
    double hue_deg = 0.0;
    double saturation = 0.0;
    double value = 0.0;
};

// Samples one augmentation; consumes a fixed number of RNG draws regardless of outcome.
AugDraw draw(const AugConfig& cfg, std::mt19937_64& rng);

// 2x3 forward matrix for the affine draw.
cv::Matx23d affine_matrix(const AffineDraw& a, int rows, int cols);

std::pair<cv::Mat, metrics::BinaryMask> apply(const cv::Mat& image, const metrics::BinaryMask& mask,
                                              const AugDraw& d);

std::pair<cv::Mat, metrics::BinaryMask> augment(const cv::Mat& image, const metrics::BinaryMask& mask,
                                                const AugConfig& cfg, std::mt19937_64& rng);

}  // namespace angiodg::augment
