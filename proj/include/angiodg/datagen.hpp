#pragma once

#include "angiodg/metrics.hpp"
#include "angiodg/tensor.hpp"

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace angiodg::data {

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

struct VesselSpec {
    Range branch_depth{1, 3};   // recursion depth of each tree
    Range width{2.0, 4.0};      // root width in px; children taper
    Range curvature{0.05, 0.3}; // control-point offset relative to segment length
    Range count{2, 3};          // trees per image
    double contrast = 0.45;     // fractional darkening of vessel pixels
};

struct BackgroundSpec {
    double base_intensity = 0.70;
    double gradient_strength = 0.15;
    double blob_density = 2.0;  // expected number of shadow blobs per image
    double blob_strength = 0.20;
};

struct ShiftSpec {
    bool invert = false;
    double contrast_scale = 1.0;
    double gaussian_noise_sd = 0.02;  // in [0,1] intensity units
    double blur_sigma = 0.0;
};

struct DomainSpec {
    std::string name = "source";
    VesselSpec vessel;
    BackgroundSpec background;
    ShiftSpec shift;
    std::size_t height = 128;
    std::size_t width = 128;

    // Throws ConfigError on widths < 1, negative noise, nonpositive contrast or empty sizes.
    void validate() const;
};

nlohmann::json to_json(const DomainSpec& spec);
DomainSpec domain_from_json(const nlohmann::json& j);

struct Sample {
    std::string id;
    cv::Mat image;  // CV_8UC1
    metrics::BinaryMask mask;
};

struct Dataset {
    std::string name;
    std::vector<Sample> samples;

    bool empty() const noexcept { return samples.empty(); }
    std::size_t size() const noexcept { return samples.size(); }
};

struct SourceSplits {
    Dataset train;
    Dataset val;
    Dataset test;
};

// Derives an independent 64-bit seed for stream `index` of `seed`.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

// Renders background, recursive quadratic-Bézier vessel trees with tapering
// width, then applies contrast, blur, inversion and noise in that order.
// Deterministic in (spec, seed).
Sample generate_sample(const DomainSpec& spec, std::uint64_t seed);

Dataset generate_dataset(const DomainSpec& spec, std::size_t count, std::uint64_t seed);

// Index-ordered 60/20/20 split of `total` generated samples.
SourceSplits generate_source_splits(const DomainSpec& spec, std::size_t total, std::uint64_t seed);
SourceSplits generate_source_splits(const DomainSpec& spec, std::size_t n_train, std::size_t n_val,
                                    std::size_t n_test, std::uint64_t seed);

enum class ResizePolicy { none, pad, upsample };

struct Preprocessing {
    ResizePolicy policy = ResizePolicy::none;
    std::size_t target_height = 512;
    std::size_t target_width = 512;
};

ResizePolicy resize_policy_from_string(const std::string& s);

// Mask from an 8-bit image: value/255 >= 0.5 becomes foreground.
metrics::BinaryMask rebinarize(const cv::Mat& mask8);
cv::Mat mask_to_image(const metrics::BinaryMask& mask);

// Applies the resize policy to an image/mask pair.
Sample preprocess(Sample sample, const Preprocessing& prep);

// Writes images/<id>.png and masks/<id>.png under `dir`.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);

// Reads images/*.png with masks/<same name>, grayscale, sorted by file name.
// Throws IngestionError listing any image without a mask.
Dataset ingest_dataset(const std::filesystem::path& dir, const Preprocessing& prep = {});

// Stacks images into an (N, 1, H, W) tensor scaled to [0, 1].
Tensor to_tensor(std::span<const cv::Mat> images);
Tensor masks_to_tensor(std::span<const metrics::BinaryMask> masks);

}  // namespace angiodg::data
