#include "angiodg/augment.hpp"

#include "angiodg/datagen.hpp"

#include <opencv2/imgproc.hpp>

#include <cmath>
#include <numbers>

namespace angiodg::augment {

AugConfig AugConfig::disabled() {
    AugConfig c;
    c.hue_deg = c.saturation = c.value = 0.0;
    c.hflip = c.vflip = c.rot90 = false;
    c.shift = c.scale = c.aspect = c.rotation_deg = 0.0;
    return c;
}

nlohmann::json to_json(const AugConfig& c) {
    return {{"hue_deg", c.hue_deg},   {"saturation", c.saturation}, {"value", c.value},
            {"hflip", c.hflip},       {"vflip", c.vflip},           {"rot90", c.rot90},
            {"shift", c.shift},       {"scale", c.scale},           {"aspect", c.aspect},
            {"rotation_deg", c.rotation_deg}, {"probability", c.probability}};
}

AugConfig aug_config_from_json(const nlohmann::json& j) {
    AugConfig c;
    c.hue_deg = j.value("hue_deg", c.hue_deg);
    c.saturation = j.value("saturation", c.saturation);
    c.value = j.value("value", c.value);
    c.hflip = j.value("hflip", c.hflip);
    c.vflip = j.value("vflip", c.vflip);
    c.rot90 = j.value("rot90", c.rot90);
    c.shift = j.value("shift", c.shift);
    c.scale = j.value("scale", c.scale);
    c.aspect = j.value("aspect", c.aspect);
    c.rotation_deg = j.value("rotation_deg", c.rotation_deg);
    c.probability = j.value("probability", c.probability);
    return c;
}

bool AffineDraw::identity() const noexcept {
    return shift_x == 0.0 && shift_y == 0.0 && scale == 0.0 && aspect == 0.0 && angle_deg == 0.0;
}

AugDraw draw(const AugConfig& cfg, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto sym = [&](double r) { return (2.0 * unit(rng) - 1.0) * r; };
    auto coin = [&]() { return unit(rng) < cfg.probability; };

    AugDraw d;
    d.hflip = coin() && cfg.hflip;
    d.vflip = coin() && cfg.vflip;
    const bool turn = coin() && cfg.rot90;
    const int quarter = 1 + static_cast<int>(unit(rng) * 3.0);
    d.rot90 = turn ? std::min(quarter, 3) : 0;

    const bool affine = coin();
    AffineDraw a{sym(cfg.shift), sym(cfg.shift), sym(cfg.scale), sym(cfg.aspect), sym(cfg.rotation_deg)};
    if (affine) d.affine = a;

    const bool photometric = coin();
    const double hue = sym(cfg.hue_deg);
    const double sat = sym(cfg.saturation);
    const double val = sym(cfg.value);
    if (photometric) {
        d.hue_deg = hue;
        d.saturation = sat;
        d.value = val;
    }
    return d;
}

cv::Matx23d affine_matrix(const AffineDraw& a, int rows, int cols) {
    const double cx = (cols - 1) / 2.0;
    const double cy = (rows - 1) / 2.0;
    const double th = a.angle_deg * std::numbers::pi / 180.0;
    const double sx = (1.0 + a.scale) * (1.0 + a.aspect);
    const double sy = 1.0 + a.scale;
    const double m00 = std::cos(th) * sx, m01 = -std::sin(th) * sy;
    const double m10 = std::sin(th) * sx, m11 = std::cos(th) * sy;
    const double tx = cx + a.shift_x * cols - (m00 * cx + m01 * cy);
    const double ty = cy + a.shift_y * rows - (m10 * cx + m11 * cy);
    return {m00, m01, tx, m10, m11, ty};
}

namespace {

cv::Mat geometric(const cv::Mat& src, const AugDraw& d, int interp) {
    cv::Mat out = src.clone();
    if (d.hflip) cv::flip(out, out, 1);
    if (d.vflip) cv::flip(out, out, 0);
    if (d.rot90 == 1) cv::rotate(out, out, cv::ROTATE_90_CLOCKWISE);
    if (d.rot90 == 2) cv::rotate(out, out, cv::ROTATE_180);
    if (d.rot90 == 3) cv::rotate(out, out, cv::ROTATE_90_COUNTERCLOCKWISE);
    if (!d.affine.identity()) {
        cv::Mat warped;
        cv::warpAffine(out, warped, cv::Mat(affine_matrix(d.affine, out.rows, out.cols)), out.size(), interp,
                       cv::BORDER_CONSTANT, cv::Scalar(0));
        out = warped;
    }
    return out;
}

cv::Mat photometric(const cv::Mat& gray, const AugDraw& d) {
    if (d.hue_deg == 0.0 && d.saturation == 0.0 && d.value == 0.0) return gray;
    cv::Mat bgr, hsv;
    cv::cvtColor(gray, bgr, cv::COLOR_GRAY2BGR);
    cv::cvtColor(bgr, hsv, cv::COLOR_BGR2HSV);
    const int dh = static_cast<int>(std::lround(d.hue_deg / 2.0));  // 8-bit hue spans 0..179
    const int ds = static_cast<int>(std::lround(d.saturation));
    const int dv = static_cast<int>(std::lround(d.value));
    for (int y = 0; y < hsv.rows; ++y) {
        for (int x = 0; x < hsv.cols; ++x) {
            auto& px = hsv.at<cv::Vec3b>(y, x);
            px[0] = static_cast<std::uint8_t>(((px[0] + dh) % 180 + 180) % 180);
            px[1] = cv::saturate_cast<std::uint8_t>(px[1] + ds);
            px[2] = cv::saturate_cast<std::uint8_t>(px[2] + dv);
        }
    }
    cv::Mat out;
    cv::cvtColor(hsv, bgr, cv::COLOR_HSV2BGR);
    cv::cvtColor(bgr, out, cv::COLOR_BGR2GRAY);
    return out;
}

}  // namespace

std::pair<cv::Mat, metrics::BinaryMask> apply(const cv::Mat& image, const metrics::BinaryMask& mask,
                                              const AugDraw& d) {
    cv::Mat img = photometric(geometric(image, d, cv::INTER_LINEAR), d);

    cv::Mat m = data::mask_to_image(mask);
    m = geometric(m, d, cv::INTER_LINEAR);
    return {img, data::rebinarize(m)};
}

std::pair<cv::Mat, metrics::BinaryMask> augment(const cv::Mat& image, const metrics::BinaryMask& mask,
                                                const AugConfig& cfg, std::mt19937_64& rng) {
    return apply(image, mask, draw(cfg, rng));
}

}  // namespace angiodg::augment
