#include "angiodg/metrics.hpp"

#include "angiodg/errors.hpp"

#include <algorithm>
#include <array>
#include <stdexcept>
#include <string>

namespace angiodg::metrics {

BinaryMask::BinaryMask(std::size_t height, std::size_t width)
    : height_(height), width_(width), pixels_(height * width, 0) {
    if (height == 0 || width == 0) throw ShapeError("BinaryMask: dimensions must be >= 1");
}

BinaryMask::BinaryMask(std::size_t height, std::size_t width, std::vector<std::uint8_t> pixels)
    : height_(height), width_(width), pixels_(std::move(pixels)) {
    if (height == 0 || width == 0) throw ShapeError("BinaryMask: dimensions must be >= 1");
    if (pixels_.size() != height * width) {
        throw ShapeError("BinaryMask: expected " + std::to_string(height * width) + " pixels, got " +
                         std::to_string(pixels_.size()));
    }
    if (std::any_of(pixels_.begin(), pixels_.end(), [](std::uint8_t v) { return v > 1; })) {
        throw std::invalid_argument("BinaryMask: pixel values must be 0 or 1");
    }
}

BinaryMask BinaryMask::from_probabilities(std::size_t height, std::size_t width,
                                          std::span<const float> probs, float threshold) {
    if (probs.size() != height * width) throw ShapeError("from_probabilities: size mismatch");
    std::vector<std::uint8_t> px(probs.size());
    std::transform(probs.begin(), probs.end(), px.begin(),
                   [threshold](float p) { return static_cast<std::uint8_t>(p >= threshold); });
    return BinaryMask(height, width, std::move(px));
}

std::size_t BinaryMask::count() const noexcept {
    return static_cast<std::size_t>(std::count(pixels_.begin(), pixels_.end(), std::uint8_t{1}));
}

namespace {

void require_same_shape(const BinaryMask& a, const BinaryMask& b, const char* op) {
    if (a.height() != b.height() || a.width() != b.width()) {
        throw ShapeError(std::string(op) + ": mask dimensions differ (" + std::to_string(a.height()) +
                         "x" + std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                         std::to_string(b.width()) + ")");
    }
}

std::size_t overlap(const BinaryMask& a, const BinaryMask& b) {
    std::size_t n = 0;
    const auto pa = a.pixels();
    const auto pb = b.pixels();
    for (std::size_t i = 0; i < pa.size(); ++i) n += pa[i] & pb[i];
    return n;
}

}  // namespace

double dice(const BinaryMask& pred, const BinaryMask& gt) {
    require_same_shape(pred, gt, "dice");
    const std::size_t p = pred.count();
    const std::size_t g = gt.count();
    if (p + g == 0) return 1.0;
    return static_cast<double>(2 * overlap(pred, gt)) / static_cast<double>(p + g);
}

BinaryMask skeletonize(const BinaryMask& mask) {
    const std::size_t h = mask.height();
    const std::size_t w = mask.width();
    if (h == 0) return mask;

    // Padded working grid so neighbour reads never leave the buffer.
    const std::size_t pw = w + 2;
    std::vector<std::uint8_t> g((h + 2) * pw, 0);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) g[(r + 1) * pw + c + 1] = mask(r, c);

    std::vector<std::size_t> doomed;
    bool changed = true;
    while (changed) {
        changed = false;
        for (int pass = 0; pass < 2; ++pass) {
            doomed.clear();
            for (std::size_t r = 1; r <= h; ++r) {
                for (std::size_t c = 1; c <= w; ++c) {
                    const std::size_t i = r * pw + c;
                    if (!g[i]) continue;
                    // P2..P9 clockwise from north.
                    const std::array<std::uint8_t, 8> p = {g[i - pw],     g[i - pw + 1], g[i + 1],
                                                           g[i + pw + 1], g[i + pw],     g[i + pw - 1],
                                                           g[i - 1],      g[i - pw - 1]};
                    int b = 0;
                    int a = 0;
                    for (int k = 0; k < 8; ++k) {
                        b += p[k];
                        a += (p[k] == 0 && p[(k + 1) % 8] == 1);
                    }
                    if (b < 2 || b > 6 || a != 1) continue;
                    const bool n = p[0], e = p[2], s = p[4], wst = p[6];
                    if (pass == 0) {
                        if ((n && e && s) || (e && s && wst)) continue;
                    } else {
                        if ((n && e && wst) || (n && s && wst)) continue;
                    }
                    doomed.push_back(i);
                }
            }
            for (std::size_t i : doomed) g[i] = 0;
            changed = changed || !doomed.empty();
        }
    }

    BinaryMask out(h, w);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) out.set(r, c, g[(r + 1) * pw + c + 1] != 0);
    return out;
}

double cl_dice(const BinaryMask& pred, const BinaryMask& gt) {
    require_same_shape(pred, gt, "cl_dice");
    const BinaryMask sp = skeletonize(pred);
    const BinaryMask sg = skeletonize(gt);
    const std::uint64_t sp_n = sp.count();
    const std::uint64_t sg_n = sg.count();
    if (sp_n == 0 && sg_n == 0) return 1.0;
    if (sp_n == 0 || sg_n == 0) return 0.0;
    // Tprec = a/sp_n, Tsens = c/sg_n; 2·Tprec·Tsens/(Tprec+Tsens) = 2ac / (a·sg_n + c·sp_n).
    const std::uint64_t a = overlap(sp, gt);
    const std::uint64_t c = overlap(sg, pred);
    const std::uint64_t den = a * sg_n + c * sp_n;
    if (den == 0) return 0.0;
    return static_cast<double>(2 * a * c) / static_cast<double>(den);
}

MetricPair evaluate_pair(const BinaryMask& pred, const BinaryMask& gt) {
    return {dice(pred, gt), cl_dice(pred, gt)};
}

double relative_change(double dropped_score, double baseline_score) {
    if (baseline_score == 0.0) {
        throw UndefinedBaselineError("relative_change: baseline score is zero");
    }
    return (dropped_score - baseline_score) / baseline_score;
}

}  // namespace angiodg::metrics
