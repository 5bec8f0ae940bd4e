#include "angiodg/datagen.hpp"

#include "angiodg/errors.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace angiodg::data {

namespace fs = std::filesystem;

void DomainSpec::validate() const {
    if (height == 0 || width == 0) throw ConfigError("domain '" + name + "': empty image size");
    if (vessel.width.lo < 1.0 || vessel.width.hi < vessel.width.lo) {
        throw ConfigError("domain '" + name + "': vessel widths must be >= 1 px with lo <= hi");
    }
    if (vessel.count.lo < 0 || vessel.count.hi < vessel.count.lo) throw ConfigError("domain '" + name + "': bad vessel count range");
    if (vessel.branch_depth.lo < 0 || vessel.branch_depth.hi < vessel.branch_depth.lo) {
        throw ConfigError("domain '" + name + "': bad branch depth range");
    }
    if (shift.gaussian_noise_sd < 0.0) throw ConfigError("domain '" + name + "': noise sd must be >= 0");
    if (!(shift.contrast_scale > 0.0)) throw ConfigError("domain '" + name + "': contrast scale must be > 0");
    if (shift.blur_sigma < 0.0) throw ConfigError("domain '" + name + "': blur sigma must be >= 0");
}

namespace {

nlohmann::json range_json(const Range& r) { return nlohmann::json::array({r.lo, r.hi}); }

Range range_from(const nlohmann::json& j, const char* key, Range fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    return {v.at(0).get<double>(), v.at(1).get<double>()};
}

}  // namespace

nlohmann::json to_json(const DomainSpec& s) {
    return {{"name", s.name},
            {"height", s.height},
            {"width", s.width},
            {"vessel",
             {{"branch_depth", range_json(s.vessel.branch_depth)},
              {"width", range_json(s.vessel.width)},
              {"curvature", range_json(s.vessel.curvature)},
              {"count", range_json(s.vessel.count)},
              {"contrast", s.vessel.contrast}}},
            {"background",
             {{"base_intensity", s.background.base_intensity},
              {"gradient_strength", s.background.gradient_strength},
              {"blob_density", s.background.blob_density},
              {"blob_strength", s.background.blob_strength}}},
            {"shift",
             {{"invert", s.shift.invert},
              {"contrast_scale", s.shift.contrast_scale},
              {"gaussian_noise_sd", s.shift.gaussian_noise_sd},
              {"blur_sigma", s.shift.blur_sigma}}}};
}

DomainSpec domain_from_json(const nlohmann::json& j) {
    DomainSpec s;
    try {
        s.name = j.value("name", s.name);
        s.height = j.value("height", s.height);
        s.width = j.value("width", s.width);
        if (j.contains("vessel")) {
            const auto& v = j.at("vessel");
            s.vessel.branch_depth = range_from(v, "branch_depth", s.vessel.branch_depth);
            s.vessel.width = range_from(v, "width", s.vessel.width);
            s.vessel.curvature = range_from(v, "curvature", s.vessel.curvature);
            s.vessel.count = range_from(v, "count", s.vessel.count);
            s.vessel.contrast = v.value("contrast", s.vessel.contrast);
        }
        if (j.contains("background")) {
            const auto& b = j.at("background");
            s.background.base_intensity = b.value("base_intensity", s.background.base_intensity);
            s.background.gradient_strength = b.value("gradient_strength", s.background.gradient_strength);
            s.background.blob_density = b.value("blob_density", s.background.blob_density);
            s.background.blob_strength = b.value("blob_strength", s.background.blob_strength);
        }
        if (j.contains("shift")) {
            const auto& sh = j.at("shift");
            s.shift.invert = sh.value("invert", s.shift.invert);
            s.shift.contrast_scale = sh.value("contrast_scale", s.shift.contrast_scale);
            s.shift.gaussian_noise_sd = sh.value("gaussian_noise_sd", s.shift.gaussian_noise_sd);
            s.shift.blur_sigma = sh.value("blur_sigma", s.shift.blur_sigma);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("domain spec: ") + e.what());
    }
    s.validate();
    return s;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    // splitmix64 over a combined state
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

namespace {

struct Point {
    double x;
    double y;
};

class Renderer {
public:
    Renderer(const DomainSpec& spec, std::mt19937_64& rng)
        : spec_(spec), rng_(rng), mask_(static_cast<int>(spec.height), static_cast<int>(spec.width), CV_8UC1, cv::Scalar(0)) {}

    double uniform(Range r) { return std::uniform_real_distribution<double>(r.lo, r.hi)(rng_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
    int uniform_int(Range r) {
        return std::uniform_int_distribution<int>(static_cast<int>(std::lround(r.lo)), static_cast<int>(std::lround(r.hi)))(rng_);
    }

    void tree() {
        const double h = static_cast<double>(spec_.height);
        const double w = static_cast<double>(spec_.width);
        const double size = std::min(h, w);
        // Root enters from one of the four borders, heading roughly inwards.
        const int side = std::uniform_int_distribution<int>(0, 3)(rng_);
        const double along = uniform(0.15, 0.85);
        Point p0{};
        double angle = 0.0;
        switch (side) {
            case 0: p0 = {along * w, 0.0}; angle = std::numbers::pi / 2; break;
            case 1: p0 = {w - 1.0, along * h}; angle = std::numbers::pi; break;
            case 2: p0 = {along * w, h - 1.0}; angle = -std::numbers::pi / 2; break;
            default: p0 = {0.0, along * h}; angle = 0.0; break;
        }
        angle += uniform(-0.6, 0.6);
        const double length = uniform(0.5, 0.9) * size;
        const double width = uniform(spec_.vessel.width);
        const int depth = uniform_int(spec_.vessel.branch_depth);
        branch(p0, angle, length, width, depth);
    }

    const cv::Mat& mask() const { return mask_; }

private:
    void branch(Point p0, double angle, double length, double width, int depth) {
        const Point p2{p0.x + length * std::cos(angle), p0.y + length * std::sin(angle)};
        const double bend = uniform(spec_.vessel.curvature) * length * (uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0);
        const Point ctrl{(p0.x + p2.x) / 2 - std::sin(angle) * bend, (p0.y + p2.y) / 2 + std::cos(angle) * bend};
        const double end_width = std::max(1.0, 0.75 * width);
        stroke(p0, ctrl, p2, width, end_width);

        if (depth <= 0) return;
        const int children = std::uniform_int_distribution<int>(1, 2)(rng_);
        for (int c = 0; c < children; ++c) {
            const double t = uniform(0.3, 0.8);
            const Point at = bezier(p0, ctrl, p2, t);
            const double tx = 2 * (1 - t) * (ctrl.x - p0.x) + 2 * t * (p2.x - ctrl.x);
            const double ty = 2 * (1 - t) * (ctrl.y - p0.y) + 2 * t * (p2.y - ctrl.y);
            const double sign = uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0;
            const double child_angle = std::atan2(ty, tx) + sign * uniform(0.45, 1.05);
            const double child_width = std::max(1.0, width * (1.0 - t * 0.25) * 0.7);
            branch(at, child_angle, length * uniform(0.4, 0.7), child_width, depth - 1);
        }
    }

    static Point bezier(Point a, Point b, Point c, double t) {
        const double u = 1 - t;
        return {u * u * a.x + 2 * u * t * b.x + t * t * c.x, u * u * a.y + 2 * u * t * b.y + t * t * c.y};
    }

    void stroke(Point a, Point b, Point c, double w0, double w1) {
        const double approx_len = std::hypot(b.x - a.x, b.y - a.y) + std::hypot(c.x - b.x, c.y - b.y);
        const int steps = std::max(2, static_cast<int>(std::ceil(approx_len * 4)));
        for (int i = 0; i <= steps; ++i) {
            const double t = static_cast<double>(i) / steps;
            stamp(bezier(a, b, c, t), 0.5 * (w0 + (w1 - w0) * t));
        }
    }

    void stamp(Point p, double radius) {
        const int h = mask_.rows;
        const int w = mask_.cols;
        const int r = static_cast<int>(std::ceil(radius));
        const int cx = static_cast<int>(std::lround(p.x));
        const int cy = static_cast<int>(std::lround(p.y));
        for (int y = cy - r; y <= cy + r; ++y) {
            if (y < 0 || y >= h) continue;
            for (int x = cx - r; x <= cx + r; ++x) {
                if (x < 0 || x >= w) continue;
                const double d2 = (x - p.x) * (x - p.x) + (y - p.y) * (y - p.y);
                if (d2 <= radius * radius || (x == cx && y == cy)) mask_.at<std::uint8_t>(y, x) = 1;
            }
        }
    }

    const DomainSpec& spec_;
    std::mt19937_64& rng_;
    cv::Mat mask_;
};

cv::Mat render_background(const DomainSpec& spec, std::mt19937_64& rng) {
    const int h = static_cast<int>(spec.height);
    const int w = static_cast<int>(spec.width);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double theta = unit(rng) * 2 * std::numbers::pi;
    const double gx = std::cos(theta);
    const double gy = std::sin(theta);

    cv::Mat bg(h, w, CV_64FC1);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double ramp = ((x + 0.5) / w - 0.5) * gx + ((y + 0.5) / h - 0.5) * gy;
            bg.at<double>(y, x) = spec.background.base_intensity + spec.background.gradient_strength * ramp;
        }
    }
    const int blobs = std::poisson_distribution<int>(std::max(0.0, spec.background.blob_density))(rng);
    const double size = std::min(h, w);
    for (int b = 0; b < blobs; ++b) {
        const double cx = unit(rng) * w;
        const double cy = unit(rng) * h;
        const double sigma = (0.05 + 0.15 * unit(rng)) * size;
        const double amp = spec.background.blob_strength * (0.5 + 0.5 * unit(rng));
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                bg.at<double>(y, x) -= amp * std::exp(-d2 / (2 * sigma * sigma));
            }
        }
    }
    return bg;
}

}  // namespace

Sample generate_sample(const DomainSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);

    cv::Mat img = render_background(spec, rng);
    Renderer renderer(spec, rng);
    const int trees = renderer.uniform_int(spec.vessel.count);
    for (int t = 0; t < trees; ++t) renderer.tree();
    const cv::Mat& vessel = renderer.mask();

    for (int y = 0; y < img.rows; ++y) {
        for (int x = 0; x < img.cols; ++x) {
            if (vessel.at<std::uint8_t>(y, x)) img.at<double>(y, x) *= (1.0 - spec.vessel.contrast);
        }
    }

    if (spec.shift.contrast_scale != 1.0) {
        const double mean = cv::mean(img)[0];
        img = (img - mean) * spec.shift.contrast_scale + mean;
    }
    if (spec.shift.blur_sigma > 0.0) {
        cv::GaussianBlur(img, img, cv::Size(0, 0), spec.shift.blur_sigma, spec.shift.blur_sigma, cv::BORDER_REFLECT);
    }

    cv::Mat out(img.rows, img.cols, CV_8UC1);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (int y = 0; y < img.rows; ++y) {
        for (int x = 0; x < img.cols; ++x) {
            long q = std::lround(std::clamp(img.at<double>(y, x), 0.0, 1.0) * 255.0);
            if (spec.shift.invert) q = 255 - q;
            if (spec.shift.gaussian_noise_sd > 0.0) q += std::lround(noise(rng) * spec.shift.gaussian_noise_sd * 255.0);
            out.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(std::clamp(q, 0L, 255L));
        }
    }

    std::vector<std::uint8_t> px(vessel.begin<std::uint8_t>(), vessel.end<std::uint8_t>());
    return {"", out, metrics::BinaryMask(spec.height, spec.width, std::move(px))};
}

Dataset generate_dataset(const DomainSpec& spec, std::size_t count, std::uint64_t seed) {
    Dataset ds;
    ds.name = spec.name;
    ds.samples.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Sample s = generate_sample(spec, derive_seed(seed, i));
        char id[32];
        std::snprintf(id, sizeof(id), "%05zu", i);
        s.id = id;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

SourceSplits generate_source_splits(const DomainSpec& spec, std::size_t total, std::uint64_t seed) {
    const std::size_t n_train = total * 60 / 100;
    const std::size_t n_val = total * 20 / 100;
    return generate_source_splits(spec, n_train, n_val, total - n_train - n_val, seed);
}

SourceSplits generate_source_splits(const DomainSpec& spec, std::size_t n_train, std::size_t n_val,
                                    std::size_t n_test, std::uint64_t seed) {
    Dataset all = generate_dataset(spec, n_train + n_val + n_test, seed);
    SourceSplits out;
    auto take = [&all](Dataset& dst, const std::string& name, std::size_t from, std::size_t n) {
        dst.name = name;
        for (std::size_t i = from; i < from + n; ++i) dst.samples.push_back(std::move(all.samples[i]));
    };
    take(out.train, spec.name + "/train", 0, n_train);
    take(out.val, spec.name + "/val", n_train, n_val);
    take(out.test, spec.name + "/test", n_train + n_val, n_test);
    return out;
}

ResizePolicy resize_policy_from_string(const std::string& s) {
    if (s == "none") return ResizePolicy::none;
    if (s == "pad") return ResizePolicy::pad;
    if (s == "upsample") return ResizePolicy::upsample;
    throw ConfigError("unknown resize policy '" + s + "' (expected none, pad or upsample)");
}

metrics::BinaryMask rebinarize(const cv::Mat& mask8) {
    std::vector<std::uint8_t> px(static_cast<std::size_t>(mask8.total()));
    std::size_t i = 0;
    for (int y = 0; y < mask8.rows; ++y)
        for (int x = 0; x < mask8.cols; ++x) px[i++] = mask8.at<std::uint8_t>(y, x) >= 128 ? 1 : 0;
    return metrics::BinaryMask(static_cast<std::size_t>(mask8.rows), static_cast<std::size_t>(mask8.cols), std::move(px));
}

cv::Mat mask_to_image(const metrics::BinaryMask& mask) {
    cv::Mat out(static_cast<int>(mask.height()), static_cast<int>(mask.width()), CV_8UC1);
    std::size_t i = 0;
    const auto px = mask.pixels();
    for (int y = 0; y < out.rows; ++y)
        for (int x = 0; x < out.cols; ++x) out.at<std::uint8_t>(y, x) = px[i++] ? 255 : 0;
    return out;
}

Sample preprocess(Sample sample, const Preprocessing& prep) {
    const int th = static_cast<int>(prep.target_height);
    const int tw = static_cast<int>(prep.target_width);
    cv::Mat mask8 = mask_to_image(sample.mask);
    switch (prep.policy) {
        case ResizePolicy::none:
            return sample;
        case ResizePolicy::pad: {
            if (sample.image.rows > th || sample.image.cols > tw) {
                throw IngestionError(sample.id + ": image larger than pad target");
            }
            const int top = (th - sample.image.rows) / 2;
            const int left = (tw - sample.image.cols) / 2;
            const int bottom = th - sample.image.rows - top;
            const int right = tw - sample.image.cols - left;
            cv::copyMakeBorder(sample.image, sample.image, top, bottom, left, right, cv::BORDER_CONSTANT, cv::Scalar(0));
            cv::copyMakeBorder(mask8, mask8, top, bottom, left, right, cv::BORDER_CONSTANT, cv::Scalar(0));
            break;
        }
        case ResizePolicy::upsample:
            if (sample.image.rows != th || sample.image.cols != tw) {
                cv::resize(sample.image, sample.image, cv::Size(tw, th), 0, 0, cv::INTER_LINEAR);
                cv::resize(mask8, mask8, cv::Size(tw, th), 0, 0, cv::INTER_LINEAR);
            }
            break;
    }
    sample.mask = rebinarize(mask8);
    return sample;
}

void save_dataset(const Dataset& ds, const fs::path& dir) {
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    for (const Sample& s : ds.samples) {
        const std::string file = s.id + ".png";
        if (!cv::imwrite((dir / "images" / file).string(), s.image) ||
            !cv::imwrite((dir / "masks" / file).string(), mask_to_image(s.mask))) {
            throw IngestionError("failed to write sample " + s.id + " under " + dir.string());
        }
    }
}

Dataset ingest_dataset(const fs::path& dir, const Preprocessing& prep) {
    const fs::path images = dir / "images";
    const fs::path masks = dir / "masks";
    if (!fs::is_directory(images)) throw IngestionError("no images/ directory under " + dir.string());

    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(images)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());

    std::vector<std::string> missing;
    for (const auto& f : files) {
        if (!fs::exists(masks / f.filename())) missing.push_back(f.filename().string());
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw IngestionError("missing masks under " + masks.string() + " for: " + list);
    }

    Dataset ds;
    ds.name = dir.filename().string();
    for (const auto& f : files) {
        cv::Mat img = cv::imread(f.string(), cv::IMREAD_GRAYSCALE);
        cv::Mat m = cv::imread((masks / f.filename()).string(), cv::IMREAD_GRAYSCALE);
        if (img.empty() || m.empty()) throw IngestionError("unreadable image or mask: " + f.filename().string());
        if (img.size() != m.size()) throw IngestionError("image/mask size mismatch: " + f.filename().string());
        Sample s{f.stem().string(), img, rebinarize(m)};
        ds.samples.push_back(preprocess(std::move(s), prep));
    }
    return ds;
}

Tensor to_tensor(std::span<const cv::Mat> images) {
    if (images.empty()) return {};
    const auto h = static_cast<std::size_t>(images.front().rows);
    const auto w = static_cast<std::size_t>(images.front().cols);
    Tensor t(images.size(), 1, h, w);
    for (std::size_t i = 0; i < images.size(); ++i) {
        const cv::Mat& m = images[i];
        if (static_cast<std::size_t>(m.rows) != h || static_cast<std::size_t>(m.cols) != w) {
            throw ShapeError("to_tensor: images differ in size");
        }
        float* dst = t.sample(i);
        for (int y = 0; y < m.rows; ++y)
            for (int x = 0; x < m.cols; ++x) dst[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = m.at<std::uint8_t>(y, x) / 255.0f;
    }
    return t;
}

Tensor masks_to_tensor(std::span<const metrics::BinaryMask> masks) {
    if (masks.empty()) return {};
    Tensor t(masks.size(), 1, masks.front().height(), masks.front().width());
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const auto px = masks[i].pixels();
        if (px.size() != t.sample_size()) throw ShapeError("masks_to_tensor: masks differ in size");
        std::transform(px.begin(), px.end(), t.sample(i), [](std::uint8_t v) { return static_cast<float>(v); });
    }
    return t;
}

}  // namespace angiodg::data
