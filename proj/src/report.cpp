#include "angiodg/report.hpp"

#include "angiodg/errors.hpp"
#include "angiodg/whitening.hpp"

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace angiodg::report {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    return out;
}

std::string pct(double v) { return std::isfinite(v) ? fmt::format("{:.2f}", 100.0 * v) : std::string("n/a"); }

std::string cell(double dm, double ds, double cm, double cs) {
    return pct(dm) + " ± " + pct(ds) + " / " + pct(cm) + " ± " + pct(cs);
}

std::string avg_cell(double d, double c) { return pct(d) + " / " + pct(c); }

std::string csv_num(double v) { return std::isfinite(v) ? fmt::format("{:.17g}", v) : std::string(); }

struct Canvas {
    cv::Mat img;
    int left = 60, right = 20, top = 30, bottom = 45;

    Canvas(int w, int h, const std::string& title) : img(h, w, CV_8UC3, cv::Scalar(255, 255, 255)) {
        cv::putText(img, title, {left, 20}, cv::FONT_HERSHEY_SIMPLEX, 0.5, {0, 0, 0}, 1, cv::LINE_AA);
    }
    int plot_w() const { return img.cols - left - right; }
    int plot_h() const { return img.rows - top - bottom; }
    cv::Point map(double fx, double fy) const {
        return {left + static_cast<int>(std::lround(fx * plot_w())), top + static_cast<int>(std::lround((1.0 - fy) * plot_h()))};
    }
    void axes(const std::string& xlabel, double ylo, double yhi) {
        cv::line(img, map(0, 0), map(1, 0), {0, 0, 0});
        cv::line(img, map(0, 0), map(0, 1), {0, 0, 0});
        cv::putText(img, xlabel, {left + plot_w() / 2 - 20, img.rows - 8}, cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1,
                    cv::LINE_AA);
        cv::putText(img, fmt::format("{:.3g}", yhi), {4, top + 5}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0}, 1, cv::LINE_AA);
        cv::putText(img, fmt::format("{:.3g}", ylo), {4, top + plot_h()}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0}, 1,
                    cv::LINE_AA);
    }
};

}  // namespace

// Display width of UTF-8 text: continuation bytes take no column.
static std::size_t columns(const std::string& s) {
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char ch) { return (ch & 0xC0) != 0x80; }));
}

std::string format_table(const std::vector<pipeline::EvaluationTable>& tables) {
    if (tables.empty()) return {};
    std::vector<std::string> header{"method"};
    for (const auto& r : tables.front().rows) header.push_back(r.name + (r.in_domain ? " (in-domain)" : ""));
    header.push_back("Avg. OOD");
    header.push_back("Avg. All");

    std::vector<std::vector<std::string>> rows{header};
    for (const auto& t : tables) {
        std::vector<std::string> row{t.method};
        for (const auto& name : tables.front().rows) {
            auto it = std::find_if(t.rows.begin(), t.rows.end(), [&](const auto& r) { return r.name == name.name; });
            row.push_back(it == t.rows.end() ? "n/a" : cell(it->dice_mean, it->dice_sd, it->cldice_mean, it->cldice_sd));
        }
        row.push_back(avg_cell(t.avg_ood_dice, t.avg_ood_cldice));
        row.push_back(avg_cell(t.avg_all_dice, t.avg_all_cldice));
        rows.push_back(std::move(row));
    }

    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], columns(r[i]));
    }
    std::string out = "Dice ± SD / clDice ± SD (%)\n";
    for (std::size_t k = 0; k < rows.size(); ++k) {
        for (std::size_t i = 0; i < rows[k].size(); ++i) {
            out += (i ? " | " : "") + rows[k][i] + std::string(width[i] - columns(rows[k][i]), ' ');
        }
        out += "\n";
        if (k == 0) {
            for (std::size_t i = 0; i < width.size(); ++i) out += (i ? "-+-" : "") + std::string(width[i], '-');
            out += "\n";
        }
    }
    return out;
}

void write_table_csv(const std::vector<pipeline::EvaluationTable>& tables, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "method,dataset,in_domain,n,dice_mean,dice_sd,cldice_mean,cldice_sd\n";
    for (const auto& t : tables) {
        for (const auto& r : t.rows) {
            out << t.method << ',' << r.name << ',' << (r.in_domain ? 1 : 0) << ',' << r.per_image.size() << ','
                << csv_num(r.dice_mean) << ',' << csv_num(r.dice_sd) << ',' << csv_num(r.cldice_mean) << ','
                << csv_num(r.cldice_sd) << '\n';
        }
        out << t.method << ",avg_ood,0,," << csv_num(t.avg_ood_dice) << ",," << csv_num(t.avg_ood_cldice) << ",\n";
        out << t.method << ",avg_all,,," << csv_num(t.avg_all_dice) << ",," << csv_num(t.avg_all_cldice) << ",\n";
    }
}

void write_per_image_csv(const pipeline::EvaluationTable& t, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "method,dataset,id,dice,cldice\n";
    for (const auto& r : t.rows) {
        for (std::size_t i = 0; i < r.per_image.size(); ++i) {
            out << t.method << ',' << r.name << ',' << r.ids[i] << ',' << csv_num(r.per_image[i].dice) << ','
                << csv_num(r.per_image[i].cl_dice) << '\n';
        }
    }
}

void write_history_csv(const std::vector<pipeline::EpochRecord>& history, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "epoch,lr,beta,train_main,train_offdiag,train_total,val_loss,val_dice,val_cldice\n";
    for (const auto& r : history) {
        out << r.epoch << ',' << csv_num(r.lr) << ',' << csv_num(r.beta) << ',' << csv_num(r.train_main) << ','
            << csv_num(r.train_offdiag) << ',' << csv_num(r.train_total) << ',' << csv_num(r.val_loss) << ','
            << csv_num(r.val_dice) << ',' << csv_num(r.val_cldice) << '\n';
    }
}

void write_importance_csv(const importance::ImportanceReport& report, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "channel,delta_dice,delta_cldice,delta_d,weight\n";
    for (const auto& c : report.channels) {
        out << c.channel_index << ',' << csv_num(c.delta_dice) << ',' << csv_num(c.delta_cldice) << ','
            << csv_num(c.delta_d) << ',' << csv_num(c.weight) << '\n';
    }
}

cv::Mat plot_importance(const importance::ImportanceReport& report) {
    Canvas c(640, 320, "channel drop: relative change (blue dice, green cldice), weight (red)");
    const std::size_t n = report.channels.size();
    double lim = 1e-3;
    for (const auto& ch : report.channels) lim = std::max({lim, std::abs(ch.delta_dice), std::abs(ch.delta_cldice)});
    c.axes("channel", -lim, lim);
    cv::line(c.img, c.map(0, 0.5), c.map(1, 0.5), {180, 180, 180});
    const double slot = 1.0 / static_cast<double>(std::max<std::size_t>(n, 1));
    std::vector<cv::Point> weights;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& ch = report.channels[i];
        const double x0 = (static_cast<double>(i) + 0.15) * slot;
        const double x1 = (static_cast<double>(i) + 0.5) * slot;
        const double x2 = (static_cast<double>(i) + 0.85) * slot;
        cv::rectangle(c.img, c.map(x0, 0.5), c.map(x1, 0.5 + 0.5 * ch.delta_dice / lim), {200, 80, 0}, cv::FILLED);
        cv::rectangle(c.img, c.map(x1, 0.5), c.map(x2, 0.5 + 0.5 * ch.delta_cldice / lim), {0, 160, 0}, cv::FILLED);
        weights.push_back(c.map(x1, std::clamp(ch.weight / 2.0, 0.0, 1.0)));
    }
    if (weights.size() > 1) cv::polylines(c.img, weights, false, {0, 0, 220}, 2, cv::LINE_AA);
    for (const auto& p : weights) cv::circle(c.img, p, 3, {0, 0, 220}, cv::FILLED, cv::LINE_AA);
    return c.img;
}

cv::Mat plot_beta_schedule(int anneal_start, int total_epochs) {
    Canvas c(480, 280, fmt::format("whitening weight, e0={} E={}", anneal_start, total_epochs));
    c.axes("epoch", 0.0, 1.0);
    std::vector<cv::Point> pts;
    for (int e = 0; e <= total_epochs; ++e) {
        const double b = whitening::anneal_weight(e, anneal_start, total_epochs);
        pts.push_back(c.map(static_cast<double>(e) / total_epochs, b));
    }
    cv::polylines(c.img, pts, false, {200, 80, 0}, 2, cv::LINE_AA);
    return c.img;
}

cv::Mat plot_history(const std::vector<pipeline::EpochRecord>& history) {
    Canvas c(480, 280, "validation dice (blue), train loss (red)");
    c.axes("epoch", 0.0, 1.0);
    std::vector<cv::Point> dice, loss;
    const double n = static_cast<double>(std::max<std::size_t>(history.size(), 2) - 1);
    for (std::size_t i = 0; i < history.size(); ++i) {
        dice.push_back(c.map(static_cast<double>(i) / n, std::clamp(history[i].val_dice, 0.0, 1.0)));
        loss.push_back(c.map(static_cast<double>(i) / n, std::clamp(history[i].train_total, 0.0, 1.0)));
    }
    if (dice.size() > 1) {
        cv::polylines(c.img, dice, false, {200, 80, 0}, 2, cv::LINE_AA);
        cv::polylines(c.img, loss, false, {0, 0, 220}, 2, cv::LINE_AA);
    }
    return c.img;
}

std::vector<cv::Mat> channel_overlays(segnet::SegNet& net, const cv::Mat& image) {
    const segnet::Phase prev = net.phase();
    net.set_phase(segnet::Phase::eval);
    std::vector<cv::Mat> one{image};
    segnet::ForwardOptions opts;
    opts.capture_pre_norm = true;
    net.forward(data::to_tensor(one), opts);
    const Tensor& x = net.captured_pre_norm();
    net.set_phase(prev);

    cv::Mat bgr;
    cv::cvtColor(image, bgr, cv::COLOR_GRAY2BGR);
    std::vector<cv::Mat> out;
    for (std::size_t ch = 0; ch < x.c; ++ch) {
        const float* a = x.channel(0, ch);
        std::vector<float> sorted(a, a + x.spatial());
        const std::size_t k = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(sorted.size()))) - 1;
        std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end());
        const float p95 = sorted[k];
        cv::Mat o = bgr.clone();
        for (int y = 0; y < o.rows; ++y) {
            for (int xx = 0; xx < o.cols; ++xx) {
                if (a[static_cast<std::size_t>(y) * x.w + static_cast<std::size_t>(xx)] >= p95) {
                    auto& px = o.at<cv::Vec3b>(y, xx);
                    px = cv::Vec3b(px[0] / 3, px[1] / 3, static_cast<std::uint8_t>(170 + px[2] / 3));
                }
            }
        }
        out.push_back(o);
    }
    return out;
}

cv::Mat tile(const std::vector<cv::Mat>& images, std::size_t columns) {
    if (images.empty()) return {};
    const int h = images.front().rows, w = images.front().cols;
    const std::size_t rows = (images.size() + columns - 1) / columns;
    cv::Mat out(static_cast<int>(rows) * h, static_cast<int>(columns) * w, images.front().type(), cv::Scalar::all(0));
    for (std::size_t i = 0; i < images.size(); ++i) {
        const int r = static_cast<int>(i / columns), col = static_cast<int>(i % columns);
        images[i].copyTo(out(cv::Rect(col * w, r * h, w, h)));
    }
    return out;
}

void write_png(const cv::Mat& image, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), image)) throw ConfigError("cannot write " + path.string());
}

}  // namespace angiodg::report
