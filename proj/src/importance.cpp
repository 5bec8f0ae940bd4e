#include "angiodg/importance.hpp"

#include "angiodg/errors.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>
#include <string>

namespace angiodg::importance {

std::vector<double> ImportanceReport::weights() const {
    std::vector<double> w;
    w.reserve(channels.size());
    for (const auto& ch : channels) w.push_back(ch.weight);
    return w;
}

WeightMatrix::WeightMatrix(std::span<const double> diagonal) {
    const auto c = static_cast<Eigen::Index>(diagonal.size());
    entries_ = RowMatrix::Ones(c, c);
    for (Eigen::Index i = 0; i < c; ++i) entries_(i, i) = diagonal[static_cast<std::size_t>(i)];
}

double combined_delta(double delta_dice, double delta_cldice, double zeta) {
    if (!(zeta >= 0.0 && zeta <= 1.0)) throw std::invalid_argument("combined_delta: zeta outside [0, 1]");
    return zeta * delta_dice + (1.0 - zeta) * delta_cldice;
}

double channel_weight(double delta_d) {
    if (!std::isfinite(delta_d)) throw NumericError("channel_weight: non-finite delta");
    if (delta_d == 0.0) return 1.0;
    const double shift = std::log1p(std::abs(delta_d));
    if (delta_d < 0.0) return 1.0 + shift;
    const double w = 1.0 - shift;
    if (w <= kWeightFloor) {
        spdlog::warn("channel weight {:.4f} for delta {:.4f} clamped to {}", w, delta_d, kWeightFloor);
        return kWeightFloor;
    }
    return w;
}

WeightMatrix build_weight_matrix(std::span<const double> weights) {
    if (weights.empty()) throw std::invalid_argument("build_weight_matrix: no channels");
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (!(weights[i] > 0.0)) {
            throw InvalidWeightError("build_weight_matrix: weight " + std::to_string(i) + " is not positive");
        }
    }
    return WeightMatrix(weights);
}

ImportanceReport channel_drop_sweep(std::size_t channels, const DropEvaluator& evaluate,
                                    const ImportanceConfig& cfg) {
    ImportanceReport report;
    report.zeta = cfg.zeta;
    report.baseline = evaluate(std::nullopt);
    report.evaluations = 1;
    if (report.baseline.dice == 0.0 || report.baseline.cl_dice == 0.0) {
        throw UndefinedBaselineError("channel_drop_sweep: baseline validation score is zero");
    }
    report.channels.reserve(channels);
    for (std::size_t i = 0; i < channels; ++i) {
        const metrics::MetricPair dropped = evaluate(i);
        ++report.evaluations;
        ChannelReport ch;
        ch.channel_index = i;
        ch.delta_dice = metrics::relative_change(dropped.dice, report.baseline.dice);
        ch.delta_cldice = metrics::relative_change(dropped.cl_dice, report.baseline.cl_dice);
        ch.delta_d = combined_delta(ch.delta_dice, ch.delta_cldice, cfg.zeta);
        ch.weight = channel_weight(ch.delta_d);
        report.channels.push_back(ch);
    }
    return report;
}

nlohmann::json to_json(const ImportanceReport& report) {
    nlohmann::json channels = nlohmann::json::array();
    for (const auto& ch : report.channels) {
        channels.push_back({{"channel", ch.channel_index},
                            {"delta_dice", ch.delta_dice},
                            {"delta_cldice", ch.delta_cldice},
                            {"delta_d", ch.delta_d},
                            {"weight", ch.weight}});
    }
    return {{"format", "angiodg.channel_importance"},
            {"version", 1},
            {"baseline", {{"dice", report.baseline.dice}, {"cl_dice", report.baseline.cl_dice}}},
            {"zeta", report.zeta},
            {"log_base", "e"},
            {"weight_floor", kWeightFloor},
            {"evaluations", report.evaluations},
            {"channels", channels}};
}

ImportanceReport report_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != "angiodg.channel_importance" || j.at("version").get<int>() != 1) {
            throw ConfigError("channel importance: unsupported format or version");
        }
        ImportanceReport r;
        r.baseline.dice = j.at("baseline").at("dice").get<double>();
        r.baseline.cl_dice = j.at("baseline").at("cl_dice").get<double>();
        r.zeta = j.at("zeta").get<double>();
        r.evaluations = j.value("evaluations", std::size_t{0});
        for (const auto& c : j.at("channels")) {
            r.channels.push_back({c.at("channel").get<std::size_t>(), c.at("delta_dice").get<double>(),
                                  c.at("delta_cldice").get<double>(), c.at("delta_d").get<double>(),
                                  c.at("weight").get<double>()});
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("channel importance: malformed JSON: ") + e.what());
    }
}

void save_report(const ImportanceReport& report, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << to_json(report).dump(2) << '\n';
}

ImportanceReport load_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return report_from_json(j);
}

}  // namespace angiodg::importance
