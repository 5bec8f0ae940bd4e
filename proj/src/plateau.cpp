#include "angiodg/plateau.hpp"

#include "angiodg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace angiodg::plateau {

void PlateauConfig::validate() const {
    if (window < 2) throw ConfigError("plateau: window must be >= 2");
    if (mad_scale < 0.0 || epsilon_floor < 0.0 || sd_cap < 0.0) throw ConfigError("plateau: tolerances must be non-negative");
}

nlohmann::json to_json(const PlateauConfig& c) {
    return {{"window", c.window}, {"warmup", c.warmup}, {"mad_scale", c.mad_scale},
            {"epsilon_floor", c.epsilon_floor}, {"sd_cap", c.sd_cap}};
}

PlateauConfig plateau_config_from_json(const nlohmann::json& j) {
    PlateauConfig c;
    c.window = j.value("window", c.window);
    c.warmup = j.value("warmup", c.warmup);
    c.mad_scale = j.value("mad_scale", c.mad_scale);
    c.epsilon_floor = j.value("epsilon_floor", c.epsilon_floor);
    c.sd_cap = j.value("sd_cap", c.sd_cap);
    c.validate();
    return c;
}

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double sample_sd(const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

PlateauDecision plateau_select(std::span<const double> dice, const PlateauConfig& cfg) {
    cfg.validate();
    if (dice.empty()) throw std::invalid_argument("plateau_select: empty history");

    const std::size_t n = dice.size();
    PlateauDecision d;
    d.on_plateau.assign(n, false);
    d.epsilon.assign(n, cfg.epsilon_floor);
    d.window_sd.assign(n, 0.0);

    double best = dice[0];
    for (std::size_t i = 0; i < n; ++i) {
        best = std::max(best, dice[i]);
        const std::size_t lo = i + 1 >= cfg.window ? i + 1 - cfg.window : 0;
        std::vector<double> win(dice.begin() + static_cast<std::ptrdiff_t>(lo), dice.begin() + static_cast<std::ptrdiff_t>(i + 1));
        if (win.size() < 2) continue;

        const double med = median(win);
        std::vector<double> dev;
        for (double x : win) dev.push_back(std::abs(x - med));
        d.epsilon[i] = std::max(cfg.epsilon_floor, cfg.mad_scale * median(dev));
        d.window_sd[i] = sample_sd(win);

        d.on_plateau[i] = i >= cfg.warmup && dice[i] >= best - d.epsilon[i] && d.window_sd[i] < cfg.sd_cap;
    }

    for (std::size_t i = 0; i < n; ++i) {
        if (!d.on_plateau[i]) continue;
        std::size_t j = i;
        while (j + 1 < n && d.on_plateau[j + 1]) ++j;
        d.selected = j;
        return d;
    }

    d.fallback = true;
    d.selected = static_cast<std::size_t>(std::max_element(dice.begin(), dice.end()) - dice.begin());
    return d;
}

}  // namespace angiodg::plateau
