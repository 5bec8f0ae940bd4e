#pragma once

#include <nlohmann/json.hpp>

#include <cstddef>
#include <span>
#include <vector>

// Checkpoint selection on the validation-Dice plateau of a fine-tuning run.
//
// Epoch i (0-based position in the history) is on the plateau when
//   i >= warmup, the trailing window holds at least two values,
//   dice_i >= running_best_i - eps_i   with eps_i = max(floor, mad_scale * MAD(window)),
//   and the sample SD of the window is below sd_cap.
// The last epoch of the first maximal on-plateau run is selected; without any
// plateau epoch the best-Dice epoch (earliest on ties) is returned.

namespace angiodg::plateau {

struct PlateauConfig {
    std::size_t window = 3;
    std::size_t warmup = 1;
    double mad_scale = 1.4826;
    double epsilon_floor = 1e-4;
    double sd_cap = 0.003;

    // Throws ConfigError when window < 2 or a tolerance is negative.
    void validate() const;
};

nlohmann::json to_json(const PlateauConfig& cfg);
PlateauConfig plateau_config_from_json(const nlohmann::json& j);

struct PlateauDecision {
    std::size_t selected = 0;
    bool fallback = false;
    std::vector<bool> on_plateau;
    std::vector<double> epsilon;
    std::vector<double> window_sd;
};

// Throws std::invalid_argument on an empty history.
PlateauDecision plateau_select(std::span<const double> val_dice, const PlateauConfig& cfg);

}  // namespace angiodg::plateau
