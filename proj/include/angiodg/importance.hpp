#pragma once

#include "angiodg/feature_block.hpp"
#include "angiodg/metrics.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace angiodg::importance {

// Lower bound applied when 1 - ln(1 + |ΔD|) would be nonpositive.
inline constexpr double kWeightFloor = 0.05;

struct ImportanceConfig {
    double zeta = 1.0;  // Dice vs clDice trade-off, in [0, 1]
};

struct ChannelReport {
    std::size_t channel_index = 0;
    double delta_dice = 0.0;
    double delta_cldice = 0.0;
    double delta_d = 0.0;
    double weight = 1.0;
};

// Everything persisted to channel_importance.json.
struct ImportanceReport {
    metrics::MetricPair baseline;
    double zeta = 1.0;
    std::vector<ChannelReport> channels;
    std::size_t evaluations = 0;  // validation passes performed by the sweep

    std::vector<double> weights() const;
};

// C×C matrix with channel weights on the diagonal and 1 elsewhere.
class WeightMatrix {
public:
    explicit WeightMatrix(std::span<const double> diagonal);
    const RowMatrix& entries() const noexcept { return entries_; }
    std::size_t channels() const noexcept { return static_cast<std::size_t>(entries_.rows()); }

private:
    RowMatrix entries_;
};

// ζ·ΔDice + (1-ζ)·ΔclDice. Throws std::invalid_argument for ζ outside [0, 1].
double combined_delta(double delta_dice, double delta_cldice, double zeta);

// Natural-log importance weight: 1 + ln(1+|ΔD|) below zero, 1 at zero,
// 1 - ln(1+|ΔD|) above zero, floored at kWeightFloor (with a logged warning).
double channel_weight(double delta_d);

// Throws InvalidWeightError if any weight <= 0 and std::invalid_argument if empty.
WeightMatrix build_weight_matrix(std::span<const double> weights);

// Mean Dice / clDice over a validation set with channel `dropped` of the
// first-layer pre-normalization output forced to zero (nullopt: no drop).
using DropEvaluator = std::function<metrics::MetricPair(std::optional<std::size_t> dropped)>;

// One baseline pass followed by one pass per channel; relative changes are
// taken on the dataset-mean scores. Throws UndefinedBaselineError when either
// baseline score is zero.
ImportanceReport channel_drop_sweep(std::size_t channels, const DropEvaluator& evaluate,
                                    const ImportanceConfig& cfg = {});

nlohmann::json to_json(const ImportanceReport& report);
ImportanceReport report_from_json(const nlohmann::json& j);
void save_report(const ImportanceReport& report, const std::filesystem::path& path);
ImportanceReport load_report(const std::filesystem::path& path);

}  // namespace angiodg::importance
