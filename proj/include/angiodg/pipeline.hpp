#pragma once

#include "angiodg/augment.hpp"
#include "angiodg/datagen.hpp"
#include "angiodg/importance.hpp"
#include "angiodg/losses.hpp"
#include "angiodg/plateau.hpp"
#include "angiodg/segnet.hpp"
#include "angiodg/whitening.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace angiodg::pipeline {

struct RunConfig {
    int total_epochs = 40;
    int anneal_start = 4;  // e0: the whitening term is off through this epoch
    double base_lr = 1e-4;
    double conv1_lr_multiplier = 10.0;
    double poly_power = 0.9;
    std::size_t batch_size = 8;
    bool whitening = true;
    whitening::WhiteningConfig whitening_cfg;
    std::string main_loss = "dice_bce";
    bool augment = true;
    augment::AugConfig augmentation;

    double zeta = 1.0;

    int finetune_epochs = 5;
    double finetune_wca_lr = 1e-3;
    double finetune_lr = 1e-4;
    double gamma_init = 0.25;
    double phi = 0.10;
    double dropout_p = 0.20;
    double plateau_lr_factor = 0.5;
    int plateau_lr_patience = 2;

    std::uint64_t seed = 42;

    // Throws ConfigError (InvalidScheduleError for the anneal schedule).
    void validate() const;
};

nlohmann::json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double beta = 0.0;
    double train_main = 0.0;
    double train_offdiag = 0.0;
    double train_total = 0.0;
    double val_loss = 0.0;
    double val_dice = 0.0;
    double val_cldice = 0.0;
};

nlohmann::json to_json(const EpochRecord& r);
EpochRecord epoch_record_from_json(const nlohmann::json& j);

inline constexpr int kCheckpointVersion = 1;

// Serialized training state. `stage` is "initial" or "finetune"; `epoch` is
// the epoch whose weights are stored.
struct Checkpoint {
    int version = kCheckpointVersion;
    std::string stage = "initial";
    segnet::NetConfig net;
    RunConfig run;
    int epoch = 0;
    double best_val_dice = 0.0;
    bool plateau_fallback = false;
    nlohmann::json net_state;
    nlohmann::json optimizer_state;
    std::vector<EpochRecord> history;
};

inline constexpr const char* kStageInitial = "initial";
inline constexpr const char* kStageFinetune = "finetune";

nlohmann::json to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Network restored from the checkpoint, left in the eval phase.
segnet::SegNet restore(const Checkpoint& c);

struct TrainHooks {
    std::function<void(const EpochRecord&)> on_epoch;
    // Fine-tuning only: called with every epoch's network state.
    std::function<void(int epoch, const nlohmann::json& net_state)> on_snapshot;
};

// Trains from scratch with poly LR decay (conv1 at a multiplied rate), the
// annealed whitening term when enabled, and keeps the best-validation-Dice epoch.
// Throws NumericError when the loss or a parameter becomes non-finite.
Checkpoint train_initial(const RunConfig& run, const segnet::NetConfig& net, const data::Dataset& train,
                         const data::Dataset& val, const TrainHooks& hooks = {});

// Channel-drop sweep of conv1 over the validation set, in eval mode.
importance::ImportanceReport run_importance(const Checkpoint& initial, const data::Dataset& val,
                                            const importance::ImportanceConfig& cfg, std::size_t batch_size = 8);

struct FinetuneResult {
    Checkpoint selected;
    plateau::PlateauDecision decision;
};

// Attaches WCA initialised from the importance weights, freezes all but conv1,
// block2 and WCA, trains on the main loss only and selects an epoch on the
// validation-Dice plateau. Throws ConfigError unless `initial` is an
// initial-stage checkpoint and ShapeError on a channel-count mismatch.
FinetuneResult finetune(const Checkpoint& initial, const importance::ImportanceReport& report, const RunConfig& run,
                        const data::Dataset& train, const data::Dataset& val,
                        const plateau::PlateauConfig& plateau_cfg, const TrainHooks& hooks = {});

// Binary predictions (logit >= 0, equivalently probability >= 0.5) in eval mode.
std::vector<metrics::BinaryMask> predict_masks(segnet::SegNet& net, const data::Dataset& ds, std::size_t batch_size,
                                               const std::optional<std::vector<float>>& channel_mask = std::nullopt);

struct ValidationScores {
    metrics::MetricPair mean;
    double loss = 0.0;
};

// Dataset-mean Dice / clDice and main loss in eval mode.
ValidationScores validate(segnet::SegNet& net, const data::Dataset& ds, const losses::MainLoss& loss,
                          std::size_t batch_size,
                          const std::optional<std::vector<float>>& channel_mask = std::nullopt);

struct DatasetScores {
    std::string name;
    bool in_domain = false;
    std::vector<std::string> ids;
    std::vector<metrics::MetricPair> per_image;
    double dice_mean = 0.0;
    double dice_sd = 0.0;  // sample SD
    double cldice_mean = 0.0;
    double cldice_sd = 0.0;
};

DatasetScores score_predictions(const std::string& name, bool in_domain, const std::vector<std::string>& ids,
                                const std::vector<metrics::BinaryMask>& preds,
                                const std::vector<metrics::BinaryMask>& gts);

struct EvaluationTable {
    std::string method;
    std::vector<DatasetScores> rows;
    double avg_ood_dice = 0.0;
    double avg_ood_cldice = 0.0;
    double avg_all_dice = 0.0;
    double avg_all_cldice = 0.0;
};

// Empty datasets are dropped with a warning; averages are unweighted means of
// the per-dataset means (Avg OOD over out-of-domain rows only, NaN if there are none).
EvaluationTable summarize(const std::string& method, std::vector<DatasetScores> rows);

struct NamedDataset {
    const data::Dataset* dataset = nullptr;
    bool in_domain = false;
};

EvaluationTable evaluate(segnet::SegNet& net, const std::string& method, const std::vector<NamedDataset>& datasets,
                         std::size_t batch_size = 8);

nlohmann::json to_json(const EvaluationTable& t);
EvaluationTable evaluation_from_json(const nlohmann::json& j);

struct DataConfig {
    std::size_t n_train = 200;
    std::size_t n_val = 60;
    std::size_t n_test = 60;
    std::size_t n_ood = 60;
};

// Everything a run needs, loaded from one JSON file.
struct PipelineConfig {
    segnet::NetConfig net;
    RunConfig run;
    plateau::PlateauConfig plateau;
    data::DomainSpec source;
    std::vector<data::DomainSpec> ood;
    DataConfig data;
    data::Preprocessing preprocessing;

    void validate() const;
};

nlohmann::json to_json(const PipelineConfig& cfg);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
// Throws ConfigError for unreadable files, malformed JSON or invalid values.
PipelineConfig load_config(const std::filesystem::path& path);

// Two shifted variants of `source`: lower contrast with more noise and blur, and a
// darker, blotchier background with thinner vessels.
std::vector<data::DomainSpec> default_ood(const data::DomainSpec& source);

// Default source domain and the two default out-of-domain sets at the given size.
PipelineConfig default_config(std::size_t image_size = 128);

struct GeneratedData {
    data::SourceSplits source;
    std::vector<data::Dataset> ood;
};

GeneratedData generate_data(const PipelineConfig& cfg, std::uint64_t seed);

struct ExperimentResult {
    Checkpoint baseline;
    Checkpoint initial;
    importance::ImportanceReport importance;
    FinetuneResult finetuned;
    EvaluationTable baseline_table;
    EvaluationTable angiodg_table;
};

// Baseline arm (no whitening, no fine-tuning) against the full method on the
// same generated data, both evaluated on the source test split and every OOD set.
ExperimentResult run_experiment(const PipelineConfig& cfg, const GeneratedData& data);

}  // namespace angiodg::pipeline
