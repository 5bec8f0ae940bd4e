#pragma once

#include "angiodg/importance.hpp"
#include "angiodg/pipeline.hpp"
#include "angiodg/segnet.hpp"

#include <opencv2/core.hpp>

#include <filesystem>
#include <string>
#include <vector>

// Tables, CSV exports and figures. Scores are printed as percentages.

namespace angiodg::report {

// One row per method; columns are the datasets of the first table followed by
// Avg. OOD and Avg. All, each cell "Dice ± SD / clDice ± SD".
std::string format_table(const std::vector<pipeline::EvaluationTable>& tables);

// method,dataset,in_domain,n,dice_mean,dice_sd,cldice_mean,cldice_sd with
// additional avg_ood / avg_all rows (SD columns empty).
void write_table_csv(const std::vector<pipeline::EvaluationTable>& tables, const std::filesystem::path& path);
void write_per_image_csv(const pipeline::EvaluationTable& table, const std::filesystem::path& path);
void write_history_csv(const std::vector<pipeline::EpochRecord>& history, const std::filesystem::path& path);

// channel,delta_dice,delta_cldice,delta_d,weight at full double precision.
void write_importance_csv(const importance::ImportanceReport& report, const std::filesystem::path& path);

cv::Mat plot_importance(const importance::ImportanceReport& report);
cv::Mat plot_beta_schedule(int anneal_start, int total_epochs);
cv::Mat plot_history(const std::vector<pipeline::EpochRecord>& history);

// Per-channel overlays of the pre-normalization conv1 response on `image`:
// pixels at or above the channel's 95th percentile are tinted red.
std::vector<cv::Mat> channel_overlays(segnet::SegNet& net, const cv::Mat& image);
cv::Mat tile(const std::vector<cv::Mat>& images, std::size_t columns);

// Throws ConfigError when the file cannot be written.
void write_png(const cv::Mat& image, const std::filesystem::path& path);

}  // namespace angiodg::report
