#include "angiodg/pipeline.hpp"

#include "angiodg/errors.hpp"
#include "angiodg/optim.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace angiodg::pipeline {

namespace {

// Seed streams derived from RunConfig::seed.
constexpr std::uint64_t kInitStream = 101;
constexpr std::uint64_t kShuffleStream = 102;
constexpr std::uint64_t kFinetuneShuffleStream = 103;
constexpr std::uint64_t kDropoutStream = 104;
constexpr std::uint64_t kSourceStream = 1;
constexpr std::uint64_t kOodStream = 100;

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& section) {
    if (!j.is_object()) throw ConfigError(section + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        if (!allowed.count(key)) throw ConfigError(section + ": unknown key '" + key + "'");
    }
}

FeatureBlock to_block(const Tensor& t) {
    FeatureBlock b(t.n, t.c, t.h, t.w);
    std::copy(t.data.begin(), t.data.end(), b.values.begin());
    return b;
}

Tensor from_block(const FeatureBlock& b, double scale) {
    Tensor t(b.n, b.c, b.h, b.w);
    for (std::size_t i = 0; i < b.values.size(); ++i) t.data[i] = static_cast<float>(scale * b.values[i]);
    return t;
}

struct Batch {
    Tensor images;
    Tensor targets;
};

Batch make_batch(const data::Dataset& ds, std::span<const std::size_t> idx, const augment::AugConfig* aug,
                 std::mt19937_64* rng) {
    std::vector<cv::Mat> images;
    std::vector<metrics::BinaryMask> masks;
    for (std::size_t i : idx) {
        const data::Sample& s = ds.samples[i];
        if (aug) {
            auto [img, m] = augment::augment(s.image, s.mask, *aug, *rng);
            images.push_back(std::move(img));
            masks.push_back(std::move(m));
        } else {
            images.push_back(s.image);
            masks.push_back(s.mask);
        }
    }
    return {data::to_tensor(images), data::masks_to_tensor(masks)};
}

std::string describe(const whitening::LossBreakdown& lb) {
    std::ostringstream os;
    os.precision(17);
    os << "l_main=" << lb.l_main << " l_offdiag=" << lb.l_offdiag << " beta=" << lb.beta << " l_total=" << lb.l_total;
    return os.str();
}

void check_parameters_finite(segnet::SegNet& net, const std::string& where) {
    for (const nn::Parameter* p : net.parameters()) {
        for (float v : p->value) {
            if (!std::isfinite(v)) throw NumericError(where + ": parameter " + p->name + " became non-finite");
        }
    }
}

void require_data(const data::Dataset& train, const data::Dataset& val) {
    if (train.empty()) throw ConfigError("training set is empty");
    if (val.empty()) throw ConfigError("validation set is empty");
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? std::numeric_limits<double>::quiet_NaN()
                     : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_sd(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

nlohmann::json nan_to_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
double null_to_nan(const nlohmann::json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

// Foreground where logit >= 0, i.e. sigmoid >= 0.5 without float rounding at the boundary.
metrics::BinaryMask threshold_logits(const Tensor& logits, std::size_t sample) {
    std::vector<std::uint8_t> px(logits.spatial());
    const float* z = logits.sample(sample);
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = z[i] >= 0.0f ? 1 : 0;
    return metrics::BinaryMask(logits.h, logits.w, std::move(px));
}

}  // namespace

// ---------------------------------------------------------------- configuration

void RunConfig::validate() const {
    if (total_epochs <= anneal_start + 1 || anneal_start < 0) {
        throw InvalidScheduleError("run: need 0 <= anneal_start and total_epochs > anneal_start + 1");
    }
    if (base_lr < 0.0 || conv1_lr_multiplier < 0.0 || finetune_lr < 0.0 || finetune_wca_lr < 0.0) {
        throw ConfigError("run: learning rates must be non-negative");
    }
    if (poly_power <= 0.0) throw ConfigError("run: poly_power must be positive");
    if (batch_size == 0) throw ConfigError("run: batch_size must be positive");
    if (zeta < 0.0 || zeta > 1.0) throw ConfigError("run: zeta must lie in [0, 1]");
    if (finetune_epochs < 1) throw ConfigError("run: finetune_epochs must be >= 1");
    if (!(phi > 0.0)) throw ConfigError("run: phi must be positive");
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("run: dropout_p must lie in [0, 1)");
    if (plateau_lr_factor <= 0.0 || plateau_lr_factor > 1.0) throw ConfigError("run: plateau_lr_factor must lie in (0, 1]");
    if (plateau_lr_patience < 0) throw ConfigError("run: plateau_lr_patience must be >= 0");
    if (whitening_cfg.norm_epsilon <= 0.0 || whitening_cfg.diag_epsilon < 0.0) {
        throw ConfigError("run: whitening epsilons must be positive");
    }
}

nlohmann::json to_json(const RunConfig& c) {
    return {{"total_epochs", c.total_epochs},
            {"anneal_start", c.anneal_start},
            {"base_lr", c.base_lr},
            {"conv1_lr_multiplier", c.conv1_lr_multiplier},
            {"poly_power", c.poly_power},
            {"batch_size", c.batch_size},
            {"whitening", c.whitening},
            {"whitening_norm_epsilon", c.whitening_cfg.norm_epsilon},
            {"whitening_diag_epsilon", c.whitening_cfg.diag_epsilon},
            {"main_loss", c.main_loss},
            {"augment", c.augment},
            {"augmentation", augment::to_json(c.augmentation)},
            {"zeta", c.zeta},
            {"finetune_epochs", c.finetune_epochs},
            {"finetune_wca_lr", c.finetune_wca_lr},
            {"finetune_lr", c.finetune_lr},
            {"gamma_init", c.gamma_init},
            {"phi", c.phi},
            {"dropout_p", c.dropout_p},
            {"plateau_lr_factor", c.plateau_lr_factor},
            {"plateau_lr_patience", c.plateau_lr_patience},
            {"seed", c.seed}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    check_keys(j,
               {"total_epochs", "anneal_start", "base_lr", "conv1_lr_multiplier", "poly_power", "batch_size",
                "whitening", "whitening_norm_epsilon", "whitening_diag_epsilon", "main_loss", "augment",
                "augmentation", "zeta", "finetune_epochs", "finetune_wca_lr", "finetune_lr", "gamma_init", "phi",
                "dropout_p", "plateau_lr_factor", "plateau_lr_patience", "seed"},
               "run");
    RunConfig c;
    try {
        c.total_epochs = j.value("total_epochs", c.total_epochs);
        c.anneal_start = j.value("anneal_start", c.anneal_start);
        c.base_lr = j.value("base_lr", c.base_lr);
        c.conv1_lr_multiplier = j.value("conv1_lr_multiplier", c.conv1_lr_multiplier);
        c.poly_power = j.value("poly_power", c.poly_power);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.whitening = j.value("whitening", c.whitening);
        c.whitening_cfg.norm_epsilon = j.value("whitening_norm_epsilon", c.whitening_cfg.norm_epsilon);
        c.whitening_cfg.diag_epsilon = j.value("whitening_diag_epsilon", c.whitening_cfg.diag_epsilon);
        c.main_loss = j.value("main_loss", c.main_loss);
        c.augment = j.value("augment", c.augment);
        if (j.contains("augmentation")) c.augmentation = augment::aug_config_from_json(j.at("augmentation"));
        c.zeta = j.value("zeta", c.zeta);
        c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
        c.finetune_wca_lr = j.value("finetune_wca_lr", c.finetune_wca_lr);
        c.finetune_lr = j.value("finetune_lr", c.finetune_lr);
        c.gamma_init = j.value("gamma_init", c.gamma_init);
        c.phi = j.value("phi", c.phi);
        c.dropout_p = j.value("dropout_p", c.dropout_p);
        c.plateau_lr_factor = j.value("plateau_lr_factor", c.plateau_lr_factor);
        c.plateau_lr_patience = j.value("plateau_lr_patience", c.plateau_lr_patience);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("run: ") + e.what());
    }
    losses::make_main_loss(c.main_loss);
    c.validate();
    return c;
}

nlohmann::json to_json(const EpochRecord& r) {
    return {{"epoch", r.epoch},           {"lr", r.lr},
            {"beta", r.beta},             {"train_main", r.train_main},
            {"train_offdiag", r.train_offdiag}, {"train_total", r.train_total},
            {"val_loss", r.val_loss},     {"val_dice", r.val_dice},
            {"val_cldice", r.val_cldice}};
}

EpochRecord epoch_record_from_json(const nlohmann::json& j) {
    EpochRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.lr = j.at("lr").get<double>();
    r.beta = j.at("beta").get<double>();
    r.train_main = j.at("train_main").get<double>();
    r.train_offdiag = j.at("train_offdiag").get<double>();
    r.train_total = j.at("train_total").get<double>();
    r.val_loss = j.at("val_loss").get<double>();
    r.val_dice = j.at("val_dice").get<double>();
    r.val_cldice = j.at("val_cldice").get<double>();
    return r;
}

// ---------------------------------------------------------------- checkpoints

nlohmann::json to_json(const Checkpoint& c) {
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& r : c.history) hist.push_back(to_json(r));
    return {{"format", "angiodg.checkpoint"},
            {"version", c.version},
            {"stage", c.stage},
            {"net", segnet::to_json(c.net)},
            {"run", to_json(c.run)},
            {"epoch", c.epoch},
            {"best_val_dice", c.best_val_dice},
            {"plateau_fallback", c.plateau_fallback},
            {"net_state", c.net_state},
            {"optimizer_state", c.optimizer_state},
            {"history", hist}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    Checkpoint c;
    try {
        if (j.value("format", std::string()) != "angiodg.checkpoint") throw ConfigError("checkpoint: unrecognised format");
        c.version = j.at("version").get<int>();
        if (c.version != kCheckpointVersion) {
            throw ConfigError("checkpoint: unsupported version " + std::to_string(c.version));
        }
        c.stage = j.at("stage").get<std::string>();
        if (c.stage != kStageInitial && c.stage != kStageFinetune) throw ConfigError("checkpoint: unknown stage " + c.stage);
        c.net = segnet::net_config_from_json(j.at("net"));
        c.run = run_config_from_json(j.at("run"));
        c.epoch = j.at("epoch").get<int>();
        c.best_val_dice = j.at("best_val_dice").get<double>();
        c.plateau_fallback = j.value("plateau_fallback", false);
        c.net_state = j.at("net_state");
        c.optimizer_state = j.at("optimizer_state");
        for (const auto& r : j.at("history")) c.history.push_back(epoch_record_from_json(r));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("checkpoint: ") + e.what());
    }
    return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << to_json(c).dump();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read checkpoint " + path.string());
    try {
        return checkpoint_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("checkpoint " + path.string() + ": " + e.what());
    }
}

segnet::SegNet restore(const Checkpoint& c) {
    segnet::SegNet net(c.net, 0);
    net.load_state_dict(c.net_state);
    net.set_phase(segnet::Phase::eval);
    return net;
}

// ---------------------------------------------------------------- evaluation

std::vector<metrics::BinaryMask> predict_masks(segnet::SegNet& net, const data::Dataset& ds, std::size_t batch_size,
                                               const std::optional<std::vector<float>>& channel_mask) {
    const segnet::Phase prev = net.phase();
    net.set_phase(segnet::Phase::eval);
    std::vector<metrics::BinaryMask> out;
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t b = 0; b < ds.size(); b += batch_size) {
        const std::size_t e = std::min(ds.size(), b + batch_size);
        const Batch batch = make_batch(ds, std::span(idx).subspan(b, e - b), nullptr, nullptr);
        segnet::ForwardOptions opts;
        opts.channel_mask = channel_mask;
        const Tensor logits = net.forward(batch.images, opts);
        for (std::size_t s = 0; s < logits.n; ++s) out.push_back(threshold_logits(logits, s));
    }
    net.set_phase(prev);
    return out;
}

ValidationScores validate(segnet::SegNet& net, const data::Dataset& ds, const losses::MainLoss& loss,
                          std::size_t batch_size, const std::optional<std::vector<float>>& channel_mask) {
    if (ds.empty()) throw ConfigError("validate: empty dataset");
    const segnet::Phase prev = net.phase();
    net.set_phase(segnet::Phase::eval);
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    double dice_sum = 0.0, cl_sum = 0.0, loss_sum = 0.0;
    for (std::size_t b = 0; b < ds.size(); b += batch_size) {
        const std::size_t e = std::min(ds.size(), b + batch_size);
        const Batch batch = make_batch(ds, std::span(idx).subspan(b, e - b), nullptr, nullptr);
        segnet::ForwardOptions opts;
        opts.channel_mask = channel_mask;
        const Tensor logits = net.forward(batch.images, opts);
        loss_sum += loss.evaluate(logits, batch.targets, nullptr) * static_cast<double>(e - b);
        for (std::size_t s = 0; s < logits.n; ++s) {
            const metrics::MetricPair m = metrics::evaluate_pair(threshold_logits(logits, s), ds.samples[b + s].mask);
            dice_sum += m.dice;
            cl_sum += m.cl_dice;
        }
    }
    net.set_phase(prev);
    const auto n = static_cast<double>(ds.size());
    return {{dice_sum / n, cl_sum / n}, loss_sum / n};
}

DatasetScores score_predictions(const std::string& name, bool in_domain, const std::vector<std::string>& ids,
                                const std::vector<metrics::BinaryMask>& preds,
                                const std::vector<metrics::BinaryMask>& gts) {
    if (preds.size() != gts.size() || ids.size() != gts.size()) {
        throw ShapeError("score_predictions: " + name + " has mismatched prediction / label counts");
    }
    DatasetScores s;
    s.name = name;
    s.in_domain = in_domain;
    s.ids = ids;
    std::vector<double> d, cl;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const metrics::MetricPair m = metrics::evaluate_pair(preds[i], gts[i]);
        s.per_image.push_back(m);
        d.push_back(m.dice);
        cl.push_back(m.cl_dice);
    }
    s.dice_mean = mean_of(d);
    s.dice_sd = sample_sd(d);
    s.cldice_mean = mean_of(cl);
    s.cldice_sd = sample_sd(cl);
    return s;
}

EvaluationTable summarize(const std::string& method, std::vector<DatasetScores> rows) {
    EvaluationTable t;
    t.method = method;
    std::vector<double> ood_d, ood_cl, all_d, all_cl;
    for (auto& r : rows) {
        if (r.per_image.empty()) {
            spdlog::warn("evaluation: dataset '{}' is empty and is left out of the table", r.name);
            continue;
        }
        all_d.push_back(r.dice_mean);
        all_cl.push_back(r.cldice_mean);
        if (!r.in_domain) {
            ood_d.push_back(r.dice_mean);
            ood_cl.push_back(r.cldice_mean);
        }
        t.rows.push_back(std::move(r));
    }
    t.avg_ood_dice = mean_of(ood_d);
    t.avg_ood_cldice = mean_of(ood_cl);
    t.avg_all_dice = mean_of(all_d);
    t.avg_all_cldice = mean_of(all_cl);
    return t;
}

EvaluationTable evaluate(segnet::SegNet& net, const std::string& method, const std::vector<NamedDataset>& datasets,
                         std::size_t batch_size) {
    std::vector<DatasetScores> rows;
    for (const auto& nd : datasets) {
        const data::Dataset& ds = *nd.dataset;
        std::vector<std::string> ids;
        std::vector<metrics::BinaryMask> gts;
        for (const auto& s : ds.samples) {
            ids.push_back(s.id);
            gts.push_back(s.mask);
        }
        const auto preds = ds.empty() ? std::vector<metrics::BinaryMask>{} : predict_masks(net, ds, batch_size);
        rows.push_back(score_predictions(ds.name, nd.in_domain, ids, preds, gts));
    }
    return summarize(method, std::move(rows));
}

nlohmann::json to_json(const EvaluationTable& t) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : t.rows) {
        nlohmann::json per = nlohmann::json::array();
        for (std::size_t i = 0; i < r.per_image.size(); ++i) {
            per.push_back({{"id", r.ids[i]}, {"dice", r.per_image[i].dice}, {"cldice", r.per_image[i].cl_dice}});
        }
        rows.push_back({{"name", r.name},
                        {"in_domain", r.in_domain},
                        {"dice_mean", r.dice_mean},
                        {"dice_sd", r.dice_sd},
                        {"cldice_mean", r.cldice_mean},
                        {"cldice_sd", r.cldice_sd},
                        {"per_image", per}});
    }
    return {{"method", t.method},
            {"rows", rows},
            {"avg_ood_dice", nan_to_null(t.avg_ood_dice)},
            {"avg_ood_cldice", nan_to_null(t.avg_ood_cldice)},
            {"avg_all_dice", nan_to_null(t.avg_all_dice)},
            {"avg_all_cldice", nan_to_null(t.avg_all_cldice)}};
}

EvaluationTable evaluation_from_json(const nlohmann::json& j) {
    EvaluationTable t;
    try {
        t.method = j.at("method").get<std::string>();
        for (const auto& r : j.at("rows")) {
            DatasetScores s;
            s.name = r.at("name").get<std::string>();
            s.in_domain = r.at("in_domain").get<bool>();
            s.dice_mean = r.at("dice_mean").get<double>();
            s.dice_sd = r.at("dice_sd").get<double>();
            s.cldice_mean = r.at("cldice_mean").get<double>();
            s.cldice_sd = r.at("cldice_sd").get<double>();
            for (const auto& p : r.at("per_image")) {
                s.ids.push_back(p.at("id").get<std::string>());
                s.per_image.push_back({p.at("dice").get<double>(), p.at("cldice").get<double>()});
            }
            t.rows.push_back(std::move(s));
        }
        t.avg_ood_dice = null_to_nan(j.at("avg_ood_dice"));
        t.avg_ood_cldice = null_to_nan(j.at("avg_ood_cldice"));
        t.avg_all_dice = null_to_nan(j.at("avg_all_dice"));
        t.avg_all_cldice = null_to_nan(j.at("avg_all_cldice"));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("evaluation results: ") + e.what());
    }
    return t;
}

// ---------------------------------------------------------------- training

Checkpoint train_initial(const RunConfig& run, const segnet::NetConfig& netcfg, const data::Dataset& train,
                         const data::Dataset& val, const TrainHooks& hooks) {
    run.validate();
    netcfg.validate();
    require_data(train, val);
    const auto loss = losses::make_main_loss(run.main_loss);

    segnet::SegNet net(netcfg, data::derive_seed(run.seed, kInitStream));
    net.set_phase(segnet::Phase::initial);

    std::vector<nn::Parameter*> rest;
    for (nn::Parameter* p : net.trainable_parameters()) {
        if (p != &net.conv1().weight) rest.push_back(p);
    }
    optim::Adam opt({{"conv1", {&net.conv1().weight}, run.base_lr * run.conv1_lr_multiplier}, {"rest", rest, run.base_lr}});

    std::mt19937_64 rng(data::derive_seed(run.seed, kShuffleStream));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const augment::AugConfig* aug = run.augment ? &run.augmentation : nullptr;

    Checkpoint best;
    best.stage = kStageInitial;
    best.net = netcfg;
    best.run = run;
    best.best_val_dice = -1.0;

    for (int epoch = 1; epoch <= run.total_epochs; ++epoch) {
        const double lr = optim::poly_lr(run.base_lr, epoch, run.total_epochs, run.poly_power);
        opt.set_lr("conv1", lr * run.conv1_lr_multiplier);
        opt.set_lr("rest", lr);
        const double beta = run.whitening ? whitening::anneal_weight(epoch, run.anneal_start, run.total_epochs) : 0.0;

        std::shuffle(order.begin(), order.end(), rng);
        whitening::LossBreakdown sum;
        for (std::size_t b = 0; b < order.size(); b += run.batch_size) {
            const std::size_t e = std::min(order.size(), b + run.batch_size);
            const Batch batch = make_batch(train, std::span(order).subspan(b, e - b), aug, &rng);

            net.zero_grad();
            segnet::ForwardOptions opts;
            opts.capture_pre_norm = run.whitening;
            const Tensor logits = net.forward(batch.images, opts);
            Tensor grad;
            const double l_main = loss->evaluate(logits, batch.targets, &grad);

            double l_off = 0.0;
            Tensor grad_pre;
            if (run.whitening) {
                const auto og = whitening::off_diagonal_loss_grad(to_block(net.captured_pre_norm()), run.whitening_cfg);
                l_off = og.loss;
                if (beta > 0.0) grad_pre = from_block(og.grad, beta);
            }
            const whitening::LossBreakdown lb = whitening::total_loss(l_main, l_off, beta);
            if (!std::isfinite(lb.l_total) || !std::isfinite(lb.l_offdiag)) {
                throw NumericError("train_initial: non-finite loss at epoch " + std::to_string(epoch) + " (" +
                                   describe(lb) + ")");
            }
            net.backward(grad, grad_pre.data.empty() ? nullptr : &grad_pre);
            opt.step();

            const auto w = static_cast<double>(e - b);
            sum.l_main += w * lb.l_main;
            sum.l_offdiag += w * lb.l_offdiag;
            sum.l_total += w * lb.l_total;
        }
        check_parameters_finite(net, "train_initial epoch " + std::to_string(epoch));

        const ValidationScores v = validate(net, val, *loss, run.batch_size);
        net.set_phase(segnet::Phase::initial);

        const auto n = static_cast<double>(train.size());
        EpochRecord rec{epoch, lr, beta, sum.l_main / n, sum.l_offdiag / n, sum.l_total / n, v.loss, v.mean.dice,
                        v.mean.cl_dice};
        best.history.push_back(rec);
        spdlog::info("initial epoch {}/{}: lr {:.3g} beta {:.3f} loss {:.4f} (offdiag {:.4f}) val dice {:.4f}", epoch,
                     run.total_epochs, lr, beta, rec.train_total, rec.train_offdiag, rec.val_dice);
        if (hooks.on_epoch) hooks.on_epoch(rec);

        if (v.mean.dice > best.best_val_dice) {
            best.best_val_dice = v.mean.dice;
            best.epoch = epoch;
            best.net_state = net.state_dict();
            best.optimizer_state = opt.state();
        }
    }
    return best;
}

importance::ImportanceReport run_importance(const Checkpoint& initial, const data::Dataset& val,
                                            const importance::ImportanceConfig& cfg, std::size_t batch_size) {
    if (val.empty()) throw ConfigError("run_importance: validation set is empty");
    segnet::SegNet net = restore(initial);
    const std::size_t channels = net.config().first_layer_channels;
    const losses::DiceBceLoss loss;
    const importance::DropEvaluator evaluator = [&](std::optional<std::size_t> dropped) {
        std::optional<std::vector<float>> mask;
        if (dropped) {
            mask = std::vector<float>(channels, 1.0f);
            (*mask)[*dropped] = 0.0f;
        }
        return validate(net, val, loss, batch_size, mask).mean;
    };
    return importance::channel_drop_sweep(channels, evaluator, cfg);
}

FinetuneResult finetune(const Checkpoint& initial, const importance::ImportanceReport& report, const RunConfig& run,
                        const data::Dataset& train, const data::Dataset& val,
                        const plateau::PlateauConfig& plateau_cfg, const TrainHooks& hooks) {
    if (initial.stage != kStageInitial) {
        throw ConfigError("finetune: expected an initial-stage checkpoint, got stage '" + initial.stage + "'");
    }
    run.validate();
    plateau_cfg.validate();
    require_data(train, val);
    const auto loss = losses::make_main_loss(run.main_loss);

    segnet::SegNet net = restore(initial);
    if (report.channels.size() != net.config().first_layer_channels) {
        throw ShapeError("finetune: importance report has " + std::to_string(report.channels.size()) +
                         " channels, network has " + std::to_string(net.config().first_layer_channels));
    }
    net.attach_wca(report.weights(), run.gamma_init, {run.phi, run.dropout_p});
    net.set_phase(segnet::Phase::finetune);

    optim::Adam opt({{"wca", {net.wca_gamma(), net.wca_weights()}, run.finetune_wca_lr},
                     {"backbone", {&net.conv1().weight, &net.block2().conv.weight}, run.finetune_lr}});
    optim::ReduceLrOnPlateau scheduler(run.plateau_lr_factor, run.plateau_lr_patience);

    std::mt19937_64 rng(data::derive_seed(run.seed, kFinetuneShuffleStream));
    std::mt19937_64 dropout_rng(data::derive_seed(run.seed, kDropoutStream));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const augment::AugConfig* aug = run.augment ? &run.augmentation : nullptr;

    std::vector<EpochRecord> history;
    std::vector<nlohmann::json> snapshots;
    std::vector<nlohmann::json> optimizer_states;
    for (int epoch = 1; epoch <= run.finetune_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double main_sum = 0.0;
        for (std::size_t b = 0; b < order.size(); b += run.batch_size) {
            const std::size_t e = std::min(order.size(), b + run.batch_size);
            const Batch batch = make_batch(train, std::span(order).subspan(b, e - b), aug, &rng);
            net.zero_grad();
            segnet::ForwardOptions opts;
            opts.rng = &dropout_rng;
            const Tensor logits = net.forward(batch.images, opts);
            Tensor grad;
            const double l = loss->evaluate(logits, batch.targets, &grad);
            if (!std::isfinite(l)) {
                throw NumericError("finetune: non-finite loss at epoch " + std::to_string(epoch) + " (" +
                                   describe(whitening::total_loss(l, 0.0, 0.0)) + ")");
            }
            net.backward(grad);
            opt.step();
            main_sum += l * static_cast<double>(e - b);
        }
        check_parameters_finite(net, "finetune epoch " + std::to_string(epoch));

        const ValidationScores v = validate(net, val, *loss, run.batch_size);
        net.set_phase(segnet::Phase::finetune);

        const double mean_main = main_sum / static_cast<double>(train.size());
        EpochRecord rec{epoch, opt.lr("backbone"), 0.0, mean_main, 0.0, mean_main, v.loss, v.mean.dice, v.mean.cl_dice};
        history.push_back(rec);
        snapshots.push_back(net.state_dict());
        optimizer_states.push_back(opt.state());
        spdlog::info("finetune epoch {}/{}: loss {:.4f} val dice {:.4f} gamma {:.4f}", epoch, run.finetune_epochs,
                     mean_main, v.mean.dice, net.wca_gamma()->value[0]);
        if (hooks.on_epoch) hooks.on_epoch(rec);
        if (hooks.on_snapshot) hooks.on_snapshot(epoch, snapshots.back());

        const double factor = scheduler.step(v.loss);
        if (factor != 1.0) {
            opt.set_lr("wca", opt.lr("wca") * factor);
            opt.set_lr("backbone", opt.lr("backbone") * factor);
        }
    }

    std::vector<double> dice;
    for (const auto& r : history) dice.push_back(r.val_dice);
    FinetuneResult result;
    result.decision = plateau::plateau_select(dice, plateau_cfg);
    const std::size_t sel = result.decision.selected;

    Checkpoint& c = result.selected;
    c.stage = kStageFinetune;
    c.net = initial.net;
    c.run = run;
    c.epoch = history[sel].epoch;
    c.best_val_dice = history[sel].val_dice;
    c.plateau_fallback = result.decision.fallback;
    c.net_state = snapshots[sel];
    c.optimizer_state = optimizer_states[sel];
    c.history = history;
    return result;
}

// ---------------------------------------------------------------- experiment configuration

void PipelineConfig::validate() const {
    net.validate();
    run.validate();
    plateau.validate();
    source.validate();
    for (const auto& d : ood) d.validate();
    if (data.n_train == 0 || data.n_val == 0) throw ConfigError("data: n_train and n_val must be positive");
}

nlohmann::json to_json(const PipelineConfig& c) {
    nlohmann::json ood = nlohmann::json::array();
    for (const auto& d : c.ood) ood.push_back(data::to_json(d));
    const char* policy = c.preprocessing.policy == data::ResizePolicy::pad        ? "pad"
                         : c.preprocessing.policy == data::ResizePolicy::upsample ? "upsample"
                                                                                  : "none";
    return {{"net", segnet::to_json(c.net)},
            {"run", to_json(c.run)},
            {"plateau", plateau::to_json(c.plateau)},
            {"source", data::to_json(c.source)},
            {"ood", ood},
            {"data",
             {{"n_train", c.data.n_train}, {"n_val", c.data.n_val}, {"n_test", c.data.n_test}, {"n_ood", c.data.n_ood}}},
            {"preprocessing",
             {{"policy", policy},
              {"target_height", c.preprocessing.target_height},
              {"target_width", c.preprocessing.target_width}}}};
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
    check_keys(j, {"net", "run", "plateau", "source", "ood", "data", "preprocessing"}, "config");
    PipelineConfig c = default_config();
    try {
        if (j.contains("net")) c.net = segnet::net_config_from_json(j.at("net"));
        if (j.contains("run")) c.run = run_config_from_json(j.at("run"));
        if (j.contains("plateau")) c.plateau = plateau::plateau_config_from_json(j.at("plateau"));
        if (j.contains("source")) c.source = data::domain_from_json(j.at("source"));
        if (j.contains("ood")) {
            c.ood.clear();
            for (const auto& d : j.at("ood")) c.ood.push_back(data::domain_from_json(d));
        } else {
            c.ood = default_ood(c.source);
        }
        if (j.contains("data")) {
            const auto& d = j.at("data");
            check_keys(d, {"n_train", "n_val", "n_test", "n_ood"}, "data");
            c.data.n_train = d.value("n_train", c.data.n_train);
            c.data.n_val = d.value("n_val", c.data.n_val);
            c.data.n_test = d.value("n_test", c.data.n_test);
            c.data.n_ood = d.value("n_ood", c.data.n_ood);
        }
        if (j.contains("preprocessing")) {
            const auto& p = j.at("preprocessing");
            check_keys(p, {"policy", "target_height", "target_width"}, "preprocessing");
            c.preprocessing.policy = data::resize_policy_from_string(p.value("policy", std::string("none")));
            c.preprocessing.target_height = p.value("target_height", c.preprocessing.target_height);
            c.preprocessing.target_width = p.value("target_width", c.preprocessing.target_width);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    try {
        return pipeline_config_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
}

std::vector<data::DomainSpec> default_ood(const data::DomainSpec& source) {
    data::DomainSpec low = source;
    low.name = "ood_lowcontrast";
    low.shift.contrast_scale = source.shift.contrast_scale * 0.6;
    low.shift.gaussian_noise_sd = source.shift.gaussian_noise_sd * 2.0;
    low.shift.blur_sigma = source.shift.blur_sigma + 0.8;

    data::DomainSpec texture = source;
    texture.name = "ood_texture";
    texture.background.base_intensity = source.background.base_intensity - 0.1;
    texture.background.gradient_strength = source.background.gradient_strength * 2.0;
    texture.background.blob_density = source.background.blob_density + 3.0;
    texture.background.blob_strength = source.background.blob_strength + 0.1;
    texture.vessel.width = {source.vessel.width.lo * 0.75, source.vessel.width.hi * 0.75};
    texture.shift.gaussian_noise_sd = source.shift.gaussian_noise_sd * 1.5;
    return {low, texture};
}

PipelineConfig default_config(std::size_t image_size) {
    PipelineConfig c;
    c.net.input_height = c.net.input_width = image_size;
    c.source.name = "source";
    c.source.height = c.source.width = image_size;
    c.ood = default_ood(c.source);
    return c;
}

GeneratedData generate_data(const PipelineConfig& cfg, std::uint64_t seed) {
    GeneratedData g;
    g.source = data::generate_source_splits(cfg.source, cfg.data.n_train, cfg.data.n_val, cfg.data.n_test,
                                            data::derive_seed(seed, kSourceStream));
    g.source.train.name = cfg.source.name + "_train";
    g.source.val.name = cfg.source.name + "_val";
    g.source.test.name = cfg.source.name;
    for (std::size_t i = 0; i < cfg.ood.size(); ++i) {
        g.ood.push_back(data::generate_dataset(cfg.ood[i], cfg.data.n_ood, data::derive_seed(seed, kOodStream + i)));
        g.ood.back().name = cfg.ood[i].name;
    }
    return g;
}

ExperimentResult run_experiment(const PipelineConfig& cfg, const GeneratedData& data) {
    cfg.validate();
    ExperimentResult r;

    RunConfig baseline_run = cfg.run;
    baseline_run.whitening = false;
    spdlog::info("experiment: training baseline");
    r.baseline = train_initial(baseline_run, cfg.net, data.source.train, data.source.val);

    spdlog::info("experiment: training with whitening");
    r.initial = train_initial(cfg.run, cfg.net, data.source.train, data.source.val);
    r.importance = run_importance(r.initial, data.source.val, {cfg.run.zeta}, cfg.run.batch_size);
    r.finetuned = finetune(r.initial, r.importance, cfg.run, data.source.train, data.source.val, cfg.plateau);

    std::vector<NamedDataset> sets{{&data.source.test, true}};
    for (const auto& d : data.ood) sets.push_back({&d, false});
    segnet::SegNet base_net = restore(r.baseline);
    r.baseline_table = evaluate(base_net, "baseline", sets, cfg.run.batch_size);
    segnet::SegNet ours = restore(r.finetuned.selected);
    r.angiodg_table = evaluate(ours, "angiodg", sets, cfg.run.batch_size);
    return r;
}

}  // namespace angiodg::pipeline
