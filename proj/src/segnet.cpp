#include "angiodg/segnet.hpp"

#include "angiodg/errors.hpp"

#include <spdlog/spdlog.h>

#include <cmath>

namespace angiodg::segnet {

std::string to_string(Phase p) {
    switch (p) {
        case Phase::initial: return "initial";
        case Phase::finetune: return "finetune";
        case Phase::eval: return "eval";
    }
    return "unknown";
}

Phase phase_from_string(const std::string& s) {
    if (s == "initial") return Phase::initial;
    if (s == "finetune") return Phase::finetune;
    if (s == "eval") return Phase::eval;
    throw ConfigError("unknown phase '" + s + "'");
}

std::size_t NetConfig::bottleneck() const noexcept {
    return bottleneck_channels ? bottleneck_channels : first_layer_channels << encoder_depth;
}

void NetConfig::validate() const {
    if (first_layer_channels == 0) throw ConfigError("net: first_layer_channels must be >= 1");
    const std::size_t div = std::size_t{1} << encoder_depth;
    if (input_height == 0 || input_width == 0 || input_height % div != 0 || input_width % div != 0) {
        throw ConfigError("net: input size must be a positive multiple of 2^encoder_depth = " +
                          std::to_string(div));
    }
}

nlohmann::json to_json(const NetConfig& cfg) {
    return {{"first_layer_channels", cfg.first_layer_channels},
            {"encoder_depth", cfg.encoder_depth},
            {"bottleneck_channels", cfg.bottleneck_channels},
            {"input_height", cfg.input_height},
            {"input_width", cfg.input_width}};
}

NetConfig net_config_from_json(const nlohmann::json& j) {
    NetConfig cfg;
    cfg.first_layer_channels = j.value("first_layer_channels", cfg.first_layer_channels);
    cfg.encoder_depth = j.value("encoder_depth", cfg.encoder_depth);
    cfg.bottleneck_channels = j.value("bottleneck_channels", cfg.bottleneck_channels);
    cfg.input_height = j.value("input_height", cfg.input_height);
    cfg.input_width = j.value("input_width", cfg.input_width);
    cfg.validate();
    return cfg;
}

namespace {

FeatureBlock to_block(const Tensor& t) {
    FeatureBlock fb(t.n, t.c, t.h, t.w);
    for (std::size_t i = 0; i < t.data.size(); ++i) fb.values[i] = t.data[i];
    return fb;
}

Tensor from_block(const FeatureBlock& fb) {
    Tensor t(fb.n, fb.c, fb.h, fb.w);
    for (std::size_t i = 0; i < fb.values.size(); ++i) t.data[i] = static_cast<float>(fb.values[i]);
    return t;
}

void apply_mask(Tensor& t, const std::vector<float>& mask) {
    for (std::size_t s = 0; s < t.n; ++s) {
        for (std::size_t c = 0; c < t.c; ++c) {
            if (mask[c] == 1.0f) continue;
            float* p = t.channel(s, c);
            for (std::size_t i = 0; i < t.spatial(); ++i) p[i] *= mask[c];
        }
    }
}

void add_into(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace

SegNet::SegNet(const NetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t c1 = cfg_.first_layer_channels;
    const std::size_t depth = cfg_.encoder_depth;

    conv1_ = nn::Conv2d("conv1", 1, c1, 3, false);
    bn1_ = nn::BatchNorm2d("bn1", c1);
    block2_ = nn::ConvBnRelu("block2", c1, c1);

    skip_channels_.push_back(c1);
    for (std::size_t d = 1; d <= depth; ++d) {
        const std::size_t out = d == depth ? cfg_.bottleneck() : c1 << d;
        down_.emplace_back("down" + std::to_string(d), skip_channels_.back(), out);
        pools_.emplace_back();
        skip_channels_.push_back(out);
    }
    // up_[d] maps concat(upsampled level d+1, skip d) to skip_channels_[d] channels.
    for (std::size_t d = 0; d < depth; ++d) {
        up_.emplace_back("up" + std::to_string(d), skip_channels_[d + 1] + skip_channels_[d], skip_channels_[d]);
    }
    head_ = nn::Conv2d("head", c1, 1, 1, true);

    std::mt19937_64 rng(seed);
    conv1_.init(rng);
    block2_.conv.init(rng);
    for (auto& b : down_) b.conv.init(rng);
    for (auto& b : up_) b.conv.init(rng);
    head_.init(rng);
    set_phase(Phase::initial);
}

Tensor SegNet::forward(const Tensor& images, const ForwardOptions& opts) {
    if (images.n == 0 || images.c != 1 || images.h != cfg_.input_height || images.w != cfg_.input_width) {
        throw ShapeError("SegNet::forward: expected (N, 1, " + std::to_string(cfg_.input_height) + ", " +
                         std::to_string(cfg_.input_width) + ") images, got (" + std::to_string(images.n) + ", " +
                         std::to_string(images.c) + ", " + std::to_string(images.h) + ", " +
                         std::to_string(images.w) + ")");
    }
    const bool batch_stats = phase_ == Phase::initial;

    Tensor x = conv1_.forward(images);
    if (opts.capture_pre_norm) captured_ = x;
    mask_ = opts.channel_mask;
    if (mask_) {
        if (mask_->size() != x.c) throw ShapeError("SegNet::forward: channel mask length mismatch");
        apply_mask(x, *mask_);
    }
    wca_ran_ = false;
    if (phase_ == Phase::finetune && has_wca()) {
        wca::WcaParams params = wca_params();
        params.training = true;
        const importance::WeightMatrix d_w(params.weight_diag);
        x = from_block(wca::wca_forward(to_block(x), params, d_w, opts.rng, &wca_cache_));
        wca_ran_ = true;
    }

    Tensor y = bn1_.forward(x, batch_stats);
    post_norm_ = y;
    relu1_.forward(y);

    Tensor cur = block2_.forward(y, batch_stats);
    std::vector<Tensor> skips{cur};
    for (std::size_t d = 0; d < down_.size(); ++d) {
        cur = down_[d].forward(pools_[d].forward(cur), batch_stats);
        if (d + 1 < down_.size()) skips.push_back(cur);
    }
    for (std::size_t d = up_.size(); d-- > 0;) {
        cur = up_[d].forward(nn::concat_channels(nn::upsample2_nearest(cur), skips[d]), batch_stats);
    }
    return head_.forward(cur);
}

Tensor SegNet::predict(const Tensor& images, const ForwardOptions& opts) {
    Tensor p = forward(images, opts);
    for (float& v : p.data) v = 1.0f / (1.0f + std::exp(-v));
    return p;
}

void SegNet::backward(const Tensor& grad_logits, const Tensor* grad_pre_norm) {
    const std::size_t depth = down_.size();
    std::vector<Tensor> level_grad(depth + 1);

    Tensor dcur = head_.backward(grad_logits);
    for (std::size_t d = 0; d < depth; ++d) {
        Tensor dup, dskip;
        nn::split_channels(up_[d].backward(dcur), skip_channels_[d + 1], dup, dskip);
        level_grad[d] = std::move(dskip);
        dcur = nn::upsample2_nearest_backward(dup);
    }
    level_grad[depth] = std::move(dcur);
    for (std::size_t d = depth; d >= 1; --d) {
        Tensor prev = pools_[d - 1].backward(down_[d - 1].backward(level_grad[d]));
        add_into(level_grad[d - 1], prev);
    }

    Tensor dx = block2_.backward(level_grad[0]);
    relu1_.backward(dx);
    dx = bn1_.backward(dx);
    if (wca_ran_) {
        const wca::WcaParams params = wca_params();
        const importance::WeightMatrix d_w(params.weight_diag);
        const wca::WcaGradients g = wca::wca_backward(wca_cache_, to_block(dx), params, d_w);
        dx = from_block(g.input);
        if (wca_gamma_->requires_grad) wca_gamma_->grad[0] += static_cast<float>(g.gamma);
        if (wca_weights_->requires_grad) {
            for (std::size_t i = 0; i < g.weight_diag.size(); ++i) {
                wca_weights_->grad[i] += static_cast<float>(g.weight_diag[i]);
            }
        }
    }
    if (mask_) apply_mask(dx, *mask_);
    if (grad_pre_norm) {
        if (!grad_pre_norm->same_shape(dx)) throw ShapeError("SegNet::backward: pre-norm gradient shape mismatch");
        add_into(dx, *grad_pre_norm);
    }
    conv1_.backward(dx, false);
}

void SegNet::set_phase(Phase p) {
    if (p == Phase::finetune && !has_wca()) {
        attach_wca(std::vector<double>(cfg_.first_layer_channels, 1.0), 0.25);
    }
    phase_ = p;
    for (nn::Parameter* param : parameters()) param->requires_grad = false;
    for (nn::Parameter* param : trainable_parameters()) param->requires_grad = true;
}

void SegNet::attach_wca(const std::vector<double>& weights, double gamma, const WcaSettings& settings) {
    if (weights.size() != cfg_.first_layer_channels) {
        throw ShapeError("attach_wca: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(cfg_.first_layer_channels) + " channels");
    }
    wca::make_params(weights, gamma, settings.phi, settings.dropout_p);  // validates
    wca_settings_ = settings;
    wca_gamma_ = nn::Parameter("wca.gamma", 1);
    wca_gamma_->value[0] = static_cast<float>(gamma);
    wca_weights_ = nn::Parameter("wca.weight_diag", weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) wca_weights_->value[i] = static_cast<float>(weights[i]);
    set_phase(phase_ == Phase::finetune ? Phase::finetune : phase_);
}

wca::WcaParams SegNet::wca_params() const {
    wca::WcaParams p;
    if (!has_wca()) return p;
    p.gamma = wca_gamma_->value[0];
    p.weight_diag.assign(wca_weights_->value.begin(), wca_weights_->value.end());
    p.phi = wca_settings_.phi;
    p.dropout_p = wca_settings_.dropout_p;
    p.training = phase_ == Phase::finetune;
    return p;
}

std::vector<nn::Parameter*> SegNet::parameters() {
    std::vector<nn::Parameter*> ps{&conv1_.weight, &bn1_.gamma, &bn1_.beta};
    auto add_block = [&ps](nn::ConvBnRelu& b) {
        ps.push_back(&b.conv.weight);
        ps.push_back(&b.bn.gamma);
        ps.push_back(&b.bn.beta);
    };
    add_block(block2_);
    for (auto& b : down_) add_block(b);
    for (auto& b : up_) add_block(b);
    ps.push_back(&head_.weight);
    ps.push_back(&head_.bias);
    if (has_wca()) {
        ps.push_back(&*wca_gamma_);
        ps.push_back(&*wca_weights_);
    }
    return ps;
}

std::vector<nn::Parameter*> SegNet::trainable_parameters() {
    switch (phase_) {
        case Phase::initial: {
            auto ps = parameters();
            if (has_wca()) ps.resize(ps.size() - 2);
            return ps;
        }
        case Phase::finetune:
            return {&conv1_.weight, &block2_.conv.weight, &*wca_gamma_, &*wca_weights_};
        case Phase::eval:
            return {};
    }
    return {};
}

std::size_t SegNet::trainable_count() {
    std::size_t n = 0;
    for (const nn::Parameter* p : trainable_parameters()) n += p->size();
    return n;
}

void SegNet::zero_grad() {
    for (nn::Parameter* p : parameters()) p->zero_grad();
}

std::vector<nn::BatchNorm2d*> SegNet::mutable_norm_layers() {
    std::vector<nn::BatchNorm2d*> out{&bn1_, &block2_.bn};
    for (auto& b : down_) out.push_back(&b.bn);
    for (auto& b : up_) out.push_back(&b.bn);
    return out;
}

std::vector<const nn::BatchNorm2d*> SegNet::norm_layers() const {
    auto layers = const_cast<SegNet*>(this)->mutable_norm_layers();
    return {layers.begin(), layers.end()};
}

nlohmann::json SegNet::state_dict() const {
    auto* self = const_cast<SegNet*>(this);
    nlohmann::json params = nlohmann::json::object();
    for (const nn::Parameter* p : self->parameters()) params[p->name] = p->value;
    nlohmann::json buffers = nlohmann::json::object();
    for (const nn::BatchNorm2d* bn : norm_layers()) {
        const std::string base = bn->gamma.name.substr(0, bn->gamma.name.size() - std::string(".gamma").size());
        buffers[base + ".running_mean"] = bn->running_mean;
        buffers[base + ".running_var"] = bn->running_var;
    }
    nlohmann::json j = {{"config", to_json(cfg_)}, {"params", params}, {"buffers", buffers}};
    if (has_wca()) j["wca"] = {{"phi", wca_settings_.phi}, {"dropout_p", wca_settings_.dropout_p}};
    return j;
}

void SegNet::load_state_dict(const nlohmann::json& j) {
    try {
        if (j.contains("wca")) {
            const auto& w = j.at("wca");
            const auto gamma = j.at("params").at("wca.gamma").get<std::vector<float>>();
            const auto weights = j.at("params").at("wca.weight_diag").get<std::vector<double>>();
            wca_settings_ = {w.at("phi").get<double>(), w.at("dropout_p").get<double>()};
            wca_gamma_ = nn::Parameter("wca.gamma", 1);
            wca_weights_ = nn::Parameter("wca.weight_diag", weights.size());
            wca_gamma_->value = gamma;
            for (std::size_t i = 0; i < weights.size(); ++i) wca_weights_->value[i] = static_cast<float>(weights[i]);
        } else {
            wca_gamma_.reset();
            wca_weights_.reset();
        }
        for (nn::Parameter* p : parameters()) {
            auto v = j.at("params").at(p->name).get<std::vector<float>>();
            if (v.size() != p->size()) throw ShapeError("checkpoint: size mismatch for " + p->name);
            p->value = std::move(v);
        }
        for (nn::BatchNorm2d* bn : mutable_norm_layers()) {
            const std::string base = bn->gamma.name.substr(0, bn->gamma.name.size() - std::string(".gamma").size());
            bn->running_mean = j.at("buffers").at(base + ".running_mean").get<std::vector<float>>();
            bn->running_var = j.at("buffers").at(base + ".running_var").get<std::vector<float>>();
            if (bn->running_mean.size() != bn->channels() || bn->running_var.size() != bn->channels()) {
                throw ShapeError("checkpoint: running statistics size mismatch for " + base);
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("checkpoint: malformed network state: ") + e.what());
    }
    set_phase(phase_);
}

}  // namespace angiodg::segnet
