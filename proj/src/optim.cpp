#include "angiodg/optim.hpp"

#include "angiodg/errors.hpp"

#include <cmath>
#include <limits>

namespace angiodg::optim {

Adam::Adam(std::vector<ParamGroup> groups, double beta1, double beta2, double eps)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& g : groups_) {
        for (const nn::Parameter* p : g.params) slots_[p->name] = Slot{std::vector<float>(p->size(), 0.0f), std::vector<float>(p->size(), 0.0f), 0};
    }
}

void Adam::step() {
    for (auto& g : groups_) {
        for (nn::Parameter* p : g.params) {
            if (!p->requires_grad) continue;
            Slot& s = slots_.at(p->name);
            ++s.step;
            const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(s.step));
            const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(s.step));
            const auto b1 = static_cast<float>(beta1_);
            const auto b2 = static_cast<float>(beta2_);
            const auto step_size = static_cast<float>(g.lr / bc1);
            const auto inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
            const auto eps = static_cast<float>(eps_);
            for (std::size_t i = 0; i < p->size(); ++i) {
                const float grad = p->grad[i];
                s.m[i] = b1 * s.m[i] + (1.0f - b1) * grad;
                s.v[i] = b2 * s.v[i] + (1.0f - b2) * grad * grad;
                p->value[i] -= step_size * s.m[i] / (std::sqrt(s.v[i]) * inv_sqrt_bc2 + eps);
            }
        }
    }
}

void Adam::set_lr(const std::string& group, double lr) {
    for (auto& g : groups_) {
        if (g.name == group) {
            g.lr = lr;
            return;
        }
    }
    throw ConfigError("Adam: no parameter group '" + group + "'");
}

double Adam::lr(const std::string& group) const {
    for (const auto& g : groups_) {
        if (g.name == group) return g.lr;
    }
    throw ConfigError("Adam: no parameter group '" + group + "'");
}

nlohmann::json Adam::state() const {
    nlohmann::json slots = nlohmann::json::object();
    for (const auto& [name, s] : slots_) slots[name] = {{"m", s.m}, {"v", s.v}, {"step", s.step}};
    nlohmann::json lrs = nlohmann::json::object();
    for (const auto& g : groups_) lrs[g.name] = g.lr;
    return {{"type", "adam"}, {"beta1", beta1_}, {"beta2", beta2_}, {"eps", eps_}, {"lr", lrs}, {"slots", slots}};
}

void Adam::load_state(const nlohmann::json& j) {
    try {
        for (auto& [name, s] : slots_) {
            if (!j.at("slots").contains(name)) continue;
            const auto& js = j.at("slots").at(name);
            auto m = js.at("m").get<std::vector<float>>();
            auto v = js.at("v").get<std::vector<float>>();
            if (m.size() != s.m.size() || v.size() != s.v.size()) throw ShapeError("Adam: state size mismatch for " + name);
            s.m = std::move(m);
            s.v = std::move(v);
            s.step = js.at("step").get<long>();
        }
        for (auto& g : groups_) {
            if (j.at("lr").contains(g.name)) g.lr = j.at("lr").at(g.name).get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("Adam: malformed state: ") + e.what());
    }
}

double poly_lr(double base_lr, int epoch, int total_epochs, double power) {
    const double frac = 1.0 - static_cast<double>(epoch - 1) / static_cast<double>(total_epochs);
    return base_lr * std::pow(std::max(frac, 0.0), power);
}

ReduceLrOnPlateau::ReduceLrOnPlateau(double factor, int patience, double threshold)
    : factor_(factor), patience_(patience), threshold_(threshold), best_(std::numeric_limits<double>::infinity()) {}

double ReduceLrOnPlateau::step(double metric) {
    if (metric < best_ * (1.0 - threshold_)) {
        best_ = metric;
        bad_epochs_ = 0;
        return 1.0;
    }
    if (++bad_epochs_ > patience_) {
        bad_epochs_ = 0;
        ++reductions_;
        return factor_;
    }
    return 1.0;
}

}  // namespace angiodg::optim
