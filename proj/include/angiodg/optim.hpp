#pragma once

#include "angiodg/layers.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <vector>

namespace angiodg::optim {

struct ParamGroup {
    std::string name;
    std::vector<nn::Parameter*> params;
    double lr = 1e-4;
};

// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8); per-parameter
// state keyed by parameter name. Parameters with requires_grad == false are skipped.
class Adam {
public:
    explicit Adam(std::vector<ParamGroup> groups, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void step();
    std::vector<ParamGroup>& groups() noexcept { return groups_; }
    void set_lr(const std::string& group, double lr);
    double lr(const std::string& group) const;

    nlohmann::json state() const;
    void load_state(const nlohmann::json& j);

private:
    struct Slot {
        std::vector<float> m;
        std::vector<float> v;
        long step = 0;
    };
    std::vector<ParamGroup> groups_;
    std::map<std::string, Slot> slots_;
    double beta1_, beta2_, eps_;
};

// base · (1 - (epoch-1)/total)^power for 1-based epochs, stepped once per epoch.
double poly_lr(double base_lr, int epoch, int total_epochs, double power = 0.9);

// Multiplies the learning rate by `factor` after more than `patience` epochs
// without a relative improvement of `threshold` in a minimized metric.
class ReduceLrOnPlateau {
public:
    ReduceLrOnPlateau(double factor = 0.5, int patience = 2, double threshold = 1e-4);
    // Returns the multiplier to apply to every group this epoch (1 or factor).
    double step(double metric);
    int reductions() const noexcept { return reductions_; }

private:
    double factor_;
    int patience_;
    double threshold_;
    double best_;
    int bad_epochs_ = 0;
    int reductions_ = 0;
};

}  // namespace angiodg::optim
