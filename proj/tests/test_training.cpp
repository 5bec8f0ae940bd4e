#include "angiodg/errors.hpp"
#include "angiodg/losses.hpp"
#include "angiodg/optim.hpp"
#include "angiodg/plateau.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace angiodg;

namespace {

std::pair<Tensor, Tensor> random_batch(std::mt19937_64& rng) {
    Tensor logits(3, 1, 4, 5), targets(3, 1, 4, 5);
    std::normal_distribution<float> d(0.0f, 2.0f);
    std::bernoulli_distribution b(0.3);
    for (auto& v : logits.data) v = d(rng);
    for (auto& v : targets.data) v = b(rng) ? 1.0f : 0.0f;
    return {logits, targets};
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Direct per-sample soft Dice and pixel-mean BCE.
double dice_loss(const Tensor& z, const Tensor& t) {
    double total = 0;
    for (std::size_t n = 0; n < z.n; ++n) {
        double inter = 0, sp = 0, st = 0;
        for (std::size_t i = 0; i < z.sample_size(); ++i) {
            const double p = sigmoid(z.sample(n)[i]);
            inter += p * t.sample(n)[i];
            sp += p;
            st += t.sample(n)[i];
        }
        total += 1.0 - (2 * inter + 1) / (sp + st + 1);
    }
    return total / z.n;
}

double bce_loss(const Tensor& z, const Tensor& t) {
    double total = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double p = sigmoid(z.data[i]);
        total -= t.data[i] * std::log(p) + (1 - t.data[i]) * std::log(1 - p);
    }
    return total / z.size();
}

}  // namespace

TEST_CASE("main losses match direct formulas and their gradients") {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 5; ++t) {
        const auto [z, y] = random_batch(rng);
        const losses::SoftDiceLoss dice;
        const losses::BceLoss bce;
        const losses::DiceBceLoss both;
        CHECK(dice.evaluate(z, y, nullptr) == doctest::Approx(dice_loss(z, y)).epsilon(1e-6));
        CHECK(bce.evaluate(z, y, nullptr) == doctest::Approx(bce_loss(z, y)).epsilon(1e-6));
        CHECK(both.evaluate(z, y, nullptr) ==
              doctest::Approx(0.5 * dice_loss(z, y) + 0.5 * bce_loss(z, y)).epsilon(1e-6));

        for (const losses::MainLoss* l : std::initializer_list<const losses::MainLoss*>{&dice, &bce, &both}) {
            Tensor g;
            l->evaluate(z, y, &g);
            REQUIRE(g.same_shape(z));
            std::vector<double> x0(z.data.begin(), z.data.end()), fd(z.size());
            auto f = [&](const std::vector<double>& v) {
                Tensor zz = z;
                for (std::size_t i = 0; i < v.size(); ++i) zz.data[i] = static_cast<float>(v[i]);
                return l->evaluate(zz, y, nullptr);
            };
            for (std::size_t i = 0; i < fd.size(); ++i) fd[i] = oracle::central_diff(f, x0, i, 1e-2);
            CHECK(oracle::rel_err(std::vector<double>(g.data.begin(), g.data.end()), fd) < 1e-3);
        }
    }
}

TEST_CASE("loss factory") {
    CHECK(losses::make_main_loss("dice_bce")->name() == "dice_bce");
    CHECK(losses::make_main_loss("dice")->name() == "dice");
    CHECK(losses::make_main_loss("bce")->name() == "bce");
    CHECK_THROWS_AS(losses::make_main_loss("focal"), ConfigError);
}

TEST_CASE("Adam follows the bias-corrected update") {
    nn::Parameter p("p", 2);
    p.value = {1.0f, -2.0f};
    optim::Adam adam({{"g", {&p}, 0.1}});
    double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {1.0, -2.0};
    const double grads[3][2] = {{0.5, -1.0}, {0.2, 0.3}, {-0.7, 0.0}};
    for (int t = 1; t <= 3; ++t) {
        p.grad = {float(grads[t - 1][0]), float(grads[t - 1][1])};
        adam.step();
        for (int i = 0; i < 2; ++i) {
            m[i] = 0.9 * m[i] + 0.1 * grads[t - 1][i];
            v[i] = 0.999 * v[i] + 0.001 * grads[t - 1][i] * grads[t - 1][i];
            const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
            x[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
            CHECK(p.value[i] == doctest::Approx(x[i]).epsilon(1e-5));
        }
    }

    // Frozen parameters are skipped; state survives a round trip.
    nn::Parameter q("q", 1);
    q.value = {3.0f};
    q.grad = {1.0f};
    q.requires_grad = false;
    optim::Adam a2({{"g", {&p}, 0.1}, {"h", {&q}, 0.1}});
    a2.step();
    CHECK(q.value[0] == 3.0f);
    a2.set_lr("h", 0.5);
    CHECK(a2.lr("h") == 0.5);

    nn::Parameter p1 = p, p2 = p;
    optim::Adam o1({{"g", {&p1}, 0.1}}), o2({{"g", {&p2}, 0.1}});
    p1.grad = p2.grad = {0.3f, 0.1f};
    o1.step();
    o2.load_state(o1.state());
    p2.value = p1.value;
    o1.step();
    o2.step();
    CHECK(p1.value == p2.value);
}

TEST_CASE("polynomial decay") {
    CHECK(optim::poly_lr(1e-3, 1, 40) == 1e-3);
    CHECK(optim::poly_lr(1e-3, 21, 40) == doctest::Approx(1e-3 * std::pow(0.5, 0.9)).epsilon(1e-14));
    CHECK(optim::poly_lr(1e-3, 40, 40) == doctest::Approx(1e-3 * std::pow(1.0 / 40, 0.9)).epsilon(1e-14));
    for (int e = 1; e < 40; ++e) CHECK(optim::poly_lr(1.0, e + 1, 40) < optim::poly_lr(1.0, e, 40));
}

TEST_CASE("plateau-triggered LR reduction") {
    optim::ReduceLrOnPlateau s(0.5, 2, 1e-4);
    CHECK(s.step(1.0) == 1.0);
    CHECK(s.step(0.9) == 1.0);
    CHECK(s.step(0.9) == 1.0);       // 1 bad epoch
    CHECK(s.step(0.89995) == 1.0);   // below the relative threshold: 2 bad epochs
    CHECK(s.step(0.95) == 0.5);      // 3 > patience
    CHECK(s.reductions() == 1);
    CHECK(s.step(0.95) == 1.0);      // counter was reset
    CHECK(s.step(0.5) == 1.0);
}

TEST_CASE("plateau walkthrough: constant history") {
    const std::vector<double> h(20, 0.8);
    plateau::PlateauConfig cfg;
    cfg.warmup = 3;
    cfg.window = 5;
    const auto d = plateau::plateau_select(h, cfg);
    CHECK(d.selected == 19);
    CHECK(!d.fallback);
    for (std::size_t i = 0; i < 20; ++i) CHECK(d.on_plateau[i] == (i >= 3));
}

TEST_CASE("plateau walkthrough: strictly increasing history falls back to the last epoch") {
    std::vector<double> h;
    for (int i = 0; i < 15; ++i) h.push_back(0.3 + 0.04 * i);
    const auto d = plateau::plateau_select(h, {});
    CHECK(d.selected == 14);
    CHECK(d.fallback);
    for (bool b : d.on_plateau) CHECK(!b);
}

TEST_CASE("plateau walkthrough: plateau, drop, recovery") {
    std::vector<double> h{0.5, 0.65, 0.75};
    for (int i = 3; i <= 12; ++i) h.push_back(0.80);
    h.push_back(0.70);
    h.push_back(0.72);
    for (int i = 15; i <= 19; ++i) h.push_back(0.80);
    plateau::PlateauConfig cfg;
    cfg.warmup = 5;
    cfg.window = 3;
    const auto d = plateau::plateau_select(h, cfg);
    CHECK(d.selected == 12);
    CHECK(!d.fallback);
    CHECK(d.on_plateau[5]);
    CHECK(!d.on_plateau[13]);
}

TEST_CASE("plateau tolerance follows the scaled MAD with a floor") {
    const std::vector<double> h{0.90, 0.91, 0.92, 0.95};
    plateau::PlateauConfig cfg;
    cfg.warmup = 0;
    cfg.sd_cap = 1.0;
    const auto d = plateau::plateau_select(h, cfg);
    // Window {0.91, 0.92, 0.95}: median 0.92, deviations {0.01, 0, 0.03}, MAD 0.01.
    CHECK(d.epsilon[3] == doctest::Approx(1.4826 * 0.01).epsilon(1e-9));
    // Window {0.90, 0.91}: median 0.905, MAD 0.005.
    CHECK(d.epsilon[1] == doctest::Approx(1.4826 * 0.005).epsilon(1e-9));
    const std::vector<double> flat(4, 0.5);
    CHECK(plateau::plateau_select(flat, cfg).epsilon[3] == cfg.epsilon_floor);
    // The window SD is the sample SD.
    const double mean = (0.91 + 0.92 + 0.95) / 3;
    const double var = (std::pow(0.91 - mean, 2) + std::pow(0.92 - mean, 2) + std::pow(0.95 - mean, 2)) / 2;
    CHECK(d.window_sd[3] == doctest::Approx(std::sqrt(var)).epsilon(1e-9));
}

TEST_CASE("plateau config validation and JSON") {
    plateau::PlateauConfig cfg;
    cfg.window = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.sd_cap = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.window = 7;
    cfg.sd_cap = 0.01;
    const auto back = plateau::plateau_config_from_json(plateau::to_json(cfg));
    CHECK(back.window == 7);
    CHECK(back.sd_cap == 0.01);
    CHECK_THROWS_AS(plateau::plateau_select(std::vector<double>{}, {}), std::invalid_argument);
}
