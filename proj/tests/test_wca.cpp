#include "angiodg/errors.hpp"
#include "angiodg/wca.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace angiodg;

namespace {

FeatureBlock random_block(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::mt19937_64& rng,
                          double sd = 1.0) {
    FeatureBlock x(n, c, h, w);
    std::normal_distribution<double> d(0.0, sd);
    for (auto& v : x.values) v = d(rng);
    return x;
}

std::vector<double> random_weights(std::size_t c, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.6, 1.5);
    std::vector<double> w(c);
    for (auto& v : w) v = u(rng);
    return w;
}

std::vector<std::vector<double>> rows(const Eigen::Ref<const RowMatrix>& m) {
    std::vector<std::vector<double>> out(m.rows(), std::vector<double>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
    return out;
}

double weighted_sum(const FeatureBlock& y, const std::vector<double>& r) {
    double s = 0;
    for (std::size_t i = 0; i < r.size(); ++i) s += y.values[i] * r[i];
    return s;
}

}  // namespace

TEST_CASE("attention rows are probability distributions") {
    std::mt19937_64 rng(1);
    for (std::size_t C : {1, 2, 8, 64}) {
        for (double sd : {0.01, 1.0, 30.0}) {
            const auto x = random_block(1, C, 6, 6, rng, sd);
            const auto w = random_weights(C, rng);
            const auto tr = wca::attention_matrix(x.flat(0), importance::build_weight_matrix(w), 0.1);
            for (Eigen::Index i = 0; i < tr.attention.rows(); ++i) {
                CHECK(std::fabs(tr.attention.row(i).sum() - 1.0) < 1e-6);
                CHECK(tr.attention.row(i).minCoeff() >= 0.0);
            }
        }
    }
}

TEST_CASE("attention and forward match direct summation") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 12; ++t) {
        const std::size_t C = 1 + rng() % 7;
        const auto x = random_block(2, C, 4, 5, rng, 0.7);
        const auto w = random_weights(C, rng);
        const auto dw = importance::build_weight_matrix(w);
        auto p = wca::make_params(w, 0.3, 0.1, t % 2 ? 0.2 : 0.0);
        p.training = true;
        std::mt19937_64 drop_rng(99);
        wca::WcaCache cache;
        const auto y = wca::wca_forward(x, p, dw, &drop_rng, &cache);
        for (std::size_t s = 0; s < 2; ++s) {
            const auto X = rows(x.flat(s));
            const auto A = oracle::wca_attention(X, w, 0.1);
            const auto tr = wca::attention_matrix(x.flat(s), dw, 0.1);
            for (std::size_t i = 0; i < C; ++i)
                for (std::size_t j = 0; j < C; ++j) CHECK(tr.attention(i, j) == doctest::Approx(A[i][j]).epsilon(1e-12));
            const auto Y = oracle::wca_output(X, rows(cache.dropout_scale[s]), w, 0.1, 0.3);
            for (std::size_t i = 0; i < C; ++i)
                for (std::size_t k = 0; k < 20; ++k)
                    CHECK(y.flat(s)(i, k) == doctest::Approx(Y[i][k]).epsilon(1e-12));
        }
    }
}

TEST_CASE("dropout multipliers are 0 or 1/(1-p)") {
    std::mt19937_64 rng(3);
    const auto x = random_block(1, 4, 8, 8, rng);
    auto p = wca::make_params(std::vector<double>(4, 1.0), 0.25, 0.1, 0.2);
    p.training = true;
    wca::WcaCache cache;
    wca::wca_forward(x, p, importance::build_weight_matrix(p.weight_diag), &rng, &cache);
    std::size_t zeros = 0;
    for (double v : cache.dropout_scale[0].reshaped()) {
        CHECK((v == 0.0 || v == doctest::Approx(1.25).epsilon(1e-15)));
        zeros += v == 0.0;
    }
    CHECK(zeros > 0);
    CHECK(zeros < 256 / 2);
}

TEST_CASE("gamma zero and the eval bypass return the input unchanged") {
    std::mt19937_64 rng(4);
    for (std::size_t C : {1, 2, 8, 64}) {
        const auto x = random_block(2, C, 5, 5, rng, 3.0);
        const auto w = random_weights(C, rng);
        const auto dw = importance::build_weight_matrix(w);
        auto p = wca::make_params(w, 0.0);
        p.training = true;
        CHECK(wca::wca_forward(x, p, dw, &rng) == x);
        p.gamma = 0.25;
        p.training = false;
        CHECK(wca::wca_forward(x, p, dw, nullptr) == x);
    }
}

TEST_CASE("backward matches central differences") {
    std::mt19937_64 rng(5);
    for (double pdrop : {0.0, 0.2}) {
        for (int t = 0; t < 5; ++t) {
            const std::size_t C = 2 + rng() % 5;
            const auto x = random_block(2, C, 4, 4, rng, 0.8);
            const auto w0 = random_weights(C, rng);
            std::vector<double> r(x.values.size());
            std::normal_distribution<double> d(0.0, 1.0);
            for (auto& v : r) v = d(rng);
            const double g0 = 0.3;

            auto run = [&](const FeatureBlock& xin, double gamma, const std::vector<double>& w, wca::WcaCache* cache) {
                auto p = wca::make_params(w, gamma, 0.1, pdrop);
                p.training = true;
                std::mt19937_64 drop_rng(1234);  // same mask every call
                return wca::wca_forward(xin, p, importance::build_weight_matrix(w), &drop_rng, cache);
            };
            wca::WcaCache cache;
            run(x, g0, w0, &cache);
            FeatureBlock gy(x.n, x.c, x.h, x.w);
            gy.values = r;
            auto p = wca::make_params(w0, g0, 0.1, pdrop);
            p.training = true;
            const auto g = wca::wca_backward(cache, gy, p, importance::build_weight_matrix(w0));

            auto fx = [&](const std::vector<double>& v) {
                FeatureBlock b = x;
                b.values = v;
                return weighted_sum(run(b, g0, w0, nullptr), r);
            };
            std::vector<double> fd(x.values.size());
            for (std::size_t i = 0; i < fd.size(); ++i) fd[i] = oracle::central_diff(fx, x.values, i, 1e-6);
            CHECK(oracle::rel_err(g.input.values, fd) < 1e-6);

            auto fg = [&](const std::vector<double>& v) { return weighted_sum(run(x, v[0], w0, nullptr), r); };
            CHECK(oracle::rel_err({g.gamma}, {oracle::central_diff(fg, {g0}, 0, 1e-6)}) < 1e-6);

            auto fw = [&](const std::vector<double>& v) { return weighted_sum(run(x, g0, v, nullptr), r); };
            std::vector<double> fdw(C);
            for (std::size_t i = 0; i < C; ++i) fdw[i] = oracle::central_diff(fw, w0, i, 1e-6);
            CHECK(oracle::rel_err(g.weight_diag, fdw) < 1e-6);
        }
    }
}

TEST_CASE("trainable parameters are gamma and the weight diagonal") {
    auto p = wca::make_params(std::vector<double>(5, 1.0));
    const auto views = wca::trainable_parameters(p);
    std::size_t n = 0;
    for (const auto& v : views) n += v.values.size();
    CHECK(n == 5 + 1);
    CHECK(p.gamma == 0.25);
    CHECK(p.phi == 0.10);
    CHECK(p.dropout_p == 0.20);
}

TEST_CASE("parameter validation") {
    CHECK_THROWS_AS(wca::make_params(std::vector<double>{}), std::invalid_argument);
    CHECK_THROWS_AS(wca::make_params(std::vector<double>{1.0}, 0.25, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(wca::make_params(std::vector<double>{1.0}, 0.25, 0.1, 1.0), std::invalid_argument);
    std::mt19937_64 rng(6);
    const auto x = random_block(1, 3, 3, 3, rng);
    CHECK_THROWS_AS(wca::attention_matrix(x.flat(0), importance::build_weight_matrix(std::vector<double>{1, 1}), 0.1),
                    ShapeError);
    auto bad = x;
    bad.values[4] = std::nan("");
    CHECK_THROWS_AS(wca::attention_matrix(bad.flat(0), importance::build_weight_matrix(std::vector<double>(3, 1.0)), 0.1),
                    NumericError);
}
