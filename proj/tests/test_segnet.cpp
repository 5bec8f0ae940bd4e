#include "angiodg/errors.hpp"
#include "angiodg/layers.hpp"
#include "angiodg/optim.hpp"
#include "angiodg/segnet.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace angiodg;

namespace {

Tensor random_tensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::mt19937_64& rng,
                     float mean = 0.0f, float sd = 1.0f) {
    Tensor t(n, c, h, w);
    std::normal_distribution<float> d(mean, sd);
    for (auto& v : t.data) v = d(rng);
    return t;
}

Tensor random_images(std::size_t n, std::size_t h, std::size_t w, std::mt19937_64& rng) {
    Tensor t(n, 1, h, w);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (auto& v : t.data) v = u(rng);
    return t;
}

std::vector<double> to_double(const std::vector<float>& v) { return {v.begin(), v.end()}; }

segnet::NetConfig small_config(std::size_t c1 = 4) {
    segnet::NetConfig cfg;
    cfg.first_layer_channels = c1;
    cfg.encoder_depth = 2;
    cfg.input_height = 16;
    cfg.input_width = 16;
    return cfg;
}

}  // namespace

TEST_CASE("conv forward and backward match direct loops") {
    std::mt19937_64 rng(1);
    for (std::size_t k : {1, 3}) {
        const std::size_t N = 2, I = 3, O = 5, H = 6, W = 7;
        nn::Conv2d conv("c", I, O, k, true);
        conv.init(rng);
        for (auto& b : conv.bias.value) b = 0.1f;
        const Tensor x = random_tensor(N, I, H, W, rng);
        const Tensor r = random_tensor(N, O, H, W, rng);
        const Tensor y = conv.forward(x);
        const int p = static_cast<int>(k / 2);

        std::vector<double> want(y.size()), dx(x.size(), 0.0), dw(conv.weight.size(), 0.0), db(O, 0.0);
        auto xi = [&](std::size_t n, std::size_t c, int yy, int xx) -> double {
            return (yy < 0 || xx < 0 || yy >= int(H) || xx >= int(W)) ? 0.0 : x.at(n, c, yy, xx);
        };
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o)
                for (int yy = 0; yy < int(H); ++yy)
                    for (int xx = 0; xx < int(W); ++xx) {
                        double s = conv.bias.value[o];
                        const double g = r.at(n, o, yy, xx);
                        db[o] += g;
                        for (std::size_t i = 0; i < I; ++i)
                            for (std::size_t ky = 0; ky < k; ++ky)
                                for (std::size_t kx = 0; kx < k; ++kx) {
                                    const int sy = yy + int(ky) - p, sx = xx + int(kx) - p;
                                    const std::size_t wi = ((o * I + i) * k + ky) * k + kx;
                                    s += conv.weight.value[wi] * xi(n, i, sy, sx);
                                    dw[wi] += g * xi(n, i, sy, sx);
                                    if (sy >= 0 && sx >= 0 && sy < int(H) && sx < int(W))
                                        dx[((n * I + i) * H + sy) * W + sx] += g * conv.weight.value[wi];
                                }
                        want[((n * O + o) * H + yy) * W + xx] = s;
                    }
        CHECK(oracle::rel_err(to_double(y.data), want) < 1e-6);
        conv.weight.zero_grad();
        conv.bias.zero_grad();
        const Tensor gx = conv.backward(r);
        CHECK(oracle::rel_err(to_double(gx.data), dx) < 1e-6);
        CHECK(oracle::rel_err(to_double(conv.weight.grad), dw) < 1e-6);
        CHECK(oracle::rel_err(to_double(conv.bias.grad), db) < 1e-6);
    }
}

TEST_CASE("batch norm backward matches the closed form") {
    std::mt19937_64 rng(2);
    nn::BatchNorm2d bn("bn", 3);
    bn.gamma.value = {1.5f, 0.5f, -1.0f};
    bn.beta.value = {0.1f, 0.2f, 0.3f};
    const Tensor x = random_tensor(4, 3, 5, 5, rng, 2.0f, 3.0f);
    const Tensor dy = random_tensor(4, 3, 5, 5, rng);
    bn.forward(x, true);
    bn.gamma.zero_grad();
    bn.beta.zero_grad();
    const Tensor dx = bn.backward(dy);
    const double m = 4 * 25;
    std::vector<double> want(dx.size());
    for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0, var = 0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 25; ++i) mean += x.channel(n, c)[i];
        mean /= m;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 25; ++i) var += std::pow(x.channel(n, c)[i] - mean, 2);
        var /= m;
        const double istd = 1.0 / std::sqrt(var + 1e-5);
        double sdy = 0, sdyx = 0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 25; ++i) {
                sdy += dy.channel(n, c)[i];
                sdyx += dy.channel(n, c)[i] * (x.channel(n, c)[i] - mean) * istd;
            }
        CHECK(bn.beta.grad[c] == doctest::Approx(sdy).epsilon(1e-5));
        CHECK(bn.gamma.grad[c] == doctest::Approx(sdyx).epsilon(1e-5));
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 25; ++i) {
                const double xh = (x.channel(n, c)[i] - mean) * istd;
                want[(n * 3 + c) * 25 + i] = bn.gamma.value[c] * istd / m * (m * dy.channel(n, c)[i] - sdy - xh * sdyx);
            }
    }
    CHECK(oracle::rel_err(to_double(dx.data), want) < 1e-5);
}

TEST_CASE("running statistics update with the unbiased batch variance") {
    std::mt19937_64 rng(3);
    nn::BatchNorm2d bn("bn", 1);
    const Tensor x = random_tensor(2, 1, 3, 3, rng, 1.0f, 2.0f);
    bn.forward(x, true);
    double mean = 0, ss = 0;
    for (float v : x.data) mean += v;
    mean /= 18;
    for (float v : x.data) ss += (v - mean) * (v - mean);
    CHECK(bn.running_mean[0] == doctest::Approx(0.1 * mean).epsilon(1e-6));
    CHECK(bn.running_var[0] == doctest::Approx(0.9 + 0.1 * ss / 17).epsilon(1e-6));

    const auto rm = bn.running_mean, rv = bn.running_var;
    bn.forward(x, false);
    CHECK(bn.running_mean == rm);
    CHECK(bn.running_var == rv);
}

TEST_CASE("pooling, upsampling and concatenation") {
    Tensor x(1, 1, 2, 4);
    x.data = {1, 5, 2, 0, 3, 4, 9, 1};
    nn::MaxPool2 pool;
    const Tensor y = pool.forward(x);
    CHECK(y.data == std::vector<float>{5, 9});
    Tensor dy(1, 1, 1, 2);
    dy.data = {1, 2};
    CHECK(pool.backward(dy).data == std::vector<float>{0, 1, 0, 0, 0, 0, 2, 0});

    const Tensor u = nn::upsample2_nearest(y);
    CHECK(u.data == std::vector<float>{5, 5, 9, 9, 5, 5, 9, 9});
    CHECK(nn::upsample2_nearest_backward(u).data == std::vector<float>{20, 36});

    const Tensor cat = nn::concat_channels(x, x);
    CHECK(cat.c == 2);
    Tensor da, db;
    nn::split_channels(cat, 1, da, db);
    CHECK(da == x);
    CHECK(db == x);
}

TEST_CASE("network shapes, phases and trainable sets") {
    for (std::size_t c1 : {2, 4, 8}) {
        segnet::SegNet net(small_config(c1), 7);
        std::mt19937_64 rng(4);
        const Tensor logits = net.forward(random_images(3, 16, 16, rng));
        CHECK(logits.n == 3);
        CHECK(logits.c == 1);
        CHECK(logits.h == 16);
        CHECK(logits.w == 16);
        CHECK_THROWS_AS(net.forward(random_images(1, 8, 8, rng)), ShapeError);

        net.attach_wca(std::vector<double>(c1, 1.0), 0.25);
        net.set_phase(segnet::Phase::finetune);
        CHECK(net.trainable_count() == c1 * 9 + c1 * c1 * 9 + c1 + 1);
        net.set_phase(segnet::Phase::eval);
        CHECK(net.trainable_count() == 0);
    }
    for (auto p : {segnet::Phase::initial, segnet::Phase::finetune, segnet::Phase::eval})
        CHECK(segnet::phase_from_string(segnet::to_string(p)) == p);

    auto bad = small_config();
    bad.input_height = 18;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = small_config();
    bad.first_layer_channels = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("a zeroed pre-norm channel gives a constant post-norm map") {
    segnet::SegNet net(small_config(6), 11);
    std::mt19937_64 rng(5);
    const Tensor img = random_images(4, 16, 16, rng);
    net.forward(img);  // populate running statistics
    for (auto phase : {segnet::Phase::initial, segnet::Phase::eval}) {
        net.set_phase(phase);
        for (std::size_t ch = 0; ch < 6; ++ch) {
            std::vector<float> mask(6, 1.0f);
            mask[ch] = 0.0f;
            segnet::ForwardOptions opts;
            opts.channel_mask = mask;
            net.forward(img, opts);
            const Tensor& post = net.last_post_norm();
            for (std::size_t s = 0; s < post.n; ++s) {
                const float* p = post.channel(s, ch);
                for (std::size_t i = 1; i < post.spatial(); ++i) REQUIRE(p[i] == p[0]);
            }
        }
    }
}

TEST_CASE("masking a channel equals excising its conv1 filter") {
    segnet::SegNet net(small_config(5), 12);
    std::mt19937_64 rng(6);
    const Tensor img = random_images(2, 16, 16, rng);
    net.forward(img);
    net.set_phase(segnet::Phase::eval);
    const auto state = net.state_dict();
    for (std::size_t ch = 0; ch < 5; ++ch) {
        std::vector<float> mask(5, 1.0f);
        mask[ch] = 0.0f;
        segnet::ForwardOptions opts;
        opts.channel_mask = mask;
        const Tensor masked = net.forward(img, opts);

        segnet::SegNet excised(small_config(5), 0);
        excised.load_state_dict(state);
        excised.set_phase(segnet::Phase::eval);
        auto& w = excised.conv1().weight.value;
        std::fill(w.begin() + ch * 9, w.begin() + (ch + 1) * 9, 0.0f);
        CHECK(excised.forward(img) == masked);
    }
}

TEST_CASE("fine-tuning leaves normalization statistics and frozen parameters untouched") {
    segnet::SegNet net(small_config(4), 13);
    std::mt19937_64 rng(7);
    net.forward(random_images(4, 16, 16, rng));
    net.attach_wca({1.2, 0.9, 1.0, 1.1}, 0.25);
    const auto before = net.state_dict();
    net.set_phase(segnet::Phase::finetune);

    std::vector<nn::Parameter*> train = net.trainable_parameters();
    optim::Adam adam({{"all", train, 1e-2}});
    std::mt19937_64 drop(8);
    for (int step = 0; step < 5; ++step) {
        segnet::ForwardOptions opts;
        opts.rng = &drop;
        const Tensor logits = net.forward(random_images(4, 16, 16, rng), opts);
        net.zero_grad();
        net.backward(random_tensor(logits.n, logits.c, logits.h, logits.w, rng));
        adam.step();
    }
    const auto after = net.state_dict();
    CHECK(after["buffers"] == before["buffers"]);
    for (const auto& [name, value] : before["params"].items()) {
        const bool trainable = name == "conv1.weight" || name == "block2.conv.weight" || name.rfind("wca.", 0) == 0;
        if (trainable) {
            CHECK_MESSAGE(after["params"][name] != value, name);
        } else {
            CHECK_MESSAGE(after["params"][name] == value, name);
        }
    }
}

TEST_CASE("the eval phase bypasses WCA") {
    segnet::SegNet plain(small_config(4), 14);
    std::mt19937_64 rng(9);
    const Tensor img = random_images(2, 16, 16, rng);
    plain.forward(img);
    plain.set_phase(segnet::Phase::eval);
    segnet::SegNet with(small_config(4), 0);
    with.load_state_dict(plain.state_dict());
    with.attach_wca({2.0, 0.5, 1.0, 1.5}, 0.9);
    with.set_phase(segnet::Phase::eval);
    CHECK(with.forward(img) == plain.forward(img));
}

TEST_CASE("state dict round trip reproduces the network exactly") {
    segnet::SegNet net(small_config(4), 15);
    std::mt19937_64 rng(10);
    const Tensor img = random_images(2, 16, 16, rng);
    net.forward(img);
    net.attach_wca({1.0, 1.1, 0.9, 1.0}, 0.3);
    net.set_phase(segnet::Phase::eval);
    const auto j = nlohmann::json::parse(net.state_dict().dump());
    segnet::SegNet copy(small_config(4), 99);
    copy.load_state_dict(j);
    copy.set_phase(segnet::Phase::eval);
    CHECK(copy.state_dict() == net.state_dict());
    CHECK(copy.forward(img) == net.forward(img));
    CHECK(copy.has_wca());
    CHECK(copy.wca_params().gamma == doctest::Approx(0.3));

    auto broken = j;
    broken["params"]["conv1.weight"] = std::vector<float>(3, 0.0f);
    CHECK_THROWS(copy.load_state_dict(broken));
}

TEST_CASE("gamma gradient through the network agrees with finite differences") {
    segnet::SegNet net(small_config(4), 16);
    std::mt19937_64 rng(11);
    const Tensor img = random_images(2, 16, 16, rng);
    net.forward(img);
    net.attach_wca({1.2, 0.8, 1.0, 1.1}, 0.25);
    net.set_phase(segnet::Phase::finetune);
    const Tensor r = random_tensor(2, 1, 16, 16, rng);

    auto loss = [&](double gamma) {
        net.wca_gamma()->value[0] = static_cast<float>(gamma);
        std::mt19937_64 drop(21);
        segnet::ForwardOptions opts;
        opts.rng = &drop;
        const Tensor y = net.forward(img, opts);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += double(y.data[i]) * r.data[i];
        return s;
    };
    loss(0.25);
    net.zero_grad();
    net.backward(r);
    const double analytic = net.wca_gamma()->grad[0];
    // Small enough to stay clear of ReLU / max-pool switching, large enough
    // for single-precision rounding.
    const double h = 1e-3;
    const double fd = (loss(0.25 + h) - loss(0.25 - h)) / (2 * h);
    CHECK(analytic == doctest::Approx(fd).epsilon(1e-2));
}
