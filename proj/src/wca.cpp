#include "angiodg/wca.hpp"

#include "angiodg/errors.hpp"

#include <stdexcept>

namespace angiodg::wca {

void WcaParams::validate() const {
    if (weight_diag.empty()) throw std::invalid_argument("WcaParams: no channel weights");
    if (!(phi > 0.0)) throw std::invalid_argument("WcaParams: phi must be positive");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw std::invalid_argument("WcaParams: dropout_p outside [0, 1)");
}

WcaParams make_params(std::span<const double> weights, double gamma, double phi, double dropout_p) {
    WcaParams p;
    p.weight_diag.assign(weights.begin(), weights.end());
    p.gamma = gamma;
    p.phi = phi;
    p.dropout_p = dropout_p;
    p.validate();
    for (double w : p.weight_diag) {
        if (!(w > 0.0)) throw InvalidWeightError("WcaParams: initial weights must be positive");
    }
    return p;
}

AttentionTrace attention_matrix(const Eigen::Ref<const RowMatrix>& x_flat,
                                const importance::WeightMatrix& d_w, double phi) {
    const auto c = x_flat.rows();
    if (c < 1) throw ShapeError("attention_matrix: no channels");
    if (static_cast<Eigen::Index>(d_w.channels()) != c) {
        throw ShapeError("attention_matrix: weight matrix is " + std::to_string(d_w.channels()) + "x" +
                         std::to_string(d_w.channels()) + " but features have " + std::to_string(c) +
                         " channels");
    }
    if (!x_flat.allFinite()) throw NumericError("attention_matrix: non-finite features");

    AttentionTrace t;
    t.similarity = x_flat * x_flat.transpose();
    t.weighted = t.similarity.cwiseProduct(d_w.entries());
    for (Eigen::Index i = 0; i < c; ++i) {
        const double row_max = t.weighted.row(i).maxCoeff();
        t.weighted.row(i).array() -= row_max;
    }
    t.weighted *= phi;
    t.attention = t.weighted.array().exp().matrix();
    for (Eigen::Index i = 0; i < c; ++i) t.attention.row(i) /= t.attention.row(i).sum();
    return t;
}

FeatureBlock wca_forward(const FeatureBlock& x, const WcaParams& params,
                         const importance::WeightMatrix& d_w, std::mt19937_64* rng, WcaCache* cache) {
    if (d_w.channels() != x.c) {
        throw ShapeError("wca_forward: weight matrix has " + std::to_string(d_w.channels()) +
                         " channels, features have " + std::to_string(x.c));
    }
    if (cache) *cache = WcaCache{};
    if (!params.training) return x;

    const bool use_dropout = params.dropout_p > 0.0;
    if (use_dropout && rng == nullptr) throw std::invalid_argument("wca_forward: dropout needs an RNG");
    std::bernoulli_distribution keep(1.0 - params.dropout_p);
    const double keep_scale = 1.0 / (1.0 - params.dropout_p);

    FeatureBlock out = x;
    if (cache) {
        cache->input = x;
        cache->active = true;
    }
    for (std::size_t s = 0; s < x.n; ++s) {
        const auto xf = x.flat(s);
        AttentionTrace t = attention_matrix(xf, d_w, params.phi);

        RowMatrix scale = RowMatrix::Ones(xf.rows(), xf.cols());
        if (use_dropout) {
            for (Eigen::Index i = 0; i < scale.size(); ++i) scale.data()[i] = keep(*rng) ? keep_scale : 0.0;
        }
        RowMatrix v = xf.cwiseProduct(scale);
        RowMatrix attended = t.attention * v;
        out.flat(s) += params.gamma * attended;

        if (cache) {
            cache->similarity.push_back(std::move(t.similarity));
            cache->attention.push_back(std::move(t.attention));
            cache->values.push_back(std::move(v));
            cache->dropout_scale.push_back(std::move(scale));
            cache->attended.push_back(std::move(attended));
        }
    }
    return out;
}

WcaGradients wca_backward(const WcaCache& cache, const FeatureBlock& grad_output,
                          const WcaParams& params, const importance::WeightMatrix& d_w) {
    WcaGradients g;
    g.input = grad_output;
    g.weight_diag.assign(d_w.channels(), 0.0);
    if (!cache.active) return g;

    const FeatureBlock& x = cache.input;
    const RowMatrix& dw = d_w.entries();
    for (std::size_t s = 0; s < x.n; ++s) {
        const auto gout = grad_output.flat(s);
        const auto xf = x.flat(s);
        const RowMatrix& a = cache.attention[s];

        g.gamma += gout.cwiseProduct(cache.attended[s]).sum();

        const RowMatrix d_attended = params.gamma * gout;
        const RowMatrix d_attn = d_attended * cache.values[s].transpose();
        const RowMatrix d_v = a.transpose() * d_attended;

        // Row softmax backward; the row-max shift carries no gradient.
        RowMatrix d_logits = a.cwiseProduct(d_attn);
        const Eigen::VectorXd row_dot = d_logits.rowwise().sum();
        d_logits -= a.cwiseProduct(row_dot.replicate(1, a.cols()));
        const RowMatrix d_weighted = params.phi * d_logits;

        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            g.weight_diag[static_cast<std::size_t>(i)] += d_weighted(i, i) * cache.similarity[s](i, i);
        }
        const RowMatrix d_sim = d_weighted.cwiseProduct(dw);

        auto gin = g.input.flat(s);
        gin += (d_sim + d_sim.transpose()) * xf;
        gin += d_v.cwiseProduct(cache.dropout_scale[s]);
    }
    return g;
}

std::vector<ParameterView> trainable_parameters(WcaParams& params) {
    return {{"gamma", std::span<double>(&params.gamma, 1)},
            {"weight_diag", std::span<double>(params.weight_diag)}};
}

}  // namespace angiodg::wca
