#include "crtseg/gradcheck.hpp"

#include "crtseg/cross_reference.hpp"
#include "crtseg/encoder.hpp"
#include "crtseg/errors.hpp"
#include "crtseg/objectives.hpp"
#include "crtseg/prototype.hpp"
#include "crtseg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>

namespace crtseg {

namespace {

constexpr double kKinkMargin = 0.05;
constexpr double kBlockInputScale = 0.5;
// The head is invariant to feature magnitude, so the finite-difference step
// acts on the direction at relative size epsilon / |f|.
constexpr double kHeadFeatureScale = 64.0;

struct Coordinate {
    double* value;
    double analytic;
};

double compare(const std::vector<Coordinate>& coords, const std::function<double()>& loss, double eps) {
    double worst = 0.0;
    for (const Coordinate& c : coords) {
        const double saved = *c.value;
        *c.value = saved + eps;
        const double up = loss();
        *c.value = saved - eps;
        const double down = loss();
        *c.value = saved;
        const double numeric = (up - down) / (2.0 * eps);
        const double denom = std::max({std::abs(c.analytic), std::abs(numeric), kGradcheckFloor});
        worst = std::max(worst, std::abs(c.analytic - numeric) / denom);
    }
    return worst;
}

void fill(std::vector<double>& v, Rng& rng, double scale, double offset = 0.0) {
    for (double& x : v) x = offset + scale * rng.normal();
}

double weighted_sum(const FeatureMap& f, const std::vector<double>& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < f.data.size(); ++i) s += f.data[i] * w[i];
    return s;
}

void add_params(std::vector<Coordinate>& out, const ParameterList& params) {
    for (Parameter* p : params)
        for (std::size_t i = 0; i < p->size(); ++i) out.push_back({&p->value[i], p->grad[i]});
}

void add_tensor(std::vector<Coordinate>& out, std::vector<double>& values, const std::vector<double>& grads) {
    for (std::size_t i = 0; i < values.size(); ++i) out.push_back({&values[i], grads[i]});
}

MaskMap random_mask(Rng& rng, std::size_t h, std::size_t w) {
    MaskMap m(h, w);
    do {
        for (auto& v : m.data) v = static_cast<std::int32_t>(rng.below(2));
    } while (m.count(0) == 0 || m.count(1) == 0);
    return m;
}

// Smallest |pre-activation| of the gate ReLUs; central differences straddling
// a kink are not a gradient measurement.
double relu_margin(const CrossReferenceBlock::Trace& t) {
    double m = std::numeric_limits<double>::infinity();
    for (const FcGate::Cache* c : {&t.gate_support_cache, &t.gate_query_cache})
        for (double v : c->hidden_pre.data) m = std::min(m, std::abs(v));
    return m;
}

GradcheckResult check_block(std::uint64_t seed, double eps) {
    Rng rng(seed);
    const std::size_t D = 4, H = 2, W = 2;
    AttentionConfig ac;
    ac.dim = 8;
    ac.heads = 1 + seed % 2;
    FeatureMap fs(D, H, W, 1), fq(D, H, W, 1);
    MaskMap mask(H, W);
    std::optional<CrossReferenceBlock> block;
    for (;;) {
        ac.seed = rng.next();
        block.emplace(D, ac, BlockOptions{});
        fill(fs.data, rng, kBlockInputScale);
        fill(fq.data, rng, kBlockInputScale);
        mask = random_mask(rng, H, W);
        CrossReferenceBlock::Trace probe;
        block->forward(fs, fq, mask, &probe);
        if (relu_margin(probe) > kKinkMargin) break;
    }
    std::vector<double> ws(fs.data.size()), wq(fq.data.size());
    fill(ws, rng, 1.0);
    fill(wq, rng, 1.0);

    auto loss = [&] {
        const auto o = block->forward(fs, fq, mask);
        return weighted_sum(o.support, ws) + weighted_sum(o.query, wq);
    };
    const ParameterList params = block->active_parameters();
    zero_grads(params);
    CrossReferenceBlock::Trace t;
    const auto o = block->forward(fs, fq, mask, &t);
    FeatureMap gs = o.support, gq = o.query;
    gs.data = ws;
    gq.data = wq;
    const auto [ds, dq] = block->backward(t, gs, gq);

    std::vector<Coordinate> coords;
    add_params(coords, params);
    add_tensor(coords, fs.data, ds.data);
    add_tensor(coords, fq.data, dq.data);
    return {"cross_reference_block", seed, compare(coords, loss, eps), coords.size()};
}

GradcheckResult check_head(std::uint64_t seed, double eps) {
    Rng rng(seed);
    const std::size_t D = 4, H = 4, W = 4, stride = 2;
    ALPConfig cfg;
    cfg.window_h = cfg.window_w = 2;
    cfg.fg_threshold = 0.75;
    FeatureMap fs(D, H, W, stride), fq(D, H, W, stride);
    fill(fs.data, rng, kHeadFeatureScale);
    fill(fq.data, rng, kHeadFeatureScale);
    const MaskMap mask_ds = random_mask(rng, H, W);
    MaskMap target(H * stride, W * stride);
    for (auto& v : target.data) v = static_cast<std::int32_t>(rng.below(2));

    auto loss = [&] {
        return seg_loss(classify(fs, mask_ds, fq, cfg, H * stride, W * stride).probs_full, target);
    };
    HeadTrace t;
    const Prediction p = classify(fs, mask_ds, fq, cfg, H * stride, W * stride, &t);
    const HeadGrads g = classify_backward(t, fs, fq, seg_loss_grad(p.probs_full, target), cfg.alpha);

    std::vector<Coordinate> coords;
    add_tensor(coords, fs.data, g.support.data);
    add_tensor(coords, fq.data, g.query.data);
    return {"classifier_head", seed, compare(coords, loss, eps), coords.size()};
}

GradcheckResult check_losses(std::uint64_t seed, double eps) {
    Rng rng(seed);
    const std::size_t side = seed % 2 ? 3 : 4, C = 2, N = side * side;
    auto random_probs = [&] {
        Matrix p(C, N);
        for (std::size_t n = 0; n < N; ++n) {
            const double a = 0.25 + 0.5 * rng.uniform();
            p(0, n) = a;
            p(1, n) = 1.0 - a;
        }
        return p;
    };
    Matrix query_probs = random_probs(), support_probs = random_probs();
    MaskMap qt(side, side), st(side, side);
    for (auto& v : qt.data) v = static_cast<std::int32_t>(rng.below(2));
    for (auto& v : st.data) v = static_cast<std::int32_t>(rng.below(2));
    const double lambda = 0.5 + rng.uniform();

    auto loss = [&] {
        return total_loss(seg_loss(query_probs, qt), alignment_loss(support_probs, st), lambda).total;
    };
    const Matrix gq = seg_loss_grad(query_probs, qt);
    Matrix gs = seg_loss_grad(support_probs, st);
    for (double& v : gs.data) v *= lambda;

    std::vector<Coordinate> coords;
    add_tensor(coords, query_probs.data, gq.data);
    add_tensor(coords, support_probs.data, gs.data);
    return {"losses", seed, compare(coords, loss, eps), coords.size()};
}

GradcheckResult check_encoder(std::uint64_t seed, double eps) {
    Rng rng(seed);
    EncoderConfig ec;
    ec.channels = 8;
    ec.stride = 4;
    ec.seed = derive_seed(seed, 1);
    Encoder enc(ec);
    Image2D img(8, 8);
    for (double& v : img.data) v = rng.uniform();
    const FeatureMap probe = enc.forward(img, Mode::train);
    std::vector<double> w(probe.data.size());
    fill(w, rng, 1.0);

    auto loss = [&] { return weighted_sum(enc.forward(img, Mode::train), w); };
    const ParameterList params = enc.parameters();
    zero_grads(params);
    Encoder::Trace t;
    FeatureMap g = enc.forward(img, Mode::train, &t);
    g.data = w;
    enc.backward(t, g);
    std::vector<Coordinate> coords;
    add_params(coords, params);
    return {"encoder", seed, compare(coords, loss, eps), coords.size()};
}

// Dyadic inputs, integer weights and a power-of-two step keep every
// operation exact, so the pass-through gradient must match bit for bit.
GradcheckResult check_bypass(std::uint64_t seed, double eps) {
    Rng rng(seed);
    const std::size_t D = 4, H = 2, W = 2;
    BlockOptions opt;
    opt.bypass = true;
    CrossReferenceBlock block(D, AttentionConfig{}, opt);
    FeatureMap fs(D, H, W, 1), fq(D, H, W, 1);
    for (double& v : fs.data) v = static_cast<double>(rng.below(64)) / 16.0;
    for (double& v : fq.data) v = static_cast<double>(rng.below(64)) / 16.0;
    const MaskMap mask = random_mask(rng, H, W);
    std::vector<double> ws(fs.data.size()), wq(fq.data.size());
    for (double& v : ws) v = static_cast<double>(rng.below(9)) - 4.0;
    for (double& v : wq) v = static_cast<double>(rng.below(9)) - 4.0;
    const double step = std::exp2(std::floor(std::log2(eps)));

    auto loss = [&] {
        const auto o = block.forward(fs, fq, mask);
        return weighted_sum(o.support, ws) + weighted_sum(o.query, wq);
    };
    CrossReferenceBlock::Trace t;
    const auto o = block.forward(fs, fq, mask, &t);
    FeatureMap gs = o.support, gq = o.query;
    gs.data = ws;
    gq.data = wq;
    const auto [ds, dq] = block.backward(t, gs, gq);
    std::vector<Coordinate> coords;
    add_tensor(coords, fs.data, ds.data);
    add_tensor(coords, fq.data, dq.data);
    if (!block.active_parameters().empty()) throw ValidationError("bypass block exposes parameters");
    return {"bypass", seed, compare(coords, loss, step), coords.size()};
}

}  // namespace

const std::vector<std::string>& gradcheck_components() {
    static const std::vector<std::string> names{"cross_reference_block", "classifier_head", "losses", "encoder",
                                                "bypass"};
    return names;
}

GradcheckResult finite_difference_check(const std::string& component, std::uint64_t seed, double epsilon) {
    if (!(epsilon > 0.0)) throw ValidationError("finite difference step must be positive");
    if (component == "cross_reference_block") return check_block(seed, epsilon);
    if (component == "classifier_head") return check_head(seed, epsilon);
    if (component == "losses") return check_losses(seed, epsilon);
    if (component == "encoder") return check_encoder(seed, epsilon);
    if (component == "bypass") return check_bypass(seed, epsilon);
    throw ValidationError("unknown gradcheck component '" + component + "'");
}

}  // namespace crtseg
