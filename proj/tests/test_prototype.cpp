#include "crtseg/cross_reference.hpp"
#include "crtseg/errors.hpp"
#include "crtseg/gradcheck.hpp"
#include "crtseg/prototype.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <algorithm>

using namespace crtseg;

namespace {

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

ALPConfig window(std::size_t h, std::size_t w, double tau = 0.95) {
    ALPConfig cfg;
    cfg.window_h = h;
    cfg.window_w = w;
    cfg.fg_threshold = tau;
    return cfg;
}

// Single prototype per class; scores are alpha * cosine(proto, feature).
PrototypeSet pair(std::vector<double> bg, std::vector<double> fg) {
    PrototypeSet set;
    Prototype b, f;
    b.vector = std::move(bg);
    b.class_id = 0;
    f.vector = std::move(fg);
    f.class_id = 1;
    set.prototypes = {b, f};
    return set;
}

FeatureMap column(std::vector<double> v) {
    FeatureMap f(v.size(), 1, 1);
    f.data = std::move(v);
    return f;
}

}  // namespace

TEST_CASE("local prototypes are window means") {
    FeatureMap f(1, 4, 4);
    for (std::size_t i = 0; i < 16; ++i) f.data[i] = static_cast<double>(i + 1);
    const MaskMap full(4, 4, 1);
    std::vector<double> got;
    for (const Prototype& p : local_prototypes(f, full, window(2, 2))) got.push_back(p.vector[0]);
    CHECK(got == std::vector<double>{3.5, 5.5, 11.5, 13.5});

    FeatureMap constant(3, 6, 6, 1, 0.0);
    for (std::size_t c = 0; c < 3; ++c) std::fill(constant.channel(c).begin(), constant.channel(c).end(), 0.25 * c - 1);
    for (const Prototype& p : local_prototypes(constant, MaskMap(6, 6, 1), window(2, 3)))
        CHECK(p.vector == std::vector<double>{-1.0, -0.75, -0.5});

    Rng rng(1);
    const FeatureMap r = oracle::random_features(rng, 5, 4, 6);
    const auto whole = local_prototypes(r, MaskMap(4, 6, 1), window(4, 6));
    REQUIRE(whole.size() == 1);
    CHECK(max_abs_diff(whole[0].vector, global_pool(r)) < 1e-12);
    CHECK_THROWS_AS(local_prototypes(r, MaskMap(4, 6, 1), window(5, 2)), ValidationError);

    // The assembled set degrades to class prototypes on a grid smaller than the window.
    MaskMap half(4, 6, 0);
    for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 6; ++x) half.at(y, x) = 1;
    const PrototypeSet set = assemble_prototype_set(r, half, window(5, 2));
    CHECK(set.size() == 2);
    CHECK(set.count(0) == 1);
    CHECK(set.count(1) == 1);
}

TEST_CASE("local prototypes match the oracle including dropped remainders") {
    Rng rng(2);
    for (int t = 0; t < 20; ++t) {
        const std::size_t h = 3 + rng.below(8), w = 3 + rng.below(8);
        const FeatureMap f = oracle::random_features(rng, 4, h, w);
        MaskMap m(h, w);
        for (auto& v : m.data) v = rng.uniform() < 0.8 ? 1 : 0;
        const std::size_t wh = 1 + rng.below(3), ww = 1 + rng.below(3);
        const double tau = rng.uniform(0.3, 1.0);
        const auto got = local_prototypes(f, m, window(wh, ww, tau));
        const auto want = oracle::locals(f, m, wh, ww, tau, 1);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i) CHECK(max_abs_diff(got[i].vector, want[i]) < 1e-12);
    }
}

TEST_CASE("class prototypes are masked means") {
    Rng rng(3);
    const FeatureMap f = oracle::random_features(rng, 6, 5, 7);
    CHECK(max_abs_diff(class_prototype(f, MaskMap(5, 7, 1), 1).vector, global_pool(f)) < 1e-12);
    MaskMap one(5, 7, 0);
    one.at(2, 3) = 1;
    CHECK(max_abs_diff(class_prototype(f, one, 1).vector, feature_at(f, 2 * 7 + 3)) < 1e-15);
    for (int t = 0; t < 10; ++t) {
        const MaskMap m = oracle::random_binary_mask(rng, 5, 7);
        CHECK(max_abs_diff(class_prototype(f, m, 1).vector, oracle::masked_mean(f, m, 1)) < 1e-9);
    }
    CHECK_THROWS_AS(class_prototype(f, MaskMap(5, 7, 0), 1), EmptyClassMask);
}

TEST_CASE("prototype set gating") {
    Rng rng(4);
    const FeatureMap f = oracle::random_features(rng, 4, 8, 8);
    SUBCASE("a foreground smaller than a window gives only the class prototype") {
        MaskMap m(8, 8, 0);
        m.at(1, 1) = 1;
        m.at(1, 2) = 1;
        const PrototypeSet set = assemble_prototype_set(f, m, window(4, 4));
        CHECK(set.count(1) == 1);
        CHECK(set.prototypes.front().class_id == 0);
        CHECK(set.prototypes.front().kind == PrototypeKind::global);
        // Three of four background windows are pure background.
        CHECK(set.count(0) == 1 + 3);
    }
    SUBCASE("a window-level checkerboard gives no locals") {
        MaskMap m(8, 8, 0);
        for (std::size_t r = 0; r < 8; ++r)
            for (std::size_t c = 0; c < 8; ++c) m.at(r, c) = (r + c) % 2 == 0 ? 1 : 0;
        const PrototypeSet set = assemble_prototype_set(f, m, window(4, 4));
        CHECK(set.size() == 2);
        CHECK(set.count(0) == 1);
        CHECK(set.count(1) == 1);
    }
    SUBCASE("a full mask has no background") {
        CHECK_THROWS_AS(assemble_prototype_set(f, MaskMap(8, 8, 1), window(4, 4)), EmptyClassMask);
    }
}

TEST_CASE("scores are scaled cosines") {
    const double a = 20.0;
    SUBCASE("identical, orthogonal and opposite vectors") {
        const std::vector<double> p{1.0, -2.0, 0.5};
        PrototypeSet set = pair({-1.0, 2.0, -0.5}, p);
        ScoreMaps s = similarity_maps(set, column(p), a);
        CHECK(s.scores(1, 0) == doctest::Approx(20.0).epsilon(1e-15));
        CHECK(s.scores(0, 0) == doctest::Approx(-20.0).epsilon(1e-15));
        set = pair({2.0, 1.0, 0.0}, p);
        CHECK(similarity_maps(set, column(p), a).scores(0, 0) == doctest::Approx(0.0));
    }
    SUBCASE("zero vectors score zero") {
        const PrototypeSet set = pair({0.0, 0.0}, {1.0, 1.0});
        const ScoreMaps s = similarity_maps(set, column({0.0, 0.0}), a);
        CHECK(s.scores(0, 0) == 0.0);
        CHECK(s.scores(1, 0) == 0.0);
    }
}

TEST_CASE("prediction arithmetic") {
    SUBCASE("fused scores 0 and 20") {
        ScoreMaps s;
        s.height = s.width = 1;
        s.fused = Matrix(2, 1);
        s.fused(1, 0) = 20.0;
        const Prediction p = predict(s, 1, 1);
        CHECK(p.probs(0, 0) == doctest::Approx(2.0611536e-9).epsilon(1e-6));
        CHECK(p.probs(1, 0) == doctest::Approx(1.0));
        CHECK(p.labels.data[0] == 1);
    }
    SUBCASE("ties go to background") {
        ScoreMaps s;
        s.height = s.width = 1;
        s.fused = Matrix(2, 1, 3.0);
        const Prediction p = predict(s, 1, 1);
        CHECK(p.probs(0, 0) == 0.5);
        CHECK(p.probs(1, 0) == 0.5);
        CHECK(p.labels.data[0] == 0);
        CHECK(p.labels_full.data[0] == 0);
    }
    SUBCASE("three foreground scores of 2 fuse to 2") {
        // A unit query at cosine 0.1 to each axis prototype; alpha 20 gives 2.
        const double c = 0.1;
        PrototypeSet set;
        Prototype b;
        b.class_id = 0;
        b.vector = {0.0, 0.0, 0.0, 1.0};
        set.prototypes.push_back(b);
        for (std::size_t k = 0; k < 3; ++k) {
            Prototype f;
            f.class_id = 1;
            f.vector.assign(4, 0.0);
            f.vector[k] = 1.0;
            set.prototypes.push_back(f);
        }
        const ScoreMaps sm = similarity_maps(set, column({c, c, c, std::sqrt(1.0 - 3 * c * c)}), 20.0);
        for (std::size_t k = 1; k <= 3; ++k) CHECK(sm.scores(k, 0) == doctest::Approx(2.0).epsilon(1e-12));
        CHECK(sm.fused(1, 0) == doctest::Approx(2.0).epsilon(1e-12));
    }
}

TEST_CASE("probabilities, bounds, scale invariance and single-prototype fusion") {
    Rng rng(5);
    for (int t = 0; t < 10; ++t) {
        const FeatureMap s = oracle::random_features(rng, 6, 8, 8);
        const FeatureMap q = oracle::random_features(rng, 6, 8, 8);
        const MaskMap m = oracle::random_binary_mask(rng, 8, 8);
        const PrototypeSet set = assemble_prototype_set(s, m, window(2, 2, 0.75));
        const ScoreMaps sm = similarity_maps(set, q, 20.0);
        CHECK(std::all_of(sm.scores.data.begin(), sm.scores.data.end(),
                          [](double v) { return v >= -20.0 && v <= 20.0; }));
        const Prediction p = predict(sm, 24, 20);
        bool sums = true;
        for (std::size_t n = 0; n < 64; ++n) sums = sums && std::abs(p.probs(0, n) + p.probs(1, n) - 1.0) < 1e-6;
        for (std::size_t n = 0; n < 24 * 20; ++n)
            sums = sums && std::abs(p.probs_full(0, n) + p.probs_full(1, n) - 1.0) < 1e-6;
        CHECK(sums);

        FeatureMap scaled = q;
        const double k = rng.uniform(0.01, 100.0);
        for (double& v : scaled.data) v *= k;
        const ScoreMaps ss = similarity_maps(set, scaled, 20.0);
        CHECK(max_abs_diff(ss.scores.data, sm.scores.data) < 1e-6);
        CHECK(predict(ss, 24, 20).labels == p.labels);
    }
    const FeatureMap q = oracle::random_features(rng, 3, 4, 4);
    const ScoreMaps single = similarity_maps(pair({1.0, 0.0, -1.0}, {0.5, 0.5, 0.5}), q, 20.0);
    CHECK(single.fused.data == single.scores.data);
}

TEST_CASE("classification matches the scalar oracle") {
    Rng rng(6);
    int compared = 0;
    for (int t = 0; t < 60; ++t) {
        const std::size_t h = 2 + rng.below(7), w = 2 + rng.below(7);
        const FeatureMap s = oracle::random_features(rng, 5, h, w);
        const FeatureMap q = oracle::random_features(rng, 5, h, w);
        const MaskMap m = oracle::random_binary_mask(rng, h, w);
        const ALPConfig cfg = window(std::min<std::size_t>(3, h), std::min<std::size_t>(3, w), 0.5);
        const PrototypeSet set = assemble_prototype_set(s, m, cfg);
        if (set.size() > 6) continue;
        std::vector<std::vector<oracle::Vec>> protos(2);
        for (std::int32_t cls : {0, 1}) {
            const MaskMap cm = cls == 1 ? m : [&] {
                MaskMap c = m;
                for (auto& v : c.data) v = 1 - v;
                return c;
            }();
            protos[static_cast<std::size_t>(cls)].push_back(oracle::masked_mean(s, cm, 1));
            for (const auto& v : oracle::locals(s, cm, cfg.window_h, cfg.window_w, 0.5, 1)) protos[static_cast<std::size_t>(cls)].push_back(v);
        }
        const std::size_t oh = h * 8 - rng.below(8), ow = w * 8 - rng.below(8);
        const oracle::Head ref = oracle::head(protos, q, 20.0, oh, ow);
        const Prediction p = classify(s, m, q, cfg, oh, ow);
        CHECK(max_abs_diff(p.probs.data, ref.probs.data) < 1e-6);
        CHECK(max_abs_diff(p.probs_full.data, ref.probs_full.data) < 1e-6);
        CHECK(p.labels == ref.labels);
        CHECK(p.labels_full == ref.labels_full);
        ++compared;
    }
    CHECK(compared >= 20);
}

TEST_CASE("resampler backward is the adjoint of forward") {
    Rng rng(7);
    for (int t = 0; t < 10; ++t) {
        const std::size_t ih = 1 + rng.below(9), iw = 1 + rng.below(9), oh = 1 + rng.below(40), ow = 1 + rng.below(40);
        const Resampler r(ih, iw, oh, ow);
        const Matrix x = oracle::random_matrix(rng, 2, ih * iw);
        const Matrix g = oracle::random_matrix(rng, 2, oh * ow);
        const Matrix fx = r.forward(x), bg = r.backward(g);
        double lhs = 0.0, rhs = 0.0;
        for (std::size_t i = 0; i < fx.data.size(); ++i) lhs += fx.data[i] * g.data[i];
        for (std::size_t i = 0; i < x.data.size(); ++i) rhs += x.data[i] * bg.data[i];
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t c = 0; c < ow; ++c)
                CHECK(fx(0, y * ow + c) ==
                      doctest::Approx(oracle::bilinear(std::vector<double>(x.row(0).begin(), x.row(0).end()), ih, iw,
                                                       oh, ow, y, c))
                          .epsilon(1e-12));
    }
}

TEST_CASE("head backward agrees with central differences") {
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
        const GradcheckResult r = finite_difference_check("classifier_head", seed);
        CHECK(r.coordinates > 0);
        CHECK(r.max_rel_error < 1e-4);
    }
}
