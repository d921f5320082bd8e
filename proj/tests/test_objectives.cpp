#include "crtseg/errors.hpp"
#include "crtseg/gradcheck.hpp"
#include "crtseg/objectives.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace crtseg;

namespace {

// Column-stochastic (J+1) x n matrix with entries well away from the clamp.
Matrix random_probs(Rng& rng, std::size_t classes, std::size_t n) {
    Matrix p(classes, n);
    for (std::size_t i = 0; i < n; ++i) {
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) z += (p(c, i) = rng.uniform(0.05, 1.0));
        for (std::size_t c = 0; c < classes; ++c) p(c, i) /= z;
    }
    return p;
}

MaskMap random_labels(Rng& rng, std::size_t h, std::size_t w, std::size_t classes) {
    MaskMap m(h, w);
    for (auto& v : m.data) v = static_cast<std::int32_t>(rng.below(classes));
    return m;
}

}  // namespace

TEST_CASE("segmentation loss values") {
    MaskMap target(3, 3, 0);
    target.at(1, 1) = 1;
    target.at(0, 2) = 1;
    Matrix onehot(2, 9, 0.0);
    for (std::size_t i = 0; i < 9; ++i) onehot(static_cast<std::size_t>(target.data[i]), i) = 1.0;
    CHECK(seg_loss(onehot, target) <= 1e-8);
    CHECK(seg_loss(onehot, target) >= 0.0);
    CHECK(seg_loss(Matrix(2, 9, 0.5), target) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // A confidently wrong pixel is capped at -log(1e-8).
    MaskMap one(1, 1, 1);
    Matrix wrong(2, 1);
    wrong(0, 0) = 1.0;
    CHECK(seg_loss(wrong, one) == doctest::Approx(-std::log(1e-8)).epsilon(1e-12));
    CHECK(seg_loss_grad(wrong, one).data == std::vector<double>{0.0, 0.0});

    Rng rng(1);
    for (int t = 0; t < 10; ++t) {
        const std::size_t classes = 2 + rng.below(2);
        const Matrix p = random_probs(rng, classes, 9);
        const MaskMap y = random_labels(rng, 3, 3, classes);
        CHECK(seg_loss(p, y) == doctest::Approx(oracle::cross_entropy(p, y)).epsilon(1e-9));
        CHECK(seg_loss(p, y) > 0.0);
    }
    CHECK_THROWS_AS(seg_loss(Matrix(2, 8, 0.5), target), ValidationError);
    MaskMap bad = target;
    bad.at(0, 0) = 2;
    CHECK_THROWS_AS(seg_loss(Matrix(2, 9, 0.5), bad), ValidationError);
}

TEST_CASE("segmentation loss gradient agrees with central differences") {
    Rng rng(2);
    for (int t = 0; t < 5; ++t) {
        Matrix p = random_probs(rng, 2, 16);
        const MaskMap y = random_labels(rng, 4, 4, 2);
        const Matrix g = seg_loss_grad(p, y);
        double worst = 0.0;
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const double v = p.data[i], h = 1e-6;
            p.data[i] = v + h;
            const double lp = seg_loss(p, y);
            p.data[i] = v - h;
            const double lm = seg_loss(p, y);
            p.data[i] = v;
            const double num = (lp - lm) / (2 * h);
            worst = std::max(worst, std::abs(num - g.data[i]) / std::max({std::abs(num), std::abs(g.data[i]), 1e-6}));
        }
        CHECK(worst < 1e-5);
    }
    for (std::uint64_t seed = 1; seed <= 3; ++seed) CHECK(finite_difference_check("losses", seed).max_rel_error < 1e-4);
}

TEST_CASE("alignment loss") {
    Rng rng(3);
    const MaskMap y = random_labels(rng, 4, 4, 2);
    CHECK(alignment_loss(std::nullopt, y) == 0.0);
    for (int t = 0; t < 5; ++t) {
        const Matrix p = random_probs(rng, 2, 16);
        CHECK(alignment_loss(p, y) == seg_loss(p, y));
    }
    Matrix perfect(2, 16, 0.0);
    for (std::size_t i = 0; i < 16; ++i) perfect(static_cast<std::size_t>(y.data[i]), i) = 1.0;
    CHECK(alignment_loss(perfect, y) <= 1e-8);
}

TEST_CASE("total loss") {
    const LossReport r = total_loss(0.7, 0.3, 1.0);
    CHECK(r.total == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(r.seg == 0.7);
    CHECK(r.reg == 0.3);
    CHECK(total_loss(0.42, 0.0).total == 0.42);
    CHECK(total_loss(0.42, 5.0, 0.0).total == 0.42);
    // Linear in reg for fixed seg.
    const double a = total_loss(0.5, 0.1, 2.0).total, b = total_loss(0.5, 0.2, 2.0).total,
                 c = total_loss(0.5, 0.3, 2.0).total;
    CHECK(b - a == doctest::Approx(c - b).epsilon(1e-12));
}

TEST_CASE("dice values and conventions") {
    MaskMap a(2, 4, 0), b(2, 4, 0);
    CHECK(dice(a, b) == 1.0);
    a.at(0, 0) = a.at(0, 1) = 1;
    CHECK(dice(a, b) == 0.0);
    CHECK(dice(a, a) == 1.0);
    b.at(1, 2) = b.at(1, 3) = 1;
    CHECK(dice(a, b) == 0.0);
    b = MaskMap(2, 4, 0);
    b.at(0, 1) = b.at(0, 2) = 1;
    CHECK(dice(a, b) == 0.5);
    MaskMap three = a;
    three.at(1, 1) = 3;
    CHECK_THROWS_AS(dice(three, b), ValidationError);
    CHECK_THROWS_AS(dice(a, MaskMap(4, 2, 0)), ValidationError);

    Rng rng(4);
    for (int t = 0; t < 20; ++t) {
        const MaskMap x = oracle::random_binary_mask(rng, 5, 6, false), z = oracle::random_binary_mask(rng, 5, 6, false);
        const double d = dice(x, z);
        CHECK(d == dice(z, x));
        CHECK(d == doctest::Approx(oracle::dice(x, z)).epsilon(1e-15));
        CHECK((d >= 0.0 && d <= 1.0));
    }
}
