#include "crtseg/episode.hpp"
#include "crtseg/errors.hpp"
#include "crtseg/rng.hpp"

#include <doctest.h>

#include <filesystem>

using namespace crtseg;

namespace {

Image2D slice(std::size_t side = 128, std::uint64_t seed = 5) {
    SyntheticSpec spec;
    spec.count = 1;
    spec.height = spec.width = side;
    spec.radius_min = 8;
    spec.radius_max = 16;
    return make_synthetic_dataset(spec, seed).slices[0].image;
}

std::filesystem::path scratch_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("crtseg_test_" + name);
    std::filesystem::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("identity ranges give a query equal to the support") {
    const Image2D img = slice();
    const SuperpixelConfig spx;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const Episode ep = build_episode(img, spx, TransformRanges::identity(), seed);
        CHECK(ep.params.is_identity());
        CHECK(ep.query_image == ep.support_image);
        CHECK(ep.query_mask == ep.support_mask);
        CHECK(ep.support_image == img);
    }
}

TEST_CASE("episode masks and query satisfy the transform invariants") {
    const Image2D img = slice();
    const SuperpixelConfig spx;
    const SuperpixelMap map = felzenszwalb_segment(img, spx);
    const TransformRanges ranges;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Episode ep = build_episode(img, map, spx, ranges, seed);
        CHECK(ep.support_mask.is_binary());
        CHECK(ep.query_mask.is_binary());
        CHECK(ep.query_mask == apply_affine(ep.support_mask, ep.params, Interp::nearest));
        CHECK(ep.query_image == apply_gamma(apply_affine(img, ep.params, Interp::bilinear), ep.params.gamma));
        const std::size_t fg = ep.support_mask.count(1);
        CHECK(fg >= spx.min_area);
        CHECK(static_cast<double>(fg) <= spx.max_area_fraction * static_cast<double>(img.size()));
        CHECK(build_episode(img, map, spx, ranges, seed).query_image == ep.query_image);
    }
}

TEST_CASE("construction depends only on the slice, configs and seed") {
    const Image2D img = slice();
    const SuperpixelConfig spx;
    const Episode a = build_episode(img, spx, TransformRanges{}, 77);
    const Episode b = build_episode(img, felzenszwalb_segment(img, spx), spx, TransformRanges{}, 77);
    CHECK(a.support_mask == b.support_mask);
    CHECK(a.params == b.params);
    CHECK(a.query_image == b.query_image);
}

TEST_CASE("distinct episode seeds give distinct episodes") {
    const Image2D img = slice();
    const SuperpixelConfig spx;
    const SuperpixelMap map = felzenszwalb_segment(img, spx);
    const Episode base = build_episode(img, map, spx, TransformRanges{}, 1000);
    int distinct = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const Episode ep = build_episode(img, map, spx, TransformRanges{}, seed);
        if (ep.support_mask != base.support_mask || ep.params.affine != base.params.affine ||
            ep.params.gamma != base.params.gamma)
            ++distinct;
    }
    CHECK(distinct >= 99);
}

TEST_CASE("no eligible superpixel propagates") {
    CHECK_THROWS_AS(build_episode(Image2D(32, 32, 0.5), SuperpixelConfig{}, TransformRanges{}, 1),
                    NoEligibleSegment);
}

TEST_CASE("evaluation episodes binarize on the requested class without transforms") {
    MaskMap sm(4, 4, 0), qm(4, 4, 0);
    sm.at(0, 0) = 1;
    sm.at(1, 1) = 2;
    sm.at(2, 2) = 2;
    qm.at(3, 3) = 2;
    qm.at(0, 1) = 1;
    Image2D si(4, 4, 0.1), qi(4, 4, 0.7);
    const Episode ep = build_eval_episode(si, sm, qi, qm, 2);
    CHECK(ep.class_id == 2);
    CHECK(ep.params.is_identity());
    CHECK(ep.support_image == si);
    CHECK(ep.query_image == qi);
    CHECK(ep.support_mask == binarize(sm, 2));
    CHECK(ep.support_mask.count(1) == 2);
    CHECK(ep.query_mask.count(1) == 1);
    CHECK(ep.query_mask.at(3, 3) == 1);

    const Episode self = build_eval_episode(si, sm, si, sm, 1);
    CHECK(self.query_mask == self.support_mask);
}

TEST_CASE("a class absent from the query is allowed, absent from the support is not") {
    MaskMap sm(4, 4, 0), qm(4, 4, 0);
    sm.at(0, 0) = 3;
    const Image2D img(4, 4, 0.2);
    const Episode ep = build_eval_episode(img, sm, img, qm, 3);
    CHECK(ep.query_mask.count(1) == 0);
    CHECK_THROWS_AS(build_eval_episode(img, qm, img, sm, 3), ValidationError);
    CHECK_THROWS_AS(build_eval_episode(img, sm, Image2D(5, 4), MaskMap(5, 4), 3), ValidationError);
}

TEST_CASE("episode archive round-trips exactly") {
    const Image2D img = slice(64, 9);
    SuperpixelConfig spx;
    spx.min_area = 20;
    spx.min_size = 20;
    std::vector<Episode> eps;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Episode ep = build_episode(img, spx, TransformRanges{}, seed);
        ep.support_id = "slice_" + std::to_string(seed);
        ep.query_id = ep.support_id;
        eps.push_back(std::move(ep));
    }
    const auto dir = scratch_dir("episodes");
    export_episodes(dir, eps);
    const auto back = import_episodes(dir);
    REQUIRE(back.size() == eps.size());
    for (std::size_t i = 0; i < eps.size(); ++i) {
        // Images are stored as f32.
        REQUIRE(back[i].support_image.size() == eps[i].support_image.size());
        double worst = 0.0;
        for (std::size_t p = 0; p < eps[i].support_image.size(); ++p) {
            worst = std::max(worst, std::abs(back[i].support_image.data[p] - eps[i].support_image.data[p]));
            worst = std::max(worst, std::abs(back[i].query_image.data[p] - eps[i].query_image.data[p]));
        }
        CHECK(worst < 1e-6);
        CHECK(back[i].support_mask == eps[i].support_mask);
        CHECK(back[i].query_mask == eps[i].query_mask);
        CHECK(back[i].params == eps[i].params);
        CHECK(back[i].episode_seed == eps[i].episode_seed);
        CHECK(back[i].support_id == eps[i].support_id);
    }
    CHECK_THROWS_AS(import_episodes(dir / "missing"), LoadError);
    std::filesystem::remove_all(dir);
}
