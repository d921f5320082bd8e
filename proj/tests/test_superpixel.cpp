#include "crtseg/data.hpp"
#include "crtseg/errors.hpp"
#include "crtseg/superpixel.hpp"

#include <doctest.h>

#include <algorithm>
#include <map>
#include <queue>

using namespace crtseg;

namespace {

// Number of 4-connected components of the pixels where keep(i) holds.
template <class Keep>
std::size_t components(std::size_t h, std::size_t w, Keep keep) {
    std::vector<char> seen(h * w, 0);
    std::size_t n = 0;
    for (std::size_t s = 0; s < h * w; ++s) {
        if (seen[s] || !keep(s)) continue;
        ++n;
        std::queue<std::size_t> q;
        q.push(s);
        seen[s] = 1;
        while (!q.empty()) {
            const std::size_t i = q.front();
            q.pop();
            const std::size_t r = i / w, c = i % w;
            const std::size_t nb[4] = {r > 0 ? i - w : i, r + 1 < h ? i + w : i, c > 0 ? i - 1 : i, c + 1 < w ? i + 1 : i};
            for (std::size_t j : nb)
                if (!seen[j] && keep(j)) {
                    seen[j] = 1;
                    q.push(j);
                }
        }
    }
    return n;
}

void check_valid(const SuperpixelMap& spx, std::size_t min_size) {
    REQUIRE(spx.labels.size() == spx.height * spx.width);
    REQUIRE(spx.sizes.size() == spx.segments);
    std::vector<std::size_t> counted(spx.segments, 0);
    for (auto l : spx.labels) {
        REQUIRE(l >= 0);
        REQUIRE(static_cast<std::size_t>(l) < spx.segments);
        ++counted[static_cast<std::size_t>(l)];
    }
    CHECK(counted == spx.sizes);
    for (std::size_t s = 0; s < spx.segments; ++s) {
        CHECK(spx.sizes[s] >= std::min(min_size, spx.height * spx.width));
        CHECK(components(spx.height, spx.width, [&](std::size_t i) { return spx.labels[i] == static_cast<std::int32_t>(s); }) == 1);
    }
}

std::vector<Image2D> corpus(std::size_t n, std::size_t side = 256) {
    SyntheticSpec spec;
    spec.count = n;
    spec.height = spec.width = side;
    if (side < 256) {
        spec.radius_min = 8;
        spec.radius_max = 16;
    }
    std::vector<Image2D> out;
    for (const Slice& s : make_synthetic_dataset(spec, 2024).slices) out.push_back(s.image);
    return out;
}

}  // namespace

TEST_CASE("constant image is a single segment") {
    for (double k : {0.001, 0.035, 10.0}) {
        const SuperpixelMap spx = felzenszwalb_segment(Image2D(20, 30, 0.4), k, 10, 0.8);
        CHECK(spx.segments == 1);
        check_valid(spx, 10);
    }
}

TEST_CASE("two constant halves split exactly at the boundary") {
    Image2D img(32, 32, 0.0);
    for (std::size_t r = 0; r < 32; ++r)
        for (std::size_t c = 16; c < 32; ++c) img.at(r, c) = 1.0;
    for (double sigma : {0.0, 0.8}) {
        const SuperpixelMap spx = felzenszwalb_segment(img, 0.01 * 32 * 32 / 1024.0, 100, sigma);
        REQUIRE(spx.segments == 2);
        // Connected components of the thresholded intensity are the oracle.
        CHECK(components(32, 32, [&](std::size_t i) { return img.data[i] > 0.5; }) == 1);
        CHECK(components(32, 32, [&](std::size_t i) { return img.data[i] <= 0.5; }) == 1);
        bool split_at_boundary = true;
        for (std::size_t i = 0; i < img.size(); ++i)
            split_at_boundary = split_at_boundary && (spx.labels[i] == spx.labels[0]) == (img.data[i] == img.data[0]);
        CHECK(split_at_boundary);
    }
}

TEST_CASE("segmentations of synthetic slices satisfy the map invariants") {
    for (const Image2D& img : corpus(4, 128)) check_valid(felzenszwalb_segment(img, SuperpixelConfig{}), 100);
}

TEST_CASE("min_size larger than the image is rejected") {
    CHECK_THROWS_AS(felzenszwalb_segment(Image2D(5, 5, 0.0), 1.0, 26, 0.0), ValidationError);
}

TEST_CASE("segmentation is deterministic") {
    const auto imgs = corpus(2, 128);
    CHECK(felzenszwalb_segment(imgs[0], SuperpixelConfig{}) == felzenszwalb_segment(imgs[0], SuperpixelConfig{}));
}

// Over the working range around the default k. Below it min-size absorption
// dominates the count, above it only a handful of segments remain; in both
// regimes the greedy merge is not monotone.
TEST_CASE("increasing k never increases the segment count") {
    const auto imgs = corpus(10);
    for (const Image2D& img : imgs) {
        std::size_t prev = SIZE_MAX;
        for (double k : {0.035, 0.05, 0.1, 0.2}) {
            const std::size_t n = felzenszwalb_segment(img, k, 100, 0.8).segments;
            CHECK(n <= prev);
            prev = n;
        }
    }
}

TEST_CASE("default parameters give a median of 80-150 segments on 256x256 synthetic slices") {
    std::vector<std::size_t> counts;
    for (const Image2D& img : corpus(11)) counts.push_back(felzenszwalb_segment(img, SuperpixelConfig{}).segments);
    std::nth_element(counts.begin(), counts.begin() + 5, counts.end());
    CHECK(counts[5] >= 80);
    CHECK(counts[5] <= 150);
}

TEST_CASE("pseudo-label of a map with one eligible segment is that segment") {
    SuperpixelMap spx;
    spx.height = 10;
    spx.width = 10;
    spx.labels.assign(100, 0);
    for (std::size_t i = 0; i < 30; ++i) spx.labels[i] = 1;
    for (std::size_t i = 95; i < 100; ++i) spx.labels[i] = 2;
    spx.segments = 3;
    spx.sizes = {65, 30, 5};
    CHECK(eligible_segments(spx, 10, 0.5) == std::vector<std::int32_t>{1});
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const MaskMap m = sample_pseudolabel(spx, seed, 10, 0.5);
        for (std::size_t i = 0; i < 100; ++i) CHECK(m.data[i] == (spx.labels[i] == 1 ? 1 : 0));
    }
}

TEST_CASE("no eligible segment raises NoEligibleSegment") {
    const SuperpixelMap spx = felzenszwalb_segment(Image2D(16, 16, 0.2), 1.0, 1, 0.0);
    REQUIRE(spx.segments == 1);
    CHECK_THROWS_AS(sample_pseudolabel(spx, 1, 10, 0.5), NoEligibleSegment);
    CHECK_THROWS_AS(sample_pseudolabel(spx, 1, 300, 1.0), NoEligibleSegment);
}

TEST_CASE("pseudo-labels are seed-deterministic, exactly one segment, and uniform over eligible segments") {
    const Image2D img = corpus(1, 128)[0];
    const SuperpixelConfig cfg;
    const SuperpixelMap spx = felzenszwalb_segment(img, cfg);
    const auto eligible = eligible_segments(spx, cfg.min_area, cfg.max_area_fraction);
    REQUIRE(eligible.size() >= 3);
    std::map<std::int32_t, int> hits;
    const int draws = 400 * static_cast<int>(eligible.size());
    for (int s = 0; s < draws; ++s) {
        const MaskMap m = sample_pseudolabel(spx, static_cast<std::uint64_t>(s), cfg.min_area, cfg.max_area_fraction);
        if (s < 20) CHECK(m == sample_pseudolabel(spx, static_cast<std::uint64_t>(s), cfg.min_area, cfg.max_area_fraction));
        std::int32_t seg = -1;
        for (std::size_t i = 0; i < m.size(); ++i)
            if (m.data[i] == 1) {
                seg = spx.labels[i];
                break;
            }
        REQUIRE(seg >= 0);
        bool exact = true;
        for (std::size_t i = 0; i < m.size(); ++i) exact = exact && m.data[i] == (spx.labels[i] == seg ? 1 : 0);
        REQUIRE(exact);
        ++hits[seg];
    }
    CHECK(hits.size() == eligible.size());
    // Each count is Binomial(draws, 1/E); 5 standard deviations is a loose band.
    for (const auto& [seg, n] : hits) CHECK(std::abs(n - 400) < 5 * 20);
}
