#pragma once

// Graph-based over-segmentation and superpixel pseudo-label sampling.

#include "crtseg/data.hpp"

#include <cstddef>
#include <cstdint>
#include <vector>

namespace crtseg {

struct SuperpixelMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::int32_t> labels;  // in [0, segments)
    std::size_t segments = 0;
    std::vector<std::size_t> sizes;    // pixel count per segment

    std::int32_t at(std::size_t r, std::size_t c) const { return labels[r * width + c]; }
    bool operator==(const SuperpixelMap&) const = default;
};

struct SuperpixelConfig {
    double k = 0.035;
    std::size_t min_size = 100;
    double sigma = 0.8;
    std::size_t min_area = 100;
    double max_area_fraction = 0.5;

    void validate() const;
};

Image2D gaussian_smooth(const Image2D& image, double sigma);

// Felzenszwalb-Huttenlocher merging on the 8-connected grid graph with
// |intensity difference| weights after Gaussian smoothing. Edges are visited
// in (weight, lower pixel index, higher pixel index) order. Afterwards every
// segment is split into its 4-connected pieces, pieces smaller than min_size
// are merged across 4-adjacent edges in the same order, and ids are assigned
// by first appearance in row-major scan.
SuperpixelMap felzenszwalb_segment(const Image2D& image, double k, std::size_t min_size,
                                   double sigma);

inline SuperpixelMap felzenszwalb_segment(const Image2D& image, const SuperpixelConfig& cfg) {
    return felzenszwalb_segment(image, cfg.k, cfg.min_size, cfg.sigma);
}

// Segment ids with min_area <= size <= max_area_fraction * H * W, ascending.
std::vector<std::int32_t> eligible_segments(const SuperpixelMap& spx, std::size_t min_area,
                                            double max_area_fraction);

// Binary mask of one eligible segment chosen uniformly from the seed.
// Throws NoEligibleSegment when none qualifies.
MaskMap sample_pseudolabel(const SuperpixelMap& spx, std::uint64_t seed, std::size_t min_area,
                           double max_area_fraction);

}  // namespace crtseg
