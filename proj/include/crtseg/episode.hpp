#pragma once

// Support/query episodes: self-supervised ones manufactured from a single
// slice, and evaluation ones pairing two labeled slices. 1-way 1-shot only.

#include "crtseg/data.hpp"
#include "crtseg/superpixel.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace crtseg {

struct Episode {
    Image2D support_image;
    MaskMap support_mask;  // binary
    Image2D query_image;
    MaskMap query_mask;    // binary
    TransformParams params;
    std::uint64_t episode_seed = 0;
    std::int32_t class_id = 1;  // class in the source labels (1 for pseudo-labels)
    std::string support_id;
    std::string query_id;
};

// Child seeds drawn from an episode seed.
std::uint64_t pseudolabel_seed(std::uint64_t episode_seed);
std::uint64_t transform_seed(std::uint64_t episode_seed);

// Support = the slice with a random superpixel as foreground; query = the
// gamma-adjusted affine warp of the support, mask warped with nearest.
Episode build_episode(const Image2D& slice, const SuperpixelMap& superpixels,
                      const SuperpixelConfig& spx_config, const TransformRanges& ranges,
                      std::uint64_t episode_seed);
Episode build_episode(const Image2D& slice, const SuperpixelConfig& spx_config,
                      const TransformRanges& ranges, std::uint64_t episode_seed);

MaskMap binarize(const MaskMap& mask, std::int32_t class_id);

// No transforms; both masks binarized on class_id. The class must be present
// in the support mask, it may be absent from the query.
Episode build_eval_episode(const Image2D& support_image, const MaskMap& support_mask,
                           const Image2D& query_image, const MaskMap& query_mask,
                           std::int32_t class_id);

// Archive: one directory per episode with four rasters plus episodes.json
// holding ids, class, seed and transform parameters.
void export_episodes(const std::filesystem::path& dir, std::span<const Episode> episodes);
std::vector<Episode> import_episodes(const std::filesystem::path& dir);

}  // namespace crtseg
