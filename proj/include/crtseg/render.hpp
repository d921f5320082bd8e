#pragma once

// Static image export: PNG encoding, mask overlays and debug rasters.

#include "crtseg/data.hpp"
#include "crtseg/prototype.hpp"
#include "crtseg/superpixel.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace crtseg {

struct RgbImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> data;  // interleaved RGB, row-major

    bool operator==(const RgbImage&) const = default;
};

using Rgb = std::array<std::uint8_t, 3>;

inline constexpr Rgb kOverlayColor{230, 57, 70};

// Grayscale image with the foreground of a binary mask blended in `color`.
RgbImage overlay(const Image2D& image, const MaskMap& mask, Rgb color = kOverlayColor, double opacity = 0.45);

// One pseudo-random color per segment id, stable across runs.
RgbImage colorize_segments(const SuperpixelMap& spx);

// 8-bit RGB PNG, zlib level 9, no filtering.
std::vector<std::uint8_t> encode_png(const RgbImage& image);
void write_png(const std::filesystem::path& path, const RgbImage& image);

// Writes <dir>/superpixels.i32 (+ sidecar) and <dir>/superpixels.png.
void export_superpixels(const std::filesystem::path& dir, const SuperpixelMap& spx);

// One f32 raster per prototype: <dir>/score_<index>_class<c>.f32.
void export_score_maps(const std::filesystem::path& dir, const ScoreMaps& scores);

}  // namespace crtseg
