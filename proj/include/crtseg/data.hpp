#pragma once

// Slice datasets, the geometric/intensity transforms used to manufacture
// query images, and the on-disk raster format.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace crtseg {

struct Image2D {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> data;

    Image2D() = default;
    Image2D(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), data(h * w, fill) {}

    double& at(std::size_t r, std::size_t c) { return data[r * width + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * width + c]; }
    std::size_t size() const noexcept { return data.size(); }

    bool operator==(const Image2D&) const = default;
};

struct MaskMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::int32_t> data;

    MaskMap() = default;
    MaskMap(std::size_t h, std::size_t w, std::int32_t fill = 0) : height(h), width(w), data(h * w, fill) {}

    std::int32_t& at(std::size_t r, std::size_t c) { return data[r * width + c]; }
    std::int32_t at(std::size_t r, std::size_t c) const { return data[r * width + c]; }
    std::size_t size() const noexcept { return data.size(); }

    std::set<std::int32_t> labels() const { return {data.begin(), data.end()}; }
    std::size_t count(std::int32_t label) const;
    bool is_binary() const;

    bool operator==(const MaskMap&) const = default;
};

// Forward map in pixel coordinates (x = column, y = row):
//   x' = a0 x + a1 y + a2,   y' = a3 x + a4 y + a5
struct TransformParams {
    std::array<double, 6> affine{1.0, 0.0, 0.0, 0.0, 1.0, 0.0};
    double gamma = 1.0;
    std::uint64_t seed = 0;

    double determinant() const noexcept { return affine[0] * affine[4] - affine[1] * affine[3]; }
    bool is_identity() const noexcept;

    bool operator==(const TransformParams&) const = default;
};

struct TransformRanges {
    double rotation_deg = 15.0;
    double scale_min = 0.9;
    double scale_max = 1.1;
    double shear_deg = 5.0;
    double translation_px = 10.0;
    double gamma_min = 0.5;
    double gamma_max = 2.0;

    void validate() const;
    static TransformRanges identity();
};

// Rotation/scale/shear about the image center, then translation.
TransformParams make_affine(double rotation_deg, double scale, double shear_deg, double tx,
                            double ty, std::size_t height, std::size_t width);

// Gamma is drawn log-uniformly so that g and 1/g are equally likely.
TransformParams sample_transform(const TransformRanges& ranges, std::size_t height,
                                 std::size_t width, std::uint64_t seed);

enum class Interp { bilinear, nearest };

// (x - min) / (max - min); a constant raster maps to zeros. Throws
// ValidationError on NaN/Inf.
Image2D normalize_intensity(std::span<const double> raw, std::size_t height, std::size_t width);

// Inverse-warp resampling; samples falling outside the source read 0.
Image2D apply_affine(const Image2D& input, const TransformParams& params,
                     Interp mode = Interp::bilinear);
MaskMap apply_affine(const MaskMap& input, const TransformParams& params,
                     Interp mode = Interp::nearest);

Image2D apply_gamma(const Image2D& image, double gamma);

struct Slice {
    std::string id;
    Image2D image;
    std::optional<MaskMap> mask;
};

struct SliceDataset {
    std::string source;
    std::vector<std::string> class_names;  // index = class id; 0 is background
    std::vector<Slice> slices;

    std::size_t size() const noexcept { return slices.size(); }
    bool empty() const noexcept { return slices.empty(); }
    // Unique ids, uniform spatial size, masks paired with their images.
    void validate() const;
};

// ---- raster files -----------------------------------------------------------
// Little-endian row-major binary with a JSON sidecar at "<path>.json":
//   {"height": H, "width": W, "dtype": "f32" | "i32"}

struct RawRaster {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> data;
};

void write_raster(const std::filesystem::path& path, const Image2D& image);
void write_raster(const std::filesystem::path& path, const MaskMap& mask);
RawRaster read_raster_f32(const std::filesystem::path& path);
MaskMap read_mask_i32(const std::filesystem::path& path);

// Manifest: JSON list of {"image": path, "mask": path | null, "id": string},
// paths relative to root. Images are min-max normalized on load.
SliceDataset load_slice_dataset(const std::filesystem::path& root,
                                const std::filesystem::path& manifest);
// Writes images/, masks/ and manifest.json under dir.
void save_slice_dataset(const SliceDataset& dataset, const std::filesystem::path& dir);

// ---- synthetic data ---------------------------------------------------------

enum class ShapeKind { ellipse, polygon };

struct SyntheticClass {
    std::string name;
    ShapeKind kind = ShapeKind::ellipse;
    double intensity = 0.8;
};

struct SyntheticSpec {
    std::size_t count = 64;
    std::size_t height = 256;
    std::size_t width = 256;
    std::size_t min_shapes = 1;
    std::size_t max_shapes = 3;
    double radius_min = 20.0;
    double radius_max = 44.0;
    double background_level = 0.35;
    double texture_amplitude = 0.08;
    double organ_texture = 0.03;
    double noise_sigma = 0.02;
    std::vector<SyntheticClass> classes{
        {"bright_ellipse", ShapeKind::ellipse, 0.9},
        {"dark_polygon", ShapeKind::polygon, 0.08},
        {"mid_ellipse", ShapeKind::ellipse, 0.62},
    };

    void validate() const;
};

struct ShapeRecord {
    std::int32_t class_id = 0;
    ShapeKind kind = ShapeKind::ellipse;
    double cx = 0.0, cy = 0.0;
    double radius_a = 0.0, radius_b = 0.0, angle = 0.0;  // ellipse
    std::vector<std::pair<double, double>> vertices;     // convex polygon, CCW in image coords

    bool contains(double x, double y) const;
    double extent() const;
};

struct SyntheticSlice {
    Image2D image;
    MaskMap mask;
    std::vector<ShapeRecord> shapes;
};

SyntheticSlice generate_synthetic_slice(const SyntheticSpec& spec, std::uint64_t seed);

// Slice i is generated from derive_seed(seed, i).
SliceDataset make_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed);

}  // namespace crtseg
