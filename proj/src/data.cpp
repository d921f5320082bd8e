#include "crtseg/data.hpp"

#include "crtseg/errors.hpp"
#include "crtseg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace crtseg {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

struct InverseAffine {
    double m00, m01, m10, m11, tx, ty;

    explicit InverseAffine(const TransformParams& p) {
        const double det = p.determinant();
        if (!(std::abs(det) > 1e-6))
            throw ValidationError("affine transform is not invertible (|det| <= 1e-6)");
        const auto& a = p.affine;
        m00 = a[4] / det;
        m01 = -a[1] / det;
        m10 = -a[3] / det;
        m11 = a[0] / det;
        tx = a[2];
        ty = a[5];
    }

    void map(double x, double y, double& sx, double& sy) const {
        const double dx = x - tx;
        const double dy = y - ty;
        sx = m00 * dx + m01 * dy;
        sy = m10 * dx + m11 * dy;
    }
};

}  // namespace

std::size_t MaskMap::count(std::int32_t label) const {
    return static_cast<std::size_t>(std::count(data.begin(), data.end(), label));
}

bool MaskMap::is_binary() const {
    return std::all_of(data.begin(), data.end(), [](std::int32_t v) { return v == 0 || v == 1; });
}

bool TransformParams::is_identity() const noexcept {
    return affine == std::array<double, 6>{1.0, 0.0, 0.0, 0.0, 1.0, 0.0} && gamma == 1.0;
}

void TransformRanges::validate() const {
    if (!(scale_min > 0.0) || !(scale_max >= scale_min))
        throw ValidationError("transform scale range must satisfy 0 < scale_min <= scale_max");
    if (!(gamma_min > 0.0) || !(gamma_max >= gamma_min))
        throw ValidationError("gamma range must satisfy 0 < gamma_min <= gamma_max");
    if (rotation_deg < 0.0 || shear_deg < 0.0 || translation_px < 0.0)
        throw ValidationError("rotation, shear and translation ranges must be non-negative");
    if (shear_deg >= 89.0) throw ValidationError("shear range must be below 89 degrees");
}

TransformRanges TransformRanges::identity() {
    TransformRanges r;
    r.rotation_deg = 0.0;
    r.scale_min = r.scale_max = 1.0;
    r.shear_deg = 0.0;
    r.translation_px = 0.0;
    r.gamma_min = r.gamma_max = 1.0;
    return r;
}

TransformParams make_affine(double rotation_deg, double scale, double shear_deg, double tx,
                            double ty, std::size_t height, std::size_t width) {
    const double th = rotation_deg * kDegToRad;
    const double c = std::cos(th), s = std::sin(th);
    const double sh = std::tan(shear_deg * kDegToRad);
    // A = R * Shear * scale
    const double a00 = c * scale;
    const double a01 = (c * sh - s) * scale;
    const double a10 = s * scale;
    const double a11 = (s * sh + c) * scale;
    const double cx = (static_cast<double>(width) - 1.0) / 2.0;
    const double cy = (static_cast<double>(height) - 1.0) / 2.0;
    TransformParams p;
    p.affine = {a00, a01, cx - (a00 * cx + a01 * cy) + tx, a10, a11, cy - (a10 * cx + a11 * cy) + ty};
    return p;
}

TransformParams sample_transform(const TransformRanges& ranges, std::size_t height,
                                 std::size_t width, std::uint64_t seed) {
    ranges.validate();
    Rng rng(seed);
    const double rot = rng.uniform(-ranges.rotation_deg, ranges.rotation_deg);
    const double scale = rng.uniform(ranges.scale_min, ranges.scale_max);
    const double shear = rng.uniform(-ranges.shear_deg, ranges.shear_deg);
    const double tx = rng.uniform(-ranges.translation_px, ranges.translation_px);
    const double ty = rng.uniform(-ranges.translation_px, ranges.translation_px);
    const double lg = rng.uniform(std::log(ranges.gamma_min), std::log(ranges.gamma_max));
    TransformParams p = make_affine(rot, scale, shear, tx, ty, height, width);
    p.gamma = ranges.gamma_min == ranges.gamma_max ? ranges.gamma_min : std::exp(lg);
    p.seed = seed;
    return p;
}

Image2D normalize_intensity(std::span<const double> raw, std::size_t height, std::size_t width) {
    if (raw.size() != height * width)
        throw ValidationError("normalize_intensity: raster size does not match height*width");
    if (height == 0 || width == 0) throw ValidationError("normalize_intensity: empty raster");
    double lo = raw[0], hi = raw[0];
    for (double v : raw) {
        if (!std::isfinite(v)) throw ValidationError("normalize_intensity: non-finite intensity");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    Image2D out(height, width, 0.0);
    if (hi > lo) {
        const double range = hi - lo;
        for (std::size_t i = 0; i < raw.size(); ++i) out.data[i] = (raw[i] - lo) / range;
    }
    return out;
}

Image2D apply_affine(const Image2D& input, const TransformParams& params, Interp mode) {
    const InverseAffine inv(params);
    Image2D out(input.height, input.width, 0.0);
    const auto h = static_cast<long>(input.height);
    const auto w = static_cast<long>(input.width);
    auto sample = [&](long r, long c) -> double {
        return (r < 0 || c < 0 || r >= h || c >= w) ? 0.0 : input.at(r, c);
    };
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            double sx, sy;
            inv.map(static_cast<double>(x), static_cast<double>(y), sx, sy);
            double v;
            if (mode == Interp::nearest) {
                v = sample(static_cast<long>(std::floor(sy + 0.5)), static_cast<long>(std::floor(sx + 0.5)));
            } else {
                const double fx0 = std::floor(sx), fy0 = std::floor(sy);
                const double fx = sx - fx0, fy = sy - fy0;
                const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
                v = (1.0 - fy) * ((1.0 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1)) +
                    fy * ((1.0 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1));
            }
            out.at(y, x) = v;
        }
    }
    return out;
}

MaskMap apply_affine(const MaskMap& input, const TransformParams& params, Interp mode) {
    if (mode != Interp::nearest)
        throw ValidationError("masks must be resampled with nearest-neighbour interpolation");
    const InverseAffine inv(params);
    MaskMap out(input.height, input.width, 0);
    const auto h = static_cast<long>(input.height);
    const auto w = static_cast<long>(input.width);
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            double sx, sy;
            inv.map(static_cast<double>(x), static_cast<double>(y), sx, sy);
            const long r = static_cast<long>(std::floor(sy + 0.5));
            const long c = static_cast<long>(std::floor(sx + 0.5));
            if (r >= 0 && c >= 0 && r < h && c < w) out.at(y, x) = input.at(r, c);
        }
    }
    return out;
}

Image2D apply_gamma(const Image2D& image, double gamma) {
    if (!(gamma > 0.0) || !std::isfinite(gamma))
        throw ValidationError("gamma must be a positive finite number");
    for (double v : image.data)
        if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("apply_gamma expects intensities in [0,1]");
    Image2D out = image;
    if (gamma == 1.0) return out;
    for (double& v : out.data) v = std::pow(v, gamma);
    return out;
}

void SliceDataset::validate() const {
    std::set<std::string> ids;
    for (const auto& s : slices) {
        if (!ids.insert(s.id).second) throw ValidationError("duplicate slice id '" + s.id + "'");
        if (s.image.height == 0 || s.image.width == 0)
            throw ValidationError("slice '" + s.id + "' has an empty image");
        if (s.image.data.size() != s.image.height * s.image.width)
            throw ValidationError("slice '" + s.id + "' image buffer does not match its shape");
        if (s.mask && (s.mask->height != s.image.height || s.mask->width != s.image.width))
            throw ValidationError("slice '" + s.id + "': mask is " + std::to_string(s.mask->height) +
                                  "x" + std::to_string(s.mask->width) + " but image is " +
                                  std::to_string(s.image.height) + "x" +
                                  std::to_string(s.image.width));
        if (s.image.height != slices.front().image.height ||
            s.image.width != slices.front().image.width)
            throw ValidationError("slice '" + s.id + "' does not share the dataset spatial size");
    }
}

}  // namespace crtseg
