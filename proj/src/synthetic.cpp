#include "crtseg/data.hpp"

#include "crtseg/errors.hpp"
#include "crtseg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace crtseg {

namespace {

constexpr double kMargin = 4.0;
constexpr int kPlacementTries = 200;

struct Wave {
    double fx, fy, phase, amp;
};

std::vector<Wave> random_waves(Rng& rng, int count, double amplitude) {
    std::vector<Wave> waves;
    for (int i = 0; i < count; ++i) {
        const double period = rng.uniform(24.0, 96.0);
        const double dir = rng.uniform(0.0, std::numbers::pi);
        const double f = 2.0 * std::numbers::pi / period;
        waves.push_back({f * std::cos(dir), f * std::sin(dir), rng.uniform(0.0, 2.0 * std::numbers::pi),
                         amplitude * rng.uniform(0.5, 1.0) / count});
    }
    return waves;
}

double eval_waves(const std::vector<Wave>& waves, double x, double y) {
    double v = 0.0;
    for (const auto& w : waves) v += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
    return v;
}

ShapeRecord random_shape(Rng& rng, const SyntheticSpec& spec, std::int32_t class_id) {
    const auto& cls = spec.classes[static_cast<std::size_t>(class_id - 1)];
    ShapeRecord s;
    s.class_id = class_id;
    s.kind = cls.kind;
    if (cls.kind == ShapeKind::ellipse) {
        s.radius_a = rng.uniform(spec.radius_min, spec.radius_max);
        s.radius_b = s.radius_a * rng.uniform(0.55, 1.0);
        s.angle = rng.uniform(0.0, std::numbers::pi);
    } else {
        const int n = 5 + static_cast<int>(rng.below(4));
        const double r = rng.uniform(spec.radius_min, spec.radius_max);
        // Evenly spaced jittered angles keep the polygon convex enough for
        // the half-plane test; radii vary mildly.
        const double base = rng.uniform(0.0, 2.0 * std::numbers::pi);
        for (int i = 0; i < n; ++i) {
            const double t = base + 2.0 * std::numbers::pi * (i + rng.uniform(-0.2, 0.2)) / n;
            const double rr = r * rng.uniform(0.85, 1.0);
            s.vertices.emplace_back(rr * std::cos(t), rr * std::sin(t));
        }
    }
    return s;
}

}  // namespace

bool ShapeRecord::contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    if (kind == ShapeKind::ellipse) {
        const double c = std::cos(angle), s = std::sin(angle);
        const double u = (dx * c + dy * s) / radius_a;
        const double v = (-dx * s + dy * c) / radius_b;
        return u * u + v * v <= 1.0;
    }
    // Vertices are relative to the center and ordered by increasing angle.
    const std::size_t n = vertices.size();
    for (std::size_t i = 0; i < n; ++i) {
        const auto [x0, y0] = vertices[i];
        const auto [x1, y1] = vertices[(i + 1) % n];
        if ((x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0) < 0.0) return false;
    }
    return true;
}

double ShapeRecord::extent() const {
    if (kind == ShapeKind::ellipse) return std::max(radius_a, radius_b);
    double r = 0.0;
    for (const auto& [x, y] : vertices) r = std::max(r, std::hypot(x, y));
    return r;
}

void SyntheticSpec::validate() const {
    if (height < 8 || width < 8) throw ValidationError("synthetic canvas must be at least 8x8");
    if (!(radius_min > 0.0) || radius_max < radius_min)
        throw ValidationError("synthetic radius range must satisfy 0 < radius_min <= radius_max");
    if (2.0 * (radius_max + kMargin) > static_cast<double>(std::min(height, width)))
        throw ValidationError("synthetic shapes of radius " + std::to_string(radius_max) +
                              " do not fit a " + std::to_string(height) + "x" +
                              std::to_string(width) + " canvas");
    if (min_shapes > max_shapes) throw ValidationError("synthetic min_shapes exceeds max_shapes");
    if (max_shapes > classes.size())
        throw ValidationError("synthetic max_shapes exceeds the number of classes (one shape per class)");
    for (const auto& c : classes)
        if (!(c.intensity >= 0.0 && c.intensity <= 1.0))
            throw ValidationError("synthetic class intensity must lie in [0,1]");
    if (noise_sigma < 0.0 || texture_amplitude < 0.0 || organ_texture < 0.0)
        throw ValidationError("synthetic noise and texture amplitudes must be non-negative");
}

SyntheticSlice generate_synthetic_slice(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    const std::size_t h = spec.height, w = spec.width;

    const std::size_t n_shapes =
        spec.min_shapes + static_cast<std::size_t>(rng.below(spec.max_shapes - spec.min_shapes + 1));
    std::vector<std::int32_t> class_ids(spec.classes.size());
    for (std::size_t i = 0; i < class_ids.size(); ++i) class_ids[i] = static_cast<std::int32_t>(i + 1);
    for (std::size_t i = 0; i < n_shapes; ++i)
        std::swap(class_ids[i], class_ids[i + rng.below(class_ids.size() - i)]);

    SyntheticSlice out;
    for (std::size_t i = 0; i < n_shapes; ++i) {
        ShapeRecord s = random_shape(rng, spec, class_ids[i]);
        const double r = s.extent();
        bool placed = false;
        for (int t = 0; t < kPlacementTries && !placed; ++t) {
            s.cx = rng.uniform(r + kMargin, static_cast<double>(w) - 1.0 - r - kMargin);
            s.cy = rng.uniform(r + kMargin, static_cast<double>(h) - 1.0 - r - kMargin);
            placed = std::all_of(out.shapes.begin(), out.shapes.end(), [&](const ShapeRecord& o) {
                return std::hypot(o.cx - s.cx, o.cy - s.cy) > o.extent() + r + kMargin;
            });
        }
        if (placed) out.shapes.push_back(std::move(s));
    }

    const auto background = random_waves(rng, 4, spec.texture_amplitude);
    std::vector<std::vector<Wave>> organ_tex;
    for (std::size_t i = 0; i < out.shapes.size(); ++i)
        organ_tex.push_back(random_waves(rng, 2, spec.organ_texture));

    out.image = Image2D(h, w);
    out.mask = MaskMap(h, w, 0);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double fx = static_cast<double>(x), fy = static_cast<double>(y);
            double v = spec.background_level + eval_waves(background, fx, fy);
            for (std::size_t i = 0; i < out.shapes.size(); ++i) {
                const auto& s = out.shapes[i];
                if (s.contains(fx, fy)) {
                    v = spec.classes[static_cast<std::size_t>(s.class_id - 1)].intensity +
                        eval_waves(organ_tex[i], fx, fy);
                    out.mask.at(y, x) = s.class_id;
                }
            }
            v += spec.noise_sigma * rng.normal();
            out.image.at(y, x) = std::clamp(v, 0.0, 1.0);
        }
    }
    out.image = normalize_intensity(out.image.data, h, w);
    return out;
}

SliceDataset make_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    SliceDataset ds;
    ds.source = "synthetic";
    ds.class_names.push_back("background");
    for (const auto& c : spec.classes) ds.class_names.push_back(c.name);
    ds.slices.reserve(spec.count);
    for (std::size_t i = 0; i < spec.count; ++i) {
        SyntheticSlice s = generate_synthetic_slice(spec, derive_seed(seed, i));
        char id[32];
        std::snprintf(id, sizeof id, "syn_%05zu", i);
        ds.slices.push_back({id, std::move(s.image), std::move(s.mask)});
    }
    return ds;
}

}  // namespace crtseg
