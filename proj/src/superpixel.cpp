#include "crtseg/superpixel.hpp"

#include "crtseg/errors.hpp"
#include "crtseg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>

namespace crtseg {

namespace {

struct Edge {
    double weight;
    std::uint32_t a, b;  // a < b

    bool operator<(const Edge& o) const {
        if (weight != o.weight) return weight < o.weight;
        if (a != o.a) return a < o.a;
        return b < o.b;
    }
};

class DisjointSets {
public:
    explicit DisjointSets(std::size_t n) : parent_(n), size_(n, 1), internal_(n, 0.0) {
        std::iota(parent_.begin(), parent_.end(), std::uint32_t{0});
    }

    std::uint32_t find(std::uint32_t x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }

    // Returns the surviving root. Ties on size go to the smaller index so the
    // result does not depend on argument order.
    std::uint32_t join(std::uint32_t a, std::uint32_t b) {
        if (size_[a] < size_[b] || (size_[a] == size_[b] && b < a)) std::swap(a, b);
        parent_[b] = a;
        size_[a] += size_[b];
        return a;
    }

    std::size_t size(std::uint32_t root) const { return size_[root]; }
    double& internal(std::uint32_t root) { return internal_[root]; }

private:
    std::vector<std::uint32_t> parent_;
    std::vector<std::size_t> size_;
    std::vector<double> internal_;
};

std::vector<double> gaussian_kernel(double sigma) {
    const int radius = static_cast<int>(std::ceil(4.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += k[i + radius];
    }
    for (double& v : k) v /= sum;
    return k;
}

}  // namespace

void SuperpixelConfig::validate() const {
    if (!(k > 0.0)) throw ValidationError("superpixel k must be positive");
    if (min_size == 0) throw ValidationError("superpixel min_size must be positive");
    if (sigma < 0.0) throw ValidationError("superpixel sigma must be non-negative");
    if (min_area == 0) throw ValidationError("pseudo-label min_area must be positive");
    if (!(max_area_fraction > 0.0 && max_area_fraction <= 1.0))
        throw ValidationError("pseudo-label max_area_fraction must lie in (0,1]");
}

Image2D gaussian_smooth(const Image2D& image, double sigma) {
    if (sigma <= 0.0) return image;
    const auto kernel = gaussian_kernel(sigma);
    const int radius = static_cast<int>(kernel.size() / 2);
    const auto h = static_cast<int>(image.height), w = static_cast<int>(image.width);
    Image2D tmp(image.height, image.width), out(image.height, image.width);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[i + radius] * image.at(y, std::clamp(x + i, 0, w - 1));
            tmp.at(y, x) = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[i + radius] * tmp.at(std::clamp(y + i, 0, h - 1), x);
            out.at(y, x) = acc;
        }
    return out;
}

SuperpixelMap felzenszwalb_segment(const Image2D& image, double k, std::size_t min_size,
                                   double sigma) {
    const std::size_t h = image.height, w = image.width, n = h * w;
    if (n == 0) throw ValidationError("felzenszwalb_segment: empty image");
    if (min_size == 0 || min_size > n)
        throw ValidationError("felzenszwalb_segment: min_size " + std::to_string(min_size) +
                              " exceeds the image area " + std::to_string(n));
    if (!(k > 0.0)) throw ValidationError("felzenszwalb_segment: k must be positive");
    if (sigma < 0.0) throw ValidationError("felzenszwalb_segment: sigma must be non-negative");

    const Image2D smooth = gaussian_smooth(image, sigma);
    auto idx = [w](std::size_t r, std::size_t c) { return static_cast<std::uint32_t>(r * w + c); };
    auto weight = [&](std::uint32_t a, std::uint32_t b) {
        return std::abs(smooth.data[a] - smooth.data[b]);
    };

    std::vector<Edge> edges;
    edges.reserve(4 * n);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            const std::uint32_t p = idx(r, c);
            if (c + 1 < w) edges.push_back({weight(p, p + 1), p, p + 1});
            if (r + 1 < h) {
                edges.push_back({weight(p, idx(r + 1, c)), p, idx(r + 1, c)});
                if (c + 1 < w) edges.push_back({weight(p, idx(r + 1, c + 1)), p, idx(r + 1, c + 1)});
                if (c > 0) edges.push_back({weight(p, idx(r + 1, c - 1)), p, idx(r + 1, c - 1)});
            }
        }
    std::sort(edges.begin(), edges.end());

    DisjointSets sets(n);
    for (const Edge& e : edges) {
        std::uint32_t a = sets.find(e.a), b = sets.find(e.b);
        if (a == b) continue;
        const double ta = sets.internal(a) + k / static_cast<double>(sets.size(a));
        const double tb = sets.internal(b) + k / static_cast<double>(sets.size(b));
        if (e.weight <= ta && e.weight <= tb) {
            const std::uint32_t root = sets.join(a, b);
            sets.internal(root) = e.weight;
        }
    }

    // Split every merged region into 4-connected pieces.
    std::vector<std::uint32_t> region(n);
    for (std::uint32_t p = 0; p < n; ++p) region[p] = sets.find(p);
    std::vector<std::uint32_t> piece(n, UINT32_MAX);
    std::uint32_t n_pieces = 0;
    std::vector<std::uint32_t> stack;
    for (std::uint32_t start = 0; start < n; ++start) {
        if (piece[start] != UINT32_MAX) continue;
        piece[start] = n_pieces;
        stack.push_back(start);
        while (!stack.empty()) {
            const std::uint32_t p = stack.back();
            stack.pop_back();
            const std::size_t r = p / w, c = p % w;
            const std::uint32_t nb[4] = {c > 0 ? p - 1 : UINT32_MAX, c + 1 < w ? p + 1 : UINT32_MAX,
                                         r > 0 ? p - static_cast<std::uint32_t>(w) : UINT32_MAX,
                                         r + 1 < h ? p + static_cast<std::uint32_t>(w) : UINT32_MAX};
            for (std::uint32_t q : nb)
                if (q != UINT32_MAX && piece[q] == UINT32_MAX && region[q] == region[p]) {
                    piece[q] = n_pieces;
                    stack.push_back(q);
                }
        }
        ++n_pieces;
    }

    // Absorb small pieces across 4-adjacent edges, cheapest edge first.
    std::vector<std::size_t> comp_size(n_pieces, 0);
    for (std::uint32_t p = 0; p < n; ++p) ++comp_size[piece[p]];
    std::vector<std::uint32_t> parent(n_pieces);
    std::iota(parent.begin(), parent.end(), std::uint32_t{0});
    auto find = [&](std::uint32_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };
    bool changed = n_pieces > 1;
    while (changed) {
        changed = false;
        for (const Edge& e : edges) {
            const bool four_adjacent = (e.b == e.a + 1 && e.a / w == e.b / w) || e.b == e.a + w;
            if (!four_adjacent) continue;
            std::uint32_t a = find(piece[e.a]), b = find(piece[e.b]);
            if (a == b) continue;
            if (comp_size[a] < min_size || comp_size[b] < min_size) {
                if (comp_size[a] < comp_size[b] || (comp_size[a] == comp_size[b] && b < a)) std::swap(a, b);
                parent[b] = a;
                comp_size[a] += comp_size[b];
                changed = true;
            }
        }
    }

    SuperpixelMap out;
    out.height = h;
    out.width = w;
    out.labels.assign(n, -1);
    std::vector<std::int32_t> relabel(n_pieces, -1);
    for (std::uint32_t p = 0; p < n; ++p) {
        const std::uint32_t root = find(piece[p]);
        if (relabel[root] < 0) {
            relabel[root] = static_cast<std::int32_t>(out.segments++);
            out.sizes.push_back(0);
        }
        out.labels[p] = relabel[root];
        ++out.sizes[static_cast<std::size_t>(relabel[root])];
    }
    return out;
}

std::vector<std::int32_t> eligible_segments(const SuperpixelMap& spx, std::size_t min_area,
                                            double max_area_fraction) {
    const double max_area = max_area_fraction * static_cast<double>(spx.height * spx.width);
    std::vector<std::int32_t> ids;
    for (std::size_t s = 0; s < spx.segments; ++s)
        if (spx.sizes[s] >= min_area && static_cast<double>(spx.sizes[s]) <= max_area)
            ids.push_back(static_cast<std::int32_t>(s));
    return ids;
}

MaskMap sample_pseudolabel(const SuperpixelMap& spx, std::uint64_t seed, std::size_t min_area,
                           double max_area_fraction) {
    if (min_area == 0) throw ValidationError("sample_pseudolabel: min_area must be positive");
    if (!(max_area_fraction > 0.0 && max_area_fraction <= 1.0))
        throw ValidationError("sample_pseudolabel: max_area_fraction must lie in (0,1]");
    const auto ids = eligible_segments(spx, min_area, max_area_fraction);
    if (ids.empty())
        throw NoEligibleSegment("no superpixel has an area in [" + std::to_string(min_area) + ", " +
                                std::to_string(max_area_fraction) + "*H*W]");
    Rng rng(seed);
    const std::int32_t chosen = ids[rng.below(ids.size())];
    MaskMap mask(spx.height, spx.width, 0);
    for (std::size_t i = 0; i < spx.labels.size(); ++i) mask.data[i] = spx.labels[i] == chosen ? 1 : 0;
    return mask;
}

}  // namespace crtseg
