#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace crtseg {

// Row-major dense matrix.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool operator==(const Matrix&) const = default;
};

// D x H' x W' feature tensor, channel-major. Viewed as a D x (H'W') matrix,
// column n is the feature vector of spatial position n.
struct FeatureMap {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t stride = 1;  // input pixels per feature cell
    std::vector<double> data;

    FeatureMap() = default;
    FeatureMap(std::size_t c, std::size_t h, std::size_t w, std::size_t s = 1, double fill = 0.0)
        : channels(c), height(h), width(w), stride(s), data(c * h * w, fill) {}

    std::size_t plane() const noexcept { return height * width; }

    double& at(std::size_t c, std::size_t h, std::size_t w) { return data[(c * height + h) * width + w]; }
    double at(std::size_t c, std::size_t h, std::size_t w) const {
        return data[(c * height + h) * width + w];
    }

    std::span<double> channel(std::size_t c) { return {data.data() + c * plane(), plane()}; }
    std::span<const double> channel(std::size_t c) const { return {data.data() + c * plane(), plane()}; }

    bool same_shape(const FeatureMap& o) const noexcept {
        return channels == o.channels && height == o.height && width == o.width;
    }

    bool operator==(const FeatureMap&) const = default;
};

// Column vector of position n of a feature map.
inline std::vector<double> feature_at(const FeatureMap& f, std::size_t n) {
    std::vector<double> v(f.channels);
    for (std::size_t c = 0; c < f.channels; ++c) v[c] = f.data[c * f.plane() + n];
    return v;
}

}  // namespace crtseg
