#pragma once

// Shared feature extractor f(x): image -> D x ceil(H/stride) x ceil(W/stride).
// The default "conv4" architecture is a four-stage 3x3 convolutional network
// (16/32/D/D channels); stages 1-3 downsample by 2 for stride 8, stage 3
// keeps resolution for stride 4.

#include "crtseg/data.hpp"
#include "crtseg/params.hpp"
#include "crtseg/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace crtseg {

struct EncoderConfig {
    std::string architecture = "conv4";
    std::size_t channels = 64;  // D
    std::size_t stride = 8;
    std::uint64_t seed = 1;
    std::string weights_path;   // optional pretrained weights

    void validate() const;
    bool operator==(const EncoderConfig&) const = default;
};

enum class Mode { train, eval };

// 3x3 convolution, padding 1, optional ReLU.
class Conv2d {
public:
    struct Cache {
        std::size_t in_channels = 0, in_height = 0, in_width = 0;
        std::vector<double> columns;  // im2col buffer, (Cin*9) x (Ho*Wo)
        FeatureMap output;            // post-activation
    };

    Conv2d() = default;
    Conv2d(const std::string& name, std::size_t in, std::size_t out, std::size_t stride, bool relu);

    FeatureMap forward(const FeatureMap& x, Cache* cache) const;
    // Accumulates parameter gradients. Returns dL/dx when want_input_grad.
    FeatureMap backward(const Cache& cache, const FeatureMap& grad_out, bool want_input_grad);

    std::size_t in_channels() const noexcept { return in_; }
    std::size_t out_channels() const noexcept { return out_; }
    std::size_t stride() const noexcept { return stride_; }
    bool relu() const noexcept { return relu_; }

    Parameter weight;  // out x in x 3 x 3
    Parameter bias;    // out

private:
    std::size_t in_ = 0, out_ = 0, stride_ = 1;
    bool relu_ = true;
};

class Encoder {
public:
    struct Trace {
        std::vector<Conv2d::Cache> layers;
    };

    explicit Encoder(const EncoderConfig& config);

    // The grayscale image is replicated across three input channels.
    FeatureMap forward(const Image2D& image, Mode mode, Trace* trace = nullptr) const;
    void backward(const Trace& trace, const FeatureMap& grad);

    ParameterList parameters();
    const EncoderConfig& config() const noexcept { return config_; }
    const std::vector<Conv2d>& layers() const noexcept { return layers_; }
    std::vector<Conv2d>& layers() noexcept { return layers_; }

    // Loads weights from a checkpoint container; names and shapes must match.
    void load_weights(const std::filesystem::path& path);

private:
    EncoderConfig config_;
    std::vector<Conv2d> layers_;
};

FeatureMap extract_features(const Image2D& image, const Encoder& encoder, Mode mode);

inline std::size_t feature_extent(std::size_t pixels, std::size_t stride) {
    return (pixels + stride - 1) / stride;
}

}  // namespace crtseg
