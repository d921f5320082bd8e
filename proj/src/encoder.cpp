#include "crtseg/encoder.hpp"

#include "crtseg/checkpoint.hpp"
#include "crtseg/errors.hpp"
#include "crtseg/kernels.hpp"
#include "crtseg/rng.hpp"

#include <algorithm>
#include <cmath>

namespace crtseg {

using kernels::Trans;

namespace {

std::size_t conv_extent(std::size_t n, std::size_t stride) { return (n - 1) / stride + 1; }

void im2col(const FeatureMap& x, std::size_t stride, std::size_t ho, std::size_t wo,
            std::vector<double>& cols) {
    const std::size_t hw = ho * wo;
    cols.assign(x.channels * 9 * hw, 0.0);
    const auto h = static_cast<long>(x.height), w = static_cast<long>(x.width);
    for (std::size_t c = 0; c < x.channels; ++c)
        for (long ky = 0; ky < 3; ++ky)
            for (long kx = 0; kx < 3; ++kx) {
                double* dst = cols.data() + ((c * 9) + ky * 3 + kx) * hw;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long iy = static_cast<long>(oy * stride) + ky - 1;
                    if (iy < 0 || iy >= h) continue;
                    const double* src = x.data.data() + (c * x.height + iy) * x.width;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const long ix = static_cast<long>(ox * stride) + kx - 1;
                        if (ix >= 0 && ix < w) dst[oy * wo + ox] = src[ix];
                    }
                }
            }
}

void col2im(const std::vector<double>& cols, std::size_t stride, std::size_t ho, std::size_t wo,
            FeatureMap& dx) {
    const std::size_t hw = ho * wo;
    const auto h = static_cast<long>(dx.height), w = static_cast<long>(dx.width);
    for (std::size_t c = 0; c < dx.channels; ++c)
        for (long ky = 0; ky < 3; ++ky)
            for (long kx = 0; kx < 3; ++kx) {
                const double* src = cols.data() + ((c * 9) + ky * 3 + kx) * hw;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long iy = static_cast<long>(oy * stride) + ky - 1;
                    if (iy < 0 || iy >= h) continue;
                    double* dst = dx.data.data() + (c * dx.height + iy) * dx.width;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const long ix = static_cast<long>(ox * stride) + kx - 1;
                        if (ix >= 0 && ix < w) dst[ix] += src[oy * wo + ox];
                    }
                }
            }
}

}  // namespace

void EncoderConfig::validate() const {
    if (architecture != "conv4")
        throw ValidationError("unknown encoder architecture '" + architecture + "'");
    if (channels < 8) throw ValidationError("encoder channels (D) must be at least 8");
    if (stride != 4 && stride != 8) throw ValidationError("encoder stride must be 4 or 8");
}

Conv2d::Conv2d(const std::string& name, std::size_t in, std::size_t out, std::size_t stride, bool relu)
    : weight(name + ".weight", {out, in, 3, 3}),
      bias(name + ".bias", {out}),
      in_(in),
      out_(out),
      stride_(stride),
      relu_(relu) {}

FeatureMap Conv2d::forward(const FeatureMap& x, Cache* cache) const {
    if (x.channels != in_) throw ValidationError("Conv2d " + weight.name + ": channel mismatch");
    const std::size_t ho = conv_extent(x.height, stride_), wo = conv_extent(x.width, stride_);
    const std::size_t hw = ho * wo;
    std::vector<double> local;
    std::vector<double>& cols = cache ? cache->columns : local;
    im2col(x, stride_, ho, wo, cols);

    FeatureMap y(out_, ho, wo, x.stride * stride_);
    for (std::size_t o = 0; o < out_; ++o) std::fill_n(y.data.data() + o * hw, hw, bias.value[o]);
    kernels::gemm(Trans::no, Trans::no, out_, hw, in_ * 9, weight.value.data(), in_ * 9, cols.data(),
                  hw, 1.0, y.data.data(), hw);
    if (relu_)
        for (double& v : y.data) v = v > 0.0 ? v : 0.0;
    if (cache) {
        cache->in_channels = x.channels;
        cache->in_height = x.height;
        cache->in_width = x.width;
        cache->output = y;
    }
    return y;
}

FeatureMap Conv2d::backward(const Cache& cache, const FeatureMap& grad_out, bool want_input_grad) {
    const FeatureMap& y = cache.output;
    if (!grad_out.same_shape(y)) throw ValidationError("Conv2d " + weight.name + ": gradient shape mismatch");
    const std::size_t hw = y.plane();
    std::vector<double> dpre = grad_out.data;
    if (relu_)
        for (std::size_t i = 0; i < dpre.size(); ++i)
            if (!(y.data[i] > 0.0)) dpre[i] = 0.0;

    kernels::gemm(Trans::no, Trans::yes, out_, in_ * 9, hw, dpre.data(), hw, cache.columns.data(), hw,
                  1.0, weight.grad.data(), in_ * 9);
    for (std::size_t o = 0; o < out_; ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += dpre[o * hw + i];
        bias.grad[o] += s;
    }
    FeatureMap dx(cache.in_channels, cache.in_height, cache.in_width, y.stride / stride_);
    if (!want_input_grad) return dx;
    std::vector<double> dcols(in_ * 9 * hw);
    kernels::gemm(Trans::yes, Trans::no, in_ * 9, hw, out_, weight.value.data(), in_ * 9, dpre.data(),
                  hw, 0.0, dcols.data(), hw);
    col2im(dcols, stride_, y.height, y.width, dx);
    return dx;
}

Encoder::Encoder(const EncoderConfig& config) : config_(config) {
    config_.validate();
    const std::size_t d = config_.channels;
    const std::size_t s3 = config_.stride == 8 ? 2 : 1;
    layers_.emplace_back("encoder.stage1.conv1", 3, 16, 2, true);
    layers_.emplace_back("encoder.stage2.conv1", 16, 32, 2, true);
    layers_.emplace_back("encoder.stage3.conv1", 32, d, s3, true);
    layers_.emplace_back("encoder.stage3.conv2", d, d, 1, true);
    layers_.emplace_back("encoder.stage4.conv1", d, d, 1, true);
    layers_.emplace_back("encoder.stage4.conv2", d, d, 1, false);

    Rng rng(derive_seed(config_.seed, 0xE1));
    for (auto& layer : layers_) {
        const double fan_in = static_cast<double>(layer.in_channels() * 9);
        const double gain = layer.relu() ? 2.0 : 1.0;
        layer.weight.fill_normal(rng, std::sqrt(gain / fan_in));
    }
    if (!config_.weights_path.empty()) load_weights(config_.weights_path);
}

FeatureMap Encoder::forward(const Image2D& image, Mode, Trace* trace) const {
    if (image.height == 0 || image.width == 0) throw ValidationError("encoder: empty image");
    FeatureMap x(3, image.height, image.width, 1);
    for (std::size_t c = 0; c < 3; ++c) std::copy(image.data.begin(), image.data.end(), x.channel(c).begin());
    if (trace) trace->layers.assign(layers_.size(), {});
    for (std::size_t i = 0; i < layers_.size(); ++i)
        x = layers_[i].forward(x, trace ? &trace->layers[i] : nullptr);
    return x;
}

void Encoder::backward(const Trace& trace, const FeatureMap& grad) {
    if (trace.layers.size() != layers_.size()) throw ValidationError("encoder: trace does not match network");
    FeatureMap g = grad;
    for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i].backward(trace.layers[i], g, i > 0);
}

ParameterList Encoder::parameters() {
    ParameterList out;
    for (auto& l : layers_) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
    }
    return out;
}

void Encoder::load_weights(const std::filesystem::path& path) {
    const Container c = read_container(path);
    const auto& h = c.header;
    if (h.contains("encoder")) {
        const auto& e = h.at("encoder");
        if (e.value("architecture", config_.architecture) != config_.architecture ||
            e.value("channels", config_.channels) != config_.channels ||
            e.value("stride", config_.stride) != config_.stride)
            throw LoadError("weights in " + path.string() + " were saved for a different encoder configuration");
    }
    for (Parameter* p : parameters()) {
        const TensorBlob* t = c.find(p->name);
        if (!t) throw LoadError("weights file " + path.string() + " has no tensor '" + p->name + "'");
        if (t->shape != p->shape) throw LoadError("tensor '" + p->name + "' in " + path.string() + " has the wrong shape");
        p->value = t->data;
    }
}

FeatureMap extract_features(const Image2D& image, const Encoder& encoder, Mode mode) {
    return encoder.forward(image, mode, nullptr);
}

}  // namespace crtseg
