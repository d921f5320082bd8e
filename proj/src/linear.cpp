#include "crtseg/linear.hpp"

#include "crtseg/errors.hpp"
#include "crtseg/kernels.hpp"

namespace crtseg {

using kernels::Trans;

Linear::Linear(const std::string& name, std::size_t in, std::size_t out, bool bias)
    : weight(name + ".weight", {out, in}), in_(in), out_(out), has_bias_(bias) {
    if (bias) this->bias = Parameter(name + ".bias", {out});
}

Matrix Linear::forward(const Matrix& x) const {
    if (x.cols != in_) throw ValidationError("Linear " + weight.name + ": input width mismatch");
    Matrix y(x.rows, out_);
    kernels::gemm(Trans::no, Trans::yes, x.rows, out_, in_, x.data.data(), in_, weight.value.data(),
                  in_, 0.0, y.data.data(), out_);
    if (has_bias_)
        for (std::size_t r = 0; r < y.rows; ++r)
            for (std::size_t c = 0; c < out_; ++c) y(r, c) += bias.value[c];
    return y;
}

Matrix Linear::backward(const Matrix& x, const Matrix& grad_out) {
    if (grad_out.rows != x.rows || grad_out.cols != out_)
        throw ValidationError("Linear " + weight.name + ": gradient shape mismatch");
    kernels::gemm(Trans::yes, Trans::no, out_, in_, x.rows, grad_out.data.data(), out_, x.data.data(),
                  in_, 1.0, weight.grad.data(), in_);
    if (has_bias_)
        for (std::size_t r = 0; r < grad_out.rows; ++r)
            for (std::size_t c = 0; c < out_; ++c) bias.grad[c] += grad_out(r, c);
    Matrix dx(x.rows, in_);
    kernels::gemm(Trans::no, Trans::no, x.rows, in_, out_, grad_out.data.data(), out_,
                  weight.value.data(), in_, 0.0, dx.data.data(), in_);
    return dx;
}

void Linear::collect(ParameterList& out) {
    out.push_back(&weight);
    if (has_bias_) out.push_back(&bias);
}

}  // namespace crtseg
