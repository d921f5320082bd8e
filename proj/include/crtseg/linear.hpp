#pragma once

#include "crtseg/params.hpp"
#include "crtseg/tensor.hpp"

namespace crtseg {

// Token-wise affine map: Y = X W^T (+ b), X is N x in, W is out x in.
class Linear {
public:
    Linear() = default;
    Linear(const std::string& name, std::size_t in, std::size_t out, bool bias);

    Matrix forward(const Matrix& x) const;
    // Accumulates weight/bias gradients; returns dL/dX.
    Matrix backward(const Matrix& x, const Matrix& grad_out);

    std::size_t in_features() const noexcept { return in_; }
    std::size_t out_features() const noexcept { return out_; }
    bool has_bias() const noexcept { return has_bias_; }

    Parameter weight;
    Parameter bias;

    void collect(ParameterList& out);

private:
    std::size_t in_ = 0;
    std::size_t out_ = 0;
    bool has_bias_ = false;
};

}  // namespace crtseg
