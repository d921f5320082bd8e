#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace crtseg {

class Rng;

// A named trainable tensor with its gradient accumulator.
struct Parameter {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;

    Parameter() = default;
    Parameter(std::string n, std::vector<std::size_t> s);

    std::size_t size() const noexcept { return value.size(); }
    void zero_grad();
    void fill_normal(Rng& rng, double stddev);
};

using ParameterList = std::vector<Parameter*>;

void zero_grads(const ParameterList& params);

}  // namespace crtseg
