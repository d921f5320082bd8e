#include "crtseg/params.hpp"

#include "crtseg/rng.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

namespace crtseg {

Parameter::Parameter(std::string n, std::vector<std::size_t> s) : name(std::move(n)), shape(std::move(s)) {
    const std::size_t count =
        std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    value.assign(count, 0.0);
    grad.assign(count, 0.0);
}

void Parameter::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

void Parameter::fill_normal(Rng& rng, double stddev) {
    for (double& v : value) v = stddev * rng.normal();
}

void zero_grads(const ParameterList& params) {
    for (Parameter* p : params) p->zero_grad();
}

}  // namespace crtseg
