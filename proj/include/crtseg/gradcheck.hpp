#pragma once

// Central-difference verification of the hand-written backward passes.

#include <cstdint>
#include <string>
#include <vector>

namespace crtseg {

// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps
// coordinates whose true gradient is zero from dividing roundoff by roundoff.
constexpr double kGradcheckFloor = 1e-6;

struct GradcheckResult {
    std::string component;
    std::uint64_t seed = 0;
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
};

// Components: "cross_reference_block", "classifier_head", "losses",
// "encoder", "bypass". Each builds a tiny random instance from the seed.
GradcheckResult finite_difference_check(const std::string& component, std::uint64_t seed, double epsilon = 1e-3);

const std::vector<std::string>& gradcheck_components();

}  // namespace crtseg
