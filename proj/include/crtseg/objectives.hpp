#pragma once

// Cross-entropy segmentation loss, the alignment loss, their weighted sum and
// the Dice overlap metric.

#include "crtseg/data.hpp"
#include "crtseg/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <string>

namespace crtseg {

constexpr double kProbFloor = 1e-8;

// -(1/HW) sum_hw sum_j [target == j] log(clamp(p_j, 1e-8, 1)).
// probs is (J+1) x (HW), target an H x W label map with values in [0, J].
double seg_loss(const Matrix& probs, const MaskMap& target);
// dL/dprobs; zero where the clamp is active.
Matrix seg_loss_grad(const Matrix& probs, const MaskMap& target);

// Same formula on the re-segmented support. Callers pass std::nullopt when
// the query prediction had no foreground, which defines the loss as 0.
double alignment_loss(const std::optional<Matrix>& support_probs, const MaskMap& support_mask);

struct LossReport {
    double seg = 0.0;
    double reg = 0.0;
    double total = 0.0;
    double lambda = 1.0;
};

LossReport total_loss(double seg, double reg, double lambda = 1.0);

void to_json(nlohmann::json& j, const LossReport& r);

// 2|A n B| / (|A| + |B|); 1.0 when both are empty. Inputs must be binary.
double dice(const MaskMap& pred, const MaskMap& gt);

struct DiceReport {
    std::map<std::string, std::optional<double>> per_class;  // nullopt = not evaluated
    std::map<std::string, std::size_t> episodes;
    double mean = 0.0;         // over evaluated classes
    std::size_t evaluated = 0; // episodes scored
    std::string empty_convention = "both-empty Dice = 1.0";
};

void to_json(nlohmann::json& j, const DiceReport& r);

}  // namespace crtseg
