#include "crtseg/objectives.hpp"

#include "crtseg/errors.hpp"

#include <algorithm>
#include <cmath>

namespace crtseg {

namespace {

void check_target(const Matrix& probs, const MaskMap& target) {
    if (probs.cols != target.size())
        throw ValidationError("loss: " + std::to_string(probs.cols) + " predicted pixels vs " +
                              std::to_string(target.size()) + " target pixels");
    for (std::int32_t v : target.data)
        if (v < 0 || static_cast<std::size_t>(v) >= probs.rows)
            throw ValidationError("loss: target label " + std::to_string(v) + " outside the predicted classes");
}

}  // namespace

double seg_loss(const Matrix& probs, const MaskMap& target) {
    check_target(probs, target);
    double sum = 0.0;
    for (std::size_t n = 0; n < probs.cols; ++n) {
        const double p = probs(static_cast<std::size_t>(target.data[n]), n);
        sum -= std::log(std::clamp(p, kProbFloor, 1.0));
    }
    return sum / static_cast<double>(probs.cols);
}

Matrix seg_loss_grad(const Matrix& probs, const MaskMap& target) {
    check_target(probs, target);
    Matrix g(probs.rows, probs.cols);
    const double inv = 1.0 / static_cast<double>(probs.cols);
    for (std::size_t n = 0; n < probs.cols; ++n) {
        const std::size_t j = static_cast<std::size_t>(target.data[n]);
        const double p = probs(j, n);
        if (p > kProbFloor) g(j, n) = -inv / p;
    }
    return g;
}

double alignment_loss(const std::optional<Matrix>& support_probs, const MaskMap& support_mask) {
    if (!support_probs) return 0.0;
    return seg_loss(*support_probs, support_mask);
}

LossReport total_loss(double seg, double reg, double lambda) {
    return {seg, reg, seg + lambda * reg, lambda};
}

void to_json(nlohmann::json& j, const LossReport& r) {
    j = {{"seg", r.seg}, {"reg", r.reg}, {"total", r.total}, {"lambda", r.lambda}};
}

double dice(const MaskMap& pred, const MaskMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw ValidationError("dice: mask shapes differ");
    if (!pred.is_binary() || !gt.is_binary()) throw ValidationError("dice: masks must be binary");
    std::size_t a = 0, b = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        a += pred.data[i] != 0;
        b += gt.data[i] != 0;
        both += pred.data[i] != 0 && gt.data[i] != 0;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

void to_json(nlohmann::json& j, const DiceReport& r) {
    nlohmann::json classes = nlohmann::json::object();
    for (const auto& [name, value] : r.per_class) {
        if (value)
            classes[name] = *value;
        else
            classes[name] = "not-evaluated";
    }
    j = {{"per_class", classes},
         {"episodes", r.episodes},
         {"mean", r.mean},
         {"evaluated", r.evaluated},
         {"empty_convention", r.empty_convention}};
}

}  // namespace crtseg
