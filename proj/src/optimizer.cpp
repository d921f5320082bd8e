#include "crtseg/optimizer.hpp"

#include "crtseg/errors.hpp"

#include <cmath>

namespace crtseg {

void ScheduleConfig::validate() const {
    if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw ValidationError("lr0 must be positive");
    if (!(decay > 0.0 && decay <= 1.0)) throw ValidationError("lr decay must lie in (0, 1]");
    if (decay_every == 0) throw ValidationError("lr decay interval must be positive");
}

double learning_rate(std::size_t iteration, const ScheduleConfig& s) {
    return s.lr0 * std::pow(s.decay, static_cast<double>(iteration / s.decay_every));
}

void AdamConfig::validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw ValidationError("Adam betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ValidationError("Adam eps must be positive");
}

void Adam::step(const ParameterList& params, double lr) {
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double c1 = 1.0 - std::pow(config_.beta1, t);
    const double c2 = 1.0 - std::pow(config_.beta2, t);
    for (Parameter* p : params) {
        Moments& s = state_[p->name];
        if (s.m.size() != p->size()) {
            s.m.assign(p->size(), 0.0);
            s.v.assign(p->size(), 0.0);
        }
        for (std::size_t i = 0; i < p->size(); ++i) {
            const double g = p->grad[i];
            s.m[i] = config_.beta1 * s.m[i] + (1.0 - config_.beta1) * g;
            s.v[i] = config_.beta2 * s.v[i] + (1.0 - config_.beta2) * g * g;
            p->value[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + config_.eps);
        }
    }
}

void Adam::save(Container& out) const {
    out.header["adam"] = {{"steps", steps_},
                          {"beta1", config_.beta1},
                          {"beta2", config_.beta2},
                          {"eps", config_.eps}};
    for (const auto& [name, s] : state_) {
        out.tensors.push_back({"adam.m/" + name, {s.m.size()}, s.m});
        out.tensors.push_back({"adam.v/" + name, {s.v.size()}, s.v});
    }
}

void Adam::load(const Container& in) {
    if (!in.header.contains("adam")) throw LoadError("checkpoint has no optimizer state");
    steps_ = in.header["adam"].at("steps").get<std::uint64_t>();
    state_.clear();
    for (const TensorBlob& t : in.tensors) {
        if (t.name.rfind("adam.m/", 0) == 0) state_[t.name.substr(7)].m = t.data;
        if (t.name.rfind("adam.v/", 0) == 0) state_[t.name.substr(7)].v = t.data;
    }
    for (const auto& [name, s] : state_)
        if (s.m.size() != s.v.size()) throw LoadError("optimizer moments for " + name + " are inconsistent");
}

}  // namespace crtseg
