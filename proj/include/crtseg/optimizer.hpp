#pragma once

#include "crtseg/checkpoint.hpp"
#include "crtseg/params.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace crtseg {

struct ScheduleConfig {
    double lr0 = 1e-3;
    double decay = 0.98;
    std::size_t decay_every = 1000;

    void validate() const;
    bool operator==(const ScheduleConfig&) const = default;
};

// lr0 * decay^floor(t / decay_every), t counted from 0.
double learning_rate(std::size_t iteration, const ScheduleConfig& schedule = {});

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const;
    bool operator==(const AdamConfig&) const = default;
};

class Adam {
public:
    explicit Adam(const AdamConfig& config = {}) : config_(config) { config_.validate(); }

    // One bias-corrected update of every parameter from its accumulated grad.
    void step(const ParameterList& params, double lr);

    std::uint64_t steps() const noexcept { return steps_; }

    // Moments stored as "adam.m/<name>" and "adam.v/<name>".
    void save(Container& out) const;
    void load(const Container& in);

private:
    struct Moments {
        std::vector<double> m, v;
    };
    AdamConfig config_;
    std::uint64_t steps_ = 0;
    std::map<std::string, Moments> state_;
};

}  // namespace crtseg
