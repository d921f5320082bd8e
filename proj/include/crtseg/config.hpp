#pragma once

// Run configuration: JSON file -> typed config. Unknown keys, type errors and
// range violations are all collected before failing.

#include "crtseg/errors.hpp"
#include "crtseg/trainer.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace crtseg {

struct DataSpec {
    std::string source = "synthetic";  // "synthetic" | "files"
    std::string root;
    std::string manifest;
    std::optional<std::uint64_t> seed;  // synthetic only; default derived from the run seed
    SyntheticSpec synthetic;
};

struct GradcheckOptions {
    std::vector<std::string> components{"cross_reference_block", "classifier_head", "losses", "bypass"};
    std::size_t instances = 10;
    double epsilon = 1e-3;
    double tolerance = 1e-5;
};

struct RunConfig {
    std::uint64_t seed = 0;
    DataSpec data;
    DataSpec eval_data;
    TrainConfig train;
    EvalOptions eval;
    GradcheckOptions gradcheck;

    RunConfig();
    // Propagates the run seed into sub-configs that did not set their own.
    void apply_seed(std::uint64_t seed);
};

class ConfigError : public Error {
public:
    explicit ConfigError(std::vector<std::string> problems, std::vector<std::string> unknown_keys);
    const std::vector<std::string>& problems() const noexcept { return problems_; }
    const std::vector<std::string>& unknown_keys() const noexcept { return unknown_; }
    nlohmann::json to_json() const;

private:
    std::vector<std::string> problems_;
    std::vector<std::string> unknown_;
};

RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

nlohmann::json to_json(const RunConfig& c);
nlohmann::json to_json(const TrainConfig& c);

// FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& resolved);
// Hash of the settings that determine the parameter layout and inference.
std::string model_hash(const TrainConfig& c);

SliceDataset materialize_dataset(const DataSpec& spec, std::uint64_t default_seed);
// Synthetic specs without an explicit seed derive one from the run seed.
SliceDataset training_dataset(const RunConfig& c);
SliceDataset evaluation_dataset(const RunConfig& c);

}  // namespace crtseg
