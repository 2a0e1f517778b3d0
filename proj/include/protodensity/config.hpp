#pragma once

// Flat dotted-key run configuration:
//
//   # comment
//   loss.lambda3 = 100
//   train.max_epochs = 500
//
// Keys are documented in docs/formats.md. Unknown keys are errors.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "protodensity/datagen.hpp"
#include "protodensity/eval.hpp"
#include "protodensity/training.hpp"

namespace protodensity {

struct RunConfig {
    SceneConfig scene;
    std::size_t n_train = 100;
    std::size_t n_test = 50;
    PretrainConfig pretrain;
    ModelDims model;
    TrainConfig train;
    std::size_t top_k = 3;
    double percentile = 99.0;
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};

    void validate() const;
    ExperimentConfig experiment() const;
};

/// Throws ConfigError naming the key for unknown keys or bad values.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
/// `key=value` or `key = value`.
void apply_override(RunConfig& config, const std::string& assignment);
void apply_config_text(RunConfig& config, const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// If PROTODENSITY_SEED is set, it replaces pretrain.seed, train.seed and
/// eval.seeds (as a single seed). Returns whether it was applied.
bool apply_seed_env(RunConfig& config);

/// Every key with its resolved value, in a stable order; parses back to an
/// identical config.
std::string serialize_config(const RunConfig& config);

std::vector<std::uint64_t> parse_seed_list(const std::string& text, const std::string& what);
std::vector<std::size_t> parse_size_list(const std::string& text, const std::string& what);
std::vector<double> parse_double_list(const std::string& text, const std::string& what);

} // namespace protodensity
