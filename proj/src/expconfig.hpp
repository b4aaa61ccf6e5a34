#pragma once

#include <string>

#include "json.hpp"

#include "config.hpp"
#include "trainer.hpp"

namespace moelab {

struct DataConfig {
    std::string dataset;       // path to a token-window dataset file
    double train_ratio = 0.95; // train-side split fraction
    uint64_t shard_seed = 1337;
};

struct OutputConfig {
    std::string dir;
};

// One fully-specified experiment: everything a run needs besides the dataset
// bytes. Parsing is strict (unknown keys are rejected) and emit writes every
// key, so parse -> emit -> parse is the identity.
struct ExperimentConfig {
    std::string name;
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    OutputConfig output;
};

nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& model_j, const nlohmann::json* moe_j);

nlohmann::ordered_json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::string& path);
std::string emit_experiment_config(const ExperimentConfig& cfg);

bool operator==(const DataConfig& a, const DataConfig& b);
bool operator==(const OutputConfig& a, const OutputConfig& b);
bool operator==(const MoEConfig& a, const MoEConfig& b);
bool operator==(const ModelConfig& a, const ModelConfig& b);
bool operator==(const TrainConfig& a, const TrainConfig& b);
bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

} // namespace moelab
