#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedcbdr/nn.hpp"

namespace fedcbdr::config {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DatasetSpec {
    std::string kind = "synthetic";  // "synthetic" or "idx"
    std::size_t num_classes = 6;
    std::size_t per_class = 200;
    std::size_t feature_dim = 16;
    double spread = 0.5;
    std::string train_images;  // idx paths, unused for synthetic
    std::string train_labels;
    std::string test_images;
    std::string test_labels;

    bool operator==(const DatasetSpec&) const = default;
};

struct ExperimentConfig {
    DatasetSpec dataset;
    std::size_t num_tasks = 3;
    double beta = 0.5;

    std::size_t num_clients = 5;       // K
    std::size_t local_epochs = 2;      // E
    std::size_t batch_size = 128;      // B
    std::size_t rounds_per_task = 100; // T
    double lr = 0.01;
    double weight_decay = 1e-5;
    nn::TtsParams tts;

    std::size_t replay_per_task = 30;  // N, selected globally per finished task
    std::size_t buffer_budget = 90;    // M, cap across all tasks and clients
    std::vector<std::size_t> hidden_dims = {64, 32};
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::vector<std::string> methods = {"FedCBDR"};
    std::string mask_kind = "permutation";  // or "general"
    bool use_leverage_weights = false;
    bool truncate_zero_singular = false;

    bool operator==(const ExperimentConfig&) const = default;
};

// Parses and validates; missing/invalid fields are reported by name, JSON
// syntax errors with the parser's position info.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);

// Serialization round-trips: parse_config(serialize_config(c)) == c.
std::string serialize_config(const ExperimentConfig& cfg);

}  // namespace fedcbdr::config
