#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fedcbdr::data {

enum class Split { Train, Test };

struct Sample {
    std::vector<double> features;
    int label = 0;
};

struct Dataset {
    std::vector<Sample> samples;
    std::size_t num_classes = 0;
    Split split = Split::Train;

    std::size_t size() const { return samples.size(); }
    std::size_t feature_dim() const { return samples.empty() ? 0 : samples[0].features.size(); }
};

/// Ordered class-id sets, one per task. Sets are disjoint and cover every
/// class of the dataset they were built for.
struct TaskSplit {
    std::vector<std::vector<int>> task_classes;
};

struct Partition {
    std::vector<std::vector<std::size_t>> client_indices;
    /// How many times the Dirichlet draw had to be repeated because some
    /// client ended up empty.
    std::size_t resamples = 0;
};

struct IdxError : std::runtime_error {
    enum class Kind { MissingFile, BadMagic, CountMismatch, Truncated };
    Kind kind;
    IdxError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

/// Gaussian-mixture train/test pair: class c gets a seeded unit-norm mean
/// scaled by 3.0 and isotropic noise with standard deviation `spread`.
/// Train holds per_class samples per class, test ceil(per_class / 5).
std::pair<Dataset, Dataset> generate_synthetic(std::size_t num_classes, std::size_t per_class,
                                               std::size_t d_in, double spread,
                                               std::uint64_t seed);

/// MNIST-style IDX loader; features are raw bytes divided by 255.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Shuffles class ids by seed and chunks them into num_tasks equal groups.
/// num_tasks must divide num_classes.
TaskSplit split_tasks(std::size_t num_classes, std::size_t num_tasks, std::uint64_t seed);

/// Splits the task's samples across clients with per-class Dirichlet(beta)
/// proportions, redrawing (with a derived seed) until every client holds at
/// least one sample.
Partition dirichlet_partition(const Dataset& dataset, const std::vector<int>& task_classes,
                              std::size_t num_clients, double beta, std::uint64_t seed);

}  // namespace fedcbdr::data
