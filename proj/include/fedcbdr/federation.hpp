#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fedcbdr/config.hpp"
#include "fedcbdr/data.hpp"
#include "fedcbdr/nn.hpp"

namespace fedcbdr::federation {

enum class Method { Finetune, LocalRandomReplay, FedCBDR };
enum class Stage { Initial, Incremental };

Method method_from_string(const std::string& name);
std::string method_name(Method m);

// One replay exemplar; local_index is the position inside the owning
// client's shard of that task, resolvable via ClientState::task_shards.
struct BufferEntry {
    std::size_t local_index = 0;
    int class_id = -1;
    double weight = 1.0;
    double score = 0.0;
};

struct ClientState {
    std::size_t client_id = 0;
    // task id -> this client's global sample indices for that task
    std::map<std::size_t, std::vector<std::size_t>> task_shards;
    std::size_t current_task = 0;
    std::vector<std::size_t> current_task_data;  // == task_shards[current_task]
    std::map<std::size_t, std::vector<BufferEntry>> replay_buffer;
    nn::Model model;
    std::uint64_t rng_seed = 0;

    std::size_t buffer_size() const;
};

struct LocalTrainResult {
    nn::Model model;
    std::size_t count = 0;  // current-task plus replayed samples
    double mean_loss = 0.0;
};

struct RoundReport {
    std::size_t task_id = 0;
    std::size_t round = 0;
    std::vector<std::size_t> client_counts;
    std::uint64_t model_checksum = 0;
    double mean_train_loss = 0.0;
};

struct SelectionRecord {
    std::size_t client_id = 0;
    std::size_t local_index = 0;  // decoded raw shard position
    int class_id = -1;
    double score = 0.0;
    double probability = 0.0;
    double weight = 1.0;
};

struct ReplayUpdateReport {
    std::size_t task_id = 0;
    std::vector<SelectionRecord> selected;
    bool fallback = false;  // GDR failed and local random replay stepped in
};

// FNV-1a over all parameters; used to assert broadcast consistency.
std::uint64_t model_checksum(const nn::Model& model);

// E epochs of seeded minibatch SGD over current-task plus buffer samples.
// Initial stage runs plain CE (unit temperatures, no old group).
LocalTrainResult local_train(const ClientState& client, const data::Dataset& train, Stage stage,
                             const config::ExperimentConfig& cfg, std::uint64_t seed);

nn::Model fedavg(const std::vector<nn::Model>& models, const std::vector<std::size_t>& counts);

using RoundCallback = std::function<void(const RoundReport&, const nn::Model&)>;

// T rounds of broadcast -> local_train -> fedavg. Stage is Initial iff
// task_id == 0. on_round fires after each aggregation.
nn::Model run_task(std::size_t task_id, nn::Model global, std::vector<ClientState>& clients,
                   const data::Dataset& train, const config::ExperimentConfig& cfg,
                   std::uint64_t run_seed, const RoundCallback& on_round);

// Runs the replay pipeline for the just-finished task and installs the new
// exemplars, shrinking older allocations if the budget M would overflow.
ReplayUpdateReport end_of_task_replay_update(std::size_t task_id, const nn::Model& global,
                                             std::vector<ClientState>& clients,
                                             const data::Dataset& train, Method method,
                                             const config::ExperimentConfig& cfg,
                                             std::uint64_t run_seed);

std::vector<std::size_t> buffer_class_histogram(const std::vector<ClientState>& clients,
                                                std::size_t num_classes);
std::size_t total_buffer_size(const std::vector<ClientState>& clients);

}  // namespace fedcbdr::federation
