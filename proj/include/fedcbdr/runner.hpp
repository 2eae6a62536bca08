#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fedcbdr/config.hpp"
#include "fedcbdr/data.hpp"
#include "fedcbdr/federation.hpp"

namespace fedcbdr::runner {

struct EvalResult {
    double top1 = 0.0;
    std::vector<double> per_task;
};

// Top-1 accuracy on the pooled test classes of tasks [0, tasks_seen), plus
// per-task accuracies. Argmax over the full logit vector, no temperatures.
EvalResult evaluate(const nn::Model& model, const data::Dataset& test,
                    const data::TaskSplit& tasks, std::size_t tasks_seen);

struct MetricsRecord {
    std::string method;
    std::uint64_t seed = 0;
    double beta = 0.0;
    std::size_t task = 0;
    std::size_t round = 0;
    double global_test_acc = 0.0;
    std::vector<double> per_task_acc;
    double train_loss = 0.0;
    std::vector<std::size_t> buffer_class_histogram;
    std::vector<int> task_classes;  // classes trained in this task
};

struct RunSinks {
    std::function<void(const MetricsRecord&)> on_metrics;
    std::function<void(const std::string& method, std::uint64_t seed,
                       const federation::ReplayUpdateReport&)>
        on_selection;
};

struct RunResult {
    double final_top1 = 0.0;
    // buffer histogram right after each task's replay update; metrics records
    // only ever show the buffer as of the previous task boundary
    std::vector<std::vector<std::size_t>> post_update_histograms;
};

// One full federated class-incremental run for a single (method, seed).
RunResult run_single(const config::ExperimentConfig& cfg, federation::Method method,
                     std::uint64_t seed, const RunSinks& sinks);

struct Overrides {
    std::vector<std::uint64_t> seeds;  // empty = keep config
    std::string method;                // empty = keep config
    double beta = -1.0;                // negative = keep config
};

// Writes metrics.jsonl, selection.jsonl and summary.json into out_dir.
// Returns a process exit code; partial metrics are flushed line by line.
int run_experiment_cfg(const config::ExperimentConfig& cfg, const std::string& out_dir);
int run_experiment(const std::string& config_path, const std::string& out_dir,
                   const Overrides& overrides);

struct BalanceRow {
    std::string method;
    std::uint64_t seed = 0;
    std::size_t task = 0;
    std::size_t min_count = 0;
    std::size_t max_count = 0;
    double stddev = 0.0;
    std::vector<int> missing_classes;  // old classes with zero exemplars
};

// Statistics over old-class buffer counts at each task, read from a metrics
// file. Old classes are those introduced before the record's task.
std::vector<BalanceRow> report_buffer_balance(const std::string& metrics_path);
std::string balance_to_json(const std::vector<BalanceRow>& rows);

}  // namespace fedcbdr::runner
