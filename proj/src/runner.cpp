#include "fedcbdr/runner.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "fedcbdr/rng.hpp"
#include "json.hpp"

namespace fedcbdr::runner {

using nlohmann::ordered_json;

EvalResult evaluate(const nn::Model& model, const data::Dataset& test,
                    const data::TaskSplit& tasks, std::size_t tasks_seen) {
    if (tasks_seen == 0 || tasks_seen > tasks.task_classes.size())
        throw std::invalid_argument("evaluate: tasks_seen out of range");

    std::map<int, std::size_t> class_to_task;
    for (std::size_t t = 0; t < tasks_seen; ++t)
        for (int c : tasks.task_classes[t]) class_to_task[c] = t;

    std::vector<std::size_t> correct(tasks_seen, 0), total(tasks_seen, 0);
    for (const auto& sample : test.samples) {
        auto it = class_to_task.find(sample.label);
        if (it == class_to_task.end()) continue;
        const auto logits = nn::forward(model, sample.features).logits.concat();
        const std::size_t arg =
            std::max_element(logits.begin(), logits.end()) - logits.begin();
        ++total[it->second];
        if (model.class_order[arg] == sample.label) ++correct[it->second];
    }

    EvalResult result;
    std::size_t pooled_correct = 0, pooled_total = 0;
    for (std::size_t t = 0; t < tasks_seen; ++t) {
        if (total[t] == 0)
            throw std::invalid_argument("evaluate: no test samples for a seen task");
        result.per_task.push_back(double(correct[t]) / double(total[t]));
        pooled_correct += correct[t];
        pooled_total += total[t];
    }
    result.top1 = double(pooled_correct) / double(pooled_total);
    return result;
}

namespace {

std::pair<data::Dataset, data::Dataset> load_datasets(const config::ExperimentConfig& cfg,
                                                      std::uint64_t seed) {
    const auto& ds = cfg.dataset;
    if (ds.kind == "synthetic")
        return data::generate_synthetic(ds.num_classes, ds.per_class, ds.feature_dim, ds.spread,
                                        derive_seed(seed, {seed_tag::data}));
    auto train = data::load_idx(ds.train_images, ds.train_labels);
    auto test = data::load_idx(ds.test_images, ds.test_labels);
    test.split = data::Split::Test;
    const std::size_t num_classes = std::max(train.num_classes, test.num_classes);
    train.num_classes = test.num_classes = num_classes;
    if (train.feature_dim() != test.feature_dim())
        throw config::ConfigError("idx train and test feature dimensions differ");
    if (num_classes % cfg.num_tasks != 0)
        throw config::ConfigError("\"num_tasks\" must divide the idx dataset's class count");
    return {std::move(train), std::move(test)};
}

}  // namespace

RunResult run_single(const config::ExperimentConfig& cfg, federation::Method method,
                     std::uint64_t seed, const RunSinks& sinks) {
    auto [train, test] = load_datasets(cfg, seed);
    const std::size_t num_classes = train.num_classes;
    const auto tasks =
        data::split_tasks(num_classes, cfg.num_tasks, derive_seed(seed, {seed_tag::tasks}));

    std::vector<federation::ClientState> clients(cfg.num_clients);
    for (std::size_t k = 0; k < clients.size(); ++k) {
        clients[k].client_id = k;
        clients[k].rng_seed = derive_seed(seed, {seed_tag::train, k});
    }

    nn::Model model = nn::init_model(train.feature_dim(), cfg.hidden_dims, tasks.task_classes[0],
                                     derive_seed(seed, {seed_tag::model}));
    const std::string method_str = federation::method_name(method);

    RunResult result;
    for (std::size_t t = 0; t < cfg.num_tasks; ++t) {
        if (t > 0)
            model = nn::expand_head(model, tasks.task_classes[t],
                                    derive_seed(seed, {seed_tag::head, t}));

        const auto partition = data::dirichlet_partition(
            train, tasks.task_classes[t], cfg.num_clients, cfg.beta,
            derive_seed(seed, {seed_tag::partition, t}));
        for (auto& client : clients) {
            client.task_shards[t] = partition.client_indices[client.client_id];
            client.current_task = t;
            client.current_task_data = partition.client_indices[client.client_id];
        }

        model = federation::run_task(
            t, std::move(model), clients, train, cfg, seed,
            [&](const federation::RoundReport& report, const nn::Model& global) {
                if (!sinks.on_metrics) return;
                const auto eval = evaluate(global, test, tasks, t + 1);
                MetricsRecord rec;
                rec.method = method_str;
                rec.seed = seed;
                rec.beta = cfg.beta;
                rec.task = t;
                rec.round = report.round;
                rec.global_test_acc = eval.top1;
                rec.per_task_acc = eval.per_task;
                rec.train_loss = report.mean_train_loss;
                rec.buffer_class_histogram = federation::buffer_class_histogram(clients, num_classes);
                rec.task_classes = tasks.task_classes[t];
                sinks.on_metrics(rec);
            });

        const auto report =
            federation::end_of_task_replay_update(t, model, clients, train, method, cfg, seed);
        if (method != federation::Method::Finetune && sinks.on_selection)
            sinks.on_selection(method_str, seed, report);
        result.post_update_histograms.push_back(
            federation::buffer_class_histogram(clients, num_classes));
    }

    result.final_top1 = evaluate(model, test, tasks, cfg.num_tasks).top1;
    return result;
}

namespace {

ordered_json metrics_to_json(const MetricsRecord& rec) {
    ordered_json j;
    j["method"] = rec.method;
    j["seed"] = rec.seed;
    j["beta"] = rec.beta;
    j["task"] = rec.task;
    j["round"] = rec.round;
    j["global_test_acc"] = rec.global_test_acc;
    j["per_task_acc"] = rec.per_task_acc;
    j["train_loss"] = rec.train_loss;
    j["buffer_class_histogram"] = rec.buffer_class_histogram;
    j["task_classes"] = rec.task_classes;
    return j;
}

ordered_json selection_to_json(const std::string& method, std::uint64_t seed,
                               const federation::ReplayUpdateReport& report) {
    ordered_json j;
    j["method"] = method;
    j["seed"] = seed;
    j["task"] = report.task_id;
    j["fallback"] = report.fallback;
    ordered_json entries = ordered_json::array();
    for (const auto& e : report.selected) {
        ordered_json row;
        row["client_id"] = e.client_id;
        row["local_index"] = e.local_index;
        row["class_id"] = e.class_id;
        row["score"] = e.score;
        row["probability"] = e.probability;
        row["weight"] = e.weight;
        entries.push_back(std::move(row));
    }
    j["entries"] = std::move(entries);
    return j;
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / double(v.size());
}

double std_of(const std::vector<double>& v) {
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return v.empty() ? 0.0 : std::sqrt(s / double(v.size()));
}

}  // namespace

int run_experiment_cfg(const config::ExperimentConfig& cfg, const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) {
        std::cerr << "error: cannot create output directory " << out_dir << ": " << ec.message()
                  << "\n";
        return 1;
    }

    std::ofstream metrics_out(fs::path(out_dir) / "metrics.jsonl");
    std::ofstream selection_out(fs::path(out_dir) / "selection.jsonl");
    if (!metrics_out || !selection_out) {
        std::cerr << "error: cannot open output files in " << out_dir << "\n";
        return 1;
    }

    RunSinks sinks;
    sinks.on_metrics = [&](const MetricsRecord& rec) {
        metrics_out << metrics_to_json(rec).dump() << "\n" << std::flush;
    };
    sinks.on_selection = [&](const std::string& method, std::uint64_t seed,
                             const federation::ReplayUpdateReport& report) {
        selection_out << selection_to_json(method, seed, report).dump() << "\n" << std::flush;
    };

    ordered_json summary;
    summary["beta"] = cfg.beta;
    summary["num_tasks"] = cfg.num_tasks;
    summary["seeds"] = cfg.seeds;
    summary["methods"] = ordered_json::object();

    try {
        for (const auto& name : cfg.methods) {
            const auto method = federation::method_from_string(name);
            std::vector<double> finals;
            for (std::uint64_t seed : cfg.seeds) {
                const auto result = run_single(cfg, method, seed, sinks);
                finals.push_back(result.final_top1);
            }
            ordered_json entry;
            entry["final_top1_per_seed"] = finals;
            entry["final_top1_mean"] = mean_of(finals);
            entry["final_top1_std"] = std_of(finals);
            summary["methods"][name] = std::move(entry);
        }
    } catch (const std::exception& ex) {
        // metrics written so far are already on disk, line by line
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }

    std::ofstream summary_out(fs::path(out_dir) / "summary.json");
    summary_out << summary.dump(2) << "\n";
    return summary_out ? 0 : 1;
}

int run_experiment(const std::string& config_path, const std::string& out_dir,
                   const Overrides& overrides) {
    config::ExperimentConfig cfg;
    try {
        cfg = config::load_config(config_path);
        if (!overrides.method.empty()) {
            federation::method_from_string(overrides.method);  // validate early
            cfg.methods = {overrides.method};
        }
        if (!overrides.seeds.empty()) cfg.seeds = overrides.seeds;
        if (overrides.beta >= 0.0) {
            if (overrides.beta == 0.0)
                throw config::ConfigError("field \"beta\" must be positive");
            cfg.beta = overrides.beta;
        }
    } catch (const std::exception& ex) {
        std::cerr << "config error: " << ex.what() << "\n";
        return 2;
    }
    return run_experiment_cfg(cfg, out_dir);
}

std::vector<BalanceRow> report_buffer_balance(const std::string& metrics_path) {
    std::ifstream in(metrics_path);
    if (!in) throw std::runtime_error("cannot open metrics file " + metrics_path);

    struct TaskInfo {
        std::size_t last_round = 0;
        std::vector<std::size_t> histogram;
        std::vector<int> classes;
        bool seen = false;
    };
    // (method, seed) -> task -> latest-round record for that task
    std::map<std::pair<std::string, std::uint64_t>, std::map<std::size_t, TaskInfo>> groups;

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const ordered_json::parse_error& ex) {
            throw std::runtime_error(metrics_path + ":" + std::to_string(line_no) +
                                     ": not valid JSON: " + ex.what());
        }
        for (const char* field :
             {"method", "seed", "task", "round", "buffer_class_histogram", "task_classes"})
            if (!j.contains(field))
                throw std::runtime_error(metrics_path + ":" + std::to_string(line_no) +
                                         ": missing field \"" + field + "\"");

        auto& info = groups[{j["method"].get<std::string>(), j["seed"].get<std::uint64_t>()}]
                           [j["task"].get<std::size_t>()];
        const auto round = j["round"].get<std::size_t>();
        if (!info.seen || round >= info.last_round) {
            info.seen = true;
            info.last_round = round;
            info.histogram = j["buffer_class_histogram"].get<std::vector<std::size_t>>();
            info.classes = j["task_classes"].get<std::vector<int>>();
        }
    }

    std::vector<BalanceRow> rows;
    for (const auto& [key, tasks] : groups) {
        std::set<int> old_classes;
        for (const auto& [task, info] : tasks) {
            BalanceRow row;
            row.method = key.first;
            row.seed = key.second;
            row.task = task;
            if (!old_classes.empty()) {
                std::vector<double> counts;
                for (int c : old_classes) {
                    const std::size_t n =
                        c >= 0 && std::size_t(c) < info.histogram.size() ? info.histogram[c] : 0;
                    counts.push_back(double(n));
                    if (n == 0) row.missing_classes.push_back(c);
                }
                row.min_count = std::size_t(*std::min_element(counts.begin(), counts.end()));
                row.max_count = std::size_t(*std::max_element(counts.begin(), counts.end()));
                row.stddev = std_of(counts);
            }
            rows.push_back(std::move(row));
            old_classes.insert(info.classes.begin(), info.classes.end());
        }
    }
    return rows;
}

std::string balance_to_json(const std::vector<BalanceRow>& rows) {
    ordered_json out = ordered_json::array();
    for (const auto& row : rows) {
        ordered_json j;
        j["method"] = row.method;
        j["seed"] = row.seed;
        j["task"] = row.task;
        j["min_count"] = row.min_count;
        j["max_count"] = row.max_count;
        j["stddev"] = row.stddev;
        j["missing_classes"] = row.missing_classes;
        out.push_back(std::move(j));
    }
    return out.dump(2) + "\n";
}

}  // namespace fedcbdr::runner
