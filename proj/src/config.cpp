#include "fedcbdr/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace fedcbdr::config {

namespace {

using nlohmann::ordered_json;

const std::set<std::string> kMethods = {"Finetune", "LocalRandomReplay", "FedCBDR"};

double positive(const ordered_json& j, const char* field, double fallback) {
    if (!j.contains(field)) return fallback;
    if (!j.at(field).is_number()) throw ConfigError(std::string("field \"") + field + "\" must be a number");
    const double v = j.at(field).get<double>();
    if (!(v > 0.0)) throw ConfigError(std::string("field \"") + field + "\" must be positive");
    return v;
}

std::size_t positive_count(const ordered_json& j, const char* field, std::size_t fallback) {
    if (!j.contains(field)) return fallback;
    if (!j.at(field).is_number_unsigned())
        throw ConfigError(std::string("field \"") + field + "\" must be a nonnegative integer");
    const std::size_t v = j.at(field).get<std::size_t>();
    if (v == 0) throw ConfigError(std::string("field \"") + field + "\" must be positive");
    return v;
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
    ordered_json j;
    try {
        j = ordered_json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");

    for (const char* field : {"dataset", "num_tasks", "beta"})
        if (!j.contains(field))
            throw ConfigError(std::string("missing required field \"") + field + "\"");

    ExperimentConfig cfg;
    const ordered_json& ds = j.at("dataset");
    if (!ds.is_object()) throw ConfigError("field \"dataset\" must be an object");
    cfg.dataset.kind = ds.value("kind", cfg.dataset.kind);
    if (cfg.dataset.kind != "synthetic" && cfg.dataset.kind != "idx")
        throw ConfigError("field \"dataset.kind\" must be \"synthetic\" or \"idx\"");
    cfg.dataset.num_classes = positive_count(ds, "num_classes", cfg.dataset.num_classes);
    cfg.dataset.per_class = positive_count(ds, "per_class", cfg.dataset.per_class);
    cfg.dataset.feature_dim = positive_count(ds, "feature_dim", cfg.dataset.feature_dim);
    cfg.dataset.spread = positive(ds, "spread", cfg.dataset.spread);
    cfg.dataset.train_images = ds.value("train_images", "");
    cfg.dataset.train_labels = ds.value("train_labels", "");
    cfg.dataset.test_images = ds.value("test_images", "");
    cfg.dataset.test_labels = ds.value("test_labels", "");
    if (cfg.dataset.kind == "idx")
        for (const auto& [name, path] : {std::pair<const char*, const std::string&>
                 {"dataset.train_images", cfg.dataset.train_images},
                 {"dataset.train_labels", cfg.dataset.train_labels},
                 {"dataset.test_images", cfg.dataset.test_images},
                 {"dataset.test_labels", cfg.dataset.test_labels}})
            if (path.empty())
                throw ConfigError(std::string("missing required field \"") + name +
                                  "\" for idx datasets");

    cfg.num_tasks = positive_count(j, "num_tasks", 0);
    cfg.beta = positive(j, "beta", 0.0);
    cfg.num_clients = positive_count(j, "num_clients", cfg.num_clients);
    if (cfg.num_clients < 2) throw ConfigError("field \"num_clients\" must be at least 2");
    cfg.local_epochs = positive_count(j, "local_epochs", cfg.local_epochs);
    cfg.batch_size = positive_count(j, "batch_size", cfg.batch_size);
    cfg.rounds_per_task = positive_count(j, "rounds_per_task", cfg.rounds_per_task);
    cfg.lr = positive(j, "lr", cfg.lr);
    cfg.weight_decay = j.contains("weight_decay") ? j.at("weight_decay").get<double>()
                                                  : cfg.weight_decay;
    if (cfg.weight_decay < 0.0) throw ConfigError("field \"weight_decay\" must be nonnegative");

    if (j.contains("tts")) {
        const ordered_json& t = j.at("tts");
        if (!t.is_object()) throw ConfigError("field \"tts\" must be an object");
        cfg.tts.tau_old = positive(t, "tau_old", cfg.tts.tau_old);
        cfg.tts.tau_new = positive(t, "tau_new", cfg.tts.tau_new);
        cfg.tts.w_old = positive(t, "omega_old", cfg.tts.w_old);
        cfg.tts.w_new = positive(t, "omega_new", cfg.tts.w_new);
    }

    cfg.replay_per_task = positive_count(j, "replay_per_task", cfg.replay_per_task);
    cfg.buffer_budget = positive_count(j, "buffer_budget", cfg.buffer_budget);

    if (j.contains("hidden_dims")) {
        cfg.hidden_dims.clear();
        for (const auto& v : j.at("hidden_dims")) {
            if (!v.is_number_unsigned() || v.get<std::size_t>() == 0)
                throw ConfigError("field \"hidden_dims\" entries must be positive integers");
            cfg.hidden_dims.push_back(v.get<std::size_t>());
        }
        if (cfg.hidden_dims.empty()) throw ConfigError("field \"hidden_dims\" must be non-empty");
    }
    if (j.contains("seeds")) {
        cfg.seeds.clear();
        for (const auto& v : j.at("seeds")) {
            if (!v.is_number_unsigned())
                throw ConfigError("field \"seeds\" entries must be nonnegative integers");
            cfg.seeds.push_back(v.get<std::uint64_t>());
        }
        if (cfg.seeds.empty()) throw ConfigError("field \"seeds\" must be non-empty");
    }

    if (j.contains("method") && j.contains("methods"))
        throw ConfigError("give either \"method\" or \"methods\", not both");
    if (j.contains("method")) {
        cfg.methods = {j.at("method").get<std::string>()};
    } else if (j.contains("methods")) {
        cfg.methods.clear();
        for (const auto& v : j.at("methods")) cfg.methods.push_back(v.get<std::string>());
        if (cfg.methods.empty()) throw ConfigError("field \"methods\" must be non-empty");
    }
    for (const std::string& m : cfg.methods)
        if (kMethods.find(m) == kMethods.end())
            throw ConfigError("unknown method \"" + m +
                              "\" (expected Finetune, LocalRandomReplay or FedCBDR)");

    cfg.mask_kind = j.value("mask_kind", cfg.mask_kind);
    if (cfg.mask_kind != "permutation" && cfg.mask_kind != "general")
        throw ConfigError("field \"mask_kind\" must be \"permutation\" or \"general\"");
    cfg.use_leverage_weights = j.value("use_leverage_weights", cfg.use_leverage_weights);
    cfg.truncate_zero_singular = j.value("truncate_zero_singular", cfg.truncate_zero_singular);

    // idx class counts are only known once the label files are read
    if (cfg.dataset.kind == "synthetic" && cfg.dataset.num_classes % cfg.num_tasks != 0)
        throw ConfigError("field \"num_tasks\" must divide \"dataset.num_classes\"");
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
    ordered_json j;
    j["dataset"] = {{"kind", cfg.dataset.kind},
                    {"num_classes", cfg.dataset.num_classes},
                    {"per_class", cfg.dataset.per_class},
                    {"feature_dim", cfg.dataset.feature_dim},
                    {"spread", cfg.dataset.spread},
                    {"train_images", cfg.dataset.train_images},
                    {"train_labels", cfg.dataset.train_labels},
                    {"test_images", cfg.dataset.test_images},
                    {"test_labels", cfg.dataset.test_labels}};
    j["num_tasks"] = cfg.num_tasks;
    j["beta"] = cfg.beta;
    j["num_clients"] = cfg.num_clients;
    j["local_epochs"] = cfg.local_epochs;
    j["batch_size"] = cfg.batch_size;
    j["rounds_per_task"] = cfg.rounds_per_task;
    j["lr"] = cfg.lr;
    j["weight_decay"] = cfg.weight_decay;
    j["tts"] = {{"tau_old", cfg.tts.tau_old},
                {"tau_new", cfg.tts.tau_new},
                {"omega_old", cfg.tts.w_old},
                {"omega_new", cfg.tts.w_new}};
    j["replay_per_task"] = cfg.replay_per_task;
    j["buffer_budget"] = cfg.buffer_budget;
    j["hidden_dims"] = cfg.hidden_dims;
    j["seeds"] = cfg.seeds;
    j["methods"] = cfg.methods;
    j["mask_kind"] = cfg.mask_kind;
    j["use_leverage_weights"] = cfg.use_leverage_weights;
    j["truncate_zero_singular"] = cfg.truncate_zero_singular;
    return j.dump(2) + "\n";
}

}  // namespace fedcbdr::config
