#include "fedcbdr/federation.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iostream>
#include <set>

#include "fedcbdr/gdr.hpp"
#include "fedcbdr/rng.hpp"

namespace fedcbdr::federation {

Method method_from_string(const std::string& name) {
    if (name == "Finetune") return Method::Finetune;
    if (name == "LocalRandomReplay") return Method::LocalRandomReplay;
    if (name == "FedCBDR") return Method::FedCBDR;
    throw std::invalid_argument("unknown method \"" + name + "\"");
}

std::string method_name(Method m) {
    switch (m) {
        case Method::Finetune: return "Finetune";
        case Method::LocalRandomReplay: return "LocalRandomReplay";
        case Method::FedCBDR: return "FedCBDR";
    }
    throw std::logic_error("method_name: bad enum");
}

std::size_t ClientState::buffer_size() const {
    std::size_t n = 0;
    for (const auto& [task, entries] : replay_buffer) n += entries.size();
    return n;
}

namespace {

void hash_bytes(std::uint64_t& h, const void* data, std::size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;  // FNV-1a
    }
}

void hash_doubles(std::uint64_t& h, const std::vector<double>& v) {
    hash_bytes(h, v.data(), v.size() * sizeof(double));
}

struct TrainItem {
    const std::vector<double>* x = nullptr;
    std::size_t label_pos = 0;
    char is_old = 0;
    double weight = 1.0;
};

std::map<int, std::size_t> position_map(const nn::Model& model) {
    std::map<int, std::size_t> pos;
    for (std::size_t i = 0; i < model.class_order.size(); ++i) pos[model.class_order[i]] = i;
    return pos;
}

}  // namespace

std::uint64_t model_checksum(const nn::Model& model) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const nn::Layer& layer : model.hidden) {
        hash_doubles(h, layer.w.data());
        hash_doubles(h, layer.b);
    }
    hash_doubles(h, model.head.w.data());
    hash_doubles(h, model.head.b);
    hash_bytes(h, model.class_order.data(), model.class_order.size() * sizeof(int));
    hash_bytes(h, &model.old_boundary, sizeof model.old_boundary);
    return h;
}

LocalTrainResult local_train(const ClientState& client, const data::Dataset& train, Stage stage,
                             const config::ExperimentConfig& cfg, std::uint64_t seed) {
    const std::map<int, std::size_t> pos = position_map(client.model);
    auto lookup = [&](std::size_t global_idx) {
        const int label = train.samples[global_idx].label;
        auto it = pos.find(label);
        if (it == pos.end())
            throw std::runtime_error("local_train: head does not cover class " +
                                     std::to_string(label));
        return it->second;
    };

    std::vector<TrainItem> items;
    for (std::size_t g : client.current_task_data)
        items.push_back({&train.samples[g].features, lookup(g), 0, 1.0});
    for (const auto& [task, entries] : client.replay_buffer) {
        const std::vector<std::size_t>& shard = client.task_shards.at(task);
        for (const BufferEntry& e : entries) {
            const std::size_t g = shard.at(e.local_index);
            items.push_back({&train.samples[g].features, lookup(g), 1, e.weight});
        }
    }

    LocalTrainResult out;
    out.model = client.model;
    out.count = items.size();
    if (items.empty()) {
        std::cerr << "local_train: client " << client.client_id << " has no data, skipping\n";
        return out;
    }

    const nn::TtsParams params = stage == Stage::Initial ? nn::TtsParams{1.0, 1.0, 1.0, 1.0}
                                                         : cfg.tts;
    Rng rng(seed);
    std::vector<std::size_t> order(items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            std::vector<const std::vector<double>*> xs;
            std::vector<std::size_t> labels;
            std::vector<char> is_old;
            std::vector<double> weights;
            bool any_old = false;
            for (std::size_t i = start; i < stop; ++i) {
                const TrainItem& it = items[order[i]];
                xs.push_back(it.x);
                labels.push_back(it.label_pos);
                is_old.push_back(it.is_old);
                weights.push_back(it.weight);
                if (it.is_old) any_old = true;
            }
            const std::vector<double>* w =
                cfg.use_leverage_weights && any_old ? &weights : nullptr;
            nn::BatchGrad bg = nn::batch_gradients(out.model, xs, labels, is_old, params, w);
            out.model = nn::sgd_step(out.model, bg.grad, cfg.lr, cfg.weight_decay);
            loss_sum += bg.loss;
            ++batches;
        }
    }
    out.mean_loss = batches == 0 ? 0.0 : loss_sum / static_cast<double>(batches);
    return out;
}

nn::Model fedavg(const std::vector<nn::Model>& models, const std::vector<std::size_t>& counts) {
    if (models.empty()) throw std::invalid_argument("fedavg: no models");
    if (counts.size() != models.size()) throw std::invalid_argument("fedavg: count mismatch");
    const nn::Model& ref = models.front();
    double total = 0.0;
    for (std::size_t c : counts) {
        if (c == 0) throw std::invalid_argument("fedavg: zero sample count");
        total += static_cast<double>(c);
    }
    for (const nn::Model& m : models) {
        if (m.hidden.size() != ref.hidden.size() || m.class_order != ref.class_order ||
            m.old_boundary != ref.old_boundary)
            throw std::invalid_argument("fedavg: architecture mismatch");
        for (std::size_t l = 0; l < ref.hidden.size(); ++l)
            if (m.hidden[l].w.rows() != ref.hidden[l].w.rows() ||
                m.hidden[l].w.cols() != ref.hidden[l].w.cols())
                throw std::invalid_argument("fedavg: architecture mismatch");
        if (m.head.w.rows() != ref.head.w.rows() || m.head.w.cols() != ref.head.w.cols())
            throw std::invalid_argument("fedavg: architecture mismatch");
    }

    nn::Model avg = ref;
    auto blend = [&](std::vector<double>& dst, std::size_t layer, bool head, bool bias) {
        std::fill(dst.begin(), dst.end(), 0.0);
        for (std::size_t k = 0; k < models.size(); ++k) {
            const double w = static_cast<double>(counts[k]) / total;
            const nn::Layer& src = head ? models[k].head : models[k].hidden[layer];
            const std::vector<double>& v = bias ? src.b : src.w.data();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * v[i];
        }
    };
    for (std::size_t l = 0; l < avg.hidden.size(); ++l) {
        blend(avg.hidden[l].w.data(), l, false, false);
        blend(avg.hidden[l].b, l, false, true);
    }
    blend(avg.head.w.data(), 0, true, false);
    blend(avg.head.b, 0, true, true);
    return avg;
}

nn::Model run_task(std::size_t task_id, nn::Model global, std::vector<ClientState>& clients,
                   const data::Dataset& train, const config::ExperimentConfig& cfg,
                   std::uint64_t run_seed, const RoundCallback& on_round) {
    if (clients.empty()) throw std::invalid_argument("run_task: no clients");
    const Stage stage = task_id == 0 ? Stage::Initial : Stage::Incremental;

    for (std::size_t round = 0; round < cfg.rounds_per_task; ++round) {
        std::vector<nn::Model> trained;
        std::vector<std::size_t> counts;
        RoundReport report;
        report.task_id = task_id;
        report.round = round;
        double loss_weighted = 0.0;
        for (ClientState& client : clients) {
            client.model = global;  // broadcast
            const std::uint64_t seed = derive_seed(
                run_seed, {seed_tag::train, client.client_id, task_id, round});
            LocalTrainResult res = local_train(client, train, stage, cfg, seed);
            client.model = res.model;
            report.client_counts.push_back(res.count);
            if (res.count > 0) {
                trained.push_back(std::move(res.model));
                counts.push_back(res.count);
                loss_weighted += res.mean_loss * static_cast<double>(res.count);
            }
        }
        if (trained.empty()) throw std::runtime_error("run_task: every client was empty");
        global = fedavg(trained, counts);

        double count_total = 0.0;
        for (std::size_t c : counts) count_total += static_cast<double>(c);
        report.mean_train_loss = loss_weighted / count_total;
        report.model_checksum = model_checksum(global);
        if (on_round) on_round(report, global);
    }
    return global;
}

namespace {

// Budget enforcement: cap every stored task at floor(M / #stored tasks).
// FedCBDR keeps its highest-leverage entries, the baseline keeps a seeded
// random subset.
void shrink_buffers(std::vector<ClientState>& clients, Method method,
                    const config::ExperimentConfig& cfg, std::uint64_t run_seed) {
    if (total_buffer_size(clients) <= cfg.buffer_budget) return;
    std::set<std::size_t> tasks;
    for (const ClientState& c : clients)
        for (const auto& [task, entries] : c.replay_buffer)
            if (!entries.empty()) tasks.insert(task);
    if (tasks.empty()) return;
    const std::size_t allowed = cfg.buffer_budget / tasks.size();

    for (std::size_t task : tasks) {
        struct Ref {
            std::size_t client_pos;
            std::size_t entry_pos;
            const BufferEntry* entry;
        };
        std::vector<Ref> refs;
        for (std::size_t k = 0; k < clients.size(); ++k) {
            auto it = clients[k].replay_buffer.find(task);
            if (it == clients[k].replay_buffer.end()) continue;
            for (std::size_t e = 0; e < it->second.size(); ++e)
                refs.push_back({k, e, &it->second[e]});
        }
        if (refs.size() <= allowed) continue;

        if (method == Method::FedCBDR) {
            std::sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) {
                if (a.entry->score != b.entry->score) return a.entry->score > b.entry->score;
                if (a.client_pos != b.client_pos) return a.client_pos < b.client_pos;
                return a.entry->local_index < b.entry->local_index;
            });
        } else {
            Rng rng(derive_seed(run_seed, {seed_tag::shrink, task}));
            rng.shuffle(refs);
        }
        refs.resize(allowed);

        std::map<std::size_t, std::set<std::size_t>> keep;  // client -> entry positions
        for (const Ref& r : refs) keep[r.client_pos].insert(r.entry_pos);
        for (std::size_t k = 0; k < clients.size(); ++k) {
            auto it = clients[k].replay_buffer.find(task);
            if (it == clients[k].replay_buffer.end()) continue;
            std::vector<BufferEntry> kept;
            for (std::size_t e = 0; e < it->second.size(); ++e)
                if (keep[k].count(e)) kept.push_back(it->second[e]);
            it->second = std::move(kept);
        }
    }
}

ReplayUpdateReport local_random_replay(std::size_t task_id, std::vector<ClientState>& clients,
                                       const data::Dataset& train,
                                       const config::ExperimentConfig& cfg,
                                       std::uint64_t run_seed) {
    ReplayUpdateReport report;
    report.task_id = task_id;
    const std::size_t per_client =
        (cfg.replay_per_task + clients.size() - 1) / clients.size();  // ceil(N / K)
    for (ClientState& client : clients) {
        const std::vector<std::size_t>& shard = client.task_shards.at(task_id);
        if (shard.empty()) continue;
        std::vector<std::size_t> idx(shard.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        Rng rng(derive_seed(run_seed, {seed_tag::local_replay, task_id, client.client_id}));
        rng.shuffle(idx);
        idx.resize(std::min(per_client, idx.size()));
        std::vector<BufferEntry> entries;
        for (std::size_t i : idx) {
            BufferEntry e;
            e.local_index = i;
            e.class_id = train.samples[shard[i]].label;
            entries.push_back(e);
            report.selected.push_back({client.client_id, i, e.class_id, 0.0, 0.0, 1.0});
        }
        client.replay_buffer[task_id] = std::move(entries);
    }
    return report;
}

}  // namespace

ReplayUpdateReport end_of_task_replay_update(std::size_t task_id, const nn::Model& global,
                                             std::vector<ClientState>& clients,
                                             const data::Dataset& train, Method method,
                                             const config::ExperimentConfig& cfg,
                                             std::uint64_t run_seed) {
    ReplayUpdateReport report;
    report.task_id = task_id;
    if (method == Method::Finetune) return report;

    if (method == Method::FedCBDR) {
        try {
            const std::size_t d = global.feature_dim();
            const linalg::OrthogonalMatrix q = linalg::random_orthogonal(
                d, derive_seed(run_seed, {seed_tag::gdr_q, task_id}),
                linalg::OrthoKind::GeneralOrthogonal);
            const linalg::OrthoKind p_kind = cfg.mask_kind == "general"
                                                 ? linalg::OrthoKind::GeneralOrthogonal
                                                 : linalg::OrthoKind::Permutation;

            std::vector<gdr::MaskedBlock> blocks;
            std::map<std::size_t, std::vector<std::size_t>> row_maps;
            for (const ClientState& client : clients) {
                const std::vector<std::size_t>& shard = client.task_shards.at(task_id);
                if (shard.empty()) continue;
                linalg::Matrix features(shard.size(), d);
                std::vector<int> labels(shard.size());
                for (std::size_t i = 0; i < shard.size(); ++i) {
                    const std::vector<double> f =
                        nn::forward(global, train.samples[shard[i]].features).features;
                    for (std::size_t c = 0; c < d; ++c) features(i, c) = f[c];
                    labels[i] = train.samples[shard[i]].label;
                }
                blocks.push_back(gdr::mask_local_features(
                    features, labels, client.client_id, task_id,
                    derive_seed(run_seed, {seed_tag::gdr_p, task_id, client.client_id}), q,
                    p_kind));
                row_maps[client.client_id] = blocks.back().row_map;
                // a non-permutation mask leaves no row map, so selections
                // could never be decoded back to this client's samples
                if (blocks.back().row_map.empty())
                    throw gdr::DecodeError("client " + std::to_string(client.client_id) +
                                           " uploaded an undecodable mask");
            }

            auto [factor, table] = gdr::aggregate_and_factor(blocks);
            gdr::LeverageProfile profile =
                gdr::leverage_scores(factor, table, cfg.truncate_zero_singular);
            profile = gdr::build_distribution(profile, gdr::NormalizationMode::Global);
            gdr::ReplaySelection selection = gdr::stratified_sample(
                profile, cfg.replay_per_task,
                derive_seed(run_seed, {seed_tag::gdr_sample, task_id}));
            std::map<std::size_t, std::vector<std::size_t>> decoded =
                gdr::decode_selection(selection, row_maps);

            std::map<std::size_t, std::size_t> cursor;
            std::map<std::size_t, std::vector<BufferEntry>> per_client;
            for (const gdr::SelectedExemplar& e : selection.entries) {
                const std::size_t raw = decoded.at(e.client_id).at(cursor[e.client_id]++);
                BufferEntry entry;
                entry.local_index = raw;
                entry.class_id = e.class_id;
                entry.weight = e.weight;
                entry.score = e.score;
                per_client[e.client_id].push_back(entry);
                report.selected.push_back(
                    {e.client_id, raw, e.class_id, e.score, e.probability, e.weight});
            }
            for (ClientState& client : clients)
                client.replay_buffer[task_id] = std::move(per_client[client.client_id]);
        } catch (const gdr::DegenerateFeatures& e) {
            std::cerr << "replay update: " << e.what() << "; falling back to local random replay\n";
            report = local_random_replay(task_id, clients, train, cfg, run_seed);
            report.fallback = true;
        } catch (const gdr::DecodeError& e) {
            std::cerr << "replay update: " << e.what() << "; falling back to local random replay\n";
            report = local_random_replay(task_id, clients, train, cfg, run_seed);
            report.fallback = true;
        }
    } else {
        report = local_random_replay(task_id, clients, train, cfg, run_seed);
    }

    shrink_buffers(clients, method, cfg, run_seed);
    return report;
}

std::vector<std::size_t> buffer_class_histogram(const std::vector<ClientState>& clients,
                                                std::size_t num_classes) {
    std::vector<std::size_t> hist(num_classes, 0);
    for (const ClientState& client : clients)
        for (const auto& [task, entries] : client.replay_buffer)
            for (const BufferEntry& e : entries)
                if (e.class_id >= 0 && static_cast<std::size_t>(e.class_id) < num_classes)
                    ++hist[static_cast<std::size_t>(e.class_id)];
    return hist;
}

std::size_t total_buffer_size(const std::vector<ClientState>& clients) {
    std::size_t n = 0;
    for (const ClientState& client : clients) n += client.buffer_size();
    return n;
}

}  // namespace fedcbdr::federation
