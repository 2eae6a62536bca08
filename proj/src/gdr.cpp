#include "fedcbdr/gdr.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>

#include "fedcbdr/rng.hpp"

namespace fedcbdr::gdr {

MaskedBlock mask_local_features(const linalg::Matrix& features, const std::vector<int>& labels,
                                std::size_t client_id, std::size_t task_id, std::uint64_t p_seed,
                                const linalg::OrthogonalMatrix& q, linalg::OrthoKind kind) {
    if (features.rows() == 0 || features.cols() == 0)
        throw std::invalid_argument("mask_local_features: empty feature matrix");
    if (labels.size() != features.rows())
        throw std::invalid_argument("mask_local_features: label count mismatch");
    if (q.size() != features.cols())
        throw std::invalid_argument("mask_local_features: Q dimension mismatch");

    const linalg::OrthogonalMatrix p = linalg::random_orthogonal(features.rows(), p_seed, kind);
    MaskedBlock block;
    block.client_id = client_id;
    block.task_id = task_id;
    block.masked = linalg::apply_mask(p, features, q);
    if (kind == linalg::OrthoKind::Permutation) {
        block.row_map = p.perm;  // masked row i came from local row perm[i]
        block.row_classes.resize(features.rows());
        for (std::size_t i = 0; i < features.rows(); ++i) block.row_classes[i] = labels[p.perm[i]];
    }
    return block;
}

std::pair<linalg::FactoredMatrix, IndexTable> aggregate_and_factor(
    const std::vector<MaskedBlock>& blocks) {
    if (blocks.empty()) throw std::invalid_argument("aggregate_and_factor: no blocks");
    const std::size_t d = blocks.front().masked.cols();
    const std::size_t task = blocks.front().task_id;
    std::vector<std::size_t> order(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return blocks[a].client_id < blocks[b].client_id;
    });

    std::size_t total = 0;
    std::set<std::size_t> clients;
    for (const MaskedBlock& b : blocks) {
        if (b.masked.cols() != d) throw std::invalid_argument("aggregate_and_factor: mixed d");
        if (b.task_id != task) throw std::invalid_argument("aggregate_and_factor: mixed task ids");
        if (b.masked.rows() == 0) throw std::invalid_argument("aggregate_and_factor: empty block");
        if (!clients.insert(b.client_id).second)
            throw std::invalid_argument("aggregate_and_factor: duplicate client id");
        total += b.masked.rows();
    }

    linalg::Matrix concat(total, d);
    IndexTable table;
    table.task_id = task;
    table.rows.reserve(total);
    std::size_t row = 0;
    for (std::size_t idx : order) {
        const MaskedBlock& b = blocks[idx];
        for (std::size_t r = 0; r < b.masked.rows(); ++r, ++row) {
            for (std::size_t c = 0; c < d; ++c) concat(row, c) = b.masked(r, c);
            IndexEntry e;
            e.client_id = b.client_id;
            e.masked_row = r;
            e.class_id = b.row_classes.empty() ? -1 : b.row_classes[r];
            table.rows.push_back(e);
        }
    }
    return {linalg::thin_svd(concat), std::move(table)};
}

LeverageProfile leverage_scores(const linalg::FactoredMatrix& factor, const IndexTable& table,
                                bool truncate_zero_singular) {
    if (factor.u.rows() != table.rows.size())
        throw std::invalid_argument("leverage_scores: factor/table row mismatch");

    std::size_t cols = factor.u.cols();
    if (truncate_zero_singular && !factor.s.empty()) {
        const double cutoff = 1e-10 * factor.s.front();
        cols = 0;
        while (cols < factor.s.size() && factor.s[cols] > cutoff) ++cols;
    }

    LeverageProfile profile;
    profile.task_id = table.task_id;
    profile.rank = cols;
    profile.records.reserve(table.rows.size());
    for (std::size_t j = 0; j < table.rows.size(); ++j) {
        LeverageRecord rec;
        rec.client_id = table.rows[j].client_id;
        rec.masked_row = table.rows[j].masked_row;
        rec.class_id = table.rows[j].class_id;
        double s = 0.0;
        for (std::size_t k = 0; k < cols; ++k) s += factor.u(j, k) * factor.u(j, k);
        rec.score = s;
        profile.records.push_back(rec);
    }
    return profile;
}

LeverageProfile build_distribution(const LeverageProfile& profile, NormalizationMode mode) {
    if (profile.records.empty()) throw std::invalid_argument("build_distribution: empty profile");
    LeverageProfile out = profile;
    if (mode == NormalizationMode::Global) {
        double total = 0.0;
        for (const LeverageRecord& r : out.records) total += r.score;
        if (!(total > 0.0)) throw DegenerateFeatures("build_distribution: all scores zero");
        for (LeverageRecord& r : out.records) r.probability = r.score / total;
    } else {
        std::map<int, double> totals;
        for (const LeverageRecord& r : out.records) totals[r.class_id] += r.score;
        for (const auto& [cls, total] : totals)
            if (!(total > 0.0))
                throw DegenerateFeatures("build_distribution: class " + std::to_string(cls) +
                                         " has zero total score");
        for (LeverageRecord& r : out.records) r.probability = r.score / totals[r.class_id];
    }
    return out;
}

ReplaySelection stratified_sample(const LeverageProfile& profile, std::size_t budget,
                                  std::uint64_t seed) {
    if (profile.records.empty()) throw std::invalid_argument("stratified_sample: empty profile");
    for (const LeverageRecord& r : profile.records)
        if (r.class_id < 0)
            throw std::invalid_argument("stratified_sample: records lack class labels");

    double total_score = 0.0;
    for (const LeverageRecord& r : profile.records) total_score += r.score;
    if (!(total_score > 0.0)) throw DegenerateFeatures("stratified_sample: all scores zero");

    // Zero-score rows carry no leverage mass and are never drawn; drop them up
    // front so per-class renormalization stays well-defined.
    std::map<int, std::vector<std::size_t>> pools;
    std::map<int, double> class_mass;
    for (std::size_t i = 0; i < profile.records.size(); ++i) {
        if (profile.records[i].score > 0.0) {
            pools[profile.records[i].class_id].push_back(i);
            class_mass[profile.records[i].class_id] += profile.records[i].score;
        }
    }

    std::set<int> remaining;
    for (const auto& [cls, pool] : pools) remaining.insert(cls);
    std::size_t avail_total = 0;
    for (const auto& [cls, pool] : pools) avail_total += pool.size();
    std::size_t budget_left = std::min(budget, avail_total);

    std::map<int, std::size_t> quota;
    while (!remaining.empty() && budget_left > 0) {
        const std::size_t base = budget_left / remaining.size();
        const std::size_t rem = budget_left % remaining.size();
        std::vector<int> by_mass(remaining.begin(), remaining.end());
        std::sort(by_mass.begin(), by_mass.end(), [&](int a, int b) {
            if (class_mass[a] != class_mass[b]) return class_mass[a] > class_mass[b];
            return a < b;
        });
        std::map<int, std::size_t> want;
        for (std::size_t i = 0; i < by_mass.size(); ++i)
            want[by_mass[i]] = base + (i < rem ? 1 : 0);

        bool capped = false;
        for (int cls : by_mass) {
            if (pools[cls].size() < want[cls]) {
                quota[cls] = pools[cls].size();
                budget_left -= pools[cls].size();
                remaining.erase(cls);
                capped = true;
            }
        }
        if (!capped) {
            for (int cls : by_mass) quota[cls] = want[cls];
            budget_left = 0;
        }
    }

    std::size_t n_s = 0;
    for (const auto& [cls, q] : quota) n_s += q;
    bool any_zero = false;
    for (const auto& [cls, pool] : pools)
        if (quota.find(cls) == quota.end() || quota[cls] == 0) any_zero = true;
    if (any_zero && budget > 0)
        std::cerr << "stratified_sample: budget " << budget << " leaves some of " << pools.size()
                  << " classes with zero quota\n";

    ReplaySelection sel;
    sel.task_id = profile.task_id;
    if (n_s == 0) return sel;

    Rng rng(seed);
    for (const auto& [cls, pool_const] : pools) {
        auto it = quota.find(cls);
        if (it == quota.end() || it->second == 0) continue;
        std::vector<std::size_t> pool = pool_const;
        for (std::size_t draw = 0; draw < it->second; ++draw) {
            double mass = 0.0;
            for (std::size_t i : pool) mass += profile.records[i].score;
            const double u = rng.uniform() * mass;
            double cum = 0.0;
            std::size_t pick = pool.size() - 1;
            for (std::size_t k = 0; k < pool.size(); ++k) {
                cum += profile.records[pool[k]].score;
                if (u < cum) {
                    pick = k;
                    break;
                }
            }
            const LeverageRecord& rec = profile.records[pool[pick]];
            SelectedExemplar e;
            e.client_id = rec.client_id;
            e.masked_row = rec.masked_row;
            e.class_id = rec.class_id;
            e.score = rec.score;
            e.probability = rec.score / total_score;  // Global-mode p_x
            e.weight = 1.0 / std::sqrt(static_cast<double>(n_s) * e.probability);
            sel.entries.push_back(e);
            pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
        }
    }
    return sel;
}

std::map<std::size_t, std::vector<std::size_t>> decode_selection(
    const ReplaySelection& selection,
    const std::map<std::size_t, std::vector<std::size_t>>& row_maps) {
    std::map<std::size_t, std::vector<std::size_t>> out;
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const SelectedExemplar& e : selection.entries) {
        if (!seen.insert({e.client_id, e.masked_row}).second)
            throw std::invalid_argument("decode_selection: duplicate (client, row) pair");
        auto it = row_maps.find(e.client_id);
        if (it == row_maps.end() || it->second.empty())
            throw DecodeError("decode_selection: client " + std::to_string(e.client_id) +
                              " has no row map (masked with a general orthogonal matrix?)");
        if (e.masked_row >= it->second.size())
            throw DecodeError("decode_selection: masked row " + std::to_string(e.masked_row) +
                              " out of range for client " + std::to_string(e.client_id));
        out[e.client_id].push_back(it->second[e.masked_row]);
    }
    return out;
}

}  // namespace fedcbdr::gdr
