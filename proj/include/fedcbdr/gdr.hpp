#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <vector>

#include "fedcbdr/linalg.hpp"

namespace fedcbdr::gdr {

// All zero (or negative, impossible) leverage mass in a normalization group:
// the features give the sampler nothing to work with.
struct DegenerateFeatures : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when a selection cannot be translated back to raw sample indices,
// e.g. the client masked with a general orthogonal matrix.
struct DecodeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A client's masked feature matrix as uploaded to the server. row_map is the
// client-private permutation (masked row -> raw local index); it stays on the
// client and is only consulted at decode time. row_classes travels with the
// upload so the server can stratify by class; both are empty under
// GeneralOrthogonal masking.
struct MaskedBlock {
    std::size_t client_id = 0;
    std::size_t task_id = 0;
    linalg::Matrix masked;
    std::vector<std::size_t> row_map;
    std::vector<int> row_classes;
};

// Origin of each global (concatenated) row.
struct IndexEntry {
    std::size_t client_id = 0;
    std::size_t masked_row = 0;
    int class_id = -1;
};

struct IndexTable {
    std::size_t task_id = 0;
    std::vector<IndexEntry> rows;
};

enum class NormalizationMode { Global, PerClass };

struct LeverageRecord {
    std::size_t client_id = 0;
    std::size_t masked_row = 0;  // the server-side handle; raw index only after decode
    int class_id = -1;
    double score = 0.0;
    double probability = 0.0;
};

struct LeverageProfile {
    std::size_t task_id = 0;
    std::size_t rank = 0;  // number of U columns the scores were read from
    std::vector<LeverageRecord> records;
};

struct SelectedExemplar {
    std::size_t client_id = 0;
    std::size_t masked_row = 0;
    int class_id = -1;
    double score = 0.0;
    double probability = 0.0;  // Global-mode p_x
    double weight = 0.0;       // 1/sqrt(n_s * p_x)
};

struct ReplaySelection {
    std::size_t task_id = 0;
    std::vector<SelectedExemplar> entries;
};

// Builds P from p_seed with the given kind and returns P * features * q.
MaskedBlock mask_local_features(const linalg::Matrix& features, const std::vector<int>& labels,
                                std::size_t client_id, std::size_t task_id, std::uint64_t p_seed,
                                const linalg::OrthogonalMatrix& q, linalg::OrthoKind kind);

// Concatenates blocks in ascending client order and factors the result.
std::pair<linalg::FactoredMatrix, IndexTable> aggregate_and_factor(
    const std::vector<MaskedBlock>& blocks);

// Per-row squared norms of thin U. With truncate_zero_singular, columns whose
// singular value falls below 1e-10 * s_max are dropped from the scores.
LeverageProfile leverage_scores(const linalg::FactoredMatrix& factor, const IndexTable& table,
                                bool truncate_zero_singular = false);

LeverageProfile build_distribution(const LeverageProfile& profile, NormalizationMode mode);

// Class-stratified sampling without replacement: quota = floor(budget/#classes)
// plus remainder by descending total leverage; classes short of quota give up
// their surplus to the rest by the same rule.
ReplaySelection stratified_sample(const LeverageProfile& profile, std::size_t budget,
                                  std::uint64_t seed);

// Translates each client's selected masked rows through its private row_map.
// Order within a client follows the selection's entry order.
std::map<std::size_t, std::vector<std::size_t>> decode_selection(
    const ReplaySelection& selection,
    const std::map<std::size_t, std::vector<std::size_t>>& row_maps);

}  // namespace fedcbdr::gdr
