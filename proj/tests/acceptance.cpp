// End-to-end acceptance gate: one pass/fail line per criterion, exit code =
// number of failures. Tolerances are pinned next to each check.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedcbdr/config.hpp"
#include "fedcbdr/data.hpp"
#include "fedcbdr/federation.hpp"
#include "fedcbdr/gdr.hpp"
#include "fedcbdr/linalg.hpp"
#include "fedcbdr/nn.hpp"
#include "fedcbdr/rng.hpp"
#include "fedcbdr/runner.hpp"
#include "oracles.hpp"

using namespace fedcbdr;

namespace {

int failures = 0;

void report(int idx, const std::string& name, bool ok, const std::string& detail) {
    std::cout << (ok ? "PASS" : "FAIL") << "  criterion " << idx << ": " << name << " (" << detail
              << ")\n";
    if (!ok) ++failures;
}

double elapsed_s(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(double x) {
    std::ostringstream out;
    out << std::setprecision(3) << x;
    return out.str();
}

linalg::Matrix random_matrix(std::size_t n, std::size_t d, Rng& rng) {
    linalg::Matrix m(n, d);
    for (double& v : m.data()) v = rng.normal();
    return m;
}

double stddev(const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= double(v.size());
    double acc = 0.0;
    for (double x : v) acc += (x - mean) * (x - mean);
    return std::sqrt(acc / double(v.size()));
}

// --- criterion 1: masking preserves the singular spectrum ----------------

void criterion_spectrum() {
    constexpr double kTol = 1e-8;        // relative to the largest singular value
    constexpr double kBudgetS = 10.0;
    const auto start = std::chrono::steady_clock::now();

    Rng rng(101);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng.uniform_index(199);  // 2..200
        const std::size_t d = 1 + rng.uniform_index(32);   // 1..32
        const linalg::Matrix x = random_matrix(n, d, rng);
        const auto p = linalg::random_orthogonal(
            n, rng.next_u64(),
            trial % 2 ? linalg::OrthoKind::Permutation : linalg::OrthoKind::GeneralOrthogonal);
        const auto q =
            linalg::random_orthogonal(d, rng.next_u64(), linalg::OrthoKind::GeneralOrthogonal);

        const auto plain = linalg::thin_svd(x).s;
        const auto masked = linalg::thin_svd(linalg::apply_mask(p, x, q)).s;
        const double scale = std::max(plain.empty() ? 0.0 : plain[0], 1e-300);
        for (std::size_t i = 0; i < plain.size(); ++i)
            worst = std::max(worst, std::abs(plain[i] - masked[i]) / scale);
    }
    const double secs = elapsed_s(start);
    report(1, "spectrum invariance under masking", worst <= kTol && secs < kBudgetS,
           "100 trials, max rel err " + fmt(worst) + ", " + fmt(secs) + "s");
}

// --- criterion 2: leverage scores against the brute-force oracle ---------

gdr::LeverageProfile profile_of(const linalg::Matrix& x, bool truncate) {
    gdr::IndexTable table;
    for (std::size_t i = 0; i < x.rows(); ++i) table.rows.push_back({0, i, 0});
    return gdr::leverage_scores(linalg::thin_svd(x), table, truncate);
}

void criterion_leverage_oracle() {
    constexpr double kTol = 1e-8;
    constexpr double kExactTol = 1e-12;

    Rng rng(202);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t d = 1 + rng.uniform_index(8);       // 1..8
        const std::size_t n = d + rng.uniform_index(41 - d);  // d..40
        const linalg::Matrix x = random_matrix(n, d, rng);
        const auto expected = oracle::leverage_scores(x);
        const auto profile = profile_of(x, false);
        for (std::size_t i = 0; i < n; ++i)
            worst = std::max(worst, std::abs(profile.records[i].score - expected[i]));
    }

    linalg::Matrix deficient(3, 2);
    deficient(0, 0) = 1.0;
    deficient(1, 0) = 2.0;
    deficient(2, 0) = 2.0;
    const auto profile = profile_of(deficient, true);
    const double exact[3] = {1.0 / 9.0, 4.0 / 9.0, 4.0 / 9.0};
    double worst_exact = 0.0;
    for (std::size_t i = 0; i < 3; ++i)
        worst_exact = std::max(worst_exact, std::abs(profile.records[i].score - exact[i]));

    report(2, "leverage scores match the SVD oracle", worst <= kTol && worst_exact <= kExactTol,
           "50 trials, max err " + fmt(worst) + ", rank-deficient err " + fmt(worst_exact));
}

// --- criterion 3: masked pipeline decodes to unmasked probabilities ------

void criterion_masked_sampling() {
    constexpr double kTol = 1e-8;

    Rng rng(303);
    double worst = 0.0;
    bool classes_ok = true;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t clients = 2 + rng.uniform_index(3);  // 2..4
        const std::size_t d = 2 + rng.uniform_index(4);        // 2..5
        const auto q =
            linalg::random_orthogonal(d, rng.next_u64(), linalg::OrthoKind::GeneralOrthogonal);

        std::vector<gdr::MaskedBlock> masked_blocks, plain_blocks;
        std::vector<std::vector<int>> labels_by_client(clients);
        for (std::size_t k = 0; k < clients; ++k) {
            const std::size_t rows = 3 + rng.uniform_index(10);  // 3..12
            const linalg::Matrix x = random_matrix(rows, d, rng);
            std::vector<int> labels(rows);
            for (int& c : labels) c = int(rng.uniform_index(3));
            labels_by_client[k] = labels;

            masked_blocks.push_back(gdr::mask_local_features(x, labels, k, 0, rng.next_u64(), q,
                                                             linalg::OrthoKind::Permutation));

            gdr::MaskedBlock plain;  // identity mask: the unmasked reference
            plain.client_id = k;
            plain.masked = x;
            plain.row_classes = labels;
            for (std::size_t i = 0; i < rows; ++i) plain.row_map.push_back(i);
            plain_blocks.push_back(std::move(plain));
        }

        auto probs_by_raw = [&](const std::vector<gdr::MaskedBlock>& blocks) {
            auto [factor, table] = gdr::aggregate_and_factor(blocks);
            const auto profile = gdr::build_distribution(
                gdr::leverage_scores(factor, table), gdr::NormalizationMode::Global);
            std::map<std::pair<std::size_t, std::size_t>, std::pair<double, int>> out;
            for (const auto& rec : profile.records) {
                const std::size_t raw = blocks[rec.client_id].row_map[rec.masked_row];
                out[{rec.client_id, raw}] = {rec.probability, rec.class_id};
            }
            return out;
        };

        const auto masked = probs_by_raw(masked_blocks);
        const auto plain = probs_by_raw(plain_blocks);
        for (const auto& [key, val] : plain) {
            const auto it = masked.find(key);
            if (it == masked.end()) {
                classes_ok = false;
                continue;
            }
            worst = std::max(worst, std::abs(it->second.first - val.first));
            if (it->second.second != val.second) classes_ok = false;
            if (val.second != labels_by_client[key.first][key.second]) classes_ok = false;
        }
    }
    report(3, "masked sampling decodes to unmasked probabilities", worst <= kTol && classes_ok,
           "20 trials, max prob err " + fmt(worst));
}

// --- criterion 4: gradients against central finite differences ----------

double tts_of(const std::vector<nn::LogitsSplit>& batch, const std::vector<std::size_t>& labels,
              const std::vector<char>& is_old, const nn::TtsParams& params) {
    return nn::tts_loss(batch, labels, is_old, params).loss;
}

// smallest |hidden pre-activation|: finite differences are only trusted away
// from the ReLU kink
double relu_margin(const nn::Model& model, const std::vector<const std::vector<double>*>& xs) {
    double margin = 1e300;
    for (const auto* x : xs) {
        std::vector<double> a = *x;
        for (const auto& layer : model.hidden) {
            std::vector<double> z(layer.w.rows(), 0.0);
            for (std::size_t i = 0; i < layer.w.rows(); ++i) {
                double acc = layer.b[i];
                for (std::size_t j = 0; j < layer.w.cols(); ++j) acc += layer.w(i, j) * a[j];
                z[i] = acc;
                margin = std::min(margin, std::abs(acc));
            }
            for (double& v : z) v = std::max(v, 0.0);
            a = std::move(z);
        }
    }
    return margin;
}

void criterion_gradients() {
    constexpr double kH = 1e-5;
    constexpr double kRelTol = 1e-5;
    constexpr double kDegenTol = 1e-12;
    // The quotient difference carries ~1e-11 of cancellation noise, so
    // entries below this floor are held to an absolute 1e-9 instead.
    constexpr double kDenomFloor = 1e-4;
    auto rel_err = [](double fd, double an) {
        return std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), kDenomFloor});
    };

    Rng rng(404);
    double worst_tts = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t c_old = 1 + rng.uniform_index(3), c_new = 1 + rng.uniform_index(3);
        const std::size_t n = 2 + rng.uniform_index(4);
        std::vector<nn::LogitsSplit> batch(n);
        std::vector<std::size_t> labels(n);
        std::vector<char> is_old(n);
        for (std::size_t i = 0; i < n; ++i) {
            batch[i].z_old.resize(c_old);
            batch[i].z_new.resize(c_new);
            for (double& v : batch[i].z_old) v = 2.0 * rng.normal();
            for (double& v : batch[i].z_new) v = 2.0 * rng.normal();
            labels[i] = rng.uniform_index(c_old + c_new);
            is_old[i] = i < n / 2 ? 1 : 0;  // both groups populated
        }
        const nn::TtsParams params{0.7 + 0.6 * rng.uniform(), 0.7 + 0.6 * rng.uniform(),
                                   0.7 + 0.6 * rng.uniform(), 0.7 + 0.6 * rng.uniform()};
        const auto res = nn::tts_loss(batch, labels, is_old, params);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c_old + c_new; ++j) {
                auto bump = [&](double h) {
                    auto b = batch;
                    (j < c_old ? b[i].z_old[j] : b[i].z_new[j - c_old]) += h;
                    return tts_of(b, labels, is_old, params);
                };
                const double fd = (bump(kH) - bump(-kH)) / (2.0 * kH);
                worst_tts = std::max(worst_tts, rel_err(fd, res.grad_logits[i][j]));
            }
    }

    // full backward through the MLP, skipping draws that sit on a ReLU kink
    double worst_model = 0.0;
    int done = 0;
    for (int attempt = 0; attempt < 400 && done < 20; ++attempt) {
        nn::Model model = nn::init_model(3, {4}, {0, 1}, rng.next_u64());
        model = nn::expand_head(model, {2, 3}, rng.next_u64());
        for (auto& layer : model.hidden) {
            for (double& v : layer.w.data()) v = 0.7 * rng.normal();
            for (double& v : layer.b) v = 0.2 * rng.normal();
        }
        std::vector<std::vector<double>> data(3, std::vector<double>(3));
        std::vector<const std::vector<double>*> xs;
        for (auto& x : data) {
            for (double& v : x) v = rng.normal();
            xs.push_back(&x);
        }
        if (relu_margin(model, xs) < 1e-3) continue;
        ++done;

        std::vector<std::size_t> labels(3);
        std::vector<char> is_old = {1, 0, 0};
        for (auto& l : labels) l = rng.uniform_index(4);
        const nn::TtsParams params{0.9, 1.1, 1.1, 0.9};
        const auto batch = nn::batch_gradients(model, xs, labels, is_old, params);

        auto loss_at = [&](const nn::Model& m) {
            return nn::batch_gradients(m, xs, labels, is_old, params).loss;
        };
        auto check_array = [&](auto get_ref, const auto& analytic) {
            for (std::size_t i = 0; i < analytic.size(); ++i) {
                nn::Model plus = model, minus = model;
                get_ref(plus, i) += kH;
                get_ref(minus, i) -= kH;
                const double fd = (loss_at(plus) - loss_at(minus)) / (2.0 * kH);
                worst_model = std::max(worst_model, rel_err(fd, analytic[i]));
            }
        };
        for (std::size_t l = 0; l < model.hidden.size(); ++l) {
            check_array([l](nn::Model& m, std::size_t i) -> double& { return m.hidden[l].w.data()[i]; },
                        batch.grad.hidden[l].w.data());
            check_array([l](nn::Model& m, std::size_t i) -> double& { return m.hidden[l].b[i]; },
                        batch.grad.hidden[l].b);
        }
        check_array([](nn::Model& m, std::size_t i) -> double& { return m.head.w.data()[i]; },
                    batch.grad.head.w.data());
        check_array([](nn::Model& m, std::size_t i) -> double& { return m.head.b[i]; },
                    batch.grad.head.b);
    }

    // unit temperatures and weights on an all-new batch reduce to mean CE
    double worst_degen = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t c = 2 + rng.uniform_index(4), n = 1 + rng.uniform_index(5);
        std::vector<nn::LogitsSplit> batch(n);
        std::vector<std::size_t> labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            batch[i].z_new.resize(c);
            for (double& v : batch[i].z_new) v = 2.0 * rng.normal();
            labels[i] = rng.uniform_index(c);
        }
        const auto res =
            nn::tts_loss(batch, labels, std::vector<char>(n, 0), {1.0, 1.0, 1.0, 1.0});
        double ce_mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto ce = nn::ce_loss(batch[i].z_new, labels[i]);
            ce_mean += ce.loss / double(n);
            for (std::size_t j = 0; j < c; ++j)
                worst_degen = std::max(
                    worst_degen, std::abs(res.grad_logits[i][j] - ce.grad[j] / double(n)));
        }
        worst_degen = std::max(worst_degen, std::abs(res.loss - ce_mean));
    }

    report(4, "loss and backward match finite differences",
           worst_tts <= kRelTol && worst_model <= kRelTol && done == 20 &&
               worst_degen <= kDegenTol,
           "tts " + fmt(worst_tts) + ", model " + fmt(worst_model) + ", degeneration " +
               fmt(worst_degen));
}

// --- criteria 5 & 6: end-to-end federated runs ---------------------------

config::ExperimentConfig desk_config(double beta, double spread, std::size_t rounds) {
    config::ExperimentConfig cfg;
    cfg.dataset.num_classes = 6;
    cfg.dataset.per_class = 200;
    cfg.dataset.feature_dim = 16;
    cfg.dataset.spread = spread;
    cfg.num_tasks = 3;
    cfg.beta = beta;
    cfg.num_clients = 5;
    cfg.local_epochs = 2;
    cfg.batch_size = 128;
    cfg.rounds_per_task = rounds;
    cfg.lr = 0.01;
    cfg.weight_decay = 1e-5;
    cfg.replay_per_task = 30;
    cfg.buffer_budget = 90;
    cfg.hidden_dims = {64, 32};
    return cfg;
}

void criterion_buffer_balance() {
    const config::ExperimentConfig cfg = desk_config(0.1, 0.5, 5);
    const std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};

    bool balanced = true, covered = true;
    int lrr_wider = 0;
    for (std::uint64_t seed : seeds) {
        const auto fed = runner::run_single(cfg, federation::Method::FedCBDR, seed, {});
        const auto lrr = runner::run_single(cfg, federation::Method::LocalRandomReplay, seed, {});
        const auto tasks =
            data::split_tasks(6, 3, derive_seed(seed, {seed_tag::tasks}));

        for (std::size_t t = 0; t < 3; ++t) {
            const auto& hist = fed.post_update_histograms[t];
            std::size_t lo = SIZE_MAX, hi = 0;
            for (std::size_t u = 0; u <= t; ++u)
                for (int c : tasks.task_classes[u]) {
                    lo = std::min(lo, hist[c]);
                    hi = std::max(hi, hist[c]);
                }
            if (hi - lo > 1) balanced = false;
            if (lo == 0) covered = false;
        }

        auto final_std = [](const std::vector<std::size_t>& hist) {
            std::vector<double> counts(hist.begin(), hist.end());
            return stddev(counts);
        };
        if (final_std(lrr.post_update_histograms[2]) > final_std(fed.post_update_histograms[2]))
            ++lrr_wider;
    }
    report(5, "replay buffer stays class-balanced", balanced && covered && lrr_wider >= 4,
           std::string("max spread <= 1: ") + (balanced ? "yes" : "no") + ", coverage " +
               (covered ? "full" : "broken") + ", baseline wider on " +
               std::to_string(lrr_wider) + "/5 seeds");
}

void criterion_forgetting() {
    constexpr double kMinGap = 0.15;  // percentage points over plain finetuning
    constexpr double kBudgetS = 300.0;
    const auto start = std::chrono::steady_clock::now();

    const config::ExperimentConfig cfg = desk_config(0.5, 0.8, 100);
    const std::vector<std::uint64_t> seeds = {1, 2, 3};

    std::map<federation::Method, double> mean;
    for (auto method : {federation::Method::Finetune, federation::Method::LocalRandomReplay,
                        federation::Method::FedCBDR}) {
        for (std::uint64_t seed : seeds)
            mean[method] += runner::run_single(cfg, method, seed, {}).final_top1;
        mean[method] /= double(seeds.size());
    }
    const double secs = elapsed_s(start);
    const double gap = mean[federation::Method::FedCBDR] - mean[federation::Method::Finetune];
    const bool beats_local =
        mean[federation::Method::FedCBDR] > mean[federation::Method::LocalRandomReplay];
    report(6, "replay mitigates forgetting",
           gap >= kMinGap && beats_local && secs < kBudgetS,
           "finetune " + fmt(mean[federation::Method::Finetune]) + ", local " +
               fmt(mean[federation::Method::LocalRandomReplay]) + ", fedcbdr " +
               fmt(mean[federation::Method::FedCBDR]) + ", " + fmt(secs) + "s");
}

// --- criterion 7: importance weights are unbiased ------------------------

void criterion_unbiasedness() {
    constexpr double kTol = 0.02;
    constexpr int kDraws = 10000;

    Rng data_rng(505);
    const linalg::Matrix x = random_matrix(30, 5, data_rng);
    const auto profile =
        gdr::build_distribution(profile_of(x, false), gdr::NormalizationMode::Global);

    double truth = 0.0;  // squared Frobenius norm, estimated via g(x)/p_x
    std::vector<double> g(x.rows(), 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < x.cols(); ++j) g[i] += x(i, j) * x(i, j);
        truth += g[i];
    }

    Rng draw_rng(777);
    double estimate = 0.0;
    for (int t = 0; t < kDraws; ++t) {
        const double u = draw_rng.uniform();
        std::size_t pick = profile.records.size() - 1;
        double acc = 0.0;
        for (std::size_t i = 0; i < profile.records.size(); ++i) {
            acc += profile.records[i].probability;
            if (u < acc) {
                pick = i;
                break;
            }
        }
        estimate += g[profile.records[pick].masked_row] / profile.records[pick].probability;
    }
    estimate /= double(kDraws);
    const double rel = std::abs(estimate - truth) / truth;
    report(7, "importance weighting is unbiased", rel <= kTol,
           "10k draws, rel err " + fmt(rel));
}

// --- criterion 8: byte-identical reruns ----------------------------------

void criterion_determinism() {
    namespace fs = std::filesystem;
    const fs::path root = fs::temp_directory_path() / "fedcbdr_acceptance";
    fs::remove_all(root);

    config::ExperimentConfig cfg = desk_config(0.5, 0.5, 5);
    cfg.dataset.per_class = 40;
    cfg.seeds = {1};
    cfg.methods = {"FedCBDR"};

    const int rc_a = runner::run_experiment_cfg(cfg, (root / "a").string());
    const int rc_b = runner::run_experiment_cfg(cfg, (root / "b").string());
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p);
        std::ostringstream buf;
        buf << in.rdbuf();
        return buf.str();
    };
    const std::string a = slurp(root / "a" / "metrics.jsonl");
    const std::string b = slurp(root / "b" / "metrics.jsonl");
    report(8, "identical configs give byte-identical metrics",
           rc_a == 0 && rc_b == 0 && !a.empty() && a == b,
           std::to_string(a.size()) + " bytes compared");
}

// --- criterion 9: Dirichlet partitions -----------------------------------

double mean_client_entropy(const data::Dataset& dataset, const data::Partition& partition) {
    double total = 0.0;
    for (const auto& indices : partition.client_indices) {
        std::map<int, double> counts;
        for (std::size_t i : indices) counts[dataset.samples[i].label] += 1.0;
        double entropy = 0.0;
        for (const auto& [label, n] : counts) {
            const double p = n / double(indices.size());
            entropy -= p * std::log(p);
        }
        total += entropy;
    }
    return total / double(partition.client_indices.size());
}

void criterion_dirichlet() {
    const auto [train, test] = data::generate_synthetic(6, 50, 8, 0.7, 606);
    const std::vector<int> task = {0, 1, 2, 3, 4, 5};

    bool exact = true;
    std::map<double, double> entropy;
    for (double beta : {0.1, 0.5, 1.0}) {
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            const auto partition = data::dirichlet_partition(train, task, 5, beta, seed);
            if (seed <= 5) {
                std::set<std::size_t> seen;
                for (const auto& indices : partition.client_indices) {
                    if (indices.empty()) exact = false;
                    for (std::size_t i : indices)
                        if (!seen.insert(i).second) exact = false;  // overlap
                }
                if (seen.size() != train.size()) exact = false;  // coverage
            }
            entropy[beta] += mean_client_entropy(train, partition) / 20.0;
        }
    }
    const bool monotone = entropy[0.1] <= entropy[0.5] && entropy[0.5] <= entropy[1.0];
    report(9, "Dirichlet partitions are exact and ordered by entropy", exact && monotone,
           "entropy " + fmt(entropy[0.1]) + " <= " + fmt(entropy[0.5]) + " <= " +
               fmt(entropy[1.0]));
}

}  // namespace

int main() {
    criterion_spectrum();
    criterion_leverage_oracle();
    criterion_masked_sampling();
    criterion_gradients();
    criterion_buffer_balance();
    criterion_forgetting();
    criterion_unbiasedness();
    criterion_determinism();
    criterion_dirichlet();
    std::cout << (failures == 0 ? "ACCEPTANCE PASSED" : "ACCEPTANCE FAILED") << " (" << failures
              << " of 9 criteria failed)\n";
    return failures;
}
