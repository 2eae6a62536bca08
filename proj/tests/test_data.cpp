#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>

#include "fedcbdr/data.hpp"
#include "fedcbdr/linalg.hpp"
#include "oracles.hpp"

using namespace fedcbdr;
using namespace fedcbdr::data;

namespace {

// One-vs-all ridge probe on [X 1]; reference classifier for separability.
double linear_probe_accuracy(const Dataset& train, const Dataset& test) {
    const std::size_t d = train.feature_dim() + 1;
    const std::size_t c_count = train.num_classes;
    linalg::Matrix gram(d, d, 0.0);
    std::vector<std::vector<double>> rhs(c_count, std::vector<double>(d, 0.0));
    for (const Sample& s : train.samples) {
        std::vector<double> phi(s.features);
        phi.push_back(1.0);
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) gram(i, j) += phi[i] * phi[j];
            rhs[static_cast<std::size_t>(s.label)][i] += phi[i];
        }
    }
    for (std::size_t i = 0; i < d; ++i) gram(i, i) += 1e-6;
    std::vector<std::vector<double>> w;
    for (std::size_t c = 0; c < c_count; ++c) w.push_back(oracle::solve_dense(gram, rhs[c]));

    std::size_t correct = 0;
    for (const Sample& s : test.samples) {
        std::vector<double> phi(s.features);
        phi.push_back(1.0);
        double best = -1e300;
        std::size_t best_c = 0;
        for (std::size_t c = 0; c < c_count; ++c) {
            double score = 0.0;
            for (std::size_t i = 0; i < d; ++i) score += w[c][i] * phi[i];
            if (score > best) {
                best = score;
                best_c = c;
            }
        }
        if (static_cast<int>(best_c) == s.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(test.samples.size());
}

double mean_client_entropy(const Partition& part, const Dataset& ds, std::size_t num_classes) {
    double sum = 0.0;
    for (const auto& idx : part.client_indices) {
        std::vector<double> counts(num_classes, 0.0);
        for (std::size_t i : idx) counts[static_cast<std::size_t>(ds.samples[i].label)] += 1.0;
        double h = 0.0;
        for (double c : counts) {
            if (c > 0.0) {
                const double p = c / static_cast<double>(idx.size());
                h -= p * std::log(p);
            }
        }
        sum += h;
    }
    return sum / static_cast<double>(part.client_indices.size());
}

namespace fs = std::filesystem;

void write_idx_pair(const fs::path& img, const fs::path& lab, std::uint32_t n_images,
                    std::uint32_t n_labels, std::uint32_t rows, std::uint32_t cols,
                    unsigned char pixel, std::uint32_t img_magic = 0x00000803u,
                    std::uint32_t lab_magic = 0x00000801u) {
    auto put_be32 = [](std::ofstream& out, std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
        out.write(reinterpret_cast<char*>(b), 4);
    };
    std::ofstream fi(img, std::ios::binary);
    put_be32(fi, img_magic);
    put_be32(fi, n_images);
    put_be32(fi, rows);
    put_be32(fi, cols);
    std::vector<unsigned char> px(std::size_t(rows) * cols, pixel);
    for (std::uint32_t i = 0; i < n_images; ++i)
        fi.write(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
    std::ofstream fl(lab, std::ios::binary);
    put_be32(fl, lab_magic);
    put_be32(fl, n_labels);
    for (std::uint32_t i = 0; i < n_labels; ++i) {
        const unsigned char l = static_cast<unsigned char>(i % 3);
        fl.write(reinterpret_cast<const char*>(&l), 1);
    }
}

}  // namespace

TEST_CASE("generate_synthetic counts and labels") {
    auto [train, test] = generate_synthetic(2, 10, 4, 0.1, 123);
    CHECK(train.samples.size() == 20);
    CHECK(test.samples.size() == 4);
    CHECK(train.num_classes == 2);
    for (const Sample& s : train.samples) CHECK((s.label == 0 || s.label == 1));
    CHECK(train.feature_dim() == 4);
    CHECK(test.split == Split::Test);
}

TEST_CASE("generate_synthetic is deterministic in seed") {
    auto [a_train, a_test] = generate_synthetic(3, 7, 5, 0.3, 999);
    auto [b_train, b_test] = generate_synthetic(3, 7, 5, 0.3, 999);
    REQUIRE(a_train.samples.size() == b_train.samples.size());
    for (std::size_t i = 0; i < a_train.samples.size(); ++i) {
        CHECK(a_train.samples[i].label == b_train.samples[i].label);
        CHECK(a_train.samples[i].features == b_train.samples[i].features);
    }
    auto [c_train, c_test] = generate_synthetic(3, 7, 5, 0.3, 1000);
    CHECK(a_train.samples[0].features != c_train.samples[0].features);
}

TEST_CASE("generate_synthetic rejects bad arguments") {
    CHECK_THROWS_AS(generate_synthetic(1, 10, 4, 0.1, 1), std::invalid_argument);
    CHECK_THROWS_AS(generate_synthetic(2, 1, 4, 0.1, 1), std::invalid_argument);
    CHECK_THROWS_AS(generate_synthetic(2, 10, 1, 0.1, 1), std::invalid_argument);
    CHECK_THROWS_AS(generate_synthetic(2, 10, 4, 0.0, 1), std::invalid_argument);
}

TEST_CASE("synthetic mixtures are linearly separable") {
    auto [train, test] = generate_synthetic(6, 200, 16, 0.5, 7);
    CHECK(linear_probe_accuracy(train, test) >= 0.95);
}

TEST_CASE("load_idx round trip") {
    const fs::path dir = fs::temp_directory_path() / "fedcbdr_idx_test";
    fs::create_directories(dir);
    const fs::path img = dir / "images.idx";
    const fs::path lab = dir / "labels.idx";

    SUBCASE("well-formed pair") {
        write_idx_pair(img, lab, 10, 10, 2, 3, 51);
        Dataset ds = load_idx(img.string(), lab.string());
        CHECK(ds.samples.size() == 10);
        CHECK(ds.feature_dim() == 6);
        CHECK(ds.num_classes == 3);
        CHECK(ds.samples[0].features[0] == doctest::Approx(51.0 / 255.0));
        CHECK(ds.samples[1].label == 1);
    }
    SUBCASE("count mismatch") {
        write_idx_pair(img, lab, 10, 9, 2, 2, 0);
        try {
            load_idx(img.string(), lab.string());
            FAIL("expected IdxError");
        } catch (const IdxError& e) {
            CHECK(e.kind == IdxError::Kind::CountMismatch);
        }
    }
    SUBCASE("bad magic") {
        write_idx_pair(img, lab, 4, 4, 2, 2, 0, 0x00000804u);
        try {
            load_idx(img.string(), lab.string());
            FAIL("expected IdxError");
        } catch (const IdxError& e) {
            CHECK(e.kind == IdxError::Kind::BadMagic);
        }
    }
    SUBCASE("missing file") {
        try {
            load_idx((dir / "nope.idx").string(), lab.string());
            FAIL("expected IdxError");
        } catch (const IdxError& e) {
            CHECK(e.kind == IdxError::Kind::MissingFile);
        }
    }
    SUBCASE("all-zero bytes map to 0.0 features") {
        write_idx_pair(img, lab, 3, 3, 2, 2, 0);
        Dataset ds = load_idx(img.string(), lab.string());
        for (const Sample& s : ds.samples)
            for (double f : s.features) CHECK(f == 0.0);
    }
    fs::remove_all(dir);
}

TEST_CASE("split_tasks partitions classes") {
    TaskSplit s = split_tasks(6, 3, 11);
    REQUIRE(s.task_classes.size() == 3);
    std::set<int> seen;
    for (const auto& task : s.task_classes) {
        CHECK(task.size() == 2);
        for (int c : task) {
            CHECK(seen.insert(c).second);  // disjoint
            CHECK(c >= 0);
            CHECK(c < 6);
        }
    }
    CHECK(seen.size() == 6);

    TaskSplit five = split_tasks(10, 5, 3);
    CHECK(five.task_classes.size() == 5);
    for (const auto& task : five.task_classes) CHECK(task.size() == 2);

    CHECK_THROWS_AS(split_tasks(10, 3, 1), std::invalid_argument);
}

TEST_CASE("split_tasks deterministic and seed-sensitive") {
    CHECK(split_tasks(12, 4, 5).task_classes == split_tasks(12, 4, 5).task_classes);
}

TEST_CASE("dirichlet concentration limit is uniform") {
    auto [train, test] = generate_synthetic(2, 100, 4, 0.2, 21);
    Partition p = dirichlet_partition(train, {0, 1}, 5, 1e6, 77);
    for (const auto& idx : p.client_indices) {
        CHECK(idx.size() >= 38);
        CHECK(idx.size() <= 42);
    }
}

TEST_CASE("dirichlet partitions are exact partitions") {
    auto [train, test] = generate_synthetic(4, 60, 4, 0.3, 5);
    for (double beta : {0.1, 0.5, 1.0}) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            Partition p = dirichlet_partition(train, {0, 1, 2, 3}, 5, beta, seed);
            std::set<std::size_t> all;
            for (const auto& idx : p.client_indices) {
                CHECK(!idx.empty());
                for (std::size_t i : idx) CHECK(all.insert(i).second);
            }
            CHECK(all.size() == train.samples.size());
        }
    }
}

TEST_CASE("dirichlet partition deterministic in seed") {
    auto [train, test] = generate_synthetic(3, 40, 4, 0.3, 9);
    Partition a = dirichlet_partition(train, {0, 1, 2}, 4, 0.5, 33);
    Partition b = dirichlet_partition(train, {0, 1, 2}, 4, 0.5, 33);
    CHECK(a.client_indices == b.client_indices);
}

TEST_CASE("dirichlet partition argument errors") {
    auto [train, test] = generate_synthetic(3, 20, 4, 0.3, 2);
    CHECK_THROWS_AS(dirichlet_partition(train, {}, 4, 0.5, 1), std::invalid_argument);
    CHECK_THROWS_AS(dirichlet_partition(train, {0}, 1, 0.5, 1), std::invalid_argument);
    CHECK_THROWS_AS(dirichlet_partition(train, {7}, 4, 0.5, 1), std::invalid_argument);
    CHECK_THROWS_AS(dirichlet_partition(train, {0}, 4, 0.0, 1), std::invalid_argument);
}

TEST_CASE("client label entropy grows with beta") {
    auto [train, test] = generate_synthetic(6, 100, 4, 0.3, 4);
    const std::vector<int> task = {0, 1, 2, 3, 4, 5};
    auto mean_entropy = [&](double beta) {
        double acc = 0.0;
        for (std::uint64_t seed = 0; seed < 20; ++seed)
            acc += mean_client_entropy(dirichlet_partition(train, task, 5, beta, seed), train, 6);
        return acc / 20.0;
    };
    const double e01 = mean_entropy(0.1);
    const double e05 = mean_entropy(0.5);
    const double e10 = mean_entropy(1.0);
    CHECK(e01 < e10);  // strict at the extremes
    CHECK(e01 <= e05);
    CHECK(e05 <= e10);
}
