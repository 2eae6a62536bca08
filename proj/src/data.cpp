#include "fedcbdr/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "fedcbdr/rng.hpp"

namespace fedcbdr::data {

namespace {

std::vector<double> class_mean(std::size_t d_in, Rng& rng) {
    std::vector<double> m(d_in);
    double norm = 0.0;
    do {
        norm = 0.0;
        for (double& x : m) {
            x = rng.normal();
            norm += x * x;
        }
        norm = std::sqrt(norm);
    } while (norm == 0.0);
    for (double& x : m) x = 3.0 * x / norm;
    return m;
}

}  // namespace

std::pair<Dataset, Dataset> generate_synthetic(std::size_t num_classes, std::size_t per_class,
                                               std::size_t d_in, double spread,
                                               std::uint64_t seed) {
    if (num_classes < 2 || per_class < 2 || d_in < 2 || !(spread > 0.0)) {
        throw std::invalid_argument(
            "generate_synthetic: need num_classes >= 2, per_class >= 2, d_in >= 2, spread > 0");
    }
    Rng rng(seed);
    std::vector<std::vector<double>> means;
    means.reserve(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) means.push_back(class_mean(d_in, rng));

    const std::size_t per_class_test = (per_class + 4) / 5;
    Dataset train{ {}, num_classes, Split::Train };
    Dataset test{ {}, num_classes, Split::Test };
    auto emit = [&](Dataset& out, std::size_t count) {
        for (std::size_t c = 0; c < num_classes; ++c) {
            for (std::size_t i = 0; i < count; ++i) {
                Sample s;
                s.label = static_cast<int>(c);
                s.features.resize(d_in);
                for (std::size_t j = 0; j < d_in; ++j)
                    s.features[j] = means[c][j] + spread * rng.normal();
                out.samples.push_back(std::move(s));
            }
        }
    };
    emit(train, per_class);
    emit(test, per_class_test);
    return {std::move(train), std::move(test)};
}

namespace {

std::uint32_t read_be32(std::ifstream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw IdxError(IdxError::Kind::Truncated, "idx file truncated: " + path);
    }
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream images(images_path, std::ios::binary);
    if (!images) {
        throw IdxError(IdxError::Kind::MissingFile, "cannot open image file: " + images_path);
    }
    std::ifstream labels(labels_path, std::ios::binary);
    if (!labels) {
        throw IdxError(IdxError::Kind::MissingFile, "cannot open label file: " + labels_path);
    }

    const std::uint32_t image_magic = read_be32(images, images_path);
    if (image_magic != 0x00000803u) {
        throw IdxError(IdxError::Kind::BadMagic, "bad image magic in " + images_path);
    }
    const std::uint32_t label_magic = read_be32(labels, labels_path);
    if (label_magic != 0x00000801u) {
        throw IdxError(IdxError::Kind::BadMagic, "bad label magic in " + labels_path);
    }

    const std::uint32_t image_count = read_be32(images, images_path);
    const std::uint32_t rows = read_be32(images, images_path);
    const std::uint32_t cols = read_be32(images, images_path);
    const std::uint32_t label_count = read_be32(labels, labels_path);
    if (image_count != label_count) {
        throw IdxError(IdxError::Kind::CountMismatch,
                       "image count " + std::to_string(image_count) + " != label count " +
                           std::to_string(label_count));
    }

    const std::size_t dim = std::size_t(rows) * cols;
    Dataset out;
    out.samples.resize(image_count);
    std::vector<unsigned char> pixel_buf(dim);
    int max_label = -1;
    for (std::uint32_t i = 0; i < image_count; ++i) {
        if (!images.read(reinterpret_cast<char*>(pixel_buf.data()),
                         static_cast<std::streamsize>(dim))) {
            throw IdxError(IdxError::Kind::Truncated, "idx file truncated: " + images_path);
        }
        unsigned char lab = 0;
        if (!labels.read(reinterpret_cast<char*>(&lab), 1)) {
            throw IdxError(IdxError::Kind::Truncated, "idx file truncated: " + labels_path);
        }
        Sample& s = out.samples[i];
        s.label = lab;
        max_label = std::max(max_label, int(lab));
        s.features.resize(dim);
        for (std::size_t j = 0; j < dim; ++j) s.features[j] = pixel_buf[j] / 255.0;
    }
    out.num_classes = static_cast<std::size_t>(max_label + 1);
    out.split = Split::Train;
    return out;
}

TaskSplit split_tasks(std::size_t num_classes, std::size_t num_tasks, std::uint64_t seed) {
    if (num_tasks == 0 || num_classes % num_tasks != 0) {
        throw std::invalid_argument("split_tasks: num_tasks " + std::to_string(num_tasks) +
                                    " must divide num_classes " + std::to_string(num_classes));
    }
    std::vector<int> classes(num_classes);
    std::iota(classes.begin(), classes.end(), 0);
    Rng rng(seed);
    rng.shuffle(classes);

    const std::size_t per_task = num_classes / num_tasks;
    TaskSplit split;
    split.task_classes.resize(num_tasks);
    for (std::size_t t = 0; t < num_tasks; ++t) {
        split.task_classes[t].assign(classes.begin() + static_cast<std::ptrdiff_t>(t * per_task),
                                     classes.begin() +
                                         static_cast<std::ptrdiff_t>((t + 1) * per_task));
    }
    return split;
}

Partition dirichlet_partition(const Dataset& dataset, const std::vector<int>& task_classes,
                              std::size_t num_clients, double beta, std::uint64_t seed) {
    if (task_classes.empty()) {
        throw std::invalid_argument("dirichlet_partition: task has no classes");
    }
    if (num_clients < 2) {
        throw std::invalid_argument("dirichlet_partition: need at least 2 clients");
    }
    if (!(beta > 0.0)) {
        throw std::invalid_argument("dirichlet_partition: beta must be positive");
    }

    // Per-class index pools, iterated in sorted class order for determinism.
    std::vector<int> classes = task_classes;
    std::sort(classes.begin(), classes.end());
    std::vector<std::vector<std::size_t>> pools;
    for (int c : classes) {
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < dataset.samples.size(); ++i)
            if (dataset.samples[i].label == c) pool.push_back(i);
        if (pool.empty()) {
            throw std::invalid_argument("dirichlet_partition: class " + std::to_string(c) +
                                        " absent from dataset");
        }
        pools.push_back(std::move(pool));
    }

    for (std::size_t attempt = 0;; ++attempt) {
        Rng rng(derive_seed(seed, {seed_tag::partition, attempt}));
        Partition part;
        part.client_indices.assign(num_clients, {});
        part.resamples = attempt;
        for (auto pool : pools) {
            rng.shuffle(pool);
            // Dirichlet(beta * 1_K) via normalized gammas.
            std::vector<double> props(num_clients);
            double total = 0.0;
            for (double& p : props) {
                p = rng.gamma(beta);
                total += p;
            }
            std::vector<std::size_t> counts(num_clients, 0);
            if (total <= 0.0) {
                // All gammas underflowed; hand everything to one client and
                // let the emptiness check trigger a resample if needed.
                counts[0] = pool.size();
            } else {
                // Largest-remainder rounding of proportions to counts.
                const double n = static_cast<double>(pool.size());
                std::vector<double> remainders(num_clients);
                std::size_t assigned = 0;
                for (std::size_t k = 0; k < num_clients; ++k) {
                    const double exact = n * props[k] / total;
                    counts[k] = static_cast<std::size_t>(std::floor(exact));
                    remainders[k] = exact - std::floor(exact);
                    assigned += counts[k];
                }
                std::vector<std::size_t> order(num_clients);
                std::iota(order.begin(), order.end(), 0);
                std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                    return remainders[a] > remainders[b];
                });
                for (std::size_t i = 0; assigned < pool.size(); ++i, ++assigned)
                    ++counts[order[i % num_clients]];
            }
            std::size_t cursor = 0;
            for (std::size_t k = 0; k < num_clients; ++k) {
                for (std::size_t i = 0; i < counts[k]; ++i)
                    part.client_indices[k].push_back(pool[cursor++]);
            }
        }
        const bool all_nonempty =
            std::all_of(part.client_indices.begin(), part.client_indices.end(),
                        [](const auto& v) { return !v.empty(); });
        if (all_nonempty) {
            for (auto& v : part.client_indices) std::sort(v.begin(), v.end());
            if (attempt > 0) {
                std::fprintf(stderr,
                             "dirichlet_partition: resampled %zu time(s) to avoid empty clients\n",
                             attempt);
            }
            return part;
        }
    }
}

}  // namespace fedcbdr::data
