#include "fedcbdr/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include "fedcbdr/rng.hpp"

namespace fedcbdr::nn {

namespace {

// Returns log-sum-exp and fills probs with the stable softmax.
double stable_softmax(const std::vector<double>& s, std::vector<double>& probs) {
    double m = s[0];
    for (double v : s) m = std::max(m, v);
    double sum = 0.0;
    probs.resize(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        probs[i] = std::exp(s[i] - m);
        sum += probs[i];
    }
    for (double& p : probs) p /= sum;
    return m + std::log(sum);
}

void check_layer_shapes(const Layer& a, const Layer& b, const char* what) {
    if (a.w.rows() != b.w.rows() || a.w.cols() != b.w.cols() || a.b.size() != b.b.size())
        throw std::invalid_argument(std::string("shape mismatch in ") + what);
}

}  // namespace

std::size_t Model::input_dim() const {
    return hidden.empty() ? head.w.cols() : hidden.front().w.cols();
}

std::size_t Model::feature_dim() const {
    return hidden.empty() ? head.w.cols() : hidden.back().w.rows();
}

std::vector<double> LogitsSplit::concat() const {
    std::vector<double> out(z_old);
    out.insert(out.end(), z_new.begin(), z_new.end());
    return out;
}

Model init_model(std::size_t input_dim, const std::vector<std::size_t>& hidden_dims,
                 const std::vector<int>& initial_classes, std::uint64_t seed) {
    if (input_dim == 0) throw std::invalid_argument("init_model: input_dim must be positive");
    if (initial_classes.empty()) throw std::invalid_argument("init_model: no initial classes");
    std::set<int> uniq(initial_classes.begin(), initial_classes.end());
    if (uniq.size() != initial_classes.size())
        throw std::invalid_argument("init_model: duplicate class id");

    Rng rng(seed);
    Model m;
    std::size_t fan_in = input_dim;
    for (std::size_t dim : hidden_dims) {
        if (dim == 0) throw std::invalid_argument("init_model: zero hidden dim");
        Layer layer;
        layer.w = linalg::Matrix(dim, fan_in);
        const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));  // He init for ReLU
        for (std::size_t i = 0; i < dim * fan_in; ++i) layer.w.data()[i] = scale * rng.normal();
        layer.b.assign(dim, 0.0);
        m.hidden.push_back(std::move(layer));
        fan_in = dim;
    }
    m.head.w = linalg::Matrix(initial_classes.size(), fan_in);
    for (std::size_t i = 0; i < m.head.w.data().size(); ++i) m.head.w.data()[i] = 0.01 * rng.normal();
    m.head.b.assign(initial_classes.size(), 0.0);
    m.class_order = initial_classes;
    m.old_boundary = 0;  // everything is "new" until the first task boundary
    return m;
}

Forward forward(const Model& model, const std::vector<double>& x) {
    if (x.size() != model.input_dim())
        throw std::invalid_argument("forward: input dimension mismatch");
    std::vector<double> act = x;
    for (const Layer& layer : model.hidden) {
        std::vector<double> next(layer.w.rows());
        for (std::size_t r = 0; r < layer.w.rows(); ++r) {
            double z = layer.b[r];
            for (std::size_t c = 0; c < layer.w.cols(); ++c) z += layer.w(r, c) * act[c];
            next[r] = std::max(z, 0.0);
        }
        act = std::move(next);
    }
    Forward out;
    out.features = act;
    std::vector<double> logits(model.head.w.rows());
    for (std::size_t r = 0; r < model.head.w.rows(); ++r) {
        double z = model.head.b[r];
        for (std::size_t c = 0; c < model.head.w.cols(); ++c) z += model.head.w(r, c) * act[c];
        logits[r] = z;
    }
    out.logits.z_old.assign(logits.begin(),
                            logits.begin() + static_cast<std::ptrdiff_t>(model.old_boundary));
    out.logits.z_new.assign(logits.begin() + static_cast<std::ptrdiff_t>(model.old_boundary),
                            logits.end());
    return out;
}

TtsResult tts_loss(const std::vector<LogitsSplit>& batch, const std::vector<std::size_t>& labels,
                   const std::vector<char>& is_old_sample, const TtsParams& params) {
    if (batch.empty()) throw std::invalid_argument("tts_loss: empty batch");
    if (labels.size() != batch.size() || is_old_sample.size() != batch.size())
        throw std::invalid_argument("tts_loss: length mismatch");
    for (double v : {params.tau_old, params.tau_new, params.w_old, params.w_new})
        if (!(v > 0.0) || !std::isfinite(v))
            throw std::invalid_argument("tts_loss: params must be positive finite");

    std::size_t n_old = 0;
    for (char f : is_old_sample)
        if (f) ++n_old;
    const std::size_t n_new = batch.size() - n_old;

    TtsResult out;
    out.grad_logits.resize(batch.size());
    std::vector<double> scaled, probs;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const LogitsSplit& ls = batch[i];
        const std::size_t split = ls.z_old.size();
        const std::size_t c_total = split + ls.z_new.size();
        if (labels[i] >= c_total) throw std::invalid_argument("tts_loss: label out of range");

        scaled.resize(c_total);
        for (std::size_t j = 0; j < split; ++j) scaled[j] = ls.z_old[j] / params.tau_old;
        for (std::size_t j = split; j < c_total; ++j)
            scaled[j] = ls.z_new[j - split] / params.tau_new;

        const double lse = stable_softmax(scaled, probs);
        const double sample_loss = lse - scaled[labels[i]];
        const double coeff = is_old_sample[i] ? params.w_old / static_cast<double>(n_old)
                                              : params.w_new / static_cast<double>(n_new);
        out.sample_terms.push_back(coeff * sample_loss);
        out.loss += coeff * sample_loss;

        std::vector<double>& g = out.grad_logits[i];
        g.resize(c_total);
        for (std::size_t j = 0; j < c_total; ++j) {
            const double tau = j < split ? params.tau_old : params.tau_new;
            const double delta = j == labels[i] ? 1.0 : 0.0;
            g[j] = coeff * (probs[j] - delta) / tau;
        }
    }
    return out;
}

CeResult ce_loss(const std::vector<double>& logits, std::size_t label) {
    if (logits.empty()) throw std::invalid_argument("ce_loss: empty logits");
    if (label >= logits.size()) throw std::invalid_argument("ce_loss: label out of range");
    CeResult out;
    const double lse = stable_softmax(logits, out.grad);
    out.loss = lse - logits[label];
    out.grad[label] -= 1.0;
    return out;
}

Model sgd_step(const Model& model, const ModelGrad& grads, double lr, double weight_decay) {
    if (grads.hidden.size() != model.hidden.size())
        throw std::invalid_argument("sgd_step: layer count mismatch");
    for (std::size_t l = 0; l < model.hidden.size(); ++l)
        check_layer_shapes(model.hidden[l], grads.hidden[l], "sgd_step hidden layer");
    check_layer_shapes(model.head, grads.head, "sgd_step head");

    Model out = model;
    auto update = [&](Layer& layer, const Layer& g) {
        for (std::size_t i = 0; i < layer.w.data().size(); ++i)
            layer.w.data()[i] -= lr * (g.w.data()[i] + weight_decay * layer.w.data()[i]);
        for (std::size_t i = 0; i < layer.b.size(); ++i) layer.b[i] -= lr * g.b[i];
    };
    for (std::size_t l = 0; l < out.hidden.size(); ++l) update(out.hidden[l], grads.hidden[l]);
    update(out.head, grads.head);
    return out;
}

Model expand_head(const Model& model, const std::vector<int>& new_classes, std::uint64_t seed) {
    std::set<int> seen(model.class_order.begin(), model.class_order.end());
    for (int c : new_classes)
        if (!seen.insert(c).second)
            throw std::invalid_argument("expand_head: duplicate class id");

    Model out = model;
    out.old_boundary = model.num_classes();  // everything seen so far becomes "old"
    if (new_classes.empty()) return out;

    const std::size_t d = model.feature_dim();
    linalg::Matrix grown(model.head.w.rows() + new_classes.size(), d);
    std::copy(model.head.w.data().begin(), model.head.w.data().end(), grown.data().begin());
    Rng rng(seed);
    for (std::size_t i = model.head.w.data().size(); i < grown.data().size(); ++i)
        grown.data()[i] = 0.01 * rng.normal();
    out.head.w = std::move(grown);
    out.head.b.resize(model.head.b.size() + new_classes.size(), 0.0);
    out.class_order.insert(out.class_order.end(), new_classes.begin(), new_classes.end());
    return out;
}

ModelGrad zero_grad(const Model& model) {
    ModelGrad g;
    for (const Layer& layer : model.hidden) {
        Layer z;
        z.w = linalg::Matrix(layer.w.rows(), layer.w.cols(), 0.0);
        z.b.assign(layer.b.size(), 0.0);
        g.hidden.push_back(std::move(z));
    }
    g.head.w = linalg::Matrix(model.head.w.rows(), model.head.w.cols(), 0.0);
    g.head.b.assign(model.head.b.size(), 0.0);
    return g;
}

BatchGrad batch_gradients(const Model& model, const std::vector<const std::vector<double>*>& xs,
                          const std::vector<std::size_t>& labels,
                          const std::vector<char>& is_old_sample, const TtsParams& params,
                          const std::vector<double>* sample_weights) {
    if (xs.empty()) throw std::invalid_argument("batch_gradients: empty batch");
    if (labels.size() != xs.size() || is_old_sample.size() != xs.size())
        throw std::invalid_argument("batch_gradients: length mismatch");
    if (sample_weights != nullptr && sample_weights->size() != xs.size())
        throw std::invalid_argument("batch_gradients: weight count mismatch");

    // Forward pass keeping post-ReLU activations of every hidden layer.
    const std::size_t n = xs.size();
    std::vector<std::vector<std::vector<double>>> acts(n);
    std::vector<LogitsSplit> splits(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::vector<double>* cur = xs[i];
        if (cur->size() != model.input_dim())
            throw std::invalid_argument("batch_gradients: input dimension mismatch");
        for (const Layer& layer : model.hidden) {
            std::vector<double> next(layer.w.rows());
            for (std::size_t r = 0; r < layer.w.rows(); ++r) {
                double z = layer.b[r];
                for (std::size_t c = 0; c < layer.w.cols(); ++c) z += layer.w(r, c) * (*cur)[c];
                next[r] = std::max(z, 0.0);
            }
            acts[i].push_back(std::move(next));
            cur = &acts[i].back();
        }
        std::vector<double> logits(model.head.w.rows());
        for (std::size_t r = 0; r < model.head.w.rows(); ++r) {
            double z = model.head.b[r];
            for (std::size_t c = 0; c < model.head.w.cols(); ++c) z += model.head.w(r, c) * (*cur)[c];
            logits[r] = z;
        }
        splits[i].z_old.assign(logits.begin(),
                               logits.begin() + static_cast<std::ptrdiff_t>(model.old_boundary));
        splits[i].z_new.assign(logits.begin() + static_cast<std::ptrdiff_t>(model.old_boundary),
                               logits.end());
    }

    TtsResult tts = tts_loss(splits, labels, is_old_sample, params);
    if (sample_weights != nullptr) {
        tts.loss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double w = (*sample_weights)[i];
            tts.loss += w * tts.sample_terms[i];
            for (double& g : tts.grad_logits[i]) g *= w;
        }
    }

    BatchGrad out;
    out.loss = tts.loss;
    out.grad = zero_grad(model);
    for (std::size_t i = 0; i < n; ++i) {
        const std::vector<double>& feat = model.hidden.empty() ? *xs[i] : acts[i].back();
        const std::vector<double>& gl = tts.grad_logits[i];
        for (std::size_t r = 0; r < model.head.w.rows(); ++r) {
            for (std::size_t c = 0; c < model.head.w.cols(); ++c)
                out.grad.head.w(r, c) += gl[r] * feat[c];
            out.grad.head.b[r] += gl[r];
        }
        std::vector<double> down(model.head.w.cols(), 0.0);
        for (std::size_t r = 0; r < model.head.w.rows(); ++r)
            for (std::size_t c = 0; c < model.head.w.cols(); ++c)
                down[c] += model.head.w(r, c) * gl[r];

        for (std::size_t l = model.hidden.size(); l-- > 0;) {
            const Layer& layer = model.hidden[l];
            const std::vector<double>& post = acts[i][l];
            const std::vector<double>& prev = l == 0 ? *xs[i] : acts[i][l - 1];
            std::vector<double> dz(layer.w.rows());
            for (std::size_t r = 0; r < layer.w.rows(); ++r)
                dz[r] = post[r] > 0.0 ? down[r] : 0.0;  // ReLU mask
            for (std::size_t r = 0; r < layer.w.rows(); ++r) {
                for (std::size_t c = 0; c < layer.w.cols(); ++c)
                    out.grad.hidden[l].w(r, c) += dz[r] * prev[c];
                out.grad.hidden[l].b[r] += dz[r];
            }
            if (l > 0) {
                down.assign(layer.w.cols(), 0.0);
                for (std::size_t r = 0; r < layer.w.rows(); ++r)
                    for (std::size_t c = 0; c < layer.w.cols(); ++c)
                        down[c] += layer.w(r, c) * dz[r];
            }
        }
    }
    return out;
}

namespace {

constexpr char kCheckpointMagic[5] = {'F', 'C', 'B', 'M', '\x01'};

void write_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_array(std::ofstream& out, const std::string& name, const std::vector<std::uint64_t>& dims,
                 const double* data) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(dims.size()));
    std::uint64_t total = 1;
    for (std::uint64_t d : dims) {
        out.write(reinterpret_cast<const char*>(&d), sizeof d);
        total *= d;
    }
    out.write(reinterpret_cast<const char*>(data),
              static_cast<std::streamsize>(total * sizeof(double)));
}

struct NamedArray {
    std::vector<std::uint64_t> dims;
    std::vector<double> data;
};

std::uint32_t read_u32(std::ifstream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint32_t n_arrays = static_cast<std::uint32_t>(2 * model.hidden.size() + 4);
    write_u32(out, n_arrays);
    for (std::size_t l = 0; l < model.hidden.size(); ++l) {
        const std::string base = "hidden." + std::to_string(l);
        write_array(out, base + ".w", {model.hidden[l].w.rows(), model.hidden[l].w.cols()},
                    model.hidden[l].w.data().data());
        write_array(out, base + ".b", {model.hidden[l].b.size()}, model.hidden[l].b.data());
    }
    write_array(out, "head.w", {model.head.w.rows(), model.head.w.cols()}, model.head.w.data().data());
    write_array(out, "head.b", {model.head.b.size()}, model.head.b.data());
    std::vector<double> order(model.class_order.begin(), model.class_order.end());
    write_array(out, "class_order", {order.size()}, order.data());
    const double boundary = static_cast<double>(model.old_boundary);
    write_array(out, "old_boundary", {1}, &boundary);
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[sizeof kCheckpointMagic];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);

    const std::uint32_t n_arrays = read_u32(in);
    std::map<std::string, NamedArray> arrays;
    for (std::uint32_t a = 0; a < n_arrays; ++a) {
        const std::uint32_t name_len = read_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const std::uint32_t ndim = read_u32(in);
        NamedArray arr;
        std::uint64_t total = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            std::uint64_t dim = 0;
            in.read(reinterpret_cast<char*>(&dim), sizeof dim);
            arr.dims.push_back(dim);
            total *= dim;
        }
        arr.data.resize(total);
        in.read(reinterpret_cast<char*>(arr.data.data()),
                static_cast<std::streamsize>(total * sizeof(double)));
        if (!in) throw std::runtime_error("checkpoint: truncated file");
        arrays.emplace(std::move(name), std::move(arr));
    }

    auto get = [&](const std::string& name) -> NamedArray& {
        auto it = arrays.find(name);
        if (it == arrays.end()) throw std::runtime_error("checkpoint: missing array " + name);
        return it->second;
    };

    Model m;
    for (std::size_t l = 0;; ++l) {
        const std::string base = "hidden." + std::to_string(l);
        if (arrays.find(base + ".w") == arrays.end()) break;
        NamedArray& w = get(base + ".w");
        NamedArray& b = get(base + ".b");
        if (w.dims.size() != 2 || b.dims.size() != 1 || b.dims[0] != w.dims[0])
            throw std::runtime_error("checkpoint: bad shapes for " + base);
        Layer layer;
        layer.w = linalg::Matrix(w.dims[0], w.dims[1]);
        layer.w.data() = std::move(w.data);
        layer.b = std::move(b.data);
        m.hidden.push_back(std::move(layer));
    }
    NamedArray& hw = get("head.w");
    NamedArray& hb = get("head.b");
    if (hw.dims.size() != 2 || hb.dims.size() != 1 || hb.dims[0] != hw.dims[0])
        throw std::runtime_error("checkpoint: bad head shapes");
    m.head.w = linalg::Matrix(hw.dims[0], hw.dims[1]);
    m.head.w.data() = std::move(hw.data);
    m.head.b = std::move(hb.data);
    for (double v : get("class_order").data) m.class_order.push_back(static_cast<int>(v));
    m.old_boundary = static_cast<std::size_t>(get("old_boundary").data.at(0));
    if (m.class_order.size() != m.head.w.rows() || m.old_boundary > m.class_order.size())
        throw std::runtime_error("checkpoint: inconsistent class metadata");
    return m;
}

}  // namespace fedcbdr::nn
