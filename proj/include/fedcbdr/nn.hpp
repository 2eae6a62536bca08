#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedcbdr/linalg.hpp"

namespace fedcbdr::nn {

// One dense layer; w is out x in. Doubles throughout as elsewhere.
struct Layer {
    linalg::Matrix w;
    std::vector<double> b;
};

// MLP with ReLU hidden layers and a linear head over the classes seen so far.
// class_order lists seen class ids; positions [0, old_boundary) are the "old"
// block, the rest "new". Head row i scores class_order[i].
struct Model {
    std::vector<Layer> hidden;
    Layer head;
    std::vector<int> class_order;
    std::size_t old_boundary = 0;

    std::size_t input_dim() const;
    std::size_t feature_dim() const;
    std::size_t num_classes() const { return class_order.size(); }
};

struct LogitsSplit {
    std::vector<double> z_old;
    std::vector<double> z_new;
    std::vector<double> concat() const;
};

struct Forward {
    std::vector<double> features;  // post-ReLU last hidden layer
    LogitsSplit logits;
};

struct TtsParams {
    double tau_old = 0.9;
    double tau_new = 1.1;
    double w_old = 1.1;
    double w_new = 0.9;

    bool operator==(const TtsParams&) const = default;
};

struct TtsResult {
    double loss = 0.0;
    // d(total loss)/d(raw logits), one vector of length C_seen per sample
    std::vector<std::vector<double>> grad_logits;
    // per-sample contribution (group coefficient included); sums to loss
    std::vector<double> sample_terms;
};

struct CeResult {
    double loss = 0.0;
    std::vector<double> grad;  // softmax - one_hot
};

// Gradient accumulator shaped like the model's parameters.
struct ModelGrad {
    std::vector<Layer> hidden;
    Layer head;
};

struct BatchGrad {
    ModelGrad grad;
    double loss = 0.0;
};

Model init_model(std::size_t input_dim, const std::vector<std::size_t>& hidden_dims,
                 const std::vector<int>& initial_classes, std::uint64_t seed);

Forward forward(const Model& model, const std::vector<double>& x);

// labels are positions into class_order, not raw class ids.
TtsResult tts_loss(const std::vector<LogitsSplit>& batch, const std::vector<std::size_t>& labels,
                   const std::vector<char>& is_old_sample, const TtsParams& params);

CeResult ce_loss(const std::vector<double>& logits, std::size_t label);

Model sgd_step(const Model& model, const ModelGrad& grads, double lr, double weight_decay);

Model expand_head(const Model& model, const std::vector<int>& new_classes, std::uint64_t seed);

ModelGrad zero_grad(const Model& model);

// Forward + backward over a minibatch; loss and grads from tts_loss applied
// through the network. xs holds pointers to avoid copying feature vectors.
// sample_weights, when given, scale each sample's loss term and gradient.
BatchGrad batch_gradients(const Model& model, const std::vector<const std::vector<double>*>& xs,
                          const std::vector<std::size_t>& labels,
                          const std::vector<char>& is_old_sample, const TtsParams& params,
                          const std::vector<double>* sample_weights = nullptr);

// Flat named-array checkpoint; round-trips bit-exactly.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace fedcbdr::nn
