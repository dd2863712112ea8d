#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "cbmkit/embedding_store.hpp"

namespace cbmkit {

/// Log of the logit scale used for bottleneck training (alpha = exp(2.659)).
inline constexpr double kDefaultAlphaLog = 2.659;
/// Lower clamp applied to scores before the logarithm of the Gumbel objective.
inline constexpr double kScoreClamp = 1e-6;

struct TauSchedule {
    double tau0 = 5.0;
    double tau_min = 0.5;
    double anneal_end_fraction = 0.8;
};

struct ContrastiveLoss {};
struct SparseLoss {
    TauSchedule schedule;
    /// Straight-through one-hot samples in the forward pass.
    bool hard = false;
};
struct L1Loss {
    double lambda = 0.05;
};

using LossKind = std::variant<ContrastiveLoss, SparseLoss, L1Loss>;

std::string loss_name(const LossKind& kind);
void validate_loss(const LossKind& kind);

/// Concept bottleneck layer `cbl` (|D| x |D|), final layer `fc` (|C| x |D|), logit scale exp(alpha_log).
struct BottleneckModel {
    Matrix cbl;
    Matrix fc;
    double alpha_log = kDefaultAlphaLog;

    std::size_t num_concepts() const noexcept { return cbl.rows(); }
    std::size_t num_classes() const noexcept { return fc.rows(); }
    double alpha() const;

    /// Identity bottleneck, Glorot-uniform final layer.
    static BottleneckModel initialize(std::size_t num_concepts, std::size_t num_classes, Rng& rng,
                                      double alpha_log = kDefaultAlphaLog);
};

void validate_model(const BottleneckModel& model);

/// One training batch. Slot k pairs psi row k (an image) with bottleneck row concept_indices[k].
struct Batch {
    Matrix psi;
    std::vector<std::size_t> labels;
    std::vector<std::size_t> concept_indices;

    std::size_t size() const noexcept { return psi.rows(); }
};

void validate_batch(const BottleneckModel& model, const Batch& batch);

/// psi(k, j) = exp(alpha_log) * <image_k, concept_j>; both sets must be unit-normalized.
Matrix compute_scores(const EmbeddingSet& images, const EmbeddingSet& concepts, double alpha_log);

struct Activations {
    std::vector<double> h;       // bottleneck output, |D|
    std::vector<double> logits;  // |C|
};

Activations forward(const BottleneckModel& model, std::span<const double> psi_row);

double loss_ce(std::span<const double> logits, std::size_t label);
/// Mean cross-entropy of the final layer over the batch.
double mean_cross_entropy(const BottleneckModel& model, const Batch& batch);

double loss_contrastive(const BottleneckModel& model, const Batch& batch);

/// Gumbel noise for the two symmetric terms; the trainer passes the same draw for both.
struct GumbelNoise {
    std::vector<double> row;
    std::vector<double> col;

    static GumbelNoise zeros(std::size_t n) { return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)}; }
    static GumbelNoise shared(std::vector<double> g) { return {g, std::move(g)}; }
};

double loss_sparse(const BottleneckModel& model, const Batch& batch, double tau, const GumbelNoise& noise, bool hard);
double loss_l1_objective(const BottleneckModel& model, const Batch& batch, double lambda);

struct Gradients {
    Matrix cbl;
    Matrix fc;
    /// Derivative of the bottleneck objective w.r.t. the final layer. Reported for inspection and
    /// never applied: zero for the contrastive objectives, the cross-entropy gradient for L1.
    Matrix cbl_objective_fc;
    double cbl_loss = 0.0;
    double ce_loss = 0.0;
};

/// `cbl` is the gradient of the selected bottleneck objective; `fc` is the gradient of mean
/// cross-entropy with the bottleneck output held fixed. `noise` is required for SparseLoss.
Gradients backward(const BottleneckModel& model, const Batch& batch, const LossKind& kind, double tau,
                   const GumbelNoise* noise = nullptr);

enum class OptimizerKind { Adam, AdamW };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // AdamW only
};

void validate_optimizer(const OptimizerConfig& config);

struct OptimizerState {
    OptimizerConfig config;
    Matrix m;
    Matrix v;
    std::uint64_t step = 0;

    static OptimizerState for_parameter(const OptimizerConfig& config, const Matrix& param);
    friend bool operator==(const OptimizerState& a, const OptimizerState& b) {
        return a.m == b.m && a.v == b.v && a.step == b.step && a.config.kind == b.config.kind &&
               a.config.lr == b.config.lr && a.config.beta1 == b.config.beta1 && a.config.beta2 == b.config.beta2 &&
               a.config.eps == b.config.eps && a.config.weight_decay == b.config.weight_decay;
    }
};

/// Bias-corrected Adam; AdamW first applies decoupled decay param -= lr * wd * param.
void adam_step(OptimizerState& state, Matrix& param, const Matrix& grad);

/// Exponential anneal from tau0 that reaches tau_min at anneal_end_fraction * total_steps.
double tau_at(const TauSchedule& schedule, std::size_t step, std::size_t total_steps);

}  // namespace cbmkit
