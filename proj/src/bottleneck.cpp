#include "cbmkit/bottleneck.hpp"

#include <cmath>

namespace cbmkit {

namespace {

constexpr double kNormTolerance = 1e-3;

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

void check_tau(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) fail(ErrorCode::BadTau, "temperature must be positive and finite");
}

// Bottleneck outputs for every batch slot: row j is cbl * psi_j.
Matrix bottleneck_outputs(const BottleneckModel& model, const Batch& batch) {
    return matmul_transposed(batch.psi, model.cbl);
}

// score(k, j) = alpha * <cbl row c_k, phi_j> with phi_j the raw dot products of image j.
// psi already carries the alpha factor, so this is just h_j[c_k].
Matrix pair_scores(const Batch& batch, const Matrix& h) {
    const std::size_t b = batch.size();
    Matrix s(b, b);
    for (std::size_t k = 0; k < b; ++k) {
        for (std::size_t j = 0; j < b; ++j) s(k, j) = h(j, batch.concept_indices[k]);
    }
    return s;
}

std::vector<double> column(const Matrix& m, std::size_t c) {
    std::vector<double> out(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) out[r] = m(r, c);
    return out;
}

// Mean over k of the symmetric log-softmax terms of a square logit matrix:
// row term uses row k, column term uses column k, both with target k.
double symmetric_nll(const Matrix& row_logits, const Matrix& col_logits) {
    const std::size_t b = row_logits.rows();
    double total = 0.0;
    for (std::size_t k = 0; k < b; ++k) {
        total += row_logits(k, k) - log_sum_exp(row_logits.row(k));
        total += col_logits(k, k) - log_sum_exp(column(col_logits, k));
    }
    return -total / (2.0 * static_cast<double>(b));
}

// d(symmetric_nll)/d(row_logits) and d/d(col_logits), summed entrywise.
Matrix symmetric_nll_grad(const Matrix& row_logits, const Matrix& col_logits) {
    const std::size_t b = row_logits.rows();
    const double scale = 1.0 / (2.0 * static_cast<double>(b));
    Matrix g(b, b);
    for (std::size_t k = 0; k < b; ++k) {
        const auto p = stable_softmax(row_logits.row(k));
        for (std::size_t j = 0; j < b; ++j) g(k, j) += scale * (p[j] - (j == k ? 1.0 : 0.0));
    }
    for (std::size_t k = 0; k < b; ++k) {
        const auto q = stable_softmax(column(col_logits, k));
        for (std::size_t j = 0; j < b; ++j) g(j, k) += scale * (q[j] - (j == k ? 1.0 : 0.0));
    }
    return g;
}

// Pushes a gradient w.r.t. pair_scores back onto the bottleneck rows it reads.
void accumulate_score_grad(const Batch& batch, const Matrix& score_grad, Matrix& cbl_grad) {
    const std::size_t b = batch.size();
    for (std::size_t k = 0; k < b; ++k) {
        auto grow = cbl_grad.row(batch.concept_indices[k]);
        for (std::size_t j = 0; j < b; ++j) {
            const double coeff = score_grad(k, j);
            if (coeff == 0.0) continue;
            const auto psi = batch.psi.row(j);
            for (std::size_t m = 0; m < grow.size(); ++m) grow[m] += coeff * psi[m];
        }
    }
}

struct SparseLogits {
    Matrix clamped;  // max(score, clamp)
    Matrix row;
    Matrix col;
};

SparseLogits sparse_logits(const Matrix& scores, double tau, const GumbelNoise& noise) {
    const std::size_t b = scores.rows();
    if (noise.row.size() != b || noise.col.size() != b) fail(ErrorCode::Shape, "Gumbel noise must have one entry per batch slot");
    SparseLogits out{Matrix(b, b), Matrix(b, b), Matrix(b, b)};
    for (std::size_t k = 0; k < b; ++k) {
        for (std::size_t j = 0; j < b; ++j) {
            const double a = std::max(scores(k, j), kScoreClamp);
            out.clamped(k, j) = a;
            out.row(k, j) = (std::log(a) + noise.row[j]) / tau;
            // Column term of slot j ranges over rows k with noise indexed by the row.
            out.col(k, j) = (std::log(a) + noise.col[k]) / tau;
        }
    }
    return out;
}

double hard_symmetric_nll(const Matrix& row_logits, const Matrix& col_logits) {
    const std::size_t b = row_logits.rows();
    const double miss = std::log(kScoreClamp);
    double total = 0.0;
    for (std::size_t k = 0; k < b; ++k) {
        total += argmax(row_logits.row(k)) == k ? 0.0 : miss;
        total += argmax(column(col_logits, k)) == k ? 0.0 : miss;
    }
    return -total / (2.0 * static_cast<double>(b));
}

// Softmax minus one-hot, divided by the batch size: d(mean CE)/d(logits) for one sample.
std::vector<double> ce_logit_grad(std::span<const double> logits, std::size_t label, std::size_t batch) {
    auto p = stable_softmax(logits);
    p[label] -= 1.0;
    for (double& x : p) x /= static_cast<double>(batch);
    return p;
}

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

std::string loss_name(const LossKind& kind) {
    return std::visit(Overloaded{[](const ContrastiveLoss&) { return std::string("contrastive"); },
                                 [](const SparseLoss&) { return std::string("sparse"); },
                                 [](const L1Loss&) { return std::string("l1"); }},
                      kind);
}

void validate_loss(const LossKind& kind) {
    if (const auto* s = std::get_if<SparseLoss>(&kind)) {
        const auto& t = s->schedule;
        require(t.tau_min > 0.0 && t.tau0 >= t.tau_min && std::isfinite(t.tau0), ErrorCode::BadSpec,
                "tau schedule needs tau0 >= tau_min > 0");
        require(t.anneal_end_fraction > 0.0 && t.anneal_end_fraction <= 1.0, ErrorCode::BadSpec,
                "anneal_end_fraction must lie in (0, 1]");
    }
    if (const auto* l = std::get_if<L1Loss>(&kind)) {
        require(std::isfinite(l->lambda) && l->lambda >= 0.0, ErrorCode::BadSpec, "lambda must be finite and >= 0");
    }
}

double BottleneckModel::alpha() const { return std::exp(alpha_log); }

BottleneckModel BottleneckModel::initialize(std::size_t num_concepts, std::size_t num_classes, Rng& rng,
                                            double alpha_log) {
    require(num_concepts >= 1 && num_classes >= 1, ErrorCode::BadSpec, "model needs at least one concept and class");
    BottleneckModel model;
    model.cbl = Matrix::identity(num_concepts);
    model.fc = Matrix(num_classes, num_concepts);
    const double bound = std::sqrt(6.0 / static_cast<double>(num_concepts + num_classes));
    for (double& w : model.fc.data()) w = rng.uniform(-bound, bound);
    model.alpha_log = alpha_log;
    return model;
}

void validate_model(const BottleneckModel& model) {
    require(model.cbl.rows() == model.cbl.cols() && model.cbl.rows() >= 1, ErrorCode::Shape, "CBL must be square");
    require(model.fc.cols() == model.cbl.rows() && model.fc.rows() >= 1, ErrorCode::Shape,
            "final layer width must equal the concept count");
    require(std::isfinite(model.alpha_log), ErrorCode::NonFinite, "alpha_log is not finite");
}

void validate_batch(const BottleneckModel& model, const Batch& batch) {
    validate_model(model);
    const std::size_t b = batch.size();
    require(b >= 1, ErrorCode::Shape, "empty batch");
    require(batch.psi.cols() == model.num_concepts(), ErrorCode::Shape, "psi width must equal the concept count");
    require(batch.labels.size() == b && batch.concept_indices.size() == b, ErrorCode::Shape,
            "labels and concept indices must have one entry per batch slot");
    std::vector<bool> seen(model.num_concepts(), false);
    for (std::size_t k = 0; k < b; ++k) {
        require(batch.labels[k] < model.num_classes(), ErrorCode::LabelRange, "batch label out of range");
        const std::size_t c = batch.concept_indices[k];
        require(c < model.num_concepts(), ErrorCode::Shape, "concept index out of range");
        require(!seen[c], ErrorCode::Shape, "concept indices within a batch must be distinct");
        seen[c] = true;
    }
}

Matrix compute_scores(const EmbeddingSet& images, const EmbeddingSet& concepts, double alpha_log) {
    require(images.dim() == concepts.dim(), ErrorCode::Shape, "images and concepts must share a dim");
    for (const Matrix* m : {&images.matrix, &concepts.matrix}) {
        for (std::size_t r = 0; r < m->rows(); ++r) {
            const double n = norm2(m->row(r));
            if (std::abs(n - 1.0) > kNormTolerance) {
                fail(ErrorCode::NotNormalized, "row " + std::to_string(r) + " has norm " + std::to_string(n));
            }
        }
    }
    Matrix psi = matmul_transposed(images.matrix, concepts.matrix);
    const double alpha = std::exp(alpha_log);
    for (double& x : psi.data()) x *= alpha;
    return psi;
}

Activations forward(const BottleneckModel& model, std::span<const double> psi_row) {
    require(psi_row.size() == model.num_concepts(), ErrorCode::Shape, "psi row length must equal the concept count");
    Activations a;
    a.h = matvec(model.cbl, psi_row);
    a.logits = matvec(model.fc, a.h);
    return a;
}

double loss_ce(std::span<const double> logits, std::size_t label) {
    if (label >= logits.size()) fail(ErrorCode::LabelRange, "label outside logits");
    return log_sum_exp(logits) - logits[label];
}

double mean_cross_entropy(const BottleneckModel& model, const Batch& batch) {
    validate_batch(model, batch);
    double total = 0.0;
    for (std::size_t k = 0; k < batch.size(); ++k) total += loss_ce(forward(model, batch.psi.row(k)).logits, batch.labels[k]);
    return total / static_cast<double>(batch.size());
}

double loss_contrastive(const BottleneckModel& model, const Batch& batch) {
    validate_batch(model, batch);
    const Matrix s = pair_scores(batch, bottleneck_outputs(model, batch));
    return symmetric_nll(s, s);
}

double loss_sparse(const BottleneckModel& model, const Batch& batch, double tau, const GumbelNoise& noise, bool hard) {
    check_tau(tau);
    validate_batch(model, batch);
    const Matrix s = pair_scores(batch, bottleneck_outputs(model, batch));
    const auto logits = sparse_logits(s, tau, noise);
    return hard ? hard_symmetric_nll(logits.row, logits.col) : symmetric_nll(logits.row, logits.col);
}

double loss_l1_objective(const BottleneckModel& model, const Batch& batch, double lambda) {
    require(std::isfinite(lambda) && lambda >= 0.0, ErrorCode::BadSpec, "lambda must be finite and >= 0");
    double l1 = 0.0;
    for (double w : model.cbl.data()) l1 += std::abs(w);
    return mean_cross_entropy(model, batch) + lambda / static_cast<double>(model.num_concepts()) * l1;
}

Gradients backward(const BottleneckModel& model, const Batch& batch, const LossKind& kind, double tau,
                   const GumbelNoise* noise) {
    validate_batch(model, batch);
    validate_loss(kind);
    const std::size_t b = batch.size();
    const std::size_t d = model.num_concepts();

    Gradients g{Matrix(d, d), Matrix(model.num_classes(), d), Matrix(model.num_classes(), d)};
    const Matrix h = bottleneck_outputs(model, batch);

    // Final layer: cross-entropy with h treated as a constant input.
    std::vector<std::vector<double>> logit_grads(b);
    double ce_total = 0.0;
    for (std::size_t k = 0; k < b; ++k) {
        const auto logits = matvec(model.fc, h.row(k));
        ce_total += loss_ce(logits, batch.labels[k]);
        logit_grads[k] = ce_logit_grad(logits, batch.labels[k], b);
        const auto hk = h.row(k);
        for (std::size_t c = 0; c < model.num_classes(); ++c) {
            auto grow = g.fc.row(c);
            for (std::size_t m = 0; m < d; ++m) grow[m] += logit_grads[k][c] * hk[m];
        }
    }
    g.ce_loss = ce_total / static_cast<double>(b);

    std::visit(Overloaded{
                   [&](const ContrastiveLoss&) {
                       const Matrix s = pair_scores(batch, h);
                       g.cbl_loss = symmetric_nll(s, s);
                       accumulate_score_grad(batch, symmetric_nll_grad(s, s), g.cbl);
                   },
                   [&](const SparseLoss& sparse) {
                       check_tau(tau);
                       if (!noise) fail(ErrorCode::BadSpec, "sparse objective needs Gumbel noise");
                       const Matrix s = pair_scores(batch, h);
                       const auto logits = sparse_logits(s, tau, *noise);
                       g.cbl_loss = sparse.hard ? hard_symmetric_nll(logits.row, logits.col)
                                                : symmetric_nll(logits.row, logits.col);
                       Matrix score_grad = symmetric_nll_grad(logits.row, logits.col);
                       for (std::size_t k = 0; k < b; ++k) {
                           for (std::size_t j = 0; j < b; ++j) {
                               // Clamped scores are constant, so no gradient flows through them.
                               score_grad(k, j) = s(k, j) > kScoreClamp ? score_grad(k, j) / (tau * s(k, j)) : 0.0;
                           }
                       }
                       accumulate_score_grad(batch, score_grad, g.cbl);
                   },
                   [&](const L1Loss& l1) {
                       // Cross-entropy through the whole stack, differentiated w.r.t. the bottleneck only.
                       for (std::size_t k = 0; k < b; ++k) {
                           std::vector<double> dh(d, 0.0);
                           for (std::size_t c = 0; c < model.num_classes(); ++c) {
                               const auto fc_row = model.fc.row(c);
                               for (std::size_t m = 0; m < d; ++m) dh[m] += logit_grads[k][c] * fc_row[m];
                           }
                           const auto psi = batch.psi.row(k);
                           for (std::size_t r = 0; r < d; ++r) {
                               auto grow = g.cbl.row(r);
                               for (std::size_t m = 0; m < d; ++m) grow[m] += dh[r] * psi[m];
                           }
                       }
                       const double coeff = l1.lambda / static_cast<double>(d);
                       double penalty = 0.0;
                       for (std::size_t i = 0; i < g.cbl.size(); ++i) {
                           const double w = model.cbl.data()[i];
                           penalty += std::abs(w);
                           g.cbl.data()[i] += coeff * sign(w);
                       }
                       g.cbl_loss = g.ce_loss + coeff * penalty;
                       g.cbl_objective_fc = g.fc;
                   }},
               kind);
    return g;
}

void validate_optimizer(const OptimizerConfig& c) {
    require(std::isfinite(c.lr) && c.lr >= 0.0, ErrorCode::BadSpec, "learning rate must be finite and >= 0");
    require(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0, ErrorCode::BadSpec,
            "betas must lie in [0, 1)");
    require(c.eps > 0.0, ErrorCode::BadSpec, "eps must be positive");
    require(std::isfinite(c.weight_decay) && c.weight_decay >= 0.0, ErrorCode::BadSpec, "weight decay must be >= 0");
}

OptimizerState OptimizerState::for_parameter(const OptimizerConfig& config, const Matrix& param) {
    validate_optimizer(config);
    return {config, Matrix(param.rows(), param.cols()), Matrix(param.rows(), param.cols()), 0};
}

void adam_step(OptimizerState& state, Matrix& param, const Matrix& grad) {
    require(param.rows() == grad.rows() && param.cols() == grad.cols(), ErrorCode::Shape, "gradient shape mismatch");
    require(state.m.rows() == param.rows() && state.m.cols() == param.cols() && state.v.rows() == param.rows() &&
                state.v.cols() == param.cols(),
            ErrorCode::Shape, "optimizer moments do not match the parameter");
    const auto& c = state.config;
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bias1 = 1.0 - std::pow(c.beta1, t);
    const double bias2 = 1.0 - std::pow(c.beta2, t);
    auto p = param.data();
    auto m = state.m.data();
    auto v = state.v.data();
    const auto gr = grad.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (c.kind == OptimizerKind::AdamW) p[i] -= c.lr * c.weight_decay * p[i];
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gr[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gr[i] * gr[i];
        const double m_hat = m[i] / bias1;
        const double v_hat = v[i] / bias2;
        p[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
}

double tau_at(const TauSchedule& schedule, std::size_t step, std::size_t total_steps) {
    require(total_steps >= 1, ErrorCode::BadSpec, "total_steps must be >= 1");
    validate_loss(SparseLoss{schedule, false});
    const double end = schedule.anneal_end_fraction * static_cast<double>(total_steps);
    const double t = static_cast<double>(step);
    if (t >= end) return schedule.tau_min;
    const double rate = std::log(schedule.tau0 / schedule.tau_min) / end;
    return std::max(schedule.tau_min, schedule.tau0 * std::exp(-rate * t));
}

}  // namespace cbmkit
