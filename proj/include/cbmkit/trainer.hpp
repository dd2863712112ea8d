#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cbmkit/bottleneck.hpp"

namespace cbmkit {

struct TrainConfig {
    LossKind loss = SparseLoss{};
    std::size_t steps = 2000;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    OptimizerConfig cbl_optimizer{OptimizerKind::Adam, 1e-3, 0.9, 0.999, 1e-8, 0.0};
    OptimizerConfig fc_optimizer{OptimizerKind::AdamW, 1e-4, 0.9, 0.999, 1e-8, 0.01};
    std::size_t eval_every = 100;
    double alpha_log = kDefaultAlphaLog;
    unsigned threads = 1;
};

/// Canonical JSON form; the checkpoint stores a digest of it.
std::string train_config_json(const TrainConfig& cfg);
std::string config_digest(const TrainConfig& cfg);

inline constexpr int kCheckpointFormatVersion = 1;

enum class ModelKind { Cbm, Probe };
std::string to_string(ModelKind kind);

/// For ModelKind::Probe the bottleneck is empty and `model.fc` holds the |C| x |C| probe weight.
struct Checkpoint {
    int format_version = kCheckpointFormatVersion;
    ModelKind kind = ModelKind::Cbm;
    BottleneckModel model;
    OptimizerState cbl_optimizer;
    OptimizerState fc_optimizer;
    std::uint64_t step = 0;
    std::string config_digest;
};

bool bit_equal(const Checkpoint& a, const Checkpoint& b);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint parse_checkpoint(std::string_view bytes);

struct MetricsRow {
    std::size_t step = 0;  // 1-based count of completed steps
    double cbl_loss = 0.0;
    double ce_loss = 0.0;
    double train_acc = 0.0;
    double tau = 0.0;  // 0 when the objective has no temperature
};

std::string metrics_csv(const std::vector<MetricsRow>& rows);

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<MetricsRow> metrics;
};

/// Thrown when an update produces a non-finite weight; carries the last finite state.
class DivergedError : public Error {
public:
    DivergedError(const std::string& message, Checkpoint last_finite)
        : Error(ErrorCode::Diverged, message), last_finite_(std::move(last_finite)) {}

    const Checkpoint& last_finite() const noexcept { return last_finite_; }

private:
    Checkpoint last_finite_;
};

/// Sequential bottleneck training: each step updates the bottleneck with its own objective and
/// optimizer, then the final layer with cross-entropy on the detached bottleneck output.
TrainResult train_cbm(const DatasetBundle& bundle, const TrainConfig& cfg);

/// Single |C| x |C| layer over scaled image-class cosines, trained with cross-entropy.
TrainResult train_linear_probe(const DatasetBundle& bundle, const TrainConfig& cfg);

struct ConceptActivation {
    std::size_t index = 0;
    std::string name;
    double activation = 0.0;
};

struct TopkSample {
    std::size_t image_index = 0;
    std::vector<ConceptActivation> concepts;
};

struct EvalReport {
    double accuracy = 0.0;
    std::vector<std::size_t> predictions;
    /// confusion[true][predicted]
    std::vector<std::vector<std::size_t>> confusion;
    std::vector<TopkSample> topk_samples;
};

struct EvalOptions {
    std::size_t k = 10;
    /// Top-k explanations for the first this-many images of every class.
    std::size_t samples_per_class = 1;
    unsigned threads = 1;
};

EvalReport evaluate_model(const BottleneckModel& model, const DatasetBundle& bundle, const EvalOptions& options = {});
EvalReport evaluate_checkpoint(const Checkpoint& ckpt, const DatasetBundle& bundle, const EvalOptions& options = {});

/// The k largest bottleneck activations for one image, descending, ties in index order.
std::vector<ConceptActivation> explain_topk(const BottleneckModel& model, std::span<const double> image,
                                            const EmbeddingSet& concepts, std::size_t k);

std::string eval_report_json(const EvalReport& report, const std::vector<std::string>& class_names);
std::string confusion_csv(const EvalReport& report, const std::vector<std::string>& class_names);
std::string topk_json(std::size_t image_index, const std::vector<ConceptActivation>& items);

/// Gini coefficient of |x|; 0 for an all-zero vector.
double gini(std::span<const double> x);
/// Mean Gini coefficient of the bottleneck output over all bundle images.
double mean_activation_gini(const BottleneckModel& model, const DatasetBundle& bundle);
/// Fraction of entries whose magnitude is strictly below `threshold`.
double small_weight_fraction(const Matrix& m, double threshold);

}  // namespace cbmkit
