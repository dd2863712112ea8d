#include "cbmkit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <json.hpp>
#include <numeric>
#include <sstream>
#include <thread>

#include "cbmkit/io_util.hpp"

namespace cbmkit {

using nlohmann::json;

namespace {

constexpr char kCheckpointMagic[8] = {'C', 'B', 'M', 'K', 'C', 'K', 'P', 'T'};

// Stream ids for the independent random sequences of one run.
enum : std::uint64_t { kInitStream = 10, kBatchStream = 11, kConceptStream = 12, kNoiseStream = 13 };

std::string optimizer_kind_name(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "adamw"; }

OptimizerKind parse_optimizer_kind(const std::string& s) {
    if (s == "adam") return OptimizerKind::Adam;
    if (s == "adamw") return OptimizerKind::AdamW;
    fail(ErrorCode::Corrupt, "unknown optimizer kind '" + s + "'");
}

json optimizer_config_json(const OptimizerConfig& c) {
    return {{"kind", optimizer_kind_name(c.kind)}, {"lr", c.lr},   {"beta1", c.beta1},
            {"beta2", c.beta2},                    {"eps", c.eps}, {"weight_decay", c.weight_decay}};
}

json loss_json(const LossKind& kind) {
    json out = {{"name", loss_name(kind)}};
    if (const auto* s = std::get_if<SparseLoss>(&kind)) {
        out["tau0"] = s->schedule.tau0;
        out["tau_min"] = s->schedule.tau_min;
        out["anneal_end_fraction"] = s->schedule.anneal_end_fraction;
        out["hard"] = s->hard;
    } else if (const auto* l = std::get_if<L1Loss>(&kind)) {
        out["lambda"] = l->lambda;
    }
    return out;
}

void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t, std::size_t)>& body) {
    const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(threads, n));
    if (workers == 1) {
        body(0, n);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    {
        std::vector<std::jthread> pool;
        const std::size_t chunk = (n + workers - 1) / workers;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    body(std::min(n, w * chunk), std::min(n, (w + 1) * chunk));
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

// Argmax of (fc * cbl * psi_i) for each image; an empty cbl means the identity.
std::vector<std::size_t> predict_all(const BottleneckModel& model, const Matrix& psi, unsigned threads) {
    std::vector<std::size_t> out(psi.rows());
    parallel_for(psi.rows(), threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const auto h = model.cbl.empty() ? std::vector<double>(psi.row(i).begin(), psi.row(i).end())
                                             : matvec(model.cbl, psi.row(i));
            out[i] = argmax(matvec(model.fc, h));
        }
    });
    return out;
}

double accuracy_of(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& labels) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
    return labels.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(labels.size());
}

void validate_train_config(const TrainConfig& cfg, const DatasetBundle& bundle, bool needs_concepts) {
    validate_bundle(bundle);
    validate_loss(cfg.loss);
    validate_optimizer(cfg.cbl_optimizer);
    validate_optimizer(cfg.fc_optimizer);
    require(cfg.steps >= 1, ErrorCode::BadSpec, "steps must be >= 1");
    require(cfg.eval_every >= 1, ErrorCode::BadSpec, "eval_every must be >= 1");
    require(cfg.batch_size >= 1 && cfg.batch_size <= bundle.num_images(), ErrorCode::BadSpec,
            "batch size must lie in [1, number of images]");
    if (needs_concepts) {
        require(cfg.batch_size <= bundle.num_concepts(), ErrorCode::BadSpec, "batch size must not exceed the concept count");
    }
    require(std::isfinite(cfg.alpha_log), ErrorCode::BadSpec, "alpha_log must be finite");
}

// Uniform batches without replacement; the order is reshuffled whenever an epoch runs out.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::size_t batch, Rng rng) : order_(n), batch_(batch), rng_(rng) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        shuffle(rng_, order_);
    }

    std::vector<std::size_t> next() {
        if (cursor_ + batch_ > order_.size()) {
            shuffle(rng_, order_);
            cursor_ = 0;
        }
        std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                     order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_));
        cursor_ += batch_;
        return out;
    }

private:
    std::vector<std::size_t> order_;
    std::size_t batch_;
    std::size_t cursor_ = 0;
    Rng rng_;
};

Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
    Matrix out(rows.size(), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy(m.row(rows[i]).begin(), m.row(rows[i]).end(), out.row(i).begin());
    return out;
}

bool state_finite(const BottleneckModel& model) { return model.cbl.all_finite() && model.fc.all_finite(); }

}  // namespace

std::string to_string(ModelKind kind) { return kind == ModelKind::Cbm ? "cbm" : "probe"; }

std::string train_config_json(const TrainConfig& cfg) {
    const json doc = {{"loss", loss_json(cfg.loss)},
                      {"steps", cfg.steps},
                      {"batch_size", cfg.batch_size},
                      {"seed", cfg.seed},
                      {"cbl_optimizer", optimizer_config_json(cfg.cbl_optimizer)},
                      {"fc_optimizer", optimizer_config_json(cfg.fc_optimizer)},
                      {"eval_every", cfg.eval_every},
                      {"alpha_log", cfg.alpha_log}};
    return doc.dump();
}

std::string config_digest(const TrainConfig& cfg) { return fnv1a64_hex(train_config_json(cfg)); }

TrainResult train_cbm(const DatasetBundle& bundle, const TrainConfig& cfg) {
    validate_train_config(cfg, bundle, true);
    const Rng root(cfg.seed);
    Rng init_rng = root.derive(kInitStream);
    Rng concept_rng = root.derive(kConceptStream);
    Rng noise_rng = root.derive(kNoiseStream);
    BatchSampler sampler(bundle.num_images(), cfg.batch_size, root.derive(kBatchStream));

    const Matrix psi_all = compute_scores(bundle.images, bundle.concepts, cfg.alpha_log);

    TrainResult result;
    Checkpoint& ckpt = result.checkpoint;
    ckpt.kind = ModelKind::Cbm;
    ckpt.model = BottleneckModel::initialize(bundle.num_concepts(), bundle.num_classes(), init_rng, cfg.alpha_log);
    ckpt.cbl_optimizer = OptimizerState::for_parameter(cfg.cbl_optimizer, ckpt.model.cbl);
    ckpt.fc_optimizer = OptimizerState::for_parameter(cfg.fc_optimizer, ckpt.model.fc);
    ckpt.config_digest = config_digest(cfg);

    const auto* sparse = std::get_if<SparseLoss>(&cfg.loss);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto images = sampler.next();
        Batch batch;
        batch.psi = gather_rows(psi_all, images);
        for (std::size_t i : images) batch.labels.push_back(bundle.labels[i]);
        batch.concept_indices = sample_without_replacement(concept_rng, bundle.num_concepts(), cfg.batch_size);

        double tau = 0.0;
        GumbelNoise noise;
        if (sparse) {
            tau = tau_at(sparse->schedule, step, cfg.steps);
            noise = GumbelNoise::shared(sample_gumbel(noise_rng, cfg.batch_size));
        }

        Checkpoint next = ckpt;
        Gradients grads;
        try {
            grads = backward(ckpt.model, batch, cfg.loss, sparse ? tau : 1.0, sparse ? &noise : nullptr);
            adam_step(next.cbl_optimizer, next.model.cbl, grads.cbl);
            adam_step(next.fc_optimizer, next.model.fc, grads.fc);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::NonFinite) throw;
            throw DivergedError("non-finite values at step " + std::to_string(step + 1), ckpt);
        }
        if (!state_finite(next.model)) {
            throw DivergedError("weights became non-finite at step " + std::to_string(step + 1), ckpt);
        }
        next.step = step + 1;
        ckpt = std::move(next);

        if (step % cfg.eval_every == 0) {
            const double acc = accuracy_of(predict_all(ckpt.model, psi_all, cfg.threads), bundle.labels);
            result.metrics.push_back({step + 1, grads.cbl_loss, grads.ce_loss, acc, tau});
        }
    }
    return result;
}

TrainResult train_linear_probe(const DatasetBundle& bundle, const TrainConfig& cfg) {
    validate_train_config(cfg, bundle, false);
    const Rng root(cfg.seed);
    BatchSampler sampler(bundle.num_images(), cfg.batch_size, root.derive(kBatchStream));

    const Matrix scores = compute_scores(bundle.images, bundle.classes, cfg.alpha_log);
    const std::size_t c = bundle.num_classes();

    TrainResult result;
    Checkpoint& ckpt = result.checkpoint;
    ckpt.kind = ModelKind::Probe;
    ckpt.model.alpha_log = cfg.alpha_log;
    // Identity start: the untrained probe reproduces zero-shot predictions.
    ckpt.model.fc = Matrix::identity(c);
    ckpt.fc_optimizer = OptimizerState::for_parameter(cfg.fc_optimizer, ckpt.model.fc);
    ckpt.cbl_optimizer = OptimizerState::for_parameter(cfg.cbl_optimizer, ckpt.model.cbl);
    ckpt.config_digest = config_digest(cfg);

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto images = sampler.next();
        Matrix grad(c, c);
        double loss = 0.0;
        const double inv_b = 1.0 / static_cast<double>(images.size());
        Checkpoint next = ckpt;
        try {
            for (std::size_t i : images) {
                const auto x = scores.row(i);
                const auto logits = matvec(ckpt.model.fc, x);
                loss += loss_ce(logits, bundle.labels[i]) * inv_b;
                auto p = stable_softmax(logits);
                p[bundle.labels[i]] -= 1.0;
                for (std::size_t r = 0; r < c; ++r) {
                    for (std::size_t col = 0; col < c; ++col) grad(r, col) += p[r] * x[col] * inv_b;
                }
            }
            adam_step(next.fc_optimizer, next.model.fc, grad);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::NonFinite) throw;
            throw DivergedError("non-finite values at step " + std::to_string(step + 1), ckpt);
        }
        if (!next.model.fc.all_finite()) {
            throw DivergedError("weights became non-finite at step " + std::to_string(step + 1), ckpt);
        }
        next.step = step + 1;
        ckpt = std::move(next);

        if (step % cfg.eval_every == 0) {
            const double acc = accuracy_of(predict_all(ckpt.model, scores, cfg.threads), bundle.labels);
            result.metrics.push_back({step + 1, 0.0, loss, acc, 0.0});
        }
    }
    return result;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
    std::ostringstream out;
    out.precision(17);
    out << "step,cbl_loss,ce_loss,train_acc,tau\n";
    for (const auto& r : rows) {
        out << r.step << ',' << r.cbl_loss << ',' << r.ce_loss << ',' << r.train_acc << ',' << r.tau << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<ConceptActivation> explain_topk(const BottleneckModel& model, std::span<const double> image,
                                            const EmbeddingSet& concepts, std::size_t k) {
    validate_model(model);
    require(concepts.size() == model.num_concepts(), ErrorCode::Shape, "concept set does not match the model");
    require(k >= 1 && k <= model.num_concepts(), ErrorCode::Shape, "k must lie in [1, number of concepts]");
    require(image.size() == concepts.dim(), ErrorCode::Shape, "image and concept dims differ");
    EmbeddingSet one;
    one.matrix = Matrix(1, image.size(), std::vector<double>(image.begin(), image.end()));
    one.names = {"image"};
    const Matrix psi = compute_scores(one, concepts, model.alpha_log);
    const auto h = matvec(model.cbl, psi.row(0));

    std::vector<std::size_t> order(h.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return h[a] > h[b]; });
    std::vector<ConceptActivation> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back({order[i], concepts.names[order[i]], h[order[i]]});
    return out;
}

namespace {

EvalReport build_report(std::vector<std::size_t> predictions, const std::vector<std::size_t>& labels, std::size_t classes) {
    EvalReport r;
    r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
    std::size_t trace = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        ++r.confusion[labels[i]][predictions[i]];
        trace += labels[i] == predictions[i];
    }
    r.accuracy = labels.empty() ? 0.0 : static_cast<double>(trace) / static_cast<double>(labels.size());
    r.predictions = std::move(predictions);
    return r;
}

}  // namespace

EvalReport evaluate_model(const BottleneckModel& model, const DatasetBundle& bundle, const EvalOptions& options) {
    validate_model(model);
    validate_bundle(bundle);
    require(model.num_concepts() == bundle.num_concepts() && model.num_classes() == bundle.num_classes(),
            ErrorCode::Shape, "model shape does not match the bundle");
    const Matrix psi = compute_scores(bundle.images, bundle.concepts, model.alpha_log);
    EvalReport r = build_report(predict_all(model, psi, options.threads), bundle.labels, bundle.num_classes());

    const std::size_t k = std::min(options.k, model.num_concepts());
    std::vector<std::size_t> taken(bundle.num_classes(), 0);
    for (std::size_t i = 0; i < bundle.num_images() && k > 0; ++i) {
        const std::size_t label = bundle.labels[i];
        if (taken[label] >= options.samples_per_class) continue;
        ++taken[label];
        r.topk_samples.push_back({i, explain_topk(model, bundle.images.matrix.row(i), bundle.concepts, k)});
    }
    return r;
}

EvalReport evaluate_checkpoint(const Checkpoint& ckpt, const DatasetBundle& bundle, const EvalOptions& options) {
    if (ckpt.kind == ModelKind::Cbm) return evaluate_model(ckpt.model, bundle, options);
    validate_bundle(bundle);
    require(ckpt.model.fc.rows() == bundle.num_classes() && ckpt.model.fc.cols() == bundle.num_classes(), ErrorCode::Shape,
            "probe shape does not match the bundle");
    const Matrix scores = compute_scores(bundle.images, bundle.classes, ckpt.model.alpha_log);
    return build_report(predict_all(ckpt.model, scores, options.threads), bundle.labels, bundle.num_classes());
}

std::string eval_report_json(const EvalReport& report, const std::vector<std::string>& class_names) {
    json samples = json::array();
    for (const auto& s : report.topk_samples) samples.push_back(json::parse(topk_json(s.image_index, s.concepts)));
    const json doc = {{"accuracy", report.accuracy},
                      {"classes", class_names},
                      {"confusion", report.confusion},
                      {"predictions", report.predictions},
                      {"topk_samples", samples}};
    return doc.dump(2) + "\n";
}

std::string confusion_csv(const EvalReport& report, const std::vector<std::string>& class_names) {
    std::string out;
    for (std::size_t c = 0; c < class_names.size(); ++c) {
        if (c) out += ',';
        out += csv_field(class_names[c]);
    }
    out += '\n';
    for (const auto& row : report.confusion) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c) out += ',';
            out += std::to_string(row[c]);
        }
        out += '\n';
    }
    return out;
}

std::string topk_json(std::size_t image_index, const std::vector<ConceptActivation>& items) {
    json list = json::array();
    for (const auto& a : items) list.push_back({{"index", a.index}, {"concept", a.name}, {"activation", a.activation}});
    return json{{"image_index", image_index}, {"concepts", list}}.dump(2) + "\n";
}

double gini(std::span<const double> x) {
    if (x.empty()) return 0.0;
    std::vector<double> a(x.size());
    std::transform(x.begin(), x.end(), a.begin(), [](double v) { return std::abs(v); });
    std::sort(a.begin(), a.end());
    const double total = std::accumulate(a.begin(), a.end(), 0.0);
    if (total <= 0.0) return 0.0;
    const double n = static_cast<double>(a.size());
    double weighted = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) weighted += (2.0 * static_cast<double>(i + 1) - n - 1.0) * a[i];
    return weighted / (n * total);
}

double mean_activation_gini(const BottleneckModel& model, const DatasetBundle& bundle) {
    const Matrix psi = compute_scores(bundle.images, bundle.concepts, model.alpha_log);
    double total = 0.0;
    for (std::size_t i = 0; i < psi.rows(); ++i) total += gini(matvec(model.cbl, psi.row(i)));
    return psi.rows() ? total / static_cast<double>(psi.rows()) : 0.0;
}

double small_weight_fraction(const Matrix& m, double threshold) {
    if (m.empty()) return 0.0;
    const auto n = std::count_if(m.data().begin(), m.data().end(), [&](double w) { return std::abs(w) < threshold; });
    return static_cast<double>(n) / static_cast<double>(m.size());
}

// ---------------------------------------------------------------------------
// Checkpoint file: magic, u64 header length, JSON header, raw little-endian f64 blocks.

bool bit_equal(const Checkpoint& a, const Checkpoint& b) {
    return serialize_checkpoint(a) == serialize_checkpoint(b);
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    const std::pair<const char*, const Matrix*> blocks[] = {
        {"cbl", &ckpt.model.cbl},          {"fc", &ckpt.model.fc},          {"cbl_m", &ckpt.cbl_optimizer.m},
        {"cbl_v", &ckpt.cbl_optimizer.v}, {"fc_m", &ckpt.fc_optimizer.m}, {"fc_v", &ckpt.fc_optimizer.v}};
    std::string payload;
    json block_list = json::array();
    for (const auto& [name, m] : blocks) {
        block_list.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
        append_le_f64(payload, m->data());
    }
    auto opt_json = [](const OptimizerState& s) {
        json j = optimizer_config_json(s.config);
        j["step"] = s.step;
        return j;
    };
    const json header = {{"format_version", ckpt.format_version},
                         {"model_kind", to_string(ckpt.kind)},
                         {"alpha_log", ckpt.model.alpha_log},
                         {"step", ckpt.step},
                         {"config_digest", ckpt.config_digest},
                         {"blocks", block_list},
                         {"optimizers", {{"cbl", opt_json(ckpt.cbl_optimizer)}, {"fc", opt_json(ckpt.fc_optimizer)}}},
                         {"payload_bytes", payload.size()},
                         {"payload_fnv1a64", fnv1a64_hex(payload)}};
    const std::string header_text = header.dump();
    std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
    append_le_u64(out, header_text.size());
    out += header_text;
    out += payload;
    return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint parse_checkpoint(std::string_view bytes) {
    constexpr std::size_t kPrefix = sizeof(kCheckpointMagic) + 8;
    if (bytes.size() < kPrefix || std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        fail(ErrorCode::Corrupt, "not a checkpoint file");
    }
    const std::uint64_t header_len = read_le_u64(std::span<const char>(bytes.data() + sizeof(kCheckpointMagic), 8));
    if (header_len > bytes.size() - kPrefix) fail(ErrorCode::Corrupt, "truncated checkpoint header");
    json header;
    try {
        header = json::parse(bytes.substr(kPrefix, header_len));
    } catch (const json::exception&) {
        fail(ErrorCode::Corrupt, "unreadable checkpoint header");
    }
    const std::string_view payload = bytes.substr(kPrefix + header_len);

    Checkpoint ckpt;
    try {
        ckpt.format_version = header.at("format_version").get<int>();
        if (ckpt.format_version != kCheckpointFormatVersion) {
            fail(ErrorCode::Version, "unsupported checkpoint format_version " + std::to_string(ckpt.format_version));
        }
        if (header.at("payload_bytes").get<std::uint64_t>() != payload.size()) {
            fail(ErrorCode::Corrupt, "checkpoint payload is truncated or padded");
        }
        if (header.at("payload_fnv1a64").get<std::string>() != fnv1a64_hex(payload)) {
            fail(ErrorCode::Corrupt, "checkpoint digest mismatch");
        }
        const auto kind = header.at("model_kind").get<std::string>();
        if (kind != "cbm" && kind != "probe") fail(ErrorCode::Corrupt, "unknown model kind '" + kind + "'");
        ckpt.kind = kind == "cbm" ? ModelKind::Cbm : ModelKind::Probe;
        ckpt.model.alpha_log = header.at("alpha_log").get<double>();
        ckpt.step = header.at("step").get<std::uint64_t>();
        ckpt.config_digest = header.at("config_digest").get<std::string>();

        Matrix* targets[] = {&ckpt.model.cbl,     &ckpt.model.fc,      &ckpt.cbl_optimizer.m,
                             &ckpt.cbl_optimizer.v, &ckpt.fc_optimizer.m, &ckpt.fc_optimizer.v};
        const auto& blocks = header.at("blocks");
        if (!blocks.is_array() || blocks.size() != std::size(targets)) fail(ErrorCode::Corrupt, "unexpected block list");
        std::size_t offset = 0;
        for (std::size_t i = 0; i < std::size(targets); ++i) {
            const auto rows = blocks[i].at("rows").get<std::size_t>();
            const auto cols = blocks[i].at("cols").get<std::size_t>();
            const std::size_t len = rows * cols * 8;
            if (offset + len > payload.size()) fail(ErrorCode::Corrupt, "block exceeds payload");
            *targets[i] = Matrix(rows, cols);
            read_le_f64(std::span<const char>(payload.data() + offset, len), targets[i]->data());
            offset += len;
        }
        if (offset != payload.size()) fail(ErrorCode::Corrupt, "trailing bytes after last block");

        auto read_opt = [](const json& j, OptimizerState& s) {
            s.config.kind = parse_optimizer_kind(j.at("kind").get<std::string>());
            s.config.lr = j.at("lr").get<double>();
            s.config.beta1 = j.at("beta1").get<double>();
            s.config.beta2 = j.at("beta2").get<double>();
            s.config.eps = j.at("eps").get<double>();
            s.config.weight_decay = j.at("weight_decay").get<double>();
            s.step = j.at("step").get<std::uint64_t>();
        };
        read_opt(header.at("optimizers").at("cbl"), ckpt.cbl_optimizer);
        read_opt(header.at("optimizers").at("fc"), ckpt.fc_optimizer);
    } catch (const json::exception& e) {
        fail(ErrorCode::Corrupt, std::string("malformed checkpoint header: ") + e.what());
    }
    return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

}  // namespace cbmkit
