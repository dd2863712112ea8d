#include "cbmkit/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <sstream>

#include "cbmkit/cms.hpp"
#include "cbmkit/concepts.hpp"
#include "cbmkit/io_util.hpp"
#include "cbmkit/trainer.hpp"

namespace cbmkit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorCode::Io, "cannot create directory " + dir.string());
}

// Values from `--config file.json` are injected ahead of the explicit arguments so that
// explicit flags win (options keep the last value given).
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
    std::string config_path;
    std::vector<std::string> rest;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            config_path = args[++i];
        } else if (args[i].rfind("--config=", 0) == 0) {
            config_path = args[i].substr(9);
        } else {
            rest.push_back(args[i]);
        }
    }
    if (config_path.empty() || rest.empty()) return rest;

    json doc;
    try {
        doc = json::parse(read_file(config_path));
    } catch (const json::parse_error& e) {
        fail(ErrorCode::Parse, "config " + config_path + ": " + e.what());
    }
    if (!doc.is_object()) fail(ErrorCode::Parse, "config must be a JSON object");

    std::vector<std::string> injected;
    auto push = [&](const std::string& key, const json& value) {
        if (value.is_boolean()) {
            if (value.get<bool>()) injected.push_back("--" + key);
        } else if (value.is_string()) {
            injected.push_back("--" + key);
            injected.push_back(value.get<std::string>());
        } else if (value.is_number()) {
            injected.push_back("--" + key);
            injected.push_back(value.dump());
        } else {
            fail(ErrorCode::Parse, "config value for '" + key + "' must be a scalar or list of scalars");
        }
    };
    for (const auto& [key, value] : doc.items()) {
        if (value.is_array()) {
            for (const auto& v : value) push(key, v);
        } else {
            push(key, value);
        }
    }
    std::vector<std::string> out{rest.front()};
    out.insert(out.end(), injected.begin(), injected.end());
    out.insert(out.end(), rest.begin() + 1, rest.end());
    return out;
}

struct TrainFlags {
    std::string manifest;
    std::string out;
    std::string loss = "sparse";
    std::size_t steps = 2000;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    double lambda = 0.05;
    double tau0 = 5.0;
    double tau_min = 0.5;
    double anneal_end = 0.8;
    bool hard = false;
    std::string cbl_optimizer = "adam";
    std::string fc_optimizer = "adamw";
    double cbl_lr = 1e-3;
    double fc_lr = 1e-4;
    double cbl_weight_decay = 0.0;
    double fc_weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t eval_every = 100;
    double alpha_log = kDefaultAlphaLog;
    unsigned threads = 1;

    TrainConfig to_config() const {
        TrainConfig cfg;
        if (loss == "contrastive") {
            cfg.loss = ContrastiveLoss{};
        } else if (loss == "sparse") {
            cfg.loss = SparseLoss{{tau0, tau_min, anneal_end}, hard};
        } else {
            cfg.loss = L1Loss{lambda};
        }
        cfg.steps = steps;
        cfg.batch_size = batch_size;
        cfg.seed = seed;
        auto kind = [](const std::string& s) { return s == "adam" ? OptimizerKind::Adam : OptimizerKind::AdamW; };
        cfg.cbl_optimizer = {kind(cbl_optimizer), cbl_lr, beta1, beta2, eps, cbl_weight_decay};
        cfg.fc_optimizer = {kind(fc_optimizer), fc_lr, beta1, beta2, eps, fc_weight_decay};
        cfg.eval_every = eval_every;
        cfg.alpha_log = alpha_log;
        cfg.threads = threads;
        return cfg;
    }
};

void add_train_options(CLI::App* cmd, TrainFlags& f, bool bottleneck) {
    cmd->add_option("--manifest", f.manifest, "Embedding bundle manifest")->required();
    cmd->add_option("--out", f.out, "Output directory")->required();
    cmd->add_option("--steps", f.steps, "Optimizer steps")->capture_default_str();
    cmd->add_option("--batch-size", f.batch_size, "Images per step")->capture_default_str();
    cmd->add_option("--fc-optimizer", f.fc_optimizer)->check(CLI::IsMember({"adam", "adamw"}))->capture_default_str();
    cmd->add_option("--fc-lr", f.fc_lr)->capture_default_str();
    cmd->add_option("--fc-weight-decay", f.fc_weight_decay)->capture_default_str();
    cmd->add_option("--beta1", f.beta1)->capture_default_str();
    cmd->add_option("--beta2", f.beta2)->capture_default_str();
    cmd->add_option("--eps", f.eps)->capture_default_str();
    cmd->add_option("--eval-every", f.eval_every, "Record metrics every N steps")->capture_default_str();
    cmd->add_option("--alpha-log", f.alpha_log, "Log of the score scale")->capture_default_str();
    cmd->add_option("--threads", f.threads, "Worker threads for evaluation")->capture_default_str();
    if (!bottleneck) return;
    cmd->add_option("--loss", f.loss, "Bottleneck objective")
        ->check(CLI::IsMember({"contrastive", "sparse", "l1"}))
        ->capture_default_str();
    cmd->add_option("--lambda", f.lambda, "L1 penalty weight")->capture_default_str();
    cmd->add_option("--tau0", f.tau0)->capture_default_str();
    cmd->add_option("--tau-min", f.tau_min)->capture_default_str();
    cmd->add_option("--anneal-end", f.anneal_end, "Fraction of steps after which tau stays at tau-min")
        ->capture_default_str();
    cmd->add_flag("--hard", f.hard, "Straight-through one-hot Gumbel samples");
    cmd->add_option("--cbl-optimizer", f.cbl_optimizer)->check(CLI::IsMember({"adam", "adamw"}))->capture_default_str();
    cmd->add_option("--cbl-lr", f.cbl_lr)->capture_default_str();
    cmd->add_option("--cbl-weight-decay", f.cbl_weight_decay)->capture_default_str();
}

class Commands {
public:
    Commands(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

    void install(CLI::App& app) {
        app.require_subcommand(1);
        install_synth(app);
        install_fetch(app);
        install_filter(app);
        install_cms(app);
        install_zeroshot(app);
        install_train(app);
        install_probe(app);
        install_eval(app);
        install_explain(app);
        install_report(app);
    }

    void run() const { action_(); }

private:
    CLI::App* sub(CLI::App& app, const std::string& name, const std::string& help) {
        auto* cmd = app.add_subcommand(name, help);
        cmd->add_option("--seed", seed_, "Random seed")->capture_default_str();
        cmd->callback([this, cmd] { action_ = actions_.at(cmd->get_name()); });
        return cmd;
    }

    void install_synth(CLI::App& app) {
        auto* cmd = sub(app, "synth", "Generate a synthetic embedding bundle");
        cmd->add_option("--out", synth_out_, "Output directory")->required();
        cmd->add_option("--classes", synth_.num_classes)->capture_default_str();
        cmd->add_option("--images-per-class", synth_.images_per_class)->capture_default_str();
        cmd->add_option("--concepts-per-class", synth_.concepts_per_class)->capture_default_str();
        cmd->add_option("--dim", synth_.dim)->capture_default_str();
        cmd->add_option("--noise", synth_.noise_level)->capture_default_str();
        cmd->add_option("--quality", synth_.concept_quality)->capture_default_str();
        cmd->add_option("--dtype", synth_dtype_)->check(CLI::IsMember({"f32", "f64"}))->capture_default_str();
        cmd->add_flag("--raw", synth_raw_, "Write normalized=false in the manifest");
        actions_["synth"] = [this] {
            const auto bundle = synth_dataset(synth_, Rng(seed_));
            const auto manifest = write_bundle(bundle, synth_out_,
                                               {synth_dtype_ == "f32" ? DType::F32 : DType::F64, !synth_raw_});
            out_ << "synth: images=" << bundle.num_images() << " concepts=" << bundle.num_concepts()
                 << " classes=" << bundle.num_classes() << " dim=" << bundle.images.dim() << " -> " << manifest.string()
                 << '\n';
        };
    }

    void install_fetch(CLI::App& app) {
        auto* cmd = sub(app, "fetch-concepts", "Collect candidate concepts from ConceptNet");
        cmd->add_option("--label", fetch_labels_, "Class label (repeatable)")
            ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
        cmd->add_option("--labels", fetch_labels_file_, "File with one class label per line");
        cmd->add_option("--out", fetch_out_, "Candidate list, one concept per line")->required();
        cmd->add_option("--relation", fetch_relations_, "ConceptNet relation to keep (repeatable)")
            ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
        cmd->add_option("--limit", fetch_.limit, "Edges requested per label")->capture_default_str();
        cmd->add_option("--base-url", fetch_base_url_, "ConceptNet base URL (default: $CBMKIT_CONCEPTNET_URL or public API)");
        cmd->add_option("--attempts", fetch_.max_attempts, "Attempts per request")->capture_default_str();
        cmd->add_option("--backoff-ms", fetch_backoff_ms_, "Initial retry backoff")->capture_default_str();
        cmd->add_option("--in-flight", fetch_.max_in_flight, "Concurrent requests")->capture_default_str();
        actions_["fetch-concepts"] = [this] {
            std::vector<std::string> labels = fetch_labels_;
            if (!fetch_labels_file_.empty()) {
                for (auto& c : parse_candidates(read_file(fetch_labels_file_))) labels.push_back(c.text);
            }
            if (labels.empty()) fail(ErrorCode::BadSpec, "no class labels given (use --label or --labels)");
            fetch_.base_url = fetch_base_url_.empty() ? conceptnet_url_from_env() : fetch_base_url_;
            if (!fetch_relations_.empty()) fetch_.relations = fetch_relations_;
            fetch_.initial_backoff = std::chrono::milliseconds(fetch_backoff_ms_);
            const auto outcome = fetch_conceptnet_many(labels, fetch_);
            for (const auto& w : outcome.warnings) err_ << "warning: " << w << '\n';
            write_file_atomic(fetch_out_, candidates_text(outcome.candidates));
            out_ << "fetch-concepts: labels=" << labels.size() << " concepts=" << outcome.candidates.size() << '\n';
        };
    }

    void install_filter(CLI::App& app) {
        auto* cmd = sub(app, "filter-concepts", "Filter candidate concepts by length and similarity");
        cmd->add_option("--manifest", filter_manifest_, "Manifest with concept and class embeddings")->required();
        cmd->add_option("--candidates", filter_candidates_, "Candidate list aligned with the concept rows");
        cmd->add_option("--out", filter_out_, "Filter report (JSON)")->required();
        cmd->add_option("--kept", filter_kept_, "Write the surviving concepts, one per line");
        cmd->add_option("--max-letters", filter_.max_letters)->capture_default_str();
        cmd->add_option("--class-cutoff", filter_.class_cutoff)->capture_default_str();
        cmd->add_option("--concept-cutoff", filter_.concept_cutoff)->capture_default_str();
        cmd->add_option("--drop-fraction", filter_.low_sim_drop_fraction, "Lowest-mean-similarity fraction to drop")
            ->capture_default_str();
        actions_["filter-concepts"] = [this] {
            const auto concepts = load_set(filter_manifest_, Role::Concepts);
            const auto classes = load_set(filter_manifest_, Role::Classes);
            std::vector<ConceptCandidate> candidates;
            if (filter_candidates_.empty()) {
                for (const auto& n : concepts.names) candidates.push_back({n, "", ""});
            } else {
                candidates = parse_candidates(read_file(filter_candidates_));
            }
            const auto report = run_filter_pipeline(candidates, concepts, classes, filter_);
            std::string kept;
            for (std::size_t i : report.kept) kept += candidates[i].text + "\n";
            write_file_atomic(filter_out_, filter_report_json(report, candidates));
            if (!filter_kept_.empty()) write_file_atomic(filter_kept_, kept);
            out_ << "filter-concepts: kept=" << report.kept.size() << " removed=" << report.removed.size() << '\n';
        };
    }

    void install_cms(CLI::App& app) {
        auto* cmd = sub(app, "cms", "Concept Matrix Search classification");
        cmd->add_option("--manifest", cms_manifest_)->required();
        cmd->add_option("--batch-size", cms_batch_, "Images per V-matrix batch (default: min(256, |I|))");
        cmd->add_option("--out", cms_out_, "Result JSON")->required();
        cmd->add_option("--per-class-csv", cms_csv_, "Per-class accuracy table");
        cmd->add_option("--threads", cms_threads_)->capture_default_str();
        actions_["cms"] = [this] {
            const auto bundle = load_bundle(cms_manifest_);
            const std::size_t batch = cms_batch_ ? cms_batch_ : std::min<std::size_t>(256, bundle.num_images());
            const auto result = evaluate_cms(bundle, batch, cms_threads_);
            write_result("cms", result, bundle);
        };
    }

    void install_zeroshot(CLI::App& app) {
        auto* cmd = sub(app, "zeroshot", "Zero-shot classification by image-class cosine");
        cmd->add_option("--manifest", cms_manifest_)->required();
        cmd->add_option("--out", cms_out_, "Result JSON")->required();
        cmd->add_option("--per-class-csv", cms_csv_, "Per-class accuracy table");
        actions_["zeroshot"] = [this] {
            const auto bundle = load_bundle(cms_manifest_);
            auto result = score_predictions(zero_shot_classify(bundle.images, bundle.classes), bundle.labels,
                                            bundle.num_classes());
            write_result("zeroshot", result, bundle);
        };
    }

    void write_result(const std::string& name, const CmsResult& result, const DatasetBundle& bundle) {
        write_file_atomic(cms_out_, cms_result_json(result));
        if (!cms_csv_.empty()) write_file_atomic(cms_csv_, per_class_csv(result, bundle.classes.names));
        out_ << name << ": accuracy=" << fmt4(result.accuracy) << " n=" << bundle.num_images() << '\n';
    }

    void install_train(CLI::App& app) {
        auto* cmd = sub(app, "train", "Train a concept bottleneck model");
        add_train_options(cmd, train_, true);
        actions_["train"] = [this] { run_training(false); };
    }

    void install_probe(CLI::App& app) {
        auto* cmd = sub(app, "probe", "Train a linear probe over image-class scores");
        add_train_options(cmd, train_, false);
        actions_["probe"] = [this] { run_training(true); };
    }

    void run_training(bool probe) {
        train_.seed = seed_;
        const auto bundle = load_bundle(train_.manifest);
        const auto cfg = train_.to_config();
        const fs::path dir = train_.out;
        TrainResult result;
        try {
            result = probe ? train_linear_probe(bundle, cfg) : train_cbm(bundle, cfg);
        } catch (const DivergedError& e) {
            ensure_dir(dir);
            save_checkpoint(e.last_finite(), dir / "last_finite.ckpt");
            throw;
        }
        ensure_dir(dir);
        const auto report = evaluate_checkpoint(result.checkpoint, bundle, {10, 1, cfg.threads});
        save_checkpoint(result.checkpoint, dir / "checkpoint.bin");
        write_file_atomic(dir / "metrics.csv", metrics_csv(result.metrics));
        out_ << (probe ? "probe" : "train") << ": loss=" << (probe ? std::string("ce") : loss_name(cfg.loss))
             << " steps=" << cfg.steps << " train_acc=" << fmt4(report.accuracy) << '\n';
    }

    void install_eval(CLI::App& app) {
        auto* cmd = sub(app, "eval", "Evaluate a checkpoint: accuracy, confusion matrix, top-k concepts");
        cmd->add_option("--manifest", eval_manifest_)->required();
        cmd->add_option("--checkpoint", eval_checkpoint_)->required();
        cmd->add_option("--out", eval_out_, "Output directory")->required();
        cmd->add_option("--k", eval_.k, "Concepts per explanation")->capture_default_str();
        cmd->add_option("--samples-per-class", eval_.samples_per_class)->capture_default_str();
        cmd->add_option("--threads", eval_.threads)->capture_default_str();
        actions_["eval"] = [this] {
            const auto bundle = load_bundle(eval_manifest_);
            const auto ckpt = load_checkpoint(eval_checkpoint_);
            const auto report = evaluate_checkpoint(ckpt, bundle, eval_);
            const fs::path dir = eval_out_;
            ensure_dir(dir);
            write_file_atomic(dir / "eval.json", eval_report_json(report, bundle.classes.names));
            write_file_atomic(dir / "confusion.csv", confusion_csv(report, bundle.classes.names));
            out_ << "eval: accuracy=" << fmt4(report.accuracy) << " n=" << bundle.num_images() << '\n';
        };
    }

    void install_explain(CLI::App& app) {
        auto* cmd = sub(app, "explain", "Top-k bottleneck activations for one image");
        cmd->add_option("--manifest", eval_manifest_)->required();
        cmd->add_option("--checkpoint", eval_checkpoint_)->required();
        cmd->add_option("--image", explain_image_, "Image row index")->required();
        cmd->add_option("--k", explain_k_)->capture_default_str();
        cmd->add_option("--out", explain_out_, "Output JSON")->required();
        actions_["explain"] = [this] {
            const auto bundle = load_bundle(eval_manifest_);
            const auto ckpt = load_checkpoint(eval_checkpoint_);
            if (ckpt.kind != ModelKind::Cbm) fail(ErrorCode::BadSpec, "explain needs a bottleneck checkpoint");
            if (explain_image_ >= bundle.num_images()) fail(ErrorCode::Shape, "image index out of range");
            const auto items = explain_topk(ckpt.model, bundle.images.matrix.row(explain_image_), bundle.concepts, explain_k_);
            write_file_atomic(explain_out_, topk_json(explain_image_, items));
            out_ << "explain: image=" << explain_image_ << " top=" << items.front().name << '\n';
        };
    }

    void install_report(CLI::App& app) {
        auto* cmd = sub(app, "report", "Aggregate metrics and results into one plot-ready CSV");
        cmd->add_option("--metrics", report_metrics_, "Metrics CSV, optionally NAME=PATH (repeatable)")
            ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
        cmd->add_option("--result", report_results_, "cms/zeroshot result JSON, optionally NAME=PATH (repeatable)")
            ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
        cmd->add_option("--out", report_out_, "Aggregated CSV")->required();
        actions_["report"] = [this] { run_report(); };
    }

    void run_report() {
        auto split = [](const std::string& spec) -> std::pair<std::string, std::string> {
            const auto eq = spec.find('=');
            if (eq == std::string::npos) return {fs::path(spec).stem().string(), spec};
            return {spec.substr(0, eq), spec.substr(eq + 1)};
        };
        std::ostringstream csv;
        csv.precision(17);
        csv << "source,kind,step,metric,value\n";
        std::size_t rows = 0;
        for (const auto& spec : report_metrics_) {
            const auto [name, path] = split(spec);
            const auto lines = split_lines(read_file(path));
            if (lines.empty() || lines.front() != "step,cbl_loss,ce_loss,train_acc,tau") {
                fail(ErrorCode::Parse, path + " is not a metrics CSV");
            }
            static const char* kColumns[] = {"cbl_loss", "ce_loss", "train_acc", "tau"};
            for (std::size_t i = 1; i < lines.size(); ++i) {
                if (lines[i].empty()) continue;
                std::vector<std::string> cells;
                std::stringstream ss(lines[i]);
                for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
                if (cells.size() != 5) fail(ErrorCode::Parse, path + ": malformed row " + std::to_string(i + 1));
                for (std::size_t c = 0; c < 4; ++c) {
                    csv << csv_field(name) << ",train," << cells[0] << ',' << kColumns[c] << ',' << cells[c + 1] << '\n';
                    ++rows;
                }
            }
        }
        for (const auto& spec : report_results_) {
            const auto [name, path] = split(spec);
            json doc;
            try {
                doc = json::parse(read_file(path));
                csv << csv_field(name) << ",result,0,accuracy," << doc.at("accuracy").get<double>() << '\n';
                const auto per_class = doc.at("per_class_accuracy").get<std::vector<double>>();
                for (std::size_t c = 0; c < per_class.size(); ++c) {
                    csv << csv_field(name) << ",result,0,class_" << c << "_accuracy," << per_class[c] << '\n';
                }
                rows += 1 + per_class.size();
            } catch (const json::exception& e) {
                fail(ErrorCode::Parse, path + ": " + e.what());
            }
        }
        write_file_atomic(report_out_, csv.str());
        out_ << "report: sources=" << report_metrics_.size() + report_results_.size() << " rows=" << rows << '\n';
    }

    std::ostream& out_;
    std::ostream& err_;
    std::map<std::string, std::function<void()>> actions_;
    std::function<void()> action_;
    std::uint64_t seed_ = 0;

    SynthSpec synth_;
    std::string synth_out_;
    std::string synth_dtype_ = "f64";
    bool synth_raw_ = false;

    ConceptNetOptions fetch_;
    std::vector<std::string> fetch_labels_;
    std::string fetch_labels_file_;
    std::string fetch_out_;
    std::vector<std::string> fetch_relations_;
    std::string fetch_base_url_;
    long fetch_backoff_ms_ = 500;

    FilterConfig filter_;
    std::string filter_manifest_, filter_candidates_, filter_out_, filter_kept_;

    std::string cms_manifest_, cms_out_, cms_csv_;
    std::size_t cms_batch_ = 0;
    unsigned cms_threads_ = 1;

    TrainFlags train_;

    EvalOptions eval_;
    std::string eval_manifest_, eval_checkpoint_, eval_out_;

    std::size_t explain_image_ = 0;
    std::size_t explain_k_ = 10;
    std::string explain_out_;

    std::vector<std::string> report_metrics_, report_results_;
    std::string report_out_;
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Concept bottleneck models over frozen embeddings", "cbmkit"};
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    Commands commands(out, err);
    commands.install(app);

    try {
        auto expanded = expand_config(args);
        std::reverse(expanded.begin(), expanded.end());
        app.parse(expanded);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    } catch (const Error& e) {
        err << e.what() << '\n';
        return 1;
    }

    try {
        commands.run();
    } catch (const Error& e) {
        err << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "E_INTERNAL: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

}  // namespace cbmkit
