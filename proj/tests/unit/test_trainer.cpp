#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "cbmkit/io_util.hpp"
#include "cbmkit/trainer.hpp"
#include "test_support.hpp"

using namespace cbmkit;
using testing::code_of;

namespace {

DatasetBundle small_bundle(std::uint64_t seed = 5) {
    SynthSpec spec;
    spec.num_classes = 3;
    spec.images_per_class = 10;
    spec.concepts_per_class = 4;
    spec.dim = 16;
    return synth_dataset(spec, Rng(seed));
}

TrainConfig quick(LossKind loss, std::size_t steps = 30) {
    TrainConfig cfg;
    cfg.loss = loss;
    cfg.steps = steps;
    cfg.batch_size = 8;
    cfg.eval_every = 7;
    cfg.seed = 11;
    return cfg;
}

// Straightforward O(n^2) Gini: sum_i sum_j |x_i - x_j| / (2 n^2 mean).
double gini_oracle(const std::vector<double>& x) {
    const double n = static_cast<double>(x.size());
    double diff = 0, total = 0;
    for (double a : x) {
        total += std::abs(a);
        for (double b : x) diff += std::abs(std::abs(a) - std::abs(b));
    }
    return total == 0 ? 0.0 : diff / (2.0 * n * total);
}

}  // namespace

TEST_CASE("training is deterministic for a fixed seed") {
    const auto b = small_bundle();
    for (const LossKind& loss : {LossKind{ContrastiveLoss{}}, LossKind{SparseLoss{}}, LossKind{L1Loss{}}}) {
        const auto r1 = train_cbm(b, quick(loss));
        const auto r2 = train_cbm(b, quick(loss));
        CHECK(bit_equal(r1.checkpoint, r2.checkpoint));
        CHECK(metrics_csv(r1.metrics) == metrics_csv(r2.metrics));

        auto threaded = quick(loss);
        threaded.threads = 4;
        CHECK(bit_equal(train_cbm(b, threaded).checkpoint, r1.checkpoint));

        auto other = quick(loss);
        other.seed = 12;
        CHECK_FALSE(bit_equal(train_cbm(b, other).checkpoint, r1.checkpoint));
    }
}

TEST_CASE("zero learning rate freezes the matching layer") {
    const auto b = small_bundle();
    auto cfg = quick(SparseLoss{});
    cfg.cbl_optimizer.lr = 0.0;
    const auto frozen_cbl = train_cbm(b, cfg).checkpoint;
    CHECK(frozen_cbl.model.cbl == Matrix::identity(b.num_concepts()));

    cfg = quick(SparseLoss{});
    cfg.fc_optimizer.lr = 0.0;
    cfg.fc_optimizer.weight_decay = 0.0;
    const auto frozen_fc = train_cbm(b, cfg).checkpoint;
    Rng init = Rng(cfg.seed).derive(10);
    CHECK(frozen_fc.model.fc == BottleneckModel::initialize(b.num_concepts(), b.num_classes(), init).fc);
    CHECK(frozen_fc.model.cbl != Matrix::identity(b.num_concepts()));
}

TEST_CASE("metrics rows and checkpoint bookkeeping") {
    const auto b = small_bundle();
    for (std::size_t steps : {1u, 7u, 8u, 30u}) {
        const auto r = train_cbm(b, quick(SparseLoss{}, steps));
        CHECK(r.metrics.size() == (steps + 6) / 7);
        CHECK(r.metrics.front().step == 1);
        CHECK(r.checkpoint.step == steps);
        CHECK(r.checkpoint.cbl_optimizer.step == steps);
        CHECK(r.checkpoint.config_digest == config_digest(quick(SparseLoss{}, steps)));
        for (const auto& row : r.metrics) {
            CHECK(row.tau >= 0.5);
            CHECK(row.tau <= 5.0);
            CHECK(row.train_acc >= 0.0);
            CHECK(row.train_acc <= 1.0);
        }
    }
    const auto contrastive = train_cbm(b, quick(ContrastiveLoss{}));
    CHECK(std::all_of(contrastive.metrics.begin(), contrastive.metrics.end(), [](const MetricsRow& r) { return r.tau == 0.0; }));

    const auto csv = split_lines(metrics_csv(contrastive.metrics));
    CHECK(csv.front() == "step,cbl_loss,ce_loss,train_acc,tau");
    CHECK(csv.size() == contrastive.metrics.size() + 1);
}

TEST_CASE("config validation") {
    const auto b = small_bundle();
    auto bad = [&](auto mutate) {
        auto cfg = quick(SparseLoss{});
        mutate(cfg);
        return code_of([&] { train_cbm(b, cfg); });
    };
    CHECK(bad([](TrainConfig& c) { c.steps = 0; }) == ErrorCode::BadSpec);
    CHECK(bad([](TrainConfig& c) { c.eval_every = 0; }) == ErrorCode::BadSpec);
    CHECK(bad([](TrainConfig& c) { c.batch_size = 0; }) == ErrorCode::BadSpec);
    CHECK(bad([](TrainConfig& c) { c.batch_size = 13; }) == ErrorCode::BadSpec);  // more than |D| = 12
    CHECK(bad([](TrainConfig& c) { c.cbl_optimizer.lr = -1; }) == ErrorCode::BadSpec);
    CHECK(bad([](TrainConfig& c) { c.loss = L1Loss{-1}; }) == ErrorCode::BadSpec);
    CHECK(bad([](TrainConfig& c) { c.loss = SparseLoss{{0.0, 0.5, 0.8}, false}; }) == ErrorCode::BadSpec);

    // The probe does not draw concepts, so only the image count bounds the batch.
    auto probe = quick(ContrastiveLoss{});
    probe.batch_size = 20;
    CHECK_NOTHROW(train_linear_probe(b, probe));
}

TEST_CASE("divergence keeps the last finite state") {
    const auto b = small_bundle();
    auto cfg = quick(L1Loss{}, 200);
    cfg.cbl_optimizer.lr = 1e308;
    try {
        train_cbm(b, cfg);
        FAIL("expected divergence");
    } catch (const DivergedError& e) {
        CHECK(e.code() == ErrorCode::Diverged);
        CHECK(e.last_finite().model.cbl.all_finite());
        CHECK(e.last_finite().model.fc.all_finite());
        CHECK(e.last_finite().step < 200);
    }
}

TEST_CASE("checkpoint round trip and corruption") {
    const auto b = small_bundle();
    const auto ckpt = train_cbm(b, quick(L1Loss{})).checkpoint;
    const std::string bytes = serialize_checkpoint(ckpt);
    const auto back = parse_checkpoint(bytes);
    CHECK(bit_equal(back, ckpt));
    CHECK(back.model.cbl == ckpt.model.cbl);
    CHECK(back.fc_optimizer == ckpt.fc_optimizer);
    CHECK(back.cbl_optimizer == ckpt.cbl_optimizer);

    testing::TempDir dir("ckpt");
    save_checkpoint(ckpt, dir / "m.ckpt");
    CHECK(bit_equal(load_checkpoint(dir / "m.ckpt"), ckpt));

    CHECK(code_of([&] { parse_checkpoint(bytes.substr(0, bytes.size() - 3)); }) == ErrorCode::Corrupt);
    CHECK(code_of([&] { parse_checkpoint(bytes.substr(0, 20)); }) == ErrorCode::Corrupt);
    CHECK(code_of([&] { parse_checkpoint(bytes + "x"); }) == ErrorCode::Corrupt);
    CHECK(code_of([&] { parse_checkpoint("not a checkpoint at all"); }) == ErrorCode::Corrupt);

    std::string flipped = bytes;
    flipped.back() = static_cast<char>(flipped.back() ^ 0x40);
    CHECK(code_of([&] { parse_checkpoint(flipped); }) == ErrorCode::Corrupt);

    auto future = ckpt;
    future.format_version = 2;
    CHECK(code_of([&] { parse_checkpoint(serialize_checkpoint(future)); }) == ErrorCode::Version);

    CHECK(code_of([&] { load_checkpoint(dir / "missing.ckpt"); }) == ErrorCode::Io);
}

TEST_CASE("linear probe") {
    SynthSpec spec;
    spec.num_classes = 2;
    spec.images_per_class = 20;
    spec.concepts_per_class = 3;
    spec.dim = 16;
    const auto b = synth_dataset(spec, Rng(2));
    auto cfg = quick(ContrastiveLoss{}, 500);
    cfg.eval_every = 100;
    const auto r = train_linear_probe(b, cfg);
    CHECK(r.checkpoint.kind == ModelKind::Probe);
    CHECK(r.checkpoint.model.cbl.empty());
    CHECK(r.checkpoint.model.fc.rows() == 2);
    CHECK(r.checkpoint.model.fc.cols() == 2);
    CHECK(r.metrics.back().train_acc == 1.0);
    CHECK(evaluate_checkpoint(r.checkpoint, b).accuracy == 1.0);
    CHECK(bit_equal(parse_checkpoint(serialize_checkpoint(r.checkpoint)), r.checkpoint));

    // With zero learning rate the identity probe is exactly zero-shot classification.
    auto frozen = cfg;
    frozen.fc_optimizer.lr = 0.0;
    frozen.fc_optimizer.weight_decay = 0.0;
    frozen.steps = 1;
    const auto zs = evaluate_checkpoint(train_linear_probe(b, frozen).checkpoint, b);
    for (std::size_t i = 0; i < b.num_images(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < b.num_classes(); ++c) {
            if (dot(b.images.matrix.row(i), b.classes.matrix.row(c)) > dot(b.images.matrix.row(i), b.classes.matrix.row(best))) best = c;
        }
        CHECK(zs.predictions[i] == best);
    }
}

TEST_CASE("evaluation report invariants") {
    const auto b = small_bundle();
    const auto ckpt = train_cbm(b, quick(SparseLoss{}, 50)).checkpoint;
    const auto r = evaluate_checkpoint(ckpt, b, {3, 2, 2});
    std::size_t total = 0, trace = 0;
    for (std::size_t t = 0; t < r.confusion.size(); ++t) {
        std::size_t row = 0;
        for (std::size_t p = 0; p < r.confusion[t].size(); ++p) {
            total += r.confusion[t][p];
            row += r.confusion[t][p];
        }
        CHECK(row == 10);
        trace += r.confusion[t][t];
    }
    CHECK(total == b.num_images());
    CHECK(r.accuracy == doctest::Approx(static_cast<double>(trace) / 30.0));
    CHECK(r.topk_samples.size() == 6);
    for (const auto& s : r.topk_samples) CHECK(s.concepts.size() == 3);
    CHECK(evaluate_checkpoint(ckpt, b, {3, 2, 1}).predictions == r.predictions);

    const auto doc = nlohmann::json::parse(eval_report_json(r, b.classes.names));
    CHECK(doc.at("accuracy").get<double>() == r.accuracy);
    CHECK(doc.at("confusion").size() == 3);
    CHECK(doc.at("topk_samples").size() == 6);
    const auto csv = split_lines(confusion_csv(r, b.classes.names));
    CHECK(csv.size() == 4);

    auto wrong = b;
    wrong.concepts.matrix = Matrix(5, 16);
    CHECK(code_of([&] { evaluate_model(ckpt.model, wrong); }) == ErrorCode::Shape);
}

TEST_CASE("explain_topk ordering") {
    const auto b = small_bundle();
    Rng rng(1);
    auto model = BottleneckModel::initialize(b.num_concepts(), b.num_classes(), rng);
    const auto image = b.images.matrix.row(0);

    // Identity bottleneck: activations are the scaled cosines, so order follows the raw dot products.
    const auto all = explain_topk(model, image, b.concepts, b.num_concepts());
    CHECK(all.size() == b.num_concepts());
    for (const auto& a : all) {
        CHECK(a.activation == doctest::Approx(model.alpha() * dot(image, b.concepts.matrix.row(a.index))));
        CHECK(a.name == b.concepts.names[a.index]);
    }
    for (std::size_t i = 1; i < all.size(); ++i) CHECK(all[i - 1].activation >= all[i].activation);

    // Ties keep index order.
    model.cbl = Matrix(b.num_concepts(), b.num_concepts());
    const auto ties = explain_topk(model, image, b.concepts, 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(ties[i].index == i);

    CHECK(code_of([&] { explain_topk(model, image, b.concepts, 0); }) == ErrorCode::Shape);
    CHECK(code_of([&] { explain_topk(model, image, b.concepts, b.num_concepts() + 1); }) == ErrorCode::Shape);

    const auto doc = nlohmann::json::parse(topk_json(7, ties));
    CHECK(doc.at("image_index") == 7);
    CHECK(doc.at("concepts").size() == 4);
    CHECK(doc.at("concepts")[0].at("concept") == b.concepts.names[0]);
}

TEST_CASE("sparsity measures") {
    CHECK(gini(std::vector<double>{}) == 0.0);
    CHECK(gini(std::vector<double>{0, 0, 0}) == 0.0);
    CHECK(gini(std::vector<double>{1, 1, 1, 1}) == doctest::Approx(0.0));
    CHECK(gini(std::vector<double>{0, 0, 0, 5}) == doctest::Approx(0.75));
    CHECK(gini(std::vector<double>{-2, 0, 0, 0}) == doctest::Approx(0.75));
    Rng rng(4);
    for (int t = 0; t < 50; ++t) {
        std::vector<double> x(1 + rng.below(20));
        for (double& v : x) v = rng.gaussian();
        CHECK(gini(x) == doctest::Approx(gini_oracle(x)));
    }

    const auto m = Matrix::from_rows({{0.0, 0.5, -0.001}, {2.0, 1e-3, -1e-4}});
    CHECK(small_weight_fraction(m, 1e-3) == doctest::Approx(2.0 / 6.0));
    CHECK(small_weight_fraction(m, 10.0) == 1.0);
    CHECK(small_weight_fraction(Matrix(), 1.0) == 0.0);

    const auto b = small_bundle();
    Rng init(3);
    auto model = BottleneckModel::initialize(b.num_concepts(), b.num_classes(), init);
    double expected = 0;
    const Matrix psi = compute_scores(b.images, b.concepts, model.alpha_log);
    for (std::size_t i = 0; i < psi.rows(); ++i) {
        expected += gini_oracle(std::vector<double>(psi.row(i).begin(), psi.row(i).end()));
    }
    CHECK(mean_activation_gini(model, b) == doctest::Approx(expected / 30.0));
}
