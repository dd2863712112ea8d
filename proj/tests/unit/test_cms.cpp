#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "cbmkit/cms.hpp"
#include "test_support.hpp"

using namespace cbmkit;
using testing::code_of;

namespace {

EmbeddingSet set_of(const std::vector<std::vector<double>>& rows) {
    EmbeddingSet s{Matrix::from_rows(rows), {}};
    for (std::size_t i = 0; i < rows.size(); ++i) s.names.push_back("n" + std::to_string(i));
    return s;
}

// Naive Algorithm 1: explicit dot products and cosines. Cosines within 1e-12 of the best are ties
// and go to the lowest index.
std::vector<std::size_t> naive_cms(const EmbeddingSet& images, const EmbeddingSet& concepts, const EmbeddingSet& classes) {
    const std::size_t nd = concepts.size();
    std::vector<std::vector<double>> t(classes.size(), std::vector<double>(nd));
    for (std::size_t m = 0; m < classes.size(); ++m) {
        for (std::size_t l = 0; l < nd; ++l) {
            double s = 0;
            for (std::size_t x = 0; x < concepts.dim(); ++x) s += classes.matrix(m, x) * concepts.matrix(l, x);
            t[m][l] = s;
        }
    }
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < images.size(); ++k) {
        std::vector<double> v(nd);
        for (std::size_t l = 0; l < nd; ++l) {
            double s = 0;
            for (std::size_t x = 0; x < concepts.dim(); ++x) s += images.matrix(k, x) * concepts.matrix(l, x);
            v[l] = s;
        }
        std::vector<double> cs(classes.size());
        for (std::size_t m = 0; m < classes.size(); ++m) {
            double num = 0, a = 0, b = 0;
            for (std::size_t l = 0; l < nd; ++l) {
                num += v[l] * t[m][l];
                a += v[l] * v[l];
                b += t[m][l] * t[m][l];
            }
            cs[m] = num / (std::sqrt(a) * std::sqrt(b));
        }
        double top = -INFINITY;
        for (double c : cs) top = std::max(top, c);
        std::size_t best = 0;
        while (cs[best] < top - 1e-12) ++best;
        out.push_back(best);
    }
    return out;
}

DatasetBundle random_bundle(Rng& rng) {
    DatasetBundle b;
    const std::size_t n = 1 + rng.below(64), c = 1 + rng.below(8), d = 1 + rng.below(16), dim = 2 + rng.below(10);
    auto fill = [&](std::size_t rows) {
        Matrix m(rows, dim);
        for (double& x : m.data()) x = rng.gaussian();
        return EmbeddingSet{normalize_rows(EmbeddingSet{m, std::vector<std::string>(rows, "x")})};
    };
    b.images = fill(n);
    b.concepts = fill(d);
    b.classes = fill(c);
    for (std::size_t i = 0; i < n; ++i) b.labels.push_back(rng.below(c));
    return b;
}

}  // namespace

TEST_CASE("build_similarity") {
    const auto basis = set_of({{1, 0}, {0, 1}});
    const auto pair = build_similarity(basis, basis, basis);
    CHECK(pair.image_concept == Matrix::identity(2));

    const auto v = build_similarity(set_of({{1, 2}}), basis, basis).image_concept;
    CHECK(v(0, 0) == 1.0);
    CHECK(v(0, 1) == 2.0);

    const auto shapes = build_similarity(set_of({{1, 0}, {0, 1}, {1, 1}, {2, 0}}), set_of({{1, 0}, {0, 1}, {1, 1}}), basis);
    CHECK(shapes.image_concept.rows() == 4);
    CHECK(shapes.image_concept.cols() == 3);
    CHECK(shapes.class_concept.rows() == 2);
    CHECK(shapes.class_concept.cols() == 3);

    CHECK(code_of([&] { build_similarity(set_of({{1, 0, 0}}), basis, basis); }) == ErrorCode::Shape);
}

TEST_CASE("cms_classify hand example") {
    const auto basis = set_of({{1, 0}, {0, 1}});
    const auto pair = build_similarity(set_of({{0.9, 0.1}}), basis, basis);
    CHECK(cms_classify(pair) == std::vector<std::size_t>{0});
    const auto v = pair.image_concept.row(0);
    CHECK(cosine(v, pair.class_concept.row(0)) == doctest::Approx(0.9 / std::sqrt(0.82)));
    CHECK(cosine(v, pair.class_concept.row(0)) == doctest::Approx(0.9939).epsilon(1e-4));
    CHECK(cosine(v, pair.class_concept.row(1)) == doctest::Approx(0.1104).epsilon(1e-3));

    const auto single = build_similarity(set_of({{0.2, 0.7}, {-1, 0.1}}), basis, set_of({{0.3, 0.3}}));
    CHECK(cms_classify(single) == std::vector<std::size_t>{0, 0});

    const auto zero = build_similarity(set_of({{0, 0}}), basis, basis);
    CHECK(code_of([&] { cms_classify(zero); }) == ErrorCode::ZeroNorm);
    const auto zero_t = build_similarity(set_of({{1, 0}}), set_of({{1, 0}}), set_of({{0, 1}, {1, 0}}));
    CHECK(code_of([&] { cms_classify(zero_t); }) == ErrorCode::ZeroNorm);
}

TEST_CASE("tie goes to the lowest class index") {
    const auto basis = set_of({{1, 0}, {0, 1}});
    const auto pair = build_similarity(set_of({{1, 1}}), basis, basis);
    CHECK(cms_classify(pair) == std::vector<std::size_t>{0});

    // One concept: every cosine is exactly +1 or -1, whatever rounding does to the individual values.
    const auto one = set_of({{0.3, 0.7}});
    const auto classes = set_of({{-0.2, -0.9}, {0.1, 0.3}, {0.7, 0.3}, {0.33, 0.21}});
    const auto images = set_of({{0.9, 0.1}, {0.123, 0.456}, {-1, -0.2}});
    CHECK(cms_classify(build_similarity(images, one, classes)) == std::vector<std::size_t>{1, 1, 0});
}

TEST_CASE("random bundles match the naive oracle and rescaling invariance") {
    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        auto b = random_bundle(rng);
        const auto expected = naive_cms(b.images, b.concepts, b.classes);
        CHECK(cms_classify(build_similarity(b.images, b.concepts, b.classes)) == expected);

        const auto full = evaluate_cms(b, b.num_images());
        CHECK(full.predictions == expected);
        CHECK(evaluate_cms(b, 1).predictions == expected);
        CHECK(evaluate_cms(b, 1 + rng.below(b.num_images()), 3).predictions == expected);

        auto scaled = b;
        for (double& x : scaled.images.matrix.row(0)) x *= 2.5;
        for (double& x : scaled.classes.matrix.row(0)) x *= 0.3;
        CHECK(cms_classify(build_similarity(scaled.images, scaled.concepts, scaled.classes)) == expected);
    }
}

TEST_CASE("evaluate_cms accuracy bookkeeping") {
    const auto basis = set_of({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
    DatasetBundle b;
    b.images = set_of({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0, 1, 0}});
    b.concepts = basis;
    b.classes = basis;
    b.labels = {0, 1, 2, 2};
    const auto r = evaluate_cms(b, 2);
    CHECK(r.predictions == std::vector<std::size_t>{0, 1, 2, 1});
    CHECK(r.accuracy == doctest::Approx(0.75));
    CHECK(r.per_class_accuracy == std::vector<double>{1.0, 1.0, 0.5});
    // Weighted mean of per-class accuracy by class counts equals accuracy.
    CHECK((1.0 * 1 + 1.0 * 1 + 0.5 * 2) / 4 == doctest::Approx(r.accuracy));

    const auto perfect = evaluate_cms({b.classes, basis, basis, {0, 1, 2}}, 3);
    CHECK(perfect.accuracy == 1.0);

    CHECK(code_of([&] { evaluate_cms(b, 0); }) == ErrorCode::BadSpec);
    CHECK(code_of([&] { evaluate_cms(b, 5); }) == ErrorCode::BadSpec);

    const auto json = nlohmann::json::parse(cms_result_json(r));
    CHECK(json.at("accuracy").get<double>() == 0.75);
    CHECK(json.at("predictions").get<std::vector<std::size_t>>() == r.predictions);
    CHECK(json.at("per_class_accuracy").size() == 3);
    CHECK(per_class_csv(r, {"cat", "dog, large", "eel"}) == "class,accuracy\ncat,1\n\"dog, large\",1\neel,0.5\n");
}

TEST_CASE("classes without images report zero") {
    const auto r = score_predictions({0, 0}, {0, 0}, 3);
    CHECK(r.per_class_accuracy == std::vector<double>{1.0, 0.0, 0.0});
}

TEST_CASE("zero-shot") {
    const auto classes = set_of({{1, 0}, {0, 1}});
    CHECK(zero_shot_classify(set_of({{1, 0}, {0.6, 0.8}}), classes) == std::vector<std::size_t>{0, 1});
    CHECK(zero_shot_classify(set_of({{0, 1}}), classes) == std::vector<std::size_t>{1});
    CHECK(zero_shot_classify(set_of({{0.6, 0.8}}), set_of({{3, 0}, {0, 1}})) == std::vector<std::size_t>{1});
    CHECK(code_of([&] { zero_shot_classify(set_of({{0, 0}}), classes); }) == ErrorCode::ZeroNorm);
}
