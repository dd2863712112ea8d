#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "cbmkit/numerics.hpp"
#include "test_support.hpp"

using namespace cbmkit;
using testing::code_of;

namespace {

std::vector<double> naive_softmax(const std::vector<double>& v) {
    std::vector<double> e;
    double total = 0.0;
    for (double x : v) total += std::exp(x);
    for (double x : v) e.push_back(std::exp(x) / total);
    return e;
}

}  // namespace

TEST_CASE("cosine") {
    std::vector<double> a{1, 0}, b{0, 1}, c{1, 1};
    CHECK(cosine(a, a) == doctest::Approx(1.0));
    CHECK(cosine(a, b) == 0.0);
    CHECK(cosine(c, a) == doctest::Approx(0.7071067811865475).epsilon(1e-15));

    std::vector<double> u{0.3, -1.2, 2.0}, v{1.5, 0.1, -0.4};
    std::vector<double> su{3.0, -12.0, 20.0}, sv{0.15, 0.01, -0.04};
    CHECK(std::abs(cosine(u, v) - cosine(su, sv)) < 1e-12);

    std::vector<double> zero{0, 0}, three{1, 2, 3};
    CHECK(code_of([&] { cosine(zero, a); }) == ErrorCode::ZeroNorm);
    CHECK(code_of([&] { cosine(a, three); }) == ErrorCode::Shape);
}

TEST_CASE("stable_softmax") {
    auto p = stable_softmax(std::vector<double>{0, 0});
    CHECK(p[0] == doctest::Approx(0.5));

    p = stable_softmax(std::vector<double>{1000, 0});
    CHECK(p[0] == doctest::Approx(1.0));
    CHECK(p[1] >= 0.0);
    CHECK(std::isfinite(p[1]));

    p = stable_softmax(std::vector<double>{0, std::log(2.0), std::log(3.0)});
    CHECK(p[0] == doctest::Approx(1.0 / 6).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(2.0 / 6).epsilon(1e-12));
    CHECK(p[2] == doctest::Approx(3.0 / 6).epsilon(1e-12));

    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> v(1 + rng.below(8));
        for (double& x : v) x = rng.uniform(-5, 5);
        const auto q = stable_softmax(v);
        const auto oracle = naive_softmax(v);
        double total = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            CHECK(std::abs(q[i] - oracle[i]) < 1e-12);
            total += q[i];
        }
        CHECK(std::abs(total - 1.0) < 1e-12);
        auto shifted = v;
        for (double& x : shifted) x += 123.25;
        const auto r = stable_softmax(shifted);
        for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs(q[i] - r[i]) < 1e-12);
    }

    CHECK(code_of([] { stable_softmax(std::vector<double>{0, NAN}); }) == ErrorCode::NonFinite);
    CHECK(code_of([] { stable_softmax(std::vector<double>{INFINITY, 0}); }) == ErrorCode::NonFinite);
}

TEST_CASE("log_sum_exp and argmax") {
    std::vector<double> v{0.5, -1.0, 2.0};
    CHECK(log_sum_exp(v) == doctest::Approx(std::log(std::exp(0.5) + std::exp(-1.0) + std::exp(2.0))));
    CHECK(std::isfinite(log_sum_exp(std::vector<double>{1000, 1000})));
    CHECK(log_sum_exp(std::vector<double>{1000, 1000}) == doctest::Approx(1000 + std::log(2.0)));
    CHECK(argmax(std::vector<double>{1, 3, 3, 2}) == 1);
    CHECK(argmax(std::vector<double>{5}) == 0);
}

TEST_CASE("matrix kernels against naive loops") {
    Rng rng(3);
    Matrix a(4, 3), b(5, 3);
    for (double& x : a.data()) x = rng.uniform(-1, 1);
    for (double& x : b.data()) x = rng.uniform(-1, 1);
    const Matrix p = matmul_transposed(a, b);
    REQUIRE(p.rows() == 4);
    REQUIRE(p.cols() == 5);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 3; ++k) s += a(i, k) * b(j, k);
            CHECK(std::abs(p(i, j) - s) < 1e-14);
        }
    }
    const auto y = matvec(a, b.row(0));
    for (std::size_t i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(p(i, 0)));
    CHECK(code_of([&] { matvec(a, std::vector<double>{1, 2}); }) == ErrorCode::Shape);
    CHECK(code_of([] { Matrix(2, 2, std::vector<double>{1, 2, 3}); }) == ErrorCode::Shape);
    CHECK(code_of([] { Matrix::from_rows({{1, 2}, {3}}); }) == ErrorCode::Shape);
    CHECK(Matrix::identity(3)(1, 1) == 1.0);
    CHECK(Matrix::identity(3)(1, 2) == 0.0);
}

TEST_CASE("gumbel inverse CDF") {
    CHECK(std::abs(gumbel_from_uniform(std::exp(-1.0))) < 1e-15);
    CHECK(gumbel_from_uniform(0.5) == doctest::Approx(-std::log(-std::log(0.5))).epsilon(1e-15));
    CHECK(gumbel_from_uniform(0.5) == doctest::Approx(0.36651292).epsilon(1e-8));
}

TEST_CASE("sample_gumbel: determinism and Monte Carlo mean") {
    Rng a(42), b(42);
    CHECK(sample_gumbel(a, 16) == sample_gumbel(b, 16));
    CHECK(a == b);

    Rng rng(2024);
    const auto g = sample_gumbel(rng, 1'000'000);
    double mean = 0.0;
    for (double x : g) {
        REQUIRE(std::isfinite(x));
        mean += x;
    }
    mean /= static_cast<double>(g.size());
    CHECK(std::abs(mean - std::numbers::egamma) < 0.01);
}

TEST_CASE("gumbel_softmax") {
    std::vector<double> logits{0.3, -0.7, 1.1};
    std::vector<double> zeros(3, 0.0);
    const auto p = gumbel_softmax(logits, zeros, 1.0);
    const auto q = stable_softmax(logits);
    for (std::size_t i = 0; i < 3; ++i) CHECK(p[i] == q[i]);

    const auto sharp = gumbel_softmax(std::vector<double>{2, 0}, std::vector<double>{0, 0}, 0.1);
    CHECK(sharp[0] >= 0.999);
    CHECK(sharp[0] == doctest::Approx(std::exp(20.0) / (std::exp(20.0) + 1.0)));

    const auto one_hot = gumbel_softmax(logits, std::vector<double>{0.2, 0.1, -0.3}, 0.01);
    CHECK(*std::max_element(one_hot.begin(), one_hot.end()) >= 1.0 - 1e-6);

    Rng rng(5);
    const auto noisy = gumbel_softmax(logits, sample_gumbel(rng, 3), 0.7);
    CHECK(noisy[0] + noisy[1] + noisy[2] == doctest::Approx(1.0).epsilon(1e-12));

    CHECK(code_of([&] { gumbel_softmax(logits, zeros, 0.0); }) == ErrorCode::BadTau);
    CHECK(code_of([&] { gumbel_softmax(logits, zeros, -1.0); }) == ErrorCode::BadTau);
}

TEST_CASE("rng streams") {
    Rng base(9);
    Rng s1 = base.derive(1), s2 = base.derive(2);
    CHECK(s1.next_u64() != s2.next_u64());
    CHECK(base.derive(1) == Rng(9).derive(1));

    Rng rng(11);
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform();
        REQUIRE(u > 0.0);
        REQUIRE(u < 1.0);
        REQUIRE(rng.below(7) < 7);
    }

    const auto picks = sample_without_replacement(rng, 20, 20);
    CHECK(std::set<std::size_t>(picks.begin(), picks.end()).size() == 20);
    CHECK(code_of([&] { sample_without_replacement(rng, 3, 4); }) == ErrorCode::BadSpec);

    std::vector<std::size_t> items{0, 1, 2, 3, 4, 5};
    Rng r1(1), r2(1);
    auto copy = items;
    shuffle(r1, items);
    shuffle(r2, copy);
    CHECK(items == copy);
    CHECK(std::set<std::size_t>(items.begin(), items.end()).size() == 6);
}
