#include "cbmkit/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace cbmkit {

namespace {

constexpr double kZeroNorm = 1e-12;

std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

void check_finite(std::span<const double> v) {
    for (double x : v) {
        if (!std::isfinite(x)) fail(ErrorCode::NonFinite, "non-finite input to softmax");
    }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        fail(ErrorCode::Shape, "matrix data length " + std::to_string(data_.size()) + " != " +
                                   std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return {};
    const std::size_t cols = rows.front().size();
    Matrix m(rows.size(), cols);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != cols) fail(ErrorCode::Shape, "ragged rows");
        std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
    }
    return m;
}

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

double dot(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) fail(ErrorCode::Shape, "dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
}

double norm2(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

std::vector<double> matvec(const Matrix& m, std::span<const double> x) {
    if (m.cols() != x.size()) fail(ErrorCode::Shape, "matvec: matrix has " + std::to_string(m.cols()) +
                                                         " columns, vector has " + std::to_string(x.size()));
    std::vector<double> out(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        double s = 0.0;
        for (std::size_t c = 0; c < row.size(); ++c) s += row[c] * x[c];
        out[r] = s;
    }
    return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) fail(ErrorCode::Shape, "matmul: inner dimensions differ");
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto ai = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const auto bj = b.row(j);
            double s = 0.0;
            for (std::size_t k = 0; k < ai.size(); ++k) s += ai[k] * bj[k];
            out(i, j) = s;
        }
    }
    return out;
}

double cosine(std::span<const double> u, std::span<const double> v) {
    if (u.empty() || u.size() != v.size()) fail(ErrorCode::Shape, "cosine: vectors must share a nonzero length");
    const double nu = norm2(u);
    const double nv = norm2(v);
    if (nu < kZeroNorm || nv < kZeroNorm) fail(ErrorCode::ZeroNorm, "cosine of a zero-norm vector");
    return dot(u, v) / (nu * nv);
}

std::vector<double> stable_softmax(std::span<const double> v) {
    if (v.empty()) fail(ErrorCode::Shape, "softmax of empty vector");
    check_finite(v);
    const double mx = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size());
    double total = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        total += out[i];
    }
    for (double& x : out) x /= total;
    return out;
}

double log_sum_exp(std::span<const double> v) {
    if (v.empty()) fail(ErrorCode::Shape, "log_sum_exp of empty vector");
    check_finite(v);
    const double mx = *std::max_element(v.begin(), v.end());
    double total = 0.0;
    for (double x : v) total += std::exp(x - mx);
    return mx + std::log(total);
}

std::size_t argmax(std::span<const double> v) {
    if (v.empty()) fail(ErrorCode::Shape, "argmax of empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream) noexcept
    : seed_(seed), stream_(stream), key_(splitmix64(seed ^ splitmix64(stream ^ 0xD1B54A32D192ED03ULL))) {}

Rng Rng::derive(std::uint64_t stream_id) const noexcept {
    return Rng(seed_, splitmix64(stream_ + 0x632BE59BD9B4E019ULL) ^ stream_id);
}

std::uint64_t Rng::next_u64() noexcept {
    return splitmix64(key_ + 0x9E3779B97F4A7C15ULL * position_++);
}

double Rng::uniform() noexcept {
    // 53 random bits, offset by half an ulp so neither 0 nor 1 is reachable.
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

double Rng::gaussian() noexcept {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::below(std::size_t n) noexcept {
    const auto wide = static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n);
    return static_cast<std::size_t>(wide >> 64);
}

double gumbel_from_uniform(double u) { return -std::log(-std::log(u)); }

std::vector<double> sample_gumbel(Rng& rng, std::size_t n) {
    if (n == 0) fail(ErrorCode::BadSpec, "sample_gumbel: n must be >= 1");
    std::vector<double> g(n);
    for (double& x : g) x = gumbel_from_uniform(rng.uniform());
    return g;
}

std::vector<double> gumbel_softmax(std::span<const double> logits, std::span<const double> noise, double tau) {
    if (!(tau > 0.0)) fail(ErrorCode::BadTau, "temperature must be positive");
    if (logits.size() != noise.size()) fail(ErrorCode::Shape, "gumbel_softmax: logits and noise differ in length");
    std::vector<double> z(logits.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = (logits[i] + noise[i]) / tau;
    return stable_softmax(z);
}

std::vector<std::size_t> sample_without_replacement(Rng& rng, std::size_t n, std::size_t k) {
    if (k > n) fail(ErrorCode::BadSpec, "cannot sample " + std::to_string(k) + " of " + std::to_string(n));
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + rng.below(n - i);
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
}

void shuffle(Rng& rng, std::vector<std::size_t>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
        std::swap(items[i - 1], items[rng.below(i)]);
    }
}

}  // namespace cbmkit
