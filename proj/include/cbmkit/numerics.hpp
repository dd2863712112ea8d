#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cbmkit/error.hpp"

namespace cbmkit {

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);
    /// Builds from nested rows; every row must have the same length.
    static Matrix from_rows(const std::vector<std::vector<double>>& rows);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    bool all_finite() const noexcept;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

double dot(std::span<const double> u, std::span<const double> v);
double norm2(std::span<const double> v);

/// out = m * x
std::vector<double> matvec(const Matrix& m, std::span<const double> x);
/// a * b^T, the natural product for row-major embedding tables.
Matrix matmul_transposed(const Matrix& a, const Matrix& b);

double cosine(std::span<const double> u, std::span<const double> v);

std::vector<double> stable_softmax(std::span<const double> v);
double log_sum_exp(std::span<const double> v);

/// Index of the maximum entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> v);

/// Counter-based generator: the value at (seed, stream, position) is fixed, so
/// independent streams never share state.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) noexcept;

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream() const noexcept { return stream_; }
    std::uint64_t position() const noexcept { return position_; }

    /// A fresh generator on a different stream of the same seed.
    Rng derive(std::uint64_t stream_id) const noexcept;

    std::uint64_t next_u64() noexcept;
    /// Uniform on the open interval (0, 1).
    double uniform() noexcept;
    double uniform(double lo, double hi) noexcept;
    double gaussian() noexcept;
    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n) noexcept;

    friend bool operator==(const Rng&, const Rng&) = default;

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t key_;
    std::uint64_t position_ = 0;
};

/// Inverse Gumbel CDF: -log(-log u).
double gumbel_from_uniform(double u);
std::vector<double> sample_gumbel(Rng& rng, std::size_t n);
std::vector<double> gumbel_softmax(std::span<const double> logits, std::span<const double> noise, double tau);

/// k distinct indices from [0, n), uniformly, in sampling order.
std::vector<std::size_t> sample_without_replacement(Rng& rng, std::size_t n, std::size_t k);
void shuffle(Rng& rng, std::vector<std::size_t>& items);

}  // namespace cbmkit
