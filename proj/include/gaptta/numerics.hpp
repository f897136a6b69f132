#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace gaptta {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

double dot(std::span<const double> u, std::span<const double> v);
double norm(std::span<const double> v);
bool all_finite(std::span<const double> v) noexcept;

/// Numerically stable softmax (max subtraction).
Vector softmax(std::span<const double> logits);
/// log(softmax(logits)); finite for every finite input.
Vector log_softmax(std::span<const double> logits);
/// Shannon entropy in nats with 0 log 0 = 0.
double entropy(std::span<const double> probs);

/// u.v / (|u||v|), or 0 when either norm is below 1e-12.
double cosine_similarity(std::span<const double> u, std::span<const double> v);
/// Gradient of cosine_similarity(u, v) with respect to v (zero under the
/// zero-norm convention).
Vector cosine_similarity_grad(std::span<const double> u, std::span<const double> v);

inline constexpr double kCosineNormFloor = 1e-12;

std::size_t argmax(std::span<const double> v);

/// Seeded generator whose draw sequence depends only on the seed. Uses
/// mt19937_64 for the bit stream and portable transforms on top of it, so
/// the output does not depend on the standard library's distributions.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    /// Standard normal (Box-Muller).
    double normal();
    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n);

    template <typename T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = below(i);
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Derives an independent stream seed from a base seed and a salt.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) noexcept;

}  // namespace gaptta
