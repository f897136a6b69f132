#include <gaptta/numerics.hpp>

#include <gaptta/error.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace gaptta {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::InvalidArgument: return "invalid-argument";
        case ErrorKind::Shape: return "shape";
        case ErrorKind::NonFinite: return "non-finite";
        case ErrorKind::Format: return "format";
        case ErrorKind::Version: return "version";
        case ErrorKind::Truncated: return "truncated";
        case ErrorKind::Length: return "length";
        case ErrorKind::Unsupported: return "unsupported-type";
        case ErrorKind::Io: return "io";
        case ErrorKind::Config: return "config";
        case ErrorKind::Dimension: return "dimension";
    }
    return "unknown";
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        require(r.size() == cols_, ErrorKind::Shape, "ragged matrix initializer");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

double dot(std::span<const double> u, std::span<const double> v) {
    require(u.size() == v.size(), ErrorKind::Shape,
            "dot: length mismatch " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
    return acc;
}

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

bool all_finite(std::span<const double> v) noexcept {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

namespace {

void check_logits(std::span<const double> logits, const char* what) {
    require(!logits.empty(), ErrorKind::InvalidArgument, std::string(what) + ": empty input");
    require(all_finite(logits), ErrorKind::NonFinite, std::string(what) + ": non-finite input");
}

}  // namespace

Vector log_softmax(std::span<const double> logits) {
    check_logits(logits, "log_softmax");
    const double peak = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (double l : logits) total += std::exp(l - peak);
    const double log_total = std::log(total);
    Vector out(logits.size());
    for (std::size_t j = 0; j < logits.size(); ++j) out[j] = logits[j] - peak - log_total;
    return out;
}

Vector softmax(std::span<const double> logits) {
    check_logits(logits, "softmax");
    const double peak = *std::max_element(logits.begin(), logits.end());
    Vector out(logits.size());
    double total = 0.0;
    for (std::size_t j = 0; j < logits.size(); ++j) {
        out[j] = std::exp(logits[j] - peak);
        total += out[j];
    }
    for (double& p : out) p /= total;
    return out;
}

double entropy(std::span<const double> probs) {
    require(!probs.empty(), ErrorKind::InvalidArgument, "entropy: empty input");
    double total = 0.0;
    for (double p : probs) {
        require(std::isfinite(p), ErrorKind::NonFinite, "entropy: non-finite probability");
        require(p >= 0.0, ErrorKind::InvalidArgument, "entropy: negative probability");
        total += p;
    }
    require(std::abs(total - 1.0) <= 1e-9, ErrorKind::InvalidArgument,
            "entropy: probabilities sum to " + std::to_string(total));
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
    require(u.size() == v.size(), ErrorKind::Shape, "cosine_similarity: length mismatch");
    const double nu = norm(u);
    const double nv = norm(v);
    if (nu < kCosineNormFloor || nv < kCosineNormFloor) return 0.0;
    return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

Vector cosine_similarity_grad(std::span<const double> u, std::span<const double> v) {
    require(u.size() == v.size(), ErrorKind::Shape, "cosine_similarity_grad: length mismatch");
    Vector grad(v.size(), 0.0);
    const double nu = norm(u);
    const double nv = norm(v);
    if (nu < kCosineNormFloor || nv < kCosineNormFloor) return grad;
    const double cos = dot(u, v) / (nu * nv);
    for (std::size_t i = 0; i < v.size(); ++i) {
        grad[i] = u[i] / (nu * nv) - cos * v[i] / (nv * nv);
    }
    return grad;
}

std::size_t argmax(std::span<const double> v) {
    require(!v.empty(), ErrorKind::InvalidArgument, "argmax: empty input");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;  // strict: ties keep the lowest index
    }
    return best;
}

double SeededRng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double SeededRng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

std::size_t SeededRng::below(std::size_t n) {
    require(n > 0, ErrorKind::InvalidArgument, "SeededRng::below: n must be positive");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t draw = 0;
    do {
        draw = engine_();
    } while (draw >= limit);
    return static_cast<std::size_t>(draw % bound);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) noexcept {
    // splitmix64 finalizer over the combined value
    std::uint64_t x = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace gaptta
