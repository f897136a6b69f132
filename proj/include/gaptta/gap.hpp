#pragma once

#include <gaptta/losses.hpp>
#include <gaptta/model.hpp>
#include <gaptta/numerics.hpp>

#include <cstddef>
#include <span>
#include <vector>

namespace gaptta {

/// Weight-space gradients of the prototype features p_k = w_k, computed once
/// against a frozen classifier.
///
/// All prototype gradients are collinear with their prototype,
/// grad_{w_m} l(w_k; w) = w_k * factor(k, m), so the soft-weighting cache keeps
/// only the c x c factor grid next to a copy of the weight rows. The hard cache
/// materialises the diagonal vectors grad_{w_k} l(w_k; w).
class PrototypeGradCache {
public:
    PrototypeGradCache() = default;

    LossChoice loss() const noexcept { return loss_; }
    LabelMode mode() const noexcept { return mode_; }
    std::size_t classes() const noexcept { return rows_.rows(); }
    std::size_t dim() const noexcept { return rows_.cols(); }

    /// grad_{w_m} l(w_k; w). Hard caches only answer k == m.
    Vector gradient(std::size_t k, std::size_t m) const;
    double factor(std::size_t k, std::size_t m) const;
    /// True when w_k is the zero row; its gradients are all zero.
    bool inert(std::size_t k) const { return inert_.at(k) != 0; }

    /// Bitwise comparison against the classifier the cache was built from.
    bool matches(const Classifier& classifier) const;

    const Matrix& diagonal() const noexcept { return diagonal_; }
    const Matrix& factors() const noexcept { return factors_; }

private:
    friend PrototypeGradCache build_prototype_cache(const Classifier&, LossChoice, LabelMode);

    LossChoice loss_ = LossChoice::Entropy;
    LabelMode mode_ = LabelMode::Hard;
    Matrix rows_;
    Vector bias_;
    Matrix factors_;   // soft: full grid; hard: diagonal entries only
    Matrix diagonal_;  // hard only: row k = grad_{w_k} l(w_k; w)
    std::vector<char> inert_;
};

PrototypeGradCache build_prototype_cache(const Classifier& classifier, LossChoice proto_loss,
                                         LabelMode mode);

struct GapConfig {
    double beta = 50.0;
    double gamma = 100.0;  // decay constant, in adaptation steps
    LabelMode mode = LabelMode::Hard;
    LossChoice proto_loss = LossChoice::Entropy;
    LossChoice data_loss = LossChoice::Entropy;

    void validate() const;
};

/// Hard: one-hot at the maximal logit (lowest index wins ties). Soft: softmax.
PseudoLabel pseudo_label(std::span<const double> logits, LabelMode mode);

/// beta * exp(-t / gamma).
double decay_weight(const GapConfig& cfg, std::size_t t);

struct GapSample {
    double value = 0.0;
    Vector dz;  // d value / d z; empty unless requested
};

/// One sample's regularizer
///
///     -sum_k h_k cos_sim(grad_{w_m} l(w_k; w), grad_{w_m} l_data(z; w))
///
/// with the weights `h` and the row index `m` supplied by the caller and held
/// constant. In hard mode only k = m contributes. The data-loss gradient is
/// z * s_m(z); the returned dz includes the derivative through s_m.
GapSample gap_sample(const Classifier& classifier, std::span<const double> z,
                     std::span<const double> logits, const PrototypeGradCache& cache,
                     LossChoice data_loss, std::span<const double> h, std::size_t m,
                     bool with_gradient);

/// Regularizer value for one sample, pseudo-label and m taken from the logits.
double gap_loss(const Classifier& classifier, std::span<const double> z,
                std::span<const double> logits, const PrototypeGradCache& cache,
                const GapConfig& cfg);
/// Mean over the rows of a batch.
double gap_loss(const Classifier& classifier, const Matrix& z, const Matrix& logits,
                const PrototypeGradCache& cache, const GapConfig& cfg);

/// Scalar factor of grad_{w_k} l(z; w) for the chosen loss; CE uses the hard
/// pseudo-label of the logits.
double weight_factor(LossChoice loss, std::span<const double> logits, std::size_t k);

struct TaylorCheck {
    double actual = 0.0;     // l(p_k; w) - l(p_k; w - alpha * grad_w l(z; w))
    double predicted = 0.0;  // alpha * <grad_w l(p_k; w), grad_w l(z; w)>
};

/// First-order check on a copy of the classifier: one full weight-matrix
/// gradient step on z, measured at the prototype p_k = w_k.
TaylorCheck taylor_alignment_check(const ModelState& model, std::span<const double> z,
                                   std::size_t k, double alpha,
                                   LossChoice loss = LossChoice::Entropy);

}  // namespace gaptta
