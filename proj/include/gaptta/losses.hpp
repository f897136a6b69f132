#pragma once

#include <gaptta/numerics.hpp>

#include <cstddef>
#include <span>
#include <string_view>

namespace gaptta {

// Class indices are zero-based throughout the library.

enum class LossChoice { Entropy, CrossEntropy };
enum class LabelMode { Hard, Soft };

std::string_view to_string(LossChoice choice) noexcept;
std::string_view to_string(LabelMode mode) noexcept;
LossChoice parse_loss_choice(std::string_view text);
LabelMode parse_label_mode(std::string_view text);

/// h(z): one-hot in hard mode, a full distribution in soft mode.
struct PseudoLabel {
    LabelMode mode = LabelMode::Hard;
    Vector dist;

    static PseudoLabel one_hot(std::size_t classes, std::size_t k);
    /// Throws InvalidArgument unless entries are >= 0, sum to 1 within 1e-9,
    /// and a hard label has exactly one entry equal to 1.
    void validate() const;
};

/// Entropy of softmax(logits).
double em_loss(std::span<const double> logits);
/// -sum_j h_j log softmax(logits)_j.
double ce_loss(std::span<const double> logits, const PseudoLabel& h);

/// d em_loss / d logits = -p_j (log p_j + H).
Vector em_loss_logit_grad(std::span<const double> logits);
/// d ce_loss / d logits = p - h, with h held fixed.
Vector ce_loss_logit_grad(std::span<const double> logits, std::span<const double> h);

// Weight-row gradients factor as z * s_k. The scalars and their logit
// derivatives are exposed separately so the GAP term can be differentiated
// through z.

/// s_k = -p_k (log p_k + H).
double em_weight_factor(std::span<const double> logits, std::size_t k);
/// s_k = p_k - h_k.
double ce_weight_factor(std::span<const double> logits, std::span<const double> h, std::size_t k);
Vector em_weight_factor_logit_grad(std::span<const double> logits, std::size_t k);
Vector ce_weight_factor_logit_grad(std::span<const double> logits, std::size_t k);

/// d em_loss / d w_k at fixed z.
Vector em_weight_grad(std::span<const double> z, std::span<const double> logits, std::size_t k);
/// d ce_loss / d w_k at fixed z and h.
Vector ce_weight_grad(std::span<const double> z, std::span<const double> logits,
                      const PseudoLabel& h, std::size_t k);

}  // namespace gaptta
