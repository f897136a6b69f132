#pragma once

#include <gaptta/numerics.hpp>

#include <span>

namespace gaptta {

/// Entropy-based instance selection and re-weighting:
/// weight_i = exp(margin - e_i) when e_i < margin, else 0.
Vector eata_filter(std::span<const double> entropies, double margin);

}  // namespace gaptta
