#pragma once

#include <gaptta/gap.hpp>
#include <gaptta/losses.hpp>
#include <gaptta/model.hpp>
#include <gaptta/numerics.hpp>

#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace gaptta {

enum class BnRole { Scale, Shift };

struct ParamRef {
    std::size_t layer = 0;
    BnRole role = BnRole::Scale;

    bool operator==(const ParamRef&) const = default;
};

/// Ordered, duplicate-free list of adaptable batch-norm parameters.
class ParamSelector {
public:
    ParamSelector() = default;
    explicit ParamSelector(std::vector<ParamRef> refs);

    /// Scale and shift of every BN layer, in layer order.
    static ParamSelector all_batch_norm(const ModelState& model);

    const std::vector<ParamRef>& refs() const noexcept { return refs_; }
    std::size_t size() const noexcept { return refs_.size(); }
    void validate(const ModelState& model) const;

private:
    std::vector<ParamRef> refs_;
};

/// One gradient vector per selected parameter.
using GradientSet = std::vector<Vector>;

std::span<const double> parameter(const ModelState& model, const ParamRef& ref);
std::span<double> parameter(ModelState& model, const ParamRef& ref);
Vector gather_parameters(const ModelState& model, const ParamSelector& sel);
void scatter_parameters(ModelState& model, const ParamSelector& sel, std::span<const double> flat);
Vector flatten(const GradientSet& grads);

enum class TtaObjective {
    None,
    Entropy,          // mean EM
    PseudoLabelCe,    // mean CE against hard pseudo-labels
    FilteredEntropy,  // entropy-filtered, re-weighted EM
    Supervised,       // mean CE against given labels (source training)
};

struct GapObjective {
    const PrototypeGradCache* cache = nullptr;
    double weight = 0.0;  // beta_t
    LossChoice data_loss = LossChoice::Entropy;
};

/// scale * (L_TTA + weight * L_GAP), both batch means.
struct LossSpec {
    TtaObjective tta = TtaObjective::None;
    double eata_margin = 0.0;
    std::optional<GapObjective> gap;
    double scale = 1.0;
};

/// Quantities read off the current prediction and treated as constants when
/// differentiating: pseudo-labels, GAP weights h(z) and rows m, EATA sample
/// weights.
struct FrozenTargets {
    std::vector<std::size_t> predicted;  // argmax of the logits, GAP row m
    std::vector<std::size_t> labels;     // CE targets: predicted or supervised
    Matrix weights_h;                 // GAP weighting h(z), B x c
    Vector sample_weights;            // EATA weights; empty otherwise
    Vector entropies;                 // per-sample EM at freeze time
    std::size_t retained = 0;
};

FrozenTargets freeze_targets(const Classifier& classifier, const Matrix& logits,
                             const LossSpec& spec, std::span<const int> labels = {});

struct LossValue {
    double tta = 0.0;
    double gap = 0.0;
    double total = 0.0;
};

struct LossEvaluation {
    LossValue value;
    Matrix d_logits;      // d total / d logits
    Matrix d_embeddings;  // direct d total / d z (GAP path), excluding d_logits * W
};

LossEvaluation evaluate_loss(const Classifier& classifier, const Matrix& embeddings,
                             const Matrix& logits, const LossSpec& spec,
                             const FrozenTargets& targets, bool with_gradient);

/// Gradients of every trainable parameter, used by source pretraining.
struct FullGradients {
    std::vector<Matrix> affine_weight;
    std::vector<Vector> affine_bias;
    std::vector<Vector> bn_scale;
    std::vector<Vector> bn_shift;
    Matrix head_weight;
    Vector head_bias;
    Matrix classifier_weight;
    Vector classifier_bias;
};

/// Reverse pass through classifier, head and blocks. With `weights` false only
/// BN scale/shift gradients are produced.
FullGradients backward(const ModelState& model, const ForwardTrace& trace,
                       const LossEvaluation& loss, bool weights);

struct AdaptableGradient {
    LossValue loss;
    GradientSet grads;
    ForwardTrace trace;
    FrozenTargets targets;
};

/// Exact gradient of the batch loss with respect to the selected BN
/// parameters, normalizing with batch statistics.
AdaptableGradient compute_adaptable(const ModelState& model, const Matrix& inputs,
                                    const LossSpec& spec, const ParamSelector& sel);
GradientSet grad_adaptable(const ModelState& model, const Matrix& inputs, const LossSpec& spec,
                           const ParamSelector& sel);

/// Batch loss with targets held fixed (batch-stats normalization).
double batch_loss(const ModelState& model, const Matrix& inputs, const LossSpec& spec,
                  const FrozenTargets& targets);

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h per coordinate.
Vector finite_diff_oracle(const ScalarFunction& f, std::span<const double> params, double step);

/// max_i |a_i - b_i| / max(max_i |b_i|, 1e-8)
double max_relative_error(std::span<const double> actual, std::span<const double> reference);

}  // namespace gaptta
