#include <gaptta/gradient.hpp>

#include <gaptta/error.hpp>
#include <gaptta/selection.hpp>

#include <algorithm>
#include <cmath>
#include <string>

namespace gaptta {

ParamSelector::ParamSelector(std::vector<ParamRef> refs) : refs_(std::move(refs)) {
    for (std::size_t i = 0; i < refs_.size(); ++i) {
        for (std::size_t j = i + 1; j < refs_.size(); ++j) {
            require(!(refs_[i] == refs_[j]), ErrorKind::InvalidArgument,
                    "param selector: duplicate entry for layer " + std::to_string(refs_[i].layer));
        }
    }
}

ParamSelector ParamSelector::all_batch_norm(const ModelState& model) {
    std::vector<ParamRef> refs;
    for (std::size_t l = 0; l < model.extractor.blocks.size(); ++l) {
        refs.push_back({l, BnRole::Scale});
        refs.push_back({l, BnRole::Shift});
    }
    return ParamSelector(std::move(refs));
}

void ParamSelector::validate(const ModelState& model) const {
    for (const auto& ref : refs_) {
        require(ref.layer < model.extractor.blocks.size(), ErrorKind::InvalidArgument,
                "param selector: layer " + std::to_string(ref.layer) + " does not exist");
    }
}

std::span<const double> parameter(const ModelState& model, const ParamRef& ref) {
    const auto& norm = model.extractor.blocks.at(ref.layer).norm;
    return ref.role == BnRole::Scale ? std::span<const double>(norm.scale)
                                     : std::span<const double>(norm.shift);
}

std::span<double> parameter(ModelState& model, const ParamRef& ref) {
    auto& norm = model.extractor.blocks.at(ref.layer).norm;
    return ref.role == BnRole::Scale ? std::span<double>(norm.scale) : std::span<double>(norm.shift);
}

Vector gather_parameters(const ModelState& model, const ParamSelector& sel) {
    sel.validate(model);
    Vector flat;
    for (const auto& ref : sel.refs()) {
        const auto p = parameter(model, ref);
        flat.insert(flat.end(), p.begin(), p.end());
    }
    return flat;
}

void scatter_parameters(ModelState& model, const ParamSelector& sel, std::span<const double> flat) {
    sel.validate(model);
    std::size_t offset = 0;
    for (const auto& ref : sel.refs()) {
        auto p = parameter(model, ref);
        require(offset + p.size() <= flat.size(), ErrorKind::Shape, "scatter: flat vector too short");
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), p.size(), p.begin());
        offset += p.size();
    }
    require(offset == flat.size(), ErrorKind::Shape, "scatter: flat vector too long");
}

Vector flatten(const GradientSet& grads) {
    Vector flat;
    for (const auto& g : grads) flat.insert(flat.end(), g.begin(), g.end());
    return flat;
}

FrozenTargets freeze_targets(const Classifier& classifier, const Matrix& logits,
                             const LossSpec& spec, std::span<const int> labels) {
    const std::size_t n = logits.rows();
    const std::size_t c = logits.cols();
    FrozenTargets t;
    t.predicted.resize(n);
    t.entropies.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        t.predicted[i] = argmax(logits.row(i));
        t.entropies[i] = em_loss(logits.row(i));
    }
    if (spec.tta == TtaObjective::Supervised) {
        require(labels.size() == n, ErrorKind::InvalidArgument,
                "supervised loss needs one label per sample");
        t.labels.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < c,
                    ErrorKind::InvalidArgument, "label out of range");
            t.labels[i] = static_cast<std::size_t>(labels[i]);
        }
    } else {
        t.labels = t.predicted;
    }
    if (spec.tta == TtaObjective::FilteredEntropy) {
        t.sample_weights = eata_filter(t.entropies, spec.eata_margin);
        t.retained = static_cast<std::size_t>(
            std::count_if(t.sample_weights.begin(), t.sample_weights.end(),
                          [](double w) { return w > 0.0; }));
    } else {
        t.retained = n;
    }
    if (spec.gap) {
        const auto* cache = spec.gap->cache;
        require(cache != nullptr, ErrorKind::InvalidArgument, "GAP objective without a cache");
        require(cache->matches(classifier), ErrorKind::InvalidArgument,
                "prototype cache was built for a different classifier");
        t.weights_h = Matrix(n, c, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const PseudoLabel h = pseudo_label(logits.row(i), cache->mode());
            std::copy(h.dist.begin(), h.dist.end(), t.weights_h.row(i).begin());
        }
    }
    return t;
}

LossEvaluation evaluate_loss(const Classifier& classifier, const Matrix& embeddings,
                             const Matrix& logits, const LossSpec& spec,
                             const FrozenTargets& targets, bool with_gradient) {
    const std::size_t n = logits.rows();
    const std::size_t c = logits.cols();
    require(n > 0 && embeddings.rows() == n, ErrorKind::Shape, "loss: batch shape mismatch");
    require(targets.labels.size() == n && targets.predicted.size() == n, ErrorKind::Shape,
            "loss: frozen targets do not match the batch");
    const double inv_n = 1.0 / static_cast<double>(n);

    LossEvaluation out;
    if (with_gradient) {
        out.d_logits = Matrix(n, c, 0.0);
    }

    auto add_logit_grad = [&](std::size_t i, const Vector& g, double coeff) {
        auto row = out.d_logits.row(i);
        for (std::size_t j = 0; j < c; ++j) row[j] += coeff * g[j];
    };

    switch (spec.tta) {
        case TtaObjective::None:
            break;
        case TtaObjective::Entropy:
            for (std::size_t i = 0; i < n; ++i) {
                out.value.tta += inv_n * em_loss(logits.row(i));
                if (with_gradient) add_logit_grad(i, em_loss_logit_grad(logits.row(i)), spec.scale * inv_n);
            }
            break;
        case TtaObjective::PseudoLabelCe:
        case TtaObjective::Supervised:
            for (std::size_t i = 0; i < n; ++i) {
                const PseudoLabel h = PseudoLabel::one_hot(c, targets.labels[i]);
                out.value.tta += inv_n * ce_loss(logits.row(i), h);
                if (with_gradient) {
                    add_logit_grad(i, ce_loss_logit_grad(logits.row(i), h.dist), spec.scale * inv_n);
                }
            }
            break;
        case TtaObjective::FilteredEntropy: {
            require(targets.sample_weights.size() == n, ErrorKind::Shape,
                    "loss: missing sample weights for filtered entropy");
            if (targets.retained == 0) break;
            const double inv_kept = 1.0 / static_cast<double>(targets.retained);
            for (std::size_t i = 0; i < n; ++i) {
                const double w = targets.sample_weights[i];
                if (w == 0.0) continue;
                out.value.tta += inv_kept * w * em_loss(logits.row(i));
                if (with_gradient) {
                    add_logit_grad(i, em_loss_logit_grad(logits.row(i)), spec.scale * inv_kept * w);
                }
            }
            break;
        }
    }

    if (spec.gap) {
        const GapObjective& gap = *spec.gap;
        require(gap.cache != nullptr, ErrorKind::InvalidArgument, "GAP objective without a cache");
        require(targets.weights_h.rows() == n, ErrorKind::Shape, "loss: missing GAP weights");
        // A zero weight leaves the gradient path untouched, so beta = 0 reproduces
        // the plain objective bit for bit.
        const bool grad = with_gradient && gap.weight != 0.0;
        if (grad) out.d_embeddings = Matrix(n, embeddings.cols(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            GapSample s = gap_sample(classifier, embeddings.row(i), logits.row(i), *gap.cache,
                                     gap.data_loss, targets.weights_h.row(i), targets.predicted[i],
                                     grad);
            out.value.gap += inv_n * s.value;
            if (grad) {
                auto row = out.d_embeddings.row(i);
                const double coeff = spec.scale * gap.weight * inv_n;
                for (std::size_t k = 0; k < row.size(); ++k) row[k] += coeff * s.dz[k];
            }
        }
    }

    const double gap_weight = spec.gap ? spec.gap->weight : 0.0;
    out.value.total = spec.scale * (out.value.tta + (gap_weight != 0.0 ? gap_weight * out.value.gap : 0.0));
    require(std::isfinite(out.value.total), ErrorKind::NonFinite, "loss: non-finite value");
    return out;
}

namespace {

Matrix times(const Matrix& a, const Matrix& b) {  // a (n x k) * b (k x m)
    Matrix out(a.rows(), b.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double v = a(i, k);
            if (v == 0.0) continue;
            const auto brow = b.row(k);
            auto orow = out.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += v * brow[j];
        }
    }
    return out;
}

Matrix transpose_times(const Matrix& a, const Matrix& b) {  // a^T (k x n) * b (n x m)
    Matrix out(a.cols(), b.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto brow = b.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double v = a(i, k);
            if (v == 0.0) continue;
            auto orow = out.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += v * brow[j];
        }
    }
    return out;
}

Vector column_sums(const Matrix& a) {
    Vector out(a.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) out[j] += a(i, j);
    }
    return out;
}

void check_finite(std::span<const double> v, const std::string& where) {
    require(all_finite(v), ErrorKind::NonFinite, "non-finite gradient in " + where);
}

}  // namespace

FullGradients backward(const ModelState& model, const ForwardTrace& trace,
                       const LossEvaluation& loss, bool weights) {
    const std::size_t n = trace.logits.rows();
    const std::size_t blocks = model.extractor.blocks.size();
    FullGradients g;
    g.affine_weight.resize(blocks);
    g.affine_bias.resize(blocks);
    g.bn_scale.resize(blocks);
    g.bn_shift.resize(blocks);

    if (weights) {
        g.classifier_weight = transpose_times(loss.d_logits, trace.embeddings);
        g.classifier_bias = column_sums(loss.d_logits);
    }
    Matrix d_z = times(loss.d_logits, model.classifier.weight);
    if (!loss.d_embeddings.empty()) {
        for (std::size_t i = 0; i < d_z.size(); ++i) d_z.values()[i] += loss.d_embeddings.values()[i];
    }
    check_finite(d_z.values(), "embeddings");

    if (weights) {
        g.head_weight = transpose_times(d_z, trace.head_input);
        g.head_bias = column_sums(d_z);
    }
    Matrix d_hidden = times(d_z, model.extractor.head.weight);

    for (std::size_t l = blocks; l-- > 0;) {
        const auto& block = model.extractor.blocks[l];
        const auto& step = trace.blocks[l];
        const std::size_t w = block.norm.width();
        Matrix d_xhat(n, w);
        Vector d_scale(w, 0.0);
        Vector d_shift(w, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                const double dy = step.activated(i, j) > 0.0 ? d_hidden(i, j) : 0.0;
                d_scale[j] += dy * step.normalized(i, j);
                d_shift[j] += dy;
                d_xhat(i, j) = dy * block.norm.scale[j];
            }
        }
        Matrix d_pre(n, w);
        if (trace.mode == NormMode::BatchStats) {
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t j = 0; j < w; ++j) {
                double sum = 0.0;
                double sum_xhat = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    sum += d_xhat(i, j);
                    sum_xhat += d_xhat(i, j) * step.normalized(i, j);
                }
                for (std::size_t i = 0; i < n; ++i) {
                    d_pre(i, j) = step.inv_std[j] * inv_n *
                                  (static_cast<double>(n) * d_xhat(i, j) - sum -
                                   step.normalized(i, j) * sum_xhat);
                }
            }
        } else {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < w; ++j) d_pre(i, j) = d_xhat(i, j) * step.inv_std[j];
            }
        }
        const std::string where = "block " + std::to_string(l);
        check_finite(d_scale, where);
        check_finite(d_shift, where);
        g.bn_scale[l] = std::move(d_scale);
        g.bn_shift[l] = std::move(d_shift);
        if (weights) {
            g.affine_weight[l] = transpose_times(d_pre, step.input);
            g.affine_bias[l] = column_sums(d_pre);
        }
        if (l > 0) d_hidden = times(d_pre, block.affine.weight);
    }
    return g;
}

AdaptableGradient compute_adaptable(const ModelState& model, const Matrix& inputs,
                                    const LossSpec& spec, const ParamSelector& sel) {
    sel.validate(model);
    AdaptableGradient out;
    out.trace = trace_forward(model, inputs, NormMode::BatchStats);
    out.targets = freeze_targets(model.classifier, out.trace.logits, spec);
    const LossEvaluation loss = evaluate_loss(model.classifier, out.trace.embeddings,
                                              out.trace.logits, spec, out.targets, true);
    out.loss = loss.value;
    const FullGradients full = backward(model, out.trace, loss, false);
    for (const auto& ref : sel.refs()) {
        out.grads.push_back(ref.role == BnRole::Scale ? full.bn_scale[ref.layer]
                                                      : full.bn_shift[ref.layer]);
    }
    return out;
}

GradientSet grad_adaptable(const ModelState& model, const Matrix& inputs, const LossSpec& spec,
                           const ParamSelector& sel) {
    return compute_adaptable(model, inputs, spec, sel).grads;
}

double batch_loss(const ModelState& model, const Matrix& inputs, const LossSpec& spec,
                  const FrozenTargets& targets) {
    const ForwardTrace trace = trace_forward(model, inputs, NormMode::BatchStats);
    return evaluate_loss(model.classifier, trace.embeddings, trace.logits, spec, targets, false)
        .value.total;
}

Vector finite_diff_oracle(const ScalarFunction& f, std::span<const double> params, double step) {
    require(step > 0.0 && std::isfinite(step), ErrorKind::InvalidArgument,
            "finite differences: step must be positive");
    Vector probe(params.begin(), params.end());
    Vector grad(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        probe[i] = params[i] + step;
        const double up = f(probe);
        probe[i] = params[i] - step;
        const double down = f(probe);
        probe[i] = params[i];
        require(std::isfinite(up) && std::isfinite(down), ErrorKind::NonFinite,
                "finite differences: non-finite evaluation at coordinate " + std::to_string(i));
        grad[i] = (up - down) / (2.0 * step);
    }
    return grad;
}

double max_relative_error(std::span<const double> actual, std::span<const double> reference) {
    require(actual.size() == reference.size(), ErrorKind::Shape, "relative error: length mismatch");
    double scale = 0.0;
    double worst = 0.0;
    for (std::size_t i = 0; i < actual.size(); ++i) {
        scale = std::max(scale, std::abs(reference[i]));
        worst = std::max(worst, std::abs(actual[i] - reference[i]));
    }
    return worst / std::max(scale, 1e-8);
}

}  // namespace gaptta
