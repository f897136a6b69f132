#include <gaptta/engine.hpp>

#include <gaptta/error.hpp>

#include <cmath>
#include <string>

namespace gaptta {

std::string_view to_string(Method method) noexcept {
    switch (method) {
        case Method::NoAdapt: return "no-adapt";
        case Method::Norm: return "norm";
        case Method::PseudoLabel: return "pl";
        case Method::Tent: return "tent";
        case Method::EataLite: return "eata-lite";
    }
    return "unknown";
}

Method parse_method(std::string_view text) {
    if (text == "no-adapt" || text == "source") return Method::NoAdapt;
    if (text == "norm") return Method::Norm;
    if (text == "pl") return Method::PseudoLabel;
    if (text == "tent") return Method::Tent;
    if (text == "eata-lite" || text == "eata") return Method::EataLite;
    fail(ErrorKind::Config, "unknown method '" + std::string(text) +
                                "' (expected no-adapt|norm|pl|tent|eata-lite)");
}

Vector eata_filter(std::span<const double> entropies, double margin) {
    require(std::isfinite(margin) && margin > 0.0, ErrorKind::Config,
            "eata: entropy margin must be positive");
    Vector weights(entropies.size(), 0.0);
    for (std::size_t i = 0; i < entropies.size(); ++i) {
        const double e = entropies[i];
        require(std::isfinite(e) && e >= 0.0, ErrorKind::InvalidArgument,
                "eata: entropies must be finite and non-negative");
        if (e < margin) weights[i] = std::exp(margin - e);
    }
    return weights;
}

bool AdaptConfig::updates_parameters() const noexcept {
    return method == Method::PseudoLabel || method == Method::Tent || method == Method::EataLite;
}

double AdaptConfig::eata_margin(std::size_t classes) const {
    return eata_margin_factor * std::log(static_cast<double>(classes));
}

void AdaptConfig::validate() const {
    require(batch_size >= 2, ErrorKind::Config, "adapt: batch size must be at least 2");
    if (updates_parameters()) {
        require(std::isfinite(lr) && lr > 0.0, ErrorKind::Config, "adapt: learning rate must be > 0");
        require(std::isfinite(momentum) && momentum >= 0.0 && momentum < 1.0, ErrorKind::Config,
                "adapt: momentum must lie in [0, 1)");
    }
    if (method == Method::EataLite) {
        require(std::isfinite(eata_margin_factor) && eata_margin_factor > 0.0, ErrorKind::Config,
                "eata: entropy margin must be positive");
    }
    if (gap_enabled) {
        require(updates_parameters(), ErrorKind::Config,
                "adapt: GAP needs a method that updates parameters (pl|tent|eata-lite)");
        gap.validate();
    }
}

StreamBatch::StreamBatch(Matrix inputs, std::vector<int> labels, std::size_t index)
    : inputs_(std::move(inputs)), labels_(std::move(labels)), index_(index) {
    require(labels_.size() == inputs_.rows(), ErrorKind::Shape, "stream batch: label count mismatch");
    require(inputs_.rows() >= 2, ErrorKind::InvalidArgument, "stream batch: needs at least 2 samples");
}

StreamAdapter::StreamAdapter(ModelState& model, AdaptConfig cfg, const PrototypeGradCache* cache)
    : model_(model), cfg_(std::move(cfg)) {
    cfg_.validate();
    model_.validate();
    if (cfg_.gap_enabled) {
        if (cache == nullptr) {
            owned_cache_ = build_prototype_cache(model_.classifier, cfg_.gap.proto_loss, cfg_.gap.mode);
            cache_ = &*owned_cache_;
        } else {
            require(cache->matches(model_.classifier), ErrorKind::InvalidArgument,
                    "adapt: prototype cache does not match the model's classifier");
            require(cache->mode() == cfg_.gap.mode && cache->loss() == cfg_.gap.proto_loss,
                    ErrorKind::Config, "adapt: prototype cache built for a different GAP setting");
            cache_ = cache;
        }
    }
    if (cfg_.updates_parameters()) {
        selector_ = ParamSelector::all_batch_norm(model_);
        for (const auto& ref : selector_.refs()) velocity_.emplace_back(parameter(model_, ref).size(), 0.0);
    }
}

LossSpec StreamAdapter::loss_spec(std::size_t t) const {
    LossSpec spec;
    switch (cfg_.method) {
        case Method::Tent: spec.tta = TtaObjective::Entropy; break;
        case Method::PseudoLabel: spec.tta = TtaObjective::PseudoLabelCe; break;
        case Method::EataLite:
            spec.tta = TtaObjective::FilteredEntropy;
            spec.eata_margin = cfg_.eata_margin(model_.classes());
            break;
        default: break;
    }
    if (cfg_.gap_enabled) {
        spec.gap = GapObjective{cache_, decay_weight(cfg_.gap, t), cfg_.gap.data_loss};
    }
    return spec;
}

StepResult StreamAdapter::adapt(UnlabeledBatch batch, std::size_t t) {
    StepResult out;
    const Matrix* logits = nullptr;
    Matrix plain_logits;

    if (cfg_.method == Method::NoAdapt) {
        plain_logits = classify(model_.classifier,
                                forward_features(model_, batch.inputs, NormMode::RunningStats));
        logits = &plain_logits;
    } else if (cfg_.method == Method::Norm) {
        update_bn_statistics(model_, batch.inputs);
        plain_logits = classify(model_.classifier,
                                forward_features(model_, batch.inputs, NormMode::BatchStats));
        logits = &plain_logits;
    }

    if (logits != nullptr) {
        out.predictions.resize(logits->rows());
        for (std::size_t i = 0; i < logits->rows(); ++i) {
            out.predictions[i] = static_cast<int>(argmax(logits->row(i)));
        }
        return out;
    }

    update_bn_statistics(model_, batch.inputs);
    const LossSpec spec = loss_spec(t);
    AdaptableGradient result = compute_adaptable(model_, batch.inputs, spec, selector_);

    out.loss = result.loss;
    out.beta_t = spec.gap ? spec.gap->weight : 0.0;
    require(std::isfinite(out.loss.total), ErrorKind::NonFinite,
            "adapt: non-finite loss at batch " + std::to_string(batch.index));

    const auto& logits_b = result.trace.logits;
    out.predictions.resize(logits_b.rows());
    for (std::size_t i = 0; i < logits_b.rows(); ++i) {
        out.predictions[i] = static_cast<int>(result.targets.predicted[i]);
    }

    const bool tta_active = spec.tta != TtaObjective::FilteredEntropy || result.targets.retained > 0;
    const bool gap_active = spec.gap && spec.gap->weight != 0.0;
    if (!tta_active && !gap_active) return out;

    for (std::size_t p = 0; p < selector_.size(); ++p) {
        auto param = parameter(model_, selector_.refs()[p]);
        const Vector& g = result.grads[p];
        Vector& v = velocity_[p];
        for (std::size_t i = 0; i < param.size(); ++i) {
            v[i] = cfg_.momentum * v[i] + g[i];
            param[i] -= cfg_.lr * v[i];
        }
        require(all_finite(param), ErrorKind::NonFinite,
                "adapt: non-finite BN parameter after update at batch " + std::to_string(batch.index));
    }
    out.updated = true;
    return out;
}

std::pair<std::vector<int>, MetricsRecord> StreamAdapter::step(const StreamBatch& batch, std::size_t t) {
    StepResult r = adapt(batch.unlabeled(), t);
    MetricsRecord rec;
    rec.batch_index = t;
    rec.batch_size = batch.size();
    rec.class_counts.assign(model_.classes(), 0);
    const auto labels = batch.hidden_labels();
    for (std::size_t i = 0; i < r.predictions.size(); ++i) {
        ++rec.class_counts[static_cast<std::size_t>(r.predictions[i])];
        if (r.predictions[i] == labels[i]) ++rec.correct;
    }
    rec.accuracy = static_cast<double>(rec.correct) / static_cast<double>(rec.batch_size);
    rec.tta_loss = r.loss.tta;
    rec.gap_loss = r.loss.gap;
    rec.beta_t = r.beta_t;
    rec.updated = r.updated;
    return {std::move(r.predictions), std::move(rec)};
}

RunResult run_stream(ModelState& model, std::span<const StreamBatch> stream, const AdaptConfig& cfg,
                     const PrototypeGradCache* cache) {
    RunResult out;
    if (stream.empty()) return out;
    StreamAdapter adapter(model, cfg, cache);
    for (std::size_t t = 0; t < stream.size(); ++t) {
        auto [predictions, record] = adapter.step(stream[t], t);
        out.summary.samples += record.batch_size;
        out.summary.correct += record.correct;
        out.records.push_back(std::move(record));
    }
    out.summary.batches = out.records.size();
    out.summary.empty = false;
    out.summary.accuracy =
        static_cast<double>(out.summary.correct) / static_cast<double>(out.summary.samples);
    return out;
}

}  // namespace gaptta
