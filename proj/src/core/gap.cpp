#include <gaptta/gap.hpp>

#include <gaptta/error.hpp>

#include <cmath>
#include <cstring>
#include <string>

namespace gaptta {

double weight_factor(LossChoice loss, std::span<const double> logits, std::size_t k) {
    if (loss == LossChoice::Entropy) return em_weight_factor(logits, k);
    const PseudoLabel h = pseudo_label(logits, LabelMode::Hard);
    return ce_weight_factor(logits, h.dist, k);
}

namespace {

Vector weight_factor_logit_grad(LossChoice loss, std::span<const double> logits, std::size_t k) {
    return loss == LossChoice::Entropy ? em_weight_factor_logit_grad(logits, k)
                                       : ce_weight_factor_logit_grad(logits, k);
}

bool is_zero_row(std::span<const double> row) {
    for (double v : row) {
        if (v != 0.0) return false;
    }
    return true;
}

}  // namespace

PrototypeGradCache build_prototype_cache(const Classifier& classifier, LossChoice proto_loss,
                                         LabelMode mode) {
    const std::size_t c = classifier.classes();
    const std::size_t d = classifier.dim();
    require(c >= 2 && d > 0 && classifier.bias.size() == c, ErrorKind::Shape,
            "prototype cache: malformed classifier");
    require(all_finite(classifier.weight.values()) && all_finite(classifier.bias),
            ErrorKind::NonFinite, "prototype cache: classifier is not finite");

    PrototypeGradCache cache;
    cache.loss_ = proto_loss;
    cache.mode_ = mode;
    cache.rows_ = classifier.weight;
    cache.bias_ = classifier.bias;
    cache.factors_ = Matrix(c, c, 0.0);
    cache.inert_.assign(c, 0);
    if (mode == LabelMode::Hard) cache.diagonal_ = Matrix(c, d, 0.0);

    for (std::size_t k = 0; k < c; ++k) {
        const auto prototype = classifier.weight.row(k);
        const bool inert = is_zero_row(prototype);
        cache.inert_[k] = inert ? 1 : 0;
        const Vector logits = classify(classifier, prototype);
        if (mode == LabelMode::Hard) {
            const double s = inert ? 0.0 : weight_factor(proto_loss, logits, k);
            cache.factors_(k, k) = s;
            auto out = cache.diagonal_.row(k);
            for (std::size_t i = 0; i < d; ++i) out[i] = prototype[i] * s;
        } else {
            for (std::size_t m = 0; m < c; ++m) {
                cache.factors_(k, m) = inert ? 0.0 : weight_factor(proto_loss, logits, m);
            }
        }
    }
    require(all_finite(cache.factors_.values()) && all_finite(cache.diagonal_.values()),
            ErrorKind::NonFinite, "prototype cache: non-finite gradient");
    return cache;
}

double PrototypeGradCache::factor(std::size_t k, std::size_t m) const {
    require(k < classes() && m < classes(), ErrorKind::InvalidArgument,
            "prototype cache: class index out of range");
    require(mode_ == LabelMode::Soft || k == m, ErrorKind::InvalidArgument,
            "prototype cache: hard cache only holds grad_{w_k} l(w_k; w)");
    return factors_(k, m);
}

Vector PrototypeGradCache::gradient(std::size_t k, std::size_t m) const {
    const double s = factor(k, m);
    if (mode_ == LabelMode::Hard) {
        const auto row = diagonal_.row(k);
        return Vector(row.begin(), row.end());
    }
    const auto row = rows_.row(k);
    Vector g(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) g[i] = row[i] * s;
    return g;
}

bool PrototypeGradCache::matches(const Classifier& classifier) const {
    if (classifier.weight.rows() != rows_.rows() || classifier.weight.cols() != rows_.cols() ||
        classifier.bias.size() != bias_.size()) {
        return false;
    }
    const auto w = classifier.weight.values();
    const auto r = rows_.values();
    return std::memcmp(w.data(), r.data(), w.size_bytes()) == 0 &&
           std::memcmp(classifier.bias.data(), bias_.data(), bias_.size() * sizeof(double)) == 0;
}

void GapConfig::validate() const {
    require(std::isfinite(beta) && beta >= 0.0, ErrorKind::Config, "gap: beta must be >= 0");
    require(std::isfinite(gamma) && gamma > 0.0, ErrorKind::Config, "gap: gamma must be > 0");
}

PseudoLabel pseudo_label(std::span<const double> logits, LabelMode mode) {
    if (mode == LabelMode::Soft) return PseudoLabel{LabelMode::Soft, softmax(logits)};
    require(all_finite(logits), ErrorKind::NonFinite, "pseudo_label: non-finite logits");
    return PseudoLabel::one_hot(logits.size(), argmax(logits));
}

double decay_weight(const GapConfig& cfg, std::size_t t) {
    return cfg.beta * std::exp(-static_cast<double>(t) / cfg.gamma);
}

GapSample gap_sample(const Classifier& classifier, std::span<const double> z,
                     std::span<const double> logits, const PrototypeGradCache& cache,
                     LossChoice data_loss, std::span<const double> h, std::size_t m,
                     bool with_gradient) {
    const std::size_t c = classifier.classes();
    require(z.size() == classifier.dim() && logits.size() == c && h.size() == c,
            ErrorKind::Shape, "gap: input shapes do not match the classifier");
    require(cache.classes() == c && cache.dim() == classifier.dim(), ErrorKind::Shape,
            "gap: cache shape does not match the classifier");
    require(m < c, ErrorKind::InvalidArgument, "gap: row index out of range");

    const double s_data = weight_factor(data_loss, logits, m);
    Vector data_grad(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) data_grad[i] = z[i] * s_data;

    GapSample out;
    Vector dcos_dv;  // d value / d data_grad
    if (with_gradient) dcos_dv.assign(z.size(), 0.0);

    auto accumulate = [&](std::size_t k, double weight) {
        if (weight == 0.0) return;
        const Vector proto = cache.gradient(k, m);
        out.value -= weight * cosine_similarity(proto, data_grad);
        if (with_gradient) {
            const Vector g = cosine_similarity_grad(proto, data_grad);
            for (std::size_t i = 0; i < g.size(); ++i) dcos_dv[i] -= weight * g[i];
        }
    };
    if (cache.mode() == LabelMode::Hard) {
        accumulate(m, h[m]);
    } else {
        for (std::size_t k = 0; k < c; ++k) accumulate(k, h[k]);
    }

    if (with_gradient) {
        // data_grad = z * s(z): d/dz = s * dcos_dv + (dcos_dv . z) * W^T ds/dlogits
        out.dz.assign(z.size(), 0.0);
        for (std::size_t i = 0; i < z.size(); ++i) out.dz[i] = s_data * dcos_dv[i];
        const double along = dot(dcos_dv, z);
        if (along != 0.0) {
            const Vector ds = weight_factor_logit_grad(data_loss, logits, m);
            for (std::size_t j = 0; j < c; ++j) {
                const auto w = classifier.weight.row(j);
                for (std::size_t i = 0; i < z.size(); ++i) out.dz[i] += along * ds[j] * w[i];
            }
        }
    }
    return out;
}

namespace {

void check_cache_config(const PrototypeGradCache& cache, const GapConfig& cfg) {
    require(cache.mode() == cfg.mode && cache.loss() == cfg.proto_loss, ErrorKind::Config,
            "gap: cache was built for a different weighting mode or prototype loss");
}

}  // namespace

double gap_loss(const Classifier& classifier, std::span<const double> z,
                std::span<const double> logits, const PrototypeGradCache& cache,
                const GapConfig& cfg) {
    check_cache_config(cache, cfg);
    const PseudoLabel h = pseudo_label(logits, cfg.mode);
    const std::size_t m = argmax(logits);
    return gap_sample(classifier, z, logits, cache, cfg.data_loss, h.dist, m, false).value;
}

double gap_loss(const Classifier& classifier, const Matrix& z, const Matrix& logits,
                const PrototypeGradCache& cache, const GapConfig& cfg) {
    require(z.rows() == logits.rows() && z.rows() > 0, ErrorKind::Shape, "gap: batch shape mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < z.rows(); ++i) {
        total += gap_loss(classifier, z.row(i), logits.row(i), cache, cfg);
    }
    return total / static_cast<double>(z.rows());
}

TaylorCheck taylor_alignment_check(const ModelState& model, std::span<const double> z,
                                   std::size_t k, double alpha, LossChoice loss) {
    const Classifier& clf = model.classifier;
    const std::size_t c = clf.classes();
    require(k < c, ErrorKind::InvalidArgument, "taylor check: class index out of range");
    require(alpha >= 0.0, ErrorKind::InvalidArgument, "taylor check: alpha must be >= 0");
    require(z.size() == clf.dim(), ErrorKind::Shape, "taylor check: feature dim mismatch");

    const auto prototype = clf.weight.row(k);
    const Vector z_logits = classify(clf, z);
    const Vector p_logits = classify(clf, prototype);

    // Pseudo-labels (CE) are read once at the current weights and held fixed.
    const PseudoLabel h_proto = pseudo_label(p_logits, LabelMode::Hard);
    auto prototype_loss = [&](const Classifier& w) {
        const Vector logits = classify(w, prototype);
        return loss == LossChoice::Entropy ? em_loss(logits) : ce_loss(logits, h_proto);
    };

    Classifier stepped = clf;
    double predicted = 0.0;
    const double overlap = dot(prototype, z);
    for (std::size_t j = 0; j < c; ++j) {
        const double s_z = weight_factor(loss, z_logits, j);
        const double s_p = weight_factor(loss, p_logits, j);
        predicted += s_p * s_z * overlap;
        auto row = stepped.weight.row(j);
        for (std::size_t i = 0; i < row.size(); ++i) row[i] -= alpha * z[i] * s_z;
    }

    TaylorCheck out;
    out.actual = prototype_loss(clf) - prototype_loss(stepped);
    out.predicted = alpha * predicted;
    require(std::isfinite(out.actual) && std::isfinite(out.predicted), ErrorKind::NonFinite,
            "taylor check: non-finite loss after step");
    return out;
}

}  // namespace gaptta
