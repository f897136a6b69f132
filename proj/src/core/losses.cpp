#include <gaptta/losses.hpp>

#include <gaptta/error.hpp>

#include <cmath>
#include <string>

namespace gaptta {

std::string_view to_string(LossChoice choice) noexcept {
    return choice == LossChoice::Entropy ? "em" : "ce";
}

std::string_view to_string(LabelMode mode) noexcept {
    return mode == LabelMode::Hard ? "hard" : "soft";
}

LossChoice parse_loss_choice(std::string_view text) {
    if (text == "em") return LossChoice::Entropy;
    if (text == "ce") return LossChoice::CrossEntropy;
    fail(ErrorKind::Config, "unknown loss choice '" + std::string(text) + "' (expected em|ce)");
}

LabelMode parse_label_mode(std::string_view text) {
    if (text == "hard") return LabelMode::Hard;
    if (text == "soft") return LabelMode::Soft;
    fail(ErrorKind::Config, "unknown weighting mode '" + std::string(text) + "' (expected hard|soft)");
}

PseudoLabel PseudoLabel::one_hot(std::size_t classes, std::size_t k) {
    require(k < classes, ErrorKind::InvalidArgument, "one_hot: class index out of range");
    PseudoLabel h{LabelMode::Hard, Vector(classes, 0.0)};
    h.dist[k] = 1.0;
    return h;
}

void PseudoLabel::validate() const {
    require(!dist.empty(), ErrorKind::InvalidArgument, "pseudo-label: empty distribution");
    double total = 0.0;
    std::size_t ones = 0;
    for (double v : dist) {
        require(std::isfinite(v) && v >= 0.0, ErrorKind::InvalidArgument,
                "pseudo-label: entries must be finite and non-negative");
        total += v;
        if (v == 1.0) ++ones;
    }
    require(std::abs(total - 1.0) <= 1e-9, ErrorKind::InvalidArgument,
            "pseudo-label: entries sum to " + std::to_string(total));
    if (mode == LabelMode::Hard) {
        require(ones == 1, ErrorKind::InvalidArgument, "pseudo-label: hard label must be one-hot");
    }
}

namespace {

void check_index(std::span<const double> logits, std::size_t k) {
    require(k < logits.size(), ErrorKind::InvalidArgument,
            "class index " + std::to_string(k) + " out of range for " +
                std::to_string(logits.size()) + " classes");
}

struct Predictive {
    Vector p;
    Vector log_p;
    double entropy = 0.0;
};

Predictive predictive(std::span<const double> logits) {
    Predictive out;
    out.log_p = log_softmax(logits);
    out.p.resize(out.log_p.size());
    for (std::size_t j = 0; j < out.p.size(); ++j) {
        out.p[j] = std::exp(out.log_p[j]);
        out.entropy -= out.p[j] * out.log_p[j];
    }
    return out;
}

Vector scaled(std::span<const double> z, double s) {
    require(all_finite(z), ErrorKind::NonFinite, "weight gradient: non-finite feature");
    Vector out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] * s;
    return out;
}

}  // namespace

double em_loss(std::span<const double> logits) { return predictive(logits).entropy; }

double ce_loss(std::span<const double> logits, const PseudoLabel& h) {
    h.validate();
    require(h.dist.size() == logits.size(), ErrorKind::Shape, "ce_loss: label length mismatch");
    const Vector log_p = log_softmax(logits);
    double loss = 0.0;
    for (std::size_t j = 0; j < log_p.size(); ++j) {
        if (h.dist[j] > 0.0) loss -= h.dist[j] * log_p[j];
    }
    return loss;
}

Vector em_loss_logit_grad(std::span<const double> logits) {
    const Predictive pr = predictive(logits);
    Vector g(pr.p.size());
    for (std::size_t j = 0; j < g.size(); ++j) g[j] = -pr.p[j] * (pr.log_p[j] + pr.entropy);
    return g;
}

Vector ce_loss_logit_grad(std::span<const double> logits, std::span<const double> h) {
    require(h.size() == logits.size(), ErrorKind::Shape, "ce_loss_logit_grad: label length mismatch");
    Vector g = softmax(logits);
    for (std::size_t j = 0; j < g.size(); ++j) g[j] -= h[j];
    return g;
}

double em_weight_factor(std::span<const double> logits, std::size_t k) {
    check_index(logits, k);
    const Predictive pr = predictive(logits);
    return -pr.p[k] * (pr.log_p[k] + pr.entropy);
}

double ce_weight_factor(std::span<const double> logits, std::span<const double> h, std::size_t k) {
    check_index(logits, k);
    require(h.size() == logits.size(), ErrorKind::Shape, "ce_weight_factor: label length mismatch");
    return softmax(logits)[k] - h[k];
}

Vector em_weight_factor_logit_grad(std::span<const double> logits, std::size_t k) {
    check_index(logits, k);
    const Predictive pr = predictive(logits);
    const double pk = pr.p[k];
    const double excess = pr.log_p[k] + pr.entropy;
    Vector g(pr.p.size());
    for (std::size_t j = 0; j < g.size(); ++j) {
        const double delta = j == k ? 1.0 : 0.0;
        const double d_entropy = -pr.p[j] * (pr.log_p[j] + pr.entropy);
        g[j] = -pk * (delta - pr.p[j]) * excess - pk * (delta - pr.p[j] + d_entropy);
    }
    return g;
}

Vector ce_weight_factor_logit_grad(std::span<const double> logits, std::size_t k) {
    check_index(logits, k);
    const Vector p = softmax(logits);
    Vector g(p.size());
    for (std::size_t j = 0; j < g.size(); ++j) g[j] = p[k] * ((j == k ? 1.0 : 0.0) - p[j]);
    return g;
}

Vector em_weight_grad(std::span<const double> z, std::span<const double> logits, std::size_t k) {
    return scaled(z, em_weight_factor(logits, k));
}

Vector ce_weight_grad(std::span<const double> z, std::span<const double> logits,
                      const PseudoLabel& h, std::size_t k) {
    h.validate();
    return scaled(z, ce_weight_factor(logits, h.dist, k));
}

}  // namespace gaptta
