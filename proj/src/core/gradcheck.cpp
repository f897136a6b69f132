#include <gaptta/harness.hpp>

#include <gaptta/error.hpp>
#include <gaptta/gap.hpp>
#include <gaptta/gradient.hpp>
#include <gaptta/losses.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

namespace gaptta {

namespace {

constexpr double kStep = 1e-6;  // engine oracle step

Vector random_vector(SeededRng& rng, std::size_t n, double scale) {
    Vector v(n);
    for (double& x : v) x = scale * rng.normal();
    return v;
}

Classifier random_classifier(SeededRng& rng, std::size_t c, std::size_t d) {
    Classifier clf{Matrix(c, d), random_vector(rng, c, 0.5)};
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& w : clf.weight.values()) w = scale * rng.normal();
    return clf;
}

// Oracle for the classifier-row gradients: the EM / CE losses recomputed
// from scratch in extended precision, differentiated by Richardson-
// extrapolated central differences (4 D(h/2) - D(h)) / 3. The closed forms
// pass through zero (log p_k = -H for EM, p_k = h_k for CE), and near there
// a double-precision stencil's rounding floor, not the closed form, would
// decide a relative comparison.
using Wide = long double;

struct WideLoss {
    const Classifier& clf;
    std::span<const double> input;
    LossChoice loss;
    std::span<const double> target;  // CE target, held fixed

    Wide operator()(std::size_t row, std::size_t col, Wide delta) const {
        const std::size_t c = clf.classes();
        std::vector<Wide> logits(c);
        for (std::size_t j = 0; j < c; ++j) {
            Wide acc = clf.bias[j];
            for (std::size_t i = 0; i < input.size(); ++i) {
                const Wide w = static_cast<Wide>(clf.weight(j, i)) + (j == row && i == col ? delta : 0.0L);
                acc += w * static_cast<Wide>(input[i]);
            }
            logits[j] = acc;
        }
        const Wide top = *std::max_element(logits.begin(), logits.end());
        Wide total = 0.0L;
        for (Wide& l : logits) total += std::exp(l - top);
        const Wide log_total = std::log(total);
        Wide value = 0.0L;
        for (std::size_t j = 0; j < c; ++j) {
            const Wide log_p = logits[j] - top - log_total;
            value -= (loss == LossChoice::Entropy ? std::exp(log_p) : static_cast<Wide>(target[j])) * log_p;
        }
        return value;
    }
};

Vector wide_row_fd(const WideLoss& f, std::size_t row) {
    constexpr Wide h = 1e-4L;
    auto central = [&](std::size_t i, Wide step) { return (f(row, i, step) - f(row, i, -step)) / (2.0L * step); };
    Vector out(f.clf.dim());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<double>((4.0L * central(i, h / 2) - central(i, h)) / 3.0L);
    }
    return out;
}

struct Accumulator {
    double worst = 0.0;
    std::size_t count = 0;

    void add(double e) {
        worst = std::max(worst, std::isnan(e) ? INFINITY : e);
        ++count;
    }
};

CheckResult finish(std::string name, const Accumulator& acc, double tol, double seconds, std::string unit) {
    CheckResult r;
    r.name = std::move(name);
    r.max_error = acc.worst;
    r.tolerance = tol;
    r.passed = acc.count > 0 && acc.worst <= tol;
    r.seconds = seconds;
    r.detail = std::to_string(acc.count) + " " + unit;
    return r;
}

template <typename F>
CheckResult timed(F&& body) {
    const auto start = std::chrono::steady_clock::now();
    CheckResult r = body();
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

CheckResult weight_grad_fd(LossChoice loss, std::uint64_t seed, bool inject_fault) {
    SeededRng rng(seed);
    Accumulator acc;
    const std::size_t classes[] = {2, 5, 10};
    const std::size_t dims[] = {2, 16};
    for (int n = 0; n < 100; ++n) {
        const std::size_t c = classes[n % 3];
        const std::size_t d = dims[(n / 3) % 2];
        const Classifier clf = random_classifier(rng, c, d);
        const Vector z = random_vector(rng, d, 1.0);
        const std::size_t k = rng.below(c);
        const Vector logits = classify(clf, z);
        Vector analytic;
        Vector fd;
        if (loss == LossChoice::Entropy) {
            analytic = em_weight_grad(z, logits, k);
            if (inject_fault) {
                for (double& g : analytic) g = -g;
            }
            fd = wide_row_fd(WideLoss{clf, z, LossChoice::Entropy, {}}, k);
        } else {
            PseudoLabel h = n % 2 == 0 ? PseudoLabel::one_hot(c, rng.below(c))
                                       : PseudoLabel{LabelMode::Soft, softmax(random_vector(rng, c, 1.0))};
            analytic = ce_weight_grad(z, logits, h, k);
            fd = wide_row_fd(WideLoss{clf, z, LossChoice::CrossEntropy, h.dist}, k);
        }
        acc.add(max_relative_error(analytic, fd));
    }
    return finish(loss == LossChoice::Entropy ? "losses.em_weight_grad.fd" : "losses.ce_weight_grad.fd", acc, 1e-6,
                  0.0, "instances");
}

CheckResult factorization(std::uint64_t seed) {
    SeededRng rng(seed);
    Accumulator acc;
    for (int n = 0; n < 1000; ++n) {
        const std::size_t c = 2 + rng.below(9);
        const std::size_t d = 1 + rng.below(16);
        const Classifier clf = random_classifier(rng, c, d);
        const Vector z = random_vector(rng, d, 1.0);
        const std::size_t k = rng.below(c);
        const Vector logits = classify(clf, z);
        const PseudoLabel h = pseudo_label(logits, n % 2 == 0 ? LabelMode::Hard : LabelMode::Soft);
        for (const Vector& g : {em_weight_grad(z, logits, k), ce_weight_grad(z, logits, h, k)}) {
            if (norm(g) == 0.0) {
                acc.add(0.0);
                continue;
            }
            acc.add(1.0 - std::abs(cosine_similarity(g, z)));
        }
    }
    return finish("losses.factorization", acc, 1e-10, 0.0, "gradients");
}

CheckResult cache_fd(std::uint64_t seed) {
    SeededRng rng(seed);
    Accumulator acc;
    for (int n = 0; n < 20; ++n) {
        const std::size_t c = 2 + rng.below(6);
        const std::size_t d = 2 + rng.below(6);
        const Classifier clf = random_classifier(rng, c, d);
        const LossChoice loss = n % 2 == 0 ? LossChoice::Entropy : LossChoice::CrossEntropy;
        const LabelMode mode = (n / 2) % 2 == 0 ? LabelMode::Hard : LabelMode::Soft;
        const PrototypeGradCache cache = build_prototype_cache(clf, loss, mode);
        for (std::size_t k = 0; k < c; ++k) {
            // The prototype is an input here: it stays at the unperturbed w_k.
            const Vector p(clf.weight.row(k).begin(), clf.weight.row(k).end());
            const PseudoLabel h = pseudo_label(classify(clf, p), LabelMode::Hard);
            const WideLoss f{clf, p, loss, h.dist};
            for (std::size_t m = 0; m < c; ++m) {
                if (mode == LabelMode::Hard && m != k) continue;
                acc.add(max_relative_error(cache.gradient(k, m), wide_row_fd(f, m)));
            }
        }
    }
    return finish("gap.cache.fd", acc, 1e-6, 0.0, "cached gradients");
}

CheckResult factorized_identity(std::uint64_t seed) {
    SeededRng rng(seed);
    Accumulator acc;
    std::size_t skipped = 0;
    for (int n = 0; n < 1000; ++n) {
        const std::size_t c = 2 + rng.below(9);
        const std::size_t d = 2 + rng.below(15);
        const Classifier clf = random_classifier(rng, c, d);
        const Vector z = random_vector(rng, d, 1.0);
        const Vector logits = classify(clf, z);
        GapConfig cfg;
        cfg.mode = n % 2 == 0 ? LabelMode::Hard : LabelMode::Soft;
        cfg.proto_loss = (n / 2) % 2 == 0 ? LossChoice::Entropy : LossChoice::CrossEntropy;
        cfg.data_loss = (n / 4) % 2 == 0 ? LossChoice::Entropy : LossChoice::CrossEntropy;
        const PrototypeGradCache cache = build_prototype_cache(clf, cfg.proto_loss, cfg.mode);

        const std::size_t m = argmax(logits);
        const PseudoLabel h = pseudo_label(logits, cfg.mode);
        const PseudoLabel hard = pseudo_label(logits, LabelMode::Hard);
        const Vector data_grad = cfg.data_loss == LossChoice::Entropy ? em_weight_grad(z, logits, m)
                                                                      : ce_weight_grad(z, logits, hard, m);
        const double s_data = cfg.data_loss == LossChoice::Entropy ? em_weight_factor(logits, m)
                                                                   : ce_weight_factor(logits, hard.dist, m);
        double direct = 0.0;
        double factored = 0.0;
        bool degenerate = norm(data_grad) <= 1e-8;
        for (std::size_t k = 0; k < c; ++k) {
            if (cfg.mode == LabelMode::Hard && k != m) continue;
            const Vector p(clf.weight.row(k).begin(), clf.weight.row(k).end());
            const Vector pl = classify(clf, p);
            const Vector proto = cfg.proto_loss == LossChoice::Entropy
                                     ? em_weight_grad(p, pl, m)
                                     : ce_weight_grad(p, pl, pseudo_label(pl, LabelMode::Hard), m);
            const double s_proto = cfg.proto_loss == LossChoice::Entropy
                                       ? em_weight_factor(pl, m)
                                       : ce_weight_factor(pl, pseudo_label(pl, LabelMode::Hard).dist, m);
            if (h.dist[k] > 0.0 && norm(proto) <= 1e-8) degenerate = true;
            direct -= h.dist[k] * cosine_similarity(proto, data_grad);
            const double sign = (s_data > 0 ? 1.0 : -1.0) * (s_proto > 0 ? 1.0 : -1.0);
            factored -= h.dist[k] * sign * cosine_similarity(z, p);
        }
        if (degenerate) {
            ++skipped;
            continue;
        }
        acc.add(std::abs(direct - factored));
        acc.add(std::abs(gap_loss(clf, z, logits, cache, cfg) - factored));
    }
    CheckResult r = finish("gap.factorized_identity", acc, 1e-9, 0.0, "comparisons");
    r.detail += ", " + std::to_string(skipped) + " degenerate skipped";
    return r;
}

CheckResult gradient_equivalence(std::uint64_t seed) {
    SeededRng rng(seed);
    Accumulator acc;
    for (int n = 0; n < 500; ++n) {
        const std::size_t c = 2 + rng.below(9);
        const std::size_t d = 2 + rng.below(15);
        const Classifier clf = random_classifier(rng, c, d);
        const Vector z = random_vector(rng, d, 1.0);
        const Vector logits = classify(clf, z);
        const LabelMode mode = n % 2 == 0 ? LabelMode::Hard : LabelMode::Soft;
        const LossChoice data_loss = (n / 2) % 2 == 0 ? LossChoice::Entropy : LossChoice::CrossEntropy;
        const PrototypeGradCache cache = build_prototype_cache(clf, LossChoice::Entropy, mode);
        const std::size_t m = argmax(logits);
        const PseudoLabel h = pseudo_label(logits, mode);
        const double s_data = weight_factor(data_loss, logits, m);
        if (std::abs(s_data) <= 1e-6) continue;
        const GapSample g = gap_sample(clf, z, logits, cache, data_loss, h.dist, m, true);

        Vector expected(d, 0.0);
        for (std::size_t k = 0; k < c; ++k) {
            if (mode == LabelMode::Hard && k != m) continue;
            const double s_proto = cache.factor(k, m);
            if (s_proto == 0.0) continue;
            const double sign = (s_data > 0 ? 1.0 : -1.0) * (s_proto > 0 ? 1.0 : -1.0);
            const Vector gc = cosine_similarity_grad(clf.weight.row(k), z);
            for (std::size_t i = 0; i < d; ++i) expected[i] -= h.dist[k] * sign * gc[i];
        }
        double worst = 0.0;
        for (std::size_t i = 0; i < d; ++i) worst = std::max(worst, std::abs(g.dz[i] - expected[i]));
        acc.add(worst);
    }
    return finish("gap.gradient_equivalence", acc, 1e-8, 0.0, "instances");
}

// |d^2/dt^2 l(p_k; w - t G)| / |G|^2 at t = 0, G = grad_w l_EM(z; w).
double step_curvature(const Classifier& clf, std::span<const double> z, std::size_t k) {
    const Vector logits = classify(clf, z);
    const Vector p(clf.weight.row(k).begin(), clf.weight.row(k).end());
    Matrix g(clf.classes(), clf.dim());
    for (std::size_t j = 0; j < clf.classes(); ++j) {
        const Vector gj = em_weight_grad(z, logits, j);
        std::copy(gj.begin(), gj.end(), g.row(j).begin());
    }
    const double gg = dot(g.values(), g.values());
    if (gg == 0.0) return 0.0;
    auto loss_at = [&](double t) {
        Classifier moved = clf;
        auto w = moved.weight.values();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= t * g.values()[i];
        return em_loss(classify(moved, p));
    };
    const double t = 1e-3 / std::sqrt(gg);
    return std::abs(loss_at(t) - 2.0 * loss_at(0.0) + loss_at(-t)) / (t * t) / gg;
}

CheckResult taylor_convergence(std::uint64_t seed) {
    SeededRng rng(seed);
    double lo = INFINITY;
    double hi = 0.0;
    int n = 0;
    int skipped = 0;
    const double alphas[] = {1e-2, 1e-3, 1e-4};
    while (n < 10) {
        const std::size_t c = 3 + rng.below(6);
        const std::size_t d = 4 + rng.below(8);
        ModelState model;
        model.classifier = random_classifier(rng, c, d);
        const Vector z = random_vector(rng, d, 1.0);
        const std::size_t k = rng.below(c);
        // The remainder shrinks like alpha^2 only when the second directional
        // derivative along the step is not degenerate; that is a property of
        // the instance, measured here independently of the check itself.
        if (step_curvature(model.classifier, z, k) < 1e-2) {
            ++skipped;
            continue;
        }
        double prev = 0.0;
        for (std::size_t a = 0; a < 3; ++a) {
            const TaylorCheck t = taylor_alignment_check(model, z, k, alphas[a]);
            const double r = std::abs(t.actual - t.predicted) / alphas[a];
            if (a > 0) {
                const double ratio = r / prev;
                lo = std::min(lo, ratio);
                hi = std::max(hi, ratio);
            }
            prev = r;
        }
        ++n;
    }
    CheckResult res;
    res.name = "taylor.convergence";
    // Distance of the successive ratios from the accepted band [0.05, 0.2].
    res.max_error = std::max({0.0, 0.05 - lo, hi - 0.2});
    res.tolerance = 0.0;
    res.passed = res.max_error <= 0.0;
    char buf[128];
    std::snprintf(buf, sizeof buf, "10 instances, ratios in [%.4f, %.4f], %d flat skipped", lo, hi, skipped);
    res.detail = buf;
    return res;
}

constexpr double kKinkMargin = 1e-4;

// Smallest |BN output| feeding a ReLU, over the batch.
double kink_distance(const ModelState& model, const Matrix& inputs) {
    const ForwardTrace trace = trace_forward(model, inputs, NormMode::BatchStats);
    double closest = INFINITY;
    for (std::size_t b = 0; b < trace.blocks.size(); ++b) {
        const auto& x_hat = trace.blocks[b].normalized;
        const auto& bn = model.extractor.blocks[b].norm;
        for (std::size_t i = 0; i < x_hat.rows(); ++i) {
            for (std::size_t j = 0; j < x_hat.cols(); ++j) {
                closest = std::min(closest, std::abs(bn.scale[j] * x_hat(i, j) + bn.shift[j]));
            }
        }
    }
    return closest;
}

struct EngineCase {
    const char* name;
    TtaObjective tta;
    bool gap;
    LabelMode mode;
    LossChoice proto;
    LossChoice data;
};

CheckResult engine_fd(const EngineCase& ec, std::uint64_t seed) {
    SeededRng rng(seed);
    Accumulator acc;
    for (int n = 0; n < 20; ++n) {
        Architecture arch{6, {5, 4}, 3, 4, 1e-5, 0.1};
        ModelState model = make_model(arch, rng.next());
        for (auto& block : model.extractor.blocks) {
            for (double& s : block.norm.scale) s = 1.0 + 0.3 * rng.normal();
            for (double& b : block.norm.shift) b = 0.2 * rng.normal();
        }
        model.norm_mode = NormMode::BatchStats;
        // Central differences are only an oracle where the loss is smooth: the
        // batch is redrawn while a ReLU input sits within reach of its kink.
        Matrix inputs(8, arch.input_dim);
        do {
            for (double& x : inputs.values()) x = rng.normal();
        } while (kink_distance(model, inputs) < kKinkMargin);

        LossSpec spec;
        spec.tta = ec.tta;
        spec.eata_margin = 0.95 * std::log(static_cast<double>(arch.classes));
        std::optional<PrototypeGradCache> cache;
        if (ec.gap) {
            cache = build_prototype_cache(model.classifier, ec.proto, ec.mode);
            spec.gap = GapObjective{&*cache, 1.5, ec.data};
        }
        const ParamSelector sel = ParamSelector::all_batch_norm(model);
        const AdaptableGradient ag = compute_adaptable(model, inputs, spec, sel);
        const Vector p0 = gather_parameters(model, sel);
        const Vector fd = finite_diff_oracle(
            [&](std::span<const double> p) {
                ModelState moved = model;
                scatter_parameters(moved, sel, p);
                return batch_loss(moved, inputs, spec, ag.targets);
            },
            p0, kStep);
        acc.add(max_relative_error(flatten(ag.grads), fd));
    }
    return finish(std::string("engine.") + ec.name + ".fd", acc, 1e-5, 0.0, "random models");
}

}  // namespace

bool GradcheckReport::passed() const {
    return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

const CheckResult& GradcheckReport::find(std::string_view name) const {
    for (const auto& c : checks) {
        if (c.name == name) return c;
    }
    fail(ErrorKind::InvalidArgument, "gradcheck: no check named '" + std::string(name) + "'");
}

GradcheckReport run_gradcheck(const GradcheckOptions& options) {
    GradcheckReport report;
    const std::uint64_t s = options.seed;
    auto add = [&](auto&& body) { report.checks.push_back(timed(body)); };

    add([&] { return weight_grad_fd(LossChoice::Entropy, mix_seed(s, 1), options.inject_fault); });
    add([&] { return weight_grad_fd(LossChoice::CrossEntropy, mix_seed(s, 2), false); });
    add([&] { return factorization(mix_seed(s, 3)); });

    const EngineCase cases[] = {
        {"em", TtaObjective::Entropy, false, LabelMode::Hard, LossChoice::Entropy, LossChoice::Entropy},
        {"ce", TtaObjective::PseudoLabelCe, false, LabelMode::Hard, LossChoice::Entropy, LossChoice::Entropy},
        {"eata", TtaObjective::FilteredEntropy, false, LabelMode::Hard, LossChoice::Entropy, LossChoice::Entropy},
        {"gap_hard", TtaObjective::None, true, LabelMode::Hard, LossChoice::Entropy, LossChoice::Entropy},
        {"gap_soft", TtaObjective::None, true, LabelMode::Soft, LossChoice::Entropy, LossChoice::Entropy},
        {"tent_gap", TtaObjective::Entropy, true, LabelMode::Hard, LossChoice::Entropy, LossChoice::Entropy},
        {"pl_gap", TtaObjective::PseudoLabelCe, true, LabelMode::Hard, LossChoice::CrossEntropy,
         LossChoice::CrossEntropy},
        {"eata_gap_soft", TtaObjective::FilteredEntropy, true, LabelMode::Soft, LossChoice::CrossEntropy,
         LossChoice::Entropy},
    };
    std::uint64_t salt = 10;
    for (const auto& ec : cases) add([&] { return engine_fd(ec, mix_seed(s, salt++)); });

    add([&] { return cache_fd(mix_seed(s, 4)); });
    add([&] { return factorized_identity(mix_seed(s, 5)); });
    add([&] { return gradient_equivalence(mix_seed(s, 6)); });
    add([&] { return taylor_convergence(mix_seed(s, 7)); });
    return report;
}

CommandResult cmd_gradcheck(const GradcheckOptions& options, const LineSink& log) {
    const GradcheckReport report = run_gradcheck(options);
    std::size_t width = 0;
    for (const auto& c : report.checks) width = std::max(width, c.name.size());
    for (const auto& c : report.checks) {
        char buf[512];
        std::snprintf(buf, sizeof buf, "%-*s  %s  max_err=%.3e  tol=%.1e  %.3fs  (%s)", static_cast<int>(width),
                      c.name.c_str(), c.passed ? "PASS" : "FAIL", c.max_error, c.tolerance, c.seconds,
                      c.detail.c_str());
        log(buf);
    }
    const bool ok = report.passed();
    log(ok ? "gradcheck: all checks within tolerance" : "gradcheck: tolerance breach");
    return CommandResult{ok ? 0 : 3, {}};
}

}  // namespace gaptta
