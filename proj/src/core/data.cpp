#include <gaptta/data.hpp>

#include <gaptta/container.hpp>
#include <gaptta/error.hpp>
#include <gaptta/gradient.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

namespace gaptta {

void DatasetSpec::validate() const {
    require(classes >= 2, ErrorKind::InvalidArgument, "dataset: need at least two classes");
    require(input_dim > 0, ErrorKind::InvalidArgument, "dataset: input dim must be positive");
    require(train_count > 0 && test_count > 0, ErrorKind::InvalidArgument, "dataset: counts must be positive");
    require(std::isfinite(spread) && spread > 0.0, ErrorKind::InvalidArgument,
            "dataset: degenerate covariance (spread must be > 0)");
    require(std::isfinite(scale_ratio) && scale_ratio >= 1.0, ErrorKind::InvalidArgument,
            "dataset: scale ratio must be >= 1");
    require(latent_dim <= input_dim, ErrorKind::InvalidArgument,
            "dataset: latent dim cannot exceed input dim");
    if (means) {
        require(means->rows() == classes && means->cols() == latent(), ErrorKind::Shape,
                "dataset: explicit means must be classes x latent dim");
    } else {
        require(std::isfinite(mean_scale) && mean_scale > 0.0, ErrorKind::InvalidArgument,
                "dataset: mean scale must be > 0");
    }
}

namespace {

/// rows x cols matrix with orthonormal columns (Gram-Schmidt on columns).
Matrix random_orthonormal(std::size_t rows, std::size_t cols, SeededRng& rng) {
    Matrix basis(cols, rows);  // built as rows, returned transposed
    for (double& v : basis.values()) v = rng.normal();
    for (std::size_t i = 0; i < cols; ++i) {
        auto row = basis.row(i);
        for (std::size_t j = 0; j < i; ++j) {
            const auto prev = basis.row(j);
            const double proj = dot(row, prev);
            for (std::size_t k = 0; k < rows; ++k) row[k] -= proj * prev[k];
        }
        const double len = norm(row);
        for (double& v : row) v /= len;
    }
    Matrix out(rows, cols);
    for (std::size_t i = 0; i < cols; ++i) {
        for (std::size_t k = 0; k < rows; ++k) out(k, i) = basis(i, k);
    }
    return out;
}

Dataset sample_split(const DatasetSpec& spec, const Matrix& means, const Matrix* lift,
                     std::size_t count, std::uint64_t seed) {
    SeededRng rng(seed);
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));

    Dataset out{Matrix(count, spec.input_dim), std::vector<int>(count)};
    Vector raw(spec.latent());
    Vector axis(spec.latent(), 1.0);
    if (spec.latent() > 1) {
        for (std::size_t j = 0; j < axis.size(); ++j) {
            axis[j] = std::pow(spec.scale_ratio, -static_cast<double>(j) / static_cast<double>(axis.size() - 1));
        }
    }
    for (std::size_t n = 0; n < count; ++n) {
        const std::size_t label = order[n] % spec.classes;
        out.labels[n] = static_cast<int>(label);
        const auto mean = means.row(label);
        for (std::size_t j = 0; j < raw.size(); ++j) {
            raw[j] = axis[j] * (mean[j] + spec.spread * rng.normal());
        }
        auto row = out.inputs.row(n);
        if (lift != nullptr) {
            for (std::size_t j = 0; j < spec.input_dim; ++j) row[j] = dot(lift->row(j), raw);
        } else {
            std::copy(raw.begin(), raw.end(), row.begin());
        }
        if (spec.warp) {
            for (double& v : row) v = std::tanh(v);
        }
    }
    return out;
}

}  // namespace

DatasetSplit make_dataset(const DatasetSpec& spec) {
    spec.validate();
    DatasetSplit out;
    if (spec.means) {
        out.class_means = *spec.means;
    } else {
        SeededRng rng(mix_seed(spec.seed, 1));
        out.class_means = Matrix(spec.classes, spec.latent());
        for (double& v : out.class_means.values()) v = spec.mean_scale * rng.normal();
    }
    for (std::size_t a = 0; a < spec.classes; ++a) {
        for (std::size_t b = a + 1; b < spec.classes; ++b) {
            require(!std::equal(out.class_means.row(a).begin(), out.class_means.row(a).end(),
                                out.class_means.row(b).begin()),
                    ErrorKind::InvalidArgument, "dataset: class means must be pairwise distinct");
        }
    }
    // The warp also applies a fixed rotation so tanh mixes latent coordinates.
    std::optional<Matrix> lift;
    if (spec.latent() != spec.input_dim || spec.warp) {
        SeededRng rng(mix_seed(spec.seed, 2));
        lift = random_orthonormal(spec.input_dim, spec.latent(), rng);
    }
    const Matrix* map = lift ? &*lift : nullptr;
    out.train = sample_split(spec, out.class_means, map, spec.train_count, mix_seed(spec.seed, 3));
    out.test = sample_split(spec, out.class_means, map, spec.test_count, mix_seed(spec.seed, 4));
    return out;
}

std::string_view to_string(CorruptionKind kind) noexcept {
    switch (kind) {
        case CorruptionKind::GaussianNoise: return "gaussian-noise";
        case CorruptionKind::ImpulseNoise: return "impulse-noise";
        case CorruptionKind::FeatureDropout: return "feature-dropout";
        case CorruptionKind::ContrastScale: return "contrast-scale";
        case CorruptionKind::SmoothingBlur: return "smoothing-blur";
    }
    return "unknown";
}

std::span<const CorruptionKind> all_corruption_kinds() noexcept {
    static constexpr std::array kinds = {CorruptionKind::GaussianNoise, CorruptionKind::ImpulseNoise,
                                         CorruptionKind::FeatureDropout, CorruptionKind::ContrastScale,
                                         CorruptionKind::SmoothingBlur};
    return kinds;
}

CorruptionKind parse_corruption_kind(std::string_view text) {
    for (CorruptionKind k : all_corruption_kinds()) {
        if (to_string(k) == text) return k;
    }
    fail(ErrorKind::InvalidArgument, "unknown corruption kind '" + std::string(text) + "'");
}

double severity_parameter(CorruptionKind kind, int severity) {
    require(severity >= 1 && severity <= 5, ErrorKind::InvalidArgument,
            "corruption severity must lie in 1..5 (got " + std::to_string(severity) + ")");
    static constexpr double noise[] = {0.2, 0.4, 0.6, 0.8, 1.0};
    static constexpr double impulse[] = {0.02, 0.04, 0.08, 0.12, 0.16};
    static constexpr double dropout[] = {0.05, 0.10, 0.20, 0.30, 0.40};
    static constexpr double contrast[] = {0.8, 0.6, 0.5, 0.4, 0.3};
    static constexpr double window[] = {2, 3, 4, 5, 6};
    const auto i = static_cast<std::size_t>(severity - 1);
    switch (kind) {
        case CorruptionKind::GaussianNoise: return noise[i];
        case CorruptionKind::ImpulseNoise: return impulse[i];
        case CorruptionKind::FeatureDropout: return dropout[i];
        case CorruptionKind::ContrastScale: return contrast[i];
        case CorruptionKind::SmoothingBlur: return window[i];
    }
    fail(ErrorKind::InvalidArgument, "unknown corruption kind");
}

namespace {

struct GlobalMoments {
    double mean = 0.0;
    double std = 0.0;
    double min = 0.0;
    double max = 0.0;
};

GlobalMoments global_moments(const Matrix& x) {
    GlobalMoments g;
    const auto v = x.values();
    if (v.empty()) return g;
    g.min = *std::min_element(v.begin(), v.end());
    g.max = *std::max_element(v.begin(), v.end());
    for (double a : v) g.mean += a;
    g.mean /= static_cast<double>(v.size());
    for (double a : v) g.std += (a - g.mean) * (a - g.mean);
    g.std = std::sqrt(g.std / static_cast<double>(v.size()));
    return g;
}

}  // namespace

Matrix corrupt(const Matrix& inputs, const CorruptionSpec& spec) {
    const double param = severity_parameter(spec.kind, spec.severity);
    SeededRng rng(mix_seed(spec.seed, 100 + static_cast<std::uint64_t>(spec.kind)));
    const GlobalMoments g = global_moments(inputs);
    Matrix out = inputs;
    auto values = out.values();
    switch (spec.kind) {
        case CorruptionKind::GaussianNoise: {
            const double sigma = param * g.std;
            for (double& v : values) v += sigma * rng.normal();
            break;
        }
        case CorruptionKind::ImpulseNoise:
            for (double& v : values) {
                if (rng.uniform() < param) v = rng.uniform() < 0.5 ? g.min : g.max;
            }
            break;
        case CorruptionKind::FeatureDropout:
            for (double& v : values) {
                if (rng.uniform() < param) v = 0.0;
            }
            break;
        case CorruptionKind::ContrastScale:
            for (double& v : values) v = g.mean + param * (v - g.mean);
            break;
        case CorruptionKind::SmoothingBlur: {
            const auto window = static_cast<std::size_t>(param);
            for (std::size_t i = 0; i < inputs.rows(); ++i) {
                const auto src = inputs.row(i);
                auto dst = out.row(i);
                for (std::size_t j = 0; j < src.size(); ++j) {
                    const std::size_t end = std::min(src.size(), j + window);
                    double acc = 0.0;
                    for (std::size_t k = j; k < end; ++k) acc += src[k];
                    dst[j] = acc / static_cast<double>(end - j);
                }
            }
            break;
        }
    }
    return out;
}

std::vector<StreamBatch> make_stream(const Dataset& test, const std::optional<CorruptionSpec>& corruption,
                                     std::size_t batch_size, std::uint64_t seed) {
    require(batch_size >= 2, ErrorKind::InvalidArgument, "stream: batch size must be at least 2");
    const Matrix inputs = corruption ? corrupt(test.inputs, *corruption) : test.inputs;
    std::vector<std::size_t> order(test.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    SeededRng rng(mix_seed(seed, 200));
    rng.shuffle(std::span<std::size_t>(order));

    std::vector<StreamBatch> stream;
    for (std::size_t start = 0; start + 2 <= order.size(); start += batch_size) {
        const std::size_t n = std::min(batch_size, order.size() - start);
        if (n < 2) break;
        Matrix x(n, inputs.cols());
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto src = inputs.row(order[start + i]);
            std::copy(src.begin(), src.end(), x.row(i).begin());
            y[i] = test.labels[order[start + i]];
        }
        stream.emplace_back(std::move(x), std::move(y), stream.size());
    }
    return stream;
}

double evaluate_accuracy(const ModelState& model, const Matrix& inputs, std::span<const int> labels,
                         NormMode mode) {
    require(inputs.rows() == labels.size() && !labels.empty(), ErrorKind::Shape,
            "evaluate: label count mismatch");
    const Matrix logits = classify(model.classifier, forward_features(model, inputs, mode));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        if (static_cast<int>(argmax(logits.row(i))) == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

namespace {

std::vector<std::span<double>> trainable(ModelState& m) {
    std::vector<std::span<double>> out;
    for (auto& b : m.extractor.blocks) {
        out.emplace_back(b.affine.weight.values());
        out.emplace_back(b.affine.bias);
        out.emplace_back(b.norm.scale);
        out.emplace_back(b.norm.shift);
    }
    out.emplace_back(m.extractor.head.weight.values());
    out.emplace_back(m.extractor.head.bias);
    out.emplace_back(m.classifier.weight.values());
    out.emplace_back(m.classifier.bias);
    return out;
}

std::vector<std::span<const double>> gradient_views(const FullGradients& g) {
    std::vector<std::span<const double>> out;
    for (std::size_t l = 0; l < g.affine_weight.size(); ++l) {
        out.emplace_back(g.affine_weight[l].values());
        out.emplace_back(g.affine_bias[l]);
        out.emplace_back(g.bn_scale[l]);
        out.emplace_back(g.bn_shift[l]);
    }
    out.emplace_back(g.head_weight.values());
    out.emplace_back(g.head_bias);
    out.emplace_back(g.classifier_weight.values());
    out.emplace_back(g.classifier_bias);
    return out;
}

}  // namespace

PretrainReport pretrain(ModelState& model, const Dataset& train, const Dataset& test,
                        const PretrainConfig& cfg) {
    require(cfg.epochs >= 1, ErrorKind::InvalidArgument, "pretrain: epochs must be >= 1");
    require(cfg.batch_size >= 2, ErrorKind::InvalidArgument, "pretrain: batch size must be >= 2");
    require(cfg.lr > 0.0 && cfg.momentum >= 0.0 && cfg.momentum < 1.0, ErrorKind::InvalidArgument,
            "pretrain: invalid optimizer settings");
    require(train.inputs.cols() == model.input_dim(), ErrorKind::Shape, "pretrain: input dim mismatch");
    model.validate();

    SeededRng rng(mix_seed(cfg.seed, 300));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::vector<Vector> velocity;
    for (auto p : trainable(model)) velocity.emplace_back(p.size(), 0.0);

    LossSpec spec;
    spec.tta = TtaObjective::Supervised;

    PretrainReport report;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        double loss_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start + 2 <= order.size(); start += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - start);
            Matrix x(n, train.inputs.cols());
            std::vector<int> y(n);
            for (std::size_t i = 0; i < n; ++i) {
                const auto src = train.inputs.row(order[start + i]);
                std::copy(src.begin(), src.end(), x.row(i).begin());
                y[i] = train.labels[order[start + i]];
            }
            const ForwardTrace trace = trace_forward(model, x, NormMode::BatchStats);
            const FrozenTargets targets = freeze_targets(model.classifier, trace.logits, spec, y);
            const LossEvaluation loss =
                evaluate_loss(model.classifier, trace.embeddings, trace.logits, spec, targets, true);
            require(std::isfinite(loss.value.total), ErrorKind::NonFinite,
                    "pretrain: loss diverged in epoch " + std::to_string(epoch + 1));
            loss_sum += loss.value.total * static_cast<double>(n);
            seen += n;

            const FullGradients grads = backward(model, trace, loss, true);
            const auto params = trainable(model);
            const auto gviews = gradient_views(grads);
            for (std::size_t p = 0; p < params.size(); ++p) {
                for (std::size_t i = 0; i < params[p].size(); ++i) {
                    velocity[p][i] = cfg.momentum * velocity[p][i] + gviews[p][i];
                    params[p][i] -= cfg.lr * velocity[p][i];
                }
            }
            for (std::size_t l = 0; l < model.extractor.blocks.size(); ++l) {
                auto& norm = model.extractor.blocks[l].norm;
                const double m = norm.momentum;
                for (std::size_t j = 0; j < norm.width(); ++j) {
                    norm.running_mean[j] = (1.0 - m) * norm.running_mean[j] + m * trace.blocks[l].mean[j];
                    norm.running_var[j] = (1.0 - m) * norm.running_var[j] + m * trace.blocks[l].var[j];
                }
            }
        }
        const double epoch_loss = loss_sum / static_cast<double>(seen);
        require(std::isfinite(epoch_loss), ErrorKind::NonFinite,
                "pretrain: loss diverged in epoch " + std::to_string(epoch + 1));
        report.epoch_loss.push_back(epoch_loss);
    }
    model.norm_mode = NormMode::RunningStats;
    report.clean_test_accuracy = evaluate_accuracy(model, test.inputs, test.labels, NormMode::RunningStats);
    return report;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
    Container c;
    c.kind = "DATASET";
    c.version = kDatasetCacheVersion;
    c.set_meta("samples", std::to_string(data.size()));
    c.set_meta("input_dim", std::to_string(data.inputs.cols()));
    c.add_array("inputs", data.inputs);
    Vector labels(data.labels.begin(), data.labels.end());
    c.add_array("labels", labels);
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    write_container(out, c);
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open dataset '" + path.string() + "'");
    const Container c = read_container(in, "DATASET", kDatasetCacheVersion);
    Dataset d;
    d.inputs = c.array("inputs");
    const Vector labels = c.vector("labels");
    require(labels.size() == d.inputs.rows(), ErrorKind::Shape, "dataset cache: label count mismatch");
    d.labels.reserve(labels.size());
    for (double v : labels) d.labels.push_back(static_cast<int>(v));
    return d;
}

}  // namespace gaptta
