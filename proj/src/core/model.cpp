#include <gaptta/model.hpp>

#include <gaptta/container.hpp>
#include <gaptta/error.hpp>

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

namespace gaptta {

namespace {

std::string block_name(std::size_t i, const char* field) {
    return "block" + std::to_string(i) + "." + field;
}

DenseLayer make_dense(std::size_t in, std::size_t out, SeededRng& rng) {
    DenseLayer layer{Matrix(out, in), Vector(out, 0.0)};
    const double scale = std::sqrt(2.0 / static_cast<double>(in));
    for (double& w : layer.weight.values()) w = scale * rng.normal();
    return layer;
}

void check_dense(const DenseLayer& layer, const std::string& name) {
    require(layer.bias.size() == layer.out_dim(), ErrorKind::Shape,
            name + ": bias length " + std::to_string(layer.bias.size()) + " != " +
                std::to_string(layer.out_dim()));
}

void require_finite(std::span<const double> v, const std::string& where) {
    require(all_finite(v), ErrorKind::NonFinite, "non-finite activation in " + where);
}

}  // namespace

void BatchNormLayer::validate() const {
    const std::size_t w = width();
    require(shift.size() == w && running_mean.size() == w && running_var.size() == w,
            ErrorKind::Shape, "batch norm: parameter widths differ");
    require(epsilon > 0.0, ErrorKind::InvalidArgument, "batch norm: epsilon must be positive");
    require(momentum > 0.0 && momentum <= 1.0, ErrorKind::InvalidArgument,
            "batch norm: momentum must lie in (0, 1]");
    for (double v : running_var) {
        require(v >= 0.0, ErrorKind::InvalidArgument, "batch norm: negative running variance");
    }
}

std::size_t FeatureExtractor::input_dim() const noexcept {
    return blocks.empty() ? head.in_dim() : blocks.front().affine.in_dim();
}

void ModelState::validate() const {
    std::size_t width = extractor.input_dim();
    for (std::size_t i = 0; i < extractor.blocks.size(); ++i) {
        const auto& block = extractor.blocks[i];
        const std::string name = "block " + std::to_string(i);
        require(block.affine.in_dim() == width, ErrorKind::Shape,
                name + ": input width " + std::to_string(block.affine.in_dim()) +
                    " does not follow previous width " + std::to_string(width));
        check_dense(block.affine, name);
        require(block.norm.width() == block.affine.out_dim(), ErrorKind::Shape,
                name + ": batch norm width does not match affine output");
        block.norm.validate();
        width = block.affine.out_dim();
    }
    require(extractor.head.in_dim() == width, ErrorKind::Shape, "head: input width mismatch");
    check_dense(extractor.head, "head");
    require(extractor.embed_dim() > 0, ErrorKind::Shape, "embedding dimension must be positive");
    require(classifier.classes() >= 2, ErrorKind::Shape, "classifier needs at least two classes");
    require(classifier.dim() == extractor.embed_dim(), ErrorKind::Shape,
            "classifier input dim " + std::to_string(classifier.dim()) +
                " != embedding dim " + std::to_string(extractor.embed_dim()));
    require(classifier.bias.size() == classifier.classes(), ErrorKind::Shape,
            "classifier bias length mismatch");
}

ModelState make_model(const Architecture& arch, std::uint64_t seed) {
    require(arch.input_dim > 0 && arch.embed_dim > 0, ErrorKind::InvalidArgument,
            "architecture dimensions must be positive");
    require(arch.classes >= 2, ErrorKind::InvalidArgument, "architecture needs at least two classes");
    SeededRng rng(seed);
    ModelState m;
    std::size_t width = arch.input_dim;
    for (std::size_t h : arch.hidden) {
        require(h > 0, ErrorKind::InvalidArgument, "hidden width must be positive");
        HiddenBlock block;
        block.affine = make_dense(width, h, rng);
        block.norm.running_mean.assign(h, 0.0);
        block.norm.running_var.assign(h, 1.0);
        block.norm.scale.assign(h, 1.0);
        block.norm.shift.assign(h, 0.0);
        block.norm.epsilon = arch.bn_epsilon;
        block.norm.momentum = arch.bn_momentum;
        m.extractor.blocks.push_back(std::move(block));
        width = h;
    }
    m.extractor.head = make_dense(width, arch.embed_dim, rng);
    DenseLayer clf = make_dense(arch.embed_dim, arch.classes, rng);
    m.classifier.weight = std::move(clf.weight);
    m.classifier.bias = std::move(clf.bias);
    m.validate();
    return m;
}

namespace {

Matrix affine(const DenseLayer& layer, const Matrix& inputs) {
    require(inputs.cols() == layer.in_dim(), ErrorKind::Shape,
            "affine: input width " + std::to_string(inputs.cols()) + " != " +
                std::to_string(layer.in_dim()));
    Matrix out(inputs.rows(), layer.out_dim());
    for (std::size_t i = 0; i < inputs.rows(); ++i) {
        const auto x = inputs.row(i);
        for (std::size_t o = 0; o < layer.out_dim(); ++o) {
            out(i, o) = dot(layer.weight.row(o), x) + layer.bias[o];
        }
    }
    return out;
}

void batch_moments(const Matrix& a, Vector& mean, Vector& var) {
    const std::size_t n = a.rows();
    mean.assign(a.cols(), 0.0);
    var.assign(a.cols(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) mean[j] += a(i, j);
    }
    for (double& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            const double d = a(i, j) - mean[j];
            var[j] += d * d;
        }
    }
    for (double& v : var) v /= static_cast<double>(n);
}

}  // namespace

ForwardTrace trace_forward(const ModelState& model, const Matrix& inputs, NormMode mode) {
    require(inputs.cols() == model.input_dim(), ErrorKind::Shape,
            "forward: input dim " + std::to_string(inputs.cols()) + " != model input dim " +
                std::to_string(model.input_dim()));
    if (mode == NormMode::BatchStats) {
        require(inputs.rows() >= 2, ErrorKind::InvalidArgument,
                "forward: batch-stats normalization needs at least 2 samples");
    }
    ForwardTrace trace;
    trace.mode = mode;
    const Matrix* current = &inputs;
    for (std::size_t l = 0; l < model.extractor.blocks.size(); ++l) {
        const auto& block = model.extractor.blocks[l];
        ForwardTrace::Block step;
        step.input = *current;
        Matrix pre = affine(block.affine, step.input);
        if (mode == NormMode::BatchStats) {
            batch_moments(pre, step.mean, step.var);
        } else {
            step.mean = block.norm.running_mean;
            step.var = block.norm.running_var;
        }
        step.inv_std.resize(pre.cols());
        for (std::size_t j = 0; j < pre.cols(); ++j) {
            step.inv_std[j] = 1.0 / std::sqrt(step.var[j] + block.norm.epsilon);
        }
        step.normalized = Matrix(pre.rows(), pre.cols());
        step.activated = Matrix(pre.rows(), pre.cols());
        for (std::size_t i = 0; i < pre.rows(); ++i) {
            for (std::size_t j = 0; j < pre.cols(); ++j) {
                const double xhat = (pre(i, j) - step.mean[j]) * step.inv_std[j];
                step.normalized(i, j) = xhat;
                const double y = block.norm.scale[j] * xhat + block.norm.shift[j];
                step.activated(i, j) = y > 0.0 ? y : 0.0;
            }
        }
        require_finite(step.activated.values(), "block " + std::to_string(l));
        trace.blocks.push_back(std::move(step));
        current = &trace.blocks.back().activated;
    }
    trace.head_input = *current;
    trace.embeddings = affine(model.extractor.head, trace.head_input);
    require_finite(trace.embeddings.values(), "head");
    trace.logits = classify(model.classifier, trace.embeddings);
    require_finite(trace.logits.values(), "classifier");
    return trace;
}

Matrix forward_features(const ModelState& model, const Matrix& inputs, NormMode mode) {
    return trace_forward(model, inputs, mode).embeddings;
}

Matrix forward_features(const ModelState& model, const Matrix& inputs) {
    return forward_features(model, inputs, model.norm_mode);
}

Matrix classify(const Classifier& classifier, const Matrix& embeddings) {
    require(embeddings.cols() == classifier.dim(), ErrorKind::Shape,
            "classify: embedding dim " + std::to_string(embeddings.cols()) + " != " +
                std::to_string(classifier.dim()));
    Matrix logits(embeddings.rows(), classifier.classes());
    for (std::size_t i = 0; i < embeddings.rows(); ++i) {
        const auto z = embeddings.row(i);
        for (std::size_t k = 0; k < classifier.classes(); ++k) {
            logits(i, k) = dot(classifier.weight.row(k), z) + classifier.bias[k];
        }
    }
    return logits;
}

Vector classify(const Classifier& classifier, std::span<const double> embedding) {
    require(embedding.size() == classifier.dim(), ErrorKind::Shape, "classify: embedding dim mismatch");
    Vector logits(classifier.classes());
    for (std::size_t k = 0; k < classifier.classes(); ++k) {
        logits[k] = dot(classifier.weight.row(k), embedding) + classifier.bias[k];
    }
    return logits;
}

void update_bn_statistics(ModelState& model, const Matrix& inputs) {
    require(inputs.rows() >= 2, ErrorKind::InvalidArgument,
            "update_bn_statistics: batch size must be at least 2");
    ForwardTrace trace = trace_forward(model, inputs, NormMode::BatchStats);
    for (std::size_t l = 0; l < trace.blocks.size(); ++l) {
        auto& norm = model.extractor.blocks[l].norm;
        norm.running_mean = trace.blocks[l].mean;
        norm.running_var = trace.blocks[l].var;
    }
}

void save_checkpoint(const ModelState& model, std::ostream& out) {
    model.validate();
    Container c;
    c.kind = "CHECKPOINT";
    c.version = kCheckpointVersion;
    std::string hidden;
    for (const auto& block : model.extractor.blocks) {
        if (!hidden.empty()) hidden += ',';
        hidden += std::to_string(block.affine.out_dim());
    }
    c.set_meta("input_dim", std::to_string(model.input_dim()));
    c.set_meta("hidden", hidden.empty() ? "-" : hidden);
    c.set_meta("embed_dim", std::to_string(model.embed_dim()));
    c.set_meta("classes", std::to_string(model.classes()));
    c.set_meta("norm_mode", model.norm_mode == NormMode::BatchStats ? "batch" : "running");
    for (std::size_t i = 0; i < model.extractor.blocks.size(); ++i) {
        const auto& b = model.extractor.blocks[i];
        c.set_meta(block_name(i, "epsilon"), format_double(b.norm.epsilon));
        c.set_meta(block_name(i, "momentum"), format_double(b.norm.momentum));
        c.add_array(block_name(i, "weight"), b.affine.weight);
        c.add_array(block_name(i, "bias"), b.affine.bias);
        c.add_array(block_name(i, "running_mean"), b.norm.running_mean);
        c.add_array(block_name(i, "running_var"), b.norm.running_var);
        c.add_array(block_name(i, "scale"), b.norm.scale);
        c.add_array(block_name(i, "shift"), b.norm.shift);
    }
    c.add_array("head.weight", model.extractor.head.weight);
    c.add_array("head.bias", model.extractor.head.bias);
    c.add_array("classifier.weight", model.classifier.weight);
    c.add_array("classifier.bias", model.classifier.bias);
    write_container(out, c);
}

void save_checkpoint(const ModelState& model, const std::filesystem::path& path) {
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    save_checkpoint(model, out);
    out.flush();
    require(static_cast<bool>(out), ErrorKind::Io, "write to '" + path.string() + "' failed");
}

namespace {

std::size_t parse_size(const std::string& text, const char* field) {
    std::size_t pos = 0;
    unsigned long long value = 0;
    try {
        value = std::stoull(text, &pos);
    } catch (const std::exception&) {
        fail(ErrorKind::Format, std::string("checkpoint: bad integer for ") + field);
    }
    require(pos == text.size(), ErrorKind::Format, std::string("checkpoint: bad integer for ") + field);
    return static_cast<std::size_t>(value);
}

double parse_real(const std::string& text, const char* field) {
    try {
        std::size_t pos = 0;
        double v = std::stod(text, &pos);
        if (pos == text.size()) return v;
    } catch (const std::exception&) {
    }
    fail(ErrorKind::Format, std::string("checkpoint: bad number for ") + field);
}

void expect_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& name) {
    require(m.rows() == rows && m.cols() == cols, ErrorKind::Shape,
            "checkpoint: array '" + name + "' is " + std::to_string(m.rows()) + "x" +
                std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                std::to_string(cols));
}

}  // namespace

ModelState load_checkpoint(std::istream& in) {
    Container c = read_container(in, "CHECKPOINT", kCheckpointVersion);
    const std::size_t input_dim = parse_size(c.meta_value("input_dim"), "input_dim");
    const std::size_t embed_dim = parse_size(c.meta_value("embed_dim"), "embed_dim");
    const std::size_t classes = parse_size(c.meta_value("classes"), "classes");
    std::vector<std::size_t> hidden;
    if (const std::string& spec = c.meta_value("hidden"); spec != "-") {
        std::stringstream ss(spec);
        std::string item;
        while (std::getline(ss, item, ',')) hidden.push_back(parse_size(item, "hidden"));
    }

    ModelState m;
    const std::string& mode = c.meta_value("norm_mode");
    require(mode == "batch" || mode == "running", ErrorKind::Format, "checkpoint: bad norm_mode");
    m.norm_mode = mode == "batch" ? NormMode::BatchStats : NormMode::RunningStats;

    std::size_t width = input_dim;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
        HiddenBlock b;
        const std::size_t h = hidden[i];
        auto fetch = [&](const char* field, std::size_t rows, std::size_t cols) {
            const std::string name = block_name(i, field);
            const Matrix& a = c.array(name);
            expect_shape(a, rows, cols, name);
            return a;
        };
        auto fetch_vec = [&](const char* field) {
            const Matrix a = fetch(field, 1, h);
            return Vector(a.values().begin(), a.values().end());
        };
        b.affine.weight = fetch("weight", h, width);
        b.affine.bias = fetch_vec("bias");
        b.norm.running_mean = fetch_vec("running_mean");
        b.norm.running_var = fetch_vec("running_var");
        b.norm.scale = fetch_vec("scale");
        b.norm.shift = fetch_vec("shift");
        b.norm.epsilon = parse_real(c.meta_value(block_name(i, "epsilon")), "epsilon");
        b.norm.momentum = parse_real(c.meta_value(block_name(i, "momentum")), "momentum");
        m.extractor.blocks.push_back(std::move(b));
        width = h;
    }
    const Matrix& head_w = c.array("head.weight");
    expect_shape(head_w, embed_dim, width, "head.weight");
    m.extractor.head.weight = head_w;
    expect_shape(c.array("head.bias"), 1, embed_dim, "head.bias");
    m.extractor.head.bias = c.vector("head.bias");

    const Matrix& clf_w = c.array("classifier.weight");
    expect_shape(clf_w, classes, embed_dim, "classifier.weight");
    m.classifier.weight = clf_w;
    expect_shape(c.array("classifier.bias"), 1, classes, "classifier.bias");
    m.classifier.bias = c.vector("classifier.bias");
    m.validate();
    return m;
}

ModelState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open checkpoint '" + path.string() + "'");
    return load_checkpoint(in);
}

}  // namespace gaptta
