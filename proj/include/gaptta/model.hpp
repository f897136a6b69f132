#pragma once

#include <gaptta/numerics.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

namespace gaptta {

struct DenseLayer {
    Matrix weight;  // out x in
    Vector bias;    // out

    std::size_t in_dim() const noexcept { return weight.cols(); }
    std::size_t out_dim() const noexcept { return weight.rows(); }
};

struct BatchNormLayer {
    Vector running_mean;
    Vector running_var;
    Vector scale;
    Vector shift;
    double epsilon = 1e-5;
    double momentum = 0.1;  // used by source pretraining only

    std::size_t width() const noexcept { return scale.size(); }
    void validate() const;
};

/// affine -> batch norm -> ReLU
struct HiddenBlock {
    DenseLayer affine;
    BatchNormLayer norm;
};

/// f_phi: hidden blocks followed by a final affine map to the embedding.
struct FeatureExtractor {
    std::vector<HiddenBlock> blocks;
    DenseLayer head;

    std::size_t input_dim() const noexcept;
    std::size_t embed_dim() const noexcept { return head.out_dim(); }
};

/// Linear classifier g_w; row k of `weight` is w_k.
struct Classifier {
    Matrix weight;  // c x d
    Vector bias;    // c

    std::size_t classes() const noexcept { return weight.rows(); }
    std::size_t dim() const noexcept { return weight.cols(); }
};

enum class NormMode { RunningStats, BatchStats };

struct ModelState {
    FeatureExtractor extractor;
    Classifier classifier;
    NormMode norm_mode = NormMode::RunningStats;

    std::size_t input_dim() const noexcept { return extractor.input_dim(); }
    std::size_t embed_dim() const noexcept { return extractor.embed_dim(); }
    std::size_t classes() const noexcept { return classifier.classes(); }

    /// Throws Shape when the layer shapes do not compose.
    void validate() const;
};

struct Architecture {
    std::size_t input_dim = 32;
    std::vector<std::size_t> hidden = {64, 64};
    std::size_t embed_dim = 16;
    std::size_t classes = 10;
    double bn_epsilon = 1e-5;
    double bn_momentum = 0.1;
};

/// He-initialised model; BN scale 1, shift 0, running moments (0, 1).
ModelState make_model(const Architecture& arch, std::uint64_t seed);

/// Intermediate values of one forward pass, kept for the backward pass.
struct ForwardTrace {
    struct Block {
        Matrix input;       // B x in
        Matrix normalized;  // B x width, x_hat
        Vector mean;        // moments used for normalisation
        Vector var;
        Vector inv_std;
        Matrix activated;   // after scale/shift and ReLU
    };
    NormMode mode = NormMode::BatchStats;
    std::vector<Block> blocks;
    Matrix head_input;
    Matrix embeddings;  // z
    Matrix logits;
};

ForwardTrace trace_forward(const ModelState& model, const Matrix& inputs, NormMode mode);

/// z_i = f_phi(x_i) in the model's normalization mode.
Matrix forward_features(const ModelState& model, const Matrix& inputs);
Matrix forward_features(const ModelState& model, const Matrix& inputs, NormMode mode);

/// logits = z W^T + b per row.
Matrix classify(const Classifier& classifier, const Matrix& embeddings);
Vector classify(const Classifier& classifier, std::span<const double> embedding);
inline Matrix classify(const ModelState& model, const Matrix& embeddings) {
    return classify(model.classifier, embeddings);
}

/// Replaces every BN layer's running moments with the batch moments seen at
/// that layer (biased variance).
void update_bn_statistics(ModelState& model, const Matrix& inputs);

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const ModelState& model, std::ostream& out);
void save_checkpoint(const ModelState& model, const std::filesystem::path& path);
ModelState load_checkpoint(std::istream& in);
ModelState load_checkpoint(const std::filesystem::path& path);

}  // namespace gaptta
