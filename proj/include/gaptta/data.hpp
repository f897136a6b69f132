#pragma once

#include <gaptta/engine.hpp>
#include <gaptta/model.hpp>
#include <gaptta/numerics.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace gaptta {

/// Gaussian class clusters in a latent space, lifted into the input space by a
/// fixed random orthonormal map and optionally warped coordinate-wise by tanh.
struct DatasetSpec {
    std::size_t classes = 10;
    std::size_t input_dim = 32;
    double mean_scale = 1.0;  // std of the class-mean coordinates
    double spread = 0.3;      // within-class std
    /// Clusters live in a latent space of this dimension, embedded into the
    /// input space by a fixed random orthonormal map (0: use input_dim).
    std::size_t latent_dim = 32;
    /// Ratio between the largest and smallest latent coordinate scale; the
    /// scales are spaced geometrically and multiply means and spread alike
    /// (1: isotropic).
    double scale_ratio = 1000.0;
    bool warp = true;
    /// Explicit class means (c x latent dim); drawn from the seed when absent.
    std::optional<Matrix> means;
    std::size_t train_count = 4000;
    std::size_t test_count = 3200;
    std::uint64_t seed = 7;

    std::size_t latent() const noexcept { return latent_dim == 0 ? input_dim : latent_dim; }
    void validate() const;
};

struct Dataset {
    Matrix inputs;
    std::vector<int> labels;

    std::size_t size() const noexcept { return labels.size(); }
};

struct DatasetSplit {
    Dataset train;
    Dataset test;
    Matrix class_means;
};

/// Deterministic per seed; class-balanced (sample i has label i mod c before
/// shuffling); train and test are drawn from disjoint generator streams.
DatasetSplit make_dataset(const DatasetSpec& spec);

enum class CorruptionKind { GaussianNoise, ImpulseNoise, FeatureDropout, ContrastScale, SmoothingBlur };

std::string_view to_string(CorruptionKind kind) noexcept;
CorruptionKind parse_corruption_kind(std::string_view text);
std::span<const CorruptionKind> all_corruption_kinds() noexcept;

struct CorruptionSpec {
    CorruptionKind kind = CorruptionKind::GaussianNoise;
    int severity = 1;  // 1..5
    std::uint64_t seed = 0;
};

/// Severity-table parameter of a corruption: noise std factor, corrupted
/// fraction, contrast factor or blur window.
double severity_parameter(CorruptionKind kind, int severity);

/// Applies the corruption to every row. Scale-dependent kinds use the batch's
/// global standard deviation, mean and extremes.
Matrix corrupt(const Matrix& inputs, const CorruptionSpec& spec);

/// Shuffles (seeded) and cuts the test set into batches; an optional
/// corruption is applied to the whole set first. A trailing remainder of
/// fewer than two samples is dropped.
std::vector<StreamBatch> make_stream(const Dataset& test, const std::optional<CorruptionSpec>& corruption,
                                     std::size_t batch_size, std::uint64_t seed);

struct PretrainConfig {
    std::size_t epochs = 30;
    double lr = 0.01;
    double momentum = 0.9;
    std::size_t batch_size = 64;
    std::uint64_t seed = 1;
};

struct PretrainReport {
    std::vector<double> epoch_loss;  // mean training CE per epoch
    double clean_test_accuracy = 0.0;
};

/// Supervised CE training of every parameter with minibatch SGD. BN layers
/// normalise with batch statistics and accumulate running moments with their
/// momentum. The model is left in running-stats mode.
PretrainReport pretrain(ModelState& model, const Dataset& train, const Dataset& test,
                        const PretrainConfig& cfg);

/// Fraction of correct argmax predictions.
double evaluate_accuracy(const ModelState& model, const Matrix& inputs, std::span<const int> labels,
                         NormMode mode);

inline constexpr int kDatasetCacheVersion = 1;
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace gaptta
