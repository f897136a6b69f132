#pragma once

#include <gaptta/gap.hpp>
#include <gaptta/gradient.hpp>
#include <gaptta/model.hpp>
#include <gaptta/selection.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace gaptta {

enum class Method { NoAdapt, Norm, PseudoLabel, Tent, EataLite };

std::string_view to_string(Method method) noexcept;
Method parse_method(std::string_view text);

struct AdaptConfig {
    Method method = Method::Tent;
    bool gap_enabled = false;
    GapConfig gap;
    double lr = 1e-3;
    double momentum = 0.9;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    /// EATA entropy margin as a fraction of ln(c).
    double eata_margin_factor = 0.4;

    bool updates_parameters() const noexcept;
    double eata_margin(std::size_t classes) const;
    void validate() const;
};

/// What adaptation code is allowed to see of a batch.
struct UnlabeledBatch {
    const Matrix& inputs;
    std::size_t index = 0;
};

/// A test batch together with its hidden labels. The labels are only read by
/// the scoring code in StreamAdapter::step; adaptation receives unlabeled().
class StreamBatch {
public:
    StreamBatch(Matrix inputs, std::vector<int> labels, std::size_t index);

    UnlabeledBatch unlabeled() const noexcept { return {inputs_, index_}; }
    std::span<const int> hidden_labels() const noexcept { return labels_; }
    const Matrix& inputs() const noexcept { return inputs_; }
    std::size_t size() const noexcept { return inputs_.rows(); }
    std::size_t index() const noexcept { return index_; }

private:
    Matrix inputs_;
    std::vector<int> labels_;
    std::size_t index_;
};

struct MetricsRecord {
    std::size_t batch_index = 0;
    std::size_t batch_size = 0;
    std::size_t correct = 0;
    double accuracy = 0.0;
    double tta_loss = 0.0;
    double gap_loss = 0.0;
    double beta_t = 0.0;
    bool updated = false;
    std::vector<std::size_t> class_counts;  // predictions per class
};

struct StepResult {
    std::vector<int> predictions;
    LossValue loss;
    double beta_t = 0.0;
    bool updated = false;
};

/// Runs the per-batch adaptation protocol on a model it does not own:
/// refresh BN statistics, predict, build L_TTA + beta_t * L_GAP, then one
/// gradient-descent step on BN scale/shift.
class StreamAdapter {
public:
    /// When GAP is enabled and `cache` is null, a cache is built from the
    /// model's classifier.
    StreamAdapter(ModelState& model, AdaptConfig cfg, const PrototypeGradCache* cache = nullptr);

    StepResult adapt(UnlabeledBatch batch, std::size_t t);
    std::pair<std::vector<int>, MetricsRecord> step(const StreamBatch& batch, std::size_t t);

    const AdaptConfig& config() const noexcept { return cfg_; }
    const PrototypeGradCache* cache() const noexcept { return cache_; }

private:
    LossSpec loss_spec(std::size_t t) const;

    ModelState& model_;
    AdaptConfig cfg_;
    std::optional<PrototypeGradCache> owned_cache_;
    const PrototypeGradCache* cache_ = nullptr;
    ParamSelector selector_;
    std::vector<Vector> velocity_;
};

struct RunSummary {
    std::size_t batches = 0;
    std::size_t samples = 0;
    std::size_t correct = 0;
    double accuracy = 0.0;  // online accuracy over all scored samples
    bool empty = true;
};

struct RunResult {
    std::vector<MetricsRecord> records;
    RunSummary summary;
};

/// Folds the adapter over the stream with t = 0, 1, 2, ...
RunResult run_stream(ModelState& model, std::span<const StreamBatch> stream, const AdaptConfig& cfg,
                     const PrototypeGradCache* cache = nullptr);

}  // namespace gaptta
