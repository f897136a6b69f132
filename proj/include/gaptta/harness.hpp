#pragma once

#include <gaptta/config.hpp>
#include <gaptta/data.hpp>
#include <gaptta/engine.hpp>
#include <gaptta/model.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gaptta {

using LineSink = std::function<void(const std::string&)>;

/// A table row: a base method, optionally with the GAP regularizer ("tent+gap").
struct MethodVariant {
    Method method = Method::Tent;
    bool gap = false;

    std::string label() const;
};

MethodVariant parse_method_variant(std::string_view text);

struct GridCorruption {
    CorruptionKind kind = CorruptionKind::GaussianNoise;
    int severity = 5;

    /// "gaussian-noise@5"
    std::string label() const;
};

/// "gaussian-noise:5"; a bare kind means severity 5.
GridCorruption parse_grid_corruption(std::string_view text);

/// Where pretraining data comes from: the synthetic blobs or an IDX image pair.
struct IdxSource {
    std::filesystem::path images;
    std::filesystem::path labels;
    std::size_t classes = 3;  // keep digits 0 .. classes-1
    std::size_t limit = 0;    // 0: all samples
    double test_fraction = 0.2;
};

struct ExportConfig {
    std::vector<std::size_t> steps = {0, 10, 25};
    std::vector<MethodVariant> methods = {{Method::Tent, false}, {Method::Tent, true}};
    std::optional<GridCorruption> corruption = GridCorruption{};
    std::uint64_t seed = 1;
    bool svg = true;
};

struct RunConfig {
    DatasetSpec data;
    std::optional<IdxSource> idx;
    Architecture arch;
    std::uint64_t model_seed = 11;
    PretrainConfig pretrain;
    std::filesystem::path checkpoint;

    std::vector<MethodVariant> methods;
    std::vector<GridCorruption> corruptions;
    std::vector<std::uint64_t> seeds;
    AdaptConfig adapt;  // method and gap flag are set per row
    /// Per-base-method learning rates; a "+gap" row shares its base row's.
    std::vector<std::pair<Method, double>> method_lr;

    bool ablations = false;
    std::vector<Method> ablation_methods = {Method::Tent, Method::PseudoLabel};

    ExportConfig exporting;

    std::filesystem::path out_dir;
    std::size_t jobs = 1;

    /// The AdaptConfig of one table row.
    AdaptConfig adapt_for(const MethodVariant& variant) const;
    std::filesystem::path checkpoint_path() const;
    std::filesystem::path dataset_cache_path() const;
    void validate() const;
};

/// Reads every field of the config (unknown keys are errors); `checkpoint`
/// is the only required one. Relative IDX paths resolve against the config
/// file's directory.
RunConfig parse_run_config(const KeyValueConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);

/// --out, then GAPTTA_OUT_DIR, then the current directory.
std::filesystem::path resolve_out_dir(const std::optional<std::string>& flag);

DatasetSplit build_dataset(const RunConfig& cfg);

struct ResultCell {
    double mean = 0.0;  // percent
    double std = 0.0;   // sample std over seeds, percent
    std::size_t runs = 0;
    bool failed = false;
};

/// Rows are methods, columns corruption settings plus the row average.
struct ResultTable {
    std::vector<std::string> columns;
    std::vector<std::string> rows;
    std::vector<std::vector<ResultCell>> cells;
    std::vector<ResultCell> average;

    std::string to_csv() const;
    std::string to_text() const;
};

/// One grid run placed in a table: accuracy as a fraction.
struct TableEntry {
    std::size_t row = 0;
    std::size_t column = 0;
    std::size_t seed = 0;  // index into the seed list
    double accuracy = 0.0;
    bool failed = false;
};

/// Cell means and sample stds over seeds (percent); the average column is the
/// mean of the row's cells, its std the spread of the per-seed row averages.
ResultTable make_result_table(std::vector<std::string> rows, std::vector<std::string> columns,
                              std::size_t seeds, std::span<const TableEntry> entries);

struct CommandResult {
    int exit_code = 0;
    std::vector<std::filesystem::path> files;
};

CommandResult cmd_pretrain(const RunConfig& cfg, const LineSink& log);
CommandResult cmd_adapt(const RunConfig& cfg, const LineSink& log);
CommandResult cmd_export_embeddings(const RunConfig& cfg, const LineSink& log);

struct GradcheckOptions {
    std::uint64_t seed = 2024;
    /// Flips the sign of the closed-form EM weight gradient under test, to
    /// show the suite catches it.
    bool inject_fault = false;
};

struct CheckResult {
    std::string name;
    double max_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
    double seconds = 0.0;
    std::string detail;
};

struct GradcheckReport {
    std::vector<CheckResult> checks;

    bool passed() const;
    const CheckResult& find(std::string_view name) const;
};

GradcheckReport run_gradcheck(const GradcheckOptions& options);
CommandResult cmd_gradcheck(const GradcheckOptions& options, const LineSink& log);

}  // namespace gaptta
