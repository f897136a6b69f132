#include <gaptta/data.hpp>
#include <gaptta/error.hpp>
#include <gaptta/harness.hpp>

#include <gtest/gtest.h>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <unistd.h>

using namespace gaptta;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kBaseConfig =
    "checkpoint = model.ckpt\n"
    "data.classes = 4\n"
    "data.input_dim = 8\n"
    "data.latent_dim = 8\n"
    "data.scale_ratio = 10\n"
    "data.spread = 0.4\n"
    "data.train_count = 600\n"
    "data.test_count = 320\n"
    "model.hidden = 16, 16\n"
    "model.embed_dim = 2\n"
    "pretrain.epochs = 5\n"
    "adapt.corruptions = gaussian-noise:5\n"
    "adapt.seeds = 1\n"
    "adapt.batch_size = 32\n"
    "adapt.lr = 0.01\n"
    "export.steps = 0, 4\n"
    "export.methods = tent, tent+gap\n";

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("gaptta_harness_" + std::to_string(::getpid()) + "_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Lines in `extra` replace base lines with the same key.
RunConfig make_config(const fs::path& out, const std::string& extra = "") {
    auto key_of = [](const std::string& line) { return trim(line.substr(0, line.find('='))); };
    std::set<std::string> overridden;
    std::istringstream extra_lines(extra);
    for (std::string line; std::getline(extra_lines, line);) overridden.insert(key_of(line));
    std::string text;
    std::istringstream base_lines(kBaseConfig);
    for (std::string line; std::getline(base_lines, line);) {
        if (!overridden.contains(key_of(line))) text += line + "\n";
    }
    RunConfig cfg = parse_run_config(KeyValueConfig::parse(text + extra, "test.cfg"));
    cfg.out_dir = out;
    return cfg;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

struct Captured {
    std::vector<std::string> lines;
    LineSink sink() {
        return [this](const std::string& l) { lines.push_back(l); };
    }
};

// One pretrained checkpoint shared by the adapt and export tests.
const fs::path& pretrained_dir() {
    static const fs::path dir = [] {
        const fs::path d = scratch("shared");
        Captured log;
        const CommandResult r = cmd_pretrain(make_config(d), log.sink());
        EXPECT_EQ(r.exit_code, 0);
        return d;
    }();
    return dir;
}

fs::path adapt_dir(const std::string& name) {
    const fs::path d = scratch(name);
    fs::copy_file(pretrained_dir() / "model.ckpt", d / "model.ckpt");
    fs::copy_file(pretrained_dir() / "model.ckpt.testset", d / "model.ckpt.testset");
    return d;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(read_file(p));
    for (std::string line; std::getline(in, line);) {
        rows.push_back(split_list(line));
    }
    return rows;
}

}  // namespace

TEST(CmdPretrain, SummaryAccuracyMatchesRecomputation) {
    const fs::path d = scratch("pretrain");
    Captured log;
    const RunConfig cfg = make_config(d);
    ASSERT_EQ(cmd_pretrain(cfg, log.sink()).exit_code, 0);
    ASSERT_TRUE(fs::exists(d / "model.ckpt"));
    ASSERT_TRUE(fs::exists(d / "model.ckpt.testset"));

    std::string line;
    for (const auto& l : log.lines) {
        if (l.rfind("pretrain:", 0) == 0) line = l;
    }
    const auto at = line.find("clean_test_accuracy=");
    ASSERT_NE(at, std::string::npos) << line;
    const double reported = std::stod(line.substr(at + 20));

    const ModelState model = load_checkpoint(d / "model.ckpt");
    const DatasetSplit data = build_dataset(cfg);
    const double recomputed = evaluate_accuracy(model, data.test.inputs, data.test.labels, NormMode::RunningStats);
    EXPECT_NEAR(reported, recomputed, 1e-12);

    const json summary = json::parse(read_file(d / "pretrain_summary.json"));
    EXPECT_NEAR(summary["clean_test_accuracy"].get<double>(), recomputed, 1e-12);
}

TEST(CmdPretrain, IdenticalConfigGivesIdenticalCheckpoint) {
    const fs::path a = scratch("pretrain_a"), b = scratch("pretrain_b");
    Captured log;
    cmd_pretrain(make_config(a), log.sink());
    cmd_pretrain(make_config(b), log.sink());
    EXPECT_EQ(read_file(a / "model.ckpt"), read_file(b / "model.ckpt"));
    EXPECT_EQ(read_file(a / "model.ckpt.testset"), read_file(b / "model.ckpt.testset"));
}

TEST(CmdAdapt, SingleCellGridGivesOneSummary) {
    const fs::path d = adapt_dir("single");
    Captured log;
    const CommandResult r = cmd_adapt(make_config(d, "adapt.methods = tent\n"), log.sink());
    EXPECT_EQ(r.exit_code, 0);
    const json summaries = json::parse(read_file(d / "summaries.json"));
    ASSERT_EQ(summaries.size(), 1u);
    EXPECT_EQ(summaries[0]["status"], "ok");
    EXPECT_EQ(summaries[0]["batches"], 10);
    const auto results = read_csv(d / "results.csv");
    ASSERT_EQ(results.size(), 2u);
    EXPECT_EQ(results[0][0], "method");
    EXPECT_EQ(results[1][0], "tent");
    const auto metrics = read_csv(d / "metrics.csv");
    EXPECT_EQ(metrics.size(), 11u);
}

TEST(CmdAdapt, GapRowsFollowTheirBaseRow) {
    const fs::path d = adapt_dir("pairing");
    Captured log;
    cmd_adapt(make_config(d, "adapt.methods = pl+gap, tent, tent+gap\n"), log.sink());
    const auto results = read_csv(d / "results.csv");
    std::vector<std::string> rows;
    for (std::size_t i = 1; i < results.size(); ++i) rows.push_back(results[i][0]);
    EXPECT_EQ(rows, (std::vector<std::string>{"pl", "pl+gap", "tent", "tent+gap"}));
}

TEST(CmdAdapt, TableAgreesWithRunSummaries) {
    const fs::path d = adapt_dir("table");
    Captured log;
    const RunConfig cfg =
        make_config(d, "adapt.methods = norm, tent\nadapt.seeds = 1, 2\n"
                       "adapt.corruptions = gaussian-noise:5, contrast-scale:3\n");
    ASSERT_EQ(cmd_adapt(cfg, log.sink()).exit_code, 0);
    const json summaries = json::parse(read_file(d / "summaries.json"));
    ASSERT_EQ(summaries.size(), 8u);
    std::map<std::string, std::vector<double>> per_row;
    for (const auto& s : summaries) per_row[s["row"].get<std::string>()].push_back(100.0 * s["accuracy"].get<double>());
    const auto results = read_csv(d / "results.csv");
    ASSERT_EQ(results[0].back(), "average_std");
    for (std::size_t i = 1; i < results.size(); ++i) {
        const auto& xs = per_row[results[i][0]];
        ASSERT_EQ(xs.size(), 4u);
        double mean = 0;
        for (double x : xs) mean += x / 4.0;
        EXPECT_NEAR(std::stod(results[i][results[i].size() - 2]), mean, 0.05 + 1e-9);
    }
}

TEST(CmdAdapt, RerunsAreByteIdentical) {
    const fs::path a = adapt_dir("rerun_a"), b = adapt_dir("rerun_b");
    Captured log;
    const std::string extra = "adapt.methods = tent, tent+gap, eata-lite\nadapt.seeds = 1, 2\n";
    RunConfig ca = make_config(a, extra);
    RunConfig cb = make_config(b, extra);
    cb.jobs = 3;
    cmd_adapt(ca, log.sink());
    cmd_adapt(cb, log.sink());
    for (const char* f : {"metrics.csv", "results.csv", "summaries.json"}) {
        EXPECT_EQ(read_file(a / f), read_file(b / f)) << f;
    }
}

TEST(CmdAdapt, MissingCheckpointIsIoError) {
    const fs::path d = scratch("nockpt");
    Captured log;
    try {
        cmd_adapt(make_config(d), log.sink());
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Io);
    }
}

TEST(CmdAdapt, DivergentRunIsMarkedFailed) {
    const fs::path d = adapt_dir("diverge");
    Captured log;
    const RunConfig cfg = make_config(d, "adapt.methods = norm, tent\nadapt.lr.tent = 1e308\n");
    const CommandResult r = cmd_adapt(cfg, log.sink());
    EXPECT_EQ(r.exit_code, 3);
    const auto results = read_csv(d / "results.csv");
    ASSERT_EQ(results.size(), 3u);
    EXPECT_NE(results[1][1], "failed");
    EXPECT_EQ(results[2][1], "failed");
    const json summaries = json::parse(read_file(d / "summaries.json"));
    EXPECT_EQ(summaries[1]["status"], "failed");
}

TEST(CmdAdapt, AblationTablesAreWritten) {
    const fs::path d = adapt_dir("ablation");
    Captured log;
    const RunConfig cfg = make_config(d, "adapt.methods = tent\nadapt.ablations = true\nadapt.ablation_methods = tent\n");
    ASSERT_EQ(cmd_adapt(cfg, log.sink()).exit_code, 0);
    const auto weighting = read_csv(d / "ablation_weighting.csv");
    ASSERT_EQ(weighting.size(), 4u);
    EXPECT_EQ(weighting[1][0], "tent");
    EXPECT_EQ(weighting[2][0], "tent+gap_hard");
    EXPECT_EQ(weighting[3][0], "tent+gap_soft");
    const auto loss = read_csv(d / "ablation_loss_choice.csv");
    ASSERT_EQ(loss.size(), 3u);
    EXPECT_EQ(loss[0], (std::vector<std::string>{"method", "data_loss", "proto_em_mean", "proto_em_std",
                                                  "proto_ce_mean", "proto_ce_std"}));
    for (std::size_t r = 1; r < loss.size(); ++r) {
        for (std::size_t c = 2; c < loss[r].size(); ++c) EXPECT_TRUE(std::isfinite(std::stod(loss[r][c])));
    }
    const json timing = json::parse(read_file(d / "ablation_timing.json"));
    EXPECT_TRUE(timing.contains("tent+gap_soft"));
}

TEST(ResultTable, AverageIsRowMeanOfCells) {
    SeededRng rng(3);
    std::vector<TableEntry> entries;
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
            for (std::size_t s = 0; s < 5; ++s) entries.push_back({r, c, s, rng.uniform(), false});
        }
    }
    const ResultTable t = make_result_table({"a", "b", "c"}, {"w", "x", "y", "z"}, 5, entries);
    for (std::size_t r = 0; r < 3; ++r) {
        double mean = 0;
        for (const auto& cell : t.cells[r]) mean += cell.mean / 4.0;
        EXPECT_NEAR(t.average[r].mean, mean, 1e-9);
        EXPECT_EQ(t.average[r].runs, 20u);
    }
    // sample std over seeds
    const ResultCell& cell = t.cells[1][2];
    std::vector<double> xs;
    for (const auto& e : entries) {
        if (e.row == 1 && e.column == 2) xs.push_back(100.0 * e.accuracy);
    }
    double m = 0, sq = 0;
    for (double x : xs) m += x / 5.0;
    for (double x : xs) sq += (x - m) * (x - m);
    EXPECT_NEAR(cell.std, std::sqrt(sq / 4.0), 1e-12);
}

TEST(ResultTable, FailedCellsPropagateToAverage) {
    const std::vector<TableEntry> entries{{0, 0, 0, 0.5, false}, {0, 1, 0, 0.0, true}, {1, 0, 0, 0.4, false},
                                          {1, 1, 0, 0.6, false}};
    const ResultTable t = make_result_table({"a", "b"}, {"x", "y"}, 1, entries);
    EXPECT_TRUE(t.cells[0][1].failed);
    EXPECT_TRUE(t.average[0].failed);
    EXPECT_FALSE(t.average[1].failed);
    const std::string csv = t.to_csv();
    EXPECT_NE(csv.find("a,50.0,0.0,failed"), std::string::npos) << csv;
    EXPECT_NE(csv.find("b,40.0,0.0,60.0,0.0,50.0,0.0"), std::string::npos) << csv;
    EXPECT_THROW(make_result_table({"a"}, {"x"}, 1, std::vector<TableEntry>{{1, 0, 0, 0.5, false}}), Error);
}

TEST(CmdExport, RowsStepsAndMethods) {
    const fs::path d = adapt_dir("export");
    Captured log;
    ASSERT_EQ(cmd_export_embeddings(make_config(d), log.sink()).exit_code, 0);
    const auto rows = read_csv(d / "embeddings.csv");
    ASSERT_EQ(rows[0], (std::vector<std::string>{"x", "y", "true", "pred", "step", "method"}));
    // 320 samples x 2 steps x 2 methods
    ASSERT_EQ(rows.size(), 1u + 320u * 2u * 2u);
    std::map<std::pair<std::string, std::string>, std::vector<std::pair<std::string, std::string>>> points;
    for (std::size_t i = 1; i < rows.size(); ++i) points[{rows[i][5], rows[i][4]}].push_back({rows[i][0], rows[i][1]});
    ASSERT_EQ(points.size(), 4u);
    using Key = std::pair<std::string, std::string>;
    EXPECT_EQ(points[Key("tent", "0")], points[Key("tent+gap", "0")]);
    EXPECT_NE(points[Key("tent", "4")], points[Key("tent+gap", "4")]);
    for (const char* svg : {"embeddings_tent_step0.svg", "embeddings_tent_gap_step4.svg"}) {
        EXPECT_EQ(read_file(d / svg).rfind("<svg", 0), 0u) << svg;
    }
}

TEST(CmdExport, RequiresTwoDimensionalEmbeddings) {
    const fs::path d = scratch("export_dim");
    Captured log;
    const RunConfig cfg = make_config(d, "");
    RunConfig wide = cfg;
    wide.arch.embed_dim = 3;
    ASSERT_EQ(cmd_pretrain(wide, log.sink()).exit_code, 0);
    try {
        cmd_export_embeddings(cfg, log.sink());
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Dimension);
    }
}

TEST(CmdExport, StepBeyondStreamIsConfigError) {
    const fs::path d = adapt_dir("export_far");
    Captured log;
    try {
        cmd_export_embeddings(make_config(d, "export.steps = 0, 500\n" + std::string()), log.sink());
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Config);
    }
}

TEST(Gradcheck, DefaultSeedPassesAndNamesAreUnique) {
    const GradcheckReport report = run_gradcheck(GradcheckOptions{});
    EXPECT_TRUE(report.passed());
    std::set<std::string> names;
    for (const auto& c : report.checks) {
        EXPECT_TRUE(names.insert(c.name).second) << c.name;
        EXPECT_TRUE(c.passed) << c.name << " " << c.max_error << " " << c.detail;
    }
    for (const char* expected :
         {"losses.em_weight_grad.fd", "losses.ce_weight_grad.fd", "losses.factorization", "gap.cache.fd",
          "gap.factorized_identity", "gap.gradient_equivalence", "taylor.convergence", "engine.em.fd",
          "engine.ce.fd", "engine.gap_hard.fd", "engine.gap_soft.fd"}) {
        EXPECT_TRUE(names.contains(expected)) << expected;
    }
}

TEST(Gradcheck, InjectedSignFlipIsCaught) {
    GradcheckOptions opts;
    opts.inject_fault = true;
    const GradcheckReport report = run_gradcheck(opts);
    EXPECT_FALSE(report.passed());
    EXPECT_FALSE(report.find("losses.em_weight_grad.fd").passed);
    Captured log;
    EXPECT_NE(cmd_gradcheck(opts, log.sink()).exit_code, 0);
    EXPECT_EQ(cmd_gradcheck(GradcheckOptions{}, log.sink()).exit_code, 0);
}
