// Acceptance suite: one PASS/FAIL line per criterion.
// usage: acceptance <work-dir> <source-dir>
#include <gaptta/data.hpp>
#include <gaptta/engine.hpp>
#include <gaptta/error.hpp>
#include <gaptta/harness.hpp>
#include <gaptta/idx.hpp>
#include <gaptta/model.hpp>

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

using namespace gaptta;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
    bool passed = false;
    std::string detail;
};

std::string format(const char* fmt, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, fmt, args...);
    return buf;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void quiet(const std::string&) {}

struct Context {
    fs::path work;
    fs::path source;
    GradcheckReport gradcheck;
    double benchmark_seconds = 0.0;

    fs::path bench_dir() const { return work / "benchmark"; }
    RunConfig bench_config(const fs::path& out) const {
        RunConfig cfg = load_run_config(source / "configs" / "benchmark.cfg");
        cfg.out_dir = out;
        return cfg;
    }
    fs::path fresh(const std::string& name) const {
        const fs::path d = work / name;
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }
    fs::path with_checkpoint(const std::string& name) const {
        const fs::path d = fresh(name);
        const RunConfig cfg = bench_config(bench_dir());
        fs::copy_file(cfg.checkpoint_path(), d / cfg.checkpoint_path().filename());
        fs::copy_file(cfg.dataset_cache_path(), d / cfg.dataset_cache_path().filename());
        return d;
    }
};

std::string model_bytes(const ModelState& m) {
    std::ostringstream s;
    save_checkpoint(m, s);
    return s.str();
}

std::vector<StreamBatch> benchmark_stream(const Context& ctx) {
    const RunConfig cfg = ctx.bench_config(ctx.bench_dir());
    const Dataset test = load_dataset(cfg.dataset_cache_path());
    return make_stream(test, CorruptionSpec{CorruptionKind::GaussianNoise, 5, 1}, cfg.adapt.batch_size, 1);
}

Outcome criterion_weight_grads(const Context& ctx) {
    const CheckResult& em = ctx.gradcheck.find("losses.em_weight_grad.fd");
    const CheckResult& ce = ctx.gradcheck.find("losses.ce_weight_grad.fd");
    const double secs = em.seconds + ce.seconds;
    return {em.passed && ce.passed && em.tolerance == 1e-6 && ce.tolerance == 1e-6 && secs < 1.0,
            format("em max_rel=%.2e ce max_rel=%.2e (tol 1e-6, 100 instances each), %.3fs (< 1s)", em.max_error,
                   ce.max_error, secs)};
}

Outcome criterion_engine(const Context& ctx) {
    double worst = 0.0;
    double secs = 0.0;
    bool ok = true;
    std::size_t n = 0;
    for (const auto& c : ctx.gradcheck.checks) {
        if (c.name.rfind("engine.", 0) != 0) continue;
        ++n;
        ok = ok && c.passed && c.tolerance == 1e-5;
        worst = std::max(worst, c.max_error);
        secs += c.seconds;
    }
    ok = ok && n == 8 && secs < 30.0;
    return {ok, format("%zu objectives x 20 models, worst max_rel=%.2e (tol 1e-5), %.3fs (< 30s)", n, worst, secs)};
}

Outcome criterion_taylor(const Context& ctx) {
    const CheckResult& t = ctx.gradcheck.find("taylor.convergence");
    return {t.passed, t.detail + ", band [0.05, 0.2]"};
}

Outcome criterion_factorization(const Context& ctx) {
    const CheckResult& f = ctx.gradcheck.find("gap.factorized_identity");
    return {f.passed && f.tolerance == 1e-9, format("max_abs=%.2e (tol 1e-9), %s", f.max_error, f.detail.c_str())};
}

Outcome criterion_beta_zero(const Context& ctx) {
    const RunConfig cfg = ctx.bench_config(ctx.bench_dir());
    const auto stream = benchmark_stream(ctx);
    if (stream.size() < 50) return {false, format("stream has only %zu batches", stream.size())};
    ModelState plain = load_checkpoint(cfg.checkpoint_path());
    ModelState gap = plain;
    AdaptConfig a = cfg.adapt_for({Method::Tent, false});
    AdaptConfig b = cfg.adapt_for({Method::Tent, true});
    b.gap.beta = 0.0;
    StreamAdapter pa(plain, a);
    StreamAdapter pb(gap, b);
    std::size_t updates = 0;
    for (std::size_t t = 0; t < 50; ++t) {
        const StepResult ra = pa.adapt(stream[t].unlabeled(), t);
        const StepResult rb = pb.adapt(stream[t].unlabeled(), t);
        if (ra.predictions != rb.predictions) return {false, format("predictions differ at batch %zu", t)};
        if (model_bytes(plain) != model_bytes(gap)) return {false, format("parameters differ after batch %zu", t)};
        updates += ra.updated;
    }
    return {updates == 50, format("50 batches, %zu updates, serialized parameters identical after every step", updates)};
}

Outcome criterion_decay(const Context& ctx) {
    const RunConfig cfg = ctx.bench_config(ctx.bench_dir());
    const auto stream = benchmark_stream(ctx);
    ModelState model = load_checkpoint(cfg.checkpoint_path());
    const AdaptConfig a = cfg.adapt_for({Method::Tent, true});
    const double beta = a.gap.beta;
    const double gamma = a.gap.gamma;
    const auto last = static_cast<std::size_t>(gamma);
    StreamAdapter adapter(model, a);
    std::size_t exact = 0;
    double at_gamma = 0.0;
    for (std::size_t t = 0; t <= last; ++t) {
        const StepResult r = adapter.adapt(stream[t % stream.size()].unlabeled(), t);
        exact += r.beta_t == beta * std::exp(-static_cast<double>(t) / gamma);
        if (t == last) at_gamma = r.beta_t;
    }
    const double dev = std::abs(at_gamma - beta / std::exp(1.0));
    return {exact == last + 1 && dev <= 1e-12,
            format("%zu/%zu steps exact, |beta_t(gamma) - beta/e| = %.1e (beta=%g gamma=%g)", exact, last + 1, dev,
                   beta, gamma)};
}

std::map<std::string, double> row_means(const fs::path& summaries) {
    const json runs = json::parse(read_file(summaries));
    std::map<std::string, std::pair<double, int>> acc;
    for (const auto& r : runs) {
        if (r["status"] != "ok") continue;
        auto& [sum, n] = acc[r["row"].get<std::string>()];
        sum += 100.0 * r["accuracy"].get<double>();
        ++n;
    }
    std::map<std::string, double> means;
    for (const auto& [row, v] : acc) means[row] = v.first / v.second;
    return means;
}

Outcome criterion_benchmark(const Context& ctx) {
    const fs::path summaries = ctx.bench_dir() / "summaries.json";
    const json runs = json::parse(read_file(summaries));
    std::size_t seeds = 0;
    for (const auto& r : runs) seeds += r["row"] == "tent" && r["status"] == "ok";
    auto m = row_means(summaries);
    const bool ok = seeds == 5 && m["norm"] >= m["no-adapt"] + 5.0 && m["tent"] >= m["norm"] - 0.5 &&
                    m["tent+gap"] >= m["tent"] && m["pl+gap"] >= m["pl"] && ctx.benchmark_seconds < 120.0;
    return {ok, format("no-adapt %.3f norm %.3f tent %.3f tent+gap %.3f pl %.3f pl+gap %.3f (%zu seeds), %.1fs",
                       m["no-adapt"], m["norm"], m["tent"], m["tent+gap"], m["pl"], m["pl+gap"], seeds,
                       ctx.benchmark_seconds)};
}

bool all_cells_finite(const fs::path& csv, std::size_t first_value_column, std::size_t& rows) {
    std::istringstream in(read_file(csv));
    std::string line;
    std::getline(in, line);
    rows = 0;
    while (std::getline(in, line)) {
        const auto cells = split_list(line);
        for (std::size_t c = first_value_column; c < cells.size(); ++c) {
            try {
                if (!std::isfinite(std::stod(cells[c]))) return false;
            } catch (const std::exception&) {
                return false;
            }
        }
        ++rows;
    }
    return rows > 0;
}

Outcome criterion_ablation(const Context& ctx) {
    const fs::path d = ctx.with_checkpoint("ablation");
    RunConfig cfg = ctx.bench_config(d);
    cfg.methods = {{Method::Tent, false}};
    cfg.ablations = true;
    cfg.ablation_methods = {Method::Tent, Method::PseudoLabel};
    cfg.jobs = 1;
    if (cmd_adapt(cfg, quiet).exit_code != 0) return {false, "adapt reported failed runs"};
    std::size_t wrows = 0, lrows = 0;
    const bool finite = all_cells_finite(d / "ablation_weighting.csv", 1, wrows) &&
                        all_cells_finite(d / "ablation_loss_choice.csv", 2, lrows);
    const json timing = json::parse(read_file(d / "ablation_timing.json"));
    bool faster = true;
    std::string times;
    for (const char* m : {"tent", "pl"}) {
        const double hard = timing[std::string(m) + "+gap_hard"].get<double>();
        const double soft = timing[std::string(m) + "+gap_soft"].get<double>();
        faster = faster && hard <= soft;
        times += format(" %s hard %.3fs soft %.3fs;", m, hard, soft);
    }
    return {finite && wrows == 6 && lrows == 4 && faster,
            format("weighting rows %zu, loss grid rows %zu, finite=%d;", wrows, lrows, finite) + times};
}

Outcome criterion_idx(const Context& ctx) {
    const fs::path dir = ctx.source / "tests" / "fixtures";
    std::string detail;
    bool ok = true;
    try {
        const IdxArray a = read_idx_file(dir / "idx_genuine.idx");
        ok = a.type == IdxType::UnsignedByte && a.dims == std::vector<std::uint32_t>{2, 3, 3} && a.values[17] == 170;
        detail = format("genuine 00 00 08 03 -> %zu values;", a.count());
    } catch (const Error& e) {
        return {false, std::string("genuine header rejected: ") + e.what()};
    }
    std::vector<ErrorKind> kinds;
    for (const char* name : {"idx_bad_magic.idx", "idx_truncated.idx", "idx_bad_type.idx"}) {
        try {
            read_idx_file(dir / name);
            return {false, std::string(name) + " was accepted"};
        } catch (const Error& e) {
            kinds.push_back(e.kind());
            detail += format(" %s -> %s;", name, to_string(e.kind()));
        }
    }
    ok = ok && kinds[0] != kinds[1] && kinds[1] != kinds[2] && kinds[0] != kinds[2];
    return {ok, detail};
}

Outcome criterion_determinism(const Context& ctx) {
    // Same grids again, the main one on several workers.
    const fs::path d = ctx.with_checkpoint("rerun");
    RunConfig cfg = ctx.bench_config(d);
    cfg.jobs = 4;
    cmd_adapt(cfg, quiet);
    const fs::path a = ctx.with_checkpoint("rerun_ablation");
    RunConfig acfg = ctx.bench_config(a);
    acfg.methods = {{Method::Tent, false}};
    acfg.ablations = true;
    acfg.ablation_methods = {Method::Tent, Method::PseudoLabel};
    cmd_adapt(acfg, quiet);

    std::size_t compared = 0;
    for (const char* f : {"metrics.csv", "results.csv"}) {
        if (read_file(ctx.bench_dir() / f) != read_file(d / f)) return {false, std::string(f) + " differs"};
        ++compared;
    }
    for (const char* f : {"metrics.csv", "results.csv", "ablation_weighting.csv", "ablation_loss_choice.csv"}) {
        const std::string first = read_file(ctx.work / "ablation" / f);
        if (first.empty() || first != read_file(a / f)) return {false, std::string("ablation ") + f + " differs"};
        ++compared;
    }
    return {true, format("%zu CSV files byte-identical across reruns (jobs 1 vs 4)", compared)};
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 3) {
        std::fprintf(stderr, "usage: acceptance <work-dir> <source-dir>\n");
        return 2;
    }
    Context ctx;
    ctx.work = argv[1];
    ctx.source = argv[2];
    fs::create_directories(ctx.work);

    try {
        ctx.gradcheck = run_gradcheck(GradcheckOptions{});
        const fs::path bench = ctx.fresh("benchmark");
        const auto start = std::chrono::steady_clock::now();
        RunConfig cfg = ctx.bench_config(bench);
        cfg.jobs = 1;
        cmd_pretrain(cfg, quiet);
        cmd_adapt(cfg, quiet);
        ctx.benchmark_seconds = seconds_since(start);
    } catch (const std::exception& e) {
        std::printf("setup failed: %s\n", e.what());
        return 1;
    }

    const std::vector<std::function<Outcome(const Context&)>> criteria{
        criterion_weight_grads, criterion_engine,   criterion_taylor,   criterion_factorization,
        criterion_beta_zero,    criterion_decay,    criterion_benchmark, criterion_ablation,
        criterion_idx,          criterion_determinism};
    int failed = 0;
    // ctest hides passing output; keep a copy next to the run artifacts.
    std::ofstream report(ctx.work / "acceptance_report.txt");
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i](ctx);
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failed += !o.passed;
        const std::string line =
            format("criterion %zu: %s  ", i + 1, o.passed ? "PASS" : "FAIL") + o.detail;
        std::printf("%s\n", line.c_str());
        std::fflush(stdout);
        report << line << '\n';
    }
    std::printf("%d of %zu criteria failed\n", failed, criteria.size());
    report << failed << " of " << criteria.size() << " criteria failed\n";
    return failed == 0 ? 0 : 1;
}
