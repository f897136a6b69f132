#include <gaptta/harness.hpp>

#include <gaptta/container.hpp>
#include <gaptta/error.hpp>
#include <gaptta/idx.hpp>

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

namespace gaptta {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string fixed(double value, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, value);
    return buf;
}

std::string exact(double value) { return format_double(value); }

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write '" + path.string() + "'");
    out << text;
    require(static_cast<bool>(out), ErrorKind::Io, "write failed for '" + path.string() + "'");
}

std::vector<std::uint64_t> parse_uint_list(const KeyValueConfig& kv, std::string_view key,
                                           std::vector<std::uint64_t> fallback) {
    if (!kv.has(key)) return fallback;
    const auto items = kv.get_list(key, {});
    std::vector<std::uint64_t> out;
    for (const auto& item : items) {
        KeyValueConfig one = KeyValueConfig::parse("v = " + item, kv.source());
        out.push_back(one.get_uint("v", 0));
    }
    return out;
}

std::vector<std::size_t> parse_size_list(const std::string& text) {
    std::vector<std::size_t> out;
    for (const auto& item : split_list(text)) {
        std::size_t v = 0;
        const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
        require(ec == std::errc() && ptr == item.data() + item.size(), ErrorKind::Config,
                "expected a list of non-negative integers, got '" + text + "'");
        out.push_back(v);
    }
    return out;
}

double sample_std(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

double mean_of(const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

// One (row, corruption, seed) run of the grid.
struct CellSpec {
    std::string group;
    std::string row;
    AdaptConfig adapt;
    GridCorruption corruption;
    std::uint64_t seed = 0;
};

struct CellOutcome {
    RunResult result;
    bool failed = false;
    std::string error;
    double seconds = 0.0;
};

std::vector<CellOutcome> run_cells(const ModelState& model, const Dataset& test,
                                   const std::vector<CellSpec>& cells, std::size_t jobs) {
    std::vector<CellOutcome> outcomes(cells.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            const CellSpec& cell = cells[i];
            CellOutcome& out = outcomes[i];
            try {
                const CorruptionSpec spec{cell.corruption.kind, cell.corruption.severity, cell.seed};
                const auto stream = make_stream(test, spec, cell.adapt.batch_size, cell.seed);
                ModelState local = model;
                const auto start = std::chrono::steady_clock::now();
                out.result = run_stream(local, stream, cell.adapt);
                out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            } catch (const std::exception& e) {
                out.failed = true;
                out.error = e.what();
            }
        }
    };
    const std::size_t n = std::max<std::size_t>(1, std::min(jobs, cells.size()));
    if (n == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t j = 0; j < n; ++j) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    return outcomes;
}

std::string cell_text(const ResultCell& c) {
    return c.failed ? std::string("failed") : fixed(c.mean, 1) + " ± " + fixed(c.std, 1);
}

std::string aligned(const std::vector<std::vector<std::string>>& grid) {
    // Column widths count code points so "±" lines up.
    auto width = [](const std::string& s) {
        std::size_t w = 0;
        for (unsigned char ch : s) w += (ch & 0xC0) != 0x80;
        return w;
    };
    std::vector<std::size_t> widths;
    for (const auto& row : grid) {
        widths.resize(std::max(widths.size(), row.size()), 0);
        for (std::size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], width(row[i]));
    }
    std::string out;
    for (std::size_t r = 0; r < grid.size(); ++r) {
        std::string line;
        for (std::size_t i = 0; i < grid[r].size(); ++i) {
            const std::string& s = grid[r][i];
            const std::string pad(widths[i] - width(s), ' ');
            line += i == 0 ? s + pad : "  " + pad + s;
        }
        out += line + "\n";
        if (r == 0) {
            std::size_t total = 0;
            for (std::size_t i = 0; i < widths.size(); ++i) total += widths[i] + (i == 0 ? 0 : 2);
            out += std::string(total, '-') + "\n";
        }
    }
    return out;
}

void write_metrics_csv(const fs::path& path, const std::vector<CellSpec>& cells,
                       const std::vector<CellOutcome>& outcomes) {
    std::ostringstream csv;
    csv << "group,row,corruption,seed,batch,batch_size,correct,accuracy,tta_loss,gap_loss,beta_t,updated\n";
    for (std::size_t i = 0; i < cells.size(); ++i) {
        for (const auto& rec : outcomes[i].result.records) {
            csv << cells[i].group << ',' << cells[i].row << ',' << cells[i].corruption.label() << ','
                << cells[i].seed << ',' << rec.batch_index << ',' << rec.batch_size << ',' << rec.correct << ','
                << exact(rec.accuracy) << ',' << exact(rec.tta_loss) << ',' << exact(rec.gap_loss) << ','
                << exact(rec.beta_t) << ',' << (rec.updated ? 1 : 0) << '\n';
        }
    }
    write_text(path, csv.str());
}

json summary_json(const CellSpec& cell, const CellOutcome& o) {
    json j;
    j["group"] = cell.group;
    j["row"] = cell.row;
    j["method"] = std::string(to_string(cell.adapt.method));
    j["gap"] = cell.adapt.gap_enabled;
    if (cell.adapt.gap_enabled) {
        j["gap_mode"] = std::string(to_string(cell.adapt.gap.mode));
        j["proto_loss"] = std::string(to_string(cell.adapt.gap.proto_loss));
        j["data_loss"] = std::string(to_string(cell.adapt.gap.data_loss));
    }
    j["corruption"] = std::string(to_string(cell.corruption.kind));
    j["severity"] = cell.corruption.severity;
    j["seed"] = cell.seed;
    j["status"] = o.failed ? "failed" : "ok";
    if (o.failed) {
        j["error"] = o.error;
    } else {
        j["batches"] = o.result.summary.batches;
        j["samples"] = o.result.summary.samples;
        j["correct"] = o.result.summary.correct;
        j["accuracy"] = o.result.summary.accuracy;
        j["empty"] = o.result.summary.empty;
    }
    return j;
}

std::string svg_scatter(const Matrix& z, std::span<const int> labels, const std::string& title,
                        double lo_x, double hi_x, double lo_y, double hi_y) {
    static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    const double size = 480.0;
    const double margin = 20.0;
    auto sx = [&](double x) { return margin + (x - lo_x) / std::max(hi_x - lo_x, 1e-12) * (size - 2 * margin); };
    auto sy = [&](double y) { return size - margin - (y - lo_y) / std::max(hi_y - lo_y, 1e-12) * (size - 2 * margin); };
    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size + 20 << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << margin << "\" y=\"" << size + 12 << "\" font-size=\"12\" font-family=\"sans-serif\">"
        << title << "</text>\n";
    for (std::size_t i = 0; i < z.rows(); ++i) {
        svg << "<circle cx=\"" << fixed(sx(z(i, 0)), 2) << "\" cy=\"" << fixed(sy(z(i, 1)), 2)
            << "\" r=\"1.6\" fill=\"" << palette[static_cast<std::size_t>(labels[i]) % 10] << "\"/>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

ModelState load_checked_model(const RunConfig& cfg) {
    const fs::path path = cfg.checkpoint_path();
    require(fs::exists(path), ErrorKind::Io, "checkpoint '" + path.string() + "' does not exist");
    return load_checkpoint(path);
}

Dataset load_test_set(const RunConfig& cfg, const ModelState& model) {
    Dataset test = fs::exists(cfg.dataset_cache_path()) ? load_dataset(cfg.dataset_cache_path())
                                                        : build_dataset(cfg).test;
    require(test.inputs.cols() == model.input_dim(), ErrorKind::Shape,
            "test set has " + std::to_string(test.inputs.cols()) + " features but the checkpoint expects " +
                std::to_string(model.input_dim()));
    for (int y : test.labels) {
        require(y >= 0 && static_cast<std::size_t>(y) < model.classes(), ErrorKind::Shape,
                "test label outside the checkpoint's classes");
    }
    return test;
}

}  // namespace

ResultTable make_result_table(std::vector<std::string> rows, std::vector<std::string> columns,
                              std::size_t seeds, std::span<const TableEntry> entries) {
    const std::size_t nc = columns.size();
    std::vector<double> acc(rows.size() * nc * seeds, 0.0);
    std::vector<char> failed(rows.size() * nc, 0);
    for (const auto& e : entries) {
        require(e.row < rows.size() && e.column < nc && e.seed < seeds, ErrorKind::InvalidArgument,
                "result table: entry outside the grid");
        if (e.failed) {
            failed[e.row * nc + e.column] = 1;
        } else {
            acc[(e.row * nc + e.column) * seeds + e.seed] = 100.0 * e.accuracy;
        }
    }

    ResultTable t;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::vector<ResultCell> row;
        bool any_failed = false;
        std::vector<double> per_seed_avg(seeds, 0.0);
        for (std::size_t c = 0; c < nc; ++c) {
            const auto first = acc.begin() + static_cast<std::ptrdiff_t>((r * nc + c) * seeds);
            const std::vector<double> xs(first, first + static_cast<std::ptrdiff_t>(seeds));
            ResultCell cell{mean_of(xs), sample_std(xs), seeds, failed[r * nc + c] != 0};
            any_failed = any_failed || cell.failed;
            for (std::size_t s = 0; s < seeds; ++s) per_seed_avg[s] += xs[s] / static_cast<double>(nc);
            row.push_back(cell);
        }
        ResultCell avg;
        for (const auto& cell : row) avg.mean += cell.mean;
        avg.mean /= static_cast<double>(row.size());
        avg.std = sample_std(per_seed_avg);
        avg.runs = seeds * nc;
        avg.failed = any_failed;
        t.cells.push_back(std::move(row));
        t.average.push_back(avg);
    }
    t.rows = std::move(rows);
    t.columns = std::move(columns);
    return t;
}

std::string MethodVariant::label() const {
    return std::string(to_string(method)) + (gap ? "+gap" : "");
}

MethodVariant parse_method_variant(std::string_view text) {
    MethodVariant v;
    constexpr std::string_view suffix = "+gap";
    if (text.size() > suffix.size() && text.substr(text.size() - suffix.size()) == suffix) {
        v.gap = true;
        text.remove_suffix(suffix.size());
    }
    v.method = parse_method(text);
    return v;
}

std::string GridCorruption::label() const {
    return std::string(to_string(kind)) + "@" + std::to_string(severity);
}

GridCorruption parse_grid_corruption(std::string_view text) {
    GridCorruption g;
    const auto colon = text.find(':');
    g.kind = parse_corruption_kind(trim(text.substr(0, colon)));
    if (colon != std::string_view::npos) {
        const std::string sev = trim(text.substr(colon + 1));
        int value = 0;
        const auto [ptr, ec] = std::from_chars(sev.data(), sev.data() + sev.size(), value);
        require(ec == std::errc() && ptr == sev.data() + sev.size(), ErrorKind::Config,
                "bad severity in '" + std::string(text) + "'");
        g.severity = value;
    }
    require(g.severity >= 1 && g.severity <= 5, ErrorKind::Config,
            "severity must be in 1..5 in '" + std::string(text) + "'");
    return g;
}

AdaptConfig RunConfig::adapt_for(const MethodVariant& variant) const {
    AdaptConfig a = adapt;
    a.method = variant.method;
    a.gap_enabled = variant.gap;
    for (const auto& [method, lr] : method_lr) {
        if (method == variant.method) a.lr = lr;
    }
    return a;
}

fs::path RunConfig::checkpoint_path() const {
    return checkpoint.is_absolute() ? checkpoint : out_dir / checkpoint;
}

fs::path RunConfig::dataset_cache_path() const {
    fs::path p = checkpoint_path();
    p += ".testset";
    return p;
}

void RunConfig::validate() const {
    if (!idx) data.validate();
    require(!checkpoint.empty(), ErrorKind::Config, "field 'checkpoint' is empty");
    require(!seeds.empty(), ErrorKind::Config, "field 'adapt.seeds' must list at least one seed");
    require(!methods.empty(), ErrorKind::Config, "field 'adapt.methods' must list at least one method");
    require(!corruptions.empty(), ErrorKind::Config, "field 'adapt.corruptions' must not be empty");
    require(pretrain.epochs >= 1, ErrorKind::Config, "field 'pretrain.epochs' must be >= 1");
    require(pretrain.batch_size >= 2, ErrorKind::Config, "field 'pretrain.batch_size' must be >= 2");
    require(jobs >= 1, ErrorKind::Config, "jobs must be >= 1");
    for (const auto& v : methods) adapt_for(v).validate();
    for (Method m : ablation_methods) {
        require(m == Method::Tent || m == Method::PseudoLabel || m == Method::EataLite, ErrorKind::Config,
                "ablation methods must be pl, tent or eata-lite");
    }
}

RunConfig parse_run_config(const KeyValueConfig& kv) {
    RunConfig cfg;
    cfg.checkpoint = kv.required("checkpoint");

    const std::string source = kv.get_string("data.source", "blobs");
    DatasetSpec& d = cfg.data;
    d.classes = kv.get_uint("data.classes", d.classes);
    d.input_dim = kv.get_uint("data.input_dim", d.input_dim);
    d.latent_dim = kv.get_uint("data.latent_dim", d.latent_dim);
    d.mean_scale = kv.get_double("data.mean_scale", d.mean_scale);
    d.spread = kv.get_double("data.spread", d.spread);
    d.scale_ratio = kv.get_double("data.scale_ratio", d.scale_ratio);
    d.warp = kv.get_bool("data.warp", d.warp);
    d.train_count = kv.get_uint("data.train_count", d.train_count);
    d.test_count = kv.get_uint("data.test_count", d.test_count);
    d.seed = kv.get_uint("data.seed", d.seed);
    if (source == "idx") {
        IdxSource idx;
        auto resolve = [&](const std::string& p) {
            fs::path path(p);
            return path.is_absolute() ? path : kv.base_dir() / path;
        };
        idx.images = resolve(kv.required("data.idx_images"));
        idx.labels = resolve(kv.required("data.idx_labels"));
        idx.classes = kv.get_uint("data.idx_classes", idx.classes);
        idx.limit = kv.get_uint("data.idx_limit", idx.limit);
        idx.test_fraction = kv.get_double("data.test_fraction", idx.test_fraction);
        require(idx.classes >= 2 && idx.classes <= 10, ErrorKind::Config, "field 'data.idx_classes' must be in 2..10");
        require(idx.test_fraction > 0.0 && idx.test_fraction < 1.0, ErrorKind::Config,
                "field 'data.test_fraction' must be in (0, 1)");
        d.classes = idx.classes;
        cfg.idx = idx;
    } else {
        require(source == "blobs", ErrorKind::Config, "field 'data.source' expects blobs|idx, got '" + source + "'");
    }

    Architecture& a = cfg.arch;
    if (const auto hidden = kv.optional("model.hidden")) {
        a.hidden = *hidden == "-" ? std::vector<std::size_t>{} : parse_size_list(*hidden);
    }
    a.embed_dim = kv.get_uint("model.embed_dim", a.embed_dim);
    a.bn_epsilon = kv.get_double("model.bn_epsilon", a.bn_epsilon);
    a.bn_momentum = kv.get_double("model.bn_momentum", a.bn_momentum);
    a.input_dim = d.input_dim;  // IDX inputs override this once loaded
    a.classes = d.classes;
    cfg.model_seed = kv.get_uint("model.seed", cfg.model_seed);

    PretrainConfig& p = cfg.pretrain;
    p.epochs = kv.get_uint("pretrain.epochs", p.epochs);
    p.lr = kv.get_double("pretrain.lr", p.lr);
    p.momentum = kv.get_double("pretrain.momentum", p.momentum);
    p.batch_size = kv.get_uint("pretrain.batch_size", p.batch_size);
    p.seed = kv.get_uint("pretrain.seed", p.seed);

    for (const auto& m : kv.get_list("adapt.methods", {"no-adapt", "norm", "pl", "pl+gap", "tent", "tent+gap",
                                                       "eata-lite", "eata-lite+gap"})) {
        cfg.methods.push_back(parse_method_variant(m));
    }
    for (const auto& c : kv.get_list("adapt.corruptions", {"gaussian-noise:5"})) {
        cfg.corruptions.push_back(parse_grid_corruption(c));
    }
    cfg.seeds = parse_uint_list(kv, "adapt.seeds", {1, 2, 3});

    AdaptConfig& ad = cfg.adapt;
    ad.lr = kv.get_double("adapt.lr", ad.lr);
    ad.momentum = kv.get_double("adapt.momentum", ad.momentum);
    ad.batch_size = kv.get_uint("adapt.batch_size", ad.batch_size);
    ad.eata_margin_factor = kv.get_double("adapt.eata_margin_factor", ad.eata_margin_factor);
    for (Method m : {Method::NoAdapt, Method::Norm, Method::PseudoLabel, Method::Tent, Method::EataLite}) {
        const std::string key = "adapt.lr." + std::string(to_string(m));
        if (kv.has(key)) cfg.method_lr.emplace_back(m, kv.get_double(key, ad.lr));
    }
    cfg.ablations = kv.get_bool("adapt.ablations", cfg.ablations);
    if (const auto list = kv.optional("adapt.ablation_methods")) {
        cfg.ablation_methods.clear();
        for (const auto& m : split_list(*list)) cfg.ablation_methods.push_back(parse_method(m));
    }

    GapConfig& g = ad.gap;
    g.beta = kv.get_double("gap.beta", g.beta);
    g.gamma = kv.get_double("gap.gamma", g.gamma);
    g.mode = parse_label_mode(kv.get_string("gap.mode", std::string(to_string(g.mode))));
    g.proto_loss = parse_loss_choice(kv.get_string("gap.proto_loss", std::string(to_string(g.proto_loss))));
    g.data_loss = parse_loss_choice(kv.get_string("gap.data_loss", std::string(to_string(g.data_loss))));

    ExportConfig& e = cfg.exporting;
    if (const auto steps = kv.optional("export.steps")) e.steps = parse_size_list(*steps);
    if (const auto methods = kv.optional("export.methods")) {
        e.methods.clear();
        for (const auto& m : split_list(*methods)) e.methods.push_back(parse_method_variant(m));
    }
    if (const auto c = kv.optional("export.corruption")) {
        e.corruption = *c == "none" ? std::nullopt : std::optional(parse_grid_corruption(*c));
    }
    e.seed = kv.get_uint("export.seed", e.seed);
    e.svg = kv.get_bool("export.svg", e.svg);

    kv.reject_unknown_keys();
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const fs::path& path) { return parse_run_config(KeyValueConfig::load(path)); }

fs::path resolve_out_dir(const std::optional<std::string>& flag) {
    if (flag && !flag->empty()) return *flag;
    if (const char* env = std::getenv("GAPTTA_OUT_DIR"); env && *env) return env;
    return fs::current_path();
}

DatasetSplit build_dataset(const RunConfig& cfg) {
    if (!cfg.idx) return make_dataset(cfg.data);
    const IdxSource& src = *cfg.idx;
    const IdxArray images = read_idx_file(src.images);
    const IdxArray labels = read_idx_file(src.labels);
    require(images.dims.size() >= 2, ErrorKind::Shape, "IDX images need at least two dimensions");
    require(labels.dims.size() == 1 && labels.dims[0] == images.dims[0], ErrorKind::Shape,
            "IDX labels must be one value per image");
    const std::size_t n = images.dims[0];
    const std::size_t width = images.count() / std::max<std::size_t>(n, 1);
    const double scale = images.type == IdxType::UnsignedByte ? 1.0 / 255.0 : 1.0;

    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < n; ++i) {
        const double y = labels.values[i];
        if (y >= 0 && y < static_cast<double>(src.classes)) keep.push_back(i);
        if (src.limit != 0 && keep.size() == src.limit) break;
    }
    SeededRng rng(mix_seed(cfg.data.seed, 0x1d));
    rng.shuffle(std::span<std::size_t>(keep));
    const auto n_test = static_cast<std::size_t>(std::llround(src.test_fraction * static_cast<double>(keep.size())));
    require(n_test >= 2 && keep.size() - n_test >= 2, ErrorKind::Shape, "IDX selection too small to split");

    auto take = [&](std::size_t begin, std::size_t end) {
        Dataset ds;
        ds.inputs = Matrix(end - begin, width);
        for (std::size_t r = begin; r < end; ++r) {
            const std::size_t i = keep[r];
            for (std::size_t c = 0; c < width; ++c) ds.inputs(r - begin, c) = images.values[i * width + c] * scale;
            ds.labels.push_back(static_cast<int>(labels.values[i]));
        }
        return ds;
    };
    DatasetSplit split;
    split.test = take(0, n_test);
    split.train = take(n_test, keep.size());
    return split;
}

std::string ResultTable::to_csv() const {
    std::ostringstream csv;
    csv << "method";
    for (const auto& c : columns) csv << ',' << c << "_mean," << c << "_std";
    csv << ",average_mean,average_std\n";
    auto put = [&](const ResultCell& cell) {
        if (cell.failed) {
            csv << ",failed,failed";
        } else {
            csv << ',' << fixed(cell.mean, 1) << ',' << fixed(cell.std, 1);
        }
    };
    for (std::size_t r = 0; r < rows.size(); ++r) {
        csv << rows[r];
        for (const auto& cell : cells[r]) put(cell);
        put(average[r]);
        csv << '\n';
    }
    return csv.str();
}

std::string ResultTable::to_text() const {
    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> header{"method"};
    header.insert(header.end(), columns.begin(), columns.end());
    header.push_back("average");
    grid.push_back(header);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::vector<std::string> line{rows[r]};
        for (const auto& cell : cells[r]) line.push_back(cell_text(cell));
        line.push_back(cell_text(average[r]));
        grid.push_back(line);
    }
    return aligned(grid);
}

CommandResult cmd_pretrain(const RunConfig& cfg, const LineSink& log) {
    fs::create_directories(cfg.out_dir);
    const DatasetSplit split = build_dataset(cfg);
    Architecture arch = cfg.arch;
    arch.input_dim = split.train.inputs.cols();
    ModelState model = make_model(arch, cfg.model_seed);
    const PretrainReport report = pretrain(model, split.train, split.test, cfg.pretrain);

    CommandResult res;
    const fs::path ckpt = cfg.checkpoint_path();
    if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
    save_checkpoint(model, ckpt);
    save_dataset(split.test, cfg.dataset_cache_path());
    res.files = {ckpt, cfg.dataset_cache_path()};

    json summary;
    summary["checkpoint"] = ckpt.string();
    summary["epochs"] = cfg.pretrain.epochs;
    summary["train_samples"] = split.train.size();
    summary["test_samples"] = split.test.size();
    summary["epoch_loss"] = report.epoch_loss;
    summary["clean_test_accuracy"] = report.clean_test_accuracy;
    const fs::path summary_path = cfg.out_dir / "pretrain_summary.json";
    write_text(summary_path, summary.dump(2) + "\n");
    res.files.push_back(summary_path);

    log("pretrain: epochs=" + std::to_string(cfg.pretrain.epochs) +
        " final_loss=" + exact(report.epoch_loss.back()) +
        " clean_test_accuracy=" + exact(report.clean_test_accuracy) + " checkpoint=" + ckpt.string());
    return res;
}

CommandResult cmd_adapt(const RunConfig& cfg, const LineSink& log) {
    fs::create_directories(cfg.out_dir);
    const ModelState model = load_checked_model(cfg);
    const Dataset test = load_test_set(cfg, model);

    // "+gap" rows sit directly under their base row; a missing base row is added
    // so every GAP row has its counterpart.
    std::vector<MethodVariant> rows;
    for (const auto& v : cfg.methods) {
        const bool seen = std::any_of(rows.begin(), rows.end(), [&](const MethodVariant& r) { return r.method == v.method; });
        if (seen) continue;
        rows.push_back({v.method, false});
        const bool want_gap = std::any_of(cfg.methods.begin(), cfg.methods.end(),
                                          [&](const MethodVariant& r) { return r.method == v.method && r.gap; });
        if (want_gap) rows.push_back({v.method, true});
    }

    std::vector<std::string> columns;
    for (const auto& c : cfg.corruptions) columns.push_back(c.label());

    std::vector<CellSpec> cells;
    auto add_cells = [&](const std::string& group, const std::string& row, const AdaptConfig& a) {
        for (const auto& c : cfg.corruptions) {
            for (std::uint64_t seed : cfg.seeds) {
                AdaptConfig local = a;
                local.seed = seed;
                cells.push_back({group, row, local, c, seed});
            }
        }
    };
    for (const auto& v : rows) add_cells("main", v.label(), cfg.adapt_for(v));

    if (cfg.ablations) {
        for (Method m : cfg.ablation_methods) {
            const MethodVariant base{m, false};
            add_cells("weighting", base.label(), cfg.adapt_for(base));
            // Hard and soft runs are queued back to back so their timings see
            // the same machine state.
            for (const auto& c : cfg.corruptions) {
                for (std::uint64_t seed : cfg.seeds) {
                    for (LabelMode mode : {LabelMode::Hard, LabelMode::Soft}) {
                        AdaptConfig a = cfg.adapt_for({m, true});
                        a.gap.mode = mode;
                        a.seed = seed;
                        cells.push_back({"weighting", base.label() + "+gap_" + std::string(to_string(mode)), a, c, seed});
                    }
                }
            }
            for (LossChoice data : {LossChoice::Entropy, LossChoice::CrossEntropy}) {
                for (LossChoice proto : {LossChoice::Entropy, LossChoice::CrossEntropy}) {
                    AdaptConfig a = cfg.adapt_for({m, true});
                    a.gap.mode = LabelMode::Hard;
                    a.gap.data_loss = data;
                    a.gap.proto_loss = proto;
                    add_cells("loss-choice", base.label() + "+gap data=" + std::string(to_string(data)) +
                                                 " proto=" + std::string(to_string(proto)), a);
                }
            }
        }
    }

    log("adapt: " + std::to_string(cells.size()) + " runs on " + std::to_string(cfg.jobs) + " job(s)");
    const auto outcomes = run_cells(model, test, cells, cfg.jobs);

    CommandResult res;
    std::size_t failures = 0;
    json summaries = json::array();
    for (std::size_t i = 0; i < cells.size(); ++i) {
        summaries.push_back(summary_json(cells[i], outcomes[i]));
        if (outcomes[i].failed) {
            ++failures;
            log("adapt: run failed [" + cells[i].row + " " + cells[i].corruption.label() + " seed " +
                std::to_string(cells[i].seed) + "]: " + outcomes[i].error);
        }
    }

    auto index_of = [](const std::vector<std::string>& xs, const std::string& x) {
        return static_cast<std::size_t>(std::find(xs.begin(), xs.end(), x) - xs.begin());
    };
    auto seed_index = [&](std::uint64_t s) {
        return static_cast<std::size_t>(std::find(cfg.seeds.begin(), cfg.seeds.end(), s) - cfg.seeds.begin());
    };
    auto table_for = [&](const std::string& group, const std::vector<std::string>& row_names) {
        std::vector<TableEntry> entries;
        for (std::size_t i = 0; i < cells.size(); ++i) {
            const std::size_t r = index_of(row_names, cells[i].row);
            if (cells[i].group != group || r == row_names.size()) continue;
            entries.push_back({r, index_of(columns, cells[i].corruption.label()), seed_index(cells[i].seed),
                               outcomes[i].result.summary.accuracy, outcomes[i].failed});
        }
        return make_result_table(row_names, columns, cfg.seeds.size(), entries);
    };

    std::vector<std::string> row_names;
    for (const auto& v : rows) row_names.push_back(v.label());
    const ResultTable table = table_for("main", row_names);

    const fs::path metrics = cfg.out_dir / "metrics.csv";
    const fs::path summaries_path = cfg.out_dir / "summaries.json";
    const fs::path results_csv = cfg.out_dir / "results.csv";
    const fs::path results_txt = cfg.out_dir / "results.txt";
    write_metrics_csv(metrics, cells, outcomes);
    write_text(summaries_path, summaries.dump(2) + "\n");
    write_text(results_csv, table.to_csv());
    write_text(results_txt, table.to_text());
    res.files = {metrics, summaries_path, results_csv, results_txt};
    log("Classification accuracy (%), mean ± std over " + std::to_string(cfg.seeds.size()) + " seed(s)");
    std::istringstream lines(table.to_text());
    for (std::string line; std::getline(lines, line);) log(line);

    if (cfg.ablations) {
        json timing = json::object();
        std::ostringstream weighting_csv;
        std::string weighting_txt;
        std::ostringstream loss_csv;
        std::string loss_txt;
        weighting_csv << "method";
        for (const auto& c : columns) weighting_csv << ',' << c << "_mean," << c << "_std";
        weighting_csv << ",average_mean,average_std\n";
        loss_csv << "method,data_loss,proto_em_mean,proto_em_std,proto_ce_mean,proto_ce_std\n";

        for (Method m : cfg.ablation_methods) {
            const std::string base(to_string(m));
            const std::vector<std::string> wrows{base, base + "+gap_hard", base + "+gap_soft"};
            const ResultTable wt = table_for("weighting", wrows);
            std::string body = wt.to_csv();
            weighting_csv << body.substr(body.find('\n') + 1);

            std::vector<std::vector<std::string>> grid{{"row"}};
            grid[0].insert(grid[0].end(), columns.begin(), columns.end());
            grid[0].push_back("average");
            grid[0].push_back("seconds");
            for (std::size_t r = 0; r < wrows.size(); ++r) {
                double seconds = 0.0;
                for (std::size_t i = 0; i < cells.size(); ++i) {
                    if (cells[i].group == "weighting" && cells[i].row == wrows[r]) seconds += outcomes[i].seconds;
                }
                timing[wrows[r]] = seconds;
                std::vector<std::string> line{wrows[r]};
                for (const auto& cell : wt.cells[r]) line.push_back(cell_text(cell));
                line.push_back(cell_text(wt.average[r]));
                line.push_back(fixed(seconds, 3));
                grid.push_back(line);
            }
            weighting_txt += aligned(grid) + "\n";

            // 2 x 2 grid of averages: rows data loss, columns prototype loss.
            std::vector<std::string> lrows;
            for (const char* data : {"em", "ce"}) {
                for (const char* proto : {"em", "ce"}) {
                    lrows.push_back(base + "+gap data=" + data + " proto=" + proto);
                }
            }
            const ResultTable lt = table_for("loss-choice", lrows);
            std::vector<std::vector<std::string>> lgrid{{base + "+gap", "proto em", "proto ce"}};
            for (std::size_t d = 0; d < 2; ++d) {
                const char* data = d == 0 ? "em" : "ce";
                loss_csv << base << ',' << data;
                std::vector<std::string> line{std::string("data ") + data};
                for (std::size_t p = 0; p < 2; ++p) {
                    const ResultCell& cell = lt.average[d * 2 + p];
                    if (cell.failed) {
                        loss_csv << ",failed,failed";
                    } else {
                        loss_csv << ',' << fixed(cell.mean, 1) << ',' << fixed(cell.std, 1);
                    }
                    line.push_back(cell_text(cell));
                }
                loss_csv << '\n';
                lgrid.push_back(line);
            }
            loss_txt += aligned(lgrid) + "\n";
        }

        const fs::path wcsv = cfg.out_dir / "ablation_weighting.csv";
        const fs::path wtxt = cfg.out_dir / "ablation_weighting.txt";
        const fs::path lcsv = cfg.out_dir / "ablation_loss_choice.csv";
        const fs::path ltxt = cfg.out_dir / "ablation_loss_choice.txt";
        const fs::path tjson = cfg.out_dir / "ablation_timing.json";
        write_text(wcsv, weighting_csv.str());
        write_text(wtxt, weighting_txt);
        write_text(lcsv, loss_csv.str());
        write_text(ltxt, loss_txt);
        write_text(tjson, timing.dump(2) + "\n");
        res.files.insert(res.files.end(), {wcsv, wtxt, lcsv, ltxt, tjson});
        log("Weighting ablation (average accuracy, adaptation seconds)");
        std::istringstream wl(weighting_txt);
        for (std::string line; std::getline(wl, line);) log(line);
        log("Loss-choice ablation (average accuracy)");
        std::istringstream ll(loss_txt);
        for (std::string line; std::getline(ll, line);) log(line);
    }

    if (failures > 0) {
        log("adapt: " + std::to_string(failures) + " run(s) failed");
        res.exit_code = 3;
    }
    return res;
}

CommandResult cmd_export_embeddings(const RunConfig& cfg, const LineSink& log) {
    fs::create_directories(cfg.out_dir);
    const ModelState model = load_checked_model(cfg);
    require(model.embed_dim() == 2, ErrorKind::Dimension,
            "export-embeddings needs a model with a 2-dimensional embedding, checkpoint has d = " +
                std::to_string(model.embed_dim()));
    const Dataset test = load_test_set(cfg, model);
    const ExportConfig& e = cfg.exporting;

    std::vector<std::size_t> steps = e.steps;
    std::sort(steps.begin(), steps.end());
    steps.erase(std::unique(steps.begin(), steps.end()), steps.end());
    require(!steps.empty(), ErrorKind::Config, "field 'export.steps' must not be empty");
    require(!e.methods.empty(), ErrorKind::Config, "field 'export.methods' must not be empty");

    std::optional<CorruptionSpec> spec;
    if (e.corruption) spec = CorruptionSpec{e.corruption->kind, e.corruption->severity, e.seed};
    const Matrix inputs = spec ? corrupt(test.inputs, *spec) : test.inputs;
    const auto stream = make_stream(test, spec, cfg.adapt.batch_size, e.seed);
    require(steps.back() <= stream.size(), ErrorKind::Config,
            "export step " + std::to_string(steps.back()) + " exceeds the stream length " +
                std::to_string(stream.size()));

    struct Snapshot {
        std::string method;
        std::size_t step;
        Matrix z;
        std::vector<int> pred;
    };
    std::vector<Snapshot> snaps;
    for (const auto& v : e.methods) {
        ModelState local = model;
        AdaptConfig a = cfg.adapt_for(v);
        a.seed = e.seed;
        StreamAdapter adapter(local, a);
        std::size_t t = 0;
        for (std::size_t s : steps) {
            for (; t < s; ++t) adapter.step(stream[t], t);
            // Embeddings as the deployed model would produce them now: stored
            // moments (refreshed on the last batch) and the adapted affine terms.
            Snapshot snap{v.label(), s, forward_features(local, inputs, NormMode::RunningStats), {}};
            const Matrix logits = classify(local, snap.z);
            for (std::size_t i = 0; i < logits.rows(); ++i) snap.pred.push_back(static_cast<int>(argmax(logits.row(i))));
            snaps.push_back(std::move(snap));
        }
    }

    CommandResult res;
    std::ostringstream csv;
    csv << "x,y,true,pred,step,method\n";
    double lo_x = 1e300, hi_x = -1e300, lo_y = 1e300, hi_y = -1e300;
    for (const auto& s : snaps) {
        for (std::size_t i = 0; i < s.z.rows(); ++i) {
            csv << exact(s.z(i, 0)) << ',' << exact(s.z(i, 1)) << ',' << test.labels[i] << ',' << s.pred[i] << ','
                << s.step << ',' << s.method << '\n';
            lo_x = std::min(lo_x, s.z(i, 0));
            hi_x = std::max(hi_x, s.z(i, 0));
            lo_y = std::min(lo_y, s.z(i, 1));
            hi_y = std::max(hi_y, s.z(i, 1));
        }
    }
    const fs::path csv_path = cfg.out_dir / "embeddings.csv";
    write_text(csv_path, csv.str());
    res.files.push_back(csv_path);
    if (e.svg) {
        for (const auto& s : snaps) {
            std::string name = s.method;
            std::replace(name.begin(), name.end(), '+', '_');
            const fs::path p = cfg.out_dir / ("embeddings_" + name + "_step" + std::to_string(s.step) + ".svg");
            write_text(p, svg_scatter(s.z, test.labels, s.method + " step " + std::to_string(s.step), lo_x, hi_x,
                                      lo_y, hi_y));
            res.files.push_back(p);
        }
    }
    log("export-embeddings: " + std::to_string(snaps.size()) + " snapshot(s) of " + std::to_string(test.size()) +
        " samples -> " + csv_path.string());
    return res;
}

}  // namespace gaptta
