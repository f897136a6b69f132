#include <gaptta/gaptta.h>

#include <gaptta/error.hpp>
#include <gaptta/harness.hpp>

#include <algorithm>
#include <cstring>
#include <memory>
#include <string>

struct gaptta_model {
    gaptta::ModelState state;
};

struct gaptta_cache {
    gaptta::PrototypeGradCache cache;
};

struct gaptta_session {
    gaptta_model* model = nullptr;
    std::unique_ptr<gaptta::StreamAdapter> adapter;
    std::size_t t = 0;
};

namespace {

thread_local std::string last_error;

gaptta_status status_of(gaptta::ErrorKind kind) {
    using gaptta::ErrorKind;
    switch (kind) {
        case ErrorKind::InvalidArgument: return GAPTTA_ERR_INVALID_ARGUMENT;
        case ErrorKind::Shape: return GAPTTA_ERR_SHAPE;
        case ErrorKind::NonFinite: return GAPTTA_ERR_NON_FINITE;
        case ErrorKind::Format: return GAPTTA_ERR_FORMAT;
        case ErrorKind::Version: return GAPTTA_ERR_VERSION;
        case ErrorKind::Truncated: return GAPTTA_ERR_TRUNCATED;
        case ErrorKind::Length: return GAPTTA_ERR_LENGTH;
        case ErrorKind::Unsupported: return GAPTTA_ERR_UNSUPPORTED;
        case ErrorKind::Io: return GAPTTA_ERR_IO;
        case ErrorKind::Config: return GAPTTA_ERR_CONFIG;
        case ErrorKind::Dimension: return GAPTTA_ERR_DIMENSION;
    }
    return GAPTTA_ERR_INTERNAL;
}

template <typename F>
gaptta_status guarded(F&& body) {
    try {
        last_error.clear();
        return body();
    } catch (const gaptta::Error& e) {
        last_error = e.what();
        return status_of(e.kind());
    } catch (const std::exception& e) {
        last_error = e.what();
        return GAPTTA_ERR_INTERNAL;
    } catch (...) {
        last_error = "unknown error";
        return GAPTTA_ERR_INTERNAL;
    }
}

void need(const void* p, const char* what) {
    gaptta::require(p != nullptr, gaptta::ErrorKind::InvalidArgument, std::string(what) + " must not be null");
}

gaptta::Matrix copy_rows(const double* inputs, std::size_t rows, std::size_t cols) {
    need(inputs, "inputs");
    gaptta::Matrix m(rows, cols);
    std::memcpy(m.values().data(), inputs, rows * cols * sizeof(double));
    return m;
}

gaptta::LineSink make_sink(gaptta_line_fn fn, void* user) {
    return [fn, user](const std::string& line) {
        if (fn) fn(line.c_str(), user);
    };
}

enum class Command { Pretrain, Adapt, Export };

gaptta::RunConfig command_config(const char* config_path, const char* out_dir, int has_seed, std::uint64_t seed,
                                 Command cmd) {
    need(config_path, "config path");
    gaptta::RunConfig cfg = gaptta::load_run_config(config_path);
    cfg.out_dir = gaptta::resolve_out_dir(out_dir ? std::optional<std::string>(out_dir) : std::nullopt);
    if (has_seed) {
        switch (cmd) {
            case Command::Pretrain:
                cfg.pretrain.seed = seed;
                cfg.model_seed = seed;
                break;
            case Command::Adapt: cfg.seeds = {seed}; break;
            case Command::Export: cfg.exporting.seed = seed; break;
        }
    }
    return cfg;
}

gaptta_status exit_status(const gaptta::CommandResult& r) {
    if (r.exit_code == 0) return GAPTTA_OK;
    last_error = "command reported failures";
    return GAPTTA_ERR_RUN_FAILED;
}

}  // namespace

extern "C" {

const char* gaptta_version(void) { return "1.0.0"; }

const char* gaptta_last_error(void) { return last_error.c_str(); }

const char* gaptta_status_name(gaptta_status status) {
    switch (status) {
        case GAPTTA_OK: return "ok";
        case GAPTTA_ERR_INVALID_ARGUMENT: return "invalid-argument";
        case GAPTTA_ERR_SHAPE: return "shape";
        case GAPTTA_ERR_NON_FINITE: return "non-finite";
        case GAPTTA_ERR_FORMAT: return "format";
        case GAPTTA_ERR_VERSION: return "version";
        case GAPTTA_ERR_TRUNCATED: return "truncated";
        case GAPTTA_ERR_LENGTH: return "length";
        case GAPTTA_ERR_UNSUPPORTED: return "unsupported";
        case GAPTTA_ERR_IO: return "io";
        case GAPTTA_ERR_CONFIG: return "config";
        case GAPTTA_ERR_DIMENSION: return "dimension";
        case GAPTTA_ERR_RUN_FAILED: return "run-failed";
        case GAPTTA_ERR_INTERNAL: return "internal";
    }
    return "unknown";
}

gaptta_status gaptta_model_load(const char* path, gaptta_model** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "out");
        *out = new gaptta_model{gaptta::load_checkpoint(std::filesystem::path(path))};
        return GAPTTA_OK;
    });
}

gaptta_status gaptta_model_save(const gaptta_model* model, const char* path) {
    return guarded([&] {
        need(model, "model");
        need(path, "path");
        gaptta::save_checkpoint(model->state, std::filesystem::path(path));
        return GAPTTA_OK;
    });
}

gaptta_status gaptta_model_clone(const gaptta_model* model, gaptta_model** out) {
    return guarded([&] {
        need(model, "model");
        need(out, "out");
        *out = new gaptta_model{model->state};
        return GAPTTA_OK;
    });
}

void gaptta_model_free(gaptta_model* model) { delete model; }

gaptta_status gaptta_model_dims(const gaptta_model* model, size_t* input_dim, size_t* embed_dim, size_t* classes) {
    return guarded([&] {
        need(model, "model");
        if (input_dim) *input_dim = model->state.input_dim();
        if (embed_dim) *embed_dim = model->state.embed_dim();
        if (classes) *classes = model->state.classes();
        return GAPTTA_OK;
    });
}

gaptta_status gaptta_model_embed(const gaptta_model* model, const double* inputs, size_t rows, int batch_stats,
                                 double* embeddings) {
    return guarded([&] {
        need(model, "model");
        need(embeddings, "embeddings");
        const auto x = copy_rows(inputs, rows, model->state.input_dim());
        const auto z = gaptta::forward_features(model->state, x,
                                                batch_stats ? gaptta::NormMode::BatchStats : gaptta::NormMode::RunningStats);
        std::memcpy(embeddings, z.values().data(), z.values().size_bytes());
        return GAPTTA_OK;
    });
}

gaptta_status gaptta_model_predict(const gaptta_model* model, const double* inputs, size_t rows, int batch_stats,
                                   int32_t* labels) {
    return guarded([&] {
        need(model, "model");
        need(labels, "labels");
        const auto x = copy_rows(inputs, rows, model->state.input_dim());
        const auto z = gaptta::forward_features(model->state, x,
                                                batch_stats ? gaptta::NormMode::BatchStats : gaptta::NormMode::RunningStats);
        const auto logits = gaptta::classify(model->state, z);
        for (std::size_t i = 0; i < rows; ++i) labels[i] = static_cast<int32_t>(gaptta::argmax(logits.row(i)));
        return GAPTTA_OK;
    });
}

gaptta_status gaptta_cache_build(const gaptta_model* model, const char* loss, const char* mode, gaptta_cache** out) {
    return guarded([&] {
        need(model, "model");
        need(out, "out");
        const auto l = gaptta::parse_loss_choice(loss ? loss : "em");
        const auto m = gaptta::parse_label_mode(mode ? mode : "hard");
        *out = new gaptta_cache{gaptta::build_prototype_cache(model->state.classifier, l, m)};
        return GAPTTA_OK;
    });
}

void gaptta_cache_free(gaptta_cache* cache) { delete cache; }

void gaptta_adapt_options_default(gaptta_adapt_options* options) {
    if (!options) return;
    const gaptta::AdaptConfig d;
    options->method = "tent";
    options->gap_enabled = 0;
    options->beta = d.gap.beta;
    options->gamma = d.gap.gamma;
    options->gap_mode = "hard";
    options->proto_loss = "em";
    options->data_loss = "em";
    options->lr = d.lr;
    options->momentum = d.momentum;
    options->eata_margin_factor = d.eata_margin_factor;
}

gaptta_status gaptta_session_create(gaptta_model* model, const gaptta_adapt_options* options,
                                    const gaptta_cache* cache, gaptta_session** out) {
    return guarded([&] {
        need(model, "model");
        need(options, "options");
        need(out, "out");
        gaptta::AdaptConfig cfg;
        cfg.method = gaptta::parse_method(options->method ? options->method : "tent");
        cfg.gap_enabled = options->gap_enabled != 0;
        cfg.gap.beta = options->beta;
        cfg.gap.gamma = options->gamma;
        cfg.gap.mode = gaptta::parse_label_mode(options->gap_mode ? options->gap_mode : "hard");
        cfg.gap.proto_loss = gaptta::parse_loss_choice(options->proto_loss ? options->proto_loss : "em");
        cfg.gap.data_loss = gaptta::parse_loss_choice(options->data_loss ? options->data_loss : "em");
        cfg.lr = options->lr;
        cfg.momentum = options->momentum;
        cfg.eata_margin_factor = options->eata_margin_factor;
        cfg.validate();
        auto session = std::make_unique<gaptta_session>();
        session->model = model;
        session->adapter = std::make_unique<gaptta::StreamAdapter>(model->state, cfg, cache ? &cache->cache : nullptr);
        *out = session.release();
        return GAPTTA_OK;
    });
}

void gaptta_session_free(gaptta_session* session) { delete session; }

gaptta_status gaptta_session_step(gaptta_session* session, const double* inputs, size_t rows, int32_t* predictions,
                                  double* tta_loss, double* gap_loss, double* beta_t) {
    return guarded([&] {
        need(session, "session");
        const auto x = copy_rows(inputs, rows, session->model->state.input_dim());
        const auto step = session->adapter->adapt(gaptta::UnlabeledBatch{x, session->t}, session->t);
        ++session->t;
        if (predictions) std::copy(step.predictions.begin(), step.predictions.end(), predictions);
        if (tta_loss) *tta_loss = step.loss.tta;
        if (gap_loss) *gap_loss = step.loss.gap;
        if (beta_t) *beta_t = step.beta_t;
        return GAPTTA_OK;
    });
}

gaptta_status gaptta_cmd_pretrain(const char* config_path, const char* out_dir, int has_seed, uint64_t seed,
                                  gaptta_line_fn sink, void* user) {
    return guarded([&] {
        const auto cfg = command_config(config_path, out_dir, has_seed, seed, Command::Pretrain);
        return exit_status(gaptta::cmd_pretrain(cfg, make_sink(sink, user)));
    });
}

gaptta_status gaptta_cmd_adapt(const char* config_path, const char* out_dir, int has_seed, uint64_t seed,
                               size_t jobs, gaptta_line_fn sink, void* user) {
    return guarded([&] {
        auto cfg = command_config(config_path, out_dir, has_seed, seed, Command::Adapt);
        cfg.jobs = jobs == 0 ? 1 : jobs;
        return exit_status(gaptta::cmd_adapt(cfg, make_sink(sink, user)));
    });
}

gaptta_status gaptta_cmd_export_embeddings(const char* config_path, const char* out_dir, int has_seed,
                                           uint64_t seed, gaptta_line_fn sink, void* user) {
    return guarded([&] {
        const auto cfg = command_config(config_path, out_dir, has_seed, seed, Command::Export);
        return exit_status(gaptta::cmd_export_embeddings(cfg, make_sink(sink, user)));
    });
}

gaptta_status gaptta_cmd_gradcheck(int has_seed, uint64_t seed, int inject_fault, gaptta_line_fn sink, void* user) {
    return guarded([&] {
        gaptta::GradcheckOptions opts;
        if (has_seed) opts.seed = seed;
        opts.inject_fault = inject_fault != 0;
        return exit_status(gaptta::cmd_gradcheck(opts, make_sink(sink, user)));
    });
}

}  // extern "C"
