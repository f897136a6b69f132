// gaptta command-line front end. Talks to the library only through the C API.
//
// Exit codes: 0 success, 1 error (bad config, I/O, shape ...), 2 usage,
// 3 a command ran but reported failures (failed grid cells, gradcheck breach).

#include <gaptta/gaptta.h>

#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>

namespace {

void print_line(const char* line, void*) {
    std::fputs(line, stdout);
    std::fputc('\n', stdout);
    std::fflush(stdout);
}

int report(gaptta_status status) {
    if (status == GAPTTA_OK) return 0;
    std::fprintf(stderr, "gaptta: %s error: %s\n", gaptta_status_name(status), gaptta_last_error());
    return status == GAPTTA_ERR_RUN_FAILED ? 3 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Test-time adaptation with the GAP regularizer", "gaptta"};
    app.require_subcommand(1);
    app.set_version_flag("--version", gaptta_version());

    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 1;
    bool inject_fault = false;

    auto add_common = [&](CLI::App* sub, bool needs_config) {
        auto* opt = sub->add_option("--config", config, "key = value run configuration");
        if (needs_config) opt->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out, "output directory (default: $GAPTTA_OUT_DIR, then .)");
        sub->add_option("--seed", seed, "override the configured seed(s)");
    };

    auto* pretrain = app.add_subcommand("pretrain", "train the source model and write the checkpoint");
    add_common(pretrain, true);
    auto* adapt = app.add_subcommand("adapt", "run the method x corruption x seed grid");
    add_common(adapt, true);
    adapt->add_option("--jobs", jobs, "parallel grid cells")->check(CLI::PositiveNumber);
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference and identity verification suite");
    gradcheck->add_option("--seed", seed, "seed of the random instances");
    gradcheck->add_flag("--inject-fault", inject_fault, "flip the sign of the EM weight gradient under test");
    auto* export_cmd = app.add_subcommand("export-embeddings", "write 2-D embeddings during adaptation");
    add_common(export_cmd, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    const char* out_dir = out.empty() ? nullptr : out.c_str();
    const int has_seed = seed.has_value() ? 1 : 0;
    const std::uint64_t seed_value = seed.value_or(0);

    if (*pretrain) {
        return report(gaptta_cmd_pretrain(config.c_str(), out_dir, has_seed, seed_value, print_line, nullptr));
    }
    if (*adapt) {
        return report(gaptta_cmd_adapt(config.c_str(), out_dir, has_seed, seed_value, jobs, print_line, nullptr));
    }
    if (*gradcheck) {
        return report(gaptta_cmd_gradcheck(has_seed, seed_value, inject_fault ? 1 : 0, print_line, nullptr));
    }
    return report(
        gaptta_cmd_export_embeddings(config.c_str(), out_dir, has_seed, seed_value, print_line, nullptr));
}
