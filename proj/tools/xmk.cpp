// xmk: phantom-scale MR/US keypoint matching pipeline.
//
// Settings are resolved in this order, later entries winning:
//   built-in defaults < $XMK_OUT (output root only) < --config file < flags.

#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "xmk/error.hpp"
#include "xmk/parallel.hpp"
#include "xmk/pipeline.hpp"
#include "xmk/version.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 2, kMissing = 3, kRuntime = 4 };

struct Flags {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;
    bool force = false;
    bool verbose = false;
};

std::string default_out() {
    const char* env = std::getenv("XMK_OUT");
    return env && *env ? env : "out";
}

void add_common(CLI::App& app, Flags& f) {
    app.add_option("--config", f.config, "TOML or JSON config file (a stage's run.json also works)")
        ->default_str("none: built-in defaults")
        ->check(CLI::ExistingFile);
    app.add_option("--out", f.out, "Output root; stages write to <out>/<stage>/")
        ->default_str("config `out`, else $XMK_OUT, else \"out\"");
    app.add_option("--seed", f.seed, "Global seed; re-derives phantom and training seeds not set in the config")
        ->default_str("1");
    app.add_option("--jobs", f.jobs, "Maximum worker threads")->default_str("1")->check(CLI::PositiveNumber);
    app.add_flag("--force", f.force, "Recompute and overwrite outputs made with a different configuration")
        ->default_str("false");
    app.add_flag("-v,--verbose", f.verbose, "Debug logging")->default_str("false");
}

xmk::RunConfig resolve(const Flags& f, const std::vector<std::string>& sections) {
    xmk::RunConfig cfg;
    cfg.out = default_out();
    if (!f.config.empty()) {
        const bool env_out = std::getenv("XMK_OUT") && *std::getenv("XMK_OUT");
        const auto env = cfg.out;
        cfg = xmk::load_config(f.config);
        xmk::require_sections(cfg, sections);
        // The file's `out` wins over the environment only when it sets one.
        if (env_out && cfg.out == xmk::RunConfig{}.out) cfg.out = env;
    }
    if (!f.out.empty()) cfg.out = f.out;
    if (f.seed) cfg.set_seed(*f.seed);
    if (f.jobs) cfg.jobs = *f.jobs;
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Phantom-scale MR/US keypoint descriptor pipeline", "xmk"};
    app.set_version_flag("--version", xmk::kVersion);
    app.require_subcommand(1);
    app.footer(
        "Precedence: built-in defaults < $XMK_OUT < --config < flags.\n"
        "Exit codes: 0 success, 2 config error, 3 missing artifact, 4 runtime failure.");

    Flags flags;
    add_common(app, flags);

    std::string us_path;
    int slice = -1;
    std::string matches_dir;

    const std::vector<std::string> upto_dataset{"phantom", "synthesis", "detection", "dataset"};
    const std::vector<std::string> upto_train{"phantom", "synthesis", "detection", "dataset", "train"};
    const std::vector<std::string> all = xmk::kConfigSections;

    struct Sub {
        CLI::App* app;
        std::vector<std::string> sections;
        std::function<void(const xmk::StageContext&)> run;
    };
    std::vector<Sub> subs;
    auto sub = [&](const std::string& name, const std::string& help, std::vector<std::string> sections,
                   std::function<void(const xmk::StageContext&)> run) {
        auto* s = app.add_subcommand(name, help);
        add_common(*s, flags);
        subs.push_back({s, std::move(sections), std::move(run)});
        return s;
    };

    sub("phantom", "Generate the label volume and T1/T2/FLAIR renderings", {"phantom"}, xmk::run_phantom);
    sub("synth", "Synthesize the ultrasound-like variant set", {"phantom", "synthesis"}, xmk::run_synth);
    sub("build-dataset", "Detect consensus keypoints and cut training patches", upto_dataset,
        xmk::run_build_dataset);
    sub("train", "Train the descriptor network", upto_train, xmk::run_train);
    auto* match = sub("match", "Match MR slices against a US volume", all,
                      [&](const xmk::StageContext& c) { xmk::run_match(c, us_path, slice); });
    match->add_option("--us", us_path, "US volume (MVOL)")
        ->default_str("first test volume")
        ->check(CLI::ExistingFile);
    match->add_option("--slice", slice, "Match only this slice")->default_str("every evaluation slice");
    auto* eval = sub("eval", "Score the trained model, a random-weight baseline and held-out repeatability", all,
                     [&](const xmk::StageContext& c) { xmk::run_eval(c, matches_dir); });
    eval->add_option("--matches", matches_dir, "Score these match JSON files instead of running the model")
        ->default_str("none")
        ->check(CLI::ExistingDirectory);
    sub("retrieve", "Recover MR slice positions from US match counts", all, xmk::run_retrieve);
    sub("ablate", "Retrain on modality subsets and score each", all, xmk::run_ablate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    spdlog::set_level(flags.verbose ? spdlog::level::debug : spdlog::level::info);
    std::string command = "xmk";
    for (int i = 1; i < argc; ++i) command += std::string(" ") + argv[i];

    try {
        for (const auto& s : subs) {
            if (!s.app->parsed()) continue;
            xmk::StageContext ctx{resolve(flags, s.sections), flags.force, command};
            xmk::max_workers() = ctx.cfg.jobs;
            s.run(ctx);
        }
    } catch (const xmk::ConfigError& e) {
        spdlog::error("config error: {}", e.what());
        return kConfig;
    } catch (const xmk::MissingArtifact& e) {
        spdlog::error("missing artifact: {}", e.what());
        return kMissing;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kRuntime;
    }
    return kOk;
}
