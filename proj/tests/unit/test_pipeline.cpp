#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "support.hpp"
#include "xmk/error.hpp"
#include "xmk/pipeline.hpp"

using namespace xmk;
namespace fs = std::filesystem;

namespace {

// Small enough to run the whole CLI pipeline in seconds.
const char* kTinyToml = R"(
seed = 3

[phantom]
shape = [96, 96, 4]
n_structures = 30

[synthesis]
combos = ["T2", "T1+T2", "T1+T2+FLAIR"]
samples_per_combo = 2

[detection]
border_margin_px = 16

[dataset]
patch_size = 32
held_out_modes = 2

[train]
epochs = 2
batch_size = 32
widths = [4, 4, 8, 8]
strides = [1, 2, 1, 2]
descriptor_dim = 16

[match]

[eval]
n_test_volumes = 2
retrieval_targets = 2
ablation_rows = ["T2", "T1+T2"]
ablation_epochs = 1
)";

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run_cli(const std::string& args, const fs::path& log = {}) {
    std::string cmd = std::string("env -u XMK_OUT ") + XMK_CLI_PATH + " " + args;
    cmd += log.empty() ? " >/dev/null 2>&1" : " >" + log.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Config, DefaultsAndOverrides) {
    const auto cfg = parse_config("seed = 9\n[train]\nepochs = 3\n[phantom]\nseed = 4\n");
    EXPECT_EQ(cfg.seed, 9u);
    EXPECT_EQ(cfg.train.config.epochs, 3);
    EXPECT_EQ(cfg.train.config.seed, 9u);
    EXPECT_EQ(cfg.phantom.seed, 4u);
    EXPECT_EQ(cfg.train.config.learning_rate, 1e-3);
    EXPECT_EQ(cfg.train.config.batch_size, 256);
    EXPECT_EQ(cfg.synthesis.combos.size(), 7u);
    EXPECT_EQ(cfg.synthesis.options.samples_per_combo, 4);
    EXPECT_EQ(cfg.sections, (std::set<std::string>{"train", "phantom"}));
}

TEST(Config, SeedRederivesUnlessExplicit) {
    auto cfg = parse_config("[phantom]\nseed = 4\n");
    cfg.set_seed(11);
    EXPECT_EQ(cfg.phantom.seed, 4u);
    EXPECT_EQ(cfg.train.config.seed, 11u);
}

TEST(Config, UnknownKeysAreRejected) {
    EXPECT_THROW(parse_config("[train]\nepoch = 3\n"), ConfigError);
    EXPECT_THROW(parse_config("[trian]\n"), ConfigError);
    EXPECT_THROW(parse_config("bogus = 1\n"), ConfigError);
}

TEST(Config, BadValuesAreConfigErrors) {
    EXPECT_THROW(parse_config("[train]\nepochs = \"many\"\n"), ConfigError);
    EXPECT_THROW(parse_config("[train]\nbatch_size = 255\n"), ConfigError);
    EXPECT_THROW(parse_config("[synthesis]\ncombos = [\"T4\"]\n"), ConfigError);
    EXPECT_THROW(parse_config("[eval]\narea_mode = \"disc\"\n"), ConfigError);
    EXPECT_THROW(parse_config("[phantom\n"), ConfigError);
    EXPECT_THROW(parse_config("[dataset]\npatch_size = 200\n"), ConfigError);  // border margin too small
}

TEST(Config, JsonIsAccepted) {
    const auto cfg = parse_config(R"({"seed": 5, "match": {"min_similarity": 0.5}})");
    EXPECT_EQ(cfg.seed, 5u);
    EXPECT_EQ(cfg.match.min_similarity, 0.5);
    EXPECT_TRUE(cfg.sections.contains("match"));
}

TEST(Config, ResolvedJsonRoundTrips) {
    const auto cfg = parse_config(kTinyToml);
    const auto j = config_json(cfg);
    const auto again = parse_config(j.dump());
    EXPECT_EQ(config_json(again), j);
}

TEST(Config, MissingSectionIsNamed) {
    const auto cfg = parse_config("[phantom]\n");
    try {
        require_sections(cfg, {"phantom", "synthesis"});
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("[synthesis]"), std::string::npos);
    }
}

TEST(Config, ShippedFilesParse) {
    const auto def = load_config(std::filesystem::path(XMK_CONFIG_DIR) / "default.toml");
    RunConfig ref;
    ref.set_seed(ref.seed);
    EXPECT_EQ(config_json(def), config_json(ref));
    EXPECT_NO_THROW(require_sections(def, kConfigSections));
    const auto desk = load_config(std::filesystem::path(XMK_CONFIG_DIR) / "desk.toml");
    EXPECT_NO_THROW(require_sections(desk, kConfigSections));
    EXPECT_EQ(desk.train.arch.widths, (std::vector<int>{8, 8, 16, 16, 32, 32}));
    EXPECT_EQ(desk.dataset.held_out_modes, 12);
}

TEST(HeldOut, SortedDistinctAndSeeded) {
    const auto a = held_out_indices(28, 12, 7);
    EXPECT_EQ(a.size(), 12u);
    EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
    EXPECT_EQ(std::set<int>(a.begin(), a.end()).size(), 12u);
    EXPECT_EQ(a, held_out_indices(28, 12, 7));
    EXPECT_NE(a, held_out_indices(28, 12, 8));
    EXPECT_THROW(held_out_indices(4, 4, 1), ConfigError);
}

TEST(Cli, HelpListsEveryFlagWithDefaults) {
    TempDir dir;
    for (const std::string sub : {"", "train ", "match "}) {
        ASSERT_EQ(run_cli(sub + "--help", dir / "help.txt"), 0);
        const auto help = slurp(dir / "help.txt");
        for (const char* flag : {"--config", "--out", "--seed", "--jobs", "--force"}) {
            const auto pos = help.find(flag);
            ASSERT_NE(pos, std::string::npos) << flag;
            const auto line = help.substr(pos, help.find('\n', pos) - pos);
            EXPECT_NE(line.find('['), std::string::npos) << "no default shown: " << line;
        }
    }
}

TEST(Cli, ExitCodes) {
    TempDir dir;
    std::ofstream(dir / "partial.toml") << "[phantom]\nn_structures = 10\n";
    std::ofstream(dir / "bad.toml") << "[phantom]\nn_structure = 10\n";
    const auto out = (dir / "out").string();
    EXPECT_EQ(run_cli("synth --config " + (dir / "partial.toml").string() + " --out " + out, dir / "log"), 2);
    EXPECT_NE(slurp(dir / "log").find("[synthesis]"), std::string::npos);
    EXPECT_EQ(run_cli("phantom --config " + (dir / "bad.toml").string() + " --out " + out), 2);
    EXPECT_EQ(run_cli("train --out " + out), 3);
    EXPECT_EQ(run_cli("nonsense"), 2);
}

TEST(Cli, SynthDefaultsToTwentyEightVariants) {
    TempDir dir;
    std::ofstream(dir / "c.toml") << "[phantom]\nshape = [64, 64, 2]\nn_structures = 8\n[synthesis]\n";
    const auto args = "--config " + (dir / "c.toml").string() + " --out " + (dir / "out").string();
    ASSERT_EQ(run_cli("phantom " + args), 0);
    ASSERT_EQ(run_cli("synth " + args), 0);
    int n = 0;
    for (const auto& e : fs::directory_iterator(dir / "out" / "synth" / "variants")) n += e.path().extension() == ".mvol";
    EXPECT_EQ(n, 28);
    const auto manifest = nlohmann::json::parse(slurp(dir / "out" / "synth" / "manifest.json"));
    EXPECT_EQ(manifest.at("variants").size(), 28u);

    std::ofstream(dir / "t2.toml") << "[phantom]\nshape = [64, 64, 2]\nn_structures = 8\n[synthesis]\ncombos = [\"T2\"]\n";
    const auto args2 = "--config " + (dir / "t2.toml").string() + " --out " + (dir / "out2").string();
    ASSERT_EQ(run_cli("phantom " + args2), 0);
    ASSERT_EQ(run_cli("synth " + args2), 0);
    n = 0;
    for (const auto& e : fs::directory_iterator(dir / "out2" / "synth" / "variants")) n += e.path().extension() == ".mvol";
    EXPECT_EQ(n, 4);
}

TEST(Cli, FullPipelineIsReproducibleAndIdempotent) {
    TempDir dir;
    std::ofstream(dir / "tiny.toml") << kTinyToml;
    auto stages = [&](const fs::path& out) {
        const auto args = " --config " + (dir / "tiny.toml").string() + " --out " + out.string();
        for (const char* s : {"phantom", "synth", "build-dataset", "train", "match", "eval", "retrieve"})
            ASSERT_EQ(run_cli(std::string(s) + args, dir / "log"), 0) << s << "\n" << slurp(dir / "log");
    };
    stages(dir / "a");
    stages(dir / "b");
    for (const char* f : {"phantom/manifest.json", "synth/manifest.json", "dataset/manifest.json",
                          "train/loss_history.json", "train/model.ckpt", "eval/report.json", "eval/table.csv",
                          "eval/repeatability.json", "retrieve/retrieval.json"}) {
        ASSERT_TRUE(fs::exists(dir / "a" / f)) << f;
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
    }
    const auto report = nlohmann::json::parse(slurp(dir / "a" / "eval" / "report.json"));
    EXPECT_TRUE(report.contains("precision_pct"));
    EXPECT_TRUE(fs::exists(dir / "a" / "match" / "slice_001.png") || fs::exists(dir / "a" / "match" / "slice_002.png"));

    // run.json echoes the resolved config, including training defaults.
    const auto run = nlohmann::json::parse(slurp(dir / "a" / "train" / "run.json"));
    EXPECT_EQ(run.at("config").at("train").at("learning_rate"), 1e-3);
    EXPECT_TRUE(run.contains("versions"));

    // Same config: nothing recomputed. Different config: refused without --force.
    const auto before = fs::last_write_time(dir / "a" / "train" / "model.ckpt");
    const auto args = " --config " + (dir / "tiny.toml").string() + " --out " + (dir / "a").string();
    EXPECT_EQ(run_cli("train" + args), 0);
    EXPECT_EQ(fs::last_write_time(dir / "a" / "train" / "model.ckpt"), before);
    EXPECT_EQ(run_cli("phantom --seed 4" + args), 2);
    EXPECT_EQ(run_cli("phantom --seed 4 --force" + args), 0);
    EXPECT_EQ(run_cli("synth" + args), 2);  // upstream now stale for this config
    EXPECT_EQ(run_cli("synth --seed 4" + args), 2);  // phantom ok, synth outputs from seed 3

    // Replaying a run.json reproduces the train stage.
    EXPECT_EQ(run_cli("phantom --config " + (dir / "b" / "phantom" / "run.json").string() + " --out " +
                      (dir / "c").string()),
              0);
    EXPECT_EQ(slurp(dir / "c" / "phantom" / "manifest.json"), slurp(dir / "b" / "phantom" / "manifest.json"));

    // External match files produce a table row.
    const auto ext = dir / "ext";
    fs::create_directories(ext);
    for (const auto& e : fs::directory_iterator(dir / "b" / "match"))
        if (e.path().extension() == ".json" && e.path().filename() != "run.json") fs::copy(e.path(), ext / e.path().filename());
    ASSERT_EQ(run_cli("eval --matches " + ext.string() + args), 0);
    std::ifstream t(dir / "a" / "eval" / "external" / "table.csv");
    std::string header, row;
    std::getline(t, header);
    std::getline(t, row);
    EXPECT_EQ(header, "row,prec_pct,msc_pct,avg_mp,area_pct,n_slices");
    EXPECT_EQ(row.rfind("ext,", 0), 0u) << row;
}

TEST(Cli, AblationProducesOneRowPerSubset) {
    TempDir dir;
    std::ofstream(dir / "tiny.toml") << kTinyToml;
    ASSERT_EQ(run_cli("ablate --config " + (dir / "tiny.toml").string() + " --out " + (dir / "o").string(), dir / "log"), 0)
        << slurp(dir / "log");
    std::ifstream t(dir / "o" / "ablate" / "table.csv");
    std::string line;
    std::vector<std::string> rows;
    while (std::getline(t, line)) rows.push_back(line);
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[1].rfind("T2,", 0), 0u);
    EXPECT_EQ(rows[2].rfind("T1+T2,", 0), 0u);
}
