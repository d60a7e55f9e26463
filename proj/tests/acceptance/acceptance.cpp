// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   xmk_acceptance [--work DIR] [--only 1,6,...] [-v]
//
// Criteria 6 to 11 train networks on the default phantom and take roughly an
// hour on one CPU core; the network is the quarter-width variant of the
// default architecture (see configs/desk.toml).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "oracles.hpp"
#include "xmk/detection.hpp"
#include "xmk/evaluation.hpp"
#include "xmk/imaging.hpp"
#include "xmk/matcher.hpp"
#include "xmk/model.hpp"
#include "xmk/pipeline.hpp"

using namespace xmk;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

DescriptorMat random_columns(int dim, int n, std::mt19937_64& rng, bool unit = true) {
    std::normal_distribution<float> g;
    DescriptorMat m(dim, n);
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < dim; ++i) m(i, j) = g(rng);
        if (unit) m.col(j).normalize();
    }
    return m;
}

Keypoint kp(double x, double y, float response = 1.0f) {
    Keypoint k;
    k.x = static_cast<float>(x);
    k.y = static_cast<float>(y);
    k.response = response;
    return k;
}

// 1. Triplet loss examples and gradient check.
Outcome triplet_suite() {
    const auto t0 = Clock::now();
    const std::vector<float> a{1, 0}, p{0, 1}, n{-1, 0};
    const bool coincide = triplet_loss(a, a, a, 1.0) == 1.0;
    const std::vector<float> far{-1, 0};  // |a - n|^2 = 4 >= 1
    const bool beyond = triplet_loss(a, a, far, 1.0) == 0.0;
    const bool hand = triplet_loss(a, p, n, 1.0) == 0.0;

    ArchSpec arch;
    arch.patch_size = 16;
    arch.widths = {4, 4, 8};
    arch.strides = {1, 2, 2};
    arch.descriptor_dim = 8;
    double worst = 0.0;
    std::mt19937_64 rng(41);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 5; ++trial) {
        DescriptorNetT<double> net(arch);
        net.init(100 + trial);
        const int batch = 6;
        std::vector<double> an(static_cast<std::size_t>(batch) * 16 * 16), po(an.size());
        for (auto& v : an) v = g(rng);
        for (std::size_t i = 0; i < po.size(); ++i) po[i] = an[i] + 0.3 * g(rng);
        // With unit descriptors |a - n|^2 <= 4, so a margin of 4 keeps every hinge active.
        worst = std::max(worst, gradient_check(net, an, po, batch, 4.0, 50, 7 + trial));
    }
    const double secs = seconds_since(t0);
    return {coincide && beyond && hand && worst < 1e-3 && secs < 10.0,
            fmt::format("examples {}/{}/{}, gradient rel. error {:.2e} (< 1e-3), {:.2f} s (< 10 s)", coincide, beyond,
                        hand, worst, secs)};
}

// 2. Hard mining against exhaustive search.
Outcome mining_oracle() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(42);
    int agree = 0;
    for (int t = 0; t < 200; ++t) {
        const int b = 2 + static_cast<int>(rng() % 63);
        const int dim = 1 + static_cast<int>(rng() % 128);
        const auto an = random_columns(dim, b, rng);
        auto po = random_columns(dim, b, rng);
        if (t % 4 == 0 && b > 3) po.col(b - 1) = po.col(1);  // exact distance ties
        if (t % 4 == 1 && b > 3) po.col(2) = an.col(0);      // a near-certain hardest negative
        agree += mine_hard_negatives(an, po) == oracle::hardest_negatives(an, po);
    }
    const double secs = seconds_since(t0);
    return {agree == 200 && secs < 30.0, fmt::format("{}/200 batches equal the exhaustive argmin, {:.2f} s (< 30 s)", agree, secs)};
}

// 3. KNN against a dense long-double similarity matrix.
Outcome knn_oracle() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(43);
    int agree = 0, ties = 0;
    for (int t = 0; t < 100; ++t) {
        const bool full = t % 10 == 0;
        const int nq = full ? 1000 : 1 + static_cast<int>(rng() % 1000);
        const int ni = full ? 1500 : 2 + static_cast<int>(rng() % 1499);
        const int dim = std::array{8, 16, 32}[rng() % 3];
        auto q = random_columns(dim, nq, rng, false);
        auto idx = random_columns(dim, ni, rng, false);
        if (t % 2 == 0) {
            // Duplicated and power-of-two scaled index columns tie exactly in cosine.
            for (int r = 0; r < std::min(ni / 2, 20); ++r) {
                idx.col(ni - 1 - r) = idx.col(r) * (r % 2 ? 2.0f : 1.0f);
                if (r < nq) q.col(r) = idx.col(r) * 0.5f;
                ++ties;
            }
        }
        const int k = 1 + static_cast<int>(rng() % 3);
        const auto got = knn_cosine(q, idx, k);
        const auto want = oracle::dense_knn(q, idx, k);
        bool same = got.size() == want.size();
        for (std::size_t i = 0; same && i < got.size(); ++i) {
            same = got[i].size() == want[i].size();
            for (std::size_t j = 0; same && j < got[i].size(); ++j)
                same = got[i][j].id == want[i][j].first && std::abs(got[i][j].similarity - want[i][j].second) <= 1e-9;
        }
        agree += same;
    }
    const double secs = seconds_since(t0);
    return {agree == 100 && secs < 60.0,
            fmt::format("{}/100 sets equal the dense oracle ({} planted ties), {:.2f} s (< 60 s)", agree, ties, secs)};
}

// 4. DBSCAN and consensus voting against brute force.
Outcome clustering_oracle() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(44);
    int dbscan_ok = 0, consensus_ok = 0;
    for (int t = 0; t < 100; ++t) {
        const int n = 1 + static_cast<int>(rng() % 200);
        const double extent = 20.0 + static_cast<double>(rng() % 140);
        const bool lattice = t % 3 == 0;  // integer points put pairs exactly eps apart (3-4-5)
        std::uniform_real_distribution<double> u(0.0, extent);
        std::uniform_real_distribution<float> resp(0.0f, 1.0f);
        std::vector<Keypoint> pts;
        for (int i = 0; i < n; ++i) {
            const double x = lattice ? std::floor(u(rng)) : u(rng), y = lattice ? std::floor(u(rng)) : u(rng);
            pts.push_back(kp(x, y, t % 5 == 0 ? 1.0f : resp(rng)));  // every fifth set: all responses tie
        }
        const int min_samples = 1 + static_cast<int>(rng() % 4);
        const auto labels = dbscan_labels(pts, 5.0, min_samples);
        bool ok = oracle::dbscan_consistent(pts, 5.0, min_samples, labels);
        // Representatives in cluster-id order: highest response, lowest index on ties.
        std::vector<Keypoint> want;
        const int n_clusters = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
        for (int c = 0; c < n_clusters; ++c) {
            int best = -1;
            for (int j = 0; j < n; ++j)
                if (labels[j] == c && (best < 0 || pts[j].response > pts[best].response)) best = j;
            if (best >= 0) want.push_back(pts[best]);
        }
        ok = ok && dbscan_cluster(pts, 5.0, min_samples) == want;
        dbscan_ok += ok;

        // Consensus: anchors against random detections in p variants, votes counted directly.
        const int p = 1 + static_cast<int>(rng() % 28);
        const int min_votes = 1 + static_cast<int>(rng() % 4);
        std::vector<Keypoint> anchors(pts.begin(), pts.begin() + std::min(n, 60));
        std::vector<std::vector<Keypoint>> detections(static_cast<std::size_t>(p));
        std::vector<std::vector<DetectionHit>> hits;
        std::normal_distribution<double> jitter(0.0, 4.0);
        for (auto& det : detections) {
            for (const auto& a : anchors)
                if (rng() % 2) det.push_back(kp(a.x + jitter(rng), a.y + jitter(rng)));
            hits.push_back(proximity_hits(det, anchors, 5.0));
        }
        std::vector<Keypoint> kept;
        for (const auto& a : anchors) {
            int votes = 0;
            for (const auto& det : detections)
                votes += std::any_of(det.begin(), det.end(), [&](const Keypoint& d) { return oracle::dist(a, d) <= 5.0; });
            if (votes >= min_votes) kept.push_back(a);
        }
        consensus_ok += consensus_filter(anchors, hits, min_votes) == kept;
    }
    const double secs = seconds_since(t0);
    return {dbscan_ok == 100 && consensus_ok == 100 && secs < 30.0,
            fmt::format("DBSCAN {}/100, consensus {}/100 sets equal brute force, {:.2f} s (< 30 s)", dbscan_ok,
                        consensus_ok, secs)};
}

// 5. Shared-numerator identity and hull coverage on random match sets.
Outcome metric_identities() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(45);
    int ok = 0;
    double worst_id = 0.0, worst_area = 0.0;
    for (int t = 0; t < 500; ++t) {
        const int h = 64 + static_cast<int>(rng() % 129), w = 64 + static_cast<int>(rng() % 129);
        const GroundTruth gt =
            t % 2 ? GroundTruth::smooth_warp(h, w, 1, 1.0 + double(rng() % 6), rng()) : GroundTruth{};
        std::uniform_real_distribution<double> ux(0.0, w - 1.0), uy(0.0, h - 1.0), off(-8.0, 8.0);
        MatchSet ms;
        const int n_detected = 1 + static_cast<int>(rng() % 200);
        for (int i = 0; i < n_detected; ++i) ms.mr_keypoints.push_back(kp(ux(rng), uy(rng)));
        const int n_matches = static_cast<int>(rng() % (n_detected + 1));
        std::vector<std::array<double, 2>> correct_pts;
        int n_correct = 0;
        for (int i = 0; i < n_matches; ++i) {
            const auto& m = ms.mr_keypoints[static_cast<std::size_t>(i)];
            const auto target = gt.map(m.x, m.y, 0);
            ms.us_keypoints.push_back(kp(target[0] + off(rng), target[1] + off(rng)));
            ms.matches.push_back({i, i, 0.9});
            const auto& u = ms.us_keypoints.back();
            // Oracle correctness straight from the definition.
            if (std::hypot(u.x - target[0], u.y - target[1]) <= 4.0) {
                ++n_correct;
                correct_pts.push_back({m.x, m.y});
            }
        }
        const auto s = score_matches(ms, gt, n_detected, h, w);
        const double id = std::abs(s.precision_pct * s.n_matches - s.matching_score_pct * n_detected);
        const double area = std::abs(s.area_pct - 100.0 * oracle::hull_area(correct_pts) / ((h - 1.0) * (w - 1.0)));
        worst_id = std::max(worst_id, id);
        worst_area = std::max(worst_area, area);
        ok += s.n_correct == n_correct && id <= 1e-9 && area <= 1e-6;
    }
    const double secs = seconds_since(t0);
    return {ok == 500 && secs < 30.0,
            fmt::format("{}/500 instances, max |Prec*MP - MSc*n| {:.1e}, max area gap {:.1e}, {:.2f} s (< 30 s)", ok,
                        worst_id, worst_area, secs)};
}

// Phantom-scale experiments -------------------------------------------------

RunConfig desk_config() {
    RunConfig cfg;
    cfg.set_seed(cfg.seed);
    cfg.train.arch.widths = {8, 8, 16, 16, 32, 32};
    cfg.validate();
    return cfg;
}

struct EndToEnd {
    bool ran = false;
    Experiment ex;
    Model model;
    std::vector<Volume> tests;
    std::vector<int> slices;
    EvalReport trained, random;
    double seconds = 0.0;
};

EndToEnd run_end_to_end(const RunConfig& cfg) {
    EndToEnd e;
    const auto t0 = Clock::now();
    e.ex = prepare_experiment(cfg);
    std::printf("  default phantom: p = %zu, %zu anchors, %zu patches\n", e.ex.training_variants.p(),
                e.ex.data.n_anchors(), e.ex.data.records.size());
    auto res = train(e.ex.data, cfg.train.config, cfg.train.arch);
    std::printf("  trained %d epochs, loss %.4f -> %.4f\n", cfg.train.config.epochs, res.loss_history.front(),
                res.loss_history.back());
    e.model = std::move(res.model);
    e.tests = make_test_volumes(cfg, e.ex.phantom);
    e.slices = evaluation_slices(e.ex.data);
    const auto& mr = e.ex.all_variants.reference;
    e.trained = evaluate_volumes(e.model, mr, e.tests, e.slices, cfg.detection, cfg.match, {}, cfg.eval.area_mode);
    e.random = evaluate_volumes(random_model(cfg, e.model.norm_stats), mr, e.tests, e.slices, cfg.detection, cfg.match,
                                {}, cfg.eval.area_mode);
    e.seconds = seconds_since(t0);
    e.ran = true;
    std::fflush(stdout);
    return e;
}

Outcome end_to_end_matching(const EndToEnd& e) {
    const double gap = e.trained.precision_pct - e.random.precision_pct;
    return {e.trained.precision_pct >= 70.0 && e.trained.matched_points >= 20.0 && gap >= 25.0 && e.seconds <= 1800.0,
            fmt::format("Prec {:.2f}% (>= 70), MP {:.2f} (>= 20), MSc {:.2f}%, Area {:.2f}%; random weights Prec {:.2f}% "
                        "(gap {:.2f} pp >= 25); {} slices x {} volumes, {:.0f} s (<= 1800 s)",
                        e.trained.precision_pct, e.trained.matched_points, e.trained.matching_score_pct,
                        e.trained.area_pct, e.random.precision_pct, gap, e.slices.size(), e.tests.size(), e.seconds)};
}

Outcome per_slice_stability(const EndToEnd& e) {
    const auto& d = e.trained.precision_spread;
    return {d.mean_abs_deviation <= 15.0,
            fmt::format("per-slice precision MAD {:.2f} pp (<= 15), std {:.2f} pp, over {} non-empty slice scores",
                        d.mean_abs_deviation, d.std_dev, e.trained.n_slices - e.trained.n_empty)};
}

Outcome slice_retrieval_check(const RunConfig& cfg, const EndToEnd& e) {
    const auto t0 = Clock::now();
    const auto& mr = e.ex.all_variants.reference;
    const auto& us = e.tests.front();
    const auto targets = pick_targets(e.slices, cfg.eval.retrieval_targets, cfg.eval.retrieval_seed);
    const auto us_slices = describe_volume(us, e.model, cfg.detection, cfg.match.m_us_cap, "US");
    int within = 0;
    double err = 0.0;
    std::string picks;
    for (int z : targets) {
        const auto target = detect_and_describe(get_slice(mr, z, "MR"), e.model, cfg.detection, cfg.match.n_mr, "MR");
        const auto r = slice_retrieval(target, z, us_slices, cfg.match, mr.spacing_mm()[2]);
        within += std::abs(r.best_index - z) <= 2;
        err += r.error_mm;
        picks += fmt::format(" {}->{}", z, r.best_index);
    }
    const double secs = seconds_since(t0);
    const int n = static_cast<int>(targets.size());
    return {n == 10 && within >= 8 && secs < 600.0,
            fmt::format("{}/{} targets within 2 slices (>= 8/10), mean error {:.2f} mm,{}; {:.0f} s (< 600 s)", within, n,
                        n ? err / n : 0.0, picks, secs)};
}

Outcome holdout_repeatability(RunConfig cfg) {
    const auto t0 = Clock::now();
    cfg.dataset.held_out_modes = 12;
    const auto ex = prepare_experiment(cfg);
    std::printf("  held out %zu of %zu variants; training on %zu anchors\n", ex.held_out.size(), ex.all_variants.p(),
                ex.data.n_anchors());
    const auto res = train(ex.data, cfg.train.config, cfg.train.arch);
    std::vector<Volume> held;
    for (int i : ex.held_out) held.push_back(ex.all_variants.variants[static_cast<std::size_t>(i)].volume);
    const int b = repeatability_baseline(ex.all_variants, ex.held_out, cfg.eval.test_combo);
    const auto rep = mode_holdout_repeatability(res.model, ex.all_variants.reference,
                                                ex.all_variants.variants[static_cast<std::size_t>(b)].volume, held,
                                                evaluation_slices(ex.data), cfg.detection, cfg.match,
                                                cfg.eval.tolerance_px);
    const auto [lo, hi] = std::minmax_element(rep.per_variant_pct.begin(), rep.per_variant_pct.end());
    return {rep.mean_pct >= 50.0,
            fmt::format("{:.2f}% of {} baseline matches repeated on 12 held-out modes (>= 50), per mode {:.1f}..{:.1f}%; "
                        "baseline {}, {:.0f} s",
                        rep.mean_pct, rep.baseline_matches, *lo, *hi,
                        ex.all_variants.variants[static_cast<std::size_t>(b)].name, seconds_since(t0))};
}

Outcome ablation_trend(RunConfig cfg) {
    const auto t0 = Clock::now();
    int monotone_seeds = 0;
    std::string rows_text;
    for (std::uint64_t seed : {1, 2, 3}) {
        cfg.phantom.seed = seed;
        const auto ph = generate_phantom(cfg.phantom);
        const auto rows = run_ablation(cfg, ph);
        bool mono = true;
        std::string line = fmt::format(" seed {}:", seed);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto& r = rows[i].report;
            line += fmt::format(" {} MSc {:.2f} MP {:.2f};", rows[i].label, r.matching_score_pct, r.matched_points);
            if (i > 0) {
                const auto& prev = rows[i - 1].report;
                mono = mono && r.matching_score_pct >= prev.matching_score_pct && r.matched_points >= prev.matched_points;
            }
        }
        std::printf(" %s %s\n", line.c_str(), mono ? "monotone" : "not monotone");
        std::fflush(stdout);
        monotone_seeds += mono;
        rows_text += line;
    }
    return {monotone_seeds >= 2, fmt::format("monotone in {}/3 phantom seeds (>= 2), {:.0f} s", monotone_seeds,
                                             seconds_since(t0))};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) return "<missing>";
    return {std::istreambuf_iterator<char>(in), {}};
}

Outcome reproducibility(const fs::path& work) {
    const auto t0 = Clock::now();
    const fs::path root = work / "repro";
    fs::remove_all(root);
    fs::create_directories(root);
    // Default phantom and variants, shortened training.
    std::ofstream(root / "config.toml") << "[phantom]\n[synthesis]\n[detection]\n[dataset]\nheld_out_modes = 4\n"
                                           "[train]\nepochs = 3\nwidths = [8, 8, 16, 16, 32, 32]\n[match]\n[eval]\n";
    const std::vector<std::string> stages{"phantom", "synth", "build-dataset", "train", "eval"};
    for (const char* run : {"a", "b"})
        for (const auto& s : stages) {
            const auto cmd = fmt::format("env -u XMK_OUT '{}' {} --config '{}' --out '{}' > '{}' 2>&1", XMK_CLI_PATH, s,
                                         (root / "config.toml").string(), (root / run).string(),
                                         (root / fmt::format("{}_{}.log", run, s)).string());
            if (std::system(cmd.c_str()) != 0) return {false, fmt::format("run {} failed at `{}`", run, s)};
        }
    const std::vector<std::string> files{"phantom/manifest.json", "synth/manifest.json",   "dataset/manifest.json",
                                         "dataset/patches.bin",   "dataset/split.json",    "train/loss_history.json",
                                         "train/model.ckpt",      "eval/report.json",      "eval/report_random.json",
                                         "eval/per_slice.csv",    "eval/repeatability.json"};
    std::vector<std::string> differing;
    for (const auto& f : files)
        if (slurp(root / "a" / f) != slurp(root / "b" / f) || slurp(root / "a" / f) == "<missing>") differing.push_back(f);
    std::string diff;
    for (const auto& f : differing) diff += " " + f;
    return {differing.empty(), fmt::format("{} artifacts compared across two runs, {} differ{}; {:.0f} s", files.size(),
                                           differing.size(), diff, seconds_since(t0))};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    fs::path work = fs::temp_directory_path() / "xmk_acceptance";
    std::string only;
    bool verbose = false;
    app.add_option("--work", work, "Scratch directory");
    app.add_option("--only", only, "Comma-separated criterion numbers (default: all)");
    app.add_flag("-v,--verbose", verbose, "Log pipeline progress");
    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(verbose ? spdlog::level::info : spdlog::level::warn);
    fs::create_directories(work);

    std::set<int> selected;
    {
        std::stringstream ss(only);
        for (std::string tok; std::getline(ss, tok, ',');)
            if (!tok.empty()) selected.insert(std::stoi(tok));
    }
    auto wanted = [&](int c) { return selected.empty() || selected.count(c) > 0; };

    const auto cfg = desk_config();
    EndToEnd e2e;
    auto need_e2e = [&] {
        if (!e2e.ran) e2e = run_end_to_end(cfg);
        return std::cref(e2e);
    };

    const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
        {1, triplet_suite},
        {2, mining_oracle},
        {3, knn_oracle},
        {4, clustering_oracle},
        {5, metric_identities},
        {6, [&] { return end_to_end_matching(need_e2e()); }},
        {7, [&] { return ablation_trend(cfg); }},
        {8, [&] { return holdout_repeatability(cfg); }},
        {9, [&] { return per_slice_stability(need_e2e()); }},
        {10, [&] { return slice_retrieval_check(cfg, need_e2e()); }},
        {11, [&] { return reproducibility(work); }},
    };
    const char* names[] = {"",
                           "triplet loss suite",
                           "hard-mining oracle",
                           "KNN exactness",
                           "DBSCAN/consensus oracles",
                           "metric identities",
                           "end-to-end phantom matching",
                           "modality-ablation trend",
                           "texture-invariance holdout",
                           "per-slice stability",
                           "slice retrieval",
                           "reproducibility"};

    int failed = 0, run = 0;
    for (const auto& [id, fn] : criteria) {
        if (!wanted(id)) continue;
        ++run;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& ex) {
            o = {false, std::string("exception: ") + ex.what()};
        }
        failed += !o.pass;
        std::printf("%s  %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, names[id], o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d/%d criteria passed\n", run - failed, run);
    return failed ? 1 : 0;
}
