#include "xmk/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "xmk/error.hpp"
#include "xmk/rng.hpp"

namespace xmk {

namespace {

constexpr const char* kCheckpointFormat = "XMKCKPT1";

template <class M>
std::vector<int> mine(const M& a, const M& p) {
    const auto b = a.cols();
    if (b < 2) throw Error("hard-negative mining needs a batch of at least 2");
    if (p.cols() != b || p.rows() != a.rows()) throw Error("anchor and positive batches differ in shape");
    std::vector<int> neg(static_cast<std::size_t>(b));
    for (Eigen::Index k = 0; k < b; ++k) {
        double best = std::numeric_limits<double>::infinity();
        int arg = -1;
        for (Eigen::Index j = 0; j < b; ++j) {
            if (j == k) continue;
            double d = 0.0;
            for (Eigen::Index r = 0; r < a.rows(); ++r) {
                const double t = double(a(r, k)) - double(p(r, j));
                d += t * t;
            }
            if (d < best || arg < 0) {
                best = d;
                arg = static_cast<int>(j);
            }
        }
        neg[static_cast<std::size_t>(k)] = arg;
    }
    return neg;
}

template <class M>
double batch_loss(const M& a, const M& p, std::span<const int> neg, double margin, M* da, M* dp,
                  long* n_active = nullptr) {
    const auto b = a.cols();
    if (p.cols() != b || p.rows() != a.rows() || neg.size() != static_cast<std::size_t>(b))
        throw Error("triplet batch dimensions disagree");
    using S = typename M::Scalar;
    if (da) da->setZero(a.rows(), b);
    if (dp) dp->setZero(a.rows(), b);
    double total = 0.0;
    for (Eigen::Index k = 0; k < b; ++k) {
        const int n = neg[static_cast<std::size_t>(k)];
        if (n < 0 || n >= b || n == k) throw Error("invalid negative index");
        double dap = 0.0, dan = 0.0;
        for (Eigen::Index r = 0; r < a.rows(); ++r) {
            const double u = double(a(r, k)) - double(p(r, k));
            const double v = double(a(r, k)) - double(p(r, n));
            dap += u * u;
            dan += v * v;
        }
        const double term = dap - dan + margin;
        if (term <= 0.0) continue;
        total += term;
        if (n_active) ++*n_active;
        if (da) da->col(k) += S(2) * (p.col(n) - p.col(k));
        if (dp) {
            dp->col(k) -= S(2) * (a.col(k) - p.col(k));
            dp->col(n) += S(2) * (a.col(k) - p.col(n));
        }
    }
    return total;
}

nlohmann::ordered_json arch_json(const ArchSpec& a) {
    return {{"patch_size", a.patch_size}, {"widths", a.widths}, {"strides", a.strides},
            {"descriptor_dim", a.descriptor_dim}};
}

}  // namespace

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
    if (batch_size < 2 || batch_size % 2 != 0) throw ConfigError("batch_size must be even and >= 2");
    if (!(margin > 0.0)) throw ConfigError("margin must be > 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("Adam epsilon must be > 0");
}

double triplet_loss(std::span<const float> a, std::span<const float> p, std::span<const float> n, double margin) {
    if (a.size() != p.size() || a.size() != n.size()) throw Error("triplet_loss: dimension mismatch");
    double dap = 0.0, dan = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double u = double(a[i]) - p[i], v = double(a[i]) - n[i];
        dap += u * u;
        dan += v * v;
    }
    return std::max(0.0, dap - dan + margin);
}

std::vector<int> mine_hard_negatives(const DescriptorMat& anchors, const DescriptorMat& positives) {
    return mine(anchors, positives);
}

double batch_triplet_loss(const DescriptorMat& anchors, const DescriptorMat& positives, std::span<const int> negatives,
                          double margin, DescriptorMat* d_anchors, DescriptorMat* d_positives) {
    return batch_loss(anchors, positives, negatives, margin, d_anchors, d_positives);
}

DescriptorMat describe_patches(const DescriptorNet& net, std::span<const float> patches, int n) {
    constexpr int kBatch = 256;
    const auto sz = net.input_size();
    if (patches.size() != sz * static_cast<std::size_t>(n)) throw Error("describe_patches: wrong patch buffer size");
    DescriptorMat out(net.descriptor_dim(), n);
    for (int i = 0; i < n; i += kBatch) {
        const int m = std::min(kBatch, n - i);
        out.middleCols(i, m) = net.infer(patches.subspan(sz * i, sz * m), m);
    }
    return out;
}

TrainResult train(const TrainingSet& data, const TrainConfig& cfg, const ArchSpec& arch, const EpochCallback& on_epoch) {
    cfg.validate();
    if (arch.patch_size != data.patch_size)
        throw ConfigError("network patch_size " + std::to_string(arch.patch_size) + " differs from dataset patch size " +
                          std::to_string(data.patch_size));
    std::vector<int> usable;
    for (std::size_t a = 0; a < data.n_anchors(); ++a)
        if (!data.positive_records[a].empty()) usable.push_back(static_cast<int>(a));
    if (usable.size() < 2) throw Error("training needs at least two anchors with positives");

    TrainResult res;
    res.model.net = DescriptorNet(arch);
    res.model.net.init(derive_seed({cfg.seed, 1}));
    res.model.norm_stats = data.norm_stats;
    res.model.seed = cfg.seed;
    auto& net = res.model.net;

    int batch = cfg.batch_size;
    if (usable.size() < static_cast<std::size_t>(batch)) {
        spdlog::warn("dataset has {} anchors, fewer than one batch of {}; training on a single batch of {}",
                     usable.size(), batch, usable.size());
        batch = static_cast<int>(usable.size());
    }

    const auto np = net.parameters().size();
    const auto sz = net.input_size();
    DescriptorNet::Buffer grad(np);
    std::vector<double> m1(np, 0.0), m2(np, 0.0);
    std::vector<float> buf;
    std::mt19937_64 rng(derive_seed({cfg.seed, 2}));
    long step = 0;

    for (int e = 1; e <= cfg.epochs; ++e) {
        const auto t0 = std::chrono::steady_clock::now();
        auto order = usable;
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        long triplets = 0, active = 0;
        for (std::size_t s = 0; s < order.size(); s += batch) {
            const int b = static_cast<int>(std::min<std::size_t>(batch, order.size() - s));
            if (b < 2) continue;
            buf.resize(2 * static_cast<std::size_t>(b) * sz);
            for (int k = 0; k < b; ++k) {
                const auto a = static_cast<std::size_t>(order[s + k]);
                const auto& pos = data.positive_records[a];
                std::uniform_int_distribution<std::size_t> pick(0, pos.size() - 1);
                const auto pr = static_cast<std::size_t>(pos[pick(rng)]);
                data.fetch(static_cast<std::size_t>(data.anchor_record[a]), std::span(buf).subspan(k * sz, sz));
                data.fetch(pr, std::span(buf).subspan((b + k) * sz, sz));
            }
            const DescriptorMat out = net.forward(buf, 2 * b);
            const DescriptorMat A = out.leftCols(b), P = out.rightCols(b);
            const auto neg = mine_hard_negatives(A, P);
            DescriptorMat dA, dP;
            loss_sum += batch_loss(A, P, neg, cfg.margin, &dA, &dP, &active);
            triplets += b;

            DescriptorMat d(out.rows(), 2 * b);
            d.leftCols(b) = dA;
            d.rightCols(b) = dP;
            std::fill(grad.begin(), grad.end(), 0.0f);
            net.backward(d, grad);

            ++step;
            const double c1 = 1.0 - std::pow(cfg.beta1, double(step));
            const double c2 = 1.0 - std::pow(cfg.beta2, double(step));
            auto params = net.parameters();
            for (std::size_t i = 0; i < np; ++i) {
                const double g = grad[i];
                m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g;
                m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g * g;
                params[i] -= static_cast<float>(cfg.learning_rate * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + cfg.adam_eps));
            }
        }
        net.release();
        EpochStats st;
        st.epoch = e;
        st.mean_loss = triplets > 0 ? loss_sum / double(triplets) : 0.0;
        st.active_fraction = triplets > 0 ? double(active) / double(triplets) : 0.0;
        st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!std::isfinite(st.mean_loss)) throw Error("training diverged: non-finite loss in epoch " + std::to_string(e));
        res.loss_history.push_back(st.mean_loss);
        res.epochs.push_back(st);
        res.model.epoch = e;
        spdlog::info("epoch {:3d}  loss {:.4f}  active {:.3f}  {:.1f}s", e, st.mean_loss, st.active_fraction, st.seconds);
        if (on_epoch) on_epoch(st);
    }
    return res;
}

double gradient_check(const DescriptorNetT<double>& net0, std::span<const double> anchors,
                      std::span<const double> positives, int batch, double margin, int n_params,
                      std::uint64_t seed, double h) {
    using Net = DescriptorNetT<double>;
    using M = Net::Mat;
    const auto sz = net0.input_size();
    if (batch < 2) throw Error("gradient_check needs a batch of at least 2");
    if (anchors.size() != sz * batch || positives.size() != sz * batch)
        throw Error("gradient_check: wrong patch buffer size");
    std::vector<double> both(anchors.begin(), anchors.end());
    both.insert(both.end(), positives.begin(), positives.end());

    Net net = net0;
    const M out = net.forward(both, 2 * batch);
    const M A = out.leftCols(batch), P = out.rightCols(batch);
    const auto neg = mine(A, P);
    M dA, dP;
    batch_loss<M>(A, P, neg, margin, &dA, &dP);
    M d(out.rows(), 2 * batch);
    d.leftCols(batch) = dA;
    d.rightCols(batch) = dP;
    typename Net::Buffer grad(net.parameters().size(), 0.0);
    net.backward(d, grad);
    net.release();

    auto loss_at = [&](const Net& n) {
        const M o = n.infer(both, 2 * batch);
        const M a = o.leftCols(batch), p = o.rightCols(batch);
        return batch_loss<M>(a, p, neg, margin, nullptr, nullptr);
    };
    // A central difference across a ReLU kink is no derivative estimate, so
    // parameters whose +-h step flips any unit are replaced by fresh draws.
    const auto mask0 = net.relu_mask(both, 2 * batch);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, grad.size() - 1);
    double worst = 0.0;
    int checked = 0;
    for (int attempt = 0; checked < n_params; ++attempt) {
        if (attempt >= 20 * n_params) throw Error("gradient_check: too many perturbations cross a ReLU kink");
        const auto idx = pick(rng);
        const double orig = net.parameters()[idx];
        net.parameters()[idx] = orig + h;
        const double lp = loss_at(net);
        const bool smooth_p = net.relu_mask(both, 2 * batch) == mask0;
        net.parameters()[idx] = orig - h;
        const double lm = loss_at(net);
        const bool smooth_m = net.relu_mask(both, 2 * batch) == mask0;
        net.parameters()[idx] = orig;
        if (!smooth_p || !smooth_m) continue;
        const double fd = (lp - lm) / (2.0 * h);
        const double an = grad[idx];
        worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6}));
        ++checked;
    }
    return worst;
}

void save_checkpoint(const Model& m, const std::filesystem::path& path) {
    const auto& g = m.net.geometry();
    nlohmann::ordered_json h;
    h["format"] = kCheckpointFormat;
    h["arch"] = arch_json(m.net.arch());
    h["descriptor_dim"] = m.net.descriptor_dim();
    h["param_count"] = m.net.parameters().size();
    auto& layers = h["layers"] = nlohmann::ordered_json::array();
    for (const auto& l : g)
        layers.push_back({{"cin", l.cin}, {"cout", l.cout}, {"kernel", l.k}, {"stride", l.stride},
                          {"weight_offset", l.w_offset}, {"bias_offset", l.b_offset}});
    h["norm_stats"] = {{"mean", m.norm_stats.mean}, {"std", m.norm_stats.std},
                       {"n_patches", m.norm_stats.n_patches}, {"degenerate", m.norm_stats.degenerate}};
    h["seed"] = m.seed;
    h["epoch"] = m.epoch;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << h.dump() << '\n';
    write_f32le(out, m.net.parameters());
    if (!out) throw Error("failed writing " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path, const ArchSpec* expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("missing checkpoint " + path.string());
    try {
        std::string line;
        if (!std::getline(in, line)) throw FormatError("empty file");
        const auto h = nlohmann::json::parse(line);
        if (h.at("format").get<std::string>() != kCheckpointFormat) throw FormatError("not a checkpoint");
        ArchSpec arch;
        const auto& a = h.at("arch");
        arch.patch_size = a.at("patch_size").get<int>();
        arch.widths = a.at("widths").get<std::vector<int>>();
        arch.strides = a.at("strides").get<std::vector<int>>();
        arch.descriptor_dim = a.at("descriptor_dim").get<int>();
        if (h.at("descriptor_dim").get<int>() != arch.descriptor_dim)
            throw FormatError("descriptor_dim " + std::to_string(h.at("descriptor_dim").get<int>()) +
                              " disagrees with the architecture (" + std::to_string(arch.descriptor_dim) + ")");
        if (expected && !(*expected == arch)) throw ConfigError("checkpoint architecture differs from the configured one");
        Model m;
        m.net = DescriptorNet(arch);
        const auto n = h.at("param_count").get<std::size_t>();
        if (n != m.net.parameters().size())
            throw FormatError("param_count " + std::to_string(n) + " does not match the architecture (" +
                              std::to_string(m.net.parameters().size()) + ")");
        const auto& ns = h.at("norm_stats");
        m.norm_stats = {ns.at("mean").get<double>(), ns.at("std").get<double>(), ns.at("n_patches").get<std::size_t>(),
                        ns.at("degenerate").get<bool>()};
        m.seed = h.at("seed").get<std::uint64_t>();
        m.epoch = h.at("epoch").get<int>();
        read_f32le(in, m.net.parameters());
        if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after the parameters");
        return m;
    } catch (const ConfigError&) {
        throw;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    } catch (const Error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace xmk
