#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "xmk/dataset.hpp"
#include "xmk/nn.hpp"

namespace xmk {

using DescriptorNet = DescriptorNetT<float>;
using DescriptorMat = DescriptorNet::Mat;  // descriptor_dim x n, one column per patch

struct TrainConfig {
    double learning_rate = 1e-3;
    int batch_size = 256;
    double margin = 1.0;
    int epochs = 50;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;

    void validate() const;
};

/// A network together with the patch statistics it was trained on.
struct Model {
    DescriptorNet net;
    NormStats norm_stats;
    std::uint64_t seed = 0;
    int epoch = 0;
};

/// max(0, |a-p|^2 - |a-n|^2 + margin) for one triplet.
double triplet_loss(std::span<const float> a, std::span<const float> p, std::span<const float> n,
                    double margin = 1.0);

/// For each anchor column k, the index j != k minimizing |a_k - p_j|
/// (lowest index on ties). Requires at least two columns.
std::vector<int> mine_hard_negatives(const DescriptorMat& anchors, const DescriptorMat& positives);

/// Summed triplet loss over columns with negatives taken from `positives`.
/// When the gradient pointers are non-null they receive dL/dA and dL/dP.
double batch_triplet_loss(const DescriptorMat& anchors, const DescriptorMat& positives,
                          std::span<const int> negatives, double margin,
                          DescriptorMat* d_anchors = nullptr, DescriptorMat* d_positives = nullptr);

/// Descriptors of normalized patches, processed in chunks.
DescriptorMat describe_patches(const DescriptorNet& net, std::span<const float> patches, int n);

struct EpochStats {
    int epoch = 0;
    double mean_loss = 0.0;
    double active_fraction = 0.0;  // triplets with a positive hinge
    double seconds = 0.0;
};

struct TrainResult {
    Model model;
    std::vector<double> loss_history;  // mean per-triplet loss per epoch
    std::vector<EpochStats> epochs;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Trains a freshly initialized network of shape `arch` on `data`.
TrainResult train(const TrainingSet& data, const TrainConfig& cfg, const ArchSpec& arch = {},
                  const EpochCallback& on_epoch = {});

/// Max relative error between the analytic gradient of the batch triplet
/// loss (hardest negatives mined once, then held fixed) and central finite
/// differences with step h over `n_params` randomly chosen parameters.
/// Parameters whose +-h step changes the sign of any ReLU input are redrawn.
/// `anchors` and `positives` hold B patches each.
double gradient_check(const DescriptorNetT<double>& net, std::span<const double> anchors,
                      std::span<const double> positives, int batch, double margin = 1.0,
                      int n_params = 50, std::uint64_t seed = 0, double h = 1e-4);

/// JSON metadata line followed by the float32 little-endian parameters.
void save_checkpoint(const Model& m, const std::filesystem::path& path);

/// Throws FormatError when the metadata is inconsistent with the payload and
/// ConfigError when `expected` is given and differs from the stored shape.
Model load_checkpoint(const std::filesystem::path& path, const ArchSpec* expected = nullptr);

}  // namespace xmk
