#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "nearcol/annotate.hpp"

namespace nearcol {

/// Dense row-major float64 tensor of rank <= 4 (batch, channel, height, width).
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> dims);

    [[nodiscard]] std::size_t size() const { return data.size(); }
    [[nodiscard]] bool all_finite() const;
};

enum class LayerKind { conv, relu, maxpool };

struct LayerSpec {
    LayerKind kind = LayerKind::conv;
    int in_channels = 0;   // conv only
    int out_channels = 0;  // conv only
    int kernel = 3;        // conv: odd kernel size, "same" zero padding; maxpool: window and stride

    static LayerSpec conv(int in, int out, int k) { return {LayerKind::conv, in, out, k}; }
    static LayerSpec relu() { return {LayerKind::relu, 0, 0, 0}; }
    static LayerSpec maxpool(int k = 2) { return {LayerKind::maxpool, 0, 0, k}; }
    friend bool operator==(const LayerSpec &, const LayerSpec &) = default;
};

enum class Head { regression, binary, multilabel };

[[nodiscard]] std::string to_string(Head h);
[[nodiscard]] Head head_from_string(const std::string &s);
/// Number of output units: 1, 2 or 4.
[[nodiscard]] int head_units(Head h);
/// Number of target values per sample: 1 (time), 1 (class index) or 4 (bin flags).
[[nodiscard]] int target_width(Head h);

inline constexpr double kMaxPredictedTime = 6.0;

/// Multi-stream architecture: a per-frame backbone and 1x1 reduction shared by all N streams,
/// features concatenated oldest frame first, then FC -> ReLU -> FC head.
struct NetworkConfig {
    int n_frames = 6;
    int input_channels = 1;
    int input_height = 64;
    int input_width = 64;
    std::vector<LayerSpec> backbone = {LayerSpec::conv(1, 8, 3), LayerSpec::relu(), LayerSpec::maxpool(2),
                                       LayerSpec::conv(8, 16, 3), LayerSpec::relu(), LayerSpec::maxpool(2)};
    LayerSpec reduce = LayerSpec::conv(16, 4, 1);
    int hidden_units = 128;
    Head head = Head::regression;

    /// Throws ConfigError naming the first layer whose shape does not chain.
    void validate() const;
    /// Flattened per-frame feature length after the reduction.
    [[nodiscard]] int frame_feature_size() const;
    [[nodiscard]] std::size_t frame_input_size() const {
        return static_cast<std::size_t>(input_channels) * input_height * input_width;
    }
};

void to_json(nlohmann::json &j, const NetworkConfig &cfg);
[[nodiscard]] NetworkConfig network_config_from_json(const nlohmann::json &j);

struct Parameter {
    std::string name;   // e.g. "conv1.weight"
    std::string layer;  // e.g. "conv1"
    Tensor value;
    Tensor grad;
    std::size_t fan_in = 0;  // 0 for biases
};

struct Hyperparams {
    int batch_size = 24;
    double learning_rate = 0.001;
    int epochs = 30;
    std::uint64_t seed = 42;

    void validate() const;
};

/// Inputs of a batch: batch x N x C x H x W values, plus target_width(head) values per sample.
struct Batch {
    std::size_t size = 0;
    std::vector<double> inputs;
    std::vector<double> targets;
};

struct LossResult {
    double loss = 0.0;
    std::vector<double> grad;  // d(loss)/d(raw output), same layout as the outputs
};

/// Batch loss on raw outputs (batch x units). Regression: mean of 1/2 (t - pred)^2. Binary:
/// mean softmax cross-entropy, class index 1 = near-collision. Multilabel: mean over samples of the
/// mean over the 4 bins of the sigmoid binary cross-entropy. Probabilities are clamped to
/// [1e-12, 1 - 1e-12] inside the logarithms.
[[nodiscard]] LossResult compute_loss(std::span<const double> outputs, std::span<const double> targets, Head head);

class KinkTrace;

class Network {
  public:
    /// He-normal weights (std sqrt(2 / fan_in)), zero biases; deterministic per (cfg, seed).
    static Network build(const NetworkConfig &cfg, std::uint64_t seed);

    [[nodiscard]] const NetworkConfig &config() const { return cfg_; }
    [[nodiscard]] std::vector<Parameter> &parameters() { return params_; }
    [[nodiscard]] const std::vector<Parameter> &parameters() const { return params_; }
    [[nodiscard]] std::size_t parameter_count() const;
    [[nodiscard]] std::uint64_t seed() const { return seed_; }

    /// Raw head output (units values) for one window of N frames laid out N x C x H x W.
    [[nodiscard]] std::vector<double> forward_raw(std::span<const double> window) const;
    /// Head activation: time clamped to [0, 6], softmax probabilities, or per-bin sigmoids.
    [[nodiscard]] std::vector<double> forward(std::span<const double> window) const;
    /// Per-frame feature vector of the shared backbone + reduction.
    [[nodiscard]] std::vector<double> frame_features(std::span<const double> frame) const;
    /// The N per-frame feature vectors of a window, concatenated oldest first (the FC input).
    [[nodiscard]] std::vector<double> concat_features(std::span<const double> window) const;

    /// Batch loss without touching gradients. `trace` records ReLU signs and pooling choices.
    [[nodiscard]] double batch_loss(const Batch &batch, KinkTrace *trace = nullptr) const;
    /// Zeroes gradients, backpropagates the batch loss and returns it. Throws TrainingError on
    /// a non-finite activation or gradient, naming the layer.
    double compute_gradients(const Batch &batch);
    /// theta <- theta - lr * grad.
    void sgd_step(double learning_rate);

  private:
    struct Workspace;
    Network() = default;
    double forward_sample(std::span<const double> window, Workspace &ws, KinkTrace *trace) const;
    void backward_sample(Workspace &ws, std::span<const double> out_grad);

    NetworkConfig cfg_;
    std::uint64_t seed_ = 0;
    std::vector<Parameter> params_;
    // Indices into params_ per conv layer (backbone convs then reduce), then fc1 and output.
    struct ConvRef {
        std::size_t weight;
        std::size_t bias;
    };
    std::vector<ConvRef> conv_refs_;
    ConvRef fc1_{};
    ConvRef out_{};
};

/// One SGD step on the batch: gradients then update. Returns the batch loss before the update.
double backward_and_step(Network &net, const Batch &batch, const Hyperparams &hyper);

/// Builds a batch from samples (window pixels and head targets).
[[nodiscard]] Batch make_batch(std::span<const WindowSample> samples, std::span<const std::size_t> indices, Head head);

struct TrainResult {
    std::vector<double> epoch_loss;  // mean per-sample training loss of each epoch
};

using EpochCallback = std::function<void(int epoch, double loss)>;

/// Mini-batch SGD. Regression shuffles the samples each epoch with a seeded stream; classification
/// heads draw ceil(n / batch) batches per epoch from the 0.6 / 0.4 weighted sampler.
/// Throws TrainingError when the loss exceeds 1e6 or becomes non-finite.
TrainResult train(Network &net, std::span<const WindowSample> samples, const Hyperparams &hyper,
                  const EpochCallback &on_epoch = {});

/// Inference over samples: clamped times (regression) or head activations flattened per sample.
[[nodiscard]] std::vector<double> predict(const Network &net, std::span<const WindowSample> samples);

struct LayerGradCheck {
    std::string layer;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // points where a ReLU or pooling decision changed within +-eps
};

struct GradCheckReport {
    std::vector<LayerGradCheck> layers;
    double tolerance = 1e-4;
    [[nodiscard]] bool passed() const;
};

struct GradCheckOptions {
    double epsilon = 1e-5;
    double tolerance = 1e-4;
    std::size_t batch_size = 2;
    std::size_t max_points_per_tensor = 2000;
    std::uint64_t seed = 7;
    /// Negates the analytic gradient of this layer before comparing (checker self-test).
    std::optional<std::string> corrupt_layer;
};

/// Central finite differences against backpropagation for every parameter tensor on a random batch.
/// Tensors larger than max_points_per_tensor are checked on a seeded subset of entries.
[[nodiscard]] GradCheckReport grad_check(const NetworkConfig &cfg, const GradCheckOptions &options = {});
/// Same comparison on a given network and batch. Points where a ReLU sign or pooling choice
/// changes within +-epsilon (including ReLU inputs exactly at 0) are skipped, not compared.
[[nodiscard]] GradCheckReport grad_check(Network &net, const Batch &batch, const GradCheckOptions &options = {});

/// Versioned binary checkpoint: "NCCK", u32 version, u64 JSON length, config JSON, u64 parameter
/// count, little-endian f64 parameters in declaration order, u32 CRC-32 of all preceding bytes.
void save_checkpoint(const Network &net, const std::filesystem::path &path);
[[nodiscard]] Network load_checkpoint(const std::filesystem::path &path);

}  // namespace nearcol
