#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "cimsim/layers.hpp"
#include "cimsim/rng.hpp"

namespace cimsim {

/// Declarative network description; builds the layer stack and round-trips
/// through checkpoints and chip snapshots.
struct LayerSpec {
    std::string type; // conv2d | dense | relu | maxpool | avgpool | flatten
    int out = 0;
    int kernel = 0;
    int stride = 1;
    int pad = 0;
    int window = 2;
};

struct ArchSpec {
    std::vector<int> input_shape; // [C, H, W]
    int n_classes = 10;
    QuantConfig quant; // act/weight bits shared by all linear layers
    std::vector<LayerSpec> layers;

    /// conv(c1)-relu-pool / conv(c2)-relu-pool / dense(classes) stack.
    static ArchSpec desk_cnn(std::vector<int> input_shape, int n_classes,
                             std::vector<int> conv_channels, QuantConfig quant);
};

struct ModelCache {
    std::vector<LayerCache> layers;
    Tensor logits;
    QuantMode mode = QuantMode::kQuantized;
};

struct ModelGrads {
    std::vector<ParamGrads> per_layer; // aligned with layer indices; empty for stateless layers
};

/// Quantized weights and everything else needed to rebuild a digital model:
/// what a weight readout exposes (no ADC information).
struct LinearSnapshot {
    std::string type; // conv2d | dense
    int out = 0, in = 0;
    std::vector<std::int32_t> w_q;
    double w_scale = 1.0;
    std::vector<double> bias;
    QuantConfig qcfg;
};

class QuantizedModel {
public:
    QuantizedModel() = default;
    QuantizedModel(const QuantizedModel& other);
    QuantizedModel& operator=(const QuantizedModel& other);
    QuantizedModel(QuantizedModel&&) = default;
    QuantizedModel& operator=(QuantizedModel&&) = default;

    ArchSpec arch;
    std::vector<std::unique_ptr<Layer>> layers;

    /// Runs the stack. cache may be null when only logits are needed.
    /// backend == nullptr gives the pure digital path.
    Tensor forward(const Tensor& x, ModelCache* cache, LinearBackend* backend = nullptr,
                   QuantMode mode = QuantMode::kQuantized) const;

    /// Backpropagates dL/dlogits; returns dL/dinput. grads may be null.
    Tensor backward(const ModelCache& cache, const Tensor& dlogits, ModelGrads* grads) const;

    int num_linear_layers() const;
    std::vector<Layer*> param_layers();
    std::vector<const Layer*> param_layers() const;

    /// One float forward over a calibration batch; sets each linear layer's
    /// act_clip to the given percentile of its observed input magnitudes.
    void calibrate_clips(const Tensor& calibration_batch, double percentile = 99.9);

    std::vector<LinearSnapshot> quantized_snapshot() const;

    /// Replaces master weights with the dequantized snapshot weights
    /// (w_q * scale); used to rebuild a digital model from a chip readout.
    static QuantizedModel from_snapshot(const ArchSpec& arch,
                                        const std::vector<LinearSnapshot>& snaps);

    void save_checkpoint(const std::filesystem::path& path) const;
    static QuantizedModel load_checkpoint(const std::filesystem::path& path);

    /// FNV-1a hash over the raw master weight bytes; used by determinism tests.
    std::uint64_t weight_hash() const;
};

/// Builds the stack from the spec with He-normal initial weights drawn from
/// streams labeled "init/<layer>".
QuantizedModel build_model(const ArchSpec& arch, std::uint64_t init_seed);

/// Top-1 accuracy of logits against labels.
double top1_accuracy(const Tensor& logits, std::span<const int> labels);

/// Max relative error between analytic gradients and central finite
/// differences for a single layer on a random small shape (float mode).
double gradient_check(const Layer& layer, const std::vector<int>& in_shape, std::uint64_t seed,
                      double eps = 1e-5);

} // namespace cimsim
