#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cimsim/quantize.hpp"
#include "cimsim/tensor.hpp"

namespace cimsim {

enum class QuantMode {
    kQuantized, // integer linear ops, quantized weights/activations
    kFloat      // pure float path (gradient checks)
};

/// Integer linear-operation provider for conv/dense layers. The digital path
/// is built into the layers; a backend replaces it with the crossbar path of
/// a programmed chip. Outputs are scaled by `den` to stay integer:
/// true value = y[i] / den.
class LinearBackend {
public:
    virtual ~LinearBackend() = default;
    /// x_q: n_rows x in_dim quantized inputs (row-major). Writes n_rows x
    /// out_dim scaled integer outputs.
    virtual void linear(int linear_id, const std::uint8_t* x_q, int n_rows, int in_dim,
                        std::int64_t* y_out, int out_dim) const = 0;
    virtual std::int64_t denominator(int linear_id) const = 0;
};

/// Per-layer forward cache. Backward consumes exactly what its layer stored.
struct LayerCache {
    std::vector<int> in_shape;
    std::vector<int> out_shape;
    Tensor x_float;              // layer input (pre-quantization)
    std::vector<std::uint8_t> x_q; // quantized input, quantized mode only
    double act_step_used = 1.0;
    std::vector<std::int32_t> w_q; // weights used at forward time
    double w_scale_used = 1.0;
    std::vector<std::int32_t> argmax; // pooling
};

struct ParamGrads {
    Tensor d_weights;
    Tensor d_bias;
};

struct ForwardOptions {
    QuantMode mode = QuantMode::kQuantized;
    LinearBackend* backend = nullptr;
    /// Index of the current layer among the linear layers of the stack; the
    /// model fills it in before each conv/dense forward.
    int linear_id = -1;
};

class Layer {
public:
    virtual ~Layer() = default;
    virtual std::string kind() const = 0;
    virtual std::vector<int> output_shape(const std::vector<int>& in) const = 0;
    virtual Tensor forward(const Tensor& x, const ForwardOptions& opt, LayerCache& cache) const = 0;
    /// Returns gradient w.r.t. the layer input; fills grads for parameter
    /// layers (may be null when only input gradients are needed).
    virtual Tensor backward(const Tensor& dy, const LayerCache& cache, ParamGrads* grads) const = 0;
    virtual std::unique_ptr<Layer> clone() const = 0;

    virtual bool has_params() const { return false; }
    virtual Tensor* weights() { return nullptr; }
    virtual Tensor* bias() { return nullptr; }
    virtual QuantConfig* quant_config() { return nullptr; }
    virtual const QuantConfig* quant_config() const { return nullptr; }
};

/// 2-D convolution with input-activation quantization and quantized weights.
/// Inference lowers each output position to an integer dot product via
/// im2col patches; with a backend those dot products run on the crossbar.
class Conv2d final : public Layer {
public:
    Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad, QuantConfig qcfg);

    std::string kind() const override { return "conv2d"; }
    std::vector<int> output_shape(const std::vector<int>& in) const override;
    Tensor forward(const Tensor& x, const ForwardOptions& opt, LayerCache& cache) const override;
    Tensor backward(const Tensor& dy, const LayerCache& cache, ParamGrads* grads) const override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }

    bool has_params() const override { return true; }
    Tensor* weights() override { return &weights_; }
    Tensor* bias() override { return &bias_; }
    QuantConfig* quant_config() override { return &qcfg_; }
    const QuantConfig* quant_config() const override { return &qcfg_; }

    int in_channels() const { return in_channels_; }
    int out_channels() const { return out_channels_; }
    int kernel() const { return kernel_; }
    int stride() const { return stride_; }
    int pad() const { return pad_; }
    int patch_dim() const { return in_channels_ * kernel_ * kernel_; }

private:
    int in_channels_, out_channels_, kernel_, stride_, pad_;
    QuantConfig qcfg_;
    Tensor weights_; // [out, in*k*k]
    Tensor bias_;    // [out]
};

/// Fully connected layer with the same quantization contract as Conv2d.
class Dense final : public Layer {
public:
    Dense(int in_features, int out_features, QuantConfig qcfg);

    std::string kind() const override { return "dense"; }
    std::vector<int> output_shape(const std::vector<int>& in) const override;
    Tensor forward(const Tensor& x, const ForwardOptions& opt, LayerCache& cache) const override;
    Tensor backward(const Tensor& dy, const LayerCache& cache, ParamGrads* grads) const override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }

    bool has_params() const override { return true; }
    Tensor* weights() override { return &weights_; }
    Tensor* bias() override { return &bias_; }
    QuantConfig* quant_config() override { return &qcfg_; }
    const QuantConfig* quant_config() const override { return &qcfg_; }

    int in_features() const { return in_features_; }
    int out_features() const { return out_features_; }

private:
    int in_features_, out_features_;
    QuantConfig qcfg_;
    Tensor weights_; // [out, in]
    Tensor bias_;    // [out]
};

class Relu final : public Layer {
public:
    std::string kind() const override { return "relu"; }
    std::vector<int> output_shape(const std::vector<int>& in) const override { return in; }
    Tensor forward(const Tensor& x, const ForwardOptions& opt, LayerCache& cache) const override;
    Tensor backward(const Tensor& dy, const LayerCache& cache, ParamGrads* grads) const override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Relu>(*this); }
};

class MaxPool2d final : public Layer {
public:
    explicit MaxPool2d(int window) : window_(window) {}
    std::string kind() const override { return "maxpool"; }
    std::vector<int> output_shape(const std::vector<int>& in) const override;
    Tensor forward(const Tensor& x, const ForwardOptions& opt, LayerCache& cache) const override;
    Tensor backward(const Tensor& dy, const LayerCache& cache, ParamGrads* grads) const override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPool2d>(*this); }
    int window() const { return window_; }

private:
    int window_;
};

class AvgPool2d final : public Layer {
public:
    explicit AvgPool2d(int window) : window_(window) {}
    std::string kind() const override { return "avgpool"; }
    std::vector<int> output_shape(const std::vector<int>& in) const override;
    Tensor forward(const Tensor& x, const ForwardOptions& opt, LayerCache& cache) const override;
    Tensor backward(const Tensor& dy, const LayerCache& cache, ParamGrads* grads) const override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<AvgPool2d>(*this); }
    int window() const { return window_; }

private:
    int window_;
};

class Flatten final : public Layer {
public:
    std::string kind() const override { return "flatten"; }
    std::vector<int> output_shape(const std::vector<int>& in) const override;
    Tensor forward(const Tensor& x, const ForwardOptions& opt, LayerCache& cache) const override;
    Tensor backward(const Tensor& dy, const LayerCache& cache, ParamGrads* grads) const override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Flatten>(*this); }
};

/// Mean softmax cross-entropy over the batch. Writes dL/dlogits into
/// dlogits when non-null.
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* dlogits);

/// im2col patch extraction on quantized (uint8) inputs, zero padding.
/// Output: [N * out_h * out_w, C * k * k] row-major.
void im2col_u8(const std::uint8_t* x, int n, int c, int h, int w, int kernel, int stride, int pad,
               std::uint8_t* patches);

/// Same extraction on doubles (float path and weight-gradient path).
void im2col_f64(const double* x, int n, int c, int h, int w, int kernel, int stride, int pad,
                double* patches);

} // namespace cimsim
