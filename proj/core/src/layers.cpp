#include "cimsim/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cimsim {

namespace {

void check_4d(const Tensor& x, const char* who) {
    if (x.shape.size() != 4) throw ConfigError(std::string(who) + ": expected a [N,C,H,W] tensor");
}

int conv_out_dim(int in, int kernel, int stride, int pad) {
    const int v = (in + 2 * pad - kernel) / stride + 1;
    if (v < 1) throw ConfigError("conv: output dimension collapsed to zero");
    return v;
}

} // namespace

void im2col_u8(const std::uint8_t* x, int n, int c, int h, int w, int kernel, int stride, int pad,
               std::uint8_t* patches) {
    const int oh = conv_out_dim(h, kernel, stride, pad);
    const int ow = conv_out_dim(w, kernel, stride, pad);
    const int patch = c * kernel * kernel;
    for (int in = 0; in < n; ++in) {
        const std::uint8_t* img = x + static_cast<size_t>(in) * c * h * w;
        std::uint8_t* dst = patches + static_cast<size_t>(in) * oh * ow * patch;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                for (int ic = 0; ic < c; ++ic) {
                    for (int ky = 0; ky < kernel; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        for (int kx = 0; kx < kernel; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            *dst++ = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                         ? img[(static_cast<size_t>(ic) * h + iy) * w + ix]
                                         : 0;
                        }
                    }
                }
            }
        }
    }
}

void im2col_f64(const double* x, int n, int c, int h, int w, int kernel, int stride, int pad,
                double* patches) {
    const int oh = conv_out_dim(h, kernel, stride, pad);
    const int ow = conv_out_dim(w, kernel, stride, pad);
    const int patch = c * kernel * kernel;
    for (int in = 0; in < n; ++in) {
        const double* img = x + static_cast<size_t>(in) * c * h * w;
        double* dst = patches + static_cast<size_t>(in) * oh * ow * patch;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                for (int ic = 0; ic < c; ++ic) {
                    for (int ky = 0; ky < kernel; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        for (int kx = 0; kx < kernel; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            *dst++ = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                         ? img[(static_cast<size_t>(ic) * h + iy) * w + ix]
                                         : 0.0;
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad, QuantConfig qcfg)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_(kernel),
      stride_(stride),
      pad_(pad),
      qcfg_(qcfg),
      weights_({out_channels, in_channels * kernel * kernel}),
      bias_({out_channels}) {
    if (in_channels < 1 || out_channels < 1 || kernel < 1 || stride < 1 || pad < 0) {
        throw ConfigError("Conv2d: invalid geometry");
    }
    qcfg.validate();
}

std::vector<int> Conv2d::output_shape(const std::vector<int>& in) const {
    if (in.size() != 4 || in[1] != in_channels_) throw ConfigError("Conv2d: input shape mismatch");
    return {in[0], out_channels_, conv_out_dim(in[2], kernel_, stride_, pad_),
            conv_out_dim(in[3], kernel_, stride_, pad_)};
}

Tensor Conv2d::forward(const Tensor& x, const ForwardOptions& opt, LayerCache& cache) const {
    check_4d(x, "Conv2d");
    const auto out_shape = output_shape(x.shape);
    const int n = x.shape[0], h = x.shape[2], w = x.shape[3];
    const int oh = out_shape[2], ow = out_shape[3];
    const int npos = oh * ow;
    const int k = patch_dim();
    const std::int64_t rows = static_cast<std::int64_t>(n) * npos;

    cache.in_shape = x.shape;
    cache.out_shape = out_shape;
    cache.x_float = x;

    Tensor y(out_shape);
    if (opt.mode == QuantMode::kFloat) {
        std::vector<double> patches(static_cast<size_t>(rows) * k);
        im2col_f64(x.ptr(), n, in_channels_, h, w, kernel_, stride_, pad_, patches.data());
        for (std::int64_t rp = 0; rp < rows; ++rp) {
            const double* row = &patches[static_cast<size_t>(rp) * k];
            const int in_img = static_cast<int>(rp / npos);
            const int pos = static_cast<int>(rp % npos);
            for (int o = 0; o < out_channels_; ++o) {
                const double* wrow = &weights_.data[static_cast<size_t>(o) * k];
                double acc = 0.0;
                for (int i = 0; i < k; ++i) acc += wrow[i] * row[i];
                y.data[(static_cast<size_t>(in_img) * out_channels_ + o) * npos + pos] =
                    acc + bias_.data[o];
            }
        }
        return y;
    }

    cache.x_q.resize(x.data.size());
    quantize_acts(std::span<const double>(x.data), qcfg_.act_bits, qcfg_.act_clip, cache.x_q.data());
    auto [wq, wscale] = quantize_weights(std::span<const double>(weights_.data), qcfg_.weight_bits);
    cache.act_step_used = act_step(qcfg_.act_bits, qcfg_.act_clip);
    cache.w_scale_used = wscale;

    std::vector<std::uint8_t> patches(static_cast<size_t>(rows) * k);
    im2col_u8(cache.x_q.data(), n, in_channels_, h, w, kernel_, stride_, pad_, patches.data());

    std::vector<std::int64_t> y_int(static_cast<size_t>(rows) * out_channels_);
    std::int64_t den = 1;
    if (opt.backend) {
        opt.backend->linear(opt.linear_id, patches.data(), static_cast<int>(rows), k, y_int.data(),
                            out_channels_);
        den = opt.backend->denominator(opt.linear_id);
    } else {
        for (std::int64_t rp = 0; rp < rows; ++rp) {
            const std::uint8_t* row = &patches[static_cast<size_t>(rp) * k];
            std::int64_t* yrow = &y_int[static_cast<size_t>(rp) * out_channels_];
            for (int o = 0; o < out_channels_; ++o) {
                const std::int32_t* wrow = &wq[static_cast<size_t>(o) * k];
                std::int64_t acc = 0;
                for (int i = 0; i < k; ++i) acc += static_cast<std::int64_t>(wrow[i]) * row[i];
                yrow[o] = acc;
            }
        }
    }

    const double scale = wscale * cache.act_step_used;
    for (std::int64_t rp = 0; rp < rows; ++rp) {
        const int in_img = static_cast<int>(rp / npos);
        const int pos = static_cast<int>(rp % npos);
        for (int o = 0; o < out_channels_; ++o) {
            const std::int64_t v = y_int[static_cast<size_t>(rp) * out_channels_ + o];
            double value;
            if (den == 1) {
                value = static_cast<double>(v);
            } else {
                const std::int64_t q = v / den, r = v % den;
                value = static_cast<double>(q) + static_cast<double>(r) / static_cast<double>(den);
            }
            y.data[(static_cast<size_t>(in_img) * out_channels_ + o) * npos + pos] =
                value * scale + bias_.data[o];
        }
    }
    cache.w_q = std::move(wq);
    return y;
}

Tensor Conv2d::backward(const Tensor& dy, const LayerCache& cache, ParamGrads* grads) const {
    const int n = cache.in_shape[0], h = cache.in_shape[2], w = cache.in_shape[3];
    const int oh = cache.out_shape[2], ow = cache.out_shape[3];
    const int npos = oh * ow;
    const int k = patch_dim();
    const std::int64_t rows = static_cast<std::int64_t>(n) * npos;
    const bool quantized = !cache.x_q.empty();

    // Patches of the input the forward pass actually used.
    std::vector<double> patches(static_cast<size_t>(rows) * k);
    if (quantized) {
        std::vector<std::uint8_t> patches_q(static_cast<size_t>(rows) * k);
        im2col_u8(cache.x_q.data(), n, in_channels_, h, w, kernel_, stride_, pad_, patches_q.data());
        for (size_t i = 0; i < patches_q.size(); ++i) {
            patches[i] = patches_q[i] * cache.act_step_used;
        }
    } else {
        im2col_f64(cache.x_float.ptr(), n, in_channels_, h, w, kernel_, stride_, pad_,
                   patches.data());
    }

    // Dequantized weights as the forward pass saw them.
    std::vector<double> w_hat(weights_.data.size());
    if (quantized) {
        for (size_t i = 0; i < w_hat.size(); ++i) w_hat[i] = cache.w_q[i] * cache.w_scale_used;
    } else {
        w_hat = weights_.data;
    }

    if (grads) {
        grads->d_weights = Tensor(weights_.shape);
        grads->d_bias = Tensor(bias_.shape);
        for (int in_img = 0; in_img < n; ++in_img) {
            for (int o = 0; o < out_channels_; ++o) {
                const double* dyrow = &dy.data[(static_cast<size_t>(in_img) * out_channels_ + o) * npos];
                double* dwrow = &grads->d_weights.data[static_cast<size_t>(o) * k];
                double db = 0.0;
                for (int pos = 0; pos < npos; ++pos) {
                    const double d = dyrow[pos];
                    db += d;
                    const double* prow =
                        &patches[(static_cast<size_t>(in_img) * npos + pos) * k];
                    for (int i = 0; i < k; ++i) dwrow[i] += d * prow[i];
                }
                grads->d_bias.data[o] += db;
            }
        }
    }

    // Gradient w.r.t. the (dequantized) patches, scattered back to the image.
    Tensor dx(cache.in_shape);
    std::vector<double> dpatch(k);
    for (int in_img = 0; in_img < n; ++in_img) {
        double* dst = &dx.data[static_cast<size_t>(in_img) * in_channels_ * h * w];
        for (int pos = 0; pos < npos; ++pos) {
            std::fill(dpatch.begin(), dpatch.end(), 0.0);
            for (int o = 0; o < out_channels_; ++o) {
                const double d =
                    dy.data[(static_cast<size_t>(in_img) * out_channels_ + o) * npos + pos];
                if (d == 0.0) continue;
                const double* wrow = &w_hat[static_cast<size_t>(o) * k];
                for (int i = 0; i < k; ++i) dpatch[i] += d * wrow[i];
            }
            const int oy = pos / ow, ox = pos % ow;
            int i = 0;
            for (int ic = 0; ic < in_channels_; ++ic) {
                for (int ky = 0; ky < kernel_; ++ky) {
                    const int iy = oy * stride_ - pad_ + ky;
                    for (int kx = 0; kx < kernel_; ++kx, ++i) {
                        const int ix = ox * stride_ - pad_ + kx;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                            dst[(static_cast<size_t>(ic) * h + iy) * w + ix] += dpatch[i];
                        }
                    }
                }
            }
        }
    }

    if (quantized) {
        // Straight-through: the activation quantizer passes gradient inside
        // [0, clip] and blocks it outside.
        for (std::int64_t i = 0; i < dx.numel(); ++i) {
            const double v = cache.x_float.data[i];
            if (v < 0.0 || v > qcfg_.act_clip) dx.data[i] = 0.0;
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

Dense::Dense(int in_features, int out_features, QuantConfig qcfg)
    : in_features_(in_features),
      out_features_(out_features),
      qcfg_(qcfg),
      weights_({out_features, in_features}),
      bias_({out_features}) {
    if (in_features < 1 || out_features < 1) throw ConfigError("Dense: invalid dimensions");
    qcfg.validate();
}

std::vector<int> Dense::output_shape(const std::vector<int>& in) const {
    if (in.size() != 2 || in[1] != in_features_) throw ConfigError("Dense: input shape mismatch");
    return {in[0], out_features_};
}

Tensor Dense::forward(const Tensor& x, const ForwardOptions& opt, LayerCache& cache) const {
    const auto out_shape = output_shape(x.shape);
    const int n = x.shape[0];
    cache.in_shape = x.shape;
    cache.out_shape = out_shape;
    cache.x_float = x;

    Tensor y(out_shape);
    if (opt.mode == QuantMode::kFloat) {
        for (int r = 0; r < n; ++r) {
            const double* row = &x.data[static_cast<size_t>(r) * in_features_];
            for (int o = 0; o < out_features_; ++o) {
                const double* wrow = &weights_.data[static_cast<size_t>(o) * in_features_];
                double acc = 0.0;
                for (int i = 0; i < in_features_; ++i) acc += wrow[i] * row[i];
                y.data[static_cast<size_t>(r) * out_features_ + o] = acc + bias_.data[o];
            }
        }
        return y;
    }

    cache.x_q.resize(x.data.size());
    quantize_acts(std::span<const double>(x.data), qcfg_.act_bits, qcfg_.act_clip, cache.x_q.data());
    auto [wq, wscale] = quantize_weights(std::span<const double>(weights_.data), qcfg_.weight_bits);
    cache.act_step_used = act_step(qcfg_.act_bits, qcfg_.act_clip);
    cache.w_scale_used = wscale;

    std::vector<std::int64_t> y_int(static_cast<size_t>(n) * out_features_);
    std::int64_t den = 1;
    if (opt.backend) {
        opt.backend->linear(opt.linear_id, cache.x_q.data(), n, in_features_, y_int.data(),
                            out_features_);
        den = opt.backend->denominator(opt.linear_id);
    } else {
        for (int r = 0; r < n; ++r) {
            const std::uint8_t* row = &cache.x_q[static_cast<size_t>(r) * in_features_];
            for (int o = 0; o < out_features_; ++o) {
                const std::int32_t* wrow = &wq[static_cast<size_t>(o) * in_features_];
                std::int64_t acc = 0;
                for (int i = 0; i < in_features_; ++i) {
                    acc += static_cast<std::int64_t>(wrow[i]) * row[i];
                }
                y_int[static_cast<size_t>(r) * out_features_ + o] = acc;
            }
        }
    }

    const double scale = wscale * cache.act_step_used;
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        const std::int64_t v = y_int[i];
        double value;
        if (den == 1) {
            value = static_cast<double>(v);
        } else {
            const std::int64_t q = v / den, r = v % den;
            value = static_cast<double>(q) + static_cast<double>(r) / static_cast<double>(den);
        }
        y.data[i] = value * scale + bias_.data[i % out_features_];
    }
    cache.w_q = std::move(wq);
    return y;
}

Tensor Dense::backward(const Tensor& dy, const LayerCache& cache, ParamGrads* grads) const {
    const int n = cache.in_shape[0];
    const bool quantized = !cache.x_q.empty();

    std::vector<double> w_hat(weights_.data.size());
    if (quantized) {
        for (size_t i = 0; i < w_hat.size(); ++i) w_hat[i] = cache.w_q[i] * cache.w_scale_used;
    } else {
        w_hat = weights_.data;
    }

    if (grads) {
        grads->d_weights = Tensor(weights_.shape);
        grads->d_bias = Tensor(bias_.shape);
        for (int r = 0; r < n; ++r) {
            for (int o = 0; o < out_features_; ++o) {
                const double d = dy.data[static_cast<size_t>(r) * out_features_ + o];
                grads->d_bias.data[o] += d;
                if (d == 0.0) continue;
                double* dwrow = &grads->d_weights.data[static_cast<size_t>(o) * in_features_];
                if (quantized) {
                    const std::uint8_t* xrow = &cache.x_q[static_cast<size_t>(r) * in_features_];
                    const double s = d * cache.act_step_used;
                    for (int i = 0; i < in_features_; ++i) dwrow[i] += s * xrow[i];
                } else {
                    const double* xrow = &cache.x_float.data[static_cast<size_t>(r) * in_features_];
                    for (int i = 0; i < in_features_; ++i) dwrow[i] += d * xrow[i];
                }
            }
        }
    }

    Tensor dx(cache.in_shape);
    for (int r = 0; r < n; ++r) {
        double* dxrow = &dx.data[static_cast<size_t>(r) * in_features_];
        for (int o = 0; o < out_features_; ++o) {
            const double d = dy.data[static_cast<size_t>(r) * out_features_ + o];
            if (d == 0.0) continue;
            const double* wrow = &w_hat[static_cast<size_t>(o) * in_features_];
            for (int i = 0; i < in_features_; ++i) dxrow[i] += d * wrow[i];
        }
    }

    if (quantized) {
        for (std::int64_t i = 0; i < dx.numel(); ++i) {
            const double v = cache.x_float.data[i];
            if (v < 0.0 || v > qcfg_.act_clip) dx.data[i] = 0.0;
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Relu / pooling / flatten
// ---------------------------------------------------------------------------

Tensor Relu::forward(const Tensor& x, const ForwardOptions&, LayerCache& cache) const {
    cache.in_shape = x.shape;
    cache.out_shape = x.shape;
    cache.x_float = x;
    Tensor y = x;
    for (auto& v : y.data) v = v > 0.0 ? v : 0.0;
    return y;
}

Tensor Relu::backward(const Tensor& dy, const LayerCache& cache, ParamGrads*) const {
    Tensor dx = dy;
    for (std::int64_t i = 0; i < dx.numel(); ++i) {
        if (cache.x_float.data[i] <= 0.0) dx.data[i] = 0.0;
    }
    return dx;
}

std::vector<int> MaxPool2d::output_shape(const std::vector<int>& in) const {
    if (in.size() != 4) throw ConfigError("MaxPool2d: expected [N,C,H,W]");
    return {in[0], in[1], in[2] / window_, in[3] / window_};
}

Tensor MaxPool2d::forward(const Tensor& x, const ForwardOptions&, LayerCache& cache) const {
    check_4d(x, "MaxPool2d");
    const auto os = output_shape(x.shape);
    const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    const int oh = os[2], ow = os[3];
    cache.in_shape = x.shape;
    cache.out_shape = os;
    Tensor y(os);
    cache.argmax.resize(y.data.size());
    std::int64_t oi = 0;
    for (int in_img = 0; in_img < n; ++in_img) {
        for (int ic = 0; ic < c; ++ic) {
            const double* img = &x.data[(static_cast<size_t>(in_img) * c + ic) * h * w];
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox, ++oi) {
                    double best = -std::numeric_limits<double>::infinity();
                    int best_idx = 0;
                    for (int ky = 0; ky < window_; ++ky) {
                        for (int kx = 0; kx < window_; ++kx) {
                            const int idx = (oy * window_ + ky) * w + ox * window_ + kx;
                            if (img[idx] > best) {
                                best = img[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y.data[oi] = best;
                    cache.argmax[oi] =
                        static_cast<std::int32_t>((static_cast<size_t>(in_img) * c + ic) * h * w + best_idx);
                }
            }
        }
    }
    return y;
}

Tensor MaxPool2d::backward(const Tensor& dy, const LayerCache& cache, ParamGrads*) const {
    Tensor dx(cache.in_shape);
    for (std::int64_t i = 0; i < dy.numel(); ++i) {
        dx.data[cache.argmax[i]] += dy.data[i];
    }
    return dx;
}

std::vector<int> AvgPool2d::output_shape(const std::vector<int>& in) const {
    if (in.size() != 4) throw ConfigError("AvgPool2d: expected [N,C,H,W]");
    return {in[0], in[1], in[2] / window_, in[3] / window_};
}

Tensor AvgPool2d::forward(const Tensor& x, const ForwardOptions&, LayerCache& cache) const {
    check_4d(x, "AvgPool2d");
    const auto os = output_shape(x.shape);
    const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    const int oh = os[2], ow = os[3];
    cache.in_shape = x.shape;
    cache.out_shape = os;
    const double inv = 1.0 / (window_ * window_);
    Tensor y(os);
    std::int64_t oi = 0;
    for (int in_img = 0; in_img < n; ++in_img) {
        for (int ic = 0; ic < c; ++ic) {
            const double* img = &x.data[(static_cast<size_t>(in_img) * c + ic) * h * w];
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox, ++oi) {
                    double acc = 0.0;
                    for (int ky = 0; ky < window_; ++ky) {
                        for (int kx = 0; kx < window_; ++kx) {
                            acc += img[(oy * window_ + ky) * w + ox * window_ + kx];
                        }
                    }
                    y.data[oi] = acc * inv;
                }
            }
        }
    }
    return y;
}

Tensor AvgPool2d::backward(const Tensor& dy, const LayerCache& cache, ParamGrads*) const {
    const int n = cache.in_shape[0], c = cache.in_shape[1], h = cache.in_shape[2],
              w = cache.in_shape[3];
    const int oh = cache.out_shape[2], ow = cache.out_shape[3];
    const double inv = 1.0 / (window_ * window_);
    Tensor dx(cache.in_shape);
    std::int64_t oi = 0;
    for (int in_img = 0; in_img < n; ++in_img) {
        for (int ic = 0; ic < c; ++ic) {
            double* img = &dx.data[(static_cast<size_t>(in_img) * c + ic) * h * w];
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox, ++oi) {
                    const double d = dy.data[oi] * inv;
                    for (int ky = 0; ky < window_; ++ky) {
                        for (int kx = 0; kx < window_; ++kx) {
                            img[(oy * window_ + ky) * w + ox * window_ + kx] += d;
                        }
                    }
                }
            }
        }
    }
    return dx;
}

std::vector<int> Flatten::output_shape(const std::vector<int>& in) const {
    int features = 1;
    for (size_t i = 1; i < in.size(); ++i) features *= in[i];
    return {in[0], features};
}

Tensor Flatten::forward(const Tensor& x, const ForwardOptions&, LayerCache& cache) const {
    cache.in_shape = x.shape;
    cache.out_shape = output_shape(x.shape);
    return x.reshaped(cache.out_shape);
}

Tensor Flatten::backward(const Tensor& dy, const LayerCache& cache, ParamGrads*) const {
    return dy.reshaped(cache.in_shape);
}

// ---------------------------------------------------------------------------
// Loss head
// ---------------------------------------------------------------------------

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* dlogits) {
    if (logits.shape.size() != 2 || logits.shape[0] != static_cast<int>(labels.size())) {
        throw ConfigError("softmax_cross_entropy: logits/labels shape mismatch");
    }
    const int n = logits.shape[0], classes = logits.shape[1];
    if (dlogits) *dlogits = Tensor(logits.shape);
    double loss = 0.0;
    std::vector<double> p(classes);
    for (int r = 0; r < n; ++r) {
        const double* row = &logits.data[static_cast<size_t>(r) * classes];
        double m = row[0];
        for (int i = 1; i < classes; ++i) m = std::max(m, row[i]);
        double z = 0.0;
        for (int i = 0; i < classes; ++i) {
            p[i] = std::exp(row[i] - m);
            z += p[i];
        }
        const int label = labels[r];
        if (label < 0 || label >= classes) throw ConfigError("softmax_cross_entropy: label out of range");
        loss -= std::log(p[label] / z);
        if (dlogits) {
            double* drow = &dlogits->data[static_cast<size_t>(r) * classes];
            for (int i = 0; i < classes; ++i) drow[i] = (p[i] / z - (i == label ? 1.0 : 0.0)) / n;
        }
    }
    return loss / n;
}

} // namespace cimsim
