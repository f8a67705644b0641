#include "cimsim/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace cimsim {

ArchSpec ArchSpec::desk_cnn(std::vector<int> input_shape, int n_classes,
                            std::vector<int> conv_channels, QuantConfig quant) {
    ArchSpec arch;
    arch.input_shape = std::move(input_shape);
    arch.n_classes = n_classes;
    arch.quant = quant;
    for (int ch : conv_channels) {
        arch.layers.push_back({.type = "conv2d", .out = ch, .kernel = 3, .stride = 1, .pad = 1});
        arch.layers.push_back({.type = "relu"});
        arch.layers.push_back({.type = "maxpool", .window = 2});
    }
    arch.layers.push_back({.type = "flatten"});
    arch.layers.push_back({.type = "dense", .out = n_classes});
    return arch;
}

QuantizedModel::QuantizedModel(const QuantizedModel& other) : arch(other.arch) {
    layers.reserve(other.layers.size());
    for (const auto& l : other.layers) layers.push_back(l->clone());
}

QuantizedModel& QuantizedModel::operator=(const QuantizedModel& other) {
    if (this == &other) return *this;
    arch = other.arch;
    layers.clear();
    layers.reserve(other.layers.size());
    for (const auto& l : other.layers) layers.push_back(l->clone());
    return *this;
}

Tensor QuantizedModel::forward(const Tensor& x, ModelCache* cache, LinearBackend* backend,
                               QuantMode mode) const {
    ModelCache local;
    ModelCache& c = cache ? *cache : local;
    c.layers.assign(layers.size(), LayerCache{});
    c.mode = mode;
    ForwardOptions opt;
    opt.mode = mode;
    opt.backend = backend;
    Tensor cur = x;
    int linear_id = 0;
    for (size_t i = 0; i < layers.size(); ++i) {
        opt.linear_id = layers[i]->has_params() ? linear_id++ : -1;
        cur = layers[i]->forward(cur, opt, c.layers[i]);
    }
    c.logits = cur;
    return cur;
}

Tensor QuantizedModel::backward(const ModelCache& cache, const Tensor& dlogits,
                                ModelGrads* grads) const {
    if (cache.layers.size() != layers.size()) {
        throw StateError("QuantizedModel::backward: cache does not match the model");
    }
    if (grads) grads->per_layer.assign(layers.size(), ParamGrads{});
    Tensor cur = dlogits;
    for (int i = static_cast<int>(layers.size()) - 1; i >= 0; --i) {
        ParamGrads* g = (grads && layers[i]->has_params()) ? &grads->per_layer[i] : nullptr;
        cur = layers[i]->backward(cur, cache.layers[i], g);
    }
    return cur;
}

int QuantizedModel::num_linear_layers() const {
    int n = 0;
    for (const auto& l : layers) n += l->has_params() ? 1 : 0;
    return n;
}

std::vector<Layer*> QuantizedModel::param_layers() {
    std::vector<Layer*> out;
    for (auto& l : layers) {
        if (l->has_params()) out.push_back(l.get());
    }
    return out;
}

std::vector<const Layer*> QuantizedModel::param_layers() const {
    std::vector<const Layer*> out;
    for (const auto& l : layers) {
        if (l->has_params()) out.push_back(l.get());
    }
    return out;
}

void QuantizedModel::calibrate_clips(const Tensor& calibration_batch, double percentile) {
    ForwardOptions opt;
    opt.mode = QuantMode::kFloat;
    Tensor cur = calibration_batch;
    for (auto& layer : layers) {
        if (layer->has_params()) {
            std::vector<double> vals(cur.data.size());
            for (size_t i = 0; i < vals.size(); ++i) vals[i] = std::max(0.0, cur.data[i]);
            const size_t k = std::min(vals.size() - 1,
                                      static_cast<size_t>(percentile / 100.0 * vals.size()));
            std::nth_element(vals.begin(), vals.begin() + k, vals.end());
            const double clip = vals[k];
            layer->quant_config()->act_clip = clip > 0.0 ? clip : 1.0;
        }
        LayerCache scratch;
        cur = layer->forward(cur, opt, scratch);
    }
}

std::vector<LinearSnapshot> QuantizedModel::quantized_snapshot() const {
    std::vector<LinearSnapshot> snaps;
    for (const auto* layer : param_layers()) {
        LinearSnapshot s;
        s.type = layer->kind();
        const Tensor& w = *const_cast<Layer*>(layer)->weights();
        const Tensor& b = *const_cast<Layer*>(layer)->bias();
        s.out = w.shape[0];
        s.in = w.shape[1];
        s.qcfg = *layer->quant_config();
        auto [wq, scale] = quantize_weights(std::span<const double>(w.data), s.qcfg.weight_bits);
        s.w_q = std::move(wq);
        s.w_scale = scale;
        s.bias = b.data;
        snaps.push_back(std::move(s));
    }
    return snaps;
}

QuantizedModel QuantizedModel::from_snapshot(const ArchSpec& arch,
                                             const std::vector<LinearSnapshot>& snaps) {
    QuantizedModel model = build_model(arch, 0);
    auto params = model.param_layers();
    if (params.size() != snaps.size()) {
        throw ConfigError("from_snapshot: snapshot count does not match the architecture");
    }
    for (size_t i = 0; i < snaps.size(); ++i) {
        Tensor& w = *params[i]->weights();
        Tensor& b = *params[i]->bias();
        if (static_cast<std::int64_t>(snaps[i].w_q.size()) != w.numel() ||
            snaps[i].bias.size() != b.data.size()) {
            throw ConfigError("from_snapshot: tensor shape mismatch");
        }
        for (size_t j = 0; j < snaps[i].w_q.size(); ++j) {
            w.data[j] = snaps[i].w_q[j] * snaps[i].w_scale;
        }
        b.data = snaps[i].bias;
        *params[i]->quant_config() = snaps[i].qcfg;
    }
    return model;
}

QuantizedModel build_model(const ArchSpec& arch, std::uint64_t init_seed) {
    if (arch.input_shape.size() != 3) throw ConfigError("ArchSpec: input_shape must be [C,H,W]");
    QuantizedModel model;
    model.arch = arch;
    std::vector<int> shape = {1, arch.input_shape[0], arch.input_shape[1], arch.input_shape[2]};
    int layer_index = 0;
    for (const LayerSpec& spec : arch.layers) {
        std::unique_ptr<Layer> layer;
        if (spec.type == "conv2d") {
            if (shape.size() != 4) throw ConfigError("ArchSpec: conv2d needs a [N,C,H,W] input");
            layer = std::make_unique<Conv2d>(shape[1], spec.out, spec.kernel, spec.stride, spec.pad,
                                             arch.quant);
        } else if (spec.type == "dense") {
            if (shape.size() != 2) throw ConfigError("ArchSpec: dense needs a flattened input");
            layer = std::make_unique<Dense>(shape[1], spec.out, arch.quant);
        } else if (spec.type == "relu") {
            layer = std::make_unique<Relu>();
        } else if (spec.type == "maxpool") {
            layer = std::make_unique<MaxPool2d>(spec.window);
        } else if (spec.type == "avgpool") {
            layer = std::make_unique<AvgPool2d>(spec.window);
        } else if (spec.type == "flatten") {
            layer = std::make_unique<Flatten>();
        } else {
            throw ConfigError("ArchSpec: unknown layer type " + spec.type);
        }
        if (layer->has_params()) {
            Tensor& w = *layer->weights();
            const int fan_in = w.shape[1];
            const double stddev = std::sqrt(2.0 / fan_in);
            RngStream stream =
                RngStream::derive(init_seed, "init/" + std::to_string(layer_index));
            for (auto& v : w.data) v = stream.normal(0.0, stddev);
        }
        shape = layer->output_shape(shape);
        model.layers.push_back(std::move(layer));
        ++layer_index;
    }
    if (shape.size() != 2 || shape[1] != arch.n_classes) {
        throw ConfigError("ArchSpec: network does not end in n_classes logits");
    }
    return model;
}

double top1_accuracy(const Tensor& logits, std::span<const int> labels) {
    const int n = logits.shape[0], classes = logits.shape[1];
    if (n != static_cast<int>(labels.size())) throw ConfigError("top1_accuracy: size mismatch");
    int correct = 0;
    for (int r = 0; r < n; ++r) {
        const double* row = &logits.data[static_cast<size_t>(r) * classes];
        int best = 0;
        for (int i = 1; i < classes; ++i) {
            if (row[i] > row[best]) best = i;
        }
        correct += best == labels[r] ? 1 : 0;
    }
    return static_cast<double>(correct) / n;
}

// ---------------------------------------------------------------------------
// Checkpoint format: "CIMCKPT1" magic, u32 JSON header length, JSON header
// (arch + tensor shapes), then raw little-endian float64 blobs in order.
// ---------------------------------------------------------------------------

namespace {

nlohmann::ordered_json arch_to_json(const ArchSpec& arch) {
    nlohmann::ordered_json j;
    j["input_shape"] = arch.input_shape;
    j["n_classes"] = arch.n_classes;
    j["quant"] = {{"act_bits", arch.quant.act_bits},
                  {"weight_bits", arch.quant.weight_bits},
                  {"act_clip", arch.quant.act_clip}};
    j["layers"] = nlohmann::ordered_json::array();
    for (const auto& l : arch.layers) {
        j["layers"].push_back({{"type", l.type},
                               {"out", l.out},
                               {"kernel", l.kernel},
                               {"stride", l.stride},
                               {"pad", l.pad},
                               {"window", l.window}});
    }
    return j;
}

ArchSpec arch_from_json(const nlohmann::json& j) {
    ArchSpec arch;
    arch.input_shape = j.at("input_shape").get<std::vector<int>>();
    arch.n_classes = j.at("n_classes").get<int>();
    arch.quant.act_bits = j.at("quant").at("act_bits").get<int>();
    arch.quant.weight_bits = j.at("quant").at("weight_bits").get<int>();
    arch.quant.act_clip = j.at("quant").at("act_clip").get<double>();
    for (const auto& l : j.at("layers")) {
        LayerSpec spec;
        spec.type = l.at("type").get<std::string>();
        spec.out = l.at("out").get<int>();
        spec.kernel = l.at("kernel").get<int>();
        spec.stride = l.at("stride").get<int>();
        spec.pad = l.at("pad").get<int>();
        spec.window = l.at("window").get<int>();
        arch.layers.push_back(spec);
    }
    return arch;
}

constexpr char kCheckpointMagic[8] = {'C', 'I', 'M', 'C', 'K', 'P', 'T', '1'};

} // namespace

void QuantizedModel::save_checkpoint(const std::filesystem::path& path) const {
    nlohmann::ordered_json header;
    header["format_version"] = 1;
    header["arch"] = arch_to_json(arch);
    header["clips"] = nlohmann::json::array();
    for (const auto* layer : param_layers()) {
        header["clips"].push_back(layer->quant_config()->act_clip);
    }
    const std::string htxt = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
    out.write(kCheckpointMagic, 8);
    const std::uint32_t hlen = static_cast<std::uint32_t>(htxt.size());
    out.write(reinterpret_cast<const char*>(&hlen), 4);
    out.write(htxt.data(), hlen);
    for (const auto* layer : param_layers()) {
        auto* mut = const_cast<Layer*>(layer);
        const Tensor& w = *mut->weights();
        const Tensor& b = *mut->bias();
        out.write(reinterpret_cast<const char*>(w.ptr()), w.numel() * 8);
        out.write(reinterpret_cast<const char*>(b.ptr()), b.numel() * 8);
    }
    if (!out) throw DataError("checkpoint write failed: " + path.string());
}

QuantizedModel QuantizedModel::load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw DataError("not a checkpoint file: " + path.string());
    }
    std::uint32_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 4);
    std::string htxt(hlen, '\0');
    in.read(htxt.data(), hlen);
    if (!in) throw DataError("truncated checkpoint header: " + path.string());
    const auto header = nlohmann::json::parse(htxt);
    QuantizedModel model = build_model(arch_from_json(header.at("arch")), 0);
    auto params = model.param_layers();
    const auto clips = header.at("clips").get<std::vector<double>>();
    if (clips.size() != params.size()) throw DataError("checkpoint clip count mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& w = *params[i]->weights();
        Tensor& b = *params[i]->bias();
        in.read(reinterpret_cast<char*>(w.ptr()), w.numel() * 8);
        in.read(reinterpret_cast<char*>(b.ptr()), b.numel() * 8);
        params[i]->quant_config()->act_clip = clips[i];
    }
    if (!in) throw DataError("truncated checkpoint tensors: " + path.string());
    return model;
}

std::uint64_t QuantizedModel::weight_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const double* p, std::int64_t n) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(p);
        for (std::int64_t i = 0; i < n * 8; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto* layer : param_layers()) {
        auto* mut = const_cast<Layer*>(layer);
        mix(mut->weights()->ptr(), mut->weights()->numel());
        mix(mut->bias()->ptr(), mut->bias()->numel());
    }
    return h;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check (float mode).
// ---------------------------------------------------------------------------

double gradient_check(const Layer& layer, const std::vector<int>& in_shape, std::uint64_t seed,
                      double eps) {
    auto probe = layer.clone();
    RngStream stream(seed);
    Tensor x(in_shape);
    for (auto& v : x.data) v = stream.normal(0.0, 1.0);
    const auto out_shape = probe->output_shape(in_shape);
    Tensor dy(out_shape);
    for (auto& v : dy.data) v = stream.normal(0.0, 1.0);

    ForwardOptions opt;
    opt.mode = QuantMode::kFloat;

    // Scalar objective: sum(dy * forward(x)).
    auto objective = [&](const Tensor& input) {
        LayerCache scratch;
        const Tensor y = probe->forward(input, opt, scratch);
        double s = 0.0;
        for (std::int64_t i = 0; i < y.numel(); ++i) s += dy.data[i] * y.data[i];
        return s;
    };

    LayerCache cache;
    probe->forward(x, opt, cache);
    ParamGrads grads;
    const Tensor dx = probe->backward(dy, cache, probe->has_params() ? &grads : nullptr);

    double max_rel = 0.0;
    auto compare = [&](double analytic, double numeric) {
        const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::fabs(analytic - numeric) / denom);
    };

    for (std::int64_t i = 0; i < x.numel(); ++i) {
        Tensor xp = x, xm = x;
        xp.data[i] += eps;
        xm.data[i] -= eps;
        compare(dx.data[i], (objective(xp) - objective(xm)) / (2 * eps));
    }
    if (probe->has_params()) {
        Tensor& w = *probe->weights();
        for (std::int64_t i = 0; i < w.numel(); ++i) {
            const double save = w.data[i];
            w.data[i] = save + eps;
            const double up = objective(x);
            w.data[i] = save - eps;
            const double down = objective(x);
            w.data[i] = save;
            compare(grads.d_weights.data[i], (up - down) / (2 * eps));
        }
        Tensor& b = *probe->bias();
        for (std::int64_t i = 0; i < b.numel(); ++i) {
            const double save = b.data[i];
            b.data[i] = save + eps;
            const double up = objective(x);
            b.data[i] = save - eps;
            const double down = objective(x);
            b.data[i] = save;
            compare(grads.d_bias.data[i], (up - down) / (2 * eps));
        }
    }
    return max_rel;
}

} // namespace cimsim
