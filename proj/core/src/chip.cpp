#include "cimsim/chip.hpp"

#include <bit>
#include <fstream>

#include "json.hpp"

#include "cimsim/error.hpp"

namespace cimsim {

namespace {

nlohmann::ordered_json adc_spec_to_json(const AdcSpec& spec) {
    return {{"bits", spec.bits},
            {"n_thresholds", spec.n_thresholds},
            {"psum_max", spec.psum_max},
            {"step_compression", spec.step_compression},
            {"ideal_thresholds", spec.ideal_thresholds}};
}

AdcSpec adc_spec_from_json(const nlohmann::json& j) {
    AdcSpec spec;
    spec.bits = j.at("bits").get<int>();
    spec.n_thresholds = j.at("n_thresholds").get<int>();
    spec.psum_max = j.at("psum_max").get<int>();
    spec.step_compression = j.at("step_compression").get<double>();
    spec.ideal_thresholds = j.at("ideal_thresholds").get<std::vector<double>>();
    spec.validate();
    return spec;
}

} // namespace

void ChipDescriptor::validate() const {
    if (rng_algorithm != RngStream::algorithm_id()) {
        throw ConfigError("ChipDescriptor: unsupported rng algorithm '" + rng_algorithm + "'");
    }
    array.validate();
    if (curve.level_table) {
        for (double p : *curve.level_table) {
            if (!(p > 0.5 && p <= 1.0)) {
                throw ConfigError("ChipDescriptor: level-table pass rates must lie in (0.5, 1]");
            }
        }
    } else if (!(curve.p_high > 0.5 && curve.p_high <= curve.p_low && curve.p_low < 1.0)) {
        throw ConfigError("ChipDescriptor: pass-rate curve must satisfy 0.5 < p_high <= p_low < 1");
    }
    if (!(curve.shape_gamma > 0.0) || !(curve.wl_param > 0.0)) {
        throw ConfigError("ChipDescriptor: shape_gamma and wl_param must be positive");
    }
}

std::string ChipDescriptor::to_json() const {
    nlohmann::ordered_json j;
    j["format_version"] = kFormatVersion;
    j["chip_seed"] = chip_seed;
    j["rng_algorithm"] = rng_algorithm;
    j["adc_kind"] = to_string(adc_kind);
    j["array"] = {{"rows", array.rows},
                  {"cols", array.cols},
                  {"cell_bits", array.cell_bits},
                  {"rows_per_access", array.rows_per_access},
                  {"clip_psum", array.clip_psum},
                  {"adc_spec", adc_spec_to_json(array.adc_spec)}};
    j["pass_rate"] = {{"p_low", curve.p_low},
                      {"p_high", curve.p_high},
                      {"shape_gamma", curve.shape_gamma},
                      {"wl_param", curve.wl_param}};
    if (curve.level_table) j["pass_rate"]["level_table"] = *curve.level_table;
    return j.dump(2) + "\n";
}

ChipDescriptor ChipDescriptor::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("chip descriptor: invalid JSON: ") + e.what());
    }
    if (j.at("format_version").get<int>() != kFormatVersion) {
        throw ConfigError("chip descriptor: unsupported format_version");
    }
    ChipDescriptor d;
    d.chip_seed = j.at("chip_seed").get<std::uint64_t>();
    d.rng_algorithm = j.at("rng_algorithm").get<std::string>();
    d.adc_kind = adc_kind_from_string(j.at("adc_kind").get<std::string>());
    const auto& a = j.at("array");
    d.array.rows = a.at("rows").get<int>();
    d.array.cols = a.at("cols").get<int>();
    d.array.cell_bits = a.at("cell_bits").get<int>();
    d.array.rows_per_access = a.at("rows_per_access").get<int>();
    d.array.clip_psum = a.at("clip_psum").get<bool>();
    d.array.adc_spec = adc_spec_from_json(a.at("adc_spec"));
    const auto& p = j.at("pass_rate");
    d.curve.p_low = p.at("p_low").get<double>();
    d.curve.p_high = p.at("p_high").get<double>();
    d.curve.shape_gamma = p.at("shape_gamma").get<double>();
    d.curve.wl_param = p.at("wl_param").get<double>();
    if (p.contains("level_table")) d.curve.level_table = p.at("level_table").get<std::vector<double>>();
    d.validate();
    return d;
}

void ChipDescriptor::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write chip descriptor: " + path.string());
    out << to_json();
}

ChipDescriptor ChipDescriptor::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open chip descriptor: " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json(text);
}

ChipInstance::ChipInstance(ChipDescriptor descriptor) : desc_(std::move(descriptor)) {
    desc_.validate();
    profile_ = cimsim::sigma_profile(desc_.curve, desc_.array.adc_spec);
}

void ChipInstance::ensure_adcs(int linear_id, const MappedLayer& layer) {
    if (static_cast<int>(adc_table_.size()) <= linear_id) {
        adc_table_.resize(linear_id + 1);
        lut_.resize(linear_id + 1);
    }
    auto& per_layer = adc_table_[linear_id];
    if (!per_layer.empty()) {
        if (per_layer.size() != layer.sub_arrays.size()) {
            throw ConfigError("chip: reprogrammed layer shape does not match the existing ADC table");
        }
        return;
    }
    per_layer.resize(layer.sub_arrays.size());
    auto& per_layer_lut = lut_[linear_id];
    per_layer_lut.resize(layer.sub_arrays.size());
    const int lut_width = desc_.array.max_access_psum() + 1;
    for (size_t sa = 0; sa < layer.sub_arrays.size(); ++sa) {
        const int cols = layer.sub_arrays[sa].cols;
        per_layer[sa].reserve(cols);
        per_layer_lut[sa].resize(static_cast<size_t>(cols) * lut_width);
        for (int c = 0; c < cols; ++c) {
            const std::string label = "adc/" + std::to_string(linear_id) + "/" + std::to_string(sa) +
                                      "/" + std::to_string(c);
            RngStream stream = RngStream::derive(desc_.chip_seed, label);
            per_layer[sa].push_back(
                sample_instance(desc_.array.adc_spec, profile_, desc_.adc_kind, stream));
            // Integer partial sums admit a code lookup table per column.
            for (int v = 0; v < lut_width; ++v) {
                per_layer_lut[sa][static_cast<size_t>(c) * lut_width + v] =
                    static_cast<std::uint8_t>(convert(per_layer[sa][c], static_cast<double>(v)));
            }
        }
    }
}

void ChipInstance::program(const QuantizedModel& model) {
    auto snaps = model.quantized_snapshot();
    if (snaps.empty()) throw ConfigError("chip: model has no linear layers to program");
    std::vector<MappedLayer> mapped;
    mapped.reserve(snaps.size());
    for (size_t i = 0; i < snaps.size(); ++i) {
        mapped.push_back(map_weights(snaps[i].w_q, snaps[i].out, snaps[i].in, desc_.array,
                                     snaps[i].qcfg.weight_bits, snaps[i].qcfg.act_bits));
        ensure_adcs(static_cast<int>(i), mapped.back());
    }
    mapped_ = std::move(mapped);
    snapshot_ = std::move(snaps);
    shadow_ = QuantizedModel::from_snapshot(model.arch, snapshot_);
    has_shadow_ = true;
}

const std::vector<LinearSnapshot>& ChipInstance::readout() const {
    if (!programmed()) throw StateError("chip: readout before any weights were programmed");
    return snapshot_;
}

const ArchSpec& ChipInstance::programmed_arch() const {
    if (!has_shadow_) throw StateError("chip: not programmed");
    return shadow_.arch;
}

QuantizedModel ChipInstance::readout_model() const {
    return QuantizedModel::from_snapshot(programmed_arch(), readout());
}

Tensor ChipInstance::forward(const Tensor& batch, ModelCache* cache) const {
    if (!programmed()) throw StateError("chip: forward before any weights were programmed");
    return shadow_.forward(batch, cache, const_cast<ChipInstance*>(this), QuantMode::kQuantized);
}

std::int64_t ChipInstance::denominator(int linear_id) const {
    return mapped_[linear_id].code_step_den;
}

void ChipInstance::linear(int linear_id, const std::uint8_t* x_q, int n_rows, int in_dim,
                          std::int64_t* y_out, int out_dim) const {
    if (linear_id < 0 || linear_id >= static_cast<int>(mapped_.size())) {
        throw StateError("chip: linear layer index out of range");
    }
    const MappedLayer& layer = mapped_[linear_id];
    if (in_dim != layer.in_features || out_dim != layer.out_features) {
        throw ConfigError("chip: input dimensions do not match the programmed layer");
    }
    const int act_bits = layer.act_bits;
    const int rpa = layer.rows_per_access;
    const int lut_width = desc_.array.max_access_psum() + 1;
    const auto& layer_lut = lut_[linear_id];

    std::vector<std::int32_t> plane; // bitplane psums, [bit][col]
    std::vector<std::int64_t> code_sum(out_dim);

    for (int row = 0; row < n_rows; ++row) {
        const std::uint8_t* x = x_q + static_cast<size_t>(row) * in_dim;
        std::fill(code_sum.begin(), code_sum.end(), 0);
        std::int64_t input_sum = 0;
        for (int i = 0; i < in_dim; ++i) input_sum += x[i];

        for (size_t sa = 0; sa < layer.sub_arrays.size(); ++sa) {
            const SubArray& sub = layer.sub_arrays[sa];
            const int cols = sub.cols;
            plane.assign(static_cast<size_t>(act_bits) * cols, 0);
            const std::uint8_t* lut = layer_lut[sa].data();
            const int accesses = (sub.rows + rpa - 1) / rpa;
            for (int a = 0; a < accesses; ++a) {
                const int begin = a * rpa;
                const int end = std::min(begin + rpa, sub.rows);
                std::fill(plane.begin(), plane.end(), 0);
                for (int r = begin; r < end; ++r) {
                    unsigned v = x[sub.row_offset + r];
                    if (!v) continue;
                    const std::uint8_t* cells = &sub.cells[static_cast<size_t>(r) * cols];
                    while (v) {
                        const int b = std::countr_zero(v);
                        v &= v - 1;
                        std::int32_t* acc = &plane[static_cast<size_t>(b) * cols];
                        for (int c = 0; c < cols; ++c) acc[c] += cells[c];
                    }
                }
                for (int b = 0; b < act_bits; ++b) {
                    const std::int32_t* acc = &plane[static_cast<size_t>(b) * cols];
                    const std::int64_t bit_weight = std::int64_t{1} << b;
                    for (int c = 0; c < cols; ++c) {
                        const int code = lut[static_cast<size_t>(c) * lut_width + acc[c]];
                        code_sum[sub.col_out[c]] += code * sub.col_significance[c] * bit_weight;
                    }
                }
            }
        }

        std::int64_t* y = y_out + static_cast<size_t>(row) * out_dim;
        const std::int64_t bias = layer.bias_weight * input_sum * layer.code_step_den;
        for (int o = 0; o < out_dim; ++o) {
            y[o] = code_sum[o] * layer.code_step_num - bias;
        }
    }
}

std::uint64_t ChipInstance::offset_table_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& per_layer : adc_table_) {
        for (const auto& per_sub : per_layer) {
            for (const auto& inst : per_sub) {
                const auto* bytes = reinterpret_cast<const unsigned char*>(inst.offsets.data());
                for (size_t i = 0; i < inst.offsets.size() * 8; ++i) {
                    h ^= bytes[i];
                    h *= 0x100000001b3ULL;
                }
            }
        }
    }
    return h;
}

} // namespace cimsim
