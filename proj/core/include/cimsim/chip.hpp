#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cimsim/crossbar.hpp"
#include "cimsim/model.hpp"

namespace cimsim {

/// Everything that identifies one fabricated chip. Two descriptors with
/// equal fields re-derive bit-identical offset patterns: the descriptor is
/// the chip. Offsets are never stored; they come from chip_seed through
/// label-addressed streams ("adc/<layer>/<array>/<column>"), so adding
/// layers never perturbs existing layers' offsets.
struct ChipDescriptor {
    static constexpr int kFormatVersion = 1;

    std::uint64_t chip_seed = 0;
    std::string rng_algorithm{RngStream::algorithm_id()};
    ArrayConfig array;
    PassRateCurve curve;
    AdcKind adc_kind = AdcKind::kFlash;

    std::string to_json() const;
    static ChipDescriptor from_json(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static ChipDescriptor load(const std::filesystem::path& path);
    void validate() const;
};

/// A chip: static per-column ADC instances plus whatever weights are
/// currently programmed. Offsets are fixed at fabrication; program() only
/// rewrites cells.
class ChipInstance final : public LinearBackend {
public:
    explicit ChipInstance(ChipDescriptor descriptor);

    const ChipDescriptor& descriptor() const { return desc_; }
    const SigmaProfile& sigma_profile() const { return profile_; }

    /// Quantizes the model's weights and programs them onto the arrays.
    /// Idempotent for identical weights. ADC instances for new positions are
    /// derived on first use from their labels, so the table is a pure
    /// function of the descriptor.
    void program(const QuantizedModel& model);

    bool programmed() const { return !mapped_.empty(); }

    /// The digital weights an adversary can read out: quantized tensors,
    /// scales, biases, architecture. Carries no offset information.
    const std::vector<LinearSnapshot>& readout() const;
    const ArchSpec& programmed_arch() const;

    /// Whole-network forward through the crossbar path. Conv/dense layers
    /// run on the chip; relu/pool/softmax run digitally. The cache holds the
    /// distorted activations for backprop.
    Tensor forward(const Tensor& batch, ModelCache* cache = nullptr) const;

    /// Digital twin of the programmed weights (what readout reconstructs).
    QuantizedModel readout_model() const;

    // LinearBackend
    void linear(int linear_id, const std::uint8_t* x_q, int n_rows, int in_dim, std::int64_t* y_out,
                int out_dim) const override;
    std::int64_t denominator(int linear_id) const override;

    /// FNV-1a hash over every ADC instance's offsets; program/forward must
    /// never change it.
    std::uint64_t offset_table_hash() const;

    const MappedLayer& mapped_layer(int linear_id) const { return mapped_[linear_id]; }
    const std::vector<AdcInstance>& adcs_for(int linear_id, int sub_array) const {
        return adc_table_[linear_id][sub_array];
    }

private:
    void ensure_adcs(int linear_id, const MappedLayer& layer);

    ChipDescriptor desc_;
    SigmaProfile profile_;
    std::vector<MappedLayer> mapped_;
    // adc_table_[linear][sub_array][column]
    std::vector<std::vector<std::vector<AdcInstance>>> adc_table_;
    // Integer psum -> code lookup per column, built alongside the ADC table;
    // lut_[linear][sub_array] is cols x (max_access_psum + 1), row-major.
    std::vector<std::vector<std::vector<std::uint8_t>>> lut_;
    std::vector<LinearSnapshot> snapshot_;
    QuantizedModel shadow_; // graph structure + quantized weights for forward/backward
    bool has_shadow_ = false;
};

} // namespace cimsim
