#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cimsim/adc.hpp"

namespace cimsim {

/// Geometry and conversion policy shared by every sub-array of a chip.
struct ArrayConfig {
    int rows = 128;
    int cols = 128;
    int cell_bits = 2;
    int rows_per_access = 10;
    AdcSpec adc_spec = AdcSpec::uniform(5, 31);
    /// Partial sums above adc_spec.psum_max saturate at the top code. When
    /// false, configurations where the psum range can exceed the ADC range
    /// are rejected at validation.
    bool clip_psum = true;

    int max_cell_value() const { return (1 << cell_bits) - 1; }
    int max_access_psum() const { return rows_per_access * max_cell_value(); }
    void validate() const;
};

/// One physical sub-array: a rows x cols block of cells plus the metadata to
/// place its columns back into the layer output. Column c of the block holds
/// slice `col_slice[c]` of output feature `col_out[c]`.
struct SubArray {
    int rows = 0;
    int cols = 0;
    int row_group = 0;      // which chunk of input features
    int col_group = 0;      // which chunk of (feature, slice) pairs
    int row_offset = 0;     // first input feature of this block
    std::vector<std::uint8_t> cells;     // rows*cols row-major, < 2^cell_bits
    std::vector<int> col_out;            // output feature per column
    std::vector<std::int64_t> col_significance; // 2^(cell_bits*slice) per column

    std::uint8_t cell(int r, int c) const { return cells[static_cast<size_t>(r) * cols + c]; }
};

/// A weight matrix sliced onto sub-arrays, with the bookkeeping needed to
/// reassemble full-precision outputs.
struct MappedLayer {
    std::vector<SubArray> sub_arrays;
    int in_features = 0;
    int out_features = 0;
    int weight_bits = 0;
    int cell_bits = 0;
    int n_slices = 0;
    int rows_per_access = 0;
    int act_bits = 0; // input bit-serial width used during accumulation
    /// Digital correction for the signed->unsigned weight shift: the mapped
    /// cells store u = w + 2^(weight_bits-1), so 2^(weight_bits-1) times the
    /// (bit-weighted) sum of active inputs is subtracted after accumulation.
    std::int64_t bias_weight = 0;
    /// Rational code->psum step: one ADC code covers psum_max/n_thresholds
    /// partial-sum units. Accumulation keeps everything integer by scaling
    /// through by the denominator; downstream dequantization divides it out.
    std::int64_t code_step_num = 1; // psum_max
    std::int64_t code_step_den = 1; // n_thresholds

    int accesses_per_sub_array(int sub_index) const;
    /// Rows of the given access within a sub-array (last one may be short).
    std::pair<int, int> access_rows(int sub_index, int access) const;
};

/// Splits signed quantized weights into unsigned cell slices on sub-arrays.
/// Weights are shifted by 2^(weight_bits-1) to become non-negative, then cut
/// into ceil(weight_bits/cell_bits) base-2^cell_bits digits, one column per
/// digit, significance 2^(cell_bits*slice).
MappedLayer map_weights(const std::vector<std::int32_t>& w_q, int out_features, int in_features,
                        const ArrayConfig& cfg, int weight_bits, int act_bits);

/// Exact integer column sums for one access: sum of cells[i][c] over the
/// active rows where input_bits[i] == 1. Row indices are relative to
/// row_begin inside the sub-array.
std::vector<std::int64_t> vmm_exact(const SubArray& sub, std::span<const std::uint8_t> input_bits,
                                    int row_begin = 0);

/// Same access, converted per column by that column's ADC instance. Values
/// beyond the ADC range saturate at the extreme codes.
std::vector<int> vmm_chip(const SubArray& sub, std::span<const std::uint8_t> input_bits,
                          std::span<const AdcInstance> adcs, int row_begin = 0);

/// Codes produced by one (sub-array, access, input-bit-plane) term, plus the
/// digital sum of active input bits that the signed-shift correction needs.
struct PsumCodes {
    int sub_array = 0;
    int access = 0;
    int input_bit = 0;
    std::vector<int> codes;             // one per sub-array column
    std::int64_t active_input_sum = 0;  // number of 1s applied in this access
};

/// Shift-add reassembly of a full layer output from per-term codes. Every
/// (sub_array, access, input_bit) term must appear exactly once. The result
/// is scaled by code_step_den: out_scaled[o] = den * (true reassembled sum),
/// kept integer so chip outputs are bit-exact across runs.
std::vector<std::int64_t> accumulate(std::span<const PsumCodes> terms, const MappedLayer& layer);

} // namespace cimsim
