#include "cimsim/crossbar.hpp"

#include <numeric>
#include <string>

#include "cimsim/error.hpp"

namespace cimsim {

void ArrayConfig::validate() const {
    if (rows < 1 || cols < 1) throw ConfigError("ArrayConfig: rows/cols must be positive");
    if (cell_bits < 1 || cell_bits > 8) throw ConfigError("ArrayConfig: cell_bits must be in [1,8]");
    if (rows_per_access < 1 || rows_per_access > rows) {
        throw ConfigError("ArrayConfig: rows_per_access must be in [1, rows]");
    }
    adc_spec.validate();
    if (!clip_psum && adc_spec.psum_max < max_access_psum()) {
        throw ConfigError("ArrayConfig: psum range " + std::to_string(max_access_psum()) +
                          " exceeds ADC range " + std::to_string(adc_spec.psum_max) +
                          " and clipping is disabled");
    }
}

int MappedLayer::accesses_per_sub_array(int sub_index) const {
    const int r = sub_arrays[sub_index].rows;
    return (r + rows_per_access - 1) / rows_per_access;
}

std::pair<int, int> MappedLayer::access_rows(int sub_index, int access) const {
    const int begin = access * rows_per_access;
    const int end = std::min(begin + rows_per_access, sub_arrays[sub_index].rows);
    return {begin, end - begin};
}

MappedLayer map_weights(const std::vector<std::int32_t>& w_q, int out_features, int in_features,
                        const ArrayConfig& cfg, int weight_bits, int act_bits) {
    cfg.validate();
    if (weight_bits < 1 || weight_bits > 16) throw ConfigError("map_weights: weight_bits out of range");
    if (static_cast<std::int64_t>(out_features) * in_features !=
        static_cast<std::int64_t>(w_q.size())) {
        throw ConfigError("map_weights: weight matrix size mismatch");
    }
    const std::int32_t shift = 1 << (weight_bits - 1);
    const std::int32_t lo = -shift, hi = shift - 1;
    for (std::int32_t w : w_q) {
        if (w < lo || w > hi) {
            throw ConfigError("map_weights: weight " + std::to_string(w) +
                              " outside signed range for " + std::to_string(weight_bits) + " bits");
        }
    }

    MappedLayer layer;
    layer.in_features = in_features;
    layer.out_features = out_features;
    layer.weight_bits = weight_bits;
    layer.cell_bits = cfg.cell_bits;
    layer.n_slices = (weight_bits + cfg.cell_bits - 1) / cfg.cell_bits;
    layer.rows_per_access = cfg.rows_per_access;
    layer.act_bits = act_bits;
    layer.bias_weight = shift;
    const auto g = std::gcd(static_cast<std::int64_t>(cfg.adc_spec.psum_max),
                            static_cast<std::int64_t>(cfg.adc_spec.n_thresholds));
    layer.code_step_num = cfg.adc_spec.psum_max / g;
    layer.code_step_den = cfg.adc_spec.n_thresholds / g;

    const int n_row_groups = (in_features + cfg.rows - 1) / cfg.rows;
    const int total_cols = out_features * layer.n_slices;
    const int n_col_groups = (total_cols + cfg.cols - 1) / cfg.cols;
    const std::uint8_t mask = static_cast<std::uint8_t>((1 << cfg.cell_bits) - 1);

    for (int rg = 0; rg < n_row_groups; ++rg) {
        const int row_offset = rg * cfg.rows;
        const int rows_here = std::min(cfg.rows, in_features - row_offset);
        for (int cg = 0; cg < n_col_groups; ++cg) {
            const int col_offset = cg * cfg.cols;
            const int cols_here = std::min(cfg.cols, total_cols - col_offset);
            SubArray sub;
            sub.rows = rows_here;
            sub.cols = cols_here;
            sub.row_group = rg;
            sub.col_group = cg;
            sub.row_offset = row_offset;
            sub.cells.resize(static_cast<size_t>(rows_here) * cols_here);
            sub.col_out.resize(cols_here);
            sub.col_significance.resize(cols_here);
            for (int c = 0; c < cols_here; ++c) {
                const int pair = col_offset + c;
                const int o = pair / layer.n_slices;
                const int s = pair % layer.n_slices;
                sub.col_out[c] = o;
                sub.col_significance[c] = std::int64_t{1} << (cfg.cell_bits * s);
                for (int r = 0; r < rows_here; ++r) {
                    const std::int32_t u = w_q[static_cast<size_t>(o) * in_features + row_offset + r] + shift;
                    sub.cells[static_cast<size_t>(r) * cols_here + c] =
                        static_cast<std::uint8_t>((u >> (cfg.cell_bits * s)) & mask);
                }
            }
            layer.sub_arrays.push_back(std::move(sub));
        }
    }
    return layer;
}

std::vector<std::int64_t> vmm_exact(const SubArray& sub, std::span<const std::uint8_t> input_bits,
                                    int row_begin) {
    if (row_begin < 0 || row_begin + static_cast<int>(input_bits.size()) > sub.rows) {
        throw ConfigError("vmm_exact: input bit vector does not fit the sub-array rows");
    }
    std::vector<std::int64_t> acc(sub.cols, 0);
    for (size_t r = 0; r < input_bits.size(); ++r) {
        if (!input_bits[r]) continue;
        const std::uint8_t* row = &sub.cells[static_cast<size_t>(row_begin + r) * sub.cols];
        for (int c = 0; c < sub.cols; ++c) acc[c] += row[c];
    }
    return acc;
}

std::vector<int> vmm_chip(const SubArray& sub, std::span<const std::uint8_t> input_bits,
                          std::span<const AdcInstance> adcs, int row_begin) {
    if (static_cast<int>(adcs.size()) != sub.cols) {
        throw ConfigError("vmm_chip: need one ADC instance per column");
    }
    const auto psums = vmm_exact(sub, input_bits, row_begin);
    std::vector<int> codes(sub.cols);
    for (int c = 0; c < sub.cols; ++c) {
        codes[c] = convert(adcs[c], static_cast<double>(psums[c]));
    }
    return codes;
}

std::vector<std::int64_t> accumulate(std::span<const PsumCodes> terms, const MappedLayer& layer) {
    const int n_subs = static_cast<int>(layer.sub_arrays.size());
    std::vector<int> accesses(n_subs);
    std::vector<size_t> term_base(n_subs + 1, 0);
    for (int s = 0; s < n_subs; ++s) {
        accesses[s] = layer.accesses_per_sub_array(s);
        term_base[s + 1] = term_base[s] + static_cast<size_t>(accesses[s]) * layer.act_bits;
    }
    std::vector<char> seen(term_base[n_subs], 0);

    std::vector<std::int64_t> code_sum(layer.out_features, 0);
    std::int64_t input_sum = 0; // bit-weighted count of active inputs, per row group once

    for (const PsumCodes& term : terms) {
        if (term.sub_array < 0 || term.sub_array >= n_subs) {
            throw ConfigError("accumulate: sub-array index out of range");
        }
        const SubArray& sub = layer.sub_arrays[term.sub_array];
        if (term.access < 0 || term.access >= accesses[term.sub_array] || term.input_bit < 0 ||
            term.input_bit >= layer.act_bits) {
            throw ConfigError("accumulate: term coordinates out of range");
        }
        if (static_cast<int>(term.codes.size()) != sub.cols) {
            throw ConfigError("accumulate: code count does not match sub-array columns");
        }
        const size_t key = term_base[term.sub_array] +
                           static_cast<size_t>(term.access) * layer.act_bits + term.input_bit;
        if (seen[key]) throw ConfigError("accumulate: duplicate term");
        seen[key] = 1;

        const std::int64_t bit_weight = std::int64_t{1} << term.input_bit;
        for (int c = 0; c < sub.cols; ++c) {
            code_sum[sub.col_out[c]] += term.codes[c] * sub.col_significance[c] * bit_weight;
        }
        // Sub-arrays in the same row group see the same inputs; count the
        // active-input sum once (from the col_group 0 copy).
        if (sub.col_group == 0) input_sum += term.active_input_sum * bit_weight;
    }

    for (char s : seen) {
        if (!s) throw ConfigError("accumulate: incomplete term set");
    }

    std::vector<std::int64_t> out(layer.out_features);
    const std::int64_t bias = layer.bias_weight * input_sum * layer.code_step_den;
    for (int o = 0; o < layer.out_features; ++o) {
        out[o] = code_sum[o] * layer.code_step_num - bias;
    }
    return out;
}

} // namespace cimsim
