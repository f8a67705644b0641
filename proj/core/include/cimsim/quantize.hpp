#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace cimsim {

/// Per-layer quantization settings. act_clip is the input clip of the layer
/// and is calibrated once on a calibration batch.
struct QuantConfig {
    int act_bits = 8;
    int weight_bits = 4;
    double act_clip = 1.0;

    void validate() const;
};

/// Symmetric uniform weight quantization, round half away from zero:
///   scale = max|w| / (2^(bits-1) - 1),  w_q = round(w / scale)
/// so w_q lies in [-(2^(bits-1)-1), +(2^(bits-1)-1)]; bits == 2 gives
/// ternary weights. An all-zero tensor uses scale 1.
std::pair<std::vector<std::int32_t>, double> quantize_weights(std::span<const double> w, int bits);

/// Unsigned activation quantization, round half away from zero:
///   x_q = round(clamp(x, 0, clip) / clip * (2^bits - 1))
/// Inputs are post-relu (or raw pixels), so non-negative.
void quantize_acts(std::span<const double> x, int bits, double clip, std::uint8_t* out);

/// Dequantization step per activation code: clip / (2^bits - 1).
double act_step(int bits, double clip);

} // namespace cimsim
