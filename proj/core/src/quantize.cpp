#include "cimsim/quantize.hpp"

#include <algorithm>
#include <cmath>

#include "cimsim/error.hpp"

namespace cimsim {

void QuantConfig::validate() const {
    if (act_bits < 1 || act_bits > 8) throw ConfigError("QuantConfig: act_bits must be in [1,8]");
    if (weight_bits < 2 || weight_bits > 16) throw ConfigError("QuantConfig: weight_bits must be in [2,16]");
    if (!(act_clip > 0.0)) throw ConfigError("QuantConfig: act_clip must be positive");
}

std::pair<std::vector<std::int32_t>, double> quantize_weights(std::span<const double> w, int bits) {
    if (bits < 2 || bits > 16) throw ConfigError("quantize_weights: bits must be in [2,16]");
    double max_abs = 0.0;
    for (double v : w) max_abs = std::max(max_abs, std::fabs(v));
    const std::int32_t qmax = (1 << (bits - 1)) - 1;
    const double scale = max_abs > 0.0 ? max_abs / qmax : 1.0;
    std::vector<std::int32_t> q(w.size());
    for (size_t i = 0; i < w.size(); ++i) {
        // Normalized form w/max * qmax (not w/scale): keeps exact ratios
        // exact so the documented half-away-from-zero rounding is honored.
        const double v = max_abs > 0.0 ? w[i] / max_abs * qmax : w[i];
        q[i] = std::clamp(static_cast<std::int32_t>(std::llround(v)), -qmax, qmax);
    }
    return {std::move(q), scale};
}

void quantize_acts(std::span<const double> x, int bits, double clip, std::uint8_t* out) {
    if (!(clip > 0.0)) throw ConfigError("quantize_acts: clip must be positive");
    if (bits < 1 || bits > 8) throw ConfigError("quantize_acts: bits must be in [1,8]");
    const double levels = static_cast<double>((1 << bits) - 1);
    const double inv = levels / clip;
    for (size_t i = 0; i < x.size(); ++i) {
        const double v = std::clamp(x[i], 0.0, clip);
        out[i] = static_cast<std::uint8_t>(std::llround(v * inv));
    }
}

double act_step(int bits, double clip) {
    return clip / static_cast<double>((1 << bits) - 1);
}

} // namespace cimsim
