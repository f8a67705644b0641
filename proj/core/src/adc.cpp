#include "cimsim/adc.hpp"

#include <algorithm>
#include <cmath>

#include "cimsim/error.hpp"
#include "cimsim/gaussian.hpp"

namespace cimsim {

std::string to_string(AdcKind kind) {
    return kind == AdcKind::kFlash ? "flash" : "sar";
}

AdcKind adc_kind_from_string(const std::string& s) {
    if (s == "flash") return AdcKind::kFlash;
    if (s == "sar") return AdcKind::kSar;
    throw ConfigError("unknown ADC kind: " + s);
}

double pass_rate_at(const PassRateCurve& curve, int level, int n_levels) {
    if (level < 1 || level > n_levels) {
        throw ConfigError("pass_rate_at: level " + std::to_string(level) + " outside [1, " +
                          std::to_string(n_levels) + "]");
    }
    if (curve.level_table) {
        if (static_cast<int>(curve.level_table->size()) != n_levels) {
            throw ConfigError("pass_rate_at: level table length mismatch");
        }
        // Table entries may be exactly 1 (an ideal, offset-free level).
        return (*curve.level_table)[level - 1];
    }
    const double frac = n_levels > 1 ? static_cast<double>(level - 1) / (n_levels - 1) : 0.0;
    const double base = curve.p_low - (curve.p_low - curve.p_high) * std::pow(frac, curve.shape_gamma);
    if (curve.wl_param == PassRateCurve::kWlReference || level == 1) {
        return base; // ramp exponent is 0 at level 1: exact p_low
    }
    const double scale = std::pow(curve.wl_param / PassRateCurve::kWlReference, frac);
    return norm_cdf(inv_norm_cdf(base) * scale);
}

AdcSpec AdcSpec::uniform(int bits, int psum_max) {
    return compressed(bits, psum_max, 0.0);
}

AdcSpec AdcSpec::compressed(int bits, int psum_max, double step_compression) {
    if (bits < 1 || bits > 16) throw ConfigError("AdcSpec: bits must be in [1,16]");
    if (psum_max < 1) throw ConfigError("AdcSpec: psum_max must be positive");
    if (step_compression < 0.0) throw ConfigError("AdcSpec: step_compression must be >= 0");
    AdcSpec spec;
    spec.bits = bits;
    spec.n_thresholds = (1 << bits) - 1;
    spec.psum_max = psum_max;
    spec.step_compression = step_compression;
    const int m = spec.n_thresholds;
    // Raw gap for code bin j is 1/(1 + c*j); threshold k sits half a bin past
    // the cumulative sum, rescaled so the grid spans (0, psum_max).
    std::vector<double> raw(m);
    double total = 0.0;
    for (int j = 1; j <= m; ++j) {
        raw[j - 1] = 1.0 / (1.0 + step_compression * j);
        total += raw[j - 1];
    }
    spec.ideal_thresholds.resize(m);
    double cum = 0.0;
    for (int k = 1; k <= m; ++k) {
        cum += raw[k - 1];
        spec.ideal_thresholds[k - 1] = psum_max * (cum - 0.5 * raw[0]) / total;
    }
    spec.validate();
    return spec;
}

AdcSpec AdcSpec::explicit_thresholds(int bits, int psum_max, std::vector<double> thresholds) {
    AdcSpec spec;
    spec.bits = bits;
    spec.n_thresholds = (1 << bits) - 1;
    spec.psum_max = psum_max;
    spec.step_compression = 0.0;
    spec.ideal_thresholds = std::move(thresholds);
    spec.validate();
    return spec;
}

void AdcSpec::validate() const {
    if (n_thresholds != (1 << bits) - 1) {
        throw ConfigError("AdcSpec: n_thresholds must equal 2^bits - 1");
    }
    if (static_cast<int>(ideal_thresholds.size()) != n_thresholds) {
        throw ConfigError("AdcSpec: threshold count mismatch");
    }
    double prev = 0.0;
    for (double t : ideal_thresholds) {
        if (!(t > prev && t < psum_max)) {
            throw ConfigError("AdcSpec: thresholds must be strictly increasing inside (0, psum_max)");
        }
        prev = t;
    }
}

namespace {

// Half the local step at threshold k: half the mean of the two adjacent
// gaps; the first and last level reuse their single neighbor gap.
double half_local_step(const std::vector<double>& t, int k) {
    const int m = static_cast<int>(t.size());
    if (m == 1) return 0.25 * 2.0 * t[0]; // single threshold: step is the full span below it
    const double g_left = k > 0 ? t[k] - t[k - 1] : t[1] - t[0];
    const double g_right = k < m - 1 ? t[k + 1] - t[k] : t[m - 1] - t[m - 2];
    return 0.25 * (g_left + g_right);
}

} // namespace

SigmaProfile sigma_profile(const PassRateCurve& curve, const AdcSpec& spec) {
    spec.validate();
    const int m = spec.n_thresholds;
    SigmaProfile profile;
    profile.sigmas.resize(m);
    double prev_rate = 1.0;
    for (int k = 1; k <= m; ++k) {
        const double p = pass_rate_at(curve, k, m);
        if (!(p > 0.5 && p <= 1.0)) {
            throw NumericError("sigma_profile: pass rate at level " + std::to_string(k) +
                               " must lie in (0.5, 1]");
        }
        if (p > prev_rate + 1e-12) {
            throw NumericError("sigma_profile: pass-rate curve must be non-increasing in level");
        }
        prev_rate = p;
        // A perfect pass rate means the comparison never fails: zero offset.
        profile.sigmas[k - 1] =
            p == 1.0 ? 0.0 : half_local_step(spec.ideal_thresholds, k - 1) / inv_norm_cdf(p);
    }
    return profile;
}

void AdcInstance::rebuild_shifted() {
    const int m = spec.n_thresholds;
    shifted.resize(m);
    for (int k = 0; k < m; ++k) shifted[k] = spec.ideal_thresholds[k] + offsets[k];
    shifted_sorted = shifted;
    std::sort(shifted_sorted.begin(), shifted_sorted.end());
}

AdcInstance sample_instance(const AdcSpec& spec, const SigmaProfile& profile, AdcKind kind,
                            RngStream& stream) {
    spec.validate();
    const int m = spec.n_thresholds;
    if (static_cast<int>(profile.sigmas.size()) != m) {
        throw ConfigError("sample_instance: sigma profile length mismatch");
    }
    AdcInstance inst;
    inst.spec = spec;
    inst.kind = kind;
    inst.offsets.resize(m);
    if (kind == AdcKind::kFlash) {
        for (int k = 0; k < m; ++k) inst.offsets[k] = stream.normal(0.0, profile.sigmas[k]);
    } else {
        const double z = stream.normal(0.0, 1.0);
        for (int k = 0; k < m; ++k) inst.offsets[k] = z * profile.sigmas[k];
    }
    inst.rebuild_shifted();
    return inst;
}

int ideal_convert(const AdcSpec& spec, double value) {
    const auto& t = spec.ideal_thresholds;
    // Thresholds are strictly increasing, so the count of thresholds below
    // value is the index of the first one not below it.
    return static_cast<int>(std::lower_bound(t.begin(), t.end(), value) - t.begin());
}

int convert(const AdcInstance& instance, double value) {
    if (instance.kind == AdcKind::kFlash) {
        const auto& t = instance.shifted_sorted;
        return static_cast<int>(std::lower_bound(t.begin(), t.end(), value) - t.begin());
    }
    // SAR: successive approximation, MSB first, exactly `bits` comparisons.
    int code = 0;
    for (int bit = instance.spec.bits - 1; bit >= 0; --bit) {
        const int trial = code | (1 << bit);
        if (instance.shifted[trial - 1] < value) code = trial;
    }
    return code;
}

} // namespace cimsim
