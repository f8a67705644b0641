#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cimsim/rng.hpp"

namespace cimsim {

enum class AdcKind { kFlash, kSar };

std::string to_string(AdcKind kind);
AdcKind adc_kind_from_string(const std::string& s);

/// Parametric sense-amplifier pass-rate curve over the reference levels of an
/// ADC. The pass rate is the probability that one comparison between a
/// partial sum and its nearest reference resolves correctly; it falls off
/// with level because steps shrink and sensing margins degrade as the column
/// current grows.
///
/// Base curve at level k of n (k = 1..n):
///
///   base(k) = p_low - (p_low - p_high) * ((k-1)/(n-1))^shape_gamma
///
/// wl_param stands in for the comparator transistor W/L ratio. Offsets scale
/// inversely with device size, so a larger W/L pulls pass rates toward 1.
/// The adjustment works on the normal quantile of the base rate with a
/// per-level ramp that leaves level 1 untouched:
///
///   p(k) = norm_cdf( inv_norm_cdf(base(k)) * (wl_param / 10)^((k-1)/(n-1)) )
///
/// where 10 is the reference W/L (no adjustment at wl_param == 10). With
/// wl_param <= 10 the adjusted curve stays non-increasing in k; validation
/// rejects parameter combinations that break monotonicity.
struct PassRateCurve {
    double p_low = 0.9999;
    double p_high = 0.94;
    double shape_gamma = 1.0;
    double wl_param = 10.0;
    /// Optional explicit per-level table; overrides the parametric form.
    /// Entries may be exactly 1, meaning an offset-free level.
    std::optional<std::vector<double>> level_table;

    static constexpr double kWlReference = 10.0;

    /// All levels perfect: zero offsets, the ideal-converter limit.
    static PassRateCurve ideal(int n_levels) {
        PassRateCurve c;
        c.level_table = std::vector<double>(n_levels, 1.0);
        return c;
    }
};

/// Pass rate at reference level k (1-based) of an ADC with n_levels levels.
double pass_rate_at(const PassRateCurve& curve, int level, int n_levels);

/// Static description of one converter: resolution, input range in
/// partial-sum units, and the ideal (offset-free) reference thresholds.
///
/// With step_compression == 0 thresholds are uniform:
///
///   t_k = (k - 0.5) * psum_max / n_thresholds
///
/// so with psum_max == 2^bits - 1 the code equals the integer partial sum.
/// With step_compression c > 0 the spacing shrinks at higher levels,
/// proportional to 1/(1 + c*k), renormalized to span the same range; this
/// reproduces the smaller step size at high column currents.
struct AdcSpec {
    int bits = 5;
    int n_thresholds = 31; // always 2^bits - 1
    int psum_max = 31;
    double step_compression = 0.0;
    std::vector<double> ideal_thresholds;

    static AdcSpec uniform(int bits, int psum_max);
    static AdcSpec compressed(int bits, int psum_max, double step_compression);
    /// Explicit thresholds (strictly increasing, inside (0, psum_max)).
    static AdcSpec explicit_thresholds(int bits, int psum_max, std::vector<double> thresholds);

    void validate() const;
};

/// Per-level offset standard deviations, in partial-sum units.
struct SigmaProfile {
    std::vector<double> sigmas;
};

/// Back-calculates per-level offset sigmas from a pass-rate curve.
///
/// A comparison at level k is performed with the input half a local step away
/// from the reference, so the pass rate is the Gaussian mass on the correct
/// side: p_k = norm_cdf(delta_k / sigma_k), giving
///
///   sigma_k = delta_k / inv_norm_cdf(p_k)
///
/// where delta_k is half the local step (half the mean of the two adjacent
/// threshold gaps; edge levels reuse their single neighbor gap). Pass rates
/// at or below 0.5 carry no usable information and raise NumericError.
SigmaProfile sigma_profile(const PassRateCurve& curve, const AdcSpec& spec);

/// One fabricated converter: the spec plus its static threshold offsets.
/// Flash samples every level independently; SAR reuses one comparator, so a
/// single draw z shifts every level by z * sigma_k (all offsets share the
/// sign of z).
struct AdcInstance {
    AdcSpec spec;
    AdcKind kind = AdcKind::kFlash;
    std::vector<double> offsets;

    /// Shifted thresholds in level order (SAR binary search walks these).
    std::vector<double> shifted;
    /// Sorted copy for rank conversion (Flash thermometer count).
    std::vector<double> shifted_sorted;

    void rebuild_shifted();
};

/// Samples the static offset pattern of one converter. Draw order is level
/// 1..n ascending for Flash; SAR consumes exactly one normal draw.
AdcInstance sample_instance(const AdcSpec& spec, const SigmaProfile& profile, AdcKind kind,
                            RngStream& stream);

/// Offset-free conversion: number of ideal thresholds strictly below value.
int ideal_convert(const AdcSpec& spec, double value);

/// Conversion with the instance's static offsets.
/// Flash: count of shifted thresholds strictly below value (bubble-tolerant
/// thermometer decode; equivalent to the rank of value among the shifted
/// thresholds, so offsets that disorder thresholds are handled the way a
/// ones-counting encoder handles bubbles).
/// SAR: MSB-first binary search against the shifted thresholds, exactly
/// `bits` comparisons.
int convert(const AdcInstance& instance, double value);

} // namespace cimsim
