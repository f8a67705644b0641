#pragma once

namespace cimsim {

/// Standard normal CDF, computed through erfc for accuracy in both tails.
double norm_cdf(double z);

/// Standard normal quantile: returns z with norm_cdf(z) == p.
///
/// Acklam's rational approximation (relative error < 1.15e-9) refined by one
/// Newton step on norm_cdf, which brings the absolute error near machine
/// precision over (0,1). Throws cimsim::NumericError unless 0 < p < 1.
double inv_norm_cdf(double p);

} // namespace cimsim
