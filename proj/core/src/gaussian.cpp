#include "cimsim/gaussian.hpp"

#include <cmath>

#include "cimsim/error.hpp"
#include "cimsim/rng.hpp"

namespace cimsim {

double norm_cdf(double z) {
    return 0.5 * std::erfc(-z * 0.70710678118654752440); // 1/sqrt(2)
}

namespace {

// Acklam's coefficients for the central and tail rational approximations.
constexpr double kA[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                         -2.759285104469687e+02, 1.383577518672690e+02,
                         -3.066479806614716e+01, 2.506628277459239e+00};
constexpr double kB[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                         -1.556989798598866e+02, 6.680131188771972e+01,
                         -1.328068155288572e+01};
constexpr double kC[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                         -2.400758277161838e+00, -2.549732539343734e+00,
                         4.374664141464968e+00,  2.938163982698783e+00};
constexpr double kD[] = {7.784695709041462e-03, 3.224671290700398e-01,
                         2.445134137142996e+00, 3.754408661907416e+00};

double acklam(double p) {
    constexpr double p_low = 0.02425;
    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        return (((((kC[0] * q + kC[1]) * q + kC[2]) * q + kC[3]) * q + kC[4]) * q + kC[5]) /
               ((((kD[0] * q + kD[1]) * q + kD[2]) * q + kD[3]) * q + 1.0);
    }
    if (p > 1.0 - p_low) {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        return -(((((kC[0] * q + kC[1]) * q + kC[2]) * q + kC[3]) * q + kC[4]) * q + kC[5]) /
               ((((kD[0] * q + kD[1]) * q + kD[2]) * q + kD[3]) * q + 1.0);
    }
    const double q = p - 0.5;
    const double r = q * q;
    return (((((kA[0] * r + kA[1]) * r + kA[2]) * r + kA[3]) * r + kA[4]) * r + kA[5]) * q /
           (((((kB[0] * r + kB[1]) * r + kB[2]) * r + kB[3]) * r + kB[4]) * r + 1.0);
}

} // namespace

double inv_norm_cdf(double p) {
    if (!(p > 0.0 && p < 1.0)) {
        throw NumericError("inv_norm_cdf: p must lie strictly inside (0,1)");
    }
    double z = acklam(p);
    // One Newton step: z -= (Phi(z) - p) / phi(z).
    const double pdf = 0.3989422804014326779 * std::exp(-0.5 * z * z);
    if (pdf > 0.0) {
        z -= (norm_cdf(z) - p) / pdf;
    }
    return z;
}

double RngStream::normal(double mu, double sigma) {
    if (sigma < 0.0) {
        throw NumericError("RngStream::normal: sigma must be >= 0");
    }
    return mu + sigma * inv_norm_cdf(uniform_open01());
}

} // namespace cimsim
