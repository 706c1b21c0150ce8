#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string_view>

namespace crtgen {

enum class SeSource { InfluenceCurve, Bootstrap };

inline std::string_view to_string(SeSource s) { return s == SeSource::InfluenceCurve ? "influence_curve" : "bootstrap"; }

struct IntervalEstimate {
  double level = 0.95;
  double lo = 0.0;
  double hi = 0.0;
  SeSource se_source = SeSource::InfluenceCurve;
};

/// Sample variance (denominator n - 1), two-pass.
inline double sample_variance(std::span<const double> v) {
  if (v.size() < 2) throw std::invalid_argument("sample variance needs at least 2 values");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0, comp = 0.0;
  for (double x : v) {
    ss += (x - mean) * (x - mean);
    comp += x - mean;
  }
  // corrected two-pass: removes the rounding error left in the mean
  ss -= comp * comp / static_cast<double>(v.size());
  return ss / static_cast<double>(v.size() - 1);
}

/// Estimated sampling variance of an estimator from its influence curve:
/// the sample variance of the curve divided by m.
inline double ic_variance(std::span<const double> influence_curve) {
  if (influence_curve.size() < 2) throw std::invalid_argument("ic_variance: need m >= 2 clusters");
  return sample_variance(influence_curve) / static_cast<double>(influence_curve.size());
}

/// Standard normal quantile, Wichura's AS 241 (PPND16); relative accuracy
/// about 1e-16 over (0, 1).
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("normal_quantile: p must lie in (0,1)");
  const double q = p - 0.5;
  if (std::abs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    return q *
           (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r +
                45921.953931549871457) * r + 13731.693765509461125) * r + 1971.5909503065514427) * r +
             133.14166789178437745) * r + 3.387132872796366608) /
           (((((((5226.495278852545925 * r + 28729.085735721942674) * r + 39307.89580009271061) * r +
                21213.794301586595867) * r + 5394.1960214247511077) * r + 687.1870074920579083) * r +
             42.313330701600911252) * r + 1.0);
  }
  double r = q < 0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double val;
  if (r <= 5.0) {
    r -= 1.6;
    val = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r +
               1.27045825245236838258) * r + 3.64784832476320460504) * r + 5.7694972214606914055) * r +
            4.6303378461565452959) * r + 1.42343711074968357734) /
          (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966) * r +
               0.14810397642748007459) * r + 0.68976733498510000455) * r + 1.6763848301838038494) * r +
            2.05319162663775882187) * r + 1.0);
  } else {
    r -= 5.0;
    val = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r +
               0.026532189526576123093) * r + 0.29656057182850489123) * r + 1.7848265399172913358) * r +
            5.4637849111641143699) * r + 6.6579046435011037772) /
          (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5) * r +
               7.868691311456132591e-4) * r + 0.0148753612908506148525) * r + 0.13692988092273580531) * r +
            0.59983220655588793769) * r + 1.0);
  }
  return q < 0 ? -val : val;
}

/// point +/- z_{1 - alpha/2} * se with alpha = 1 - level.
inline IntervalEstimate wald_interval(double point, double se, double level,
                                      SeSource source = SeSource::InfluenceCurve) {
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("wald_interval: level must lie in (0,1)");
  if (!(se >= 0.0)) throw std::invalid_argument("wald_interval: se must be non-negative");
  const double z = normal_quantile(1.0 - (1.0 - level) / 2.0);
  return {level, point - z * se, point + z * se, source};
}

}  // namespace crtgen
