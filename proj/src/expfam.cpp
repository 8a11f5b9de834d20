#include "pbn/expfam.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "pbn/error.hpp"

namespace pbn {

std::string_view family_name(Family f) {
  switch (f) {
    case Family::gaussian:
      return "gaussian";
    case Family::trunc_gaussian:
      return "trunc_gaussian";
    case Family::exponential:
      return "exponential";
    case Family::trunc_exponential:
      return "trunc_exponential";
  }
  return "?";
}

Family parse_family(std::string_view name) {
  if (name == "gaussian" || name == "g") return Family::gaussian;
  if (name == "trunc_gaussian" || name == "tg") return Family::trunc_gaussian;
  if (name == "exponential" || name == "exp") return Family::exponential;
  if (name == "trunc_exponential" || name == "ted") return Family::trunc_exponential;
  throw ConfigError("unknown family '" + std::string(name) + "'");
}

std::string_view activation_name(Activation a) {
  switch (a) {
    case Family::gaussian:
      return "linear";
    case Family::trunc_gaussian:
      return "tg";
    case Family::exponential:
      return "exp";
    case Family::trunc_exponential:
      return "ted";
  }
  return "?";
}

Activation parse_activation(std::string_view name) {
  if (name == "linear") return linear_activation;
  return parse_family(name);
}

namespace expfam {
namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;
constexpr double kSqrt2 = std::numbers::sqrt2;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// Below this pre-activation the truncated-Gaussian ratios switch to the
// continued-fraction branch; erfc underflows relative precision past it.
constexpr double kTgTail = -6.0;

// Series thresholds for the truncated exponential near its removable
// singularity at alpha = 0.
constexpr double kTedSeries = 0.05;
constexpr double kTedSeries2 = 0.1;

// K(u) = T(u) - u where erfc(u) = exp(-u^2) / (sqrt(pi) T(u)) and
// T(u) = u + (1/2)/(u + 1/(u + (3/2)/(u + ...))). Valid for u > ~3.
double erfc_cf_tail(double u) {
  double t = u;
  for (int k = 80; k >= 2; --k) t = u + 0.5 * k / t;
  return 0.5 / t;
}

void check_admissible(Family f, double alpha) {
  if (!admissible(f, alpha)) {
    throw ParameterError("natural parameter " + std::to_string(alpha) +
                         " inadmissible for family " + std::string(family_name(f)));
  }
}

// Truncated exponential helpers: s = e^a/(e^a - 1), returns (s, s - 1)
// without overflow for either sign of a.
struct TedRatios {
  double s;
  double sm1;
};

TedRatios ted_ratios(double a) {
  if (a > 0) {
    const double t = std::exp(-a);
    const double one_minus_t = -std::expm1(-a);
    return {1.0 / one_minus_t, t / one_minus_t};
  }
  const double t = std::exp(a);
  const double one_minus_t = -std::expm1(a);
  return {-t / one_minus_t, -1.0 / one_minus_t};
}

// log((e^a - 1)/a), the TED cumulant generating function.
double ted_cgf(double a) {
  if (std::abs(a) < kTedSeries) {
    const double a2 = a * a;
    return a / 2 + a2 / 24 - a2 * a2 / 2880 + a2 * a2 * a2 / 181440;
  }
  if (a > 0) return a + std::log(-std::expm1(-a)) - std::log(a);
  return std::log(-std::expm1(a)) - std::log(-a);
}

double ted_mean(double a) {
  if (std::abs(a) < kTedSeries) {
    const double a2 = a * a;
    return 0.5 + a / 12 - a * a2 / 720 + a * a2 * a2 / 30240 - a * a2 * a2 * a2 / 1209600;
  }
  return ted_ratios(a).s - 1.0 / a;
}

double ted_var(double a) {
  if (std::abs(a) < kTedSeries) {
    const double a2 = a * a;
    return 1.0 / 12 - a2 / 240 + a2 * a2 / 6048 - 7 * a2 * a2 * a2 / 1209600;
  }
  const auto r = ted_ratios(a);
  return -r.s * r.sm1 + 1.0 / (a * a);
}

double ted_third(double a) {
  if (std::abs(a) < kTedSeries2) {
    const double a2 = a * a;
    return -a / 120 + a * a2 / 1512 - a * a2 * a2 / 28800 + a * a2 * a2 * a2 / 665280;
  }
  const auto r = ted_ratios(a);
  return r.s * r.sm1 * (2 * r.s - 1) - 2.0 / (a * a * a);
}

// Lower-tail truncated-Gaussian cumulants from the continued fraction
// T_j = u + ((j+1)/2) / T_{j+1}, u = -a/sqrt(2), carried with dT_j/du. The
// closed forms 1 - r*m and r*(m^2 - var) cancel catastrophically out here.
struct TgTail {
  double mean, var, third;
};

TgTail tg_tail(double a) {
  const double u = -a / kSqrt2;
  double t = u, dt = 1.0;  // T_j and dT_j/du
  double t1 = 0, dt1 = 0, t2 = 0, dt2 = 0;
  for (int j = 79; j >= 1; --j) {
    const double c = 0.5 * (j + 1);
    const double tn = u + c / t;
    const double dtn = 1.0 - c * dt / (t * t);
    t = tn;
    dt = dtn;
    if (j == 2) {
      t2 = t;
      dt2 = dt;
    }
  }
  t1 = t;
  dt1 = dt;
  const double var = 1.0 / (t1 * t2) - 0.5 / (t1 * t1);
  const double dvar_du = -(dt1 * t2 + t1 * dt2) / (t1 * t1 * t2 * t2) + dt1 / (t1 * t1 * t1);
  return {1.0 / (kSqrt2 * t1), var, -dvar_du / kSqrt2};
}

double tg_mean(double a) {
  if (a < kTgTail) return tg_tail(a).mean;
  return a + inverse_mills(a);
}

double tg_var(double a) {
  if (a < kTgTail) return tg_tail(a).var;
  const double r = inverse_mills(a);
  return 1.0 - r * tg_mean(a);
}

double tg_third(double a) {
  if (a < kTgTail) return tg_tail(a).third;
  const double r = inverse_mills(a);
  const double m = tg_mean(a);
  return r * (m * m - (1.0 - r * m));
}

// Robert (1995) sampler for a standard normal truncated to [lower, inf).
double sample_std_normal_tail(double lower, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  if (lower < 0.5) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (;;) {
      const double z = normal(rng);
      if (z >= lower) return z;
    }
  }
  const double rate = 0.5 * (lower + std::sqrt(lower * lower + 4.0));
  for (;;) {
    const double z = lower - std::log1p(-unif(rng)) / rate;
    const double d = z - rate;
    if (unif(rng) <= std::exp(-0.5 * d * d)) return z;
  }
}

// Safeguarded Newton on the strictly increasing mean function.
double invert_monotone(Family f, double y, double guess) {
  auto g = [&](double a) { return activation(f, a) - y; };
  double lo = guess, hi = guess;
  double step = 1.0;
  while (g(lo) > 0) {
    lo -= step;
    step *= 2;
    if (!std::isfinite(lo)) throw RangeError("activation inverse: lower bracket diverged");
  }
  step = 1.0;
  while (g(hi) < 0) {
    hi += step;
    step *= 2;
    if (!std::isfinite(hi)) throw RangeError("activation inverse: upper bracket diverged");
  }
  double a = guess;
  if (!(a > lo && a < hi)) a = 0.5 * (lo + hi);
  for (int it = 0; it < 300; ++it) {
    const double r = g(a);
    if (r == 0.0) return a;
    if (r < 0) lo = a; else hi = a;
    const double d = activation_deriv(f, a);
    double next = a - r / d;
    if (!(next > lo && next < hi) || !std::isfinite(next)) next = 0.5 * (lo + hi);
    if (std::abs(next - a) <= 1e-15 * (1.0 + std::abs(a))) return next;
    a = next;
    if (hi - lo <= 1e-15 * (1.0 + std::abs(a))) return a;
  }
  return a;
}

}  // namespace

bool in_domain(Family f, double x) {
  if (!std::isfinite(x)) return false;
  switch (domain_of(f)) {
    case Domain::reals:
      return true;
    case Domain::positive:
      return x >= 0.0;
    case Domain::unit:
      return x >= 0.0 && x <= 1.0;
  }
  return false;
}

bool admissible(Family f, double alpha) {
  if (!std::isfinite(alpha)) return false;
  if (f == Family::exponential) return alpha < exponential_alpha_limit;
  return true;
}

double log_normal_cdf(double x) {
  if (x < kTgTail) {
    const double u = -x / kSqrt2;
    const double t = u + erfc_cf_tail(u);
    return std::log(0.5) - std::log(std::sqrt(std::numbers::pi) * t) - 0.5 * x * x;
  }
  if (x > 0) return std::log1p(-0.5 * std::erfc(x / kSqrt2));
  return std::log(0.5 * std::erfc(-x / kSqrt2));
}

double inverse_mills(double x) {
  if (x < kTgTail) return kSqrt2 * (-x / kSqrt2 + erfc_cf_tail(-x / kSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return pdf / (0.5 * std::erfc(-x / kSqrt2));
}

double log_partition(Family f, double alpha) {
  check_admissible(f, alpha);
  switch (f) {
    case Family::gaussian:
      return -0.5 * alpha * alpha - kLogSqrt2Pi;
    case Family::trunc_gaussian:
      return -0.5 * alpha * alpha - kLogSqrt2Pi - log_normal_cdf(alpha);
    case Family::exponential:
      return std::log(0.5 - alpha);
    case Family::trunc_exponential:
      return -ted_cgf(alpha);
  }
  return 0.0;
}

double log_density(Family f, double alpha, double x) {
  if (!in_domain(f, x)) {
    throw DomainError("x=" + std::to_string(x) + " outside the domain of " +
                      std::string(family_name(f)));
  }
  const auto s = spec_of(f);
  return (s.alpha0 + alpha) * x + s.beta * x * x + log_partition(f, alpha);
}

double activation(Family f, double alpha) {
  check_admissible(f, alpha);
  switch (f) {
    case Family::gaussian:
      return alpha;
    case Family::trunc_gaussian:
      return tg_mean(alpha);
    case Family::exponential:
      return 1.0 / (0.5 - alpha);
    case Family::trunc_exponential:
      return ted_mean(alpha);
  }
  return 0.0;
}

double activation_deriv(Family f, double alpha) {
  check_admissible(f, alpha);
  switch (f) {
    case Family::gaussian:
      return 1.0;
    case Family::trunc_gaussian:
      return tg_var(alpha);
    case Family::exponential: {
      const double r = 0.5 - alpha;
      return 1.0 / (r * r);
    }
    case Family::trunc_exponential:
      return ted_var(alpha);
  }
  return 0.0;
}

double activation_deriv2(Family f, double alpha) {
  check_admissible(f, alpha);
  switch (f) {
    case Family::gaussian:
      return 0.0;
    case Family::trunc_gaussian:
      return tg_third(alpha);
    case Family::exponential: {
      const double r = 0.5 - alpha;
      return 2.0 / (r * r * r);
    }
    case Family::trunc_exponential:
      return ted_third(alpha);
  }
  return 0.0;
}

double cgf(Family f, double alpha) {
  check_admissible(f, alpha);
  switch (f) {
    case Family::gaussian:
      return 0.5 * alpha * alpha;
    case Family::trunc_gaussian:
      return 0.5 * alpha * alpha + log_normal_cdf(alpha) + std::numbers::ln2;
    case Family::exponential:
      return -std::log1p(-2.0 * alpha);
    case Family::trunc_exponential:
      return ted_cgf(alpha);
  }
  return 0.0;
}

double activation_inverse(Family f, double y) {
  if (!std::isfinite(y)) throw RangeError("activation inverse of non-finite value");
  switch (f) {
    case Family::gaussian:
      return y;
    case Family::trunc_gaussian:
      if (y <= 0.0) throw RangeError("TG activation image is (0, inf)");
      return invert_monotone(f, y, y > 1.0 ? y - 1.0 / y : -1.0 / y + 0.5);
    case Family::exponential: {
      if (y <= 0.0) throw RangeError("exponential activation image is (0, inf)");
      const double a = 0.5 - 1.0 / y;
      if (!admissible(f, a)) throw RangeError("mean too large for the exponential family");
      return a;
    }
    case Family::trunc_exponential:
      if (y <= 0.0 || y >= 1.0) throw RangeError("TED activation image is (0, 1)");
      if (y == 0.5) return 0.0;
      return invert_monotone(f, y, y > 0.5 ? 1.0 / (1.0 - y) - 2.0 : -1.0 / y + 2.0);
  }
  return 0.0;
}

double log_prior_grad(Family f, double x) {
  const auto s = spec_of(f);
  return s.alpha0 + 2.0 * s.beta * x;
}

double sample(Family f, double alpha, Rng& rng) {
  check_admissible(f, alpha);
  switch (f) {
    case Family::gaussian: {
      std::normal_distribution<double> normal(alpha, 1.0);
      return normal(rng);
    }
    case Family::trunc_gaussian:
      return alpha + sample_std_normal_tail(-alpha, rng);
    case Family::exponential: {
      std::exponential_distribution<double> expo(0.5 - alpha);
      return expo(rng);
    }
    case Family::trunc_exponential: {
      std::uniform_real_distribution<double> unif(0.0, 1.0);
      const double u = unif(rng);
      if (std::abs(alpha) < 1e-12) return u;
      if (alpha > 0) return 1.0 + std::log(u + (1.0 - u) * std::exp(-alpha)) / alpha;
      return std::log1p(u * std::expm1(alpha)) / alpha;
    }
  }
  return 0.0;
}

}  // namespace expfam
}  // namespace pbn
