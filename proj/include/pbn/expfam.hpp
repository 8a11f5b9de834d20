#pragma once

// Scalar engine for the four maximum-entropy exponential-class densities
//
//   log p_e(x; a) = (a0 + a) x + b x^2 + log Z(a)
//
// used both as layer-input priors (a = 0) and, through their means, as
// activation functions. Every function here is pure.

#include <random>
#include <string>
#include <string_view>

namespace pbn {

using Rng = std::mt19937_64;

enum class Domain { reals, positive, unit };

enum class Family { gaussian, trunc_gaussian, exponential, trunc_exponential };

/// A layer activation is the mean function of a family. The Gaussian mean is
/// the identity, so `Family::gaussian` doubles as the linear activation.
using Activation = Family;
inline constexpr Activation linear_activation = Family::gaussian;

struct ExpFamilySpec {
  Family family;
  double alpha0;
  double beta;
  Domain domain;
};

constexpr ExpFamilySpec spec_of(Family f) {
  switch (f) {
    case Family::gaussian:
      return {f, 0.0, -0.5, Domain::reals};
    case Family::trunc_gaussian:
      return {f, 0.0, -0.5, Domain::positive};
    case Family::exponential:
      return {f, -0.5, 0.0, Domain::positive};
    case Family::trunc_exponential:
      return {f, 0.0, 0.0, Domain::unit};
  }
  return {f, 0.0, -0.5, Domain::reals};
}

constexpr Domain domain_of(Family f) { return spec_of(f).domain; }

std::string_view family_name(Family f);
Family parse_family(std::string_view name);  // throws ConfigError
std::string_view activation_name(Activation a);  // "linear" for gaussian
Activation parse_activation(std::string_view name);

namespace expfam {

/// Largest admissible natural parameter of the exponential family minus margin.
inline constexpr double exponential_alpha_limit = 0.5 - 1e-9;

bool in_domain(Family f, double x);
bool admissible(Family f, double alpha);

double log_partition(Family f, double alpha);
double log_density(Family f, double alpha, double x);

/// Mean of p_e(.; alpha), i.e. the activation function lambda(alpha).
double activation(Family f, double alpha);
/// d lambda / d alpha, equal to the variance of p_e(.; alpha).
double activation_deriv(Family f, double alpha);
/// d^2 lambda / d alpha^2 (third cumulant).
double activation_deriv2(Family f, double alpha);

/// Cumulant generating function of the prior: log E_0[exp(alpha x)].
double cgf(Family f, double alpha);

/// Solves activation(f, alpha) = y; throws RangeError outside the image.
double activation_inverse(Family f, double y);

/// d/dx log p_0(x): the gradient of the prior log-density.
double log_prior_grad(Family f, double x);

double sample(Family f, double alpha, Rng& rng);

/// log Phi(x) for the standard normal CDF, accurate far into the lower tail.
double log_normal_cdf(double x);
/// Inverse Mills ratio N(x)/Phi(x), accurate far into the lower tail.
double inverse_mills(double x);

}  // namespace expfam
}  // namespace pbn
