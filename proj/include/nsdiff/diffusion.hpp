#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "nsdiff/core.hpp"
#include "nsdiff/prior.hpp"
#include "nsdiff/schedule.hpp"

namespace nsdiff {

// full: forward step variance beta_t^2 g + alpha_t beta_t sigma_y0.
// no_uans: perfect-estimator simplification, beta_t g.
// no_lsnm: unit endpoint variance on top of that, beta_t.
enum class VariantMode { full_nsdiff, no_uans, no_lsnm };

inline const char* variant_name(VariantMode m) {
    switch (m) {
        case VariantMode::full_nsdiff: return "full";
        case VariantMode::no_uans: return "no_uans";
        case VariantMode::no_lsnm: return "no_lsnm";
    }
    return "?";
}

struct DiffusionState {
    Matrix y;
    int t = 0;
};

// Forward-step variance sigma_t under the selected variant. g and sigma_y0
// are the elementwise endpoint variance and data variance at one cell.
inline double variant_forward_variance(VariantMode mode, const NoiseSchedule& s, int t, double g,
                                       double sigma_y0) {
    const double b = s.beta(t);
    switch (mode) {
        case VariantMode::full_nsdiff: return b * b * g + s.alpha(t) * b * sigma_y0;
        case VariantMode::no_uans: return b * g;
        case VariantMode::no_lsnm: return b;
    }
    return b;
}

// Variance of the closed-form marginal q(Y_t | Y_0, ...). Valid for t = 0
// (returns 0, the empty-chain limit the posterior boundary needs).
inline double marginal_variance(VariantMode mode, const NoiseSchedule& s, int t, double g,
                                double sigma_y0) {
    const double bb = s.beta_bar(t);
    switch (mode) {
        case VariantMode::full_nsdiff: {
            const double bt = s.beta_tilde(t);
            return (bb - bt) * g + bt * sigma_y0;
        }
        case VariantMode::no_uans: return bb * g;
        case VariantMode::no_lsnm: return bb;
    }
    return bb;
}

// Mean coefficients of one forward step,
//   mean = sqrt(alpha_t) Y_{t-1} + (1 - sqrt(alpha_t)) f(X),
// plus the elementwise step variance.
struct ForwardStepParams {
    double coef_prev;      // sqrt(alpha_t)
    double coef_endpoint;  // 1 - sqrt(alpha_t)
    Matrix sigma_t;        // M x D
};

inline ForwardStepParams forward_step_params(const NoiseSchedule& s, int t,
                                             const EndpointPrior& prior, const Matrix& sigma_y0,
                                             VariantMode mode = VariantMode::full_nsdiff) {
    if (!prior.variance.same_shape(sigma_y0))
        throw std::invalid_argument("forward_step_params: shape mismatch");
    ForwardStepParams p;
    const double ra = std::sqrt(s.alpha(t));
    p.coef_prev = ra;
    p.coef_endpoint = 1.0 - ra;
    p.sigma_t = Matrix(sigma_y0.rows(), sigma_y0.cols());
    for (std::size_t i = 0; i < sigma_y0.rows(); ++i)
        for (std::size_t d = 0; d < sigma_y0.cols(); ++d) {
            const double g = prior.variance(i, d);
            const double s0 = sigma_y0(i, d);
            if (!(g > 0.0) || !(s0 > 0.0))
                throw std::invalid_argument("forward_step_params: nonpositive variance input");
            p.sigma_t(i, d) = variant_forward_variance(mode, s, t, g, s0);
        }
    return p;
}

// Closed-form draw of Y_t given Y_0 and caller-supplied standard Gaussian
// noise eta:
//   Y_t = sqrt(abar_t) Y_0 + (1 - sqrt(abar_t)) f(X) + sqrt(sbar_t) eta.
inline Matrix forward_marginal(const NoiseSchedule& s, int t, const Matrix& y0,
                               const EndpointPrior& prior, const Matrix& sigma_y0,
                               const Matrix& eta, VariantMode mode = VariantMode::full_nsdiff) {
    if (!y0.same_shape(prior.mean) || !y0.same_shape(sigma_y0) || !y0.same_shape(eta))
        throw std::invalid_argument("forward_marginal: shape mismatch");
    const double rab = std::sqrt(s.alpha_bar(t));
    Matrix out(y0.rows(), y0.cols());
    for (std::size_t i = 0; i < y0.rows(); ++i)
        for (std::size_t d = 0; d < y0.cols(); ++d) {
            const double sbar =
                marginal_variance(mode, s, t, prior.variance(i, d), sigma_y0(i, d));
            if (!(sbar > 0.0))
                throw InternalError("forward_marginal: nonpositive marginal variance at t=" +
                                    std::to_string(t));
            out(i, d) = rab * y0(i, d) + (1.0 - rab) * prior.mean(i, d) +
                        std::sqrt(sbar) * eta(i, d);
        }
    return out;
}

// Affine weights and moments of the tractable reverse posterior
// q(Y_{t-1} | Y_t, Y_0, ...): mean gamma0 Y_0 + gamma1 Y_t + gamma2 f(X),
// variance sigma_t sbar_{t-1} / (alpha_t sbar_{t-1} + sigma_t).
struct PosteriorParams {
    Matrix gamma0, gamma1, gamma2;
    Matrix mu_tilde;
    Matrix sigma_tilde;
};

// Scalar posterior weights at one cell. gamma2 is 1 - gamma0 - gamma1: the
// direct expansion of the posterior mean gives the f coefficient
// sqrt(a_t)(sqrt(a_t)-1) sbar' + (1-sqrt(abar'))
// sigma_t over the same denominator, and the three weights sum to one.
struct PosteriorScalar {
    double gamma0, gamma1, gamma2, sigma_tilde;
};

inline PosteriorScalar posterior_scalar(const NoiseSchedule& s, int t, double g, double sigma_y0,
                                        VariantMode mode = VariantMode::full_nsdiff) {
    if (t < 1)
        throw std::out_of_range("posterior requires t >= 1");
    const double a = s.alpha(t);
    const double sigma_t = variant_forward_variance(mode, s, t, g, sigma_y0);
    const double sbar_prev = marginal_variance(mode, s, t - 1, g, sigma_y0);
    const double denom = a * sbar_prev + sigma_t;
    PosteriorScalar p;
    p.gamma0 = std::sqrt(s.alpha_bar(t - 1)) * sigma_t / denom;
    p.gamma1 = std::sqrt(a) * sbar_prev / denom;
    p.gamma2 = 1.0 - p.gamma0 - p.gamma1;
    p.sigma_tilde = sigma_t * sbar_prev / denom;
    return p;
}

inline PosteriorParams posterior_params(const NoiseSchedule& s, int t, const Matrix& y_t,
                                        const Matrix& y0, const EndpointPrior& prior,
                                        const Matrix& sigma_y0,
                                        VariantMode mode = VariantMode::full_nsdiff) {
    if (t < 1)
        throw std::out_of_range("posterior_params requires t >= 1");
    if (!y_t.same_shape(y0) || !y_t.same_shape(prior.mean) || !y_t.same_shape(sigma_y0))
        throw std::invalid_argument("posterior_params: shape mismatch");
    const std::size_t M = y_t.rows(), D = y_t.cols();
    PosteriorParams out{Matrix(M, D), Matrix(M, D), Matrix(M, D), Matrix(M, D), Matrix(M, D)};
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t d = 0; d < D; ++d) {
            const double g = prior.variance(i, d);
            const double s0 = sigma_y0(i, d);
            if (!(g > 0.0) || !(s0 > 0.0))
                throw std::invalid_argument("posterior_params: nonpositive variance input");
            const PosteriorScalar p = posterior_scalar(s, t, g, s0, mode);
            out.gamma0(i, d) = p.gamma0;
            out.gamma1(i, d) = p.gamma1;
            out.gamma2(i, d) = p.gamma2;
            out.sigma_tilde(i, d) = p.sigma_tilde;
            out.mu_tilde(i, d) = p.gamma0 * y0(i, d) + p.gamma1 * y_t(i, d) +
                                 p.gamma2 * prior.mean(i, d);
        }
    return out;
}

// KL-derived training objective for one window:
//   ||eta - eta_theta||^2 + sum_i (st_i / sth_i) - sum_i log(st_i / sth_i).
// Each variance term is x - log x >= 1 with equality iff the variances
// match, so the minimum over a window is its element count. Batch
// averaging is the caller's.
inline double nsdiff_loss(const Matrix& eta, const Matrix& eta_theta, const Matrix& sigma_tilde,
                          const Matrix& sigma_theta) {
    if (!eta.same_shape(eta_theta) || !eta.same_shape(sigma_tilde) ||
        !eta.same_shape(sigma_theta))
        throw std::invalid_argument("nsdiff_loss: shape mismatch");
    double loss = 0.0;
    for (std::size_t i = 0; i < eta.rows(); ++i)
        for (std::size_t d = 0; d < eta.cols(); ++d) {
            const double st = sigma_tilde(i, d), sth = sigma_theta(i, d);
            if (!(st > 0.0) || !(sth > 0.0))
                throw std::invalid_argument("nsdiff_loss: nonpositive variance");
            const double de = eta(i, d) - eta_theta(i, d);
            const double r = st / sth;
            loss += de * de + r - std::log(r);
        }
    return loss;
}

struct SolverDiagnostics {
    std::size_t calls = 0;
    std::size_t fallbacks = 0;  // lambda2 >= 0 occurrences
};

/**
 * Recovers the data variance from the denoiser's variance estimate by
 * solving the quadratic the posterior variance expands into:
 *
 *   l0 s^2 + l1 s + l2 = 0,
 *   l0 = a_t b_t btilde',
 *   l1 = (b_t^2 btilde' + a_t b_t (bbar' - btilde')) g - sth a_t (btilde' + b_t),
 *   l2 = g^2 b_t^2 (bbar' - btilde') - sth g (a_t bbar' - a_t btilde' + b_t^2),
 *
 * primes marking t-1. l0 > 0, so by Vieta exactly one root is positive
 * when l2 < 0; when l2 >= 0 the estimate is ambiguous and the
 * perfect-estimator fallback sigma = g is used (counted in diag). The
 * positive root is evaluated in the cancellation-free form.
 */
inline double solve_sigma_y0(const NoiseSchedule& s, int t, double g, double sigma_theta,
                             SolverDiagnostics* diag = nullptr) {
    if (t < 2)
        throw std::out_of_range("solve_sigma_y0 requires t >= 2");
    if (!(g > 0.0) || !(sigma_theta > 0.0))
        throw std::invalid_argument("solve_sigma_y0: nonpositive variance input");
    const double a = s.alpha(t), b = s.beta(t);
    const double btp = s.beta_tilde(t - 1), bbp = s.beta_bar(t - 1);
    const double l0 = a * b * btp;
    const double l1 = (b * b * btp + a * b * (bbp - btp)) * g - sigma_theta * a * (btp + b);
    const double l2 = g * g * b * b * (bbp - btp) - sigma_theta * g * (a * bbp - a * btp + b * b);
    if (diag) ++diag->calls;
    if (l2 >= 0.0) {
        if (diag) ++diag->fallbacks;
        return std::max(g, kVarianceFloor);
    }
    const double disc = l1 * l1 - 4.0 * l0 * l2;
    if (disc < 0.0)
        throw SolverError("negative discriminant at t=" + std::to_string(t), t, l0, l1, l2);
    const double rd = std::sqrt(disc);
    const double root = (l1 > 0.0) ? (2.0 * l2) / (-l1 - rd) : (-l1 + rd) / (2.0 * l0);
    return std::max(root, kVarianceFloor);
}

// Solvability bound on g implied by l2 < 0 (appendix form of the
// denominator). Exposed for the acceptance checks.
inline double solvability_bound(const NoiseSchedule& s, int t, double sigma_theta) {
    const double a = s.alpha(t), b = s.beta(t);
    const double btp = s.beta_tilde(t - 1), bbp = s.beta_bar(t - 1);
    return sigma_theta * (a / (b * b) + 1.0 / (bbp - btp));
}

}  // namespace nsdiff
