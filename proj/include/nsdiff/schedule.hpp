#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "nsdiff/core.hpp"

namespace nsdiff {

/**
 * Diffusion schedule coefficients.
 *
 * Beyond the classic DDPM quantities (alpha, alpha_bar, beta_bar) the
 * uncertainty-aware schedule needs two cumulative sums over suffix
 * products of alpha,
 *
 *   alpha_tilde_t = sum_{k=0}^{t-1} prod_{i=t-k}^{t} alpha_i
 *   alpha_hat_t   = sum_{k=0}^{t-1} (prod_{i=t-k}^{t} alpha_i) alpha_{t-k}
 *
 * and their difference beta_tilde_t = alpha_tilde_t - alpha_hat_t, which
 * weights the data-variance share of the forward marginal. Both satisfy
 * first-order recurrences, so construction is O(T):
 *
 *   alpha_tilde_t = alpha_t (1 + alpha_tilde_{t-1}),  alpha_tilde_0 = 0
 *   alpha_hat_t   = alpha_t^2 + alpha_t alpha_hat_{t-1},  alpha_hat_0 = 0
 *
 * All arrays are precomputed in double precision at construction and the
 * object is immutable afterwards; share freely across threads.
 */
class NoiseSchedule {
public:
    // Builds every cumulative coefficient from a per-step beta vector and
    // checks the positivity/monotonicity invariants the closed-form
    // posterior formulas rely on.
    static NoiseSchedule from_betas(std::vector<double> betas) {
        if (betas.empty())
            throw ConfigError("schedule needs at least one step");
        NoiseSchedule s;
        const std::size_t T = betas.size();
        s.beta_ = std::move(betas);
        s.alpha_.resize(T);
        s.alpha_bar_.resize(T);
        s.alpha_tilde_.resize(T);
        s.alpha_hat_.resize(T);
        s.beta_bar_.resize(T);
        s.beta_tilde_.resize(T);

        double abar = 1.0, atilde = 0.0, ahat = 0.0;
        for (std::size_t i = 0; i < T; ++i) {
            const double b = s.beta_[i];
            if (!(b > 0.0 && b < 1.0))
                throw ConfigError("beta_" + std::to_string(i + 1) + " = " + std::to_string(b) +
                                  " outside (0,1)");
            const double a = 1.0 - b;
            abar *= a;
            atilde = a * (1.0 + atilde);
            ahat = a * a + a * ahat;
            s.alpha_[i] = a;
            s.alpha_bar_[i] = abar;
            s.alpha_tilde_[i] = atilde;
            s.alpha_hat_[i] = ahat;
            s.beta_bar_[i] = 1.0 - abar;
            s.beta_tilde_[i] = atilde - ahat;
        }
        s.check_invariants();
        return s;
    }

    int steps() const { return static_cast<int>(beta_.size()); }

    // Accessors take the 1-based step index t in [1, T].
    double beta(int t) const { return beta_[idx(t)]; }
    double alpha(int t) const { return alpha_[idx(t)]; }
    double alpha_tilde(int t) const { return alpha_tilde_[idx(t)]; }
    double alpha_hat(int t) const { return alpha_hat_[idx(t)]; }

    // The t-1 = 0 boundary returns the analytic limits (empty product /
    // empty sum), so posterior formulas at t = 1 need no special case.
    double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_[idx(t)]; }
    double beta_bar(int t) const { return t == 0 ? 0.0 : beta_bar_[idx(t)]; }
    double beta_tilde(int t) const { return t == 0 ? 0.0 : beta_tilde_[idx(t)]; }

private:
    std::size_t idx(int t) const {
        if (t < 1 || t > steps())
            throw std::out_of_range("schedule step " + std::to_string(t) + " outside [1, " +
                                    std::to_string(steps()) + "]");
        return static_cast<std::size_t>(t - 1);
    }

    void check_invariants() const {
        double prev_abar = 1.0;
        for (int t = 1; t <= steps(); ++t) {
            const std::size_t i = static_cast<std::size_t>(t - 1);
            if (!(alpha_bar_[i] < prev_abar))
                throw ConfigError("alpha_bar not strictly decreasing at t=" + std::to_string(t));
            if (!(beta_tilde_[i] > 0.0))
                throw ConfigError("beta_tilde nonpositive at t=" + std::to_string(t));
            if (!(beta_bar_[i] - beta_tilde_[i] > 0.0))
                throw ConfigError("beta_bar - beta_tilde nonpositive at t=" + std::to_string(t));
            prev_abar = alpha_bar_[i];
        }
    }

    std::vector<double> beta_, alpha_, alpha_bar_, alpha_tilde_, alpha_hat_, beta_bar_, beta_tilde_;
};

// Per-step beta interpolated linearly from beta_start (t=1) to beta_end
// (t=T); the only schedule the reference setup uses.
inline NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1)
        throw ConfigError("step count T = " + std::to_string(T) + " must be >= 1");
    if (!(beta_start > 0.0))
        throw ConfigError("beta_start = " + std::to_string(beta_start) + " must be > 0");
    if (!(beta_end < 1.0))
        throw ConfigError("beta_end = " + std::to_string(beta_end) + " must be < 1");
    if (!(beta_start <= beta_end))
        throw ConfigError("beta_start must not exceed beta_end");
    std::vector<double> betas(static_cast<std::size_t>(T));
    if (T == 1) {
        betas[0] = beta_start;
    } else {
        const double step = (beta_end - beta_start) / static_cast<double>(T - 1);
        for (int t = 0; t < T; ++t) betas[static_cast<std::size_t>(t)] = beta_start + step * t;
    }
    return NoiseSchedule::from_betas(std::move(betas));
}

// Everything the step-t formulas need, including the t-1 boundary values.
struct StepCoefficients {
    double beta, alpha, alpha_bar, beta_bar, beta_tilde;
    double alpha_bar_prev, beta_bar_prev, beta_tilde_prev;
};

inline StepCoefficients coefficients_at(const NoiseSchedule& s, int t) {
    StepCoefficients c{};
    c.beta = s.beta(t);
    c.alpha = s.alpha(t);
    c.alpha_bar = s.alpha_bar(t);
    c.beta_bar = s.beta_bar(t);
    c.beta_tilde = s.beta_tilde(t);
    c.alpha_bar_prev = s.alpha_bar(t - 1);
    c.beta_bar_prev = s.beta_bar(t - 1);
    c.beta_tilde_prev = s.beta_tilde(t - 1);
    return c;
}

}  // namespace nsdiff
