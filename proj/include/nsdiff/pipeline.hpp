#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "nsdiff/core.hpp"
#include "nsdiff/dataset.hpp"
#include "nsdiff/diffusion.hpp"
#include "nsdiff/estimators.hpp"
#include "nsdiff/learner.hpp"
#include "nsdiff/metrics.hpp"
#include "nsdiff/prior.hpp"
#include "nsdiff/rng.hpp"
#include "nsdiff/schedule.hpp"

namespace nsdiff {

struct TrainConfig {
    int epochs = 10;
    int batch_size = 32;
    double lr = 1e-3;
    std::uint64_t seed = 1;
    int T = 20;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    VariantMode variant = VariantMode::full_nsdiff;
    int variance_window = 96;
    int input_len = 168;    // N
    int horizon = 36;       // M
    int sample_count = 100; // S
    bool end_to_end = false;
    std::size_t f_hidden = 512;
    std::size_t g_hidden = 512;
    std::size_t xi_hidden = 256;
    std::size_t t_embed_dim = 64;

    NoiseSchedule schedule() const { return build_linear_schedule(T, beta_start, beta_end); }
};

// The noise-and-variance estimation network: a per-feature MLP over the
// concatenation of the noisy target channel, the two endpoint channels and
// a learned per-step embedding. Output row is [eta_theta | raw sigma],
// sigma passed through softplus.
struct DenoiserModel {
    ParameterStore store;
    MlpSpec spec;
    std::string prefix = "xi";
    std::size_t horizon = 0;
    std::size_t t_embed_dim = 0;
    int T = 0;

    std::size_t input_dim() const { return 3 * horizon + t_embed_dim; }
};

inline DenoiserModel init_denoiser(const TrainConfig& cfg, std::uint64_t seed) {
    DenoiserModel m;
    m.horizon = static_cast<std::size_t>(cfg.horizon);
    m.t_embed_dim = cfg.t_embed_dim;
    m.T = cfg.T;
    m.spec.widths = {m.input_dim(), cfg.xi_hidden, cfg.xi_hidden, 2 * m.horizon};
    m.spec.head = OutputHead::identity;
    Rng init = Rng::substream(seed, Stream::init_denoiser);
    init_mlp(m.store, m.prefix, m.spec, init);
    auto& emb = m.store.add(m.prefix + "/temb",
                            {static_cast<std::size_t>(cfg.T), cfg.t_embed_dim});
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.t_embed_dim));
    for (double& v : emb.value) v = bound * (2.0 * init.uniform() - 1.0);
    return m;
}

namespace detail {

// One (window, feature) row of the denoiser input.
inline void fill_xi_row(double* row, const Matrix& y_t, const Matrix& f, const Matrix& g,
                        const double* temb, std::size_t M, std::size_t E, std::size_t d) {
    for (std::size_t i = 0; i < M; ++i) row[i] = y_t(i, d);
    for (std::size_t i = 0; i < M; ++i) row[M + i] = f(i, d);
    for (std::size_t i = 0; i < M; ++i) row[2 * M + i] = g(i, d);
    for (std::size_t e = 0; e < E; ++e) row[3 * M + e] = temb[e];
}

struct XiBatch {
    Matrix input;            // R x (3M+E)
    std::vector<int> ts;     // step index per row
    MlpCache cache;
    Matrix eta;              // R x M
    Matrix sigma;            // R x M (softplus applied)
    Matrix raw_sigma;        // R x M (preactivation of the sigma half)
};

inline void xi_forward(const DenoiserModel& model, XiBatch& b, bool with_cache) {
    const std::size_t M = model.horizon;
    Matrix out = mlp_forward(model.store, model.prefix, model.spec, b.input,
                             with_cache ? &b.cache : nullptr);
    const std::size_t R = out.rows();
    b.eta = Matrix(R, M);
    b.sigma = Matrix(R, M);
    b.raw_sigma = Matrix(R, M);
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t i = 0; i < M; ++i) {
            b.eta(r, i) = out(r, i);
            b.raw_sigma(r, i) = out(r, M + i);
            b.sigma(r, i) = softplus(out(r, M + i));
        }
}

// Backpropagates [d eta | d sigma] through the split heads and scatters the
// embedding gradient rows.
inline void xi_backward(DenoiserModel& model, XiBatch& b, const Matrix& d_eta,
                        const Matrix& d_sigma) {
    const std::size_t M = model.horizon;
    const std::size_t R = b.input.rows();
    Matrix d_out(R, 2 * M);
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t i = 0; i < M; ++i) {
            d_out(r, i) = d_eta(r, i);
            d_out(r, M + i) = d_sigma(r, i) * sigmoid(b.raw_sigma(r, i));
        }
    Matrix d_input;
    mlp_backward(model.store, model.prefix, model.spec, b.cache, d_out, &d_input);
    auto& emb = model.store.at(model.prefix + "/temb");
    const std::size_t E = model.t_embed_dim;
    for (std::size_t r = 0; r < R; ++r) {
        double* grow = emb.grad.data() + static_cast<std::size_t>(b.ts[r] - 1) * E;
        const double* drow = d_input.row(r) + 3 * M;
        for (std::size_t e = 0; e < E; ++e) grow[e] += drow[e];
    }
}

}  // namespace detail

struct TrainNsdiffHistory {
    std::vector<double> epoch_val_loss;
    std::vector<double> first_steps_loss;  // batch losses of the first epoch
    double best_val_loss = 0.0;
    int best_epoch = -1;
};

/**
 * Denoiser training. Per batch element: draw t uniform in {1..T} and
 * standard Gaussian noise, form Y_t from the closed-form marginal using the
 * window's ground-truth variance field, run the estimation net and take a
 * KL step. The simplified variants pin the variance terms (their posterior
 * variance is data-independent), reducing to noise matching.
 *
 * Ground-truth sigma_y0 is used only here; inference reconstructs it.
 */
inline DenoiserModel train_nsdiff(const TrainConfig& cfg, const std::vector<WindowPair>& train,
                                  const std::vector<WindowPair>& val, EstimatorModel& f_model,
                                  EstimatorModel& g_model, TrainNsdiffHistory* history = nullptr) {
    if (train.empty() || val.empty())
        throw TrainingError("denoiser training needs nonempty train and val window sets");
    if (!cfg.end_to_end && (!f_model.frozen || !g_model.frozen))
        throw TrainingError("estimators must be pretrained and frozen (or set end_to_end)");

    const NoiseSchedule sched = cfg.schedule();
    const std::size_t M = train.front().y0.rows();
    const std::size_t D = train.front().y0.cols();
    const std::size_t E = cfg.t_embed_dim;
    if (static_cast<int>(M) != cfg.horizon)
        throw TrainingError("window horizon does not match config");

    DenoiserModel model = init_denoiser(cfg, cfg.seed);
    Rng shuffle_rng = Rng::substream(cfg.seed, Stream::shuffle, 2);
    Rng t_rng = Rng::substream(cfg.seed, Stream::t_draw);
    Rng eta_rng = Rng::substream(cfg.seed, Stream::eta_draw);

    // Frozen estimators: endpoint priors are fixed, compute them once.
    std::vector<EndpointPrior> train_priors, val_priors;
    if (!cfg.end_to_end) {
        train_priors.reserve(train.size());
        for (const auto& w : train) train_priors.push_back(predict_prior(f_model, g_model, w.x));
        val_priors.reserve(val.size());
        for (const auto& w : val) val_priors.push_back(predict_prior(f_model, g_model, w.x));
    }

    const bool full = cfg.variant == VariantMode::full_nsdiff;
    const auto& temb = model.store.at(model.prefix + "/temb");

    // Evaluates the batch loss and, when training, accumulates gradients.
    auto run_batch = [&](const std::vector<WindowPair>& ws, const std::vector<EndpointPrior>* priors,
                         const std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi,
                         Rng& trng, Rng& erng, bool learn) -> double {
        const std::size_t B = hi - lo;
        const std::size_t R = B * D;
        detail::XiBatch batch;
        batch.input = Matrix(R, model.input_dim());
        batch.ts.resize(R);
        Matrix eta_rows(R, M), sigma_tilde_rows(R, M);

        std::vector<EndpointPrior> local_priors;
        local_priors.reserve(B);
        for (std::size_t k = lo; k < hi; ++k) {
            const WindowPair& w = ws[idx[k]];
            const EndpointPrior* prior;
            if (priors) {
                prior = &(*priors)[idx[k]];
            } else {
                local_priors.push_back(predict_prior(f_model, g_model, w.x));
                prior = &local_priors.back();
            }
            const int t = trng.uniform_int(1, cfg.T);
            Matrix eta(M, D);
            erng.fill_gaussian(eta);
            const Matrix y_t = forward_marginal(sched, t, w.y0, *prior, w.sigma_y0, eta,
                                                cfg.variant);
            const std::size_t base = (k - lo) * D;
            for (std::size_t d = 0; d < D; ++d) {
                const std::size_t r = base + d;
                batch.ts[r] = t;
                detail::fill_xi_row(batch.input.row(r), y_t, prior->mean, prior->variance,
                                    temb.value.data() + static_cast<std::size_t>(t - 1) * E, M, E,
                                    d);
                for (std::size_t i = 0; i < M; ++i) {
                    eta_rows(r, i) = eta(i, d);
                    if (full) {
                        const double st =
                            posterior_scalar(sched, t, prior->variance(i, d), w.sigma_y0(i, d))
                                .sigma_tilde;
                        sigma_tilde_rows(r, i) = std::max(st, kVarianceFloor);
                    }
                }
            }
        }

        detail::xi_forward(model, batch, learn);

        double loss = 0.0;
        Matrix d_eta(R, M), d_sigma(R, M);
        const double inv_b = 1.0 / static_cast<double>(B);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t i = 0; i < M; ++i) {
                const double de = eta_rows(r, i) - batch.eta(r, i);
                loss += de * de;
                d_eta(r, i) = -2.0 * de * inv_b;
                if (full) {
                    const double st = sigma_tilde_rows(r, i);
                    const double sth = batch.sigma(r, i);
                    const double ratio = st / sth;
                    loss += ratio - std::log(ratio);
                    d_sigma(r, i) = (1.0 / sth - st / (sth * sth)) * inv_b;
                } else {
                    loss += 1.0;  // pinned variance term at its x - log x minimum
                }
            }
        loss *= inv_b;
        if (!std::isfinite(loss))
            throw TrainingError("denoiser loss diverged");

        if (learn) {
            model.store.zero_grad();
            detail::xi_backward(model, batch, d_eta, d_sigma);
            if (cfg.end_to_end) {
                // Joint co-training: estimators take their supervised
                // gradients on the same batch; the diffusion loss is not
                // propagated through the corruption.
                for (auto* est : {&f_model, &g_model}) {
                    const bool var_target = est == &g_model;
                    const Matrix in = detail::history_rows(ws, idx, lo, hi);
                    const Matrix tgt = detail::target_rows(ws, idx, lo, hi, var_target);
                    MlpCache cache;
                    Matrix pred = mlp_forward(est->store, est->prefix, est->spec, in, &cache);
                    Matrix grad(pred.rows(), pred.cols());
                    const double scale = 2.0 / static_cast<double>(pred.size());
                    for (std::size_t r = 0; r < pred.rows(); ++r)
                        for (std::size_t j = 0; j < pred.cols(); ++j)
                            grad(r, j) = scale * (pred(r, j) - tgt(r, j));
                    est->store.zero_grad();
                    mlp_backward(est->store, est->prefix, est->spec, cache, grad);
                    adam_step(est->store, cfg.lr);
                }
            }
            adam_step(model.store, cfg.lr);
        }
        return loss;
    };

    std::vector<std::size_t> idx(train.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<std::size_t> val_idx(val.size());
    for (std::size_t i = 0; i < val_idx.size(); ++i) val_idx[i] = i;

    auto validation_loss = [&]() {
        // Fixed substreams make the validation draw identical across
        // epochs, so checkpoint selection compares like with like.
        Rng vt = Rng::substream(cfg.seed, Stream::t_draw, 1);
        Rng ve = Rng::substream(cfg.seed, Stream::eta_draw, 1);
        double total = 0.0;
        std::size_t batches = 0;
        const std::size_t step = static_cast<std::size_t>(cfg.batch_size);
        for (std::size_t lo = 0; lo < val.size(); lo += step) {
            const std::size_t hi = std::min(val.size(), lo + step);
            total += run_batch(val, cfg.end_to_end ? nullptr : &val_priors, val_idx, lo, hi, vt,
                               ve, false) *
                     static_cast<double>(hi - lo);
            ++batches;
        }
        (void)batches;
        return total / static_cast<double>(val.size());
    };

    TrainNsdiffHistory hist;
    double best = std::numeric_limits<double>::infinity();
    auto best_values = model.store.snapshot_values();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(idx);
        const std::size_t step = static_cast<std::size_t>(cfg.batch_size);
        for (std::size_t lo = 0; lo < train.size(); lo += step) {
            const std::size_t hi = std::min(train.size(), lo + step);
            const double loss = run_batch(train, cfg.end_to_end ? nullptr : &train_priors, idx, lo,
                                          hi, t_rng, eta_rng, true);
            if (epoch == 0 && hist.first_steps_loss.size() < 200)
                hist.first_steps_loss.push_back(loss);
        }
        const double vl = validation_loss();
        hist.epoch_val_loss.push_back(vl);
        if (vl < best) {
            best = vl;
            best_values = model.store.snapshot_values();
            hist.best_epoch = epoch;
        }
    }
    model.store.restore_values(best_values);
    hist.best_val_loss = best;
    if (history) *history = hist;
    f_model.frozen = true;
    g_model.frozen = true;
    return model;
}

// S forecast paths for one window; quantiles on demand.
struct ForecastEnsemble {
    std::vector<Matrix> samples;  // S matrices of M x D, data units

    Matrix mean() const {
        Matrix m(samples.front().rows(), samples.front().cols());
        for (const auto& s : samples)
            for (std::size_t i = 0; i < m.size(); ++i) m.raw()[i] += s.raw()[i];
        for (double& v : m.raw()) v /= static_cast<double>(samples.size());
        return m;
    }

    Matrix stddev() const {
        const Matrix mu = mean();
        Matrix v(mu.rows(), mu.cols());
        for (const auto& s : samples)
            for (std::size_t i = 0; i < v.size(); ++i) {
                const double d = s.raw()[i] - mu.raw()[i];
                v.raw()[i] += d * d;
            }
        for (double& x : v.raw()) x = std::sqrt(x / static_cast<double>(samples.size()));
        return v;
    }

    Matrix quantile(double p) const {
        Matrix q(samples.front().rows(), samples.front().cols());
        std::vector<double> cell(samples.size());
        for (std::size_t i = 0; i < q.size(); ++i) {
            for (std::size_t s = 0; s < samples.size(); ++s) cell[s] = samples[s].raw()[i];
            std::sort(cell.begin(), cell.end());
            q.raw()[i] = quantile_sorted(cell, p);
        }
        return q;
    }

    std::vector<double> cell_samples(std::size_t step, std::size_t feature) const {
        std::vector<double> out(samples.size());
        for (std::size_t s = 0; s < samples.size(); ++s) out[s] = samples[s](step, feature);
        return out;
    }
};

// Batched denoiser interface: fills eta/sigma (each M x D) for every path's
// current state at step t. Tests may inject closed-form oracles.
using BatchDenoiser = std::function<void(const std::vector<Matrix>& y_t, int t,
                                         std::vector<Matrix>& eta, std::vector<Matrix>& sigma)>;

inline BatchDenoiser make_batch_denoiser(const DenoiserModel& model, const EndpointPrior& prior) {
    return [&model, prior](const std::vector<Matrix>& y_t, int t, std::vector<Matrix>& eta,
                           std::vector<Matrix>& sigma) {
        const std::size_t S = y_t.size();
        const std::size_t M = model.horizon, E = model.t_embed_dim;
        const std::size_t D = y_t.front().cols();
        detail::XiBatch batch;
        batch.input = Matrix(S * D, model.input_dim());
        batch.ts.assign(S * D, t);
        const auto& temb = model.store.at(model.prefix + "/temb");
        const double* trow = temb.value.data() + static_cast<std::size_t>(t - 1) * E;
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t d = 0; d < D; ++d)
                detail::fill_xi_row(batch.input.row(s * D + d), y_t[s], prior.mean, prior.variance,
                                    trow, M, E, d);
        detail::xi_forward(model, batch, false);
        eta.assign(S, Matrix(M, D));
        sigma.assign(S, Matrix(M, D));
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t d = 0; d < D; ++d) {
                const std::size_t r = s * D + d;
                for (std::size_t i = 0; i < M; ++i) {
                    eta[s](i, d) = batch.eta(r, i);
                    sigma[s](i, d) = batch.sigma(r, i);
                }
            }
    };
}

/**
 * Reverse-process sampling for one window. Every path starts at the
 * endpoint draw, walks t = T..1 estimating (eta, sigma) with the denoiser,
 * reconstructs the data variance through the quadratic solver, inverts the
 * closed-form marginal for Y0-hat and steps with the posterior weights; at
 * t = 1 the reconstruction is returned deterministically. Paths own
 * substreams derived from (seed, path index).
 *
 * Results are mapped back to data units when a standardizer is given.
 */
inline ForecastEnsemble sample_forecast(const NoiseSchedule& sched, const BatchDenoiser& xi,
                                        const EndpointPrior& prior, int S, std::uint64_t seed,
                                        VariantMode mode = VariantMode::full_nsdiff,
                                        const Standardizer* to_data_units = nullptr,
                                        SolverDiagnostics* diag = nullptr) {
    if (S < 1)
        throw std::invalid_argument("sample_forecast: need at least one path");
    const std::size_t M = prior.mean.rows(), D = prior.mean.cols();
    const int T = sched.steps();

    std::vector<Rng> path_rng;
    path_rng.reserve(static_cast<std::size_t>(S));
    std::vector<Matrix> y(static_cast<std::size_t>(S), Matrix(M, D));
    for (int s = 0; s < S; ++s) {
        path_rng.push_back(Rng::substream(seed, Stream::sample_path, static_cast<std::uint64_t>(s)));
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t d = 0; d < D; ++d) {
                const double g = mode == VariantMode::no_lsnm ? 1.0 : prior.variance(i, d);
                y[static_cast<std::size_t>(s)](i, d) =
                    prior.mean(i, d) + std::sqrt(g) * path_rng.back().gaussian();
            }
    }

    std::vector<Matrix> eta, sigma;
    ForecastEnsemble out;
    out.samples.assign(static_cast<std::size_t>(S), Matrix(M, D));

    for (int t = T; t >= 1; --t) {
        xi(y, t, eta, sigma);
        const double rab = std::sqrt(sched.alpha_bar(t));
        for (std::size_t s = 0; s < static_cast<std::size_t>(S); ++s) {
            Matrix z;
            if (t > 1) {
                z = Matrix(M, D);
                path_rng[s].fill_gaussian(z);
            }
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t d = 0; d < D; ++d) {
                    const double g = mode == VariantMode::no_lsnm ? 1.0 : prior.variance(i, d);
                    double sigma_theta = sigma[s](i, d);
                    double sigma_y0_hat;
                    switch (mode) {
                        case VariantMode::full_nsdiff:
                            sigma_y0_hat = t >= 2
                                               ? solve_sigma_y0(sched, t, g, sigma_theta, diag)
                                               : g;
                            break;
                        case VariantMode::no_uans: sigma_y0_hat = g; break;
                        case VariantMode::no_lsnm: sigma_y0_hat = 1.0; break;
                    }
                    const double sbar = marginal_variance(mode, sched, t, g, sigma_y0_hat);
                    const double y0_hat = (y[s](i, d) - (1.0 - rab) * prior.mean(i, d) -
                                           std::sqrt(sbar) * eta[s](i, d)) /
                                          rab;
                    if (t > 1) {
                        const PosteriorScalar p = posterior_scalar(sched, t, g, sigma_y0_hat, mode);
                        if (mode != VariantMode::full_nsdiff) {
                            // Variant denoisers are trained noise-only; the
                            // step noise uses the analytic posterior scale.
                            sigma_theta = p.sigma_tilde;
                        }
                        y[s](i, d) = p.gamma0 * y0_hat + p.gamma1 * y[s](i, d) +
                                     p.gamma2 * prior.mean(i, d) +
                                     std::sqrt(sigma_theta) * z(i, d);
                    } else {
                        out.samples[s](i, d) = y0_hat;
                    }
                }
        }
    }

    if (to_data_units)
        for (auto& s : out.samples) to_data_units->inverse(s);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint format: "NSDF" magic, u32 version, length-prefixed named-array
// table (name, shape, float64 little-endian payload), JSON config trailer.
// Schedule coefficients are recomputed on load, never stored.
// ---------------------------------------------------------------------------

struct Checkpoint {
    TrainConfig config;
    EstimatorModel f;
    EstimatorModel g;
    DenoiserModel xi;
    bool has_denoiser = false;
    Standardizer scaler;
    std::vector<std::string> feature_names;
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(v)))
        throw FormatError("checkpoint truncated");
    return v;
}
inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(v)))
        throw FormatError("checkpoint truncated");
    return v;
}

inline void write_array(std::ostream& os, const std::string& name,
                        const std::vector<std::size_t>& shape, const std::vector<double>& data) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t s : shape) write_u64(os, s);
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(double)));
}

struct NamedArray {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> data;
};

inline NamedArray read_array(std::istream& is) {
    NamedArray a;
    const std::uint32_t name_len = read_u32(is);
    a.name.resize(name_len);
    if (!is.read(a.name.data(), name_len))
        throw FormatError("checkpoint truncated in array name");
    const std::uint32_t ndim = read_u32(is);
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
        const std::uint64_t dim = read_u64(is);
        a.shape.push_back(static_cast<std::size_t>(dim));
        count *= static_cast<std::size_t>(dim);
    }
    a.data.resize(count);
    if (!is.read(reinterpret_cast<char*>(a.data.data()),
                 static_cast<std::streamsize>(count * sizeof(double))))
        throw FormatError("checkpoint truncated in array payload");
    return a;
}

inline nlohmann::json config_to_json(const TrainConfig& c) {
    return nlohmann::json{{"epochs", c.epochs},
                          {"batch_size", c.batch_size},
                          {"lr", c.lr},
                          {"seed", c.seed},
                          {"T", c.T},
                          {"beta_start", c.beta_start},
                          {"beta_end", c.beta_end},
                          {"variant", variant_name(c.variant)},
                          {"variance_window", c.variance_window},
                          {"input_len", c.input_len},
                          {"horizon", c.horizon},
                          {"sample_count", c.sample_count},
                          {"end_to_end", c.end_to_end},
                          {"f_hidden", c.f_hidden},
                          {"g_hidden", c.g_hidden},
                          {"xi_hidden", c.xi_hidden},
                          {"t_embed_dim", c.t_embed_dim}};
}

inline VariantMode variant_from_name(const std::string& s) {
    if (s == "full") return VariantMode::full_nsdiff;
    if (s == "no_uans") return VariantMode::no_uans;
    if (s == "no_lsnm") return VariantMode::no_lsnm;
    throw ConfigError("unknown variant '" + s + "' (full | no_uans | no_lsnm)");
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.lr = j.at("lr").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.T = j.at("T").get<int>();
    c.beta_start = j.at("beta_start").get<double>();
    c.beta_end = j.at("beta_end").get<double>();
    c.variant = variant_from_name(j.at("variant").get<std::string>());
    c.variance_window = j.at("variance_window").get<int>();
    c.input_len = j.at("input_len").get<int>();
    c.horizon = j.at("horizon").get<int>();
    c.sample_count = j.at("sample_count").get<int>();
    c.end_to_end = j.at("end_to_end").get<bool>();
    c.f_hidden = j.at("f_hidden").get<std::size_t>();
    c.g_hidden = j.at("g_hidden").get<std::size_t>();
    c.xi_hidden = j.at("xi_hidden").get<std::size_t>();
    c.t_embed_dim = j.at("t_embed_dim").get<std::size_t>();
    return c;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'N', 'S', 'D', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw DataError("cannot write checkpoint: " + path);
    os.write(kCheckpointMagic, 4);
    detail::write_u32(os, kCheckpointVersion);

    std::vector<const ParameterStore*> stores{&ckpt.f.store, &ckpt.g.store};
    if (ckpt.has_denoiser) stores.push_back(&ckpt.xi.store);
    std::uint32_t count = 2;  // scaler mean/std
    for (const auto* s : stores) count += static_cast<std::uint32_t>(s->entries().size());
    detail::write_u32(os, count);

    for (const auto* s : stores)
        for (const auto& [name, e] : s->entries()) detail::write_array(os, name, e.shape, e.value);
    detail::write_array(os, "scaler/mean", {ckpt.scaler.mean.size()}, ckpt.scaler.mean);
    detail::write_array(os, "scaler/std", {ckpt.scaler.scale.size()}, ckpt.scaler.scale);

    nlohmann::json trailer;
    trailer["config"] = detail::config_to_json(ckpt.config);
    trailer["has_denoiser"] = ckpt.has_denoiser;
    trailer["feature_names"] = ckpt.feature_names;
    const std::string text = trailer.dump();
    detail::write_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!os)
        throw DataError("short write while saving checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw MissingArtifactError("checkpoint not found: " + path);
    char magic[4] = {};
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw FormatError("bad checkpoint magic in " + path);
    const std::uint32_t version = detail::read_u32(is);
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t count = detail::read_u32(is);
    std::vector<detail::NamedArray> arrays;
    arrays.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) arrays.push_back(detail::read_array(is));
    const std::uint64_t json_len = detail::read_u64(is);
    std::string text(json_len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(json_len)))
        throw FormatError("checkpoint truncated in config trailer");

    nlohmann::json trailer;
    try {
        trailer = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad checkpoint trailer: ") + e.what());
    }

    Checkpoint ckpt;
    ckpt.config = detail::config_from_json(trailer.at("config"));
    ckpt.has_denoiser = trailer.at("has_denoiser").get<bool>();
    ckpt.feature_names = trailer.at("feature_names").get<std::vector<std::string>>();

    const std::size_t N = static_cast<std::size_t>(ckpt.config.input_len);
    const std::size_t M = static_cast<std::size_t>(ckpt.config.horizon);
    ckpt.f.prefix = "f_phi";
    ckpt.f.spec.widths = {N, ckpt.config.f_hidden, ckpt.config.f_hidden, M};
    ckpt.f.spec.head = OutputHead::identity;
    ckpt.f.frozen = true;
    ckpt.g.prefix = "g_psi";
    ckpt.g.spec.widths = {N, ckpt.config.g_hidden, ckpt.config.g_hidden, M};
    ckpt.g.spec.head = OutputHead::softplus;
    ckpt.g.frozen = true;
    if (ckpt.has_denoiser) {
        ckpt.xi.prefix = "xi";
        ckpt.xi.horizon = M;
        ckpt.xi.t_embed_dim = ckpt.config.t_embed_dim;
        ckpt.xi.T = ckpt.config.T;
        ckpt.xi.spec.widths = {ckpt.xi.input_dim(), ckpt.config.xi_hidden, ckpt.config.xi_hidden,
                               2 * M};
        ckpt.xi.spec.head = OutputHead::identity;
    }

    for (auto& a : arrays) {
        if (a.name == "scaler/mean") {
            ckpt.scaler.mean = std::move(a.data);
        } else if (a.name == "scaler/std") {
            ckpt.scaler.scale = std::move(a.data);
        } else {
            ParameterStore* target = nullptr;
            if (a.name.rfind("f_phi/", 0) == 0) target = &ckpt.f.store;
            else if (a.name.rfind("g_psi/", 0) == 0) target = &ckpt.g.store;
            else if (a.name.rfind("xi/", 0) == 0) target = &ckpt.xi.store;
            if (!target)
                throw FormatError("unknown checkpoint section for array '" + a.name + "'");
            auto& e = target->add(a.name, a.shape);
            e.value = std::move(a.data);
        }
    }
    if (ckpt.scaler.mean.empty() || ckpt.scaler.scale.empty())
        throw FormatError("checkpoint missing scaler arrays");
    if (!ckpt.f.store.has("f_phi/W0"))
        throw FormatError("checkpoint missing model section f_phi");
    if (!ckpt.g.store.has("g_psi/W0"))
        throw FormatError("checkpoint missing model section g_psi");
    if (ckpt.has_denoiser && !ckpt.xi.store.has("xi/temb"))
        throw FormatError("checkpoint missing model section xi");
    return ckpt;
}

}  // namespace nsdiff
