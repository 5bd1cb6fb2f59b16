#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "nsdiff/core.hpp"
#include "nsdiff/dataset.hpp"
#include "nsdiff/learner.hpp"
#include "nsdiff/prior.hpp"
#include "nsdiff/rng.hpp"

namespace nsdiff {

// A pretrained per-feature approximator: one MLP mapping the N-length
// history channel to M outputs, weights shared across features.
struct EstimatorModel {
    ParameterStore store;
    MlpSpec spec;
    std::string prefix;
    bool frozen = false;
};

struct PretrainHistory {
    std::vector<double> epoch_val_mse;
    double best_val_mse = 0.0;
    int best_epoch = -1;
};

namespace detail {

// Rows are (window, feature) pairs: history channels for the input, target
// channels for the label.
inline Matrix history_rows(const std::vector<WindowPair>& ws, const std::vector<std::size_t>& idx,
                           std::size_t lo, std::size_t hi) {
    const std::size_t N = ws.front().x.rows(), D = ws.front().x.cols();
    Matrix out((hi - lo) * D, N);
    std::size_t r = 0;
    for (std::size_t k = lo; k < hi; ++k) {
        const Matrix& x = ws[idx[k]].x;
        for (std::size_t d = 0; d < D; ++d, ++r)
            for (std::size_t i = 0; i < N; ++i) out(r, i) = x(i, d);
    }
    return out;
}

inline Matrix target_rows(const std::vector<WindowPair>& ws, const std::vector<std::size_t>& idx,
                          std::size_t lo, std::size_t hi, bool variance_target) {
    const std::size_t M = ws.front().y0.rows(), D = ws.front().y0.cols();
    Matrix out((hi - lo) * D, M);
    std::size_t r = 0;
    for (std::size_t k = lo; k < hi; ++k) {
        const Matrix& y = variance_target ? ws[idx[k]].sigma_y0 : ws[idx[k]].y0;
        for (std::size_t d = 0; d < D; ++d, ++r)
            for (std::size_t i = 0; i < M; ++i) out(r, i) = y(i, d);
    }
    return out;
}

inline double validation_mse(const EstimatorModel& model, const std::vector<WindowPair>& val,
                             bool variance_target) {
    std::vector<std::size_t> idx(val.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    double sum = 0.0;
    std::size_t cells = 0;
    const std::size_t chunk = 256;
    for (std::size_t lo = 0; lo < val.size(); lo += chunk) {
        const std::size_t hi = std::min(val.size(), lo + chunk);
        const Matrix in = history_rows(val, idx, lo, hi);
        const Matrix tgt = target_rows(val, idx, lo, hi, variance_target);
        const Matrix pred = mlp_forward(model.store, model.prefix, model.spec, in);
        for (std::size_t r = 0; r < pred.rows(); ++r)
            for (std::size_t j = 0; j < pred.cols(); ++j) {
                const double d = pred(r, j) - tgt(r, j);
                sum += d * d;
            }
        cells += pred.size();
    }
    return sum / static_cast<double>(cells);
}

// Supervised MSE pretraining shared by the mean and variance estimators;
// retains the best-validation parameter snapshot and freezes the model.
inline EstimatorModel pretrain_supervised(const std::vector<WindowPair>& train,
                                          const std::vector<WindowPair>& val, int epochs,
                                          double lr, std::uint64_t seed, std::size_t hidden,
                                          int batch_size, bool variance_target,
                                          PretrainHistory* history) {
    if (train.empty() || val.empty())
        throw TrainingError("pretraining needs nonempty train and val window sets");
    const std::size_t N = train.front().x.rows();
    const std::size_t M = train.front().y0.rows();

    EstimatorModel model;
    model.prefix = variance_target ? "g_psi" : "f_phi";
    model.spec.widths = {N, hidden, hidden, M};
    model.spec.head = variance_target ? OutputHead::softplus : OutputHead::identity;
    Rng init = Rng::substream(seed, variance_target ? Stream::init_variance : Stream::init_mean);
    init_mlp(model.store, model.prefix, model.spec, init);
    Rng shuffle_rng = Rng::substream(seed, Stream::shuffle, variance_target ? 1 : 0);

    std::vector<std::size_t> idx(train.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    double best = std::numeric_limits<double>::infinity();
    std::map<std::string, std::vector<double>> best_values = model.store.snapshot_values();
    PretrainHistory hist;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        shuffle_rng.shuffle(idx);
        for (std::size_t lo = 0; lo < train.size(); lo += static_cast<std::size_t>(batch_size)) {
            const std::size_t hi = std::min(train.size(), lo + static_cast<std::size_t>(batch_size));
            const Matrix in = history_rows(train, idx, lo, hi);
            const Matrix tgt = target_rows(train, idx, lo, hi, variance_target);
            MlpCache cache;
            Matrix pred = mlp_forward(model.store, model.prefix, model.spec, in, &cache);
            double loss = 0.0;
            Matrix grad(pred.rows(), pred.cols());
            const double scale = 1.0 / static_cast<double>(pred.size());
            for (std::size_t r = 0; r < pred.rows(); ++r)
                for (std::size_t j = 0; j < pred.cols(); ++j) {
                    const double d = pred(r, j) - tgt(r, j);
                    loss += d * d * scale;
                    grad(r, j) = 2.0 * d * scale;
                }
            if (!std::isfinite(loss))
                throw TrainingError(model.prefix + " loss diverged at epoch " +
                                    std::to_string(epoch + 1) + ", batch " +
                                    std::to_string(lo / static_cast<std::size_t>(batch_size) + 1));
            model.store.zero_grad();
            mlp_backward(model.store, model.prefix, model.spec, cache, grad);
            adam_step(model.store, lr);
        }
        const double val_mse = validation_mse(model, val, variance_target);
        hist.epoch_val_mse.push_back(val_mse);
        if (val_mse < best) {
            best = val_mse;
            best_values = model.store.snapshot_values();
            hist.best_epoch = epoch;
        }
    }
    model.store.restore_values(best_values);
    hist.best_val_mse = best;
    if (history) *history = hist;
    model.frozen = true;
    return model;
}

}  // namespace detail

// Fits f(X) ~ E[Y|X] by mean squared error; identity output head.
inline EstimatorModel pretrain_mean(const std::vector<WindowPair>& train,
                                    const std::vector<WindowPair>& val, int epochs, double lr,
                                    std::uint64_t seed, std::size_t hidden = 512,
                                    int batch_size = 32, PretrainHistory* history = nullptr) {
    return detail::pretrain_supervised(train, val, epochs, lr, seed, hidden, batch_size, false,
                                       history);
}

// Fits g(X) to the sliding-window variance targets; softplus head keeps
// every output strictly positive.
inline EstimatorModel pretrain_variance(const std::vector<WindowPair>& train,
                                        const std::vector<WindowPair>& val, int epochs, double lr,
                                        std::uint64_t seed, std::size_t hidden = 512,
                                        int batch_size = 32, PretrainHistory* history = nullptr) {
    for (const auto& w : train)
        if (w.sigma_y0.size() == 0)
            throw TrainingError("variance pretraining needs sigma_y0 targets");
    return detail::pretrain_supervised(train, val, epochs, lr, seed, hidden, batch_size, true,
                                       history);
}

// Applies a per-feature model to every feature column of one history
// window; rows of the internal batch are features.
inline Matrix model_forward_window(const EstimatorModel& model, const Matrix& x) {
    const std::size_t N = x.rows(), D = x.cols();
    if (N != model.spec.input_dim())
        throw std::invalid_argument("history length " + std::to_string(N) +
                                    " does not match model input " +
                                    std::to_string(model.spec.input_dim()));
    Matrix in(D, N);
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t i = 0; i < N; ++i) in(d, i) = x(i, d);
    const Matrix out = mlp_forward(model.store, model.prefix, model.spec, in);
    Matrix res(out.cols(), D);
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t i = 0; i < out.cols(); ++i) res(i, d) = out(d, i);
    return res;
}

inline EndpointPrior predict_prior(const EstimatorModel& mean_model,
                                   const EstimatorModel& variance_model, const Matrix& x) {
    if (!mean_model.frozen || !variance_model.frozen)
        throw TrainingError("predict_prior requires frozen estimator models");
    EndpointPrior p;
    p.mean = model_forward_window(mean_model, x);
    p.variance = model_forward_window(variance_model, x);
    for (double& v : p.variance.raw())
        if (v < kVarianceFloor) v = kVarianceFloor;
    return p;
}

}  // namespace nsdiff
