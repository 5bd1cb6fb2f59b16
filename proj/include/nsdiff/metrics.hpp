#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "nsdiff/core.hpp"
#include "nsdiff/dataset.hpp"

namespace nsdiff {

/**
 * Continuous ranked probability score of the empirical CDF of `samples`
 * against one observation,
 *
 *   CRPS = mean_i |X_i - x| - (1 / 2S^2) sum_ij |X_i - X_j|,
 *
 * which equals the integral of (Fhat(z) - 1{x <= z})^2 dz exactly. The
 * pairwise term is evaluated in O(S log S) from the order statistics.
 */
inline double crps(std::vector<double> samples, double observation) {
    const std::size_t S = samples.size();
    if (S == 0)
        throw std::invalid_argument("crps: empty sample set");
    std::sort(samples.begin(), samples.end());
    double abs_err = 0.0, pair_sum = 0.0;
    for (std::size_t k = 0; k < S; ++k) {
        abs_err += std::abs(samples[k] - observation);
        pair_sum += samples[k] * (2.0 * static_cast<double>(k) - static_cast<double>(S) + 1.0);
    }
    const double n = static_cast<double>(S);
    return abs_err / n - pair_sum / (n * n);
}

// Linear-interpolation quantile of sorted values at p in [0, 1].
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
    const std::size_t n = sorted.size();
    if (n == 1) return sorted[0];
    const double h = p * static_cast<double>(n - 1);
    const std::size_t i = std::min(static_cast<std::size_t>(h), n - 2);
    const double frac = h - static_cast<double>(i);
    return sorted[i] + frac * (sorted[i + 1] - sorted[i]);
}

// Streaming quantile-coverage counts: each observation lands in exactly one
// of `bins` sample-decile intervals; out-of-range observations go to the
// first/last bin so the coverages sum to one.
class QiceAccumulator {
public:
    explicit QiceAccumulator(int bins = 10) : counts_(static_cast<std::size_t>(bins), 0) {
        if (bins < 2)
            throw std::invalid_argument("qice: need at least 2 bins");
    }

    void add(std::vector<double> samples, double observation) {
        const std::size_t M = counts_.size();
        if (samples.size() < M)
            throw std::invalid_argument("qice: need at least " + std::to_string(M) +
                                        " samples per cell, got " + std::to_string(samples.size()));
        std::stable_sort(samples.begin(), samples.end());
        std::size_t bin = M - 1;
        for (std::size_t m = 1; m < M; ++m) {
            const double hi = quantile_sorted(samples, static_cast<double>(m) / static_cast<double>(M));
            if (observation <= hi) {
                bin = m - 1;
                break;
            }
        }
        ++counts_[bin];
        ++total_;
    }

    std::size_t total() const { return total_; }

    // Mean absolute deviation of per-bin coverage from 1/M.
    double value() const {
        if (total_ == 0)
            throw std::invalid_argument("qice: no observations accumulated");
        const double M = static_cast<double>(counts_.size());
        double dev = 0.0;
        for (std::size_t c : counts_)
            dev += std::abs(static_cast<double>(c) / static_cast<double>(total_) - 1.0 / M);
        return dev / M;
    }

private:
    std::vector<std::size_t> counts_;
    std::size_t total_ = 0;
};

inline double qice(const std::vector<std::vector<double>>& cell_samples,
                   const std::vector<double>& observations, int bins = 10) {
    if (cell_samples.size() != observations.size())
        throw std::invalid_argument("qice: sample-cell / observation count mismatch");
    QiceAccumulator acc(bins);
    for (std::size_t i = 0; i < observations.size(); ++i)
        acc.add(cell_samples[i], observations[i]);
    return acc.value();
}

struct PointMetrics {
    double mae = 0.0;
    double mse = 0.0;
};

inline PointMetrics point_metrics(const std::vector<double>& ensemble_mean,
                                  const std::vector<double>& observations) {
    if (ensemble_mean.size() != observations.size() || observations.empty())
        throw std::invalid_argument("point_metrics: size mismatch or empty");
    PointMetrics p;
    for (std::size_t i = 0; i < observations.size(); ++i) {
        const double d = ensemble_mean[i] - observations[i];
        p.mae += std::abs(d);
        p.mse += d * d;
    }
    p.mae /= static_cast<double>(observations.size());
    p.mse /= static_cast<double>(observations.size());
    return p;
}

// Max over features of test-split variance over train-split variance; the
// dataset's non-stationarity statistic.
inline double uncertainty_variation(const TimeSeriesDataset& ds) {
    if (ds.train_end == 0 || ds.val_end >= ds.length())
        throw DataError("uncertainty_variation requires split bounds");
    double worst = 0.0;
    std::vector<double> train(ds.train_end), test(ds.length() - ds.val_end);
    for (std::size_t d = 0; d < ds.features(); ++d) {
        for (std::size_t i = 0; i < ds.train_end; ++i) train[i] = ds.values(i, d);
        for (std::size_t i = ds.val_end; i < ds.length(); ++i) test[i - ds.val_end] = ds.values(i, d);
        const double vt = population_variance(train);
        const double ve = population_variance(test);
        if (vt > 0.0) worst = std::max(worst, ve / vt);
    }
    return worst;
}

struct FeatureMetrics {
    std::string name;
    double crps = 0.0, qice = 0.0, mae = 0.0, mse = 0.0;
};

// All scores are cell-uniform averages over (window, step, feature) in
// original data units.
struct EvalReport {
    double crps = 0.0, qice = 0.0, mae = 0.0, mse = 0.0;
    std::vector<FeatureMetrics> per_feature;
};

// Folds per-cell ensembles into an EvalReport; global and per-feature
// reductions share the same cells.
class MetricsAccumulator {
public:
    MetricsAccumulator(std::vector<std::string> feature_names, int qice_bins = 10)
        : names_(std::move(feature_names)),
          global_qice_(qice_bins) {
        per_feature_qice_.assign(names_.size(), QiceAccumulator(qice_bins));
        crps_sum_.assign(names_.size(), 0.0);
        mae_sum_.assign(names_.size(), 0.0);
        mse_sum_.assign(names_.size(), 0.0);
        cells_.assign(names_.size(), 0);
    }

    void add_cell(std::size_t feature, const std::vector<double>& samples, double observation) {
        const double c = crps(samples, observation);
        const double mean = mean_of(samples);
        const double d = mean - observation;
        crps_sum_[feature] += c;
        mae_sum_[feature] += std::abs(d);
        mse_sum_[feature] += d * d;
        ++cells_[feature];
        global_qice_.add(samples, observation);
        per_feature_qice_[feature].add(samples, observation);
    }

    EvalReport report() const {
        EvalReport r;
        double cs = 0.0, ms = 0.0, ss = 0.0;
        std::size_t n = 0;
        for (std::size_t d = 0; d < names_.size(); ++d) {
            FeatureMetrics f;
            f.name = names_[d];
            if (cells_[d] > 0) {
                const double c = static_cast<double>(cells_[d]);
                f.crps = crps_sum_[d] / c;
                f.mae = mae_sum_[d] / c;
                f.mse = mse_sum_[d] / c;
                f.qice = per_feature_qice_[d].value();
            }
            cs += crps_sum_[d];
            ms += mae_sum_[d];
            ss += mse_sum_[d];
            n += cells_[d];
            r.per_feature.push_back(f);
        }
        if (n == 0)
            throw DataError("metrics: no cells accumulated");
        r.crps = cs / static_cast<double>(n);
        r.mae = ms / static_cast<double>(n);
        r.mse = ss / static_cast<double>(n);
        r.qice = global_qice_.value();
        return r;
    }

private:
    std::vector<std::string> names_;
    QiceAccumulator global_qice_;
    std::vector<QiceAccumulator> per_feature_qice_;
    std::vector<double> crps_sum_, mae_sum_, mse_sum_;
    std::vector<std::size_t> cells_;
};

}  // namespace nsdiff
