#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "nsdiff/core.hpp"
#include "nsdiff/rng.hpp"

namespace nsdiff {

enum class Split { train, val, test };

enum class SplitScheme { ratio_7_1_2, ett_months_12_4_4 };

struct TimeSeriesDataset {
    Matrix values;  // L x D, chronological rows
    std::vector<std::string> feature_names;
    // Chronological split bounds: train = [0, train_end), val = [train_end,
    // val_end), test = [val_end, L). Zero until split_dataset runs.
    std::size_t train_end = 0;
    std::size_t val_end = 0;

    std::size_t length() const { return values.rows(); }
    std::size_t features() const { return values.cols(); }

    std::pair<std::size_t, std::size_t> split_range(Split s) const {
        switch (s) {
            case Split::train: return {0, train_end};
            case Split::val: return {train_end, val_end};
            case Split::test: return {val_end, length()};
        }
        return {0, 0};
    }
};

// One supervised example: history x (N x D), target y0 (M x D) and the
// target's ground-truth local variance field (M x D, strictly positive).
struct WindowPair {
    Matrix x;
    Matrix y0;
    Matrix sigma_y0;
    std::size_t start = 0;  // absolute row index of x's first step
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline double parse_cell(const std::string& cell, std::size_t row, std::size_t col) {
    const char* b = cell.data();
    const char* e = b + cell.size();
    while (b < e && (*b == ' ' || *b == '\t' || *b == '\r')) ++b;
    while (e > b && (*(e - 1) == ' ' || *(e - 1) == '\t' || *(e - 1) == '\r')) --e;
    double v = 0.0;
    const auto res = std::from_chars(b, e, v);
    if (res.ec != std::errc{} || res.ptr != e)
        throw DataError("non-numeric cell '" + cell + "' at row " + std::to_string(row) +
                        ", column " + std::to_string(col));
    return v;
}

}  // namespace detail

// UTF-8 comma-separated file, one header row, optional leading date column
// (dropped), remaining columns numeric, rows in chronological order.
inline TimeSeriesDataset load_csv(const std::string& path, bool has_date_column) {
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open dataset file: " + path);
    std::string line;
    if (!std::getline(in, line))
        throw DataError("empty file (no header row): " + path);
    auto header = detail::split_csv_line(line);
    const std::size_t skip = has_date_column ? 1 : 0;
    if (header.size() <= skip)
        throw DataError("header has no feature columns: " + path);

    TimeSeriesDataset ds;
    for (std::size_t c = skip; c < header.size(); ++c) {
        std::string name = header[c];
        while (!name.empty() && (name.back() == '\r' || name.back() == ' ')) name.pop_back();
        ds.feature_names.push_back(name);
    }
    const std::size_t D = ds.feature_names.size();

    std::vector<double> flat;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        auto cells = detail::split_csv_line(line);
        if (cells.size() != D + skip)
            throw DataError("ragged row " + std::to_string(rows + 2) + ": expected " +
                            std::to_string(D + skip) + " cells, got " + std::to_string(cells.size()));
        for (std::size_t c = skip; c < cells.size(); ++c)
            flat.push_back(detail::parse_cell(cells[c], rows + 2, c + 1));
        ++rows;
    }
    if (rows == 0)
        throw DataError("dataset has a header but no data rows: " + path);

    ds.values = Matrix(rows, D);
    std::copy(flat.begin(), flat.end(), ds.values.data());
    if (!ds.values.all_finite())
        throw DataError("dataset contains non-finite values: " + path);
    return ds;
}

// Contiguous chronological splits. The ratio scheme takes floor(0.7 L) /
// floor(0.8 L); leftover rows land in the test split. The ETT scheme takes
// 12/4/4 months of steps_per_month rows.
inline void split_dataset(TimeSeriesDataset& ds, SplitScheme scheme, int steps_per_month = 0) {
    const std::size_t L = ds.length();
    std::size_t train_end = 0, val_end = 0;
    if (scheme == SplitScheme::ratio_7_1_2) {
        train_end = static_cast<std::size_t>(std::floor(0.7 * static_cast<double>(L)));
        val_end = static_cast<std::size_t>(std::floor(0.8 * static_cast<double>(L)));
    } else {
        if (steps_per_month < 1)
            throw ConfigError("ett months split needs steps_per_month >= 1");
        train_end = static_cast<std::size_t>(12) * static_cast<std::size_t>(steps_per_month);
        val_end = train_end + static_cast<std::size_t>(4) * static_cast<std::size_t>(steps_per_month);
    }
    if (!(train_end > 0 && train_end < val_end && val_end < L))
        throw DataError("dataset too short to split: L=" + std::to_string(L) +
                        " train_end=" + std::to_string(train_end) +
                        " val_end=" + std::to_string(val_end));
    ds.train_end = train_end;
    ds.val_end = val_end;
}

/**
 * Trailing-window variance of the target steps.
 *
 * x and y0 are concatenated along time; for each target step the variance
 * (population convention, divisor = window) of the `window` values ending
 * at that step is returned. Mirrors an unfold(size=window, stride=1)
 * followed by var(unbiased=False), keeping the last M frames.
 */
inline Matrix sliding_window_variance(const Matrix& x, const Matrix& y0, int window) {
    if (window < 2)
        throw DataError("variance window must be >= 2, got " + std::to_string(window));
    if (x.cols() != y0.cols())
        throw DataError("history/target feature mismatch");
    const std::size_t N = x.rows(), M = y0.rows(), D = x.cols();
    if (N + M < static_cast<std::size_t>(window))
        throw DataError("variance window " + std::to_string(window) +
                        " larger than N+M = " + std::to_string(N + M));

    const std::size_t W = static_cast<std::size_t>(window);
    Matrix out(M, D);
    std::vector<double> col(N + M);
    for (std::size_t d = 0; d < D; ++d) {
        for (std::size_t i = 0; i < N; ++i) col[i] = x(i, d);
        for (std::size_t i = 0; i < M; ++i) col[N + i] = y0(i, d);
        for (std::size_t m = 0; m < M; ++m) {
            const std::size_t end = N + m + 1;  // window ends at target step m
            const std::size_t n = std::min(W, end);
            out(m, d) = population_variance(col.data() + (end - n), n);
        }
    }
    return out;
}

// Dense stride-`stride` windows inside one split; each pair carries its
// floored variance target.
inline std::vector<WindowPair> make_windows(const TimeSeriesDataset& ds, Split split, int N, int M,
                                            int variance_window, int stride = 1) {
    if (N < 1 || M < 1 || stride < 1)
        throw ConfigError("window sizes and stride must be positive");
    const auto [lo, hi] = ds.split_range(split);
    const std::size_t span = static_cast<std::size_t>(N + M);
    if (hi < lo + span)
        throw DataError("horizon exceeds split length: split has " + std::to_string(hi - lo) +
                        " rows, window needs " + std::to_string(span));
    const std::size_t D = ds.features();

    std::vector<WindowPair> out;
    for (std::size_t start = lo; start + span <= hi; start += static_cast<std::size_t>(stride)) {
        WindowPair w;
        w.start = start;
        w.x = Matrix(static_cast<std::size_t>(N), D);
        w.y0 = Matrix(static_cast<std::size_t>(M), D);
        for (std::size_t i = 0; i < static_cast<std::size_t>(N); ++i)
            for (std::size_t d = 0; d < D; ++d) w.x(i, d) = ds.values(start + i, d);
        for (std::size_t i = 0; i < static_cast<std::size_t>(M); ++i)
            for (std::size_t d = 0; d < D; ++d)
                w.y0(i, d) = ds.values(start + static_cast<std::size_t>(N) + i, d);
        w.sigma_y0 = sliding_window_variance(w.x, w.y0, variance_window);
        for (double& v : w.sigma_y0.raw())
            if (v < kVarianceFloor) v = kVarianceFloor;
        out.push_back(std::move(w));
    }
    return out;
}

// Per-feature affine standardization fitted on the train split only. All
// diffusion arithmetic runs in this space; metrics are computed after
// mapping samples back to data units.
struct Standardizer {
    std::vector<double> mean;
    std::vector<double> scale;               // std, floored
    std::vector<std::size_t> floored_features;  // zero-variance features

    static Standardizer fit(const TimeSeriesDataset& ds) {
        if (ds.train_end == 0)
            throw DataError("standardizer requires split bounds; call split_dataset first");
        const std::size_t D = ds.features();
        Standardizer st;
        st.mean.resize(D);
        st.scale.resize(D);
        std::vector<double> col(ds.train_end);
        for (std::size_t d = 0; d < D; ++d) {
            for (std::size_t i = 0; i < ds.train_end; ++i) col[i] = ds.values(i, d);
            st.mean[d] = mean_of(col);
            double var = population_variance(col);
            if (var < 1e-8) {
                var = 1e-8;
                st.floored_features.push_back(d);
            }
            st.scale[d] = std::sqrt(var);
        }
        return st;
    }

    void transform(Matrix& m) const {
        for (std::size_t r = 0; r < m.rows(); ++r)
            for (std::size_t d = 0; d < m.cols(); ++d) m(r, d) = (m(r, d) - mean[d]) / scale[d];
    }

    void inverse(Matrix& m) const {
        for (std::size_t r = 0; r < m.rows(); ++r)
            for (std::size_t d = 0; d < m.cols(); ++d) m(r, d) = m(r, d) * scale[d] + mean[d];
    }

    void transform(TimeSeriesDataset& ds) const { transform(ds.values); }
};

namespace detail {

inline TimeSeriesDataset synth_lsnm(std::size_t length, std::uint64_t seed, bool quadratic) {
    if (length < 2)
        throw ConfigError("synthetic length must be >= 2");
    TimeSeriesDataset ds;
    ds.feature_names = {"value"};
    ds.values = Matrix(length, 1);
    Rng rng = Rng::substream(seed, Stream::synth, quadratic ? 1 : 0);
    const double span = static_cast<double>(length - 1);
    for (std::size_t t = 0; t < length; ++t) {
        const double frac = static_cast<double>(t) / span;
        const double m = 1.0 + 9.0 * frac;
        double v = 1.0 + 9.0 * frac;
        if (quadratic) v *= v;
        ds.values(t, 0) = m + v * rng.gaussian();
    }
    return ds;
}

}  // namespace detail

// Univariate location-scale sequence: mean ramps 1 -> 10; the noise scale
// ramps 1 -> 10 (linear) or 1 -> 100 (quadratic).
inline TimeSeriesDataset synth_linear(std::size_t length, std::uint64_t seed) {
    return detail::synth_lsnm(length, seed, false);
}

inline TimeSeriesDataset synth_quadratic(std::size_t length, std::uint64_t seed) {
    return detail::synth_lsnm(length, seed, true);
}

// The ramp values the generators used; handy as evaluation ground truth.
inline double synth_mean_at(std::size_t length, std::size_t t) {
    return 1.0 + 9.0 * static_cast<double>(t) / static_cast<double>(length - 1);
}

inline double synth_scale_at(std::size_t length, std::size_t t, bool quadratic) {
    const double v = 1.0 + 9.0 * static_cast<double>(t) / static_cast<double>(length - 1);
    return quadratic ? v * v : v;
}

inline void write_csv(const TimeSeriesDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out)
        throw DataError("cannot write dataset file: " + path);
    out.precision(17);
    for (std::size_t d = 0; d < ds.features(); ++d) {
        if (d) out << ',';
        out << ds.feature_names[d];
    }
    out << '\n';
    for (std::size_t r = 0; r < ds.length(); ++r) {
        for (std::size_t d = 0; d < ds.features(); ++d) {
            if (d) out << ',';
            out << ds.values(r, d);
        }
        out << '\n';
    }
}

}  // namespace nsdiff
