#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace nsdiff {

// Error classes carry a short machine-parsable tag; the CLI prints
// "<tag>: <detail>" and maps tags onto exit codes.
class Error : public std::runtime_error {
public:
    Error(std::string tag, const std::string& detail)
        : std::runtime_error(detail), tag_(std::move(tag)) {}
    const std::string& tag() const { return tag_; }

private:
    std::string tag_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& d) : Error("config", d) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& d) : Error("data", d) {}
};

class TrainingError : public Error {
public:
    explicit TrainingError(const std::string& d) : Error("training", d) {}
};

class FormatError : public Error {
public:
    explicit FormatError(const std::string& d) : Error("format", d) {}
};

class MissingArtifactError : public Error {
public:
    explicit MissingArtifactError(const std::string& d) : Error("missing-artifact", d) {}
};

class SolverError : public Error {
public:
    SolverError(const std::string& d, int t, double l0, double l1, double l2)
        : Error("solver", d), t(t), lambda0(l0), lambda1(l1), lambda2(l2) {}
    int t;
    double lambda0, lambda1, lambda2;
};

class InternalError : public Error {
public:
    explicit InternalError(const std::string& d) : Error("internal", d) {}
};

// Row-major 2-D array of doubles. Time runs along rows, features along
// columns everywhere in this library.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double* row(std::size_t r) { return data_.data() + r * cols_; }
    const double* row(std::size_t r) const { return data_.data() + r * cols_; }

    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<double> data_;
};

// Elementwise ground-truth variances are clamped below at this value
// (standardized data units squared); several formulas divide by them.
inline constexpr double kVarianceFloor = 1e-6;

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Population (divisor n) variance; matches the variance-target convention.
inline double population_variance(const double* x, std::size_t n) {
    if (n == 0) return 0.0;
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += x[i];
    m /= static_cast<double>(n);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = x[i] - m;
        s += d * d;
    }
    return s / static_cast<double>(n);
}

inline double population_variance(const std::vector<double>& v) {
    return population_variance(v.data(), v.size());
}

inline double pearson_correlation(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw std::invalid_argument("pearson_correlation: need two equal-length series");
    const double ma = mean_of(a), mb = mean_of(b);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

inline double softplus(double x) {
    if (x > 30.0) return x;
    return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace nsdiff
