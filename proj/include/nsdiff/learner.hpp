#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "nsdiff/core.hpp"
#include "nsdiff/rng.hpp"

namespace nsdiff {

// Flat named parameter arrays with paired gradient buffers and the
// optimizer's moment state. Names are "<model prefix>/<array>", so one
// store can host several models (or each model can own its store).
class ParameterStore {
public:
    struct Entry {
        std::vector<std::size_t> shape;
        std::vector<double> value;
        std::vector<double> grad;
        std::vector<double> m1;  // first-moment buffer
        std::vector<double> m2;  // second-moment buffer
    };

    Entry& add(const std::string& name, std::vector<std::size_t> shape) {
        std::size_t n = 1;
        for (std::size_t s : shape) n *= s;
        Entry e;
        e.shape = std::move(shape);
        e.value.assign(n, 0.0);
        e.grad.assign(n, 0.0);
        e.m1.assign(n, 0.0);
        e.m2.assign(n, 0.0);
        return entries_.emplace(name, std::move(e)).first->second;
    }

    Entry& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end())
            throw TrainingError("unknown parameter '" + name + "'");
        return it->second;
    }
    const Entry& at(const std::string& name) const {
        return const_cast<ParameterStore*>(this)->at(name);
    }
    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    // Sorted by name; iteration order is part of the determinism contract.
    std::map<std::string, Entry>& entries() { return entries_; }
    const std::map<std::string, Entry>& entries() const { return entries_; }

    long step() const { return step_; }
    void set_step(long s) { step_ = s; }

    void zero_grad() {
        for (auto& [name, e] : entries_)
            std::fill(e.grad.begin(), e.grad.end(), 0.0);
    }

    std::map<std::string, std::vector<double>> snapshot_values() const {
        std::map<std::string, std::vector<double>> out;
        for (const auto& [name, e] : entries_) out[name] = e.value;
        return out;
    }

    void restore_values(const std::map<std::string, std::vector<double>>& snap) {
        for (const auto& [name, v] : snap) at(name).value = v;
    }

private:
    std::map<std::string, Entry> entries_;
    long step_ = 0;
};

enum class OutputHead { identity, softplus };

// Fully-connected net: widths[0] inputs, widths.back() outputs, rectifier
// between hidden layers, optional softplus on the output (strict
// positivity for variance heads).
struct MlpSpec {
    std::vector<std::size_t> widths;
    OutputHead head = OutputHead::identity;

    std::size_t layers() const { return widths.size() - 1; }
    std::size_t input_dim() const { return widths.front(); }
    std::size_t output_dim() const { return widths.back(); }
};

namespace detail {

// C (BxN) += A (BxK) * W (KxN), all row-major.
inline void gemm_acc(const Matrix& a, const double* w, std::size_t N, Matrix& c) {
    const std::size_t B = a.rows(), K = a.cols();
    for (std::size_t i = 0; i < B; ++i) {
        const double* arow = a.row(i);
        double* crow = c.row(i);
        for (std::size_t k = 0; k < K; ++k) {
            const double av = arow[k];
            const double* wrow = w + k * N;
            for (std::size_t j = 0; j < N; ++j) crow[j] += av * wrow[j];
        }
    }
}

// C (KxN) += A^T (KxB) * B (BxN) with A given as (BxK).
inline void gemm_at_b_acc(const Matrix& a, const Matrix& b, double* c) {
    const std::size_t B = a.rows(), K = a.cols(), N = b.cols();
    for (std::size_t i = 0; i < B; ++i) {
        const double* arow = a.row(i);
        const double* brow = b.row(i);
        for (std::size_t k = 0; k < K; ++k) {
            const double av = arow[k];
            double* crow = c + k * N;
            for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
    }
}

// C (BxK) += A (BxN) * W^T (NxK) with W given as (KxN).
inline void gemm_a_wt_acc(const Matrix& a, const double* w, std::size_t wk, Matrix& c) {
    const std::size_t B = a.rows(), N = a.cols();
    for (std::size_t i = 0; i < B; ++i) {
        const double* arow = a.row(i);
        double* crow = c.row(i);
        for (std::size_t k = 0; k < wk; ++k) {
            const double* wrow = w + k * N;
            double dot = 0.0;
            for (std::size_t j = 0; j < N; ++j) dot += arow[j] * wrow[j];
            crow[k] += dot;
        }
    }
}

inline std::string weight_name(const std::string& prefix, std::size_t layer) {
    return prefix + "/W" + std::to_string(layer);
}
inline std::string bias_name(const std::string& prefix, std::size_t layer) {
    return prefix + "/b" + std::to_string(layer);
}

}  // namespace detail

// Seeded uniform init in +-1/sqrt(fan_in).
inline void init_mlp(ParameterStore& store, const std::string& prefix, const MlpSpec& spec,
                     Rng& rng) {
    for (std::size_t l = 0; l < spec.layers(); ++l) {
        const std::size_t in = spec.widths[l], out = spec.widths[l + 1];
        auto& w = store.add(detail::weight_name(prefix, l), {in, out});
        auto& b = store.add(detail::bias_name(prefix, l), {out});
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        for (double& v : w.value) v = bound * (2.0 * rng.uniform() - 1.0);
        for (double& v : b.value) v = bound * (2.0 * rng.uniform() - 1.0);
    }
}

// Post-activation of every layer (acts[0] is the input batch) plus the
// final preactivation, which the softplus head's gradient needs.
struct MlpCache {
    std::vector<Matrix> acts;
    Matrix final_pre;
};

// Batched forward pass: input (B x in) -> output (B x out). Pure given
// (store, input); pass a cache to enable mlp_backward.
inline Matrix mlp_forward(const ParameterStore& store, const std::string& prefix,
                          const MlpSpec& spec, const Matrix& input, MlpCache* cache = nullptr) {
    if (input.cols() != spec.input_dim())
        throw TrainingError("mlp_forward: input width " + std::to_string(input.cols()) +
                            " != spec input " + std::to_string(spec.input_dim()));
    if (cache) {
        cache->acts.clear();
        cache->acts.push_back(input);
    }
    Matrix cur = input;
    for (std::size_t l = 0; l < spec.layers(); ++l) {
        const auto& w = store.at(detail::weight_name(prefix, l));
        const auto& b = store.at(detail::bias_name(prefix, l));
        const std::size_t out = spec.widths[l + 1];
        Matrix next(cur.rows(), out);
        for (std::size_t i = 0; i < cur.rows(); ++i)
            for (std::size_t j = 0; j < out; ++j) next(i, j) = b.value[j];
        detail::gemm_acc(cur, w.value.data(), out, next);

        const bool last = (l + 1 == spec.layers());
        if (!last) {
            for (double& v : next.raw())
                if (v < 0.0) v = 0.0;
        } else if (spec.head == OutputHead::softplus) {
            if (cache) cache->final_pre = next;
            for (double& v : next.raw()) v = softplus(v);
        }
        if (cache && !last) cache->acts.push_back(next);
        cur = std::move(next);
    }
    return cur;
}

// Single-vector convenience wrapper.
inline std::vector<double> mlp_forward(const ParameterStore& store, const std::string& prefix,
                                       const MlpSpec& spec, const std::vector<double>& input,
                                       MlpCache* cache = nullptr) {
    Matrix in(1, input.size());
    std::copy(input.begin(), input.end(), in.data());
    Matrix out = mlp_forward(store, prefix, spec, in, cache);
    return out.raw();
}

// Accumulates parameter gradients for a batch (gradients add up; call
// store.zero_grad() between optimizer steps) and optionally returns the
// gradient with respect to the input batch.
inline void mlp_backward(ParameterStore& store, const std::string& prefix, const MlpSpec& spec,
                         const MlpCache& cache, const Matrix& output_grad,
                         Matrix* input_grad = nullptr) {
    if (cache.acts.size() != spec.layers())
        throw TrainingError("mlp_backward called without a matching forward cache");
    Matrix delta = output_grad;  // gradient at the final preactivation
    if (spec.head == OutputHead::softplus) {
        for (std::size_t i = 0; i < delta.rows(); ++i)
            for (std::size_t j = 0; j < delta.cols(); ++j)
                delta(i, j) *= sigmoid(cache.final_pre(i, j));
    }
    for (std::size_t l = spec.layers(); l-- > 0;) {
        auto& w = store.at(detail::weight_name(prefix, l));
        auto& b = store.at(detail::bias_name(prefix, l));
        const Matrix& below = cache.acts[l];
        detail::gemm_at_b_acc(below, delta, w.grad.data());
        for (std::size_t i = 0; i < delta.rows(); ++i)
            for (std::size_t j = 0; j < delta.cols(); ++j) b.grad[j] += delta(i, j);

        const bool need_input = (l > 0) || (input_grad != nullptr);
        if (!need_input) break;
        Matrix down(delta.rows(), spec.widths[l]);
        detail::gemm_a_wt_acc(delta, w.value.data(), spec.widths[l], down);
        if (l > 0) {
            // Rectifier mask from the cached post-activation.
            for (std::size_t i = 0; i < down.rows(); ++i)
                for (std::size_t j = 0; j < down.cols(); ++j)
                    if (below(i, j) <= 0.0) down(i, j) = 0.0;
            delta = std::move(down);
        } else if (input_grad) {
            *input_grad = std::move(down);
        }
    }
}

// Adaptive-moment update with bias correction. Deterministic given the
// buffers; throws on non-finite gradients or parameters.
inline void adam_step(ParameterStore& store, double lr, double beta1 = 0.9, double beta2 = 0.999,
                      double eps = 1e-8) {
    store.set_step(store.step() + 1);
    const double t = static_cast<double>(store.step());
    const double c1 = 1.0 - std::pow(beta1, t);
    const double c2 = 1.0 - std::pow(beta2, t);
    for (auto& [name, e] : store.entries()) {
        for (std::size_t i = 0; i < e.value.size(); ++i) {
            const double g = e.grad[i];
            if (!std::isfinite(g))
                throw TrainingError("non-finite gradient in '" + name + "' at optimizer step " +
                                    std::to_string(store.step()));
            e.m1[i] = beta1 * e.m1[i] + (1.0 - beta1) * g;
            e.m2[i] = beta2 * e.m2[i] + (1.0 - beta2) * g * g;
            const double mhat = e.m1[i] / c1;
            const double vhat = e.m2[i] / c2;
            e.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            if (!std::isfinite(e.value[i]))
                throw TrainingError("non-finite parameter in '" + name + "' at optimizer step " +
                                    std::to_string(store.step()));
        }
    }
}

}  // namespace nsdiff
