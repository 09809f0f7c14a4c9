#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "chartnet/encoder.hpp"
#include "chartnet/error.hpp"
#include "chartnet/tensor.hpp"

namespace chartnet {

/// Moment buffers, one per parameter, plus the step counter.
template <typename T>
struct OptimizerState {
    std::vector<Matrix<T>> first;
    std::vector<Matrix<T>> second;
    std::uint64_t step = 0;

    void ensure(const std::vector<Tensor<T>>& params) {
        if (first.empty()) {
            for (const auto& p : params) {
                first.emplace_back(p.rows(), p.cols());
                second.emplace_back(p.rows(), p.cols());
            }
        }
        if (first.size() != params.size()) throw ShapeError("optimizer: parameter count changed");
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (first[i].rows != params[i].rows() || first[i].cols != params[i].cols()) {
                throw ShapeError("optimizer: buffer shape differs from parameter " + std::to_string(i));
            }
        }
    }
};

namespace detail {

template <typename T>
void check_grads(const std::vector<Tensor<T>>& params, const std::vector<Matrix<T>>& grads) {
    if (params.size() != grads.size()) throw ShapeError("optimizer: parameter/gradient count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].rows != params[i].rows() || grads[i].cols != params[i].cols()) {
            throw ShapeError("optimizer: gradient shape differs from parameter " + std::to_string(i));
        }
    }
}

} // namespace detail

/// Adam with bias correction.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, const std::vector<Matrix<T>>& grads, OptimizerState<T>& state, double lr,
               double beta1, double beta2, double eps = 1e-8) {
    detail::check_grads(params, grads);
    state.ensure(params);
    ++state.step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& w = params[i].mutable_value();
        auto& m = state.first[i];
        auto& v = state.second[i];
        const auto& g = grads[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double gk = static_cast<double>(g.data[k]);
            const double mk = beta1 * static_cast<double>(m.data[k]) + (1.0 - beta1) * gk;
            const double vk = beta2 * static_cast<double>(v.data[k]) + (1.0 - beta2) * gk * gk;
            m.data[k] = static_cast<T>(mk);
            v.data[k] = static_cast<T>(vk);
            const double update = lr * (mk / c1) / (std::sqrt(vk / c2) + eps);
            w.data[k] = static_cast<T>(static_cast<double>(w.data[k]) - update);
        }
    }
}

/// RMSProp: v <- alpha v + (1 - alpha) g^2; w <- w - lr g / (sqrt(v) + eps).
template <typename T>
void rmsprop_step(std::vector<Tensor<T>>& params, const std::vector<Matrix<T>>& grads, OptimizerState<T>& state,
                  double lr, double alpha, double eps = 1e-8) {
    detail::check_grads(params, grads);
    state.ensure(params);
    ++state.step;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& w = params[i].mutable_value();
        auto& v = state.second[i];
        const auto& g = grads[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double gk = static_cast<double>(g.data[k]);
            const double vk = alpha * static_cast<double>(v.data[k]) + (1.0 - alpha) * gk * gk;
            v.data[k] = static_cast<T>(vk);
            w.data[k] = static_cast<T>(static_cast<double>(w.data[k]) - lr * gk / (std::sqrt(vk) + eps));
        }
    }
}

struct OptimizerConfig {
    enum class Kind { adam, rmsprop };

    Kind kind = Kind::adam;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double alpha = 0.99;
    double eps = 1e-8;

    void validate() const {
        if (!(lr > 0.0)) throw DomainError("optimizer: lr must be positive");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw DomainError("optimizer: bad betas");
        if (!(alpha >= 0.0 && alpha < 1.0)) throw DomainError("optimizer: bad alpha");
    }
};

/// Applies one update from the gradients currently held by the parameters.
template <typename T>
class Optimizer {
  public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    void step(const ParameterSet<T>& params) {
        std::vector<Tensor<T>> tensors;
        std::vector<Matrix<T>> grads;
        for (const auto& p : params) {
            tensors.push_back(p.tensor);
            grads.push_back(p.tensor.grad());
        }
        if (cfg_.kind == OptimizerConfig::Kind::adam) {
            adam_step(tensors, grads, state_, cfg_.lr, cfg_.beta1, cfg_.beta2, cfg_.eps);
        } else {
            rmsprop_step(tensors, grads, state_, cfg_.lr, cfg_.alpha, cfg_.eps);
        }
    }

    const OptimizerState<T>& state() const { return state_; }

  private:
    OptimizerConfig cfg_;
    OptimizerState<T> state_;
};

} // namespace chartnet
