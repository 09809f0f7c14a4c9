#pragma once

// Reproducing kernels on chart coordinates and on the atlas, plus the
// unbiased (U-statistic) MMD^2 estimator.
//
// Chart coordinates always enter as logits: the inverse multiquadratics kernel
// on [0,1]^d is pulled back through the sigmoid, so
//   k0(x, y) = c / (c + |logit(x) - logit(y)|^2),   c = d / 6.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "chartnet/error.hpp"
#include "chartnet/tensor.hpp"

namespace chartnet {

struct KernelSpec {
    enum class Kind { imq_logits, delta_indices, product_atlas };

    Kind kind = Kind::imq_logits;
    std::size_t latent_dim = 1;
    /// Number of charts; used only to range-check chart indices. 0 disables the check.
    std::size_t n_charts = 0;

    double scale() const { return static_cast<double>(latent_dim) / 6.0; }

    void validate() const {
        if (latent_dim < 1) throw DomainError("kernel: latent dimension must be >= 1");
    }
};

inline KernelSpec imq_spec(std::size_t d) { return {KernelSpec::Kind::imq_logits, d, 0}; }
inline KernelSpec atlas_spec(std::size_t d, std::size_t n) { return {KernelSpec::Kind::product_atlas, d, n}; }

/// Inverse multiquadratics kernel on logits.
inline double k0_logits(std::span<const double> u, std::span<const double> v, const KernelSpec& spec) {
    spec.validate();
    if (u.size() != v.size() || u.size() != spec.latent_dim) {
        throw ShapeError("k0_logits: expected two vectors of dimension " + std::to_string(spec.latent_dim));
    }
    double sq = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        if (!std::isfinite(u[i]) || !std::isfinite(v[i])) throw NonFiniteError("k0_logits: non-finite input");
        const double diff = u[i] - v[i];
        sq += diff * diff;
    }
    const double c = spec.scale();
    return c / (c + sq);
}

/// Delta kernel on chart indices (1-based).
inline double k_indices(std::size_t i, std::size_t j) { return i == j ? 1.0 : 0.0; }

/// Point of the latent space Z = [0,1]^d x {1..n}, coordinates given as logits.
struct AtlasPoint {
    std::span<const double> logits;
    std::size_t chart = 1;
};

/// k_Z((u,i),(v,j)) = delta_ij k0(u, v).
inline double k_atlas(const AtlasPoint& a, const AtlasPoint& b, const KernelSpec& spec) {
    auto check = [&](std::size_t c) {
        if (c < 1 || (spec.n_charts != 0 && c > spec.n_charts)) {
            throw DomainError("k_atlas: chart index " + std::to_string(c) + " out of range");
        }
    };
    check(a.chart);
    check(b.chart);
    if (a.chart != b.chart) return 0.0;
    return k0_logits(a.logits, b.logits, spec);
}

/// Unbiased MMD^2 between two samples:
///   1/(N(N-1)) sum_{j!=k} k(p_j,p_k) - 2/(N M) sum_{j,k} k(p_j,q_k) + 1/(M(M-1)) sum_{j!=k} k(q_j,q_k).
/// May be negative.
template <typename Point, typename Kernel>
double mmd2_unbiased(std::span<const Point> p, std::span<const Point> q, Kernel&& kernel) {
    if (p.size() < 2 || q.size() < 2) throw DomainError("mmd2_unbiased: both samples need at least 2 points");
    auto within = [&](std::span<const Point> s) {
        double acc = 0.0;
        for (std::size_t j = 0; j < s.size(); ++j)
            for (std::size_t k = 0; k < s.size(); ++k)
                if (j != k) acc += kernel(s[j], s[k]);
        const double n = static_cast<double>(s.size());
        return acc / (n * (n - 1.0));
    };
    double cross = 0.0;
    for (const auto& a : p)
        for (const auto& b : q) cross += kernel(a, b);
    cross /= static_cast<double>(p.size()) * static_cast<double>(q.size());
    return within(p) - 2.0 * cross + within(q);
}

/// Differentiable kernel matrix K(j,k) = c / (c + |a_j - b_k|^2) on logit rows.
template <typename T>
Tensor<T> k0_matrix(const Tensor<T>& a, const Tensor<T>& b, const KernelSpec& spec) {
    const T c = static_cast<T>(spec.scale());
    const auto scale = Tensor<T>::scalar(c);
    return scale / (pairwise_sq_dist(a, b) + c);
}

} // namespace chartnet
