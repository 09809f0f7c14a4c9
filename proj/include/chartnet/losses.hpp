#pragma once

// Training objectives on minibatches of chart outputs:
//   * loss_z        MMD^2 estimator between the pushforward p(z, j) and the uniform prior on Z
//   * loss_j        negative spread of q(x) around the uniform chart distribution
//   * loss_reg      lambda1 * loss_z + lambda2 * loss_j
//   * triplet_batch_all   batch-all triplet loss under the semi-metric d_M
//   * ntxent_manifold     NT-Xent on q-weighted projections

#include <cmath>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "chartnet/atlas.hpp"
#include "chartnet/error.hpp"
#include "chartnet/kernels.hpp"
#include "chartnet/tensor.hpp"

namespace chartnet {

/// Chart outputs of a minibatch as graph tensors.
template <typename T>
struct ChartBatch {
    Tensor<T> q;                   // B x n, rows on the simplex
    std::vector<Tensor<T>> logits; // n tensors of B x d

    std::size_t size() const { return q.rows(); }
    std::size_t n_charts() const { return logits.size(); }
    std::size_t dim() const { return logits.empty() ? 0 : logits.front().cols(); }

    void validate() const {
        if (logits.empty() || q.cols() != logits.size()) throw ShapeError("ChartBatch: q columns differ from chart count");
        for (const auto& l : logits) {
            if (l.rows() != q.rows() || l.cols() != dim()) throw ShapeError("ChartBatch: inconsistent chart logits");
        }
    }

    /// Builds a batch of graph leaves from plain outputs.
    static ChartBatch from_outputs(std::span<const EncoderOutput> outs, bool requires_grad = false) {
        if (outs.empty()) throw ShapeError("ChartBatch: empty batch");
        const std::size_t n = outs.front().n_charts();
        const std::size_t d = outs.front().dim();
        Matrix<T> q(outs.size(), n);
        std::vector<Matrix<T>> l(n, Matrix<T>(outs.size(), d));
        for (std::size_t b = 0; b < outs.size(); ++b) {
            if (outs[b].n_charts() != n || outs[b].dim() != d) throw ShapeError("ChartBatch: outputs differ in shape");
            for (std::size_t i = 0; i < n; ++i) {
                q(b, i) = static_cast<T>(outs[b].q[i]);
                for (std::size_t c = 0; c < d; ++c) l[i](b, c) = static_cast<T>(outs[b].chart_logits(i, c));
            }
        }
        auto make = [requires_grad](Matrix<T> m) {
            return requires_grad ? Tensor<T>::parameter(std::move(m)) : Tensor<T>::constant(std::move(m));
        };
        ChartBatch batch{make(std::move(q)), {}};
        for (auto& m : l) batch.logits.push_back(make(std::move(m)));
        return batch;
    }

    std::vector<EncoderOutput> to_outputs() const {
        std::vector<EncoderOutput> outs;
        outs.reserve(size());
        for (std::size_t b = 0; b < size(); ++b) {
            std::vector<double> qb(n_charts());
            Matrix<double> lb(n_charts(), dim());
            for (std::size_t i = 0; i < n_charts(); ++i) {
                qb[i] = static_cast<double>(q.at(b, i));
                for (std::size_t c = 0; c < dim(); ++c) lb(i, c) = static_cast<double>(logits[i].at(b, c));
            }
            outs.push_back(EncoderOutput::from_logits(std::move(qb), std::move(lb)));
        }
        return outs;
    }
};

struct RegWeights {
    double lambda1 = 0.0;
    double lambda2 = 0.0;

    void validate() const {
        if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw DomainError("RegWeights: lambdas must be non-negative");
    }
};

struct ContrastiveConfig {
    double temperature = 1.0;
    std::size_t projection_dim = 2;

    void validate() const {
        if (!(temperature > 0.0)) throw DomainError("ContrastiveConfig: temperature must be positive");
        if (projection_dim < 1) throw DomainError("ContrastiveConfig: projection_dim must be >= 1");
    }
};

struct TripletConfig {
    double margin = 0.2;
    BaseMetric base_metric = BaseMetric::euclidean;

    void validate() const {
        if (!(margin > 0.0)) throw DomainError("TripletConfig: margin must be positive");
    }
};

/// Stand-in for d(anchor, positive) when the pair shares no chart.
inline constexpr double kInfiniteDistanceCap = 50.0;

namespace detail {

template <typename T>
Tensor<T> off_diagonal_mask(std::size_t n) {
    Matrix<T> m(n, n, T(1));
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(0);
    return Tensor<T>::constant(std::move(m));
}

struct MmdConstants {
    double within, cross, prior;
};

// Normalisers of the three estimator terms for batch size N and n charts.
inline MmdConstants mmd_constants(std::size_t batch, std::size_t n) {
    const double nb = static_cast<double>(batch);
    const double nc = static_cast<double>(n);
    return {1.0 / (nb * (nb - 1.0)), 2.0 / (nc * nb * nb), 1.0 / (nc * nb * (nb - 1.0))};
}

// sum_{j != k} k0(w_j, w_k) on the prior draws.
inline double prior_pair_sum(const Matrix<double>& w, const KernelSpec& spec) {
    const double c = spec.scale();
    double acc = 0.0;
    for (std::size_t j = 0; j < w.rows; ++j)
        for (std::size_t k = 0; k < w.rows; ++k) {
            if (j == k) continue;
            double sq = 0.0;
            for (std::size_t t = 0; t < w.cols; ++t) {
                const double diff = w(j, t) - w(k, t);
                sq += diff * diff;
            }
            acc += c / (c + sq);
        }
    return acc;
}

inline void check_prior(const PriorSample& prior, std::size_t batch, std::size_t d, const KernelSpec& spec) {
    if (batch < 2) throw ShapeError("loss_z: batch size must be >= 2");
    if (prior.w_logits.rows != batch) {
        throw ShapeError("loss_z: prior has " + std::to_string(prior.w_logits.rows) + " draws for a batch of " +
                         std::to_string(batch));
    }
    if (prior.w_logits.cols != d || spec.latent_dim != d) throw ShapeError("loss_z: latent dimension mismatch");
}

} // namespace detail

/// MMD^2(p, U_Z) estimator. Gradients reach q and the chart logits; the prior is constant.
template <typename T>
Tensor<T> loss_z(const ChartBatch<T>& batch, const PriorSample& prior, const KernelSpec& spec) {
    batch.validate();
    const std::size_t N = batch.size();
    const std::size_t n = batch.n_charts();
    detail::check_prior(prior, N, batch.dim(), spec);
    const auto k = detail::mmd_constants(N, n);
    const auto w = Tensor<T>::constant(prior.w_logits.cast<T>());
    const auto offdiag = detail::off_diagonal_mask<T>(N);

    Tensor<T> within;
    Tensor<T> cross;
    for (std::size_t i = 0; i < n; ++i) {
        const auto qi = column(batch.q, i);
        const auto outer = matmul(qi, transpose(qi));
        const auto t1 = sum(outer * k0_matrix(batch.logits[i], batch.logits[i], spec) * offdiag);
        const auto t2 = sum(qi * k0_matrix(batch.logits[i], w, spec));
        within = within.defined() ? within + t1 : t1;
        cross = cross.defined() ? cross + t2 : t2;
    }
    const T prior_term = static_cast<T>(k.prior * detail::prior_pair_sum(prior.w_logits, spec));
    return within * static_cast<T>(k.within) - cross * static_cast<T>(k.cross) + prior_term;
}

/// Single-chart form of loss_z on raw chart logits (q identically 1).
template <typename T>
Tensor<T> loss_z_single_chart(const Tensor<T>& logits, const PriorSample& prior, const KernelSpec& spec) {
    const std::size_t N = logits.rows();
    detail::check_prior(prior, N, logits.cols(), spec);
    const auto k = detail::mmd_constants(N, 1);
    const auto w = Tensor<T>::constant(prior.w_logits.cast<T>());
    const auto within = sum(k0_matrix(logits, logits, spec) * detail::off_diagonal_mask<T>(N));
    const auto cross = sum(k0_matrix(logits, w, spec));
    const T prior_term = static_cast<T>(k.prior * detail::prior_pair_sum(prior.w_logits, spec));
    return within * static_cast<T>(k.within) - cross * static_cast<T>(k.cross) + prior_term;
}

/// -mean_x sum_i (q_i(x) - 1/n)^2, in [-(n-1)/n, 0].
template <typename T>
Tensor<T> loss_j(const Tensor<T>& q) {
    const std::size_t n = q.cols();
    if (q.rows() == 0 || n == 0) throw ShapeError("loss_j: empty batch");
    for (std::size_t b = 0; b < q.rows(); ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double v = static_cast<double>(q.at(b, i));
            if (v < -1e-6) throw DomainError("loss_j: negative membership probability");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-6) throw DomainError("loss_j: row " + std::to_string(b) + " is not on the simplex");
    }
    const auto centered = q - static_cast<T>(1.0 / static_cast<double>(n));
    return -(sum(square(centered)) / static_cast<T>(q.rows()));
}

template <typename T>
struct RegTerms {
    Tensor<T> total;
    Tensor<T> z;
    Tensor<T> j;
};

/// lambda1 * loss_z + lambda2 * loss_j. Both terms are always evaluated.
template <typename T>
RegTerms<T> loss_reg(const ChartBatch<T>& batch, const PriorSample& prior, const RegWeights& weights,
                     const KernelSpec& spec) {
    weights.validate();
    auto z = loss_z(batch, prior, spec);
    auto j = loss_j(batch.q);
    auto total = z * static_cast<T>(weights.lambda1) + j * static_cast<T>(weights.lambda2);
    return {std::move(total), std::move(z), std::move(j)};
}

/// Pairwise d_M over a batch. `infinite` flags pairs whose chart overlap is
/// below kOverlapThreshold; their entry in `dist` is meaningless.
template <typename T>
struct PairDistances {
    Tensor<T> dist;
    Mask infinite;
};

template <typename T>
PairDistances<T> manifold_distance_matrix(const ChartBatch<T>& batch, BaseMetric d0 = BaseMetric::euclidean) {
    batch.validate();
    Tensor<T> num;
    Tensor<T> den;
    for (std::size_t i = 0; i < batch.n_charts(); ++i) {
        const auto qi = column(batch.q, i);
        const auto w = matmul(qi, transpose(qi));
        const auto& l = batch.logits[i];
        const auto d = d0 == BaseMetric::euclidean ? pairwise_dist(l, l) : pairwise_sq_dist(l, l);
        const auto wd = w * d;
        num = num.defined() ? num + wd : wd;
        den = den.defined() ? den + w : w;
    }
    const std::size_t B = batch.size();
    Mask inf(B, B, 0);
    for (std::size_t k = 0; k < inf.size(); ++k) inf.data[k] = static_cast<double>(den.value().data[k]) < kOverlapThreshold;
    const auto safe_den = where(inf, Tensor<T>::constant(Matrix<T>(B, B, T(1))), den);
    return {num / safe_den, std::move(inf)};
}

/// Plain distance matrix on a single set of logits (the flat baseline).
template <typename T>
PairDistances<T> logit_distance_matrix(const Tensor<T>& logits, BaseMetric d0 = BaseMetric::euclidean) {
    auto d = d0 == BaseMetric::euclidean ? pairwise_dist(logits, logits) : pairwise_sq_dist(logits, logits);
    return {std::move(d), Mask(logits.rows(), logits.rows(), 0)};
}

template <typename T>
struct TripletResult {
    Tensor<T> loss;
    std::size_t triples = 0;  // valid (a, p, n) triples considered
    std::size_t positive = 0; // triples with strictly positive hinge
};

/// Batch-all triplet loss: mean of max(0, d(a,p) - d(a,n) + margin) over the
/// strictly positive triples, 0 when none is positive. An infinite d(a,p) is
/// capped at kInfiniteDistanceCap; an infinite d(a,n) drops the triple.
template <typename T>
TripletResult<T> triplet_batch_all(const PairDistances<T>& pd, std::span<const int> labels, const TripletConfig& cfg) {
    cfg.validate();
    const std::size_t B = labels.size();
    if (pd.dist.rows() != B || pd.dist.cols() != B) throw ShapeError("triplet_batch_all: distance matrix/label mismatch");
    bool has_positive_pair = false;
    bool has_negative_pair = false;
    for (std::size_t a = 0; a < B; ++a)
        for (std::size_t b = 0; b < B; ++b) {
            if (a == b) continue;
            (labels[a] == labels[b] ? has_positive_pair : has_negative_pair) = true;
        }
    if (!has_positive_pair || !has_negative_pair) throw DomainError("triplet_batch_all: no valid triple in batch");

    std::vector<std::pair<std::size_t, std::size_t>> ap_idx, an_idx;
    std::vector<unsigned char> capped;
    std::size_t total = 0;
    for (std::size_t a = 0; a < B; ++a)
        for (std::size_t p = 0; p < B; ++p) {
            if (p == a || labels[p] != labels[a]) continue;
            for (std::size_t n = 0; n < B; ++n) {
                if (labels[n] == labels[a]) continue;
                ++total;
                if (pd.infinite(a, n)) continue;
                ap_idx.emplace_back(a, p);
                an_idx.emplace_back(a, n);
                capped.push_back(pd.infinite(a, p));
            }
        }
    TripletResult<T> res;
    res.triples = total;
    if (ap_idx.empty()) {
        res.loss = Tensor<T>::scalar(T(0));
        return res;
    }
    const std::size_t m = ap_idx.size();
    auto ap = gather(pd.dist, std::move(ap_idx));
    auto an = gather(pd.dist, std::move(an_idx));
    Mask cap_mask(m, 1, std::vector<unsigned char>(capped));
    ap = where(cap_mask, Tensor<T>::constant(Matrix<T>(m, 1, static_cast<T>(kInfiniteDistanceCap))), ap);
    const auto hinge = maximum(ap - an + static_cast<T>(cfg.margin), T(0));
    for (T v : hinge.value().data) res.positive += v > T(0);
    res.loss = res.positive == 0 ? sum(hinge) * T(0) : sum(hinge) / static_cast<T>(res.positive);
    return res;
}

/// NT-Xent over 2N rows paired as (0,1), (2,3), ...: cosine similarities / tau,
/// self-similarity excluded, cross-entropy of each row's partner, mean over rows.
template <typename T>
Tensor<T> ntxent_manifold(const Tensor<T>& projections, const ContrastiveConfig& cfg) {
    cfg.validate();
    const std::size_t rows = projections.rows();
    if (rows < 4 || rows % 2 != 0) throw ShapeError("ntxent: need an even number (>= 4) of projection rows");
    const auto sq = sum(square(projections), Axis::cols);
    for (std::size_t r = 0; r < rows; ++r) {
        if (!(sq.at(r, 0) > T(0))) throw DomainError("ntxent: zero-norm projection row " + std::to_string(r));
    }
    const auto unit = projections / sqrt(sq);
    const auto sim = matmul(unit, transpose(unit)) / static_cast<T>(cfg.temperature);
    Mask not_self(rows, rows, 1);
    std::vector<std::pair<std::size_t, std::size_t>> partner;
    for (std::size_t r = 0; r < rows; ++r) {
        not_self(r, r) = 0;
        partner.emplace_back(r, r ^ 1U);
    }
    const auto lse = logsumexp(sim, Axis::cols, &not_self);
    return mean(lse - gather(sim, std::move(partner)));
}

/// sum_i q_i(x) h_i(phi_i(x)); heads act on chart coordinates (sigmoid of logits).
template <typename T, typename Head>
Tensor<T> weighted_projection(const ChartBatch<T>& batch, std::span<const Head> heads) {
    batch.validate();
    if (heads.size() != batch.n_charts()) {
        throw ShapeError("weighted_projection: " + std::to_string(heads.size()) + " heads for " +
                         std::to_string(batch.n_charts()) + " charts");
    }
    Tensor<T> acc;
    for (std::size_t i = 0; i < heads.size(); ++i) {
        const auto term = column(batch.q, i) * heads[i].forward(sigmoid(batch.logits[i]));
        acc = acc.defined() ? acc + term : term;
    }
    return acc;
}

} // namespace chartnet
