#pragma once

// Evaluation of atlas encoders: retrieval under the compressed semi-metric,
// per-chart linear probes, atlas usage diagnostics and the exact MMD^2 oracle.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "chartnet/atlas.hpp"
#include "chartnet/error.hpp"
#include "chartnet/kernels.hpp"

namespace chartnet {

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

struct RetrievalReport {
    std::vector<std::size_t> ks;
    std::vector<double> recall; // recall[i] is recall at ks[i]
    std::size_t queries = 0;
    double infinite_fraction = 0.0; // ordered pairs landing in different charts

    bool operator==(const RetrievalReport&) const = default;
};

/// For every query, ranks all other items by semi_metric_compressed (finite
/// before infinite, ties by index); recall@k is the fraction of queries with a
/// same-label item among the first k.
inline RetrievalReport recall_at_k(std::span<const AtlasCode> codes, std::span<const int> labels,
                                   std::span<const std::size_t> ks, BaseMetric d0 = BaseMetric::euclidean) {
    if (codes.size() != labels.size()) throw ShapeError("recall_at_k: codes and labels differ in length");
    if (ks.empty()) throw DomainError("recall_at_k: no k requested");
    const std::size_t m = codes.size();
    for (auto k : ks) {
        if (k < 1 || k + 1 > m) throw DomainError("recall_at_k: k = " + std::to_string(k) + " needs more items");
    }
    RetrievalReport rep;
    rep.ks.assign(ks.begin(), ks.end());
    rep.recall.assign(ks.size(), 0.0);
    rep.queries = m;
    std::size_t infinite = 0;
    std::vector<std::pair<Distance, std::size_t>> ranked;
    std::vector<std::size_t> hits(ks.size(), 0);
    for (std::size_t qi = 0; qi < m; ++qi) {
        ranked.clear();
        for (std::size_t j = 0; j < m; ++j) {
            if (j == qi) continue;
            const auto d = semi_metric_compressed(codes[qi], codes[j], d0);
            infinite += d.is_infinite();
            ranked.emplace_back(d, j);
        }
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.first < b.first) return true;
            if (b.first < a.first) return false;
            return a.second < b.second;
        });
        std::size_t first_hit = ranked.size();
        for (std::size_t r = 0; r < ranked.size(); ++r) {
            if (labels[ranked[r].second] == labels[qi]) {
                first_hit = r;
                break;
            }
        }
        for (std::size_t i = 0; i < ks.size(); ++i) hits[i] += first_hit < ks[i];
    }
    for (std::size_t i = 0; i < ks.size(); ++i) rep.recall[i] = static_cast<double>(hits[i]) / static_cast<double>(m);
    rep.infinite_fraction = m < 2 ? 0.0 : static_cast<double>(infinite) / static_cast<double>(m * (m - 1));
    return rep;
}

// ---------------------------------------------------------------------------
// Piecewise linear probe
// ---------------------------------------------------------------------------

struct ProbeConfig {
    double lr = 0.5;
    std::size_t iterations = 2000;         // minimum number of steps
    std::size_t max_iterations = 1000000;  // hard cap
    double tolerance = 1e-6;               // loss change over the last 100 steps
    double l2 = 1e-4;
};

struct ChartProbe {
    std::size_t chart = 1;
    std::size_t train_count = 0;
    std::size_t test_count = 0;
    std::size_t test_correct = 0;
    Matrix<double> weights; // d x classes
    std::vector<double> bias;
    std::optional<int> constant_class; // set when the chart saw a single training class
    std::size_t iterations = 0; // gradient steps taken
    double final_loss = 0.0;
    double loss_100_before = 0.0;
};

struct ProbeReport {
    std::vector<ChartProbe> charts; // ascending chart index
    std::size_t classes = 0;
    std::size_t test_size = 0;
    double accuracy = 0.0;
};

namespace detail {

inline void softmax_row(std::span<double> z) {
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (auto& v : z) {
        v = std::exp(v - mx);
        s += v;
    }
    for (auto& v : z) v /= s;
}

// Multinomial logistic regression by full-batch gradient descent.
inline void fit_softmax_regression(ChartProbe& probe, const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                                   std::size_t classes, const ProbeConfig& cfg) {
    const std::size_t m = x.size();
    const std::size_t d = x.front().size();
    // Work on centred features; the shift only moves the bias, so the
    // objective is unchanged while the bias/weight coupling disappears.
    std::vector<double> mu(d, 0.0);
    for (const auto& row : x)
        for (std::size_t t = 0; t < d; ++t) mu[t] += row[t] / static_cast<double>(m);
    std::vector<std::vector<double>> xc = x;
    for (auto& row : xc)
        for (std::size_t t = 0; t < d; ++t) row[t] -= mu[t];
    probe.weights = Matrix<double>(d, classes);
    probe.bias.assign(classes, 0.0);
    std::vector<double> z(classes);
    Matrix<double> gw(d, classes);
    std::vector<double> gb(classes);
    auto loss_and_grad = [&]() {
        std::fill(gw.data.begin(), gw.data.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        double loss = 0.0;
        for (std::size_t s = 0; s < m; ++s) {
            for (std::size_t c = 0; c < classes; ++c) {
                z[c] = probe.bias[c];
                for (std::size_t t = 0; t < d; ++t) z[c] += xc[s][t] * probe.weights(t, c);
            }
            softmax_row(z);
            loss -= std::log(std::max(z[static_cast<std::size_t>(y[s])], 1e-300));
            for (std::size_t c = 0; c < classes; ++c) {
                const double r = z[c] - (static_cast<std::size_t>(y[s]) == c ? 1.0 : 0.0);
                gb[c] += r;
                for (std::size_t t = 0; t < d; ++t) gw(t, c) += r * xc[s][t];
            }
        }
        double sq = 0.0;
        for (double w : probe.weights.data) sq += w * w;
        for (auto& g : gw.data) g /= static_cast<double>(m);
        for (auto& g : gb) g /= static_cast<double>(m);
        for (std::size_t k = 0; k < gw.size(); ++k) gw.data[k] += cfg.l2 * probe.weights.data[k];
        return loss / static_cast<double>(m) + 0.5 * cfg.l2 * sq;
    };
    // Runs at least cfg.iterations steps, then continues until the loss moved
    // by at most cfg.tolerance over the last 100 steps (or max_iterations).
    std::vector<double> history;
    for (std::size_t it = 0;; ++it) {
        const double loss = loss_and_grad();
        history.push_back(loss);
        const bool settled = it >= 100 && std::abs(history[it - 100] - loss) <= cfg.tolerance;
        if ((it >= cfg.iterations && settled) || it >= std::max(cfg.iterations, cfg.max_iterations)) break;
        for (std::size_t k = 0; k < gw.size(); ++k) probe.weights.data[k] -= cfg.lr * gw.data[k];
        for (std::size_t c = 0; c < classes; ++c) probe.bias[c] -= cfg.lr * gb[c];
    }
    probe.iterations = history.size() - 1;
    probe.final_loss = history.back();
    probe.loss_100_before = history[history.size() > 100 ? history.size() - 101 : 0];
    // back to raw coordinates
    for (std::size_t c = 0; c < classes; ++c)
        for (std::size_t t = 0; t < d; ++t) probe.bias[c] -= mu[t] * probe.weights(t, c);
}

inline int predict(const ChartProbe& probe, std::span<const double> x) {
    if (probe.constant_class) return *probe.constant_class;
    const std::size_t classes = probe.bias.size();
    std::size_t best = 0;
    double best_score = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
        double s = probe.bias[c];
        for (std::size_t t = 0; t < x.size(); ++t) s += x[t] * probe.weights(t, c);
        if (c == 0 || s > best_score) {
            best = c;
            best_score = s;
        }
    }
    return static_cast<int>(best);
}

} // namespace detail

/// One multinomial logistic regression per chart on that chart's coordinates;
/// each test point is classified by its own chart's model. Test points whose
/// chart has no training data count as errors.
inline ProbeReport piecewise_linear_probe(std::span<const AtlasCode> train_codes, std::span<const int> train_labels,
                                          std::span<const AtlasCode> test_codes, std::span<const int> test_labels,
                                          const ProbeConfig& cfg = {}) {
    if (train_codes.size() != train_labels.size() || test_codes.size() != test_labels.size()) {
        throw ShapeError("probe: codes and labels differ in length");
    }
    if (train_codes.empty() || test_codes.empty()) throw DomainError("probe: empty train or test set");
    int max_label = 0;
    for (int l : train_labels) max_label = std::max(max_label, l);
    for (int l : test_labels) max_label = std::max(max_label, l);
    ProbeReport rep;
    rep.classes = static_cast<std::size_t>(max_label) + 1;
    rep.test_size = test_codes.size();

    std::map<std::size_t, std::vector<std::size_t>> train_by_chart, test_by_chart;
    for (std::size_t i = 0; i < train_codes.size(); ++i) train_by_chart[train_codes[i].chart_index].push_back(i);
    for (std::size_t i = 0; i < test_codes.size(); ++i) test_by_chart[test_codes[i].chart_index].push_back(i);
    std::set<std::size_t> charts;
    for (const auto& [c, _] : train_by_chart) charts.insert(c);
    for (const auto& [c, _] : test_by_chart) charts.insert(c);

    std::size_t correct = 0;
    for (auto chart : charts) {
        ChartProbe probe;
        probe.chart = chart;
        const auto& tr = train_by_chart[chart];
        const auto& te = test_by_chart[chart];
        probe.train_count = tr.size();
        probe.test_count = te.size();
        if (!tr.empty()) {
            std::vector<std::vector<double>> x;
            std::vector<int> y;
            std::set<int> distinct;
            for (auto i : tr) {
                x.push_back(train_codes[i].coords);
                y.push_back(train_labels[i]);
                distinct.insert(train_labels[i]);
            }
            if (distinct.size() == 1) {
                probe.constant_class = *distinct.begin();
            } else {
                detail::fit_softmax_regression(probe, x, y, rep.classes, cfg);
            }
            for (auto i : te) probe.test_correct += detail::predict(probe, test_codes[i].coords) == test_labels[i];
        }
        correct += probe.test_correct;
        rep.charts.push_back(std::move(probe));
    }
    rep.accuracy = static_cast<double>(correct) / static_cast<double>(test_codes.size());
    return rep;
}

// ---------------------------------------------------------------------------
// Atlas diagnostics
// ---------------------------------------------------------------------------

struct AtlasDiagnostics {
    std::vector<std::size_t> usage;            // points per chart (argmax q)
    std::optional<double> mean_max_q;          // determinism score, absent for bare codes
    std::vector<std::optional<double>> mmd2;   // per chart, absent with < 2 points
    std::size_t active_charts = 0;
};

/// A chart is active when it holds at least a tenth of its uniform share of
/// points (and at least 2).
inline std::size_t active_threshold(std::size_t points, std::size_t charts) {
    const auto share = static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(points) / static_cast<double>(charts)));
    return std::max<std::size_t>(2, share);
}

/// Unbiased MMD^2 between a set of chart logits and an equal number of fresh
/// uniform-prior logits, under the inverse multiquadratics kernel.
inline double mmd2_to_uniform(const std::vector<std::vector<double>>& logits, std::mt19937_64& rng) {
    const std::size_t d = logits.front().size();
    const auto prior = sample_prior(1, d, logits.size(), rng);
    std::vector<std::vector<double>> w;
    for (std::size_t r = 0; r < prior.w_logits.rows; ++r) {
        const auto row = prior.w_logits.row(r);
        w.emplace_back(row.begin(), row.end());
    }
    const auto spec = imq_spec(d);
    const double c = spec.scale();
    auto k = [c](const std::vector<double>& u, const std::vector<double>& v) {
        double sq = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) sq += (u[i] - v[i]) * (u[i] - v[i]);
        return c / (c + sq);
    };
    return mmd2_unbiased<std::vector<double>>(logits, w, k);
}

inline AtlasDiagnostics atlas_diagnostics(std::span<const AtlasCode> codes, std::size_t n_charts, std::uint64_t seed) {
    if (codes.empty()) throw DomainError("diagnostics: empty input");
    AtlasDiagnostics diag;
    diag.usage.assign(n_charts, 0);
    std::vector<std::vector<std::vector<double>>> per_chart(n_charts);
    for (const auto& c : codes) {
        if (c.chart_index < 1 || c.chart_index > n_charts) throw DomainError("diagnostics: chart index out of range");
        ++diag.usage[c.chart_index - 1];
        per_chart[c.chart_index - 1].push_back(c.coord_logits);
    }
    std::mt19937_64 rng(seed);
    const auto threshold = active_threshold(codes.size(), n_charts);
    for (std::size_t i = 0; i < n_charts; ++i) {
        diag.mmd2.push_back(per_chart[i].size() < 2 ? std::nullopt : std::optional(mmd2_to_uniform(per_chart[i], rng)));
        diag.active_charts += diag.usage[i] >= threshold;
    }
    return diag;
}

inline AtlasDiagnostics atlas_diagnostics(std::span<const EncoderOutput> outputs, std::uint64_t seed) {
    if (outputs.empty()) throw DomainError("diagnostics: empty input");
    std::vector<AtlasCode> codes;
    double max_q = 0.0;
    for (const auto& o : outputs) {
        codes.push_back(compress(o));
        max_q += *std::max_element(o.q.begin(), o.q.end());
    }
    auto diag = atlas_diagnostics(codes, outputs.front().n_charts(), seed);
    diag.mean_max_q = max_q / static_cast<double>(outputs.size());
    return diag;
}

// ---------------------------------------------------------------------------
// Exact MMD^2(p, U_Z) oracle for a frozen set of outputs
// ---------------------------------------------------------------------------

struct OracleResult {
    double value = 0.0;
    double std_error = 0.0;
    double term_data = 0.0;  // E_{p x p} k_Z, exact
    double term_cross = 0.0; // E_{p x U} k_Z, Monte Carlo
    double term_prior = 0.0; // E_{U x U} k_Z, Monte Carlo
};

/// p is the pushforward of the empirical distribution over `outputs`: atoms
/// (phi_i(x), i) with weight q_i(x) / M. The data term is summed exactly; the
/// terms involving the uniform prior use `mc_samples` draws each. `k0` takes
/// two logit vectors.
template <typename Kernel>
OracleResult exact_mmd_oracle(std::span<const EncoderOutput> outputs, std::size_t mc_samples, std::uint64_t seed,
                              Kernel&& k0) {
    if (outputs.empty()) throw DomainError("oracle: need at least one output");
    if (mc_samples < 2) throw DomainError("oracle: need at least 2 Monte Carlo samples");
    const std::size_t m = outputs.size();
    const std::size_t n = outputs.front().n_charts();
    const std::size_t d = outputs.front().dim();
    const double inv_n = 1.0 / static_cast<double>(n);
    OracleResult r;

    double t1 = 0.0;
    for (std::size_t a = 0; a < m; ++a)
        for (std::size_t b = 0; b < m; ++b)
            for (std::size_t i = 0; i < n; ++i)
                t1 += outputs[a].q[i] * outputs[b].q[i] *
                      k0(outputs[a].chart_logits.row(i), outputs[b].chart_logits.row(i));
    r.term_data = t1 / (static_cast<double>(m) * static_cast<double>(m));

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> w(d), w2(d);
    auto draw = [&](std::vector<double>& v) {
        for (auto& x : v) x = logit_scalar(std::clamp(unif(rng), kPriorClamp, 1.0 - kPriorClamp));
    };
    double s2 = 0.0, ss2 = 0.0, s3 = 0.0, ss3 = 0.0;
    for (std::size_t s = 0; s < mc_samples; ++s) {
        draw(w);
        double f = 0.0;
        for (std::size_t a = 0; a < m; ++a)
            for (std::size_t i = 0; i < n; ++i) f += outputs[a].q[i] * k0(outputs[a].chart_logits.row(i), std::span<const double>(w));
        f *= inv_n / static_cast<double>(m);
        s2 += f;
        ss2 += f * f;
        draw(w);
        draw(w2);
        const double g = inv_n * k0(std::span<const double>(w), std::span<const double>(w2));
        s3 += g;
        ss3 += g * g;
    }
    const double S = static_cast<double>(mc_samples);
    r.term_cross = s2 / S;
    r.term_prior = s3 / S;
    const double var2 = std::max(0.0, (ss2 - S * r.term_cross * r.term_cross) / (S - 1.0));
    const double var3 = std::max(0.0, (ss3 - S * r.term_prior * r.term_prior) / (S - 1.0));
    r.value = r.term_data - 2.0 * r.term_cross + r.term_prior;
    r.std_error = std::sqrt(4.0 * var2 / S + var3 / S);
    return r;
}

inline OracleResult exact_mmd_oracle(std::span<const EncoderOutput> outputs, const KernelSpec& spec,
                                     std::size_t mc_samples, std::uint64_t seed) {
    const double c = spec.scale();
    return exact_mmd_oracle(outputs, mc_samples, seed, [c](std::span<const double> u, std::span<const double> v) {
        double sq = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) sq += (u[i] - v[i]) * (u[i] - v[i]);
        return c / (c + sq);
    });
}

// ---------------------------------------------------------------------------
// Report text: "key: value" lines, charts as indexed sub-blocks.
// ---------------------------------------------------------------------------

namespace detail {
inline std::string fmt_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}
} // namespace detail

inline void write_report(std::ostream& os, const RetrievalReport& r) {
    os << "report: retrieval\n";
    os << "queries: " << r.queries << '\n';
    for (std::size_t i = 0; i < r.ks.size(); ++i) os << "recall@" << r.ks[i] << ": " << detail::fmt_real(r.recall[i]) << '\n';
    os << "infinite_fraction: " << detail::fmt_real(r.infinite_fraction) << '\n';
}

inline void write_report(std::ostream& os, const ProbeReport& r) {
    os << "report: probe\n";
    os << "accuracy: " << detail::fmt_real(r.accuracy) << '\n';
    os << "classes: " << r.classes << '\n';
    os << "test_size: " << r.test_size << '\n';
    for (const auto& c : r.charts) {
        os << "chart[" << c.chart << "]:\n";
        os << "  train_count: " << c.train_count << '\n';
        os << "  test_count: " << c.test_count << '\n';
        os << "  test_correct: " << c.test_correct << '\n';
        if (c.constant_class) {
            os << "  constant_class: " << *c.constant_class << '\n';
        } else if (!c.bias.empty()) {
            os << "  iterations: " << c.iterations << '\n';
            os << "  final_loss: " << detail::fmt_real(c.final_loss) << '\n';
            os << "  bias:";
            for (double b : c.bias) os << ' ' << detail::fmt_real(b);
            os << '\n';
            for (std::size_t t = 0; t < c.weights.rows; ++t) {
                os << "  weights[" << t << "]:";
                for (double w : c.weights.row(t)) os << ' ' << detail::fmt_real(w);
                os << '\n';
            }
        }
    }
}

inline void write_report(std::ostream& os, const AtlasDiagnostics& r) {
    os << "report: diagnostics\n";
    os << "active_charts: " << r.active_charts << '\n';
    if (r.mean_max_q) os << "mean_max_q: " << detail::fmt_real(*r.mean_max_q) << '\n';
    for (std::size_t i = 0; i < r.usage.size(); ++i) {
        os << "chart[" << i + 1 << "]:\n";
        os << "  usage: " << r.usage[i] << '\n';
        os << "  mmd2_to_uniform: " << (r.mmd2[i] ? detail::fmt_real(*r.mmd2[i]) : std::string("absent")) << '\n';
    }
}

} // namespace chartnet
