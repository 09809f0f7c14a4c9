#pragma once

// Geometry of the encoding space: encoder outputs, compressed atlas codes,
// the overlap-weighted semi-metric and uniform prior sampling on Z.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "chartnet/error.hpp"
#include "chartnet/tensor.hpp"

namespace chartnet {

inline constexpr double kOverlapThreshold = 1e-12;
inline constexpr double kPriorClamp = 1e-6;

inline double logit_scalar(double p) { return std::log(p) - std::log1p(-p); }

/// Per-example encoder output: membership simplex q and all n charts.
struct EncoderOutput {
    std::vector<double> q;       // n
    Matrix<double> chart_logits; // n x d
    Matrix<double> chart_coords; // n x d, sigmoid of chart_logits

    std::size_t n_charts() const { return q.size(); }
    std::size_t dim() const { return chart_logits.cols; }

    static EncoderOutput from_logits(std::vector<double> q, Matrix<double> logits) {
        if (q.size() != logits.rows) throw ShapeError("EncoderOutput: q size differs from chart count");
        EncoderOutput out{std::move(q), std::move(logits), {}};
        out.chart_coords = Matrix<double>(out.chart_logits.rows, out.chart_logits.cols);
        for (std::size_t i = 0; i < out.chart_logits.size(); ++i)
            out.chart_coords.data[i] = sigmoid_scalar(out.chart_logits.data[i]);
        return out;
    }
};

/// Inference-time representation: the most probable chart and its coordinates.
struct AtlasCode {
    std::size_t chart_index = 1; // 1-based
    std::vector<double> coords;
    std::vector<double> coord_logits;

    bool operator==(const AtlasCode&) const = default;
};

/// Distance that may be infinite. Infinity orders above every finite value.
class Distance {
  public:
    constexpr Distance() = default;
    constexpr explicit Distance(double v) : value_(v) {}
    static constexpr Distance infinity() {
        Distance d;
        d.infinite_ = true;
        return d;
    }

    constexpr bool is_infinite() const { return infinite_; }
    /// Finite value; +inf for the sentinel.
    double value() const { return infinite_ ? std::numeric_limits<double>::infinity() : value_; }

    constexpr std::partial_ordering operator<=>(const Distance& o) const {
        if (infinite_ || o.infinite_) return infinite_ == o.infinite_ ? std::partial_ordering::equivalent
                                             : infinite_            ? std::partial_ordering::greater
                                                                    : std::partial_ordering::less;
        return value_ <=> o.value_;
    }
    constexpr bool operator==(const Distance& o) const {
        return infinite_ == o.infinite_ && (infinite_ || value_ == o.value_);
    }

  private:
    double value_ = 0.0;
    bool infinite_ = false;
};

/// Base metric d0 on chart coordinates, evaluated on logits.
enum class BaseMetric { euclidean, squared_euclidean };

inline double base_distance(std::span<const double> u, std::span<const double> v, BaseMetric metric) {
    if (u.size() != v.size()) throw ShapeError("base_distance: dimension mismatch");
    double sq = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double diff = u[i] - v[i];
        sq += diff * diff;
    }
    return metric == BaseMetric::euclidean ? std::sqrt(sq) : sq;
}

/// argmax of q with lowest-index ties, 1-based.
inline AtlasCode compress(const EncoderOutput& out) {
    if (out.q.empty()) throw ShapeError("compress: empty membership vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < out.q.size(); ++i)
        if (out.q[i] > out.q[best]) best = i;
    const auto logits = out.chart_logits.row(best);
    const auto coords = out.chart_coords.row(best);
    return {best + 1, {coords.begin(), coords.end()}, {logits.begin(), logits.end()}};
}

/// d_M(a,b) = sum_i qa_i qb_i d0(phi_i(a), phi_i(b)) / sum_i qa_i qb_i,
/// infinite when the overlap is below kOverlapThreshold.
inline Distance semi_metric(const EncoderOutput& a, const EncoderOutput& b, BaseMetric d0 = BaseMetric::euclidean) {
    if (a.n_charts() != b.n_charts() || a.dim() != b.dim()) throw ShapeError("semi_metric: outputs differ in shape");
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < a.n_charts(); ++i) {
        const double w = a.q[i] * b.q[i];
        den += w;
        num += w * base_distance(a.chart_logits.row(i), b.chart_logits.row(i), d0);
    }
    if (den < kOverlapThreshold) return Distance::infinity();
    return Distance(num / den);
}

/// semi_metric specialised to one-hot memberships.
inline Distance semi_metric_compressed(const AtlasCode& a, const AtlasCode& b, BaseMetric d0 = BaseMetric::euclidean) {
    if (a.coord_logits.size() != b.coord_logits.size()) throw ShapeError("semi_metric_compressed: dimension mismatch");
    if (a.chart_index != b.chart_index) return Distance::infinity();
    return Distance(base_distance(a.coord_logits, b.coord_logits, d0));
}

/// Logits of uniform draws on [0,1]^d. Chart indices are marginalised
/// analytically by the MMD estimator and are not sampled.
struct PriorSample {
    Matrix<double> w_logits; // N x d
};

template <typename Rng>
PriorSample sample_prior(std::size_t n, std::size_t d, std::size_t count, Rng& rng) {
    if (n < 1 || d < 1) throw DomainError("sample_prior: n and d must be >= 1");
    if (count < 2) throw DomainError("sample_prior: need at least 2 draws");
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    PriorSample s{Matrix<double>(count, d)};
    for (auto& v : s.w_logits.data) v = logit_scalar(std::clamp(unif(rng), kPriorClamp, 1.0 - kPriorClamp));
    return s;
}

// ---------------------------------------------------------------------------
// Code serialization: "chart_index,c1,...,cd" per line, 9 significant digits.
// ---------------------------------------------------------------------------

inline std::string format_sig9(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline void write_codes(std::ostream& os, const std::vector<AtlasCode>& codes) {
    for (const auto& c : codes) {
        os << c.chart_index;
        for (double v : c.coords) os << ',' << format_sig9(v);
        os << '\n';
    }
}

/// Reads codes back; coord_logits are recomputed from the stored coordinates.
inline std::vector<AtlasCode> read_codes(std::istream& is) {
    std::vector<AtlasCode> codes;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        AtlasCode c;
        bool first = true;
        while (std::getline(ss, field, ',')) {
            try {
                if (first) {
                    c.chart_index = std::stoul(field);
                    first = false;
                } else {
                    c.coords.push_back(std::stod(field));
                }
            } catch (const std::exception&) {
                throw FormatError("codes: bad field '" + field + "' on line " + std::to_string(line_no));
            }
        }
        if (c.chart_index < 1 || c.coords.empty()) throw FormatError("codes: malformed line " + std::to_string(line_no));
        for (double v : c.coords) c.coord_logits.push_back(logit_scalar(std::clamp(v, kPriorClamp, 1.0 - kPriorClamp)));
        codes.push_back(std::move(c));
    }
    return codes;
}

} // namespace chartnet
