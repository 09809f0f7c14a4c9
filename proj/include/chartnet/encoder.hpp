#pragma once

// Multi-chart encoder: a perceptron backbone followed by n chart heads
// (logits; sigmoid gives coordinates), a softmax membership head and n
// projection heads used by contrastive objectives.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "chartnet/atlas.hpp"
#include "chartnet/error.hpp"
#include "chartnet/losses.hpp"
#include "chartnet/tensor.hpp"

namespace chartnet {

struct ArchConfig {
    std::size_t input_dim = 2;
    std::vector<std::size_t> backbone{64, 64};
    std::size_t n_charts = 1;
    std::size_t chart_dim = 1;
    std::size_t proj_dim = 0; // 0 selects 2 * chart_dim
    /// L2-normalise the (single) chart output; used by the unit-sphere triplet baseline.
    bool normalize_embedding = false;

    std::size_t projection_dim() const { return proj_dim == 0 ? 2 * chart_dim : proj_dim; }
    std::size_t projection_hidden() const { return 4 * projection_dim(); }
    std::size_t feature_dim() const { return backbone.empty() ? input_dim : backbone.back(); }

    void validate() const {
        if (input_dim < 1 || n_charts < 1 || chart_dim < 1) throw DomainError("arch: dimensions must be >= 1");
        for (auto w : backbone) {
            if (w < 1) throw DomainError("arch: backbone widths must be >= 1");
        }
        if (normalize_embedding && n_charts != 1) throw DomainError("arch: normalize_embedding requires n_charts = 1");
    }

    /// Closed-form number of scalar parameters.
    std::size_t parameter_count() const {
        std::size_t count = 0;
        std::size_t in = input_dim;
        for (auto w : backbone) {
            count += (in + 1) * w;
            in = w;
        }
        const std::size_t f = feature_dim();
        const std::size_t p = projection_dim();
        const std::size_t h = projection_hidden();
        count += n_charts * (f + 1) * chart_dim;
        count += (f + 1) * n_charts;
        count += n_charts * ((chart_dim + 1) * h + (h + 1) * p);
        return count;
    }

    /// Empty when compatible, otherwise a description of the first difference.
    std::string mismatch(const ArchConfig& other) const {
        auto field = [](const char* name, auto a, auto b) -> std::string {
            if (a == b) return {};
            std::ostringstream os;
            os << name << ": checkpoint has " << a << " but " << b << " was requested";
            return os.str();
        };
        for (auto s : {field("input_dim", input_dim, other.input_dim), field("n_charts", n_charts, other.n_charts),
                       field("chart_dim", chart_dim, other.chart_dim),
                       field("proj_dim", projection_dim(), other.projection_dim()),
                       field("normalize_embedding", normalize_embedding, other.normalize_embedding)}) {
            if (!s.empty()) return s;
        }
        if (backbone != other.backbone) return "backbone widths differ";
        return {};
    }

    bool operator==(const ArchConfig&) const = default;
};

template <typename T>
struct Linear {
    Tensor<T> weight; // in x out
    Tensor<T> bias;   // 1 x out

    Tensor<T> forward(const Tensor<T>& x) const { return matmul(x, weight) + bias; }
};

/// Two-layer perceptron h_i: chart coordinates -> projection space.
template <typename T>
struct ProjectionHead {
    Linear<T> hidden;
    Linear<T> out;

    Tensor<T> forward(const Tensor<T>& x) const { return out.forward(relu(hidden.forward(x))); }
};

template <typename T>
struct NamedParameter {
    std::string name;
    Tensor<T> tensor;
};

/// Flat, ordered view of every trainable tensor. Copies share storage.
template <typename T>
using ParameterSet = std::vector<NamedParameter<T>>;

template <typename T>
class MultiChartEncoder {
  public:
    MultiChartEncoder() = default;

    /// Glorot-uniform weights, zero biases.
    static MultiChartEncoder init(const ArchConfig& arch, std::uint64_t seed) {
        arch.validate();
        MultiChartEncoder m;
        m.arch_ = arch;
        std::mt19937_64 rng(seed);
        auto linear = [&rng](std::size_t in, std::size_t out) {
            const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
            std::uniform_real_distribution<double> dist(-bound, bound);
            Matrix<T> w(in, out);
            for (auto& v : w.data) v = static_cast<T>(dist(rng));
            return Linear<T>{Tensor<T>::parameter(std::move(w)), Tensor<T>::parameter(Matrix<T>(1, out))};
        };
        std::size_t in = arch.input_dim;
        for (auto w : arch.backbone) {
            m.backbone_.push_back(linear(in, w));
            in = w;
        }
        const std::size_t f = arch.feature_dim();
        for (std::size_t i = 0; i < arch.n_charts; ++i) m.charts_.push_back(linear(f, arch.chart_dim));
        m.membership_ = linear(f, arch.n_charts);
        for (std::size_t i = 0; i < arch.n_charts; ++i) {
            auto hidden = linear(arch.chart_dim, arch.projection_hidden());
            auto out = linear(arch.projection_hidden(), arch.projection_dim());
            m.projections_.push_back({std::move(hidden), std::move(out)});
        }
        return m;
    }

    const ArchConfig& arch() const { return arch_; }
    const std::vector<ProjectionHead<T>>& projection_heads() const { return projections_; }

    ParameterSet<T> parameters() const {
        ParameterSet<T> ps;
        auto add = [&ps](const std::string& prefix, const Linear<T>& l) {
            ps.push_back({prefix + ".weight", l.weight});
            ps.push_back({prefix + ".bias", l.bias});
        };
        for (std::size_t i = 0; i < backbone_.size(); ++i) add("backbone." + std::to_string(i), backbone_[i]);
        for (std::size_t i = 0; i < charts_.size(); ++i) add("chart." + std::to_string(i), charts_[i]);
        add("membership", membership_);
        for (std::size_t i = 0; i < projections_.size(); ++i) {
            add("projection." + std::to_string(i) + ".hidden", projections_[i].hidden);
            add("projection." + std::to_string(i) + ".out", projections_[i].out);
        }
        return ps;
    }

    void zero_grad() {
        for (auto& p : parameters()) p.tensor.zero_grad();
    }

    /// Backbone features, chart logits and memberships for a batch of rows.
    ChartBatch<T> forward(const Tensor<T>& x) const {
        if (x.cols() != arch_.input_dim) {
            throw ShapeError("encoder: input has " + std::to_string(x.cols()) + " columns, expected " +
                             std::to_string(arch_.input_dim));
        }
        Tensor<T> h = x;
        for (std::size_t i = 0; i < backbone_.size(); ++i) {
            h = guarded("backbone." + std::to_string(i), [&] { return relu(backbone_[i].forward(h)); });
        }
        ChartBatch<T> out;
        for (std::size_t i = 0; i < charts_.size(); ++i) {
            out.logits.push_back(guarded("chart." + std::to_string(i), [&] {
                auto l = charts_[i].forward(h);
                if (arch_.normalize_embedding) l = l / sqrt(sum(square(l), Axis::cols));
                return l;
            }));
        }
        out.q = guarded("membership", [&] { return softmax(membership_.forward(h), Axis::cols); });
        return out;
    }

    ChartBatch<T> forward(const Matrix<double>& x) const { return forward(Tensor<T>::constant(x.cast<T>())); }

    /// q-weighted projection sum_i q_i h_i(phi_i(x)).
    Tensor<T> project(const ChartBatch<T>& batch) const {
        return weighted_projection<T, ProjectionHead<T>>(batch, std::span<const ProjectionHead<T>>(projections_));
    }

    /// Flat projection h_1(sigmoid(logits)) without membership weighting.
    Tensor<T> project_single(const Tensor<T>& logits) const { return projections_.front().forward(sigmoid(logits)); }

    std::vector<EncoderOutput> encode_outputs(const Matrix<double>& x, std::size_t batch_size = 256) const {
        std::vector<EncoderOutput> outs;
        outs.reserve(x.rows);
        for (std::size_t start = 0; start < x.rows; start += batch_size) {
            const std::size_t stop = std::min(x.rows, start + batch_size);
            Matrix<double> chunk(stop - start, x.cols);
            std::copy(x.data.begin() + start * x.cols, x.data.begin() + stop * x.cols, chunk.data.begin());
            auto part = forward(chunk).to_outputs();
            outs.insert(outs.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
        }
        return outs;
    }

    template <typename U>
    MultiChartEncoder<U> cast() const {
        auto target = MultiChartEncoder<U>::init(arch_, 0);
        auto src = parameters();
        auto dst = target.parameters();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i].tensor.mutable_value() = src[i].tensor.value().template cast<U>();
        return target;
    }

  private:
    template <typename F>
    static Tensor<T> guarded(const std::string& layer, F&& f) {
        try {
            return f();
        } catch (const NonFiniteError& e) {
            throw NonFiniteError("layer " + layer + ": " + e.what());
        } catch (const DomainError& e) {
            throw DomainError("layer " + layer + ": " + e.what());
        }
    }

    ArchConfig arch_;
    std::vector<Linear<T>> backbone_;
    std::vector<Linear<T>> charts_;
    Linear<T> membership_;
    std::vector<ProjectionHead<T>> projections_;
};

/// Forward then compress, streamed over minibatches.
template <typename T>
std::vector<AtlasCode> encode_dataset(const MultiChartEncoder<T>& model, const Matrix<double>& inputs,
                                      std::size_t batch_size = 256) {
    std::vector<AtlasCode> codes;
    codes.reserve(inputs.rows);
    for (const auto& out : model.encode_outputs(inputs, batch_size)) codes.push_back(compress(out));
    return codes;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointMagic = "chartnet-checkpoint";
inline constexpr int kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(std::ostream& os, const MultiChartEncoder<T>& model) {
    const auto& a = model.arch();
    os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
    os << "input_dim " << a.input_dim << '\n';
    os << "backbone";
    for (auto w : a.backbone) os << ' ' << w;
    os << '\n';
    os << "n_charts " << a.n_charts << '\n';
    os << "chart_dim " << a.chart_dim << '\n';
    os << "proj_dim " << a.projection_dim() << '\n';
    os << "normalize_embedding " << (a.normalize_embedding ? 1 : 0) << '\n';
    const auto params = model.parameters();
    os << "parameters " << params.size() << '\n';
    char buf[40];
    for (const auto& p : params) {
        const auto& v = p.tensor.value();
        os << "param " << p.name << ' ' << v.rows << ' ' << v.cols << '\n';
        for (std::size_t i = 0; i < v.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(v.data[i]));
            os << (i == 0 ? "" : " ") << buf;
        }
        os << '\n';
    }
}

template <typename T>
void save_checkpoint(const std::string& path, const MultiChartEncoder<T>& model) {
    std::ofstream os(path);
    if (!os) throw FormatError("checkpoint: cannot open " + path + " for writing");
    save_checkpoint(os, model);
    if (!os) throw FormatError("checkpoint: write to " + path + " failed");
}

namespace detail {

inline std::string expect_line(std::istream& is, const std::string& key) {
    std::string line;
    if (!std::getline(is, line)) throw FormatError("checkpoint: truncated before '" + key + "'");
    if (line.rfind(key, 0) != 0) throw FormatError("checkpoint: expected '" + key + "', found '" + line + "'");
    return line.size() > key.size() ? line.substr(key.size() + 1) : std::string{};
}

inline std::size_t parse_size(const std::string& s, const std::string& what) {
    try {
        std::size_t pos = 0;
        const auto v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw FormatError("checkpoint: bad value '" + s + "' for " + what);
    }
}

} // namespace detail

inline ArchConfig read_checkpoint_arch(std::istream& is) {
    std::string magic;
    int version = 0;
    is >> magic >> version;
    if (magic != kCheckpointMagic) throw FormatError("checkpoint: bad magic '" + magic + "'");
    if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    is.ignore(1);
    ArchConfig a;
    a.input_dim = detail::parse_size(detail::expect_line(is, "input_dim"), "input_dim");
    a.backbone.clear();
    std::istringstream widths(detail::expect_line(is, "backbone"));
    for (std::string w; widths >> w;) a.backbone.push_back(detail::parse_size(w, "backbone"));
    a.n_charts = detail::parse_size(detail::expect_line(is, "n_charts"), "n_charts");
    a.chart_dim = detail::parse_size(detail::expect_line(is, "chart_dim"), "chart_dim");
    a.proj_dim = detail::parse_size(detail::expect_line(is, "proj_dim"), "proj_dim");
    a.normalize_embedding = detail::parse_size(detail::expect_line(is, "normalize_embedding"), "normalize_embedding") != 0;
    a.validate();
    return a;
}

template <typename T = double>
MultiChartEncoder<T> load_checkpoint(std::istream& is) {
    const auto arch = read_checkpoint_arch(is);
    auto model = MultiChartEncoder<T>::init(arch, 0);
    auto params = model.parameters();
    const auto count = detail::parse_size(detail::expect_line(is, "parameters"), "parameters");
    if (count != params.size()) throw FormatError("checkpoint: parameter count does not match architecture");
    for (auto& p : params) {
        std::istringstream head(detail::expect_line(is, "param"));
        std::string name;
        std::size_t rows = 0, cols = 0;
        head >> name >> rows >> cols;
        auto& dst = p.tensor.mutable_value();
        if (name != p.name || rows != dst.rows || cols != dst.cols) {
            throw FormatError("checkpoint: parameter '" + name + "' does not match expected '" + p.name + "'");
        }
        std::string line;
        if (!std::getline(is, line)) throw FormatError("checkpoint: missing values for " + name);
        std::istringstream vals(line);
        for (auto& v : dst.data) {
            std::string tok;
            if (!(vals >> tok)) throw FormatError("checkpoint: too few values for " + name);
            char* end = nullptr;
            const double x = std::strtod(tok.c_str(), &end);
            if (*end != '\0' || !std::isfinite(x)) throw FormatError("checkpoint: bad value '" + tok + "' in " + name);
            v = static_cast<T>(x);
        }
    }
    return model;
}

template <typename T = double>
MultiChartEncoder<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("checkpoint: cannot open " + path);
    return load_checkpoint<T>(is);
}

/// Loads and checks the stored architecture against the one a run expects.
template <typename T = double>
MultiChartEncoder<T> load_checkpoint(const std::string& path, const ArchConfig& expected) {
    auto model = load_checkpoint<T>(path);
    if (auto diff = model.arch().mismatch(expected); !diff.empty()) {
        throw FormatError("checkpoint architecture mismatch: " + diff);
    }
    return model;
}

} // namespace chartnet
