#pragma once

// Datasets: synthetic manifolds (circle, torus, clustered blobs), IDX image
// files, contrastive augmentation and class-balanced P x K batch sampling.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "chartnet/error.hpp"
#include "chartnet/tensor.hpp"

namespace chartnet {

struct ImageShape {
    std::size_t height = 0;
    std::size_t width = 0;
};

struct Dataset {
    Matrix<double> inputs; // M x input_dim
    std::vector<int> labels;
    Matrix<double> meta; // M x k ground-truth parameters, k may be 0
    std::vector<std::string> meta_names;
    std::optional<ImageShape> image;

    std::size_t size() const { return inputs.rows; }
    std::size_t input_dim() const { return inputs.cols; }
    int num_classes() const { return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1; }

    void validate() const {
        if (labels.size() != inputs.rows) throw ShapeError("dataset: label count differs from row count");
        if (meta.cols > 0 && meta.rows != inputs.rows) throw ShapeError("dataset: meta row count differs");
        for (int l : labels) {
            if (l < 0) throw DomainError("dataset: negative label");
        }
    }

    /// Rows selected by index, in order.
    Dataset subset(std::span<const std::size_t> index) const {
        Dataset out;
        out.inputs = Matrix<double>(index.size(), inputs.cols);
        out.meta = Matrix<double>(meta.cols > 0 ? index.size() : 0, meta.cols);
        out.meta_names = meta_names;
        out.image = image;
        for (std::size_t i = 0; i < index.size(); ++i) {
            const auto src = inputs.row(index[i]);
            std::copy(src.begin(), src.end(), out.inputs.row(i).begin());
            if (meta.cols > 0) {
                const auto m = meta.row(index[i]);
                std::copy(m.begin(), m.end(), out.meta.row(i).begin());
            }
            out.labels.push_back(labels[index[i]]);
        }
        return out;
    }
};

/// Points (cos t, sin t) + N(0, noise^2) with t ~ U[0, 2pi); label = octant of t.
inline Dataset gen_circle(std::size_t count, double noise_sigma, std::uint64_t seed) {
    if (count < 8) throw DomainError("gen_circle: need at least 8 points");
    if (noise_sigma < 0.0) throw DomainError("gen_circle: negative noise");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    std::normal_distribution<double> noise(0.0, 1.0);
    Dataset ds{Matrix<double>(count, 2), {}, Matrix<double>(count, 1), {"theta"}, std::nullopt};
    for (std::size_t i = 0; i < count; ++i) {
        const double t = angle(rng);
        const double nx = noise(rng);
        const double ny = noise(rng);
        ds.inputs(i, 0) = std::cos(t) + noise_sigma * nx;
        ds.inputs(i, 1) = std::sin(t) + noise_sigma * ny;
        ds.meta(i, 0) = t;
        ds.labels.push_back(std::min(7, static_cast<int>(t / (std::numbers::pi / 4.0))));
    }
    return ds;
}

/// Embedded torus ((R + r cos p) cos t, (R + r cos p) sin t, r sin p); label = 4x4 cell of (t, p).
inline Dataset gen_torus(std::size_t count, double major, double minor, std::uint64_t seed) {
    if (!(minor > 0.0) || !(major > minor)) throw DomainError("gen_torus: require R > r > 0");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    Dataset ds{Matrix<double>(count, 3), {}, Matrix<double>(count, 2), {"theta", "phi"}, std::nullopt};
    const double cell = std::numbers::pi / 2.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double t = angle(rng);
        const double p = angle(rng);
        const double ring = major + minor * std::cos(p);
        ds.inputs(i, 0) = ring * std::cos(t);
        ds.inputs(i, 1) = ring * std::sin(t);
        ds.inputs(i, 2) = minor * std::sin(p);
        ds.meta(i, 0) = t;
        ds.meta(i, 1) = p;
        ds.labels.push_back(std::min(3, static_cast<int>(t / cell)) * 4 + std::min(3, static_cast<int>(p / cell)));
    }
    return ds;
}

/// Isotropic Gaussian blobs in the plane, centres evenly spaced on a circle of
/// the given radius; label = blob index. Sample i belongs to blob i % classes.
inline Dataset gen_clusters(std::size_t count, std::size_t classes, double radius, double spread, std::uint64_t seed) {
    if (classes < 2 || count < classes) throw DomainError("gen_clusters: need >= 2 classes and one point per class");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, spread);
    Dataset ds{Matrix<double>(count, 2), {}, Matrix<double>(0, 0), {}, std::nullopt};
    for (std::size_t i = 0; i < count; ++i) {
        const auto c = i % classes;
        const double t = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes);
        ds.inputs(i, 0) = radius * std::cos(t) + noise(rng);
        ds.inputs(i, 1) = radius * std::sin(t) + noise(rng);
        ds.labels.push_back(static_cast<int>(c));
    }
    return ds;
}

/// Headered CSV: label, meta columns, then coordinates.
inline void write_dataset_csv(std::ostream& os, const Dataset& ds) {
    os << "label";
    for (const auto& m : ds.meta_names) os << ',' << m;
    for (std::size_t c = 0; c < ds.input_dim(); ++c) os << ",x" << c;
    os << '\n';
    char buf[32];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        os << ds.labels[i];
        for (std::size_t c = 0; c < ds.meta.cols; ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", ds.meta(i, c));
            os << ',' << buf;
        }
        for (std::size_t c = 0; c < ds.input_dim(); ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", ds.inputs(i, c));
            os << ',' << buf;
        }
        os << '\n';
    }
}

// ---------------------------------------------------------------------------
// IDX files (big-endian): magic 0x00000803 for images, 0x00000801 for labels.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("idx: cannot open " + path);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
    if (off + 4 > b.size()) throw FormatError("idx: " + path + " truncated in header");
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

inline void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>((v >> s) & 0xFF));
}

inline void check_magic(std::uint32_t got, std::uint32_t want, const std::string& path) {
    if (got != want) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "bad magic 0x%08X, expected 0x%08X", got, want);
        throw FormatError("idx: " + path + ": " + buf);
    }
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("idx: cannot open " + path + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw FormatError("idx: write to " + path + " failed");
}

} // namespace detail

/// Raw IDX contents: unsigned-byte pixels and labels.
struct IdxData {
    std::size_t count = 0, rows = 0, cols = 0;
    std::vector<unsigned char> pixels;
    std::vector<unsigned char> labels;
};

inline IdxData read_idx_raw(const std::string& images_path, const std::string& labels_path) {
    const auto img = detail::read_file(images_path);
    const auto lab = detail::read_file(labels_path);
    detail::check_magic(detail::read_be32(img, 0, images_path), kIdxImageMagic, images_path);
    detail::check_magic(detail::read_be32(lab, 0, labels_path), kIdxLabelMagic, labels_path);
    IdxData d;
    d.count = detail::read_be32(img, 4, images_path);
    d.rows = detail::read_be32(img, 8, images_path);
    d.cols = detail::read_be32(img, 12, images_path);
    const std::size_t nlab = detail::read_be32(lab, 4, labels_path);
    if (nlab != d.count) {
        throw FormatError("idx: " + std::to_string(d.count) + " images but " + std::to_string(nlab) + " labels");
    }
    const std::size_t pix = d.count * d.rows * d.cols;
    if (img.size() < 16 + pix) throw FormatError("idx: " + images_path + " truncated payload");
    if (lab.size() < 8 + nlab) throw FormatError("idx: " + labels_path + " truncated payload");
    d.pixels.assign(img.begin() + 16, img.begin() + 16 + static_cast<std::ptrdiff_t>(pix));
    d.labels.assign(lab.begin() + 8, lab.begin() + 8 + static_cast<std::ptrdiff_t>(nlab));
    return d;
}

inline void write_idx(const std::string& images_path, const std::string& labels_path, const IdxData& d) {
    if (d.pixels.size() != d.count * d.rows * d.cols || d.labels.size() != d.count) {
        throw ShapeError("idx: payload sizes do not match header");
    }
    std::vector<unsigned char> img, lab;
    detail::put_be32(img, kIdxImageMagic);
    detail::put_be32(img, static_cast<std::uint32_t>(d.count));
    detail::put_be32(img, static_cast<std::uint32_t>(d.rows));
    detail::put_be32(img, static_cast<std::uint32_t>(d.cols));
    img.insert(img.end(), d.pixels.begin(), d.pixels.end());
    detail::put_be32(lab, kIdxLabelMagic);
    detail::put_be32(lab, static_cast<std::uint32_t>(d.count));
    lab.insert(lab.end(), d.labels.begin(), d.labels.end());
    detail::write_file(images_path, img);
    detail::write_file(labels_path, lab);
}

/// Loads an IDX image/label pair; pixels are scaled to [0, 1]. `limit` keeps the first rows.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t limit = 0) {
    const auto raw = read_idx_raw(images_path, labels_path);
    const std::size_t m = limit == 0 ? raw.count : std::min(limit, raw.count);
    const std::size_t dim = raw.rows * raw.cols;
    Dataset ds{Matrix<double>(m, dim), {}, Matrix<double>(0, 0), {}, ImageShape{raw.rows, raw.cols}};
    for (std::size_t i = 0; i < m * dim; ++i) ds.inputs.data[i] = raw.pixels[i] / 255.0;
    for (std::size_t i = 0; i < m; ++i) ds.labels.push_back(raw.labels[i]);
    return ds;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentPolicy {
    enum class Crop { none, random_resized };

    Crop crop = Crop::none;
    double crop_min_scale = 0.5; // minimum area fraction kept by the crop
    double flip_prob = 0.0;
    double jitter_sigma = 0.0;

    void validate() const {
        if (!(crop_min_scale > 0.0 && crop_min_scale <= 1.0)) throw DomainError("augment: crop_min_scale must be in (0,1]");
        if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw DomainError("augment: flip_prob must be in [0,1]");
        if (!(jitter_sigma >= 0.0)) throw DomainError("augment: jitter_sigma must be >= 0");
    }
};

inline std::vector<double> hflip(std::span<const double> x, const ImageShape& shape) {
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < shape.height; ++r)
        for (std::size_t c = 0; c < shape.width; ++c) out[r * shape.width + c] = x[r * shape.width + shape.width - 1 - c];
    return out;
}

namespace detail {

// Square crop of side `side` at (top, left), resized back bilinearly.
inline std::vector<double> crop_resize(std::span<const double> x, const ImageShape& s, double top, double left,
                                       double side_h, double side_w) {
    std::vector<double> out(x.size());
    auto px = [&](long r, long c) {
        r = std::clamp<long>(r, 0, static_cast<long>(s.height) - 1);
        c = std::clamp<long>(c, 0, static_cast<long>(s.width) - 1);
        return x[static_cast<std::size_t>(r) * s.width + static_cast<std::size_t>(c)];
    };
    for (std::size_t r = 0; r < s.height; ++r)
        for (std::size_t c = 0; c < s.width; ++c) {
            const double sr = top + (static_cast<double>(r) + 0.5) * side_h / static_cast<double>(s.height) - 0.5;
            const double sc = left + (static_cast<double>(c) + 0.5) * side_w / static_cast<double>(s.width) - 0.5;
            const long r0 = static_cast<long>(std::floor(sr));
            const long c0 = static_cast<long>(std::floor(sc));
            const double fr = sr - static_cast<double>(r0);
            const double fc = sc - static_cast<double>(c0);
            out[r * s.width + c] = (1 - fr) * ((1 - fc) * px(r0, c0) + fc * px(r0, c0 + 1)) +
                                   fr * ((1 - fc) * px(r0 + 1, c0) + fc * px(r0 + 1, c0 + 1));
        }
    return out;
}

} // namespace detail

/// One stochastic view. Crop and flip apply only when an image shape is given.
template <typename Rng>
std::vector<double> augment(std::span<const double> x, const AugmentPolicy& policy, const std::optional<ImageShape>& image,
                            Rng& rng) {
    std::vector<double> out(x.begin(), x.end());
    if (image) {
        if (image->height * image->width != x.size()) throw ShapeError("augment: image shape does not match input");
        if (policy.crop == AugmentPolicy::Crop::random_resized) {
            std::uniform_real_distribution<double> scale(policy.crop_min_scale, 1.0);
            const double frac = std::sqrt(scale(rng));
            const double h = frac * static_cast<double>(image->height);
            const double w = frac * static_cast<double>(image->width);
            std::uniform_real_distribution<double> top(0.0, static_cast<double>(image->height) - h);
            std::uniform_real_distribution<double> left(0.0, static_cast<double>(image->width) - w);
            const double t = top(rng);
            const double l = left(rng);
            out = detail::crop_resize(out, *image, t, l, h, w);
        }
        if (policy.flip_prob > 0.0) {
            std::bernoulli_distribution flip(policy.flip_prob);
            if (flip(rng)) out = hflip(out, *image);
        }
    }
    if (policy.jitter_sigma > 0.0) {
        std::normal_distribution<double> noise(0.0, policy.jitter_sigma);
        for (auto& v : out) v += noise(rng);
    }
    return out;
}

/// Two independent views of x.
template <typename Rng>
std::pair<std::vector<double>, std::vector<double>> augment_pair(std::span<const double> x, const AugmentPolicy& policy,
                                                                 const std::optional<ImageShape>& image, Rng& rng) {
    policy.validate();
    auto first = augment(x, policy, image, rng);
    auto second = augment(x, policy, image, rng);
    return {std::move(first), std::move(second)};
}

// ---------------------------------------------------------------------------
// P x K sampling
// ---------------------------------------------------------------------------

/// Yields batches of P distinct classes with K distinct samples each. Classes
/// are drawn without replacement from a per-epoch shuffled order; per-class
/// pools are reshuffled when exhausted. Fully determined by the seed.
class PkSampler {
  public:
    PkSampler(std::span<const int> labels, std::size_t p, std::size_t k, std::uint64_t seed) : p_(p), k_(k), rng_(seed) {
        if (p < 1 || k < 1) throw DomainError("pk_batches: P and K must be >= 1");
        std::map<int, std::vector<std::size_t>> by_class;
        for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
        for (auto& [label, idx] : by_class) {
            if (idx.size() >= k) pools_.push_back({std::move(idx), 0});
        }
        if (pools_.size() < p) {
            throw DomainError("pk_batches: need " + std::to_string(p) + " classes with >= " + std::to_string(k) +
                              " samples, found " + std::to_string(pools_.size()));
        }
        for (auto& pool : pools_) std::shuffle(pool.members.begin(), pool.members.end(), rng_);
    }

    std::vector<std::size_t> next() {
        std::vector<std::size_t> batch;
        batch.reserve(p_ * k_);
        for (std::size_t c = 0; c < p_; ++c) {
            if (cursor_ == order_.size()) start_epoch();
            auto& pool = pools_[order_[cursor_++]];
            if (pool.pos + k_ > pool.members.size()) {
                std::shuffle(pool.members.begin(), pool.members.end(), rng_);
                pool.pos = 0;
            }
            for (std::size_t j = 0; j < k_; ++j) batch.push_back(pool.members[pool.pos++]);
        }
        return batch;
    }

    std::size_t batch_size() const { return p_ * k_; }

  private:
    struct Pool {
        std::vector<std::size_t> members;
        std::size_t pos;
    };

    // Chunks of P classes must be distinct; a new epoch starts when fewer than P remain.
    void start_epoch() {
        order_.resize(pools_.size());
        for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
        std::shuffle(order_.begin(), order_.end(), rng_);
        order_.resize(order_.size() - order_.size() % p_);
        cursor_ = 0;
    }

    std::size_t p_, k_;
    std::mt19937_64 rng_;
    std::vector<Pool> pools_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

} // namespace chartnet
