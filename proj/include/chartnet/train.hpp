#pragma once

// End-to-end training loops: manifold SimCLR (msimclr), manifold triplet
// (mtriplet) and a regularizer-only loop. Each run is a pure function of its
// config, dataset and seed.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "chartnet/atlas.hpp"
#include "chartnet/data.hpp"
#include "chartnet/encoder.hpp"
#include "chartnet/error.hpp"
#include "chartnet/kernels.hpp"
#include "chartnet/losses.hpp"
#include "chartnet/optim.hpp"

namespace chartnet {

struct TrainConfig {
    enum class Task { msimclr, mtriplet, regularizer };
    /// `vanilla` runs the flat single-chart algorithm (no membership weighting,
    /// no regularizer in the objective); it requires n_charts = 1.
    enum class Variant { manifold, vanilla };

    Task task = Task::msimclr;
    Variant variant = Variant::manifold;
    ArchConfig arch;
    RegWeights reg{20.0, 0.1};
    double temperature = 1.0;
    double margin = 0.2;
    BaseMetric base_metric = BaseMetric::euclidean;
    OptimizerConfig optimizer;
    std::size_t batch_size = 128; // msimclr: source images per step (2x views); regularizer: points per step
    std::size_t classes_per_batch = 8; // P
    std::size_t samples_per_class = 4; // K
    std::size_t steps = 1000;
    std::uint64_t seed = 0;
    AugmentPolicy augment;
    bool log_wall_ms = false;

    /// Contrastive defaults: batch 128, Adam(1e-4, 0.9, 0.999), lambda2 = 0.1.
    static TrainConfig msimclr_preset() {
        TrainConfig c;
        c.task = Task::msimclr;
        c.reg = {20.0, 0.1};
        c.temperature = 1.0;
        c.optimizer = {OptimizerConfig::Kind::adam, 1e-4, 0.9, 0.999, 0.99, 1e-8};
        c.batch_size = 128;
        return c;
    }

    /// Triplet defaults: RMSProp(1e-5), lambda1 = 1, lambda2 = 0.1, margin 0.2, P = 8, K = 4.
    static TrainConfig mtriplet_preset() {
        TrainConfig c;
        c.task = Task::mtriplet;
        c.reg = {1.0, 0.1};
        c.margin = 0.2;
        c.optimizer = {OptimizerConfig::Kind::rmsprop, 1e-5, 0.9, 0.999, 0.99, 1e-8};
        c.classes_per_batch = 8;
        c.samples_per_class = 4;
        return c;
    }

    std::size_t views_per_step() const {
        switch (task) {
        case Task::msimclr: return 2 * batch_size;
        case Task::mtriplet: return classes_per_batch * samples_per_class;
        case Task::regularizer: return batch_size;
        }
        return 0;
    }

    void validate() const {
        arch.validate();
        reg.validate();
        optimizer.validate();
        augment.validate();
        if (variant == Variant::vanilla && arch.n_charts != 1) throw DomainError("train: vanilla variant requires n_charts = 1");
        if (task == Task::msimclr) {
            ContrastiveConfig{temperature, arch.projection_dim()}.validate();
            if (batch_size < 2) throw DomainError("train: msimclr needs batch_size >= 2");
        }
        if (task == Task::mtriplet) {
            TripletConfig{margin, base_metric}.validate();
            if (classes_per_batch < 2 || samples_per_class < 2) throw DomainError("train: mtriplet needs P >= 2 and K >= 2");
        }
        if (task == Task::regularizer && batch_size < 2) throw DomainError("train: regularizer needs batch_size >= 2");
    }
};

struct MetricsRecord {
    std::size_t step = 0;
    double total = 0.0;
    double task = 0.0;
    double loss_z = 0.0;
    double loss_j = 0.0;
    double wall_ms = 0.0;

    bool operator==(const MetricsRecord&) const = default;
};

inline constexpr const char* kMetricsHeader = "step,total,task,loss_z,loss_j,wall_ms";

inline void write_metrics(std::ostream& os, const std::vector<MetricsRecord>& log) {
    os << kMetricsHeader << '\n';
    char buf[256];
    for (const auto& r : log) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.3f\n", r.step, r.total, r.task, r.loss_z, r.loss_j,
                      r.wall_ms);
        os << buf;
    }
}

template <typename T>
struct TrainResult {
    MultiChartEncoder<T> model;
    std::vector<MetricsRecord> log;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Independent random streams derived from the run seed.
struct RunStreams {
    std::uint64_t init;
    std::mt19937_64 data, augment, prior;

    explicit RunStreams(std::uint64_t seed)
        : init(splitmix64(seed)), data(splitmix64(seed + 1)), augment(splitmix64(seed + 2)), prior(splitmix64(seed + 3)) {}
};

inline std::vector<std::size_t> draw_without_replacement(std::size_t population, std::size_t count, std::mt19937_64& rng) {
    if (count > population) throw DomainError("train: batch larger than dataset");
    std::vector<std::size_t> idx(population);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, population - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(count);
    return idx;
}

inline bool is_identity(const AugmentPolicy& p) {
    return p.crop == AugmentPolicy::Crop::none && p.flip_prob == 0.0 && p.jitter_sigma == 0.0;
}

struct StepLosses {
    double task, z, j;
};

template <typename T>
bool parameters_finite(const MultiChartEncoder<T>& model) {
    for (const auto& p : model.parameters())
        for (T v : p.tensor.value().data)
            if (!std::isfinite(v)) return false;
    return true;
}

} // namespace detail

/// Runs the configured task. steps = 0 returns the initialised model.
template <typename T = double>
TrainResult<T> train(const TrainConfig& config, const Dataset& data) {
    data.validate();
    TrainConfig cfg = config;
    cfg.arch.input_dim = data.input_dim();
    cfg.validate();

    detail::RunStreams streams(cfg.seed);
    TrainResult<T> result{MultiChartEncoder<T>::init(cfg.arch, streams.init), {}};
    auto& model = result.model;
    Optimizer<T> opt(cfg.optimizer);
    const auto params = model.parameters();
    const std::size_t n = cfg.arch.n_charts;
    const std::size_t d = cfg.arch.chart_dim;
    const KernelSpec spec = atlas_spec(d, n);
    const bool vanilla = cfg.variant == TrainConfig::Variant::vanilla;

    std::optional<PkSampler> sampler;
    if (cfg.task == TrainConfig::Task::mtriplet) {
        sampler.emplace(data.labels, cfg.classes_per_batch, cfg.samples_per_class, streams.data());
    }

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        detail::StepLosses logged{};
        double total_value = 0.0;
        try {
            // Assemble the input views for this step.
            std::vector<std::size_t> rows;
            std::vector<int> labels;
            Matrix<double> x;
            if (cfg.task == TrainConfig::Task::msimclr) {
                rows = detail::draw_without_replacement(data.size(), cfg.batch_size, streams.data);
                x = Matrix<double>(2 * rows.size(), data.input_dim());
                for (std::size_t k = 0; k < rows.size(); ++k) {
                    auto [a, b] = augment_pair(data.inputs.row(rows[k]), cfg.augment, data.image, streams.augment);
                    std::copy(a.begin(), a.end(), x.row(2 * k).begin());
                    std::copy(b.begin(), b.end(), x.row(2 * k + 1).begin());
                }
            } else {
                rows = cfg.task == TrainConfig::Task::mtriplet
                           ? sampler->next()
                           : detail::draw_without_replacement(data.size(), cfg.batch_size, streams.data);
                x = Matrix<double>(rows.size(), data.input_dim());
                for (std::size_t k = 0; k < rows.size(); ++k) {
                    labels.push_back(data.labels[rows[k]]);
                    const auto src = data.inputs.row(rows[k]);
                    if (detail::is_identity(cfg.augment)) {
                        std::copy(src.begin(), src.end(), x.row(k).begin());
                    } else {
                        const auto v = augment(src, cfg.augment, data.image, streams.augment);
                        std::copy(v.begin(), v.end(), x.row(k).begin());
                    }
                }
            }

            const auto batch = model.forward(x);
            const auto prior = sample_prior(n, d, x.rows, streams.prior);

            Tensor<T> task_loss;
            switch (cfg.task) {
            case TrainConfig::Task::msimclr: {
                const auto proj = vanilla ? model.project_single(batch.logits.front()) : model.project(batch);
                task_loss = ntxent_manifold(proj, ContrastiveConfig{cfg.temperature, cfg.arch.projection_dim()});
                break;
            }
            case TrainConfig::Task::mtriplet: {
                const auto pd = vanilla ? logit_distance_matrix(batch.logits.front(), cfg.base_metric)
                                        : manifold_distance_matrix(batch, cfg.base_metric);
                task_loss = triplet_batch_all(pd, labels, TripletConfig{cfg.margin, cfg.base_metric}).loss;
                break;
            }
            case TrainConfig::Task::regularizer: task_loss = Tensor<T>::scalar(T(0)); break;
            }

            Tensor<T> total;
            if (vanilla) {
                // Flat objective; the regularizer terms are only evaluated for the log.
                logged.z = static_cast<double>(loss_z_single_chart(batch.logits.front().detach(), prior, spec).item());
                logged.j = static_cast<double>(loss_j(batch.q.detach()).item());
                total = task_loss;
            } else {
                const auto reg = loss_reg(batch, prior, cfg.reg, spec);
                logged.z = static_cast<double>(reg.z.item());
                logged.j = static_cast<double>(reg.j.item());
                total = task_loss + reg.total;
            }
            logged.task = static_cast<double>(task_loss.item());
            total_value = static_cast<double>(total.item());

            model.zero_grad();
            backward(total);
            opt.step(params);
        } catch (const NonFiniteError& e) {
            throw DivergenceError(step, e.what());
        }
        if (!detail::parameters_finite(model)) throw DivergenceError(step, "non-finite parameter after update");

        MetricsRecord rec{step, total_value, logged.task, logged.z, logged.j, 0.0};
        if (cfg.log_wall_ms) {
            rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        }
        result.log.push_back(rec);
    }
    return result;
}

template <typename T = double>
TrainResult<T> train_msimclr(TrainConfig cfg, const Dataset& data) {
    cfg.task = TrainConfig::Task::msimclr;
    return train<T>(cfg, data);
}

template <typename T = double>
TrainResult<T> train_mtriplet(TrainConfig cfg, const Dataset& data) {
    cfg.task = TrainConfig::Task::mtriplet;
    return train<T>(cfg, data);
}

template <typename T = double>
TrainResult<T> train_regularizer(TrainConfig cfg, const Dataset& data) {
    cfg.task = TrainConfig::Task::regularizer;
    return train<T>(cfg, data);
}

} // namespace chartnet
