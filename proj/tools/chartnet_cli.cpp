// chartnet command-line entry point: train, eval, export-viz.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include <CLI11.hpp>

#include "chartnet/chartnet.hpp"

namespace fs = std::filesystem;
using namespace chartnet;

namespace {

std::ofstream open_out(const fs::path& p) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw Error("cannot write '" + p.string() + "'");
    return os;
}

void check_written(std::ofstream& os, const fs::path& p) {
    os.flush();
    if (!os) throw Error("write failed for '" + p.string() + "'");
}

template <typename T>
MultiChartEncoder<double> run_training(const RunConfig& cfg, const Dataset& data, std::vector<MetricsRecord>& log) {
    auto result = train<T>(cfg.train, data);
    log = std::move(result.log);
    if constexpr (std::is_same_v<T, double>) {
        return std::move(result.model);
    } else {
        return result.model.template cast<double>();
    }
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides) {
    const auto cfg = load_config(config_path, overrides);
    const auto data = make_dataset(cfg.data, false);
    std::vector<MetricsRecord> log;
    const auto model = cfg.precision == "float32" ? run_training<float>(cfg, data, log) : run_training<double>(cfg, data, log);

    const fs::path dir(cfg.output_dir);
    fs::create_directories(dir);
    {
        auto os = open_out(dir / "config.resolved");
        os << serialize_config(cfg);
        check_written(os, dir / "config.resolved");
    }
    {
        auto os = open_out(dir / "metrics.log");
        write_metrics(os, log);
        check_written(os, dir / "metrics.log");
    }
    {
        auto os = open_out(dir / "model.ckpt");
        save_checkpoint(os, model);
        check_written(os, dir / "model.ckpt");
    }
    std::printf("trained %zu steps on %zu points", log.size(), data.size());
    if (!log.empty()) std::printf("; final total loss %.6g", log.back().total);
    std::printf("\nwrote %s\n", dir.string().c_str());
    return 0;
}

MultiChartEncoder<double> load_for(const RunConfig& cfg, const Dataset& data, const std::string& checkpoint) {
    auto arch = cfg.train.arch;
    arch.input_dim = data.input_dim();
    const auto path = checkpoint.empty() ? (fs::path(cfg.output_dir) / "model.ckpt").string() : checkpoint;
    return load_checkpoint<double>(path, arch);
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint, const std::vector<std::string>& overrides) {
    const auto cfg = load_config(config_path, overrides);
    const auto train_data = make_dataset(cfg.data, false);
    const auto eval_data = make_dataset(cfg.data, true);
    const auto model = load_for(cfg, train_data, checkpoint);
    if (eval_data.input_dim() != train_data.input_dim()) throw ShapeError("eval: held-out data dimension differs");

    const auto eval_out = model.encode_outputs(eval_data.inputs);
    std::vector<AtlasCode> eval_codes;
    for (const auto& o : eval_out) eval_codes.push_back(compress(o));

    const fs::path dir(cfg.output_dir);
    fs::create_directories(dir);

    const auto retrieval = recall_at_k(eval_codes, eval_data.labels, cfg.recall_ks, cfg.train.base_metric);
    {
        auto os = open_out(dir / "retrieval.txt");
        write_report(os, retrieval);
        check_written(os, dir / "retrieval.txt");
    }
    std::optional<ProbeReport> probe;
    if (cfg.probe) {
        const auto train_codes = encode_dataset(model, train_data.inputs);
        ProbeConfig pc;
        pc.l2 = cfg.probe_l2;
        probe = piecewise_linear_probe(train_codes, train_data.labels, eval_codes, eval_data.labels, pc);
        auto os = open_out(dir / "probe.txt");
        write_report(os, *probe);
        check_written(os, dir / "probe.txt");
    }
    const auto diag = atlas_diagnostics(eval_out, cfg.diagnostics_seed);
    {
        auto os = open_out(dir / "diagnostics.txt");
        write_report(os, diag);
        check_written(os, dir / "diagnostics.txt");
    }
    {
        auto os = open_out(dir / "codes.csv");
        write_codes(os, eval_codes);
        check_written(os, dir / "codes.csv");
    }

    for (std::size_t i = 0; i < retrieval.ks.size(); ++i)
        std::printf("recall@%zu %.4f\n", retrieval.ks[i], retrieval.recall[i]);
    if (probe) std::printf("probe accuracy %.4f\n", probe->accuracy);
    std::printf("active charts %zu of %zu, mean max-q %.4f\n", diag.active_charts, diag.usage.size(), *diag.mean_max_q);
    std::printf("wrote %s\n", dir.string().c_str());
    return 0;
}

int cmd_export_viz(const std::string& config_path, const std::string& checkpoint, const std::string& out,
                   const std::vector<std::string>& overrides) {
    const auto cfg = load_config(config_path, overrides);
    const auto data = make_dataset(cfg.data, false);
    const auto model = load_for(cfg, data, checkpoint);
    if (model.arch().chart_dim != 2) {
        throw DomainError("export-viz requires d=2 charts (checkpoint has d=" + std::to_string(model.arch().chart_dim) + ")");
    }
    const auto codes = encode_dataset(model, data.inputs);
    const fs::path path = out.empty() ? fs::path(cfg.output_dir) / "viz.csv" : fs::path(out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    auto os = open_out(path);
    os << "chart,x,y,label\n";
    char buf[96];
    for (std::size_t i = 0; i < codes.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%d\n", codes[i].chart_index, codes[i].coords[0], codes[i].coords[1],
                      data.labels[i]);
        os << buf;
    }
    check_written(os, path);
    std::printf("wrote %zu points to %s\n", codes.size(), path.string().c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"chartnet: manifold-valued representation learning with chart atlases"};
    app.require_subcommand(1);

    std::string config_path, checkpoint, out;

    auto* train_cmd = app.add_subcommand("train", "train an encoder; writes model.ckpt, metrics.log, config.resolved");
    train_cmd->add_option("config", config_path, "config file")->required();
    train_cmd->allow_extras();

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint; writes retrieval, probe and diagnostics reports");
    eval_cmd->add_option("config", config_path, "config file")->required();
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint path (default: <output_dir>/model.ckpt)");
    eval_cmd->allow_extras();

    auto* viz_cmd = app.add_subcommand("export-viz", "write per-chart 2-d coordinates as CSV");
    viz_cmd->add_option("config", config_path, "config file")->required();
    viz_cmd->add_option("--checkpoint", checkpoint, "checkpoint path (default: <output_dir>/model.ckpt)");
    viz_cmd->add_option("--out", out, "CSV path (default: <output_dir>/viz.csv)");
    viz_cmd->allow_extras();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, std::cerr, std::cerr);
    }

    try {
        if (*train_cmd) return cmd_train(config_path, train_cmd->remaining());
        if (*eval_cmd) return cmd_eval(config_path, checkpoint, eval_cmd->remaining());
        if (*viz_cmd) return cmd_export_viz(config_path, checkpoint, out, viz_cmd->remaining());
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
