#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "xxz/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { ok = 0, threshold = 1, invalid = 2, failure = 3 };

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path resolve_output(const std::string& configured, const std::string& out_dir) {
    fs::path p(configured);
    if (!out_dir.empty() && p.is_relative()) p = fs::path(out_dir) / p;
    return p;
}

int run_and_write(const xxz::ExperimentConfig& config, const fs::path& csv_path, int threads) {
    auto artifacts = xxz::run_experiment(config, {threads});
    auto manifest = xxz::write_artifacts(artifacts, csv_path);
    fmt::print("wrote {} and {}\n", csv_path.string(), manifest.string());
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Power-law XXZ spin dynamics: DTWA, exact dynamics, thermal matching"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    std::uint64_t seed = 0;
    int threads = 1;
    std::vector<std::pair<std::string, CLI::App*>> kinds;
    for (const char* name : {"dynamics-dtwa", "dynamics-ed", "oat-ref", "thermal-match", "sweep",
                             "fit-scaling", "entropy-rate", "coupling-sweep"}) {
        auto* sub = app.add_subcommand(name, fmt::format("run a {} experiment", name));
        sub->add_option("--config", config_path, "JSON config file")->required();
        sub->add_option("--out", out_dir, "directory for relative output paths");
        sub->add_option("--seed", seed, "override sampler.master_seed");
        sub->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
        kinds.emplace_back(name, sub);
    }

    std::string csv_a, csv_b;
    xxz::CompareOptions cmp;
    auto* compare = app.add_subcommand("compare", "per-time deltas between two dynamics CSVs");
    compare->add_option("run_a", csv_a)->required()->check(CLI::ExistingFile);
    compare->add_option("run_b", csv_b)->required()->check(CLI::ExistingFile);
    compare->add_option("--max-db", cmp.max_db, "fail above this |d xi2_db|");
    compare->add_option("--max-s2", cmp.max_s2, "fail above this |d S2_norm|");
    compare->add_flag("--up-to-minimum", cmp.up_to_minimum,
                      "check only rows up to the xi2 minimum of run_a");

    std::string manifest_path;
    auto* replay = app.add_subcommand("replay", "re-run the config recorded in a manifest");
    replay->add_option("manifest", manifest_path)->required()->check(CLI::ExistingFile);
    replay->add_option("--out", out_dir, "output directory (default: beside the manifest)");
    replay->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);

    CLI11_PARSE(app, argc, argv);

    try {
        if (compare->parsed()) {
            auto report = xxz::compare_runs(slurp(csv_a), slurp(csv_b), cmp);
            fmt::print("t,tau,d_xi2_db,d_S2_norm\n");
            for (const auto& r : report.rows) {
                fmt::print("{},{},{},{}\n", r.t, r.tau, r.d_xi2_db, r.d_s2_norm);
            }
            fmt::print(
                "# rows_checked={} max_d_xi2_db={} mean_d_xi2_db={} max_d_S2_norm={} "
                "mean_d_S2_norm={} {}\n",
                report.checked_rows, report.max_d_xi2_db, report.mean_d_xi2_db,
                report.max_d_s2_norm, report.mean_d_s2_norm, report.pass ? "PASS" : "FAIL");
            return report.pass ? ok : threshold;
        }
        if (replay->parsed()) {
            json manifest = json::parse(slurp(manifest_path));
            auto config = xxz::parse_config(manifest.at("config"));
            xxz::check_resource_guards(config);
            fs::path dir = out_dir.empty() ? fs::path(manifest_path).parent_path() : fs::path(out_dir);
            fs::path csv = dir / manifest.at("csv").get<std::string>();
            return run_and_write(config, csv, threads);
        }
        for (const auto& [name, sub] : kinds) {
            if (!sub->parsed()) continue;
            json j = json::parse(slurp(config_path));
            if (!j.is_object()) throw xxz::ConfigError("<root>", "config must be a JSON object");
            if (!j.contains("kind")) {
                j["kind"] = name;
            } else if (j["kind"] != name) {
                throw xxz::ConfigError("kind", fmt::format("config says {} but subcommand is {}",
                                                           j["kind"].dump(), name));
            }
            if (sub->count("--seed")) j["sampler"]["master_seed"] = seed;
            auto config = xxz::parse_config(j);
            xxz::check_resource_guards(config);
            return run_and_write(config, resolve_output(config.output, out_dir), threads);
        }
    } catch (const xxz::ConfigError& e) {
        fmt::print(stderr, "config error: {}\n", e.what());
        return invalid;
    } catch (const json::exception& e) {
        fmt::print(stderr, "config error: {}\n", e.what());
        return invalid;
    } catch (const xxz::ResourceGuardError& e) {
        fmt::print(stderr, "resource guard: {}\n", e.what());
        return invalid;
    } catch (const xxz::GridMismatch& e) {
        fmt::print(stderr, "grid mismatch: {}\n", e.what());
        return invalid;
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return failure;
    }
    return ok;
}
