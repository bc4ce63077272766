#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "xxz/lattice.hpp"
#include "xxz/model.hpp"

namespace xxz {

enum class ExperimentKind {
    dynamics_dtwa,
    dynamics_ed,
    oat_ref,
    thermal_match,
    sweep,
    fit_scaling,
    entropy_rate,
    coupling_sweep,
};

std::string_view kind_name(ExperimentKind kind);
std::optional<ExperimentKind> parse_kind(std::string_view name);

/// Engine used by the sweep and fit-scaling kinds.
enum class Engine { dtwa, ed };

struct TimeGrid {
    double tau_max = 0.0;
    int n_points = 0;
    /// true: tau_max is in scaled time tau = t * rate; false: tau_max is bare time t.
    bool scaled = true;
};

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::dynamics_dtwa;
    LatticeSpec lattice;
    ModelParams model;
    TimeGrid time;
    std::uint64_t master_seed = 0;
    std::size_t n_traj = 10000;
    std::string output = "run.csv";

    Engine engine = Engine::dtwa;
    std::vector<double> deltas;
    std::vector<double> alphas;
    std::vector<int> sizes;
    double entropy_window = 0.3;
};

/// Field-level validation failure; field() is the dotted key, e.g. "time.n_points".
class ConfigError : public std::invalid_argument {
public:
    ConfigError(std::string field, const std::string& message);
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

/// Resource cap violated before any engine runs; the message names the cap.
class ResourceGuardError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Parses and validates a JSON config object. Unknown keys are rejected. Kind-specific
/// defaults are filled in (sweep grid, coupling-sweep sizes and exponents).
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical echo of a config; parse_config(config_to_json(c)) reproduces c.
nlohmann::json config_to_json(const ExperimentConfig& c);

/// Checks the engine caps for the configured kind: ED dynamics N <= 20, thermal
/// N <= 16. Throws ResourceGuardError.
void check_resource_guards(const ExperimentConfig& c);

/// Grid in bare time t for the given lattice rate.
std::vector<double> time_grid(const TimeGrid& grid, double rate);

struct RunOptions {
    int threads = 1;
};

struct RunArtifacts {
    std::string csv;
    nlohmann::json manifest;
};

/// Runs one experiment in memory. Output does not depend on options.threads.
RunArtifacts run_experiment(const ExperimentConfig& c, const RunOptions& options = {});

/// Writes csv_path and the manifest beside it (same stem, .json) through temporary files
/// renamed into place. Returns the manifest path.
std::filesystem::path write_artifacts(const RunArtifacts& artifacts,
                                      const std::filesystem::path& csv_path);

std::filesystem::path manifest_path_for(const std::filesystem::path& csv_path);

inline const char* kDynamicsHeader =
    "engine,Lx,Ly,alpha,Delta,t,tau,xi2,xi2_db,S2_norm,Sperp2_norm,Sx,Sy,Sz,entropy,n_traj,seed,"
    "xi2_stderr,S2_norm_stderr";

struct CompareOptions {
    double max_db = std::numeric_limits<double>::infinity();
    double max_s2 = std::numeric_limits<double>::infinity();
    /// Restrict the thresholds to rows up to the xi2 minimum of the first file.
    bool up_to_minimum = false;
};

struct CompareRow {
    double t = 0.0;
    double tau = 0.0;
    double d_xi2_db = 0.0;
    double d_s2_norm = 0.0;
};

struct CompareReport {
    std::vector<CompareRow> rows;
    std::size_t checked_rows = 0;
    double max_d_xi2_db = 0.0;
    double mean_d_xi2_db = 0.0;
    double max_d_s2_norm = 0.0;
    double mean_d_s2_norm = 0.0;
    bool pass = true;
};

class GridMismatch : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Per-time absolute deltas between two dynamics CSVs. Throws GridMismatch when the
/// lattices or time grids differ, std::invalid_argument for malformed input.
CompareReport compare_runs(std::string_view csv_a, std::string_view csv_b,
                           const CompareOptions& options = {});

}  // namespace xxz
