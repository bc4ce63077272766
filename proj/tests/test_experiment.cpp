#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "xxz/experiment.hpp"
#include "xxz/lattice.hpp"

using namespace xxz;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json dynamics(const std::string& kind, int lx, int ly, double delta, double alpha = 3.0) {
    return {{"kind", kind},
            {"lattice", {{"Lx", lx}, {"Ly", ly}}},
            {"model", {{"Jperp", 1.0}, {"Delta", delta}, {"alpha", alpha}}},
            {"time", {{"tau_max", 1.0}, {"n_points", 11}}},
            {"sampler", {{"n_traj", 200}, {"master_seed", 17}}}};
}

// Same bare-time grid for any Delta, so runs at different Delta are comparable.
json bare_time(json j) {
    j["time"]["scaled"] = false;
    return j;
}

std::string field_of(const json& j) {
    try {
        parse_config(j);
    } catch (const ConfigError& e) {
        return e.field();
    }
    return "";
}

std::vector<std::vector<std::string>> rows_of(const std::string& csv) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(csv);
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

int column(const std::vector<std::string>& header, const std::string& name) {
    for (std::size_t k = 0; k < header.size(); ++k)
        if (header[k] == name) return static_cast<int>(k);
    FAIL("missing column " << name);
    return -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("xxz_test_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

int run_cli(const std::string& args) {
    const char* exe = std::getenv("XXZSIM");
    REQUIRE(exe != nullptr);
    int status = std::system((std::string(exe) + " " + args + " > /dev/null 2>&1").c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2); }

}  // namespace

TEST_CASE("config parses with defaults") {
    auto c = parse_config(dynamics("dynamics-dtwa", 4, 3, -1.8));
    CHECK(c.kind == ExperimentKind::dynamics_dtwa);
    CHECK(c.lattice.lx == 4);
    CHECK(c.lattice.ly == 3);
    CHECK(c.model.delta == -1.8);
    CHECK(c.time.scaled);
    CHECK(c.n_traj == 200);
    CHECK(c.master_seed == 17);
    CHECK(c.output == "dynamics-dtwa.csv");

    json j = dynamics("dynamics-dtwa", 2, 2, 0.0);
    j.erase("sampler");
    CHECK(parse_config(j).n_traj == 10000);
}

TEST_CASE("config errors name the field") {
    json j = dynamics("dynamics-dtwa", 3, 3, -1.0);
    CHECK(field_of(json::array()) == "<root>");
    {
        auto k = j;
        k.erase("kind");
        CHECK(field_of(k) == "kind");
    }
    {
        auto k = j;
        k["kind"] = "dynamics-mc";
        CHECK(field_of(k) == "kind");
    }
    {
        auto k = j;
        k["extra"] = json::object();
        CHECK(field_of(k) == "extra");
    }
    {
        auto k = j;
        k["model"]["J"] = 1.0;
        CHECK(field_of(k) == "model.J");
    }
    {
        auto k = j;
        k["time"]["n_points"] = 1;
        CHECK(field_of(k) == "time.n_points");
    }
    {
        auto k = j;
        k["time"]["tau_max"] = -1.0;
        CHECK(field_of(k) == "time.tau_max");
    }
    {
        auto k = j;
        k["lattice"]["Lx"] = 0;
        CHECK(field_of(k) == "lattice.Lx");
    }
    {
        auto k = j;
        k["model"]["Jperp"] = -2.0;
        CHECK(field_of(k) == "model.Jperp");
    }
    {
        auto k = j;
        k["model"].erase("Delta");
        CHECK(field_of(k) == "model.Delta");
    }
    {
        auto k = j;
        k["model"]["alpha"] = "three";
        CHECK(field_of(k) == "model.alpha");
    }
    {
        auto k = j;
        k["sampler"]["master_seed"] = -5;
        CHECK(field_of(k) == "sampler.master_seed");
    }
    {
        auto k = j;
        k["engine"] = "ed";
        CHECK(field_of(k) == "engine");
    }
    {
        auto k = j;
        k["kind"] = "oat-ref";
        k["model"]["Delta"] = 0.0;
        CHECK(field_of(k) == "model.Delta");
    }
    {
        json k = {{"kind", "fit-scaling"},
                  {"model", {{"Delta", -1.0}, {"alpha", 3.0}}},
                  {"time", {{"tau_max", 1.0}, {"n_points", 11}}},
                  {"grid", {{"sizes", {4}}}}};
        CHECK(field_of(k) == "grid.sizes");
    }
}

TEST_CASE("config round-trips through its canonical echo") {
    std::vector<json> cases = {
        dynamics("dynamics-dtwa", 4, 4, -1.8),
        dynamics("dynamics-ed", 3, 3, 0.0, 1.5),
        {{"kind", "sweep"},
         {"engine", "ed"},
         {"lattice", {{"Lx", 2}, {"Ly", 2}}},
         {"time", {{"tau_max", 2.0}, {"n_points", 21}, {"scaled", false}}}},
        {{"kind", "coupling-sweep"}},
        {{"kind", "entropy-rate"},
         {"lattice", {{"Lx", 2}, {"Ly", 3}}},
         {"model", {{"Delta", -1.0}, {"alpha", 3.0}}},
         {"time", {{"tau_max", 1.0}, {"n_points", 11}}},
         {"entropy", {{"window", 0.5}}}},
    };
    for (const auto& j : cases) {
        auto c = parse_config(j);
        auto echo = config_to_json(c);
        CHECK(config_to_json(parse_config(echo)) == echo);
    }
}

TEST_CASE("default sweep and coupling-sweep grids") {
    auto s = parse_config({{"kind", "sweep"},
                           {"lattice", {{"Lx", 4}, {"Ly", 4}}},
                           {"time", {{"tau_max", 2.0}, {"n_points", 21}}}});
    REQUIRE(s.deltas.size() == 31);
    CHECK(s.deltas.front() == -4.0);
    CHECK(s.deltas.back() == 2.0);
    CHECK(s.deltas[10] == -2.0);
    CHECK(s.alphas == std::vector<double>{1, 2, 3, 4, 6});

    auto c = parse_config({{"kind", "coupling-sweep"}});
    CHECK(c.sizes.front() == 2);
    CHECK(c.alphas == std::vector<double>{1, 2, 3, 4, 6});
}

TEST_CASE("resource guards fire before any engine") {
    CHECK_NOTHROW(check_resource_guards(parse_config(dynamics("dynamics-dtwa", 5, 5, -1.0))));
    CHECK_NOTHROW(check_resource_guards(parse_config(dynamics("dynamics-ed", 5, 4, -1.0))));
    try {
        check_resource_guards(parse_config(dynamics("dynamics-ed", 5, 5, -1.0)));
        FAIL("no guard");
    } catch (const ResourceGuardError& e) {
        CHECK(std::string(e.what()).find("N <= 20") != std::string::npos);
    }
    auto t = dynamics("thermal-match", 5, 4, 1.0);
    t.erase("time");
    t.erase("sampler");
    try {
        check_resource_guards(parse_config(t));
        FAIL("no guard");
    } catch (const ResourceGuardError& e) {
        CHECK(std::string(e.what()).find("N <= 16") != std::string::npos);
    }
}

TEST_CASE("time grid") {
    auto g = time_grid({2.0, 5, true}, 4.0);
    CHECK(g == std::vector<double>{0.0, 0.125, 0.25, 0.375, 0.5});
    CHECK(time_grid({2.0, 3, false}, 4.0) == std::vector<double>{0.0, 1.0, 2.0});
    CHECK_THROWS_AS(time_grid({2.0, 1, true}, 1.0), std::invalid_argument);
}

TEST_CASE("Delta = 0 ED run stays at xi2 = 1") {
    auto art = run_experiment(parse_config(dynamics("dynamics-ed", 3, 3, 0.0)));
    auto rows = rows_of(art.csv);
    REQUIRE(rows.size() == 12);
    CHECK(art.csv.substr(0, art.csv.find('\n')) == kDynamicsHeader);
    const int xi = column(rows[0], "xi2"), s2 = column(rows[0], "S2_norm");
    for (std::size_t r = 1; r < rows.size(); ++r) {
        CHECK(std::abs(std::stod(rows[r][xi]) - 1.0) <= 1e-10);
        CHECK(std::abs(std::stod(rows[r][s2]) - 1.0) <= 1e-10);
        CHECK(rows[r][0] == "ed");
    }
    CHECK(art.manifest.at("config") == config_to_json(parse_config(dynamics("dynamics-ed", 3, 3, 0.0))));
}

TEST_CASE("DTWA CSV is byte-identical across runs and thread counts") {
    auto c = parse_config(dynamics("dynamics-dtwa", 3, 3, -1.8));
    const auto ref = run_experiment(c, {1}).csv;
    CHECK(run_experiment(c, {1}).csv == ref);
    for (int threads : {4, 8}) CHECK(run_experiment(c, {threads}).csv == ref);
    auto rows = rows_of(ref);
    CHECK(rows[1][column(rows[0], "seed")] == "17");
    CHECK(rows[1][column(rows[0], "n_traj")] == "200");
    c.master_seed = 18;
    CHECK(run_experiment(c, {1}).csv != ref);
}

TEST_CASE("every kind runs and writes its header") {
    auto oat = dynamics("oat-ref", 4, 4, -1.0);
    oat.erase("sampler");
    auto thermal = dynamics("thermal-match", 3, 3, 1.0);
    thermal.erase("time");
    thermal.erase("sampler");
    auto ent = dynamics("entropy-rate", 2, 3, -1.0);
    ent.erase("sampler");
    json sweep = {{"kind", "sweep"},
                  {"engine", "ed"},
                  {"lattice", {{"Lx", 2}, {"Ly", 2}}},
                  {"time", {{"tau_max", 3.0}, {"n_points", 61}}},
                  {"grid", {{"deltas", {-1.8, -1.0}}, {"alphas", {3.0}}}}};
    json fit = {{"kind", "fit-scaling"},
                {"engine", "ed"},
                {"model", {{"Delta", -1.0}, {"alpha", 3.0}}},
                {"time", {{"tau_max", 3.0}, {"n_points", 61}}},
                {"grid", {{"sizes", {2, 3}}}}};
    std::vector<std::pair<json, std::string>> cases = {
        {oat, "engine,Lx,Ly,alpha,Delta,t,tau,xi2"},
        {thermal, "engine,Lx,Ly,alpha,Delta,E_target,Sz2_target,beta,lambda"},
        {ent, "engine,Lx,Ly,alpha,Delta,window,points_in_window,rate"},
        {sweep, "engine,Lx,Ly,alpha,Delta,t_star,tau_star,xi2_min"},
        {fit, "engine,Lx,Ly,N,alpha,Delta,t_star"},
        {{{"kind", "coupling-sweep"}}, "Lx,Ly,N,alpha,Jbar_over_Jperp"},
    };
    for (const auto& [j, prefix] : cases) {
        auto art = run_experiment(parse_config(j));
        CHECK(art.csv.rfind(prefix, 0) == 0);
        CHECK(rows_of(art.csv).size() >= 2);
        CHECK(art.manifest.contains("results"));
        CHECK(art.manifest.at("version").is_string());
    }
    CHECK(rows_of(run_experiment(parse_config(sweep)).csv).size() == 3);
}

TEST_CASE("coupling sweep is monotone in L") {
    auto art = run_experiment(parse_config({{"kind", "coupling-sweep"}}));
    auto rows = rows_of(art.csv);
    const int a = column(rows[0], "alpha"), lx = column(rows[0], "Lx"), v = column(rows[0], "Jbar_over_Jperp");
    for (std::size_t r = 2; r < rows.size(); ++r) {
        if (rows[r][a] != rows[r - 1][a]) continue;
        CHECK(std::stoi(rows[r][lx]) > std::stoi(rows[r - 1][lx]));
        CHECK(std::stod(rows[r][v]) < std::stod(rows[r - 1][v]));
    }
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r][lx] == "2" && rows[r][a] == "2") CHECK(std::stod(rows[r][v]) == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
    }
}

TEST_CASE("compare") {
    auto a = run_experiment(parse_config(bare_time(dynamics("dynamics-ed", 2, 2, -1.0)))).csv;
    auto self = compare_runs(a, a, {0.0, 0.0, false});
    CHECK(self.pass);
    CHECK(self.rows.size() == 11);
    CHECK(self.max_d_xi2_db == 0.0);
    CHECK(self.max_d_s2_norm == 0.0);

    auto b = run_experiment(parse_config(bare_time(dynamics("dynamics-ed", 2, 2, -1.4)))).csv;
    auto diff = compare_runs(a, b, {1e-6, 1e-6, false});
    CHECK_FALSE(diff.pass);
    CHECK(diff.max_d_xi2_db > 0.0);
    CHECK(compare_runs(a, b, {100.0, 100.0, true}).pass);

    auto other_grid = bare_time(dynamics("dynamics-ed", 2, 2, -1.0));
    other_grid["time"]["n_points"] = 12;
    CHECK_THROWS_AS(compare_runs(a, run_experiment(parse_config(other_grid)).csv), GridMismatch);
    CHECK_THROWS_AS(compare_runs(a, run_experiment(parse_config(bare_time(dynamics("dynamics-ed", 2, 1, -1.0)))).csv),
                    GridMismatch);
    CHECK_THROWS_AS(compare_runs(a, "not,a,csv\n"), std::invalid_argument);
}

TEST_CASE("artifacts and replay are byte-identical") {
    TempDir dir("replay");
    auto c = parse_config(dynamics("dynamics-dtwa", 3, 3, -1.0));
    auto art = run_experiment(c);
    auto manifest = write_artifacts(art, dir.path / "run.csv");
    CHECK(manifest == dir.path / "run.json");
    CHECK(slurp(dir.path / "run.csv") == art.csv);
    auto m = json::parse(slurp(manifest));
    CHECK(m.at("csv") == "run.csv");
    CHECK(m.at("seed") == 17);

    fs::create_directories(dir.path / "again");
    CHECK(run_cli("replay " + manifest.string() + " --out " + (dir.path / "again").string() + " --threads 4") == 0);
    CHECK(slurp(dir.path / "again" / "run.csv") == art.csv);
}

TEST_CASE("CLI exit codes and no partial writes") {
    TempDir dir("cli");
    const auto cfg = dir.path / "c.json";
    const std::string out = " --out " + dir.path.string();

    auto good = bare_time(dynamics("dynamics-ed", 2, 2, -1.0));
    good["output"] = {{"path", "good.csv"}};
    write_json(cfg, good);
    CHECK(run_cli("dynamics-ed --config " + cfg.string() + out) == 0);
    CHECK(fs::exists(dir.path / "good.csv"));
    CHECK(fs::exists(dir.path / "good.json"));
    CHECK(run_cli("dynamics-dtwa --config " + cfg.string() + out) == 2);

    auto bad = good;
    bad["time"]["n_points"] = 0;
    bad["output"]["path"] = "bad.csv";
    write_json(cfg, bad);
    CHECK(run_cli("dynamics-ed --config " + cfg.string() + out) == 2);

    auto big = dynamics("dynamics-ed", 5, 5, -1.0);
    big["output"] = {{"path", "big.csv"}};
    write_json(cfg, big);
    CHECK(run_cli("dynamics-ed --config " + cfg.string() + out) == 2);

    std::ofstream(cfg) << "{ not json";
    CHECK(run_cli("dynamics-ed --config " + cfg.string() + out) == 2);
    CHECK_FALSE(fs::exists(dir.path / "bad.csv"));
    CHECK_FALSE(fs::exists(dir.path / "big.csv"));
    for (const auto& e : fs::directory_iterator(dir.path)) CHECK(e.path().extension() != ".tmp");

    auto other = good;
    other["model"]["Delta"] = -1.6;
    other["output"]["path"] = "other.csv";
    write_json(cfg, other);
    CHECK(run_cli("dynamics-ed --config " + cfg.string() + out) == 0);
    const auto g = (dir.path / "good.csv").string(), o = (dir.path / "other.csv").string();
    CHECK(run_cli("compare " + g + " " + g + " --max-db 0 --max-s2 0") == 0);
    CHECK(run_cli("compare " + g + " " + o + " --max-db 1e-9") == 1);
    CHECK(run_cli("compare " + g + " " + o) == 0);

    auto seeded = dynamics("dynamics-dtwa", 2, 2, -1.0);
    seeded["output"] = {{"path", "s.csv"}};
    write_json(cfg, seeded);
    CHECK(run_cli("dynamics-dtwa --config " + cfg.string() + out + " --seed 99 --threads 2") == 0);
    CHECK(json::parse(slurp(dir.path / "s.json")).at("seed") == 99);
}

TEST_CASE("shipped example configs are valid") {
    const char* dir = std::getenv("XXZ_CONFIGS");
    REQUIRE(dir != nullptr);
    int seen = 0;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() != ".json") continue;
        INFO(e.path().string());
        ExperimentConfig c;
        CHECK_NOTHROW(c = load_config(e.path()));
        CHECK_NOTHROW(check_resource_guards(c));
        ++seen;
    }
    CHECK(seen >= 8);
}
