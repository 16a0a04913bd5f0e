#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mfc/experiments.hpp"

using namespace mfc;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

}  // namespace

TEST_CASE("default config round-trips byte-identically") {
    const auto cfg = default_config();
    const auto dir = std::filesystem::temp_directory_path() / "mfc_cfg_test";
    std::filesystem::create_directories(dir);
    const auto path = (dir / "config.json").string();
    save_config(cfg, path);
    const auto loaded = load_config(path);
    REQUIRE(config_to_json(loaded) == config_to_json(cfg));
    REQUIRE(config_hash(loaded) == config_hash(cfg));
    const auto path2 = (dir / "config2.json").string();
    save_config(loaded, path2);
    REQUIRE(slurp(path) == slurp(path2));
    std::filesystem::remove_all(dir);
}

TEST_CASE("unknown keys are rejected with their path") {
    auto j = config_to_json(default_config());
    j["experiment"]["n_knots"] = 3;  // not a key
    try {
        config_from_json(j);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        REQUIRE(std::string(e.what()).find("experiment.n_knots") != std::string::npos);
    }
}

TEST_CASE("n_ref must be a multiple of every N and at least 4x the largest") {
    auto cfg = default_config();
    cfg.n_list = {8, 16};
    cfg.n_ref = 100;  // not a multiple of 8 or 16
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg.n_ref = 32;  // multiple but < 4 * 16
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg.n_ref = 64;
    REQUIRE_NOTHROW(cfg.validate());
}

TEST_CASE("zero-rate convergence reports an exact match") {
    auto cfg = default_config();
    cfg.problem.adjacency.assign(4, 0);
    cfg.n_list = {4, 8, 16, 32};
    cfg.n_ref = 128;
    cfg.report_knots = 16;
    const auto rep = run_convergence(cfg);
    REQUIRE(rep.rate.exact_match);
    REQUIRE(rep.pass);
}

TEST_CASE("small convergence run decreases with a steep slope") {
    auto cfg = default_config();
    cfg.n_list = {4, 8, 16, 32};
    cfg.n_ref = 128;
    cfg.report_knots = 32;
    const auto rep = run_convergence(cfg);
    REQUIRE(rep.rate.strictly_decreasing);
    REQUIRE(rep.rate.slope_valid);
    REQUIRE(rep.rate.slope <= -0.45);
    REQUIRE(rep.pass);
}

TEST_CASE("zero-rate transfer: a single admissible control gives exact-zero gaps") {
    auto cfg = default_config();
    cfg.problem.adjacency.assign(4, 0);
    cfg.n_list = {4, 8, 16, 32};
    cfg.n_ref = 128;
    cfg.report_knots = 16;
    const auto rep = run_epsilon_transfer(cfg);
    for (const auto& p : rep.rate.points) REQUIRE(std::abs(p.value) <= 1e-12);
    REQUIRE(rep.rate.exact_match);
    REQUIRE(rep.pass);
}

TEST_CASE("small transfer run: nonnegative decreasing gaps") {
    auto cfg = default_config();
    cfg.n_list = {4, 8, 16, 32};
    cfg.n_ref = 128;
    cfg.report_knots = 32;
    cfg.flow_knots = 1024;
    const auto rep = run_epsilon_transfer(cfg);
    REQUIRE(rep.nonnegative);
    REQUIRE(rep.rate.strictly_decreasing);
    REQUIRE(rep.rate.slope_valid);
    REQUIRE(rep.rate.slope <= -0.4);
    REQUIRE(std::abs(rep.epsilon_hat) < 0.05);
    REQUIRE(rep.pass);
}

TEST_CASE("chaos run is deterministic across thread counts") {
    auto cfg = default_config();
    cfg.n_list = {8, 16, 32};
    cfg.n_ref = 128;
    cfg.paths = 40;
    cfg.flow_knots = 512;

    cfg.threads = 1;
    const auto a = run_chaos(cfg);
    cfg.threads = 4;
    const auto b = run_chaos(cfg);
    REQUIRE(a.points.size() == b.points.size());
    for (std::size_t i = 0; i < a.points.size(); ++i) {
        REQUIRE(a.points[i].dist_mean == b.points[i].dist_mean);
        REQUIRE(a.points[i].mismatch_mean == b.points[i].mismatch_mean);
    }
    // distances shrink with N even in this small configuration
    REQUIRE(a.points.back().dist_mean < a.points.front().dist_mean);
}

TEST_CASE("emission writes deterministic reports plus a timing sidecar") {
    auto cfg = default_config();
    cfg.problem.adjacency.assign(4, 0);
    cfg.n_list = {4, 8, 16, 32};
    cfg.n_ref = 128;
    cfg.report_knots = 8;
    const auto rep = run_convergence(cfg);

    const auto dir = std::filesystem::temp_directory_path() / "mfc_emit_test";
    std::filesystem::remove_all(dir);
    cfg.out_dir = dir.string();
    const auto ctx = make_emit_context(cfg);
    emit_results(rep, cfg, ctx);
    REQUIRE(std::filesystem::exists(dir / "report.json"));
    REQUIRE(std::filesystem::exists(dir / "e_n.csv"));
    REQUIRE(std::filesystem::exists(dir / "plot_convergence.gp"));
    REQUIRE(std::filesystem::exists(dir / "timings.csv"));

    const std::string csv = slurp(dir / "e_n.csv");
    REQUIRE(csv.find("config_hash=" + hash_hex(config_hash(cfg))) != std::string::npos);
    const std::string json = slurp(dir / "report.json");
    REQUIRE(json.find("\"pass\": true") != std::string::npos);

    // re-emit into a second directory: identical bytes for report and data
    const auto dir2 = std::filesystem::temp_directory_path() / "mfc_emit_test2";
    std::filesystem::remove_all(dir2);
    auto ctx2 = ctx;
    ctx2.dir = dir2.string();
    const auto rep2 = run_convergence(cfg);
    emit_results(rep2, cfg, ctx2);
    REQUIRE(slurp(dir / "report.json") == slurp(dir2 / "report.json"));
    REQUIRE(slurp(dir / "e_n.csv") == slurp(dir2 / "e_n.csv"));
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(dir2);
}

TEST_CASE("pontryagin experiment passes on the congestion preset") {
    auto cfg = default_config();
    cfg.n_list = {8, 16, 32, 64};
    cfg.n_ref = 512;
    cfg.flow_knots = 1024;
    const auto rep = run_pontryagin(cfg);
    REQUIRE(rep.sup_gradient_gap <= rep.gap_tolerance);
    REQUIRE(rep.residual <= rep.residual_tolerance);
    REQUIRE(rep.fault_residual >= rep.fault_floor);
    REQUIRE(rep.pass);
}
