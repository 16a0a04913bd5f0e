#pragma once

// Experiment orchestration: value-function convergence, epsilon-optimality
// transfer, propagation of chaos, and the Pontryagin consistency check, plus
// strict config parsing and deterministic result emission.
//
// Reports embed (config hash, seed, tool version) and are byte-identical
// across reruns and thread counts; wall-clock timings go to a separate
// sidecar file that carries no data.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mfc/errors.hpp"
#include "mfc/hjb_solver.hpp"
#include "mfc/limit_mfcp.hpp"
#include "mfc/model.hpp"
#include "mfc/pontryagin.hpp"
#include "mfc/simulator.hpp"
#include "mfc/version.hpp"

namespace mfc {

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------
struct ExperimentConfig {
    ProblemSpec problem;
    std::vector<int> n_list{8, 16, 32, 64};
    int n_ref = 256;
    double dt = 0.0;          // 0 = auto per solve
    int report_knots = 64;    // shared comparison grid for value fields
    int flow_knots = 2048;
    int paths = 200;
    std::uint64_t seed = 1;
    double epsilon = 0.0;
    std::vector<double> m0;
    int threads = 1;
    std::string out_dir = "out";
    std::string formats = "both";  // csv | json | both

    void validate() const {
        problem.validate();
        if (n_list.empty()) throw ConfigError("config: n_list is empty");
        int n_max = 0;
        for (int n : n_list) {
            if (n < 1) throw ConfigError("config: N must be >= 1");
            n_max = std::max(n_max, n);
        }
        for (std::size_t i = 1; i < n_list.size(); ++i)
            if (n_list[i] <= n_list[i - 1]) throw ConfigError("config: n_list must be increasing");
        if (n_ref < 4 * n_max)
            throw ConfigError("config: n_ref must be >= 4 * max(n_list), got " +
                              std::to_string(n_ref));
        for (int n : n_list)
            if (n_ref % n != 0)
                throw ConfigError("config: n_ref=" + std::to_string(n_ref) +
                                  " is not a multiple of N=" + std::to_string(n));
        if (static_cast<int>(m0.size()) != problem.d)
            throw ConfigError("config: m0 must have d entries");
        double mass = 0;
        for (double v : m0) {
            if (v < 0) throw ConfigError("config: m0 outside the simplex");
            mass += v;
        }
        if (std::abs(mass - 1.0) > 1e-9) throw ConfigError("config: m0 mass != 1");
        if (paths < 1) throw ConfigError("config: paths must be >= 1");
        if (report_knots < 1) throw ConfigError("config: report_knots must be >= 1");
        if (flow_knots < 2) throw ConfigError("config: flow_knots must be >= 2");
        if (threads < 1) throw ConfigError("config: threads must be >= 1");
        if (formats != "csv" && formats != "json" && formats != "both")
            throw ConfigError("config: formats must be csv|json|both");
    }
};

namespace detail {

inline void check_keys(const Json& obj, std::initializer_list<const char*> allowed,
                       const std::string& where) {
    for (const auto& item : obj.items()) {
        bool ok = false;
        for (const char* k : allowed)
            if (item.key() == k) {
                ok = true;
                break;
            }
        if (!ok) throw ConfigError("config: unknown key " + where + "." + item.key());
    }
}

inline Json cost_term_to_json(const CostTerm& t) {
    Json j;
    switch (t.kind) {
        case CostTerm::Kind::Zero:
            j["kind"] = "zero";
            break;
        case CostTerm::Kind::Affine:
            j["kind"] = "affine";
            j["c"] = t.c;
            break;
        case CostTerm::Kind::Quadratic:
            j["kind"] = "quadratic";
            j["kappa"] = t.kappa;
            j["center"] = t.center;
            break;
        case CostTerm::Kind::Trig:
            j["kind"] = "trig";
            j["beta"] = t.beta;
            j["gamma"] = t.gamma;
            j["c"] = t.c;
            break;
    }
    return j;
}

inline CostTerm cost_term_from_json(const Json& j, const std::string& where, int d) {
    if (!j.is_object() || !j.contains("kind"))
        throw ConfigError("config: " + where + " must be an object with a kind");
    const std::string kind = j.at("kind").get<std::string>();
    auto vec = [&](const char* key) {
        const auto v = j.at(key).get<std::vector<double>>();
        if (static_cast<int>(v.size()) != d)
            throw ConfigError("config: " + where + "." + key + " must have d entries");
        return v;
    };
    if (kind == "zero") {
        check_keys(j, {"kind"}, where);
        return CostTerm::zero();
    }
    if (kind == "affine") {
        check_keys(j, {"kind", "c"}, where);
        return CostTerm::affine(vec("c"));
    }
    if (kind == "quadratic") {
        check_keys(j, {"kind", "kappa", "center"}, where);
        return CostTerm::quadratic(j.at("kappa").get<double>(), vec("center"));
    }
    if (kind == "trig") {
        check_keys(j, {"kind", "beta", "gamma", "c"}, where);
        return CostTerm::trig(j.at("beta").get<double>(), j.at("gamma").get<double>(), vec("c"));
    }
    throw ConfigError("config: " + where + ".kind must be zero|affine|quadratic|trig");
}

}  // namespace detail

inline Json problem_to_json(const ProblemSpec& spec) {
    Json j;
    j["preset"] = spec.preset_id;
    j["d"] = spec.d;
    j["horizon"] = spec.horizon;
    j["flag"] = to_string(spec.flag);
    if (const auto* rb = std::get_if<RateBox>(&spec.actions)) {
        j["action_model"] = Json{{"kind", "rate_box"}, {"bound", rb->bound}};
    } else {
        j["action_model"] =
            Json{{"kind", "finite_set"}, {"actions", std::get<FiniteActionSet>(spec.actions).actions}};
    }
    j["adjacency"] = spec.adjacency;
    Json f0 = Json::array(), g = Json::array();
    for (const auto& t : spec.f0) f0.push_back(detail::cost_term_to_json(t));
    for (const auto& t : spec.g) g.push_back(detail::cost_term_to_json(t));
    j["f0"] = f0;
    j["g"] = g;
    return j;
}

inline ProblemSpec problem_from_json(const Json& j) {
    detail::check_keys(j, {"preset", "d", "horizon", "flag", "action_model", "adjacency", "f0", "g"},
                       "problem");
    ProblemSpec spec;
    spec.preset_id = j.at("preset").get<std::string>();
    spec.d = j.at("d").get<int>();
    spec.horizon = j.at("horizon").get<double>();
    const std::string flag = j.at("flag").get<std::string>();
    if (flag == "A") spec.flag = AssumptionFlag::A;
    else if (flag == "B") spec.flag = AssumptionFlag::B;
    else if (flag == "C") spec.flag = AssumptionFlag::C;
    else throw ConfigError("config: problem.flag must be A|B|C");
    const Json& am = j.at("action_model");
    const std::string kind = am.at("kind").get<std::string>();
    if (kind == "rate_box") {
        detail::check_keys(am, {"kind", "bound"}, "problem.action_model");
        spec.actions = RateBox{am.at("bound").get<double>()};
    } else if (kind == "finite_set") {
        detail::check_keys(am, {"kind", "actions"}, "problem.action_model");
        spec.actions = FiniteActionSet{am.at("actions").get<std::vector<std::vector<double>>>()};
    } else {
        throw ConfigError("config: problem.action_model.kind must be rate_box|finite_set");
    }
    spec.adjacency = j.at("adjacency").get<std::vector<std::uint8_t>>();
    const Json& f0 = j.at("f0");
    const Json& g = j.at("g");
    if (!f0.is_array() || !g.is_array()) throw ConfigError("config: f0/g must be arrays");
    for (std::size_t i = 0; i < f0.size(); ++i)
        spec.f0.push_back(detail::cost_term_from_json(f0[i], "problem.f0[" + std::to_string(i) + "]", spec.d));
    for (std::size_t i = 0; i < g.size(); ++i)
        spec.g.push_back(detail::cost_term_from_json(g[i], "problem.g[" + std::to_string(i) + "]", spec.d));
    spec.validate();
    return spec;
}

inline Json config_to_json(const ExperimentConfig& cfg) {
    Json j;
    j["schema_version"] = kSchemaVersion;
    j["problem"] = problem_to_json(cfg.problem);
    Json e;
    e["n_list"] = cfg.n_list;
    e["n_ref"] = cfg.n_ref;
    e["dt"] = cfg.dt;
    e["report_knots"] = cfg.report_knots;
    e["flow_knots"] = cfg.flow_knots;
    e["paths"] = cfg.paths;
    e["seed"] = cfg.seed;
    e["epsilon"] = cfg.epsilon;
    e["m0"] = cfg.m0;
    e["threads"] = cfg.threads;
    e["out_dir"] = cfg.out_dir;
    e["formats"] = cfg.formats;
    j["experiment"] = e;
    return j;
}

inline ExperimentConfig config_from_json(const Json& j) {
    detail::check_keys(j, {"schema_version", "problem", "experiment"}, "root");
    if (j.at("schema_version").get<int>() != kSchemaVersion)
        throw ConfigError("config: unsupported schema_version");
    ExperimentConfig cfg;
    cfg.problem = problem_from_json(j.at("problem"));
    const Json& e = j.at("experiment");
    detail::check_keys(e,
                       {"n_list", "n_ref", "dt", "report_knots", "flow_knots", "paths", "seed",
                        "epsilon", "m0", "threads", "out_dir", "formats"},
                       "experiment");
    cfg.n_list = e.at("n_list").get<std::vector<int>>();
    cfg.n_ref = e.at("n_ref").get<int>();
    cfg.dt = e.at("dt").get<double>();
    cfg.report_knots = e.at("report_knots").get<int>();
    cfg.flow_knots = e.at("flow_knots").get<int>();
    cfg.paths = e.at("paths").get<int>();
    cfg.seed = e.at("seed").get<std::uint64_t>();
    cfg.epsilon = e.at("epsilon").get<double>();
    cfg.m0 = e.at("m0").get<std::vector<double>>();
    cfg.threads = e.at("threads").get<int>();
    cfg.out_dir = e.at("out_dir").get<std::string>();
    cfg.formats = e.at("formats").get<std::string>();
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    Json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw ConfigError("config: parse error in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

inline void save_config(const ExperimentConfig& cfg, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw ConfigError("config: cannot write " + path);
    os << config_to_json(cfg).dump(2) << "\n";
}

inline ExperimentConfig default_config() {
    ExperimentConfig cfg;
    cfg.problem = make_quadratic_spec(2, 1.0, 1.0,
                                      {CostTerm::quadratic(0.6, {0.0, 1.0}), CostTerm::zero()},
                                      {CostTerm::affine({0.8, 0.0}), CostTerm::zero()},
                                      AssumptionFlag::C, "quadratic-congestion");
    cfg.n_ref = 512;
    cfg.m0 = {0.5, 0.5};
    return cfg;
}

inline std::uint64_t config_hash(const ExperimentConfig& cfg) {
    const std::string s = config_to_json(cfg).dump();
    std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hash_hex(std::uint64_t h) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// Rate fitting
// ---------------------------------------------------------------------------
struct RatePoint {
    int n = 0;
    double value = 0;
    double runtime_sec = 0;  // emitted only to the timing sidecar
};

struct RateReport {
    std::string name;
    std::vector<RatePoint> points;
    bool exact_match = false;       // everything at numerical zero; no slope
    bool strictly_decreasing = false;
    bool slope_valid = false;
    double slope = 0;
    double intercept = 0;
};

inline void fit_loglog(RateReport& rep, double floor, std::size_t min_points) {
    rep.strictly_decreasing = true;
    rep.exact_match = true;
    for (std::size_t i = 0; i < rep.points.size(); ++i) {
        if (std::abs(rep.points[i].value) > floor) rep.exact_match = false;
        if (i > 0 && !(rep.points[i].value < rep.points[i - 1].value))
            rep.strictly_decreasing = false;
    }
    rep.slope_valid = false;
    if (rep.exact_match || rep.points.size() < min_points) return;
    for (const auto& p : rep.points)
        if (p.value <= floor) return;  // mixed zeros: no meaningful fit
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(rep.points.size());
    for (const auto& p : rep.points) {
        const double x = std::log(static_cast<double>(p.n));
        const double y = std::log(p.value);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    rep.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    rep.intercept = (sy - rep.slope * sx) / n;
    rep.slope_valid = true;
}

// ---------------------------------------------------------------------------
// Convergence experiment (value functions)
// ---------------------------------------------------------------------------
struct ConvergenceReport {
    RateReport rate;       // E_N
    int n_ref = 0;
    double slope_threshold = -0.45;
    bool pass = false;
};

namespace detail {

inline double elapsed_sec(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Per-N jobs run concurrently; results land in index order, so the report is
// independent of completion order.
template <typename Fn>
std::vector<RatePoint> run_per_n(const std::vector<int>& ns, Fn&& job) {
    std::vector<std::future<RatePoint>> futures;
    futures.reserve(ns.size());
    for (int n : ns)
        futures.push_back(std::async(std::launch::async, [&job, n] {
            const auto t0 = std::chrono::steady_clock::now();
            RatePoint p;
            p.n = n;
            p.value = job(n);
            p.runtime_sec = elapsed_sec(t0);
            return p;
        }));
    std::vector<RatePoint> points;
    points.reserve(ns.size());
    for (auto& f : futures) points.push_back(f.get());
    return points;
}

// Exact embedding of the coarse grid into the fine one (counts scaled).
inline std::vector<std::size_t> embed_indices(const SimplexGrid& coarse, const SimplexGrid& fine) {
    const int scale = fine.resolution() / coarse.resolution();
    std::vector<std::size_t> map(coarse.size());
    std::vector<int> k(static_cast<std::size_t>(coarse.dim()));
    for (std::size_t p = 0; p < coarse.size(); ++p) {
        const auto kc = coarse.counts(p);
        for (int q = 0; q < coarse.dim(); ++q) k[static_cast<std::size_t>(q)] = kc[static_cast<std::size_t>(q)] * scale;
        map[p] = fine.index_of(k);
    }
    return map;
}

}  // namespace detail

inline ConvergenceReport run_convergence(const ExperimentConfig& cfg) {
    cfg.validate();
    ConvergenceReport rep;
    rep.n_ref = cfg.n_ref;
    rep.rate.name = "E_N";

    SolveOptions opts;
    opts.dt = cfg.dt;
    opts.report_knots = cfg.report_knots;
    opts.threads = cfg.threads;

    const ValueField ref = solve_VN(cfg.problem, cfg.n_ref, opts);
    rep.rate.points = detail::run_per_n(cfg.n_list, [&](int n) {
        const ValueField field = solve_VN(cfg.problem, n, opts);
        const auto map = detail::embed_indices(field.grid(), ref.grid());
        double err = 0;
        for (int r = 0; r <= cfg.report_knots; ++r) {
            const auto coarse = field.layer(r);
            const auto fine = ref.layer(r);
            for (std::size_t p = 0; p < coarse.size(); ++p)
                err = std::max(err, std::abs(coarse[p] - fine[map[p]]));
        }
        return err;
    });
    fit_loglog(rep.rate, 1e-9, 4);
    rep.pass = rep.rate.exact_match ||
               (rep.rate.strictly_decreasing && rep.rate.slope_valid &&
                rep.rate.slope <= rep.slope_threshold);
    return rep;
}

// ---------------------------------------------------------------------------
// Epsilon-transfer experiment
// ---------------------------------------------------------------------------
struct TransferReport {
    RateReport rate;  // gap_N
    double epsilon_hat = 0;
    double gap_floor = -1e-8;
    double slope_threshold = -0.4;
    bool nonnegative = false;
    bool pass = false;
};

namespace detail {

// Multinomial(N, m0) weight of a grid point, by log factorials.
inline double multinomial_weight(std::span<const int> k, std::span<const double> m0) {
    double logw = std::lgamma(static_cast<double>(std::accumulate(k.begin(), k.end(), 0)) + 1.0);
    for (std::size_t i = 0; i < k.size(); ++i) {
        const int ki = k[i];
        if (ki > 0 && m0[i] <= 0) return 0.0;
        logw -= std::lgamma(ki + 1.0);
        if (ki > 0) logw += ki * std::log(m0[i]);
    }
    return std::exp(logw);
}

}  // namespace detail

inline TransferReport run_epsilon_transfer(const ExperimentConfig& cfg) {
    cfg.validate();
    if (!cfg.problem.quadratic_closed_form())
        throw UnsupportedModelError("run_epsilon_transfer: needs the rate-box closed form (flag B)");
    TransferReport rep;
    rep.rate.name = "gap_N";

    SolveOptions opts;
    opts.dt = cfg.dt;
    opts.report_knots = cfg.report_knots;
    opts.threads = cfg.threads;
    FlowOptions fopts;
    fopts.knots = cfg.flow_knots;

    auto ref = std::make_shared<const ReferenceValue>(reference_value(cfg.problem, cfg.n_ref, opts));
    const OptimalTrajectory opt = optimal_trajectory(cfg.problem, ref, cfg.m0, fopts);
    const OpenLoopControl alpha = decentralize(cfg.problem, *opt.policy, opt.flow);
    rep.epsilon_hat = evaluate_cost_J(cfg.problem, opt.flow) - ref->value(0.0, cfg.m0);

    rep.rate.points = detail::run_per_n(cfg.n_list, [&](int n) {
        const ValueField vn = solve_VN(cfg.problem, n, opts);
        const ValueField wn = solve_fixed_control(cfg.problem, n, alpha, opts);
        const auto& grid = vn.grid();
        double gap = 0;
        const auto v0 = vn.layer(0);
        const auto w0 = wn.layer(0);
        for (std::size_t p = 0; p < grid.size(); ++p) {
            const double wgt = detail::multinomial_weight(grid.counts(p), cfg.m0);
            if (wgt > 0) gap += wgt * (w0[p] - v0[p]);
        }
        return gap;
    });
    fit_loglog(rep.rate, 1e-12, 4);
    rep.nonnegative = true;
    for (const auto& p : rep.rate.points)
        if (p.value < rep.gap_floor) rep.nonnegative = false;
    rep.pass = rep.nonnegative &&
               (rep.rate.exact_match ||  // e.g. a single admissible control
                (rep.rate.strictly_decreasing && rep.rate.slope_valid &&
                 rep.rate.slope <= rep.slope_threshold));
    return rep;
}

// ---------------------------------------------------------------------------
// Propagation-of-chaos experiment
// ---------------------------------------------------------------------------
struct ChaosPoint {
    int n = 0;
    double dist_mean = 0;
    double dist_stderr = 0;
    double mismatch_mean = 0;
    double mismatch_stderr = 0;
    double ever_mean = 0;
    double runtime_sec = 0;
};

struct ChaosReport {
    std::vector<ChaosPoint> points;
    double dist_slope = 0;
    double mismatch_slope = 0;
    bool dist_decreasing = false;
    double dist_slope_threshold = -0.111;      // guaranteed rate 1/N^{1/9}
    double mismatch_slope_threshold = -0.45;   // guaranteed rate 1/sqrt(N)
    bool pass = false;
};

namespace detail {

inline double loglog_slope(std::span<const double> ns, std::span<const double> vals) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(ns.size());
    for (std::size_t i = 0; i < ns.size(); ++i) {
        const double x = std::log(ns[i]);
        const double y = std::log(vals[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace detail

inline ChaosReport run_chaos(const ExperimentConfig& cfg) {
    cfg.validate();
    if (!cfg.problem.quadratic_closed_form())
        throw UnsupportedModelError("run_chaos: needs the rate-box closed form (flag B)");
    ChaosReport rep;

    SolveOptions ref_opts;
    ref_opts.dt = cfg.dt;
    ref_opts.threads = cfg.threads;  // reference and per-N solves keep auto knots
    FlowOptions fopts;
    fopts.knots = cfg.flow_knots;

    auto ref = std::make_shared<const ReferenceValue>(reference_value(cfg.problem, cfg.n_ref, ref_opts));
    const OptimalTrajectory opt = optimal_trajectory(cfg.problem, ref, cfg.m0, fopts);

    auto job = [&](int n) {
        const auto t0 = std::chrono::steady_clock::now();
        auto field = std::make_shared<const ValueField>(solve_VN(cfg.problem, n, ref_opts));
        const GridFieldPolicy feedback = extract_feedback(cfg.problem, field);

        SimConfig sim;
        sim.particles = n;
        sim.paths = cfg.paths;
        sim.seed = cfg.seed;
        sim.threads = cfg.threads;

        const auto& grid = field->grid();
        const SimplexPoint start = grid.point(grid.nearest_index(cfg.m0));
        const TrajectoryEnsemble ens = simulate_empirical(cfg.problem, feedback, sim, start);
        const DistanceStats dist = estimate_sup_distance(ens, opt.flow);

        const CoupledEnsemble coupled =
            simulate_coupled_particles(cfg.problem, feedback, *opt.policy, opt.flow, sim, cfg.m0);
        const DistanceStats mism = summarize(coupled.mismatch_time_fraction);
        const DistanceStats ever = summarize(coupled.ever_mismatched);

        ChaosPoint pt;
        pt.n = n;
        pt.dist_mean = dist.mean;
        pt.dist_stderr = dist.stderr_mean;
        pt.mismatch_mean = mism.mean;
        pt.mismatch_stderr = mism.stderr_mean;
        pt.ever_mean = ever.mean;
        pt.runtime_sec = detail::elapsed_sec(t0);
        return pt;
    };
    std::vector<std::future<ChaosPoint>> futures;
    for (int n : cfg.n_list)
        futures.push_back(std::async(std::launch::async, job, n));
    for (auto& f : futures) rep.points.push_back(f.get());

    std::vector<double> ns, dists, misms;
    rep.dist_decreasing = true;
    for (std::size_t i = 0; i < rep.points.size(); ++i) {
        ns.push_back(rep.points[i].n);
        dists.push_back(rep.points[i].dist_mean);
        misms.push_back(rep.points[i].mismatch_mean);
        if (i > 0 && !(rep.points[i].dist_mean < rep.points[i - 1].dist_mean))
            rep.dist_decreasing = false;
    }
    rep.dist_slope = detail::loglog_slope(ns, dists);
    rep.mismatch_slope = detail::loglog_slope(ns, misms);
    rep.pass = rep.dist_decreasing && rep.dist_slope <= rep.dist_slope_threshold &&
               rep.mismatch_slope <= rep.mismatch_slope_threshold;
    return rep;
}

// ---------------------------------------------------------------------------
// Pontryagin consistency experiment
// ---------------------------------------------------------------------------
struct PontryaginReport {
    int n_ref = 0;
    double sup_gradient_gap = 0;   // sup_t |w_t - D_x Vhat(t, x_t)|
    double residual = 0;           // MFG residual of the reconstructed u
    double fault_residual = 0;     // residual after +0.1 on one knot
    double gap_tolerance = 5e-3;
    double residual_tolerance = 1e-3;
    double fault_floor = 0.05;
    bool pass = false;
};

inline PontryaginReport run_pontryagin(const ExperimentConfig& cfg) {
    cfg.validate();
    PontryaginReport rep;
    rep.n_ref = cfg.n_ref;

    SolveOptions opts;
    opts.dt = cfg.dt;
    opts.threads = cfg.threads;
    FlowOptions fopts;
    fopts.knots = cfg.flow_knots;

    auto ref = std::make_shared<const ReferenceValue>(reference_value(cfg.problem, cfg.n_ref, opts));
    const OptimalTrajectory opt = optimal_trajectory(cfg.problem, ref, cfg.m0, fopts);
    const AdjointPath w = solve_adjoint(cfg.problem, opt.flow);

    // w_j vs the chart gradient d/dx_j Vhat = D^d_j V at the trajectory.
    const int d = cfg.problem.d;
    std::vector<double> grad(static_cast<std::size_t>(d));
    for (int r = 0; r <= w.knot_count(); ++r) {
        const double t = w.knot_time(r);
        const auto mu = opt.flow.state_at(r);
        ref->gradient_into(t, d - 1, mu, grad);
        const auto wr = w.at(r);
        double gap = 0;
        for (int j = 0; j < d - 1; ++j)
            gap += (wr[static_cast<std::size_t>(j)] - grad[static_cast<std::size_t>(j)]) *
                   (wr[static_cast<std::size_t>(j)] - grad[static_cast<std::size_t>(j)]);
        rep.sup_gradient_gap = std::max(rep.sup_gradient_gap, std::sqrt(gap));
    }

    const StateValuePath u = build_state_values(w);
    rep.residual = mfg_residual(cfg.problem, u, opt.flow);

    StateValuePath faulty = u;
    const int mid = u.knots / 2;
    faulty.at(mid)[0] += 0.1;
    rep.fault_residual = mfg_residual(cfg.problem, faulty, opt.flow);

    rep.pass = rep.sup_gradient_gap <= rep.gap_tolerance &&
               rep.residual <= rep.residual_tolerance && rep.fault_residual >= rep.fault_floor;
    return rep;
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------
struct EmitContext {
    std::string dir;
    std::uint64_t cfg_hash = 0;
    std::uint64_t seed = 0;
    bool csv = true;
    bool json = true;
};

inline EmitContext make_emit_context(const ExperimentConfig& cfg, const std::string& dir_override = "") {
    EmitContext ctx;
    ctx.dir = dir_override.empty() ? cfg.out_dir : dir_override;
    ctx.cfg_hash = config_hash(cfg);
    ctx.seed = cfg.seed;
    ctx.csv = cfg.formats == "csv" || cfg.formats == "both";
    ctx.json = cfg.formats == "json" || cfg.formats == "both";
    return ctx;
}

inline Json report_envelope(const EmitContext& ctx) {
    Json j;
    j["schema_version"] = kSchemaVersion;
    j["tool_version"] = kToolVersion;
    j["config_hash"] = hash_hex(ctx.cfg_hash);
    j["seed"] = ctx.seed;
    return j;
}

inline std::string csv_header(const EmitContext& ctx) {
    return "# schema_version=" + std::to_string(kSchemaVersion) + " tool_version=" + kToolVersion +
           " config_hash=" + hash_hex(ctx.cfg_hash) + " seed=" + std::to_string(ctx.seed) + "\n";
}

namespace detail {

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("emit: cannot write " + path);
    os << content;
}

inline Json rate_to_json(const RateReport& r) {
    Json j;
    j["name"] = r.name;
    Json pts = Json::array();
    for (const auto& p : r.points) pts.push_back(Json{{"n", p.n}, {"value", p.value}});
    j["points"] = pts;
    j["exact_match"] = r.exact_match;
    j["strictly_decreasing"] = r.strictly_decreasing;
    j["slope_valid"] = r.slope_valid;
    if (r.slope_valid) {
        j["slope"] = r.slope;
        j["intercept"] = r.intercept;
    }
    return j;
}

inline void emit_rate_csv(const EmitContext& ctx, const RateReport& r, const std::string& file) {
    std::string out = csv_header(ctx) + "n," + r.name + "\n";
    for (const auto& p : r.points) {
        out += std::to_string(p.n) + ",";
        format_double(out, p.value);
        out += "\n";
    }
    write_file(ctx.dir + "/" + file, out);
}

inline void emit_timings(const EmitContext& ctx, const std::vector<RatePoint>& pts,
                         const std::string& file) {
    // Wall-clock sidecar; intentionally outside the byte-identical guarantee.
    std::string out = "n,runtime_sec\n";
    for (const auto& p : pts) {
        out += std::to_string(p.n) + ",";
        format_double(out, p.runtime_sec);
        out += "\n";
    }
    write_file(ctx.dir + "/" + file, out);
}

inline void emit_plot_script(const EmitContext& ctx, const std::string& data_csv,
                             const std::string& ylabel, const std::string& file) {
    std::string gp;
    gp += "set logscale xy\nset xlabel 'N'\nset ylabel '" + ylabel + "'\n";
    gp += "set datafile separator ','\n";
    gp += "plot '" + data_csv + "' skip 2 using 1:2 with linespoints title '" + ylabel + "'\n";
    write_file(ctx.dir + "/" + file, gp);
}

}  // namespace detail

inline void emit_results(const ConvergenceReport& rep, const ExperimentConfig& cfg,
                         const EmitContext& ctx) {
    std::filesystem::create_directories(ctx.dir);
    if (ctx.json) {
        Json j = report_envelope(ctx);
        j["experiment"] = "convergence";
        j["n_ref"] = rep.n_ref;
        j["rate"] = detail::rate_to_json(rep.rate);
        j["slope_threshold"] = rep.slope_threshold;
        j["pass"] = rep.pass;
        j["config"] = config_to_json(cfg);
        detail::write_file(ctx.dir + "/report.json", j.dump(2) + "\n");
    }
    if (ctx.csv) {
        detail::emit_rate_csv(ctx, rep.rate, "e_n.csv");
        detail::emit_plot_script(ctx, "e_n.csv", "E_N", "plot_convergence.gp");
    }
    detail::emit_timings(ctx, rep.rate.points, "timings.csv");
}

inline void emit_results(const TransferReport& rep, const ExperimentConfig& cfg,
                         const EmitContext& ctx) {
    std::filesystem::create_directories(ctx.dir);
    if (ctx.json) {
        Json j = report_envelope(ctx);
        j["experiment"] = "transfer";
        j["rate"] = detail::rate_to_json(rep.rate);
        j["epsilon_hat"] = rep.epsilon_hat;
        j["gap_floor"] = rep.gap_floor;
        j["slope_threshold"] = rep.slope_threshold;
        j["nonnegative"] = rep.nonnegative;
        j["pass"] = rep.pass;
        j["config"] = config_to_json(cfg);
        detail::write_file(ctx.dir + "/report.json", j.dump(2) + "\n");
    }
    if (ctx.csv) {
        detail::emit_rate_csv(ctx, rep.rate, "gap_n.csv");
        detail::emit_plot_script(ctx, "gap_n.csv", "gap_N", "plot_transfer.gp");
    }
    detail::emit_timings(ctx, rep.rate.points, "timings.csv");
}

inline void emit_results(const ChaosReport& rep, const ExperimentConfig& cfg,
                         const EmitContext& ctx) {
    std::filesystem::create_directories(ctx.dir);
    if (ctx.json) {
        Json j = report_envelope(ctx);
        j["experiment"] = "chaos";
        Json pts = Json::array();
        for (const auto& p : rep.points)
            pts.push_back(Json{{"n", p.n},
                               {"dist_mean", p.dist_mean},
                               {"dist_stderr", p.dist_stderr},
                               {"mismatch_mean", p.mismatch_mean},
                               {"mismatch_stderr", p.mismatch_stderr},
                               {"ever_mean", p.ever_mean}});
        j["points"] = pts;
        j["dist_slope"] = rep.dist_slope;
        j["mismatch_slope"] = rep.mismatch_slope;
        j["dist_decreasing"] = rep.dist_decreasing;
        j["dist_slope_threshold"] = rep.dist_slope_threshold;
        j["mismatch_slope_threshold"] = rep.mismatch_slope_threshold;
        j["pass"] = rep.pass;
        j["config"] = config_to_json(cfg);
        detail::write_file(ctx.dir + "/report.json", j.dump(2) + "\n");
    }
    if (ctx.csv) {
        std::string out = csv_header(ctx) +
                          "n,dist_mean,dist_stderr,mismatch_mean,mismatch_stderr,ever_mean\n";
        for (const auto& p : rep.points) {
            out += std::to_string(p.n) + ",";
            format_double(out, p.dist_mean);
            out += ",";
            format_double(out, p.dist_stderr);
            out += ",";
            format_double(out, p.mismatch_mean);
            out += ",";
            format_double(out, p.mismatch_stderr);
            out += ",";
            format_double(out, p.ever_mean);
            out += "\n";
        }
        detail::write_file(ctx.dir + "/chaos.csv", out);
        detail::emit_plot_script(ctx, "chaos.csv", "E sup |mu^N - mu|", "plot_chaos.gp");
    }
    std::vector<RatePoint> timing;
    for (const auto& p : rep.points) timing.push_back({p.n, p.dist_mean, p.runtime_sec});
    detail::emit_timings(ctx, timing, "timings.csv");
}

inline void emit_results(const PontryaginReport& rep, const ExperimentConfig& cfg,
                         const EmitContext& ctx) {
    std::filesystem::create_directories(ctx.dir);
    if (ctx.json) {
        Json j = report_envelope(ctx);
        j["experiment"] = "pontryagin";
        j["n_ref"] = rep.n_ref;
        j["sup_gradient_gap"] = rep.sup_gradient_gap;
        j["residual"] = rep.residual;
        j["fault_residual"] = rep.fault_residual;
        j["gap_tolerance"] = rep.gap_tolerance;
        j["residual_tolerance"] = rep.residual_tolerance;
        j["fault_floor"] = rep.fault_floor;
        j["pass"] = rep.pass;
        j["config"] = config_to_json(cfg);
        detail::write_file(ctx.dir + "/report.json", j.dump(2) + "\n");
    }
}

}  // namespace mfc
