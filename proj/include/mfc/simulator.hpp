#pragma once

// Monte Carlo simulation of the controlled empirical-measure chain
//   mu^N -> mu^N + (delta_j - delta_i)/N at rate N mu^N_i Q_{i,j}(t, a, mu^N),
// by thinning against the constant majorant Lambda = N M d (d-1): candidate
// times from an Exp(Lambda) clock, candidate pair uniform, acceptance
// probability rate / (Lambda / (d(d-1))) <= 1. Statistically exact for
// time-inhomogeneous rates.
//
// Particle systems use one counter-based stream per (path, particle); the
// three systems X / Y / X~ of the propagation-of-chaos setup consume the same
// draws, which realizes the synchronous coupling and keeps results identical
// for any worker count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include "mfc/errors.hpp"
#include "mfc/hjb_solver.hpp"
#include "mfc/limit_mfcp.hpp"
#include "mfc/model.hpp"
#include "mfc/parallel.hpp"
#include "mfc/rng.hpp"
#include "mfc/simplex_grid.hpp"

namespace mfc {

struct SimConfig {
    int particles = 0;        // N
    int paths = 100;
    std::uint64_t seed = 1;
    int threads = 1;
    int event_stride = 1;     // CSV export keeps every k-th event (1 = all)

    double majorant(const ProblemSpec& spec) const {
        return static_cast<double>(particles) * spec.rate_bound() * spec.d * (spec.d - 1);
    }
};

struct ChainEvent {
    double t;
    std::int32_t particle;  // -1 for chain-level moves
    std::int16_t from;
    std::int16_t to;
};

struct ChainPath {
    std::vector<int> init_counts;
    std::vector<ChainEvent> events;
};

class TrajectoryEnsemble {
public:
    TrajectoryEnsemble(int d, int particles, double horizon, std::string tag)
        : d_(d), particles_(particles), horizon_(horizon), tag_(std::move(tag)) {}

    int dim() const { return d_; }
    int particles() const { return particles_; }
    double horizon() const { return horizon_; }
    const std::string& coupling_tag() const { return tag_; }

    std::vector<ChainPath>& paths() { return paths_; }
    const std::vector<ChainPath>& paths() const { return paths_; }

private:
    int d_;
    int particles_;
    double horizon_;
    std::string tag_;
    std::vector<ChainPath> paths_;
};

namespace detail {

inline constexpr std::uint64_t kChainStream = 0xFFFFFFFFull;

inline int categorical(std::span<const double> m, double u) {
    double acc = 0;
    for (std::size_t i = 0; i + 1 < m.size(); ++i) {
        acc += m[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(m.size()) - 1;
}

}  // namespace detail

// i.i.d. initial condition: counts of N categorical draws from m0.
inline std::vector<int> sample_initial_counts(std::span<const double> m0, int particles,
                                              std::uint64_t seed, std::uint64_t path) {
    std::vector<int> counts(m0.size(), 0);
    RngStream init(seed, path, detail::kChainStream, /*purpose=*/1);
    for (int k = 0; k < particles; ++k)
        counts[static_cast<std::size_t>(detail::categorical(m0, init.uniform()))] += 1;
    return counts;
}

namespace detail {

inline void simulate_chain_path(const ProblemSpec& spec, const FeedbackPolicy& policy,
                                const SimConfig& sim, std::uint64_t path_id, ChainPath& out) {
    const int d = spec.d;
    const int n = sim.particles;
    const double horizon = spec.horizon;
    const double lambda = sim.majorant(spec);
    out.events.clear();
    if (lambda <= 0) return;  // no admissible jumps (rate bound 0)

    RngStream stream(sim.seed, path_id, kChainStream, /*purpose=*/0);
    std::vector<int> counts = out.init_counts;
    std::vector<double> m(static_cast<std::size_t>(d));
    std::vector<double> action(static_cast<std::size_t>(d));
    const double per_pair = lambda / (d * (d - 1));  // = N * M
    double t = 0;
    while (true) {
        t += stream.exponential(lambda);
        if (t > horizon) break;
        const std::uint64_t pair = stream.below(static_cast<std::uint64_t>(d) * (d - 1));
        const int i = static_cast<int>(pair / static_cast<std::uint64_t>(d - 1));
        int j = static_cast<int>(pair % static_cast<std::uint64_t>(d - 1));
        if (j >= i) ++j;
        const double u = stream.uniform();

        for (int q = 0; q < d; ++q)
            m[static_cast<std::size_t>(q)] = static_cast<double>(counts[static_cast<std::size_t>(q)]) / n;
        policy.action_into(t, i, m, action);
        const double rate = n * m[static_cast<std::size_t>(i)] * spec.rate(t, i, j, action, m);
        const double accept = rate / per_pair;
        if (accept > 1.0 + 1e-12)
            throw MajorantError("simulate_empirical: acceptance ratio " + std::to_string(accept) +
                                " > 1; majorant misconfigured");
        if (u < accept) {
            if (counts[static_cast<std::size_t>(i)] == 0)
                throw MajorantError("simulate_empirical: accepted jump out of an empty state");
            counts[static_cast<std::size_t>(i)] -= 1;
            counts[static_cast<std::size_t>(j)] += 1;
            out.events.push_back({t, -1, static_cast<std::int16_t>(i), static_cast<std::int16_t>(j)});
        }
    }
}

}  // namespace detail

inline TrajectoryEnsemble simulate_empirical(const ProblemSpec& spec, const FeedbackPolicy& policy,
                                             const SimConfig& sim, const SimplexPoint& m0) {
    spec.validate();
    if (m0.resolution() != sim.particles)
        throw ArgumentError("simulate_empirical: m0 resolution != particle count");
    if (m0.dimension() != spec.d) throw ArgumentError("simulate_empirical: m0 dimension mismatch");

    TrajectoryEnsemble ens(spec.d, sim.particles, spec.horizon, "mu^N");
    ens.paths().resize(static_cast<std::size_t>(sim.paths));
    for (auto& p : ens.paths()) p.init_counts = m0.counts();
    parallel_for(static_cast<std::size_t>(sim.paths), sim.threads, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t p = lo; p < hi; ++p)
            detail::simulate_chain_path(spec, policy, sim, p, ens.paths()[p]);
    });
    return ens;
}

// Overload with i.i.d. multinomial initialization from arbitrary m0 in S_d.
inline TrajectoryEnsemble simulate_empirical_iid(const ProblemSpec& spec,
                                                 const FeedbackPolicy& policy, const SimConfig& sim,
                                                 std::span<const double> m0) {
    spec.validate();
    TrajectoryEnsemble ens(spec.d, sim.particles, spec.horizon, "mu^N,iid");
    ens.paths().resize(static_cast<std::size_t>(sim.paths));
    parallel_for(static_cast<std::size_t>(sim.paths), sim.threads, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t p = lo; p < hi; ++p) {
            ens.paths()[p].init_counts = sample_initial_counts(m0, sim.particles, sim.seed, p);
            detail::simulate_chain_path(spec, policy, sim, p, ens.paths()[p]);
        }
    });
    return ens;
}

// ---------------------------------------------------------------------------
// Coupled particle systems X / Y / X~ (shared per-particle streams).
// ---------------------------------------------------------------------------
struct CoupledEnsemble {
    TrajectoryEnsemble x;       // feedback policy_N with live empirical measure
    TrajectoryEnsemble y;       // limit feedback with live empirical measure
    TrajectoryEnsemble xtilde;  // limit feedback with the deterministic flow
    // Per path, averaged over particles: fraction of time X_k != X~_k, and
    // fraction of particles that ever decoupled.
    std::vector<double> mismatch_time_fraction;
    std::vector<double> ever_mismatched;
};

namespace detail {

inline void simulate_coupled_path(const ProblemSpec& spec, const FeedbackPolicy& policy_n,
                                  const FeedbackPolicy& policy_limit, const FlowTrajectory& flow,
                                  const SimConfig& sim, std::uint64_t path_id,
                                  std::span<const double> m0, ChainPath& out_x, ChainPath& out_y,
                                  ChainPath& out_t, double& mismatch_frac, double& ever_frac) {
    const int d = spec.d;
    const int n = sim.particles;
    const double horizon = spec.horizon;
    const double bound = spec.rate_bound();

    // Shared i.i.d. initial states.
    std::vector<int> xs(static_cast<std::size_t>(n));
    std::vector<int> xc(static_cast<std::size_t>(d), 0);
    {
        RngStream init(sim.seed, path_id, kChainStream, /*purpose=*/1);
        for (int k = 0; k < n; ++k) {
            const int s = categorical(m0, init.uniform());
            xs[static_cast<std::size_t>(k)] = s;
            xc[static_cast<std::size_t>(s)] += 1;
        }
    }
    std::vector<int> ys = xs, ts = xs;
    std::vector<int> yc = xc, tc = xc;
    out_x.init_counts = xc;
    out_y.init_counts = xc;
    out_t.init_counts = xc;
    out_x.events.clear();
    out_y.events.clear();
    out_t.events.clear();

    mismatch_frac = 0;
    ever_frac = 0;
    if (bound <= 0 || horizon <= 0) return;

    // Per-particle candidate clocks at rate M d; target uniform over all d
    // states so the coupling decision does not depend on the current state.
    const double lam_p = bound * d;
    std::vector<RngStream> streams;
    streams.reserve(static_cast<std::size_t>(n));
    using HeapItem = std::pair<double, int>;
    std::priority_queue<HeapItem, std::vector<HeapItem>, std::greater<>> heap;
    for (int k = 0; k < n; ++k) {
        streams.emplace_back(sim.seed, path_id, static_cast<std::uint64_t>(k), /*purpose=*/2);
        heap.emplace(streams.back().exponential(lam_p), k);
    }

    std::vector<std::uint8_t> ever(static_cast<std::size_t>(n), 0);
    int diff_count = 0;  // #k with X_k != X~_k
    double mismatch_time = 0;
    double t_prev = 0;

    std::vector<double> mx(static_cast<std::size_t>(d)), my(static_cast<std::size_t>(d)),
        mt(static_cast<std::size_t>(d));
    std::vector<double> act(static_cast<std::size_t>(d));

    while (!heap.empty()) {
        auto [tau, k] = heap.top();
        heap.pop();
        if (tau > horizon) break;

        mismatch_time += (tau - t_prev) * diff_count;
        t_prev = tau;

        auto& stream = streams[static_cast<std::size_t>(k)];
        const int target = static_cast<int>(stream.below(static_cast<std::uint64_t>(d)));
        const double u = stream.uniform();
        heap.emplace(tau + stream.exponential(lam_p), k);

        auto attempt = [&](std::vector<int>& st, std::vector<int>& cnt, std::vector<double>& m,
                           const FeedbackPolicy& pol, bool flow_measure, ChainPath& log) {
            const int cur = st[static_cast<std::size_t>(k)];
            if (target == cur) return false;
            if (flow_measure)
                flow.state_interp(tau, m);
            else
                for (int q = 0; q < d; ++q)
                    m[static_cast<std::size_t>(q)] = static_cast<double>(cnt[static_cast<std::size_t>(q)]) / n;
            pol.action_into(tau, cur, m, act);
            const double rate = spec.rate(tau, cur, target, act, m);
            const double accept = rate / bound;
            if (accept > 1.0 + 1e-12)
                throw MajorantError("simulate_coupled_particles: rate above bound M");
            if (u >= accept) return false;
            cnt[static_cast<std::size_t>(cur)] -= 1;
            cnt[static_cast<std::size_t>(target)] += 1;
            st[static_cast<std::size_t>(k)] = target;
            log.events.push_back({tau, k, static_cast<std::int16_t>(cur),
                                  static_cast<std::int16_t>(target)});
            return true;
        };

        const bool was_diff = xs[static_cast<std::size_t>(k)] != ts[static_cast<std::size_t>(k)];
        attempt(xs, xc, mx, policy_n, false, out_x);
        attempt(ys, yc, my, policy_limit, false, out_y);
        attempt(ts, tc, mt, policy_limit, true, out_t);
        const bool is_diff = xs[static_cast<std::size_t>(k)] != ts[static_cast<std::size_t>(k)];
        if (was_diff != is_diff) diff_count += is_diff ? 1 : -1;
        if (is_diff) ever[static_cast<std::size_t>(k)] = 1;
    }
    mismatch_time += (horizon - t_prev) * diff_count;
    mismatch_frac = mismatch_time / (horizon * n);
    double e = 0;
    for (auto v : ever) e += v;
    ever_frac = e / n;
}

}  // namespace detail

inline CoupledEnsemble simulate_coupled_particles(const ProblemSpec& spec,
                                                  const FeedbackPolicy& policy_n,
                                                  const FeedbackPolicy& policy_limit,
                                                  const FlowTrajectory& flow, const SimConfig& sim,
                                                  std::span<const double> m0) {
    spec.validate();
    CoupledEnsemble ens{
        TrajectoryEnsemble(spec.d, sim.particles, spec.horizon, "X"),
        TrajectoryEnsemble(spec.d, sim.particles, spec.horizon, "Y"),
        TrajectoryEnsemble(spec.d, sim.particles, spec.horizon, "Xtilde"),
        {},
        {}};
    const auto paths = static_cast<std::size_t>(sim.paths);
    ens.x.paths().resize(paths);
    ens.y.paths().resize(paths);
    ens.xtilde.paths().resize(paths);
    ens.mismatch_time_fraction.assign(paths, 0.0);
    ens.ever_mismatched.assign(paths, 0.0);
    parallel_for(paths, sim.threads, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t p = lo; p < hi; ++p)
            detail::simulate_coupled_path(spec, policy_n, policy_limit, flow, sim, p, m0,
                                          ens.x.paths()[p], ens.y.paths()[p],
                                          ens.xtilde.paths()[p], ens.mismatch_time_fraction[p],
                                          ens.ever_mismatched[p]);
    });
    return ens;
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------
struct DistanceStats {
    double mean = 0;
    double stderr_mean = 0;
    int paths = 0;
};

inline DistanceStats summarize(std::span<const double> values) {
    DistanceStats s;
    s.paths = static_cast<int>(values.size());
    if (values.empty()) return s;
    double sum = 0;
    for (double v : values) sum += v;
    s.mean = sum / s.paths;
    double var = 0;
    for (double v : values) var += (v - s.mean) * (v - s.mean);
    if (s.paths > 1) s.stderr_mean = std::sqrt(var / (s.paths - 1) / s.paths);
    return s;
}

// Per-path sup_{t <= T} |mu^N_t - mu_t| over event times and flow knots; the
// flow is evaluated by linear interpolation between knots.
inline DistanceStats estimate_sup_distance(const TrajectoryEnsemble& ens,
                                           const FlowTrajectory& flow) {
    const int d = ens.dim();
    const int n = ens.particles();
    std::vector<double> sups(ens.paths().size(), 0.0);
    std::vector<double> flw(static_cast<std::size_t>(d));
    for (std::size_t p = 0; p < ens.paths().size(); ++p) {
        const auto& path = ens.paths()[p];
        std::vector<int> counts = path.init_counts;
        double sup = 0;
        auto dist_at = [&](double t) {
            flow.state_interp(t, flw);
            double s = 0;
            for (int q = 0; q < d; ++q) {
                const double dv = static_cast<double>(counts[static_cast<std::size_t>(q)]) / n -
                                  flw[static_cast<std::size_t>(q)];
                s += dv * dv;
            }
            return std::sqrt(s);
        };
        double t_prev = 0;
        auto scan_interval = [&](double a, double b) {
            // |mu^N - mu(t)| is piecewise convex between flow knots while mu^N
            // is frozen, so interval ends and interior knots suffice.
            sup = std::max(sup, dist_at(a));
            const int r0 = static_cast<int>(std::ceil(a / flow.horizon() * flow.knot_count() - 1e-12));
            const int r1 = static_cast<int>(std::floor(b / flow.horizon() * flow.knot_count() + 1e-12));
            for (int r = std::max(0, r0); r <= std::min(flow.knot_count(), r1); ++r)
                sup = std::max(sup, dist_at(flow.knot_time(r)));
            sup = std::max(sup, dist_at(b));
        };
        for (const auto& ev : path.events) {
            scan_interval(t_prev, ev.t);
            counts[static_cast<std::size_t>(ev.from)] -= 1;
            counts[static_cast<std::size_t>(ev.to)] += 1;
            t_prev = ev.t;
        }
        scan_interval(t_prev, ens.horizon());
        sups[p] = sup;
    }
    return summarize(sups);
}

// ---------------------------------------------------------------------------
// Multinomial sampling bound E|mu^N - m| <= sqrt(d) / (2 sqrt(N)).
// ---------------------------------------------------------------------------
struct MultinomialCheck {
    double mean = 0;
    double stderr_mean = 0;
    double bound = 0;
    bool pass = false;
};

inline MultinomialCheck multinomial_check(std::span<const double> m, int particles, int samples,
                                          std::uint64_t seed = 1) {
    if (samples < 1000) throw ArgumentError("multinomial_check: need >= 1000 samples");
    const int d = static_cast<int>(m.size());
    std::vector<double> dist(static_cast<std::size_t>(samples));
    for (int s = 0; s < samples; ++s) {
        const auto counts =
            sample_initial_counts(m, particles, seed, static_cast<std::uint64_t>(s));
        double v = 0;
        for (int q = 0; q < d; ++q) {
            const double dv =
                static_cast<double>(counts[static_cast<std::size_t>(q)]) / particles - m[static_cast<std::size_t>(q)];
            v += dv * dv;
        }
        dist[static_cast<std::size_t>(s)] = std::sqrt(v);
    }
    const auto stats = summarize(dist);
    MultinomialCheck chk;
    chk.mean = stats.mean;
    chk.stderr_mean = stats.stderr_mean;
    chk.bound = std::sqrt(static_cast<double>(d)) / (2.0 * std::sqrt(static_cast<double>(particles)));
    chk.pass = chk.mean <= chk.bound + 3.0 * chk.stderr_mean;
    return chk;
}

inline void export_events_csv(const TrajectoryEnsemble& ens, std::ostream& os, int stride = 1) {
    os << "path,t,particle,i,j\n";
    std::string line;
    for (std::size_t p = 0; p < ens.paths().size(); ++p) {
        const auto& events = ens.paths()[p].events;
        for (std::size_t q = 0; q < events.size(); q += static_cast<std::size_t>(std::max(1, stride))) {
            const auto& ev = events[q];
            line.clear();
            line += std::to_string(p) + ",";
            format_double(line, ev.t);
            line += "," + std::to_string(ev.particle) + "," + std::to_string(ev.from) + "," +
                    std::to_string(ev.to) + "\n";
            os << line;
        }
    }
}

}  // namespace mfc
