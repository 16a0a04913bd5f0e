#pragma once

// Backward solvers for the N-agent value functions.
//
//   solve_VN          dV/dt = sum_i m_i H^i(t, m, D^{N,i} V),  V(T,m) = G(m),
//                     one ODE per point of S_d^N (classical RK4 in time).
//   solve_full_state  the same control problem on the product space {0..d-1}^N;
//                     oracle-scale only, used to check v^N(t,x) = V^N(t, mu^N_x).
//   solve_fixed_control  the linear cost ODE for a prescribed open-loop control
//                     (the max replaced by that control's pre-Hamiltonian).
//
// Fields store snapshots on a uniform report-knot grid; integration between
// knots uses as many RK4 substeps as the stability bound requires, so knot
// times are hit exactly.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mfc/errors.hpp"
#include "mfc/model.hpp"
#include "mfc/parallel.hpp"
#include "mfc/simplex_grid.hpp"

namespace mfc {

struct SolveOptions {
    double dt = 0.0;            // internal step; 0 = auto T / ceil(4 T N M d)
    int report_knots = 0;       // stored layers; 0 = auto (internal steps, capped)
    int threads = 1;
    std::size_t value_budget = 40'000'000;  // max stored doubles across knots
};

namespace detail {

inline int auto_internal_steps(double horizon, int n, double rate_bound, int d, double dt) {
    if (dt > 0) return std::max(1, static_cast<int>(std::ceil(horizon / dt)));
    const double scale = 4.0 * horizon * std::max(1.0, static_cast<double>(n) * rate_bound) * d;
    return std::max(1, static_cast<int>(std::ceil(scale)));
}

inline int auto_report_knots(int internal_steps, std::size_t points, const SolveOptions& opts) {
    if (opts.report_knots > 0) return opts.report_knots;
    const std::size_t by_budget = opts.value_budget / std::max<std::size_t>(1, points);
    const int cap = static_cast<int>(std::min<std::size_t>(by_budget > 1 ? by_budget - 1 : 1, 4096));
    return std::max(1, std::min(internal_steps, cap));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ValueField: V over report knots x grid points. Knot r sits at t = T r / R.
// ---------------------------------------------------------------------------
class ValueField {
public:
    ValueField(std::shared_ptr<const SimplexGrid> grid, double horizon, int knots)
        : grid_(std::move(grid)), horizon_(horizon), knots_(knots),
          values_(static_cast<std::size_t>(knots + 1) * grid_->size(), 0.0) {}

    const SimplexGrid& grid() const { return *grid_; }
    std::shared_ptr<const SimplexGrid> grid_ptr() const { return grid_; }
    double horizon() const { return horizon_; }
    int knot_count() const { return knots_; }
    double knot_time(int r) const { return horizon_ * r / knots_; }
    double knot_dt() const { return horizon_ / knots_; }

    int left_knot(double t) const {
        if (t <= 0) return 0;
        if (t >= horizon_) return knots_;
        // fudge absorbs the rounding of knot_time(r) / horizon * knots != r
        return static_cast<int>(std::floor(t / horizon_ * knots_ + 1e-9));
    }

    std::span<double> layer(int r) {
        return {values_.data() + static_cast<std::size_t>(r) * grid_->size(), grid_->size()};
    }
    std::span<const double> layer(int r) const {
        return {values_.data() + static_cast<std::size_t>(r) * grid_->size(), grid_->size()};
    }
    double value(int r, std::size_t idx) const {
        return values_[static_cast<std::size_t>(r) * grid_->size() + idx];
    }

private:
    std::shared_ptr<const SimplexGrid> grid_;
    double horizon_;
    int knots_;
    std::vector<double> values_;
};

namespace detail {

// Per-point Hamiltonian sum: rhs(p) = sum_i m_i H^i(t, m, D^{N,i}v).
// `fixed_rates`, when nonnull, replaces the max by the given control's
// pre-Hamiltonian; layout d*d row-major, row i = rates out of state i.
struct HjbRhs {
    const ProblemSpec* spec;
    const SimplexGrid* grid;
    std::vector<double> f0_tab;   // d * n, f0^i(m_p); time-independent presets
    std::vector<double> fs_cost;  // finite set: 1/2 sum a_j^2 per (i, action)
    bool closed_form;
    double bound = 0;

    HjbRhs(const ProblemSpec& s, const SimplexGrid& g) : spec(&s), grid(&g) {
        const std::size_t n = g.size();
        const int d = s.d;
        f0_tab.resize(static_cast<std::size_t>(d) * n);
        for (std::size_t p = 0; p < n; ++p) {
            const auto m = g.coords(p);
            for (int i = 0; i < d; ++i)
                f0_tab[static_cast<std::size_t>(i) * n + p] = s.f0[static_cast<std::size_t>(i)].eval(m);
        }
        closed_form = s.quadratic_closed_form();
        if (closed_form) {
            bound = std::get<RateBox>(s.actions).bound;
        } else {
            const auto& set = std::get<FiniteActionSet>(s.actions);
            fs_cost.resize(static_cast<std::size_t>(d) * set.actions.size());
            for (int i = 0; i < d; ++i)
                for (std::size_t a = 0; a < set.actions.size(); ++a) {
                    double c = 0;
                    for (int j = 0; j < d; ++j)
                        if (s.edge(i, j)) {
                            const double v = set.actions[a][static_cast<std::size_t>(j)];
                            c += v * v;
                        }
                    fs_cost[static_cast<std::size_t>(i) * set.actions.size() + a] = 0.5 * c;
                }
        }
    }

    // out = rhs(t, v); parallel over grid points.
    void operator()(double t, std::span<const double> v, std::span<double> out,
                    const double* fixed_rates, int threads) const {
        const std::size_t n = grid->size();
        const int d = spec->d;
        const double scale = grid->resolution();
        parallel_for(n, threads, [&](std::size_t lo, std::size_t hi) {
            std::vector<double> z(static_cast<std::size_t>(d));
            for (std::size_t p = lo; p < hi; ++p) {
                const auto m = grid->coords(p);
                const double base = v[p];
                double acc = 0;
                for (int i = 0; i < d; ++i) {
                    const double mi = m[static_cast<std::size_t>(i)];
                    if (mi == 0.0) continue;  // term vanishes; neighbors may not exist
                    double hi_val;
                    if (fixed_rates) {
                        double tr = 0, cost = 0;
                        for (int j = 0; j < d; ++j) {
                            if (j == i || !spec->edge(i, j)) continue;
                            const std::int64_t nb = grid->neighbor_index(p, i, j);
                            const double zj = scale * (v[static_cast<std::size_t>(nb)] - base);
                            const double aj = fixed_rates[i * d + j];
                            tr += aj * zj;
                            cost += aj * aj;
                        }
                        hi_val = -tr - 0.5 * cost - f0_tab[static_cast<std::size_t>(i) * n + p];
                    } else if (closed_form) {
                        double h = 0;
                        for (int j = 0; j < d; ++j) {
                            if (j == i || !spec->edge(i, j)) continue;
                            const std::int64_t nb = grid->neighbor_index(p, i, j);
                            const double zj = scale * (v[static_cast<std::size_t>(nb)] - base);
                            const double aj = std::clamp(-zj, 0.0, bound);
                            h += -aj * zj - 0.5 * aj * aj;
                        }
                        hi_val = h - f0_tab[static_cast<std::size_t>(i) * n + p];
                    } else {
                        for (int j = 0; j < d; ++j) {
                            if (j == i) { z[static_cast<std::size_t>(j)] = 0; continue; }
                            const std::int64_t nb = grid->neighbor_index(p, i, j);
                            z[static_cast<std::size_t>(j)] =
                                nb < 0 ? 0.0 : scale * (v[static_cast<std::size_t>(nb)] - base);
                        }
                        const auto& set = std::get<FiniteActionSet>(spec->actions);
                        double best = -std::numeric_limits<double>::infinity();
                        for (std::size_t a = 0; a < set.actions.size(); ++a) {
                            double tr = 0;
                            for (int j = 0; j < d; ++j)
                                if (j != i && spec->edge(i, j))
                                    tr += set.actions[a][static_cast<std::size_t>(j)] * z[static_cast<std::size_t>(j)];
                            const double val = -tr - fs_cost[static_cast<std::size_t>(i) * set.actions.size() + a];
                            if (val > best) best = val;
                        }
                        hi_val = best - f0_tab[static_cast<std::size_t>(i) * n + p];
                    }
                    acc += mi * hi_val;
                }
                out[p] = acc;
            }
        });
    }
};

// Provides the fixed control's rate matrix at time t, or nullptr for the max.
using RateProvider = std::function<const double*(double t)>;

inline void check_finite_layer(std::span<const double> v, const SimplexGrid& grid, double t) {
    for (std::size_t p = 0; p < v.size(); ++p) {
        if (!std::isfinite(v[p])) {
            std::string pt;
            for (int q = 0; q < grid.dim(); ++q)
                pt += (q ? "," : "") + std::to_string(grid.counts(p)[static_cast<std::size_t>(q)]);
            throw DivergenceError("solve: non-finite value at t=" + std::to_string(t) +
                                  ", m=(" + pt + ")/N");
        }
    }
}

inline ValueField integrate_backward(const ProblemSpec& spec,
                                     std::shared_ptr<const SimplexGrid> grid,
                                     const SolveOptions& opts, const RateProvider& rates) {
    const std::size_t n = grid->size();
    const int internal =
        auto_internal_steps(spec.horizon, grid->resolution(), spec.rate_bound(), spec.d, opts.dt);
    const int knots = auto_report_knots(internal, n, opts);
    const int sub = std::max(1, (internal + knots - 1) / knots);
    const double h = spec.horizon / knots / sub;

    ValueField field(grid, spec.horizon, knots);
    {
        auto terminal = field.layer(knots);
        for (std::size_t p = 0; p < n; ++p) terminal[p] = aggregate_G(spec, grid->coords(p));
    }

    HjbRhs rhs(spec, *grid);
    std::vector<double> y(field.layer(knots).begin(), field.layer(knots).end());
    std::vector<double> ytmp(n), ks(n), kacc(n);
    const int threads = std::max(1, opts.threads);

    for (int r = knots; r-- > 0;) {
        for (int s = 0; s < sub; ++s) {
            const double t1 = field.knot_time(r + 1) - s * h;  // step from t1 to t1-h
            const double* a1 = rates ? rates(t1) : nullptr;
            const double* amid = rates ? rates(t1 - 0.5 * h) : nullptr;
            const double* a0 = rates ? rates(t1 - h) : nullptr;

            rhs(t1, y, kacc, a1, threads);
            parallel_for(n, threads, [&](std::size_t lo, std::size_t hi2) {
                for (std::size_t p = lo; p < hi2; ++p) ytmp[p] = y[p] - 0.5 * h * kacc[p];
            });
            rhs(t1 - 0.5 * h, ytmp, ks, amid, threads);
            parallel_for(n, threads, [&](std::size_t lo, std::size_t hi2) {
                for (std::size_t p = lo; p < hi2; ++p) {
                    kacc[p] += 2.0 * ks[p];
                    ytmp[p] = y[p] - 0.5 * h * ks[p];
                }
            });
            rhs(t1 - 0.5 * h, ytmp, ks, amid, threads);
            parallel_for(n, threads, [&](std::size_t lo, std::size_t hi2) {
                for (std::size_t p = lo; p < hi2; ++p) {
                    kacc[p] += 2.0 * ks[p];
                    ytmp[p] = y[p] - h * ks[p];
                }
            });
            rhs(t1 - h, ytmp, ks, a0, threads);
            parallel_for(n, threads, [&](std::size_t lo, std::size_t hi2) {
                for (std::size_t p = lo; p < hi2; ++p)
                    y[p] -= h / 6.0 * (kacc[p] + ks[p]);
            });
        }
        auto out = field.layer(r);
        std::copy(y.begin(), y.end(), out.begin());
        check_finite_layer(out, *grid, field.knot_time(r));
    }
    return field;
}

}  // namespace detail

inline ValueField solve_VN(const ProblemSpec& spec, int n, SolveOptions opts = {}) {
    spec.validate();
    auto grid = enumerate_grid(spec.d, n);
    return detail::integrate_backward(spec, grid, opts, nullptr);
}

inline ValueField solve_VN_on(const ProblemSpec& spec, std::shared_ptr<const SimplexGrid> grid,
                              SolveOptions opts = {}) {
    spec.validate();
    return detail::integrate_backward(spec, std::move(grid), opts, nullptr);
}

// ---------------------------------------------------------------------------
// Open-loop control: rate matrix rows per state on a uniform time table.
// ---------------------------------------------------------------------------
class OpenLoopControl {
public:
    OpenLoopControl(int d, double horizon, int knots)
        : d_(d), horizon_(horizon), knots_(knots),
          rates_(static_cast<std::size_t>(knots + 1) * d * d, 0.0) {}

    int dim() const { return d_; }
    double horizon() const { return horizon_; }
    int knot_count() const { return knots_; }
    double knot_time(int r) const { return horizon_ * r / knots_; }

    std::span<double> matrix_at(int r) {
        return {rates_.data() + static_cast<std::size_t>(r) * d_ * d_,
                static_cast<std::size_t>(d_) * d_};
    }
    std::span<const double> matrix_at(int r) const {
        return {rates_.data() + static_cast<std::size_t>(r) * d_ * d_,
                static_cast<std::size_t>(d_) * d_};
    }
    // Piecewise-constant from the left knot.
    const double* matrix(double t) const {
        int r = t <= 0 ? 0
                       : (t >= horizon_ ? knots_
                                        : static_cast<int>(std::floor(t / horizon_ * knots_ + 1e-9)));
        return rates_.data() + static_cast<std::size_t>(r) * d_ * d_;
    }

private:
    int d_;
    double horizon_;
    int knots_;
    std::vector<double> rates_;
};

// Cost of a prescribed open-loop control on the N-grid: the linear backward
// ODE with the max replaced by the control's pre-Hamiltonian.
inline ValueField solve_fixed_control(const ProblemSpec& spec, int n,
                                      const OpenLoopControl& control, SolveOptions opts = {}) {
    spec.validate();
    if (control.dim() != spec.d) throw ArgumentError("solve_fixed_control: dimension mismatch");
    auto grid = enumerate_grid(spec.d, n);
    detail::RateProvider provider = [&control](double t) { return control.matrix(t); };
    return detail::integrate_backward(spec, grid, opts, provider);
}

// ---------------------------------------------------------------------------
// Full-state solver on {0..d-1}^N (oracle scale).
// ---------------------------------------------------------------------------
class FullStateField {
public:
    FullStateField(int d, int n, double horizon, int knots)
        : d_(d), n_(n), horizon_(horizon), knots_(knots) {
        std::size_t count = 1;
        for (int k = 0; k < n; ++k) {
            count *= static_cast<std::size_t>(d);
            if (count > kProfileCap) throw SizingError("FullStateField: d^N exceeds cap 1e5");
        }
        profiles_ = count;
        values_.assign(static_cast<std::size_t>(knots + 1) * profiles_, 0.0);
    }

    static constexpr std::size_t kProfileCap = 100'000;

    int dim() const { return d_; }
    int particles() const { return n_; }
    std::size_t profile_count() const { return profiles_; }
    double horizon() const { return horizon_; }
    int knot_count() const { return knots_; }
    double knot_time(int r) const { return horizon_ * r / knots_; }

    // Profile encoding: digit k (base d) is the state of particle k.
    std::vector<int> decode(std::size_t idx) const {
        std::vector<int> x(static_cast<std::size_t>(n_));
        for (int k = 0; k < n_; ++k) {
            x[static_cast<std::size_t>(k)] = static_cast<int>(idx % d_);
            idx /= static_cast<std::size_t>(d_);
        }
        return x;
    }
    std::size_t encode(std::span<const int> x) const {
        std::size_t idx = 0;
        for (int k = n_; k-- > 0;) idx = idx * static_cast<std::size_t>(d_) + static_cast<std::size_t>(x[static_cast<std::size_t>(k)]);
        return idx;
    }

    std::span<double> layer(int r) {
        return {values_.data() + static_cast<std::size_t>(r) * profiles_, profiles_};
    }
    std::span<const double> layer(int r) const {
        return {values_.data() + static_cast<std::size_t>(r) * profiles_, profiles_};
    }
    double value(int r, std::size_t idx) const {
        return values_[static_cast<std::size_t>(r) * profiles_ + idx];
    }

private:
    int d_;
    int n_;
    double horizon_;
    int knots_;
    std::size_t profiles_ = 0;
    std::vector<double> values_;
};

inline FullStateField solve_full_state(const ProblemSpec& spec, int n, SolveOptions opts = {}) {
    spec.validate();
    const int d = spec.d;
    const int internal =
        detail::auto_internal_steps(spec.horizon, n, spec.rate_bound(), d, opts.dt);
    FullStateField trial(d, n, spec.horizon, 1);  // sizes the profile space / cap check
    const std::size_t profiles = trial.profile_count();
    const int knots = detail::auto_report_knots(internal, profiles, opts);
    const int sub = std::max(1, (internal + knots - 1) / knots);
    const double h = spec.horizon / knots / sub;

    FullStateField field(d, n, spec.horizon, knots);

    // Precompute per profile: digits, empirical coords, f0 and g at mu^N_x,
    // and the flip index (particle k -> state j).
    std::vector<std::int8_t> digits(profiles * static_cast<std::size_t>(n));
    std::vector<double> emp(profiles * static_cast<std::size_t>(d));
    std::vector<std::uint32_t> flip(profiles * static_cast<std::size_t>(n) * d);
    std::vector<double> f0_tab(profiles * static_cast<std::size_t>(d));
    std::vector<std::size_t> pow(static_cast<std::size_t>(n));
    {
        std::size_t pw = 1;
        for (int k = 0; k < n; ++k, pw *= static_cast<std::size_t>(d)) pow[static_cast<std::size_t>(k)] = pw;
    }
    for (std::size_t p = 0; p < profiles; ++p) {
        std::size_t rem = p;
        std::vector<int> cnt(static_cast<std::size_t>(d), 0);
        for (int k = 0; k < n; ++k) {
            const int s = static_cast<int>(rem % static_cast<std::size_t>(d));
            rem /= static_cast<std::size_t>(d);
            digits[p * n + k] = static_cast<std::int8_t>(s);
            cnt[static_cast<std::size_t>(s)] += 1;
            for (int j = 0; j < d; ++j)
                flip[(p * n + k) * d + j] =
                    static_cast<std::uint32_t>(p + (j - s) * static_cast<std::int64_t>(pow[static_cast<std::size_t>(k)]));
        }
        for (int i = 0; i < d; ++i)
            emp[p * d + i] = static_cast<double>(cnt[static_cast<std::size_t>(i)]) / n;
        const std::span<const double> mspan{emp.data() + p * d, static_cast<std::size_t>(d)};
        for (int i = 0; i < d; ++i)
            f0_tab[p * d + i] = spec.f0[static_cast<std::size_t>(i)].eval(mspan);
    }

    {
        auto terminal = field.layer(knots);
        for (std::size_t p = 0; p < profiles; ++p) {
            const std::span<const double> mspan{emp.data() + p * d, static_cast<std::size_t>(d)};
            double s = 0;
            for (int k = 0; k < n; ++k) s += spec.terminal_cost(digits[p * n + k], mspan);
            terminal[p] = s / n;
        }
    }

    const bool closed = spec.quadratic_closed_form();
    const double bound = closed ? std::get<RateBox>(spec.actions).bound : 0.0;
    const auto* fs = closed ? nullptr : &std::get<FiniteActionSet>(spec.actions);

    auto rhs = [&](double t, std::span<const double> v, std::span<double> out) {
        parallel_for(profiles, std::max(1, opts.threads), [&](std::size_t lo, std::size_t hi) {
            std::vector<double> z(static_cast<std::size_t>(d));
            for (std::size_t p = lo; p < hi; ++p) {
                const std::span<const double> mspan{emp.data() + p * d, static_cast<std::size_t>(d)};
                const double base = v[p];
                double acc = 0;
                for (int k = 0; k < n; ++k) {
                    const int i = digits[p * n + k];
                    double hval;
                    if (closed) {
                        double hsum = 0;
                        for (int j = 0; j < d; ++j) {
                            if (j == i || !spec.edge(i, j)) continue;
                            const double zj = n * (v[flip[(p * n + k) * d + j]] - base);
                            const double aj = std::clamp(-zj, 0.0, bound);
                            hsum += -aj * zj - 0.5 * aj * aj;
                        }
                        hval = hsum - f0_tab[p * d + i];
                    } else {
                        for (int j = 0; j < d; ++j)
                            z[static_cast<std::size_t>(j)] =
                                j == i ? 0.0 : n * (v[flip[(p * n + k) * d + j]] - base);
                        double best = -std::numeric_limits<double>::infinity();
                        for (const auto& a : fs->actions) {
                            double tr = 0, cost = 0;
                            for (int j = 0; j < d; ++j) {
                                if (j == i || !spec.edge(i, j)) continue;
                                tr += a[static_cast<std::size_t>(j)] * z[static_cast<std::size_t>(j)];
                                cost += a[static_cast<std::size_t>(j)] * a[static_cast<std::size_t>(j)];
                            }
                            best = std::max(best, -tr - 0.5 * cost);
                        }
                        hval = best - f0_tab[p * d + i];
                    }
                    acc += hval;
                }
                out[p] = acc / n;
                (void)t;
            }
        });
    };

    std::vector<double> y(field.layer(knots).begin(), field.layer(knots).end());
    std::vector<double> ytmp(profiles), ks(profiles), kacc(profiles);
    for (int r = knots; r-- > 0;) {
        for (int s = 0; s < sub; ++s) {
            const double t1 = field.knot_time(r + 1) - s * h;
            rhs(t1, y, kacc);
            for (std::size_t p = 0; p < profiles; ++p) ytmp[p] = y[p] - 0.5 * h * kacc[p];
            rhs(t1 - 0.5 * h, ytmp, ks);
            for (std::size_t p = 0; p < profiles; ++p) {
                kacc[p] += 2.0 * ks[p];
                ytmp[p] = y[p] - 0.5 * h * ks[p];
            }
            rhs(t1 - 0.5 * h, ytmp, ks);
            for (std::size_t p = 0; p < profiles; ++p) {
                kacc[p] += 2.0 * ks[p];
                ytmp[p] = y[p] - h * ks[p];
            }
            rhs(t1 - h, ytmp, ks);
            for (std::size_t p = 0; p < profiles; ++p) y[p] -= h / 6.0 * (kacc[p] + ks[p]);
        }
        auto out = field.layer(r);
        std::copy(y.begin(), y.end(), out.begin());
        for (std::size_t p = 0; p < profiles; ++p)
            if (!std::isfinite(out[p]))
                throw DivergenceError("solve_full_state: non-finite value at t=" +
                                      std::to_string(field.knot_time(r)));
    }
    return field;
}

// ---------------------------------------------------------------------------
// Feedback policies
// ---------------------------------------------------------------------------
class FeedbackPolicy {
public:
    virtual ~FeedbackPolicy() = default;
    // Write the action (rate row) for state i at (t, m) into out (length d).
    virtual void action_into(double t, int i, std::span<const double> m,
                             std::span<double> out) const = 0;

    std::vector<double> action(double t, int i, std::span<const double> m) const {
        std::vector<double> out(m.size(), 0.0);
        action_into(t, i, m, out);
        return out;
    }
};

class ZeroPolicy final : public FeedbackPolicy {
public:
    void action_into(double, int, std::span<const double>, std::span<double> out) const override {
        std::fill(out.begin(), out.end(), 0.0);
    }
};

class FunctionPolicy final : public FeedbackPolicy {
public:
    using Fn = std::function<void(double, int, std::span<const double>, std::span<double>)>;
    explicit FunctionPolicy(Fn fn) : fn_(std::move(fn)) {}
    void action_into(double t, int i, std::span<const double> m,
                     std::span<double> out) const override {
        fn_(t, i, m, out);
    }

private:
    Fn fn_;
};

class OpenLoopPolicy final : public FeedbackPolicy {
public:
    explicit OpenLoopPolicy(OpenLoopControl control) : control_(std::move(control)) {}
    void action_into(double t, int i, std::span<const double>,
                     std::span<double> out) const override {
        const double* mat = control_.matrix(t);
        const int d = control_.dim();
        for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] = mat[i * d + j];
    }
    const OpenLoopControl& control() const { return control_; }

private:
    OpenLoopControl control_;
};

// alpha_N(t, i, m) = a*(t, i, m, D^{N,i} V^N(t_knot, m)): the optimal feedback
// read off a solved field, piecewise constant from the left knot in time.
class GridFieldPolicy final : public FeedbackPolicy {
public:
    GridFieldPolicy(ProblemSpec spec, std::shared_ptr<const ValueField> field)
        : spec_(std::move(spec)), field_(std::move(field)) {}

    void action_into(double t, int i, std::span<const double> m,
                     std::span<double> out) const override {
        const auto& grid = field_->grid();
        const std::size_t idx = grid.nearest_index(m);
        action_at_index(t, i, idx, out);
    }

    void action_at_index(double t, int i, std::size_t idx, std::span<double> out) const {
        const auto& grid = field_->grid();
        const int r = field_->left_knot(t);
        const auto layer = field_->layer(r);
        std::vector<double> z(static_cast<std::size_t>(spec_.d));
        discrete_derivative_into(grid, layer, idx, i, z);
        hamiltonian_value(spec_, field_->knot_time(r), i, grid.coords(idx), z, out.data());
    }

    const ValueField& field() const { return *field_; }
    const ProblemSpec& spec() const { return spec_; }

private:
    ProblemSpec spec_;
    std::shared_ptr<const ValueField> field_;
};

inline GridFieldPolicy extract_feedback(const ProblemSpec& spec,
                                        std::shared_ptr<const ValueField> field) {
    return GridFieldPolicy(spec, std::move(field));
}

// ---------------------------------------------------------------------------
// Diagnostics and IO
// ---------------------------------------------------------------------------
struct LipschitzReport {
    double space = 0.0;  // max |dV| / |dm| over neighbor pairs
    double time = 0.0;   // max |dV| / dt over consecutive knots
};

inline LipschitzReport measure_lipschitz(const ValueField& field) {
    const auto& grid = field.grid();
    const int d = grid.dim();
    const double move = std::sqrt(2.0) / grid.resolution();
    LipschitzReport rep;
    for (int r = 0; r <= field.knot_count(); ++r) {
        const auto layer = field.layer(r);
        for (std::size_t p = 0; p < grid.size(); ++p)
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) {
                    if (i == j) continue;
                    const std::int64_t nb = grid.neighbor_index(p, i, j);
                    if (nb < 0) continue;
                    rep.space = std::max(
                        rep.space, std::abs(layer[static_cast<std::size_t>(nb)] - layer[p]) / move);
                }
        if (r < field.knot_count()) {
            const auto next = field.layer(r + 1);
            for (std::size_t p = 0; p < grid.size(); ++p)
                rep.time = std::max(rep.time, std::abs(next[p] - layer[p]) / field.knot_dt());
        }
    }
    return rep;
}

inline void format_double(std::string& out, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out += buf;
}

inline void export_csv(const ValueField& field, std::ostream& os) {
    const auto& grid = field.grid();
    std::string line = "t,index";
    for (int i = 1; i <= grid.dim(); ++i) line += ",k_" + std::to_string(i);
    line += ",value\n";
    os << line;
    for (int r = 0; r <= field.knot_count(); ++r) {
        const auto layer = field.layer(r);
        for (std::size_t p = 0; p < grid.size(); ++p) {
            line.clear();
            format_double(line, field.knot_time(r));
            line += "," + std::to_string(p);
            const auto k = grid.counts(p);
            for (int i = 0; i < grid.dim(); ++i) line += "," + std::to_string(k[static_cast<std::size_t>(i)]);
            line += ",";
            format_double(line, layer[p]);
            line += "\n";
            os << line;
        }
    }
}

// Binary cache: versioned header + raw layers; reused across subcommands.
inline void save_cache(const ValueField& field, const std::string& path,
                       std::uint64_t spec_hash) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("save_cache: cannot open " + path);
    const char magic[4] = {'M', 'F', 'C', 'F'};
    os.write(magic, 4);
    auto put_u32 = [&os](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
    auto put_u64 = [&os](std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); };
    put_u32(1);  // format version
    put_u32(static_cast<std::uint32_t>(field.grid().dim()));
    put_u32(static_cast<std::uint32_t>(field.grid().resolution()));
    put_u32(static_cast<std::uint32_t>(field.knot_count()));
    const double horizon = field.horizon();
    os.write(reinterpret_cast<const char*>(&horizon), 8);
    put_u64(spec_hash);
    put_u64(field.grid().size());
    for (int r = 0; r <= field.knot_count(); ++r) {
        const auto layer = field.layer(r);
        os.write(reinterpret_cast<const char*>(layer.data()),
                 static_cast<std::streamsize>(layer.size() * sizeof(double)));
    }
    if (!os) throw Error("save_cache: write failed for " + path);
}

inline ValueField load_cache(const std::string& path, std::uint64_t expect_spec_hash = 0) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("load_cache: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || magic[0] != 'M' || magic[1] != 'F' || magic[2] != 'C' || magic[3] != 'F')
        throw Error("load_cache: bad magic in " + path);
    auto get_u32 = [&is] {
        std::uint32_t v = 0;
        is.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    auto get_u64 = [&is] {
        std::uint64_t v = 0;
        is.read(reinterpret_cast<char*>(&v), 8);
        return v;
    };
    const std::uint32_t version = get_u32();
    if (version != 1) throw Error("load_cache: unsupported version");
    const int d = static_cast<int>(get_u32());
    const int n = static_cast<int>(get_u32());
    const int knots = static_cast<int>(get_u32());
    double horizon = 0;
    is.read(reinterpret_cast<char*>(&horizon), 8);
    const std::uint64_t spec_hash = get_u64();
    if (expect_spec_hash != 0 && spec_hash != expect_spec_hash)
        throw Error("load_cache: spec hash mismatch in " + path);
    const std::uint64_t count = get_u64();
    auto grid = enumerate_grid(d, n);
    if (grid->size() != count) throw Error("load_cache: grid size mismatch");
    ValueField field(grid, horizon, knots);
    for (int r = 0; r <= knots; ++r) {
        auto layer = field.layer(r);
        is.read(reinterpret_cast<char*>(layer.data()),
                static_cast<std::streamsize>(layer.size() * sizeof(double)));
    }
    if (!is) throw Error("load_cache: truncated file " + path);
    return field;
}

}  // namespace mfc
