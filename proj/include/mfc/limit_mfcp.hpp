#pragma once

// The limiting mean field control problem: forward Fokker-Planck integration
//   d mu^i/dt = sum_j ( mu^j Q_{j,i}(t, a^j, mu) - mu^i Q_{i,j}(t, a^i, mu) ),
// the cost functional J, a fine-grid reference for the limit value function V
// (the N-agent field at a large resolution, evaluated by nearest grid point),
// and the optimal feedback alpha_*(t,i,m) = a*(t, i, m, D^i V(t,m)).

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mfc/errors.hpp"
#include "mfc/hjb_solver.hpp"
#include "mfc/model.hpp"
#include "mfc/simplex_grid.hpp"

namespace mfc {

struct FlowOptions {
    double dt = 0.0;   // internal step; 0 = auto, at most 1/(4 M d)
    int knots = 0;     // stored knots; 0 = auto
};

// ---------------------------------------------------------------------------
// FlowTrajectory: knot-sampled (mu_t, alpha(t)) pairs on a uniform time grid.
// ---------------------------------------------------------------------------
class FlowTrajectory {
public:
    FlowTrajectory(int d, double horizon, int knots)
        : d_(d), horizon_(horizon), knots_(knots),
          states_(static_cast<std::size_t>(knots + 1) * d, 0.0),
          controls_(static_cast<std::size_t>(knots + 1) * d * d, 0.0) {}

    int dim() const { return d_; }
    double horizon() const { return horizon_; }
    int knot_count() const { return knots_; }
    double knot_time(int r) const { return horizon_ * r / knots_; }
    double knot_dt() const { return horizon_ / knots_; }

    std::span<double> state_at(int r) {
        return {states_.data() + static_cast<std::size_t>(r) * d_, static_cast<std::size_t>(d_)};
    }
    std::span<const double> state_at(int r) const {
        return {states_.data() + static_cast<std::size_t>(r) * d_, static_cast<std::size_t>(d_)};
    }
    std::span<double> control_at(int r) {
        return {controls_.data() + static_cast<std::size_t>(r) * d_ * d_,
                static_cast<std::size_t>(d_) * d_};
    }
    std::span<const double> control_at(int r) const {
        return {controls_.data() + static_cast<std::size_t>(r) * d_ * d_,
                static_cast<std::size_t>(d_) * d_};
    }

    // Linear interpolation between knots (the flow is Lipschitz).
    void state_interp(double t, std::span<double> out) const {
        if (t <= 0) {
            const auto s = state_at(0);
            std::copy(s.begin(), s.end(), out.begin());
            return;
        }
        if (t >= horizon_) {
            const auto s = state_at(knots_);
            std::copy(s.begin(), s.end(), out.begin());
            return;
        }
        const double pos = t / horizon_ * knots_;
        const int r = std::min(knots_ - 1, static_cast<int>(pos));
        const double w = pos - r;
        const auto a = state_at(r);
        const auto b = state_at(r + 1);
        for (int i = 0; i < d_; ++i)
            out[static_cast<std::size_t>(i)] =
                (1.0 - w) * a[static_cast<std::size_t>(i)] + w * b[static_cast<std::size_t>(i)];
    }
    std::vector<double> state_interp(double t) const {
        std::vector<double> out(static_cast<std::size_t>(d_));
        state_interp(t, out);
        return out;
    }

    double min_mass() const {
        double v = 1.0;
        for (double s : states_) v = std::min(v, s);
        return v;
    }

private:
    int d_;
    double horizon_;
    int knots_;
    std::vector<double> states_;
    std::vector<double> controls_;
};

namespace detail {

inline void fp_rhs(const ProblemSpec& spec, const FeedbackPolicy& policy, double t,
                   std::span<const double> mu, std::span<double> out,
                   std::vector<double>& rate_rows) {
    const int d = spec.d;
    // rate_rows: d*d scratch, row i = policy action for state i
    for (int i = 0; i < d; ++i)
        policy.action_into(t, i, mu, {rate_rows.data() + static_cast<std::size_t>(i) * d,
                                      static_cast<std::size_t>(d)});
    for (int i = 0; i < d; ++i) {
        double s = 0;
        const std::span<const double> row_i{rate_rows.data() + static_cast<std::size_t>(i) * d,
                                            static_cast<std::size_t>(d)};
        for (int j = 0; j < d; ++j) {
            if (j == i) continue;
            const std::span<const double> row_j{rate_rows.data() + static_cast<std::size_t>(j) * d,
                                                static_cast<std::size_t>(d)};
            s += mu[static_cast<std::size_t>(j)] * spec.rate(t, j, i, row_j, mu);
            s -= mu[static_cast<std::size_t>(i)] * spec.rate(t, i, j, row_i, mu);
        }
        out[static_cast<std::size_t>(i)] = s;
    }
}

}  // namespace detail

inline FlowTrajectory solve_fokker_planck(const ProblemSpec& spec, const FeedbackPolicy& policy,
                                          std::span<const double> m0, FlowOptions opts = {}) {
    spec.validate();
    const int d = spec.d;
    if (static_cast<int>(m0.size()) != d) throw ArgumentError("solve_fokker_planck: bad m0 size");
    double mass = 0;
    bool interior = true;
    for (double v : m0) {
        if (v < 0) throw DomainError("solve_fokker_planck: m0 outside the simplex");
        interior = interior && v > 0;
        mass += v;
    }
    if (std::abs(mass - 1.0) > 1e-9) throw DomainError("solve_fokker_planck: m0 mass != 1");

    const double rate_bound = spec.rate_bound();
    const double stab = 4.0 * std::max(1.0, rate_bound * d);
    int internal = std::max(1, static_cast<int>(std::ceil(spec.horizon * stab)));
    if (opts.dt > 0) internal = std::max(1, static_cast<int>(std::ceil(spec.horizon / opts.dt)));
    const int knots = opts.knots > 0 ? opts.knots : std::max(internal, 256);
    const int sub = std::max(1, (internal + knots - 1) / knots);
    const double h = spec.horizon / knots / sub;

    FlowTrajectory flow(d, spec.horizon, knots);
    std::vector<double> mu(m0.begin(), m0.end());
    std::vector<double> k1(d), k2(d), k3(d), k4(d), tmp(d);
    std::vector<double> rows(static_cast<std::size_t>(d) * d);

    auto record = [&](int r) {
        auto st = flow.state_at(r);
        std::copy(mu.begin(), mu.end(), st.begin());
        auto ct = flow.control_at(r);
        const double t = flow.knot_time(r);
        for (int i = 0; i < d; ++i)
            policy.action_into(t, i, mu, {ct.data() + static_cast<std::size_t>(i) * d,
                                          static_cast<std::size_t>(d)});
        double s = 0;
        for (double v : mu) s += v;
        // inverted comparisons so NaN states fail the check too
        if (!(std::abs(s - 1.0) <= 1e-8))
            throw IntegratorError("solve_fokker_planck: mass drift " + std::to_string(s - 1.0) +
                                  " at t=" + std::to_string(t));
        for (double v : mu)
            if (!(v >= -1e-10))
                throw IntegratorError("solve_fokker_planck: negative mass at t=" + std::to_string(t));
    };

    record(0);
    for (int r = 0; r < knots; ++r) {
        for (int s = 0; s < sub; ++s) {
            const double t0 = flow.knot_time(r) + s * h;
            detail::fp_rhs(spec, policy, t0, mu, k1, rows);
            for (int i = 0; i < d; ++i) tmp[static_cast<std::size_t>(i)] = mu[static_cast<std::size_t>(i)] + 0.5 * h * k1[static_cast<std::size_t>(i)];
            detail::fp_rhs(spec, policy, t0 + 0.5 * h, tmp, k2, rows);
            for (int i = 0; i < d; ++i) tmp[static_cast<std::size_t>(i)] = mu[static_cast<std::size_t>(i)] + 0.5 * h * k2[static_cast<std::size_t>(i)];
            detail::fp_rhs(spec, policy, t0 + 0.5 * h, tmp, k3, rows);
            for (int i = 0; i < d; ++i) tmp[static_cast<std::size_t>(i)] = mu[static_cast<std::size_t>(i)] + h * k3[static_cast<std::size_t>(i)];
            detail::fp_rhs(spec, policy, t0 + h, tmp, k4, rows);
            for (int i = 0; i < d; ++i)
                mu[static_cast<std::size_t>(i)] +=
                    h / 6.0 * (k1[static_cast<std::size_t>(i)] + 2 * k2[static_cast<std::size_t>(i)] +
                               2 * k3[static_cast<std::size_t>(i)] + k4[static_cast<std::size_t>(i)]);
        }
        record(r + 1);
    }

    if (interior) {
        // Gronwall bound: mu^i_t >= mu^i_0 exp(-T M (d-1)); a violation signals
        // a stepping bug, not a modeling choice.
        for (int r = 0; r <= knots; ++r) {
            const auto st = flow.state_at(r);
            for (int i = 0; i < d; ++i) {
                const double lb =
                    interior_lower_bound(m0[static_cast<std::size_t>(i)], spec.horizon, rate_bound, d);
                if (st[static_cast<std::size_t>(i)] < lb - 1e-8)
                    throw IntegratorError("solve_fokker_planck: interior invariance violated at t=" +
                                          std::to_string(flow.knot_time(r)));
            }
        }
    }
    return flow;
}

// J = int_0^T sum_i mu^i f^i(t, a^i, mu) dt + sum_i mu^i_T g^i(mu_T), trapezoid
// on the flow's knot grid with the recorded controls.
inline double evaluate_cost_J(const ProblemSpec& spec, const FlowTrajectory& flow) {
    const int d = spec.d;
    const int knots = flow.knot_count();
    double integral = 0;
    double prev = 0;
    for (int r = 0; r <= knots; ++r) {
        const auto mu = flow.state_at(r);
        const auto ctl = flow.control_at(r);
        double val = 0;
        for (int i = 0; i < d; ++i)
            val += mu[static_cast<std::size_t>(i)] *
                   spec.running_cost(flow.knot_time(r), i,
                                     {ctl.data() + static_cast<std::size_t>(i) * d,
                                      static_cast<std::size_t>(d)},
                                     mu);
        if (r > 0) integral += 0.5 * (prev + val) * flow.knot_dt();
        prev = val;
    }
    return integral + aggregate_G(spec, flow.state_at(knots));
}

inline double evaluate_cost_J(const ProblemSpec& spec, const FeedbackPolicy& policy,
                              std::span<const double> m0, FlowOptions opts = {}) {
    return evaluate_cost_J(spec, solve_fokker_planck(spec, policy, m0, opts));
}

inline double evaluate_cost_J(const ProblemSpec& spec, const OpenLoopControl& control,
                              std::span<const double> m0, FlowOptions opts = {}) {
    OpenLoopPolicy policy(control);
    return evaluate_cost_J(spec, solve_fokker_planck(spec, policy, m0, opts));
}

// ---------------------------------------------------------------------------
// ReferenceValue: V approximated by its own scheme at a fine resolution N_ref.
// Off-grid evaluation by nearest grid point; gradients via D^{N_ref,i}.
// ---------------------------------------------------------------------------
class ReferenceValue {
public:
    ReferenceValue(ProblemSpec spec, std::shared_ptr<const ValueField> field)
        : spec_(std::move(spec)), field_(std::move(field)) {}

    const ValueField& field() const { return *field_; }
    std::shared_ptr<const ValueField> field_ptr() const { return field_; }
    const ProblemSpec& spec() const { return spec_; }
    int resolution() const { return field_->grid().resolution(); }

    double value(double t, std::span<const double> m) const {
        const auto& grid = field_->grid();
        return field_->value(field_->left_knot(t), grid.nearest_index(m));
    }

    // D^i V(t, m) as the discrete derivative at the nearest grid point.
    void gradient_into(double t, int i, std::span<const double> m, std::span<double> out) const {
        const auto& grid = field_->grid();
        const std::size_t idx = grid.nearest_index(m);
        discrete_derivative_into(grid, field_->layer(field_->left_knot(t)), idx, i, out);
    }
    std::vector<double> gradient(double t, int i, std::span<const double> m) const {
        std::vector<double> out(static_cast<std::size_t>(spec_.d));
        gradient_into(t, i, m, out);
        return out;
    }

private:
    ProblemSpec spec_;
    std::shared_ptr<const ValueField> field_;
};

inline ReferenceValue reference_value(const ProblemSpec& spec, int n_ref, SolveOptions opts = {}) {
    auto field = std::make_shared<ValueField>(solve_VN(spec, n_ref, opts));
    return ReferenceValue(spec, std::move(field));
}

// alpha_*(t, i, m) = a*(t, i, m, D^i V(t, m)) through the reference gradient.
class ReferenceFeedbackPolicy final : public FeedbackPolicy {
public:
    explicit ReferenceFeedbackPolicy(std::shared_ptr<const ReferenceValue> ref)
        : ref_(std::move(ref)) {}

    void action_into(double t, int i, std::span<const double> m,
                     std::span<double> out) const override {
        std::vector<double> z(m.size());
        ref_->gradient_into(t, i, m, z);
        hamiltonian_value(ref_->spec(), t, i, m, z, out.data());
    }

private:
    std::shared_ptr<const ReferenceValue> ref_;
};

struct OptimalTrajectory {
    FlowTrajectory flow;
    std::shared_ptr<const ReferenceValue> reference;
    std::shared_ptr<const FeedbackPolicy> policy;
};

inline OptimalTrajectory optimal_trajectory(const ProblemSpec& spec,
                                            std::shared_ptr<const ReferenceValue> ref,
                                            std::span<const double> m0, FlowOptions opts = {}) {
    if (!spec.quadratic_closed_form() && spec.flag == AssumptionFlag::A)
        throw UnsupportedModelError("optimal_trajectory: needs a unique argmax (flag B)");
    auto policy = std::make_shared<ReferenceFeedbackPolicy>(ref);
    FlowTrajectory flow = solve_fokker_planck(spec, *policy, m0, opts);
    return OptimalTrajectory{std::move(flow), std::move(ref), std::move(policy)};
}

// Freeze a feedback policy along a flow into a deterministic open-loop table
// alpha(t, i) = policy(t, i, mu_t); the decentralized control of the limit.
inline OpenLoopControl decentralize(const ProblemSpec& spec, const FeedbackPolicy& policy,
                                    const FlowTrajectory& flow) {
    const int d = spec.d;
    OpenLoopControl control(d, flow.horizon(), flow.knot_count());
    for (int r = 0; r <= flow.knot_count(); ++r) {
        const double t = flow.knot_time(r);
        const auto mu = flow.state_at(r);
        auto mat = control.matrix_at(r);
        for (int i = 0; i < d; ++i)
            policy.action_into(t, i, mu, {mat.data() + static_cast<std::size_t>(i) * d,
                                          static_cast<std::size_t>(d)});
    }
    return control;
}

inline void export_csv(const FlowTrajectory& flow, std::ostream& os) {
    const int d = flow.dim();
    std::string line = "t";
    for (int i = 1; i <= d; ++i) line += ",mu_" + std::to_string(i);
    for (int i = 1; i <= d; ++i)
        for (int j = 1; j <= d; ++j)
            if (i != j) line += ",alpha_" + std::to_string(i) + "_" + std::to_string(j);
    os << line << "\n";
    for (int r = 0; r <= flow.knot_count(); ++r) {
        line.clear();
        format_double(line, flow.knot_time(r));
        const auto mu = flow.state_at(r);
        for (int i = 0; i < d; ++i) {
            line += ",";
            format_double(line, mu[static_cast<std::size_t>(i)]);
        }
        const auto ctl = flow.control_at(r);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                if (i != j) {
                    line += ",";
                    format_double(line, ctl[static_cast<std::size_t>(i) * d + j]);
                }
        os << line << "\n";
    }
}

}  // namespace mfc
