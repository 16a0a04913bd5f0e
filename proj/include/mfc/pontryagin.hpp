#pragma once

// Local-chart machinery and the adjoint (Pontryagin) system.
//
// Chart: m = (x_1, ..., x_{d-1}, 1 - sum x_j). Per-state chart Hamiltonians
//   Hhat^i(t,x,w) = H^i(t, m, (w_1-w_i, ..., w_{d-1}-w_i, -w_i))   (i < d)
//   Hhat^d(t,x,w) = H^d(t, m, (w, 0)),
// aggregated as script-H(t,x,w) = sum_{i<d} x_i Hhat^i + x_last Hhat^d.
//
// Adjoint along an optimal trajectory x_t:
//   dw^j/dt = d/dx_j script-H(t, x_t, w_t),   w_T = D_x Ghat(x_T),
// with w_t in the space superdifferential of Vhat(t, x_t) (equal to the
// gradient when V is smooth).
//
// When the running cost splits as l^i(a) + f0^i(m), the same data solves the
// MFG system for couplings built from the potential condition
//   frak-f^i = d/dx_i F0hat (i < d), frak-f^d = 0, likewise for g.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mfc/errors.hpp"
#include "mfc/limit_mfcp.hpp"
#include "mfc/model.hpp"

namespace mfc {

namespace detail {

// z-vector of length d fed to H^i for chart covector w (length d-1).
inline void chart_z(int d, int i, std::span<const double> w, std::span<double> z) {
    if (i == d - 1) {
        for (int j = 0; j < d - 1; ++j) z[static_cast<std::size_t>(j)] = w[static_cast<std::size_t>(j)];
        z[static_cast<std::size_t>(d - 1)] = 0.0;
    } else {
        const double wi = w[static_cast<std::size_t>(i)];
        for (int j = 0; j < d - 1; ++j) z[static_cast<std::size_t>(j)] = w[static_cast<std::size_t>(j)] - wi;
        z[static_cast<std::size_t>(d - 1)] = -wi;
    }
}

}  // namespace detail

struct ChartHamiltonian {
    std::vector<double> per_state;  // Hhat^i, length d
    double aggregate = 0.0;
};

// Evaluates on full simplex coordinates m (length d); callers coming from the
// chart pass m = (x, 1 - sum x). The extension to slightly negative masses is
// smooth, which the finite-difference gradient below relies on.
inline ChartHamiltonian chart_hamiltonian(const ProblemSpec& spec, double t,
                                          std::span<const double> m, std::span<const double> w) {
    const int d = spec.d;
    if (static_cast<int>(w.size()) != d - 1) throw ArgumentError("chart_hamiltonian: bad w size");
    ChartHamiltonian out;
    out.per_state.resize(static_cast<std::size_t>(d));
    std::vector<double> z(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
        detail::chart_z(d, i, w, z);
        out.per_state[static_cast<std::size_t>(i)] = hamiltonian_value(spec, t, i, m, z);
        out.aggregate += m[static_cast<std::size_t>(i)] * out.per_state[static_cast<std::size_t>(i)];
    }
    return out;
}

// Chart partial d/dx_j of the aggregated terminal cost Ghat (closed form).
inline double chart_partial_G(const ProblemSpec& spec, int j, std::span<const double> m) {
    return aggregate_G_partial(spec, j, m) - aggregate_G_partial(spec, spec.d - 1, m);
}

// Chart partial d/dx_j of F0hat(m) = sum_i m_i f0^i(m).
inline double chart_partial_F0(const ProblemSpec& spec, int j, std::span<const double> m) {
    return aggregate_F0_partial(spec, j, m) - aggregate_F0_partial(spec, spec.d - 1, m);
}

// ---------------------------------------------------------------------------
// Adjoint path
// ---------------------------------------------------------------------------
class AdjointPath {
public:
    AdjointPath(int d, double horizon, int knots)
        : d_(d), horizon_(horizon), knots_(knots),
          w_(static_cast<std::size_t>(knots + 1) * (d - 1), 0.0) {}

    int dim() const { return d_; }
    double horizon() const { return horizon_; }
    int knot_count() const { return knots_; }
    double knot_time(int r) const { return horizon_ * r / knots_; }

    std::span<double> at(int r) {
        return {w_.data() + static_cast<std::size_t>(r) * (d_ - 1),
                static_cast<std::size_t>(d_ - 1)};
    }
    std::span<const double> at(int r) const {
        return {w_.data() + static_cast<std::size_t>(r) * (d_ - 1),
                static_cast<std::size_t>(d_ - 1)};
    }

private:
    int d_;
    double horizon_;
    int knots_;
    std::vector<double> w_;
};

namespace detail {

// d/dx of the aggregated chart Hamiltonian by central differences.
inline void chart_grad_hamiltonian(const ProblemSpec& spec, double t, std::span<const double> mu,
                                   std::span<const double> w, double fd_step,
                                   std::span<double> out) {
    const int d = spec.d;
    std::vector<double> m(mu.begin(), mu.end());
    for (int q = 0; q < d - 1; ++q) {
        const double save_q = m[static_cast<std::size_t>(q)];
        const double save_d = m[static_cast<std::size_t>(d - 1)];
        m[static_cast<std::size_t>(q)] = save_q + fd_step;
        m[static_cast<std::size_t>(d - 1)] = save_d - fd_step;
        const double up = chart_hamiltonian(spec, t, m, w).aggregate;
        m[static_cast<std::size_t>(q)] = save_q - fd_step;
        m[static_cast<std::size_t>(d - 1)] = save_d + fd_step;
        const double dn = chart_hamiltonian(spec, t, m, w).aggregate;
        m[static_cast<std::size_t>(q)] = save_q;
        m[static_cast<std::size_t>(d - 1)] = save_d;
        out[static_cast<std::size_t>(q)] = (up - dn) / (2.0 * fd_step);
    }
}

}  // namespace detail

// Backward integration of dw/dt = d/dx script-H(t, x_t, w_t) along the flow,
// terminal condition w_T = D_x Ghat(x_T). Requires a unique, stable argmax
// (flag B or C); interior trajectories only.
inline AdjointPath solve_adjoint(const ProblemSpec& spec, const FlowTrajectory& flow,
                                 double fd_step = 1e-5) {
    if (spec.flag == AssumptionFlag::A)
        throw UnsupportedModelError(
            "solve_adjoint: argmax may jump under flag A; refuse rather than guess");
    const int d = spec.d;
    if (flow.min_mass() < 1e-6)
        throw DomainError("solve_adjoint: trajectory touches the chart boundary");

    const int knots = flow.knot_count();
    AdjointPath path(d, flow.horizon(), knots);
    const double h = flow.knot_dt();

    std::vector<double> w(static_cast<std::size_t>(d - 1));
    {
        const auto mT = flow.state_at(knots);
        for (int j = 0; j < d - 1; ++j) w[static_cast<std::size_t>(j)] = chart_partial_G(spec, j, mT);
        auto out = path.at(knots);
        std::copy(w.begin(), w.end(), out.begin());
    }

    std::vector<double> k1(static_cast<std::size_t>(d - 1)), k2(k1), k3(k1), k4(k1), tmp(k1);
    std::vector<double> mu(static_cast<std::size_t>(d));
    for (int r = knots; r-- > 0;) {
        const double t1 = flow.knot_time(r + 1);
        auto rhs = [&](double t, std::span<const double> ww, std::span<double> out) {
            flow.state_interp(t, mu);
            detail::chart_grad_hamiltonian(spec, t, mu, ww, fd_step, out);
        };
        rhs(t1, w, k1);
        for (int j = 0; j < d - 1; ++j) tmp[static_cast<std::size_t>(j)] = w[static_cast<std::size_t>(j)] - 0.5 * h * k1[static_cast<std::size_t>(j)];
        rhs(t1 - 0.5 * h, tmp, k2);
        for (int j = 0; j < d - 1; ++j) tmp[static_cast<std::size_t>(j)] = w[static_cast<std::size_t>(j)] - 0.5 * h * k2[static_cast<std::size_t>(j)];
        rhs(t1 - 0.5 * h, tmp, k3);
        for (int j = 0; j < d - 1; ++j) tmp[static_cast<std::size_t>(j)] = w[static_cast<std::size_t>(j)] - h * k3[static_cast<std::size_t>(j)];
        rhs(t1 - h, tmp, k4);
        for (int j = 0; j < d - 1; ++j)
            w[static_cast<std::size_t>(j)] -=
                h / 6.0 * (k1[static_cast<std::size_t>(j)] + 2 * k2[static_cast<std::size_t>(j)] +
                           2 * k3[static_cast<std::size_t>(j)] + k4[static_cast<std::size_t>(j)]);
        auto out = path.at(r);
        std::copy(w.begin(), w.end(), out.begin());
    }
    return path;
}

// ---------------------------------------------------------------------------
// MFG system consistency
// ---------------------------------------------------------------------------

// Couplings from the potential condition; the d-th components are pinned to 0.
struct MfgCouplings {
    const ProblemSpec* spec;

    double running(int i, double /*t*/, std::span<const double> m) const {
        return i == spec->d - 1 ? 0.0 : chart_partial_F0(*spec, i, m);
    }
    double terminal(int i, std::span<const double> m) const {
        return i == spec->d - 1 ? 0.0 : chart_partial_G(*spec, i, m);
    }
};

inline MfgCouplings make_couplings(const ProblemSpec& spec) {
    if (!spec.split_cost())
        throw UnsupportedModelError("make_couplings: cost does not split");
    return MfgCouplings{&spec};
}

// Per-state value path u on the flow's knot grid, (knots+1) x d row-major.
struct StateValuePath {
    int d = 0;
    int knots = 0;
    double horizon = 0;
    std::vector<double> values;

    std::span<double> at(int r) {
        return {values.data() + static_cast<std::size_t>(r) * d, static_cast<std::size_t>(d)};
    }
    std::span<const double> at(int r) const {
        return {values.data() + static_cast<std::size_t>(r) * d, static_cast<std::size_t>(d)};
    }
};

// u^j := w^j (j < d), u^d := 0.
inline StateValuePath build_state_values(const AdjointPath& w) {
    StateValuePath u;
    u.d = w.dim();
    u.knots = w.knot_count();
    u.horizon = w.horizon();
    u.values.assign(static_cast<std::size_t>(u.knots + 1) * u.d, 0.0);
    for (int r = 0; r <= u.knots; ++r) {
        const auto wr = w.at(r);
        auto ur = u.at(r);
        for (int j = 0; j < u.d - 1; ++j) ur[static_cast<std::size_t>(j)] = wr[static_cast<std::size_t>(j)];
    }
    return u;
}

// Max residual of  -du^i/dt + H0^i(t, mu_t, (u^j - u^i)_j) - frak-f^i(t, mu_t)
// along the trajectory; du/dt by second-order differences on the knot grid.
inline double mfg_residual(const ProblemSpec& spec, const StateValuePath& u,
                           const FlowTrajectory& flow) {
    if (!spec.split_cost())
        throw UnsupportedModelError("mfg_residual: cost does not split");
    if (u.knots != flow.knot_count() || u.d != spec.d)
        throw ArgumentError("mfg_residual: path/flow shape mismatch");
    const MfgCouplings couplings = make_couplings(spec);
    const int d = spec.d;
    const int knots = u.knots;
    const double h = flow.knot_dt();

    double worst = 0;
    std::vector<double> z(static_cast<std::size_t>(d));
    for (int r = 0; r <= knots; ++r) {
        const double t = flow.knot_time(r);
        const auto mu = flow.state_at(r);
        const auto ur = u.at(r);
        for (int i = 0; i < d; ++i) {
            double dudt;
            if (r == 0)
                dudt = (-3.0 * u.at(0)[static_cast<std::size_t>(i)] + 4.0 * u.at(1)[static_cast<std::size_t>(i)] -
                        u.at(2)[static_cast<std::size_t>(i)]) /
                       (2.0 * h);
            else if (r == knots)
                dudt = (3.0 * u.at(knots)[static_cast<std::size_t>(i)] -
                        4.0 * u.at(knots - 1)[static_cast<std::size_t>(i)] +
                        u.at(knots - 2)[static_cast<std::size_t>(i)]) /
                       (2.0 * h);
            else
                dudt = (u.at(r + 1)[static_cast<std::size_t>(i)] - u.at(r - 1)[static_cast<std::size_t>(i)]) /
                       (2.0 * h);
            for (int j = 0; j < d; ++j)
                z[static_cast<std::size_t>(j)] = ur[static_cast<std::size_t>(j)] - ur[static_cast<std::size_t>(i)];
            const double h0 = hamiltonian_split0(spec, t, i, mu, z);
            const double res = -dudt + h0 - couplings.running(i, t, mu);
            worst = std::max(worst, std::abs(res));
        }
    }
    return worst;
}

inline void export_csv(const AdjointPath& path, std::ostream& os) {
    std::string line = "t";
    for (int j = 1; j < path.dim(); ++j) line += ",w_" + std::to_string(j);
    os << line << "\n";
    for (int r = 0; r <= path.knot_count(); ++r) {
        line.clear();
        format_double(line, path.knot_time(r));
        for (double v : path.at(r)) {
            line += ",";
            format_double(line, v);
        }
        os << line << "\n";
    }
}

}  // namespace mfc
