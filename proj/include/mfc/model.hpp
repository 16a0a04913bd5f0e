#pragma once

// Control-problem definition: transition rates, running/terminal costs, action
// models, and the (pre-)Hamiltonian
//     preH^i(t,a,m,z) = -<Q_{i,.}(t,a,m), z> - f^i(t,a,m),
//     H^i(t,m,z) = max_a preH^i(t,a,m,z).
// The built-in family has quadratic action cost f^i = 1/2 sum_{j!=i} a_j^2 +
// f0^i(m) and rates Q_{i,j} = mask_{i,j} a_j, which makes the maximization
// separable per coordinate and gives the closed form a*_j = clamp(-z_j, 0, M).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mfc/errors.hpp"
#include "mfc/rng.hpp"

namespace mfc {

enum class AssumptionFlag { A, B, C };

inline std::string to_string(AssumptionFlag f) {
    switch (f) {
        case AssumptionFlag::A: return "A";
        case AssumptionFlag::B: return "B";
        case AssumptionFlag::C: return "C";
    }
    return "?";
}

// A = [0, M]^d, one rate per target state.
struct RateBox {
    double bound = 1.0;
};

// Explicit finite action set; each action is a length-d rate vector.
struct FiniteActionSet {
    std::vector<std::vector<double>> actions;
};

using ActionModel = std::variant<RateBox, FiniteActionSet>;

// ---------------------------------------------------------------------------
// Cost terms: the measure-dependent parts f0^i(m) and g^i(m).
// ---------------------------------------------------------------------------
struct CostTerm {
    enum class Kind { Zero, Affine, Quadratic, Trig };

    Kind kind = Kind::Zero;
    std::vector<double> c;       // affine <c,m>; trig direction
    double kappa = 0.0;          // quadratic kappa |m - center|^2
    std::vector<double> center;
    double beta = 0.0;           // trig beta sin(gamma <c,m>)
    double gamma = 0.0;

    static CostTerm zero() { return {}; }
    static CostTerm affine(std::vector<double> cv) {
        CostTerm t;
        t.kind = Kind::Affine;
        t.c = std::move(cv);
        return t;
    }
    static CostTerm quadratic(double k, std::vector<double> ctr) {
        CostTerm t;
        t.kind = Kind::Quadratic;
        t.kappa = k;
        t.center = std::move(ctr);
        return t;
    }
    static CostTerm trig(double b, double g, std::vector<double> cv) {
        CostTerm t;
        t.kind = Kind::Trig;
        t.beta = b;
        t.gamma = g;
        t.c = std::move(cv);
        return t;
    }

    double eval(std::span<const double> m) const {
        switch (kind) {
            case Kind::Zero: return 0.0;
            case Kind::Affine: {
                double s = 0;
                for (std::size_t i = 0; i < m.size(); ++i) s += c[i] * m[i];
                return s;
            }
            case Kind::Quadratic: {
                double s = 0;
                for (std::size_t i = 0; i < m.size(); ++i) {
                    const double dlt = m[i] - center[i];
                    s += dlt * dlt;
                }
                return kappa * s;
            }
            case Kind::Trig: {
                double s = 0;
                for (std::size_t i = 0; i < m.size(); ++i) s += c[i] * m[i];
                return beta * std::sin(gamma * s);
            }
        }
        return 0.0;
    }

    // d/dm_k of the term.
    double partial(int k, std::span<const double> m) const {
        const auto ku = static_cast<std::size_t>(k);
        switch (kind) {
            case Kind::Zero: return 0.0;
            case Kind::Affine: return c[ku];
            case Kind::Quadratic: return 2.0 * kappa * (m[ku] - center[ku]);
            case Kind::Trig: {
                double s = 0;
                for (std::size_t i = 0; i < m.size(); ++i) s += c[i] * m[i];
                return beta * gamma * c[ku] * std::cos(gamma * s);
            }
        }
        return 0.0;
    }
};

// ---------------------------------------------------------------------------
// ProblemSpec
// ---------------------------------------------------------------------------
class ProblemSpec {
public:
    int d = 2;
    double horizon = 1.0;
    ActionModel actions = RateBox{1.0};
    AssumptionFlag flag = AssumptionFlag::B;
    std::string preset_id = "quadratic";
    std::vector<CostTerm> f0;            // per state, time-independent
    std::vector<CostTerm> g;             // per state
    std::vector<std::uint8_t> adjacency; // d*d 0/1 mask, diagonal ignored; empty = complete

    void validate() const {
        if (d < 2) throw ConfigError("ProblemSpec: d must be >= 2");
        if (horizon <= 0) throw ConfigError("ProblemSpec: horizon must be positive");
        if (static_cast<int>(f0.size()) != d) throw ConfigError("ProblemSpec: need one f0 term per state");
        if (static_cast<int>(g.size()) != d) throw ConfigError("ProblemSpec: need one g term per state");
        if (!adjacency.empty() && adjacency.size() != static_cast<std::size_t>(d) * d)
            throw ConfigError("ProblemSpec: adjacency must be d*d");
        if (const auto* fs = std::get_if<FiniteActionSet>(&actions)) {
            if (fs->actions.empty()) throw ConfigError("ProblemSpec: finite action set is empty");
            for (const auto& a : fs->actions) {
                if (static_cast<int>(a.size()) != d)
                    throw ConfigError("ProblemSpec: action vectors must have length d");
                for (double v : a)
                    if (v < 0) throw ConfigError("ProblemSpec: negative rate in action set");
            }
        } else if (std::get<RateBox>(actions).bound <= 0) {
            throw ConfigError("ProblemSpec: rate box bound must be positive");
        }
    }

    bool edge(int i, int j) const {
        if (i == j) return false;
        if (adjacency.empty()) return true;
        return adjacency[static_cast<std::size_t>(i) * d + j] != 0;
    }

    bool has_any_edge() const {
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                if (edge(i, j)) return true;
        return false;
    }

    // M = sup Q over everything; the constant in stability bounds and the
    // thinning majorant.
    double rate_bound() const {
        if (!has_any_edge()) return 0.0;
        if (const auto* rb = std::get_if<RateBox>(&actions)) return rb->bound;
        double m = 0;
        for (const auto& a : std::get<FiniteActionSet>(actions).actions)
            for (double v : a) m = std::max(m, v);
        return m;
    }

    // Largest admissible per-coordinate action value (equals rate_bound for
    // nonempty masks, but stays meaningful when the mask removes all edges).
    double action_box_bound() const {
        if (const auto* rb = std::get_if<RateBox>(&actions)) return rb->bound;
        double m = 0;
        for (const auto& a : std::get<FiniteActionSet>(actions).actions)
            for (double v : a) m = std::max(m, v);
        return m;
    }

    // Q_{i,j}(t, a, m) = mask_{i,j} a_j for j != i, 0 on the diagonal.
    double rate(double /*t*/, int i, int j, std::span<const double> a,
                std::span<const double> /*m*/) const {
        if (i == j) return 0.0;
        return edge(i, j) ? a[static_cast<std::size_t>(j)] : 0.0;
    }

    // f^i(t, a, m) = 1/2 sum_{j != i, edge} a_j^2 + f0^i(m).
    double running_cost(double /*t*/, int i, std::span<const double> a,
                        std::span<const double> m) const {
        double s = 0;
        for (int j = 0; j < d; ++j)
            if (edge(i, j)) s += a[static_cast<std::size_t>(j)] * a[static_cast<std::size_t>(j)];
        return 0.5 * s + f0[static_cast<std::size_t>(i)].eval(m);
    }

    double running_cost_measure_part(double /*t*/, int i, std::span<const double> m) const {
        return f0[static_cast<std::size_t>(i)].eval(m);
    }

    double terminal_cost(int i, std::span<const double> m) const {
        return g[static_cast<std::size_t>(i)].eval(m);
    }

    // The cost always splits as l^i(a) + f0^i(m) in this family.
    bool split_cost() const { return true; }

    bool quadratic_closed_form() const { return std::holds_alternative<RateBox>(actions); }

    // Uniform convexity constant of f in a (exact for the quadratic family).
    double convexity_lambda() const { return 0.5; }
};

// ---------------------------------------------------------------------------
// Hamiltonian
// ---------------------------------------------------------------------------
struct HamiltonianResult {
    double value = 0.0;
    std::vector<double> argmax;  // length d; coordinate i and masked edges are 0
    bool exact = false;          // closed form vs search
};

namespace detail {

inline void require_z_pinned(std::span<const double> z, int i) {
    if (std::abs(z[static_cast<std::size_t>(i)]) > 1e-9)
        throw ArgumentError("pre_hamiltonian: z_i must be 0");
}

inline double clamp_rate(double r, double m) { return std::clamp(r, 0.0, m); }

}  // namespace detail

inline double pre_hamiltonian(const ProblemSpec& spec, double t, int i,
                              std::span<const double> a, std::span<const double> m,
                              std::span<const double> z) {
    detail::require_z_pinned(z, i);
    double transport = 0;
    for (int j = 0; j < spec.d; ++j) {
        if (j == i) continue;
        transport += spec.rate(t, i, j, a, m) * z[static_cast<std::size_t>(j)];
    }
    return -transport - spec.running_cost(t, i, a, m);
}

// Closed-form maximization for the rate-box family; no allocation. Returns the
// value, optionally writing the maximizer into `argmax_out` (length d).
inline double hamiltonian_value(const ProblemSpec& spec, double t, int i,
                                std::span<const double> m, std::span<const double> z,
                                double* argmax_out = nullptr) {
    detail::require_z_pinned(z, i);
    if (spec.quadratic_closed_form()) {
        const double bound = std::get<RateBox>(spec.actions).bound;
        double h = 0;
        for (int j = 0; j < spec.d; ++j) {
            double aj = 0;
            if (j != i && spec.edge(i, j)) {
                const double zj = z[static_cast<std::size_t>(j)];
                aj = detail::clamp_rate(-zj, bound);
                h += -aj * zj - 0.5 * aj * aj;
            }
            if (argmax_out) argmax_out[j] = aj;
        }
        return h - spec.f0[static_cast<std::size_t>(i)].eval(m);
    }
    // Finite action set: scan in storage order, ties resolved toward the
    // lexicographically smallest action.
    const auto& set = std::get<FiniteActionSet>(spec.actions);
    if (set.actions.empty()) throw ConfigError("hamiltonian: empty action set");
    double best = -std::numeric_limits<double>::infinity();
    const std::vector<double>* best_a = nullptr;
    for (const auto& a : set.actions) {
        const double v = pre_hamiltonian(spec, t, i, a, m, z);
        if (v > best || (v == best && best_a && std::lexicographical_compare(
                                                    a.begin(), a.end(), best_a->begin(), best_a->end()))) {
            best = v;
            best_a = &a;
        }
    }
    if (argmax_out)
        for (int j = 0; j < spec.d; ++j) argmax_out[j] = (*best_a)[static_cast<std::size_t>(j)];
    return best;
}

inline HamiltonianResult hamiltonian(const ProblemSpec& spec, double t, int i,
                                     std::span<const double> m, std::span<const double> z) {
    HamiltonianResult r;
    r.argmax.assign(static_cast<std::size_t>(spec.d), 0.0);
    r.value = hamiltonian_value(spec, t, i, m, z, r.argmax.data());
    r.exact = spec.quadratic_closed_form();
    return r;
}

// Product-lattice search over the free coordinates of [0, M]^d; the generic
// route the closed form is checked against. `points_per_axis` >= 2.
inline HamiltonianResult hamiltonian_lattice(const ProblemSpec& spec, double t, int i,
                                             std::span<const double> m, std::span<const double> z,
                                             int points_per_axis = 101) {
    detail::require_z_pinned(z, i);
    if (!spec.quadratic_closed_form())
        return hamiltonian(spec, t, i, m, z);  // finite sets are already a search
    const double bound = std::get<RateBox>(spec.actions).bound;
    std::vector<int> free_coords;
    for (int j = 0; j < spec.d; ++j)
        if (j != i && spec.edge(i, j)) free_coords.push_back(j);

    HamiltonianResult r;
    r.argmax.assign(static_cast<std::size_t>(spec.d), 0.0);
    r.exact = false;
    std::vector<double> a(static_cast<std::size_t>(spec.d), 0.0);
    std::vector<int> step(free_coords.size(), 0);
    double best = -std::numeric_limits<double>::infinity();
    const double h = bound / (points_per_axis - 1);
    // Odometer enumeration in ascending lexicographic order; strict improvement
    // keeps the lexicographically smallest tie.
    bool more = true;
    while (more) {
        for (std::size_t q = 0; q < free_coords.size(); ++q)
            a[static_cast<std::size_t>(free_coords[q])] = step[q] * h;
        const double v = pre_hamiltonian(spec, t, i, a, m, z);
        if (v > best) {
            best = v;
            for (int j = 0; j < spec.d; ++j) r.argmax[static_cast<std::size_t>(j)] = a[static_cast<std::size_t>(j)];
        }
        more = false;
        for (std::size_t q = free_coords.size(); q-- > 0;) {
            if (++step[q] < points_per_axis) {
                more = true;
                break;
            }
            step[q] = 0;
        }
    }
    r.value = best;
    return r;
}

// Split Hamiltonian H0^i(t, z) = H^i(t, m, z) + f0^i(m); the measure-free part
// used by the MFG system.
inline double hamiltonian_split0(const ProblemSpec& spec, double t, int i,
                                 std::span<const double> m, std::span<const double> z) {
    if (!spec.split_cost())
        throw UnsupportedModelError("hamiltonian_split0: cost does not split");
    return hamiltonian_value(spec, t, i, m, z) + spec.f0[static_cast<std::size_t>(i)].eval(m);
}

// ---------------------------------------------------------------------------
// Aggregates F(t, a^1..a^d, m) = sum_i m_i f^i(t, a^i, m), G(m) = sum m_i g^i.
// ---------------------------------------------------------------------------
inline double aggregate_F(const ProblemSpec& spec, double t,
                          std::span<const std::vector<double>> action_profile,
                          std::span<const double> m) {
    if (static_cast<int>(action_profile.size()) != spec.d)
        throw ArgumentError("aggregate_F: need one action per state");
    double s = 0;
    for (int i = 0; i < spec.d; ++i)
        s += m[static_cast<std::size_t>(i)] * spec.running_cost(t, i, action_profile[static_cast<std::size_t>(i)], m);
    return s;
}

inline double aggregate_G(const ProblemSpec& spec, std::span<const double> m) {
    double s = 0;
    for (int i = 0; i < spec.d; ++i)
        s += m[static_cast<std::size_t>(i)] * spec.terminal_cost(i, m);
    return s;
}

// F0(m) = sum_i m_i f0^i(m) and G(m): the aggregated measure-only costs, with
// exact partial derivatives (used by the chart machinery).
inline double aggregate_F0(const ProblemSpec& spec, std::span<const double> m) {
    double s = 0;
    for (int i = 0; i < spec.d; ++i) s += m[static_cast<std::size_t>(i)] * spec.f0[static_cast<std::size_t>(i)].eval(m);
    return s;
}

inline double aggregate_F0_partial(const ProblemSpec& spec, int k, std::span<const double> m) {
    double s = spec.f0[static_cast<std::size_t>(k)].eval(m);
    for (int i = 0; i < spec.d; ++i)
        s += m[static_cast<std::size_t>(i)] * spec.f0[static_cast<std::size_t>(i)].partial(k, m);
    return s;
}

inline double aggregate_G_partial(const ProblemSpec& spec, int k, std::span<const double> m) {
    double s = spec.g[static_cast<std::size_t>(k)].eval(m);
    for (int i = 0; i < spec.d; ++i)
        s += m[static_cast<std::size_t>(i)] * spec.g[static_cast<std::size_t>(i)].partial(k, m);
    return s;
}

// ---------------------------------------------------------------------------
// Preset builders
// ---------------------------------------------------------------------------
inline ProblemSpec make_quadratic_spec(int d, double horizon, double rate_box_bound,
                                       std::vector<CostTerm> f0, std::vector<CostTerm> g,
                                       AssumptionFlag flag = AssumptionFlag::C,
                                       std::string preset_id = "quadratic") {
    ProblemSpec s;
    s.d = d;
    s.horizon = horizon;
    s.actions = RateBox{rate_box_bound};
    s.flag = flag;
    s.preset_id = std::move(preset_id);
    s.f0 = std::move(f0);
    s.g = std::move(g);
    s.validate();
    return s;
}

}  // namespace mfc
