#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <memory>
#include <vector>

#include "mfc/pontryagin.hpp"
#include "mfc/rng.hpp"

using namespace mfc;

namespace {

// Congestion running cost in state 0, terminal cost favoring state 1; the
// optimal adjoint stays positive on interior trajectories.
ProblemSpec congestion_d2() {
    return make_quadratic_spec(2, 1.0, 1.0,
                               {CostTerm::quadratic(0.6, {0.0, 1.0}), CostTerm::zero()},
                               {CostTerm::affine({0.8, 0.0}), CostTerm::zero()});
}

ProblemSpec quad_d3() {
    return make_quadratic_spec(
        3, 1.0, 1.0,
        {CostTerm::quadratic(0.5, {0.2, 0.3, 0.5}), CostTerm::affine({0.3, 0.1, 0.0}),
         CostTerm::zero()},
        {CostTerm::affine({0.9, 0.4, 0.1}), CostTerm::quadratic(0.4, {0.1, 0.6, 0.3}),
         CostTerm::zero()});
}

}  // namespace

TEST_CASE("chart Hamiltonian definitional identities") {
    const auto spec = quad_d3();
    RngStream rng(12, 0, 0, 0);
    std::vector<double> z(3);
    for (int s = 0; s < 100; ++s) {
        const double a = rng.uniform(), b = rng.uniform() * (1 - a);
        const std::vector<double> m{a, b, 1 - a - b};
        const std::vector<double> w{2 * rng.uniform() - 1, 2 * rng.uniform() - 1};
        const double t = rng.uniform();
        const auto ch = chart_hamiltonian(spec, t, m, w);

        // per-state identity for i = d: z = (w, 0)
        z = {w[0], w[1], 0.0};
        REQUIRE(ch.per_state[2] == hamiltonian_value(spec, t, 2, m, z));

        // per-state identity for i < d: z = (w_1 - w_i, ..., -w_i)
        for (int i = 0; i < 2; ++i) {
            z = {w[0] - w[static_cast<std::size_t>(i)], w[1] - w[static_cast<std::size_t>(i)],
                 -w[static_cast<std::size_t>(i)]};
            REQUIRE(ch.per_state[static_cast<std::size_t>(i)] ==
                    Catch::Approx(hamiltonian_value(spec, t, i, m, z)).margin(1e-12));
        }

        // aggregate equals the independently assembled sum
        double agg = 0;
        for (int i = 0; i < 3; ++i) {
            if (i == 2) z = {w[0], w[1], 0.0};
            else
                z = {w[0] - w[static_cast<std::size_t>(i)], w[1] - w[static_cast<std::size_t>(i)],
                     -w[static_cast<std::size_t>(i)]};
            agg += m[static_cast<std::size_t>(i)] * hamiltonian_value(spec, t, i, m, z);
        }
        REQUIRE(ch.aggregate == Catch::Approx(agg).margin(1e-12));
    }
}

TEST_CASE("transport-free chart Hamiltonian reduces to -f0 at w = 0") {
    auto spec = quad_d3();
    spec.adjacency.assign(9, 0);
    const std::vector<double> m{0.2, 0.5, 0.3};
    const std::vector<double> w{0.0, 0.0};
    const auto ch = chart_hamiltonian(spec, 0.3, m, w);
    for (int i = 0; i < 3; ++i)
        REQUIRE(ch.per_state[static_cast<std::size_t>(i)] ==
                Catch::Approx(-spec.f0[static_cast<std::size_t>(i)].eval(m)).margin(1e-14));
}

TEST_CASE("potential couplings match finite differences of the aggregated costs") {
    const auto spec = quad_d3();
    const auto couplings = make_couplings(spec);
    RngStream rng(8, 0, 0, 0);
    const double h = 1e-6;
    for (int s = 0; s < 50; ++s) {
        const double a = 0.1 + 0.6 * rng.uniform();
        const double b = 0.1 + 0.7 * (1 - a) * rng.uniform();
        std::vector<double> m{a, b, 1 - a - b};
        REQUIRE(couplings.running(2, 0.0, m) == 0.0);
        REQUIRE(couplings.terminal(2, m) == 0.0);
        for (int j = 0; j < 2; ++j) {
            auto up = m, dn = m;
            up[static_cast<std::size_t>(j)] += h;
            up[2] -= h;
            dn[static_cast<std::size_t>(j)] -= h;
            dn[2] += h;
            const double fd_f = (aggregate_F0(spec, up) - aggregate_F0(spec, dn)) / (2 * h);
            const double fd_g = (aggregate_G(spec, up) - aggregate_G(spec, dn)) / (2 * h);
            REQUIRE(couplings.running(j, 0.0, m) == Catch::Approx(fd_f).margin(1e-7));
            REQUIRE(couplings.terminal(j, m) == Catch::Approx(fd_g).margin(1e-7));
        }
    }
}

TEST_CASE("constant costs give a zero adjoint") {
    auto spec = make_quadratic_spec(2, 1.0, 1.0,
                                    {CostTerm::affine({0.4, 0.4}), CostTerm::affine({0.4, 0.4})},
                                    {CostTerm::affine({0.7, 0.7}), CostTerm::affine({0.7, 0.7})});
    auto ref = std::make_shared<const ReferenceValue>(reference_value(spec, 64));
    const std::vector<double> m0{0.5, 0.5};
    FlowOptions fopts;
    fopts.knots = 256;
    const auto opt = optimal_trajectory(spec, ref, m0, fopts);
    const auto w = solve_adjoint(spec, opt.flow);
    for (int r = 0; r <= w.knot_count(); ++r)
        REQUIRE(std::abs(w.at(r)[0]) < 1e-9);
}

TEST_CASE("terminal adjoint equals the central difference of the terminal cost") {
    const auto spec = congestion_d2();
    auto ref = std::make_shared<const ReferenceValue>(reference_value(spec, 64));
    const std::vector<double> m0{0.5, 0.5};
    FlowOptions fopts;
    fopts.knots = 256;
    const auto opt = optimal_trajectory(spec, ref, m0, fopts);
    const auto w = solve_adjoint(spec, opt.flow);

    const auto mT = opt.flow.state_at(opt.flow.knot_count());
    const double h = 1e-6;
    std::vector<double> up{mT[0] + h, mT[1] - h}, dn{mT[0] - h, mT[1] + h};
    const double fd = (aggregate_G(spec, up) - aggregate_G(spec, dn)) / (2 * h);
    REQUIRE(w.at(w.knot_count())[0] == Catch::Approx(fd).margin(1e-8));
}

TEST_CASE("adjoint tracks the reference gradient, improving with N_ref") {
    const auto spec = congestion_d2();
    const std::vector<double> m0{0.5, 0.5};
    FlowOptions fopts;
    fopts.knots = 1024;
    std::vector<double> gaps;
    for (int nref : {128, 256, 512}) {
        auto ref = std::make_shared<const ReferenceValue>(reference_value(spec, nref));
        const auto opt = optimal_trajectory(spec, ref, m0, fopts);
        const auto w = solve_adjoint(spec, opt.flow);
        double gap = 0;
        std::vector<double> grad(2);
        for (int r = 0; r <= w.knot_count(); ++r) {
            ref->gradient_into(w.knot_time(r), 1, opt.flow.state_at(r), grad);
            gap = std::max(gap, std::abs(w.at(r)[0] - grad[0]));
        }
        gaps.push_back(gap);
    }
    REQUIRE(gaps[1] < gaps[0]);
    REQUIRE(gaps[2] < gaps[1]);
    REQUIRE(gaps[2] <= 5e-3);
}

TEST_CASE("MFG residual of the reconstructed u is discretization-limited") {
    const auto spec = congestion_d2();
    auto ref = std::make_shared<const ReferenceValue>(reference_value(spec, 256));
    const std::vector<double> m0{0.5, 0.5};
    FlowOptions fopts;
    fopts.knots = 1024;
    const auto opt = optimal_trajectory(spec, ref, m0, fopts);
    const auto w = solve_adjoint(spec, opt.flow);
    const auto u = build_state_values(w);
    REQUIRE(mfg_residual(spec, u, opt.flow) <= 1e-3);

    // fault injection: +0.1 on a single knot must be clearly visible
    StateValuePath faulty = u;
    faulty.at(u.knots / 2)[0] += 0.1;
    REQUIRE(mfg_residual(spec, faulty, opt.flow) >= 0.05);
}

TEST_CASE("zero-cost preset has exactly zero adjoint and residual") {
    auto spec = make_quadratic_spec(2, 1.0, 1.0, {CostTerm::zero(), CostTerm::zero()},
                                    {CostTerm::zero(), CostTerm::zero()});
    auto ref = std::make_shared<const ReferenceValue>(reference_value(spec, 32));
    const std::vector<double> m0{0.5, 0.5};
    FlowOptions fopts;
    fopts.knots = 256;
    const auto opt = optimal_trajectory(spec, ref, m0, fopts);
    const auto w = solve_adjoint(spec, opt.flow);
    for (int r = 0; r <= w.knot_count(); ++r) REQUIRE(w.at(r)[0] == 0.0);
    REQUIRE(mfg_residual(spec, build_state_values(w), opt.flow) == 0.0);
}

TEST_CASE("refusals: flag A and boundary trajectories") {
    auto finite = congestion_d2();
    finite.flag = AssumptionFlag::A;
    auto ref = std::make_shared<const ReferenceValue>(reference_value(congestion_d2(), 32));
    const std::vector<double> m0{0.5, 0.5};
    const auto opt = optimal_trajectory(congestion_d2(), ref, m0);
    REQUIRE_THROWS_AS(solve_adjoint(finite, opt.flow), UnsupportedModelError);

    // vertex start: the flow rides the boundary, chart partials degenerate
    auto vert_spec = make_quadratic_spec(2, 1.0, 1.0, {CostTerm::zero(), CostTerm::zero()},
                                         {CostTerm::zero(), CostTerm::affine({1.0, 1.0})});
    auto vref = std::make_shared<const ReferenceValue>(reference_value(vert_spec, 32));
    const std::vector<double> vertex{1.0, 0.0};
    const auto vopt = optimal_trajectory(vert_spec, vref, vertex);
    REQUIRE_THROWS_AS(solve_adjoint(vert_spec, vopt.flow), DomainError);
}

TEST_CASE("adjoint machinery works in d=3") {
    const auto spec = quad_d3();
    auto ref = std::make_shared<const ReferenceValue>(reference_value(spec, 48));
    const std::vector<double> m0{0.3, 0.3, 0.4};
    FlowOptions fopts;
    fopts.knots = 512;
    const auto opt = optimal_trajectory(spec, ref, m0, fopts);
    const auto w = solve_adjoint(spec, opt.flow);
    // terminal condition in both chart coordinates
    const auto mT = opt.flow.state_at(opt.flow.knot_count());
    for (int j = 0; j < 2; ++j)
        REQUIRE(w.at(w.knot_count())[static_cast<std::size_t>(j)] ==
                Catch::Approx(chart_partial_G(spec, j, mT)).margin(1e-10));
    // adjoint stays bounded and finite
    for (int r = 0; r <= w.knot_count(); ++r)
        for (double v : w.at(r)) {
            REQUIRE(std::isfinite(v));
            REQUIRE(std::abs(v) < 10.0);
        }
}
