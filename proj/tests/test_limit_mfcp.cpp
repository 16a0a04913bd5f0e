#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <memory>
#include <vector>

#include "mfc/limit_mfcp.hpp"
#include "mfc/rng.hpp"

using namespace mfc;

namespace {

ProblemSpec quad_d2() {
    return make_quadratic_spec(2, 1.0, 1.0,
                               {CostTerm::affine({0.5, 0.1}), CostTerm::zero()},
                               {CostTerm::affine({1.0, 0.2}), CostTerm::affine({0.1, 0.6})});
}

ProblemSpec oracle_spec_d2n1() {
    return make_quadratic_spec(2, 1.0, 1.0, {CostTerm::zero(), CostTerm::zero()},
                               {CostTerm::zero(), CostTerm::affine({1.0, 1.0})});
}

OpenLoopControl constant_rates_d2(double r01, double r10, double horizon = 1.0) {
    OpenLoopControl control(2, horizon, 4);
    for (int r = 0; r <= 4; ++r) {
        auto mat = control.matrix_at(r);
        mat[0 * 2 + 1] = r01;
        mat[1 * 2 + 0] = r10;
    }
    return control;
}

}  // namespace

TEST_CASE("zero control freezes the flow") {
    const auto spec = quad_d2();
    const std::vector<double> m0{0.3, 0.7};
    const auto flow = solve_fokker_planck(spec, ZeroPolicy{}, m0);
    for (int r = 0; r <= flow.knot_count(); ++r) {
        REQUIRE(flow.state_at(r)[0] == Catch::Approx(0.3).margin(1e-14));
        REQUIRE(flow.state_at(r)[1] == Catch::Approx(0.7).margin(1e-14));
    }
}

TEST_CASE("constant symmetric rates give the two-state closed form") {
    const auto spec = quad_d2();
    const double c = 0.8;
    OpenLoopPolicy policy(constant_rates_d2(c, c));
    const std::vector<double> m0{0.9, 0.1};
    const auto flow = solve_fokker_planck(spec, policy, m0);
    for (int r = 0; r <= flow.knot_count(); ++r) {
        const double t = flow.knot_time(r);
        const double expect = 0.5 + (0.9 - 0.5) * std::exp(-2.0 * c * t);
        REQUIRE(flow.state_at(r)[0] == Catch::Approx(expect).margin(1e-10));
    }
}

TEST_CASE("mass is conserved to 1e-10 under assorted policies") {
    const auto spec = quad_d2();
    const std::vector<double> m0{0.4, 0.6};
    RngStream rng(3, 0, 0, 0);
    for (int trial = 0; trial < 5; ++trial) {
        OpenLoopControl ctl(2, 1.0, 16);
        for (int r = 0; r <= 16; ++r) {
            auto mat = ctl.matrix_at(r);
            mat[1] = rng.uniform();
            mat[2] = rng.uniform();
        }
        OpenLoopPolicy policy(std::move(ctl));
        const auto flow = solve_fokker_planck(spec, policy, m0);
        for (int r = 0; r <= flow.knot_count(); ++r) {
            double s = 0;
            for (double v : flow.state_at(r)) s += v;
            REQUIRE(std::abs(s - 1.0) <= 1e-10);
        }
    }
}

TEST_CASE("interior lower bound holds for interior starts") {
    const auto spec = quad_d2();
    const std::vector<double> m0{0.25, 0.75};
    OpenLoopPolicy policy(constant_rates_d2(1.0, 0.0));  // drains state 0 as fast as allowed
    const auto flow = solve_fokker_planck(spec, policy, m0);
    const double lb0 = interior_lower_bound(0.25, 1.0, 1.0, 2);
    for (int r = 0; r <= flow.knot_count(); ++r)
        REQUIRE(flow.state_at(r)[0] >= lb0 - 1e-8);
}

TEST_CASE("cost functional on trivial cases") {
    // f == 0 -> J = G(mu_T)
    auto pure_terminal = make_quadratic_spec(2, 1.0, 1.0, {CostTerm::zero(), CostTerm::zero()},
                                             {CostTerm::affine({2.0, 0.5}), CostTerm::zero()});
    pure_terminal.adjacency.assign(4, 0);  // frozen flow, zero action cost
    const std::vector<double> m0{0.5, 0.5};
    const double j0 = evaluate_cost_J(pure_terminal, ZeroPolicy{}, m0);
    REQUIRE(j0 == Catch::Approx(aggregate_G(pure_terminal, m0)).margin(1e-12));

    // zero control, time-independent f: J = T F0(m0) + G(m0)
    const auto spec = quad_d2();
    const double j1 = evaluate_cost_J(spec, ZeroPolicy{}, m0);
    REQUIRE(j1 ==
            Catch::Approx(spec.horizon * aggregate_F0(spec, m0) + aggregate_G(spec, m0)).margin(1e-10));
}

TEST_CASE("reference value: zero-rate evaluator and exactness at grid points") {
    auto spec = quad_d2();
    spec.adjacency.assign(4, 0);
    const auto ref = reference_value(spec, 32);
    const auto& field = ref.field();
    for (int r = 0; r <= field.knot_count(); r += 7) {
        const double t = field.knot_time(r);
        for (std::size_t p = 0; p < field.grid().size(); p += 5) {
            const auto m = field.grid().coords(p);
            const double expect = (1.0 - t) * aggregate_F0(spec, m) + aggregate_G(spec, m);
            REQUIRE(ref.value(t, m) == Catch::Approx(expect).margin(1e-8));
            REQUIRE(ref.value(t, m) == field.value(r, p));  // exact at grid points
        }
    }
}

TEST_CASE("reference self-convergence when doubling N_ref") {
    const auto spec = quad_d2();
    SolveOptions opts;
    opts.report_knots = 32;
    const ValueField a = solve_VN(spec, 32, opts);
    const ValueField b = solve_VN(spec, 64, opts);
    const ValueField c = solve_VN(spec, 128, opts);
    auto max_diff = [&](const ValueField& coarse, const ValueField& fine) {
        const int scale = fine.grid().resolution() / coarse.grid().resolution();
        double worst = 0;
        std::vector<int> k(2);
        for (int r = 0; r <= 32; ++r)
            for (std::size_t p = 0; p < coarse.grid().size(); ++p) {
                const auto kc = coarse.grid().counts(p);
                k[0] = kc[0] * scale;
                k[1] = kc[1] * scale;
                worst = std::max(worst, std::abs(coarse.value(r, p) -
                                                 fine.value(r, fine.grid().index_of(k))));
            }
        return worst;
    };
    const double d1 = max_diff(a, b);
    const double d2 = max_diff(b, c);
    REQUIRE(d1 > 0);
    // error ~ c/N: successive differences shrink roughly geometrically
    REQUIRE(d2 < 0.8 * d1);
    REQUIRE(d2 > 0.2 * d1);
}

TEST_CASE("d=2 oracle: reference value and optimal trajectory cost at a vertex") {
    const auto spec = oracle_spec_d2n1();
    const int n_ref = 64;
    auto ref = std::make_shared<const ReferenceValue>(reference_value(spec, n_ref));
    const std::vector<double> delta1{1.0, 0.0};

    // V(t, delta_1) = 0 for this preset; the reference reproduces it
    REQUIRE(std::abs(ref->value(0.0, delta1) - 0.0) <= 2.0 / n_ref);

    const auto opt = optimal_trajectory(spec, ref, delta1);
    for (int r = 0; r <= opt.flow.knot_count(); ++r)
        REQUIRE(opt.flow.state_at(r)[0] == Catch::Approx(1.0).margin(1e-12));
    const double j = evaluate_cost_J(spec, opt.flow);
    REQUIRE(std::abs(j - 0.0) <= 1e-5);   // matches the V^1 oracle value
    REQUIRE(std::abs(j - 0.0) <= 1e-4);   // and the limit optimal value
}

TEST_CASE("constant terminal cost gives a frozen optimal flow") {
    auto spec = make_quadratic_spec(2, 1.0, 1.0, {CostTerm::zero(), CostTerm::zero()},
                                    {CostTerm::affine({0.7, 0.7}), CostTerm::affine({0.7, 0.7})});
    auto ref = std::make_shared<const ReferenceValue>(reference_value(spec, 32));
    const std::vector<double> m0{0.4, 0.6};
    const auto opt = optimal_trajectory(spec, ref, m0);
    for (int r = 0; r <= opt.flow.knot_count(); ++r) {
        REQUIRE(opt.flow.state_at(r)[0] == Catch::Approx(0.4).margin(1e-9));
        const auto ctl = opt.flow.control_at(r);
        for (double v : ctl) REQUIRE(v == Catch::Approx(0.0).margin(1e-12));
    }
}

TEST_CASE("optimal flow from an interior start satisfies the interior bound") {
    const auto spec = quad_d2();
    auto ref = std::make_shared<const ReferenceValue>(reference_value(spec, 64));
    const std::vector<double> m0{0.35, 0.65};
    const auto opt = optimal_trajectory(spec, ref, m0);
    for (int r = 0; r <= opt.flow.knot_count(); ++r)
        for (int i = 0; i < 2; ++i)
            REQUIRE(opt.flow.state_at(r)[static_cast<std::size_t>(i)] >=
                    interior_lower_bound(m0[static_cast<std::size_t>(i)], 1.0, 1.0, 2) - 1e-8);
}

TEST_CASE("cost consistency: J(alpha_*) brackets the reference value") {
    const auto spec = quad_d2();
    const int n_ref = 128;
    auto ref = std::make_shared<const ReferenceValue>(reference_value(spec, n_ref));
    const std::vector<double> m0{0.6, 0.4};
    FlowOptions fopts;
    fopts.knots = 1024;
    const auto opt = optimal_trajectory(spec, ref, m0, fopts);
    const double j = evaluate_cost_J(spec, opt.flow);
    const double v0 = ref->value(0.0, m0);
    const double tol = 2.0 / n_ref + 10.0 * (1.0 / 1024);
    REQUIRE(j >= v0 - tol);
    REQUIRE(j <= v0 + tol);
}

TEST_CASE("discrete gradient vs central chart differences shrinks like 1/N") {
    const auto spec = quad_d2();
    double prev = 0;
    for (int n : {32, 64, 128}) {
        SolveOptions opts;
        opts.report_knots = 16;
        const ValueField field = solve_VN(spec, n, opts);
        const auto& grid = field.grid();
        double worst = 0;
        for (int r = 0; r <= 16; r += 8) {
            const auto layer = field.layer(r);
            for (std::size_t p = 0; p < grid.size(); ++p) {
                const auto k = grid.counts(p);
                if (k[0] < 1 || k[1] < 1) continue;  // need both central neighbors
                // central chart difference for d/dx_1 (chart drops state 2)
                const auto up = grid.neighbor_index(p, 1, 0);
                const auto dn = grid.neighbor_index(p, 0, 1);
                const double central =
                    (layer[static_cast<std::size_t>(up)] - layer[static_cast<std::size_t>(dn)]) * n / 2.0;
                // compare with D^{N,1}_0 (= directional derivative toward state 0)
                const auto d1 = discrete_derivative(grid, layer, p, 1);
                worst = std::max(worst, std::abs(d1[0] - central));
            }
        }
        if (prev > 0) {
            const double ratio = worst / prev;
            REQUIRE(ratio > 0.4);
            REQUIRE(ratio < 0.6);
        }
        prev = worst;
    }
}

TEST_CASE("corrupted dynamics surface as an integrator error, not silent rescaling") {
    const auto spec = quad_d2();
    FunctionPolicy poison([](double t, int, std::span<const double>, std::span<double> out) {
        for (auto& v : out) v = t > 0.5 ? std::numeric_limits<double>::quiet_NaN() : 0.1;
    });
    const std::vector<double> m0{0.5, 0.5};
    REQUIRE_THROWS_AS(solve_fokker_planck(spec, poison, m0), IntegratorError);
}

TEST_CASE("flow rejects bad starts") {
    const auto spec = quad_d2();
    const std::vector<double> not_mass{0.4, 0.4};
    REQUIRE_THROWS_AS(solve_fokker_planck(spec, ZeroPolicy{}, not_mass), DomainError);
    const std::vector<double> negative{-0.1, 1.1};
    REQUIRE_THROWS_AS(solve_fokker_planck(spec, ZeroPolicy{}, negative), DomainError);
}

TEST_CASE("decentralized control table reproduces the feedback along the flow") {
    const auto spec = quad_d2();
    auto ref = std::make_shared<const ReferenceValue>(reference_value(spec, 64));
    const std::vector<double> m0{0.5, 0.5};
    const auto opt = optimal_trajectory(spec, ref, m0);
    const auto control = decentralize(spec, *opt.policy, opt.flow);
    for (int r = 0; r <= opt.flow.knot_count(); r += 101) {
        const double t = opt.flow.knot_time(r);
        const auto mu = opt.flow.state_at(r);
        for (int i = 0; i < 2; ++i) {
            const auto expect = opt.policy->action(t, i, mu);
            const double* row = control.matrix(t) + i * 2;
            for (int j = 0; j < 2; ++j)
                REQUIRE(row[j] == Catch::Approx(expect[static_cast<std::size_t>(j)]).margin(1e-14));
        }
    }
}
