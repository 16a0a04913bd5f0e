#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mfc/model.hpp"
#include "mfc/rng.hpp"

using namespace mfc;

namespace {

ProblemSpec quad_spec(int d = 2, double bound = 1.0) {
    std::vector<CostTerm> f0(static_cast<std::size_t>(d), CostTerm::zero());
    std::vector<CostTerm> g(static_cast<std::size_t>(d), CostTerm::zero());
    return make_quadratic_spec(d, 1.0, bound, std::move(f0), std::move(g));
}

// Independent brute-force maximizer over an explicit grid on the free
// coordinates, written against pre_hamiltonian only.
double brute_force_h(const ProblemSpec& spec, double t, int i, std::span<const double> m,
                     std::span<const double> z, int steps, std::vector<double>* arg = nullptr) {
    const double bound = std::get<RateBox>(spec.actions).bound;
    std::vector<int> free;
    for (int j = 0; j < spec.d; ++j)
        if (j != i && spec.edge(i, j)) free.push_back(j);
    std::vector<double> a(static_cast<std::size_t>(spec.d), 0.0);
    std::vector<int> idx(free.size(), 0);
    double best = -1e300;
    bool more = true;
    while (more) {
        for (std::size_t q = 0; q < free.size(); ++q)
            a[static_cast<std::size_t>(free[q])] = bound * idx[q] / (steps - 1);
        const double v = pre_hamiltonian(spec, t, i, a, m, z);
        if (v > best) {
            best = v;
            if (arg) *arg = a;
        }
        more = false;
        for (std::size_t q = free.size(); q-- > 0;) {
            if (++idx[q] < steps) {
                more = true;
                break;
            }
            idx[q] = 0;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("pre-Hamiltonian direct substitutions") {
    auto spec = quad_spec(2);
    const std::vector<double> m{0.5, 0.5};

    // single off-diagonal entry 0.3 against z_2 = -0.3: 0.09 - 0.045 = 0.045
    const std::vector<double> a{0.0, 0.3};
    const std::vector<double> z{0.0, -0.3};
    REQUIRE(pre_hamiltonian(spec, 0.0, 0, a, m, z) == Catch::Approx(0.045));

    // z = 0, f == 0 -> 0
    const std::vector<double> zero{0.0, 0.0};
    REQUIRE(pre_hamiltonian(spec, 0.0, 0, zero, m, zero) == Catch::Approx(0.0));

    // a = 0 -> no transport term, only -f0
    ProblemSpec with_f0 = quad_spec(2);
    with_f0.f0[0] = CostTerm::affine({2.0, 1.0});
    const std::vector<double> z2{0.0, 0.7};
    REQUIRE(pre_hamiltonian(with_f0, 0.0, 0, zero, m, z2) ==
            Catch::Approx(-with_f0.f0[0].eval(m)));

    // z_i must be pinned to zero
    const std::vector<double> badz{0.5, 0.0};
    REQUIRE_THROWS_AS(pre_hamiltonian(spec, 0.0, 0, a, m, badz), ArgumentError);
}

TEST_CASE("closed-form Hamiltonian: clamp branches") {
    auto spec = quad_spec(2, 1.0);
    const std::vector<double> m{0.5, 0.5};

    // z_j >= 0 -> that coordinate of a* is 0
    {
        const std::vector<double> z{0.0, 0.5};
        const auto r = hamiltonian(spec, 0.0, 0, m, z);
        REQUIRE(r.exact);
        REQUIRE(r.argmax[1] == 0.0);
        REQUIRE(r.value == Catch::Approx(0.0));
    }
    // interior branch: z_j = -0.3 -> a*_j = 0.3, value 0.045
    {
        const std::vector<double> z{0.0, -0.3};
        const auto r = hamiltonian(spec, 0.0, 0, m, z);
        REQUIRE(r.argmax[1] == Catch::Approx(0.3));
        REQUIRE(r.value == Catch::Approx(0.045));
        const auto bf = brute_force_h(spec, 0.0, 0, m, z, 10001);
        REQUIRE(std::abs(r.value - bf) < 1e-6);
    }
    // saturated branch: z_j = -2, M = 1 -> a*_j = 1, contribution 1.5
    {
        const std::vector<double> z{0.0, -2.0};
        const auto r = hamiltonian(spec, 0.0, 0, m, z);
        REQUIRE(r.argmax[1] == Catch::Approx(1.0));
        REQUIRE(r.value == Catch::Approx(1.5));
        const auto bf = brute_force_h(spec, 0.0, 0, m, z, 10001);
        REQUIRE(std::abs(r.value - bf) < 1e-6);
    }
}

TEST_CASE("closed form agrees with the independent lattice search on random samples") {
    RngStream rng(2024, 0, 0, 0);
    auto spec2 = quad_spec(2, 1.0);
    spec2.f0[0] = CostTerm::quadratic(0.7, {0.3, 0.7});
    spec2.f0[1] = CostTerm::affine({0.2, -0.4});
    const int samples = 1000;
    for (int s = 0; s < samples; ++s) {
        const double x = rng.uniform();
        const std::vector<double> m{x, 1.0 - x};
        const int i = static_cast<int>(rng.below(2));
        std::vector<double> z(2, 0.0);
        z[static_cast<std::size_t>(1 - i)] = 4.0 * rng.uniform() - 2.0;
        const double t = rng.uniform();
        const double closed = hamiltonian_value(spec2, t, i, m, z);
        const double brute = brute_force_h(spec2, t, i, m, z, 1001);
        REQUIRE(std::abs(closed - brute) < 1e-5);
    }

    // a few higher-dimensional samples with the generic lattice route
    auto spec3 = quad_spec(3, 1.0);
    for (int s = 0; s < 25; ++s) {
        const double a = rng.uniform(), b = rng.uniform() * (1 - a);
        const std::vector<double> m{a, b, 1 - a - b};
        const int i = static_cast<int>(rng.below(3));
        std::vector<double> z(3, 0.0);
        for (int j = 0; j < 3; ++j)
            if (j != i) z[static_cast<std::size_t>(j)] = 4.0 * rng.uniform() - 2.0;
        const double closed = hamiltonian_value(spec3, 0.0, i, m, z);
        const auto lattice = hamiltonian_lattice(spec3, 0.0, i, m, z, 1001);
        REQUIRE(std::abs(closed - lattice.value) < 1e-5);
    }
}

TEST_CASE("max property and monotonicity in z") {
    RngStream rng(5, 0, 0, 0);
    auto spec = quad_spec(3, 1.0);
    for (int s = 0; s < 200; ++s) {
        const double a = rng.uniform(), b = rng.uniform() * (1 - a);
        const std::vector<double> m{a, b, 1 - a - b};
        const int i = static_cast<int>(rng.below(3));
        std::vector<double> z(3, 0.0);
        for (int j = 0; j < 3; ++j)
            if (j != i) z[static_cast<std::size_t>(j)] = 4.0 * rng.uniform() - 2.0;
        const double h = hamiltonian_value(spec, 0.0, i, m, z);

        // H >= preH for sampled actions
        std::vector<double> act(3);
        for (int q = 0; q < 5; ++q) {
            for (auto& v : act) v = rng.uniform();
            REQUIRE(h >= pre_hamiltonian(spec, 0.0, i, act, m, z) - 1e-12);
        }

        // nonincreasing in each z_j, j != i (rates are nonnegative)
        for (int j = 0; j < 3; ++j) {
            if (j == i) continue;
            auto zp = z;
            zp[static_cast<std::size_t>(j)] += 0.1;
            REQUIRE(hamiltonian_value(spec, 0.0, i, m, zp) <= h + 1e-12);
        }
    }
}

TEST_CASE("hamiltonian value is attained at the returned argmax") {
    RngStream rng(77, 0, 0, 0);
    auto quad = quad_spec(3, 1.0);
    quad.f0[2] = CostTerm::quadratic(0.3, {0.1, 0.2, 0.7});
    ProblemSpec finite;
    finite.d = 3;
    finite.horizon = 1.0;
    finite.flag = AssumptionFlag::A;
    finite.preset_id = "finite";
    finite.f0 = quad.f0;
    finite.g = quad.g;
    finite.actions = FiniteActionSet{{{0.0, 0.2, 0.9}, {0.5, 0.5, 0.5}, {1.0, 0.0, 0.3}}};
    finite.validate();
    for (const ProblemSpec* spec : {&quad, &finite}) {
        for (int s = 0; s < 100; ++s) {
            const double a = rng.uniform(), b = rng.uniform() * (1 - a);
            const std::vector<double> m{a, b, 1 - a - b};
            const int i = static_cast<int>(rng.below(3));
            std::vector<double> z(3, 0.0);
            for (int j = 0; j < 3; ++j)
                if (j != i) z[static_cast<std::size_t>(j)] = 4.0 * rng.uniform() - 2.0;
            const auto r = hamiltonian(*spec, 0.0, i, m, z);
            REQUIRE(r.value ==
                    Catch::Approx(pre_hamiltonian(*spec, 0.0, i, r.argmax, m, z)).margin(1e-12));
        }
    }
}

TEST_CASE("uniform convexity of the running cost with lambda = 1/2") {
    RngStream rng(6, 0, 0, 0);
    auto spec = quad_spec(3, 1.0);
    spec.f0[1] = CostTerm::trig(0.5, 3.0, {1.0, -1.0, 0.5});
    const std::vector<double> m{0.2, 0.3, 0.5};
    const double lambda = spec.convexity_lambda();
    for (int s = 0; s < 300; ++s) {
        const int i = static_cast<int>(rng.below(3));
        std::vector<double> a(3), b(3);
        for (int j = 0; j < 3; ++j) {
            a[static_cast<std::size_t>(j)] = rng.uniform();
            b[static_cast<std::size_t>(j)] = rng.uniform();
        }
        // grad_a f^i = a_j on free coordinates, 0 elsewhere
        double inner = 0, dist2 = 0;
        for (int j = 0; j < 3; ++j) {
            if (j == i || !spec.edge(i, j)) continue;
            const double dj = b[static_cast<std::size_t>(j)] - a[static_cast<std::size_t>(j)];
            inner += a[static_cast<std::size_t>(j)] * dj;
            dist2 += dj * dj;
        }
        const double lhs = spec.running_cost(0.0, i, b, m) - spec.running_cost(0.0, i, a, m) - inner;
        REQUIRE(lhs >= lambda * dist2 - 1e-12);
    }
}

TEST_CASE("aggregates") {
    auto spec = quad_spec(3, 1.0);
    const std::vector<double> c{1.0, 2.0, 3.0};
    for (int i = 0; i < 3; ++i) spec.g[static_cast<std::size_t>(i)] = CostTerm::affine(c);
    const std::vector<double> m{0.2, 0.3, 0.5};

    // g^i(m) = <c, m> for all i -> G(m) = <c, m>
    REQUIRE(aggregate_G(spec, m) == Catch::Approx(0.2 + 0.6 + 1.5));

    // f == 0 profile -> F == 0
    std::vector<std::vector<double>> zero_profile(3, std::vector<double>(3, 0.0));
    REQUIRE(aggregate_F(spec, 0.0, zero_profile, m) == Catch::Approx(0.0));

    // vertex: G(delta_i) = g^i(delta_i)
    const std::vector<double> vertex{0.0, 1.0, 0.0};
    REQUIRE(aggregate_G(spec, vertex) == Catch::Approx(spec.terminal_cost(1, vertex)));
}

TEST_CASE("finite action sets pick the lexicographically smallest argmax on ties") {
    ProblemSpec spec;
    spec.d = 2;
    spec.horizon = 1.0;
    spec.flag = AssumptionFlag::A;
    spec.preset_id = "finite";
    spec.f0 = {CostTerm::zero(), CostTerm::zero()};
    spec.g = {CostTerm::zero(), CostTerm::zero()};
    // two actions with identical cost and identical (zero) transport against z=0
    spec.actions = FiniteActionSet{{{0.0, 0.5}, {0.5, 0.5}}};
    spec.validate();
    const std::vector<double> m{0.5, 0.5};
    const std::vector<double> z{0.0, 0.0};
    const auto r = hamiltonian(spec, 0.0, 0, m, z);
    // value -1/8 from the 0.5 free coordinate; {0,0.5} is lex-smaller
    REQUIRE(r.value == Catch::Approx(-0.125));
    REQUIRE(r.argmax == std::vector<double>{0.0, 0.5});
    REQUIRE(!r.exact);
}

TEST_CASE("adjacency mask forces rates and costs off masked edges to zero") {
    auto spec = quad_spec(3, 1.0);
    spec.adjacency = {0, 1, 0,
                      0, 0, 1,
                      1, 0, 0};
    const std::vector<double> m{0.3, 0.3, 0.4};
    const std::vector<double> a{0.7, 0.7, 0.7};
    REQUIRE(spec.rate(0.0, 0, 2, a, m) == 0.0);
    REQUIRE(spec.rate(0.0, 0, 1, a, m) == Catch::Approx(0.7));
    // cost only charges the open edge
    REQUIRE(spec.running_cost(0.0, 0, a, m) == Catch::Approx(0.5 * 0.49));
    // closed form keeps masked coordinates at zero
    const std::vector<double> z{0.0, -1.0, -1.0};
    const auto r = hamiltonian(spec, 0.0, 0, m, z);
    REQUIRE(r.argmax[2] == 0.0);
    REQUIRE(r.argmax[1] == Catch::Approx(1.0));
}
