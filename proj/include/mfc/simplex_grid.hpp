#pragma once

// Discretized simplex S_d^N = S_d ∩ (1/N)Z^d: enumeration, indexing, neighbor
// moves m -> m + (delta_j - delta_i)/N, local-chart conversion and discrete
// derivatives. Points are stored as integer count vectors (sum N) so that
// membership and boundary tests are exact; no floating point is involved in
// the grid topology.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mfc/errors.hpp"

namespace mfc {

// ---------------------------------------------------------------------------
// SimplexPoint: one grid point, counts k_i >= 0 with sum_i k_i = N.
// ---------------------------------------------------------------------------
class SimplexPoint {
public:
    SimplexPoint(std::vector<int> counts, int resolution)
        : counts_(std::move(counts)), resolution_(resolution) {
        if (resolution_ < 1) throw ArgumentError("SimplexPoint: resolution must be >= 1");
        if (counts_.size() < 2) throw ArgumentError("SimplexPoint: need dimension >= 2");
        int sum = 0;
        for (int k : counts_) {
            if (k < 0) throw DomainError("SimplexPoint: negative count");
            sum += k;
        }
        if (sum != resolution_)
            throw DomainError("SimplexPoint: counts sum to " + std::to_string(sum) +
                              ", expected " + std::to_string(resolution_));
    }

    int dimension() const { return static_cast<int>(counts_.size()); }
    int resolution() const { return resolution_; }
    const std::vector<int>& counts() const { return counts_; }
    int count(int i) const { return counts_[static_cast<std::size_t>(i)]; }

    double coord(int i) const {
        return static_cast<double>(counts_[static_cast<std::size_t>(i)]) / resolution_;
    }
    std::vector<double> coords() const {
        std::vector<double> m(counts_.size());
        for (std::size_t i = 0; i < counts_.size(); ++i)
            m[i] = static_cast<double>(counts_[i]) / resolution_;
        return m;
    }

    bool operator==(const SimplexPoint& o) const {
        return resolution_ == o.resolution_ && counts_ == o.counts_;
    }

private:
    std::vector<int> counts_;
    int resolution_;
};

// ---------------------------------------------------------------------------
// ChartPoint: the simplex seen in R^{d-1}, last coordinate implied.
// ---------------------------------------------------------------------------
struct ChartPoint {
    std::vector<double> x;  // length d-1

    int dimension() const { return static_cast<int>(x.size()) + 1; }
    double last() const {
        double s = 0;
        for (double v : x) s += v;
        return 1.0 - s;
    }
};

inline std::uint64_t binomial_u64(int n, int r) {
    if (r < 0 || r > n) return 0;
    r = std::min(r, n - r);
    std::uint64_t v = 1;
    for (int i = 1; i <= r; ++i) v = v * static_cast<std::uint64_t>(n - r + i) / i;
    return v;
}

// ---------------------------------------------------------------------------
// SimplexGrid: all of S_d^N in lexicographically descending count order, with
// an O(d) combinatorial index map and a precomputed neighbor table.
// ---------------------------------------------------------------------------
class SimplexGrid {
public:
    static constexpr std::size_t kDefaultCap = 5'000'000;

    SimplexGrid(int d, int n, std::size_t memory_cap = kDefaultCap) : d_(d), n_(n) {
        if (d < 2) throw ArgumentError("SimplexGrid: d must be >= 2");
        if (n < 1) throw ArgumentError("SimplexGrid: N must be >= 1");

        const std::uint64_t count = binomial_u64(n + d - 1, d - 1);
        if (count > memory_cap)
            throw SizingError("SimplexGrid: grid for d=" + std::to_string(d) + ", N=" +
                              std::to_string(n) + " needs " + std::to_string(count) +
                              " points, above cap " + std::to_string(memory_cap));
        size_ = static_cast<std::size_t>(count);

        // Pascal rows up to n + d, columns 0..d-1; enough for the rank formula.
        binom_.assign(static_cast<std::size_t>(n_ + d_ + 1) * d_, 0);
        for (int nn = 0; nn <= n_ + d_; ++nn)
            for (int rr = 0; rr < d_; ++rr) {
                std::uint64_t& cell = binom_[static_cast<std::size_t>(nn) * d_ + rr];
                if (rr == 0) cell = 1;
                else if (nn == 0) cell = 0;
                else cell = binom_[static_cast<std::size_t>(nn - 1) * d_ + rr] +
                            binom_[static_cast<std::size_t>(nn - 1) * d_ + rr - 1];
            }

        enumerate();
        build_neighbors();
    }

    int dim() const { return d_; }
    int resolution() const { return n_; }
    std::size_t size() const { return size_; }

    std::span<const int> counts(std::size_t idx) const {
        return {counts_.data() + idx * d_, static_cast<std::size_t>(d_)};
    }
    std::span<const double> coords(std::size_t idx) const {
        return {coords_.data() + idx * d_, static_cast<std::size_t>(d_)};
    }
    SimplexPoint point(std::size_t idx) const {
        auto c = counts(idx);
        return SimplexPoint(std::vector<int>(c.begin(), c.end()), n_);
    }

    // Rank in descending lexicographic order. O(d) via hockey-stick sums.
    std::size_t index_of(std::span<const int> k) const {
        if (static_cast<int>(k.size()) != d_) throw ArgumentError("index_of: wrong dimension");
        std::uint64_t rank = 0;
        int rem = n_;
        for (int p = 0; p < d_ - 1; ++p) {
            const int kp = k[static_cast<std::size_t>(p)];
            if (kp < 0 || kp > rem) throw DomainError("index_of: counts not on the grid");
            // points with p-th coordinate > kp, prefix fixed: C(rem-kp-1 + d-p-1, d-p-1)
            rank += binom(rem - kp - 1 + d_ - p - 1, d_ - p - 1);
            rem -= kp;
        }
        if (k[static_cast<std::size_t>(d_ - 1)] != rem)
            throw DomainError("index_of: counts do not sum to N");
        return static_cast<std::size_t>(rank);
    }
    std::size_t index_of(const SimplexPoint& p) const {
        if (p.resolution() != n_) throw ArgumentError("index_of: resolution mismatch");
        return index_of(std::span<const int>(p.counts()));
    }

    // Index after the move (delta_j - delta_i)/N, or -1 when k_i = 0.
    std::int64_t neighbor_index(std::size_t idx, int i, int j) const {
        return neighbors_[(idx * d_ + i) * d_ + j];
    }

    // Nearest grid point to arbitrary simplex coordinates (Euclidean-ish:
    // round, then fix the count sum by largest remainders).
    std::size_t nearest_index(std::span<const double> m) const {
        if (static_cast<int>(m.size()) != d_) throw ArgumentError("nearest_index: wrong dimension");
        std::vector<int> k(d_);
        std::vector<double> frac(d_);
        int sum = 0;
        for (int i = 0; i < d_; ++i) {
            const double scaled = m[static_cast<std::size_t>(i)] * n_;
            double r = std::nearbyint(scaled);
            if (r < 0) r = 0;
            k[static_cast<std::size_t>(i)] = static_cast<int>(r);
            frac[static_cast<std::size_t>(i)] = scaled - r;
            sum += k[static_cast<std::size_t>(i)];
        }
        while (sum != n_) {
            const int step = sum < n_ ? 1 : -1;
            int best = -1;
            double best_gain = -2.0;
            for (int i = 0; i < d_; ++i) {
                if (step < 0 && k[static_cast<std::size_t>(i)] == 0) continue;
                const double gain = step * frac[static_cast<std::size_t>(i)];
                if (gain > best_gain) {
                    best_gain = gain;
                    best = i;
                }
            }
            k[static_cast<std::size_t>(best)] += step;
            frac[static_cast<std::size_t>(best)] -= step;
            sum += step;
        }
        return index_of(k);
    }

    void dump_csv(std::ostream& os) const {
        os << "index";
        for (int i = 1; i <= d_; ++i) os << ",k_" << i;
        os << "\n";
        for (std::size_t p = 0; p < size_; ++p) {
            os << p;
            for (int i = 0; i < d_; ++i) os << "," << counts_[p * d_ + i];
            os << "\n";
        }
    }

private:
    std::uint64_t binom(int n, int r) const {
        if (r < 0 || r >= d_ || n < 0) return 0;
        return binom_[static_cast<std::size_t>(n) * d_ + r];
    }

    void enumerate() {
        counts_.reserve(size_ * d_);
        std::vector<int> k(static_cast<std::size_t>(d_), 0);
        emit(k, 0, n_);
        coords_.resize(size_ * d_);
        for (std::size_t p = 0; p < size_; ++p)
            for (int i = 0; i < d_; ++i)
                coords_[p * d_ + i] = static_cast<double>(counts_[p * d_ + i]) / n_;
    }

    void emit(std::vector<int>& k, int pos, int rem) {
        if (pos == d_ - 1) {
            k[static_cast<std::size_t>(pos)] = rem;
            counts_.insert(counts_.end(), k.begin(), k.end());
            return;
        }
        for (int c = rem; c >= 0; --c) {  // descending: stable, reproducible indices
            k[static_cast<std::size_t>(pos)] = c;
            emit(k, pos + 1, rem - c);
        }
    }

    void build_neighbors() {
        neighbors_.assign(size_ * d_ * d_, -1);
        std::vector<int> k(static_cast<std::size_t>(d_));
        for (std::size_t p = 0; p < size_; ++p) {
            for (int i = 0; i < d_; ++i) {
                if (counts_[p * d_ + i] == 0) continue;
                for (int j = 0; j < d_; ++j) {
                    if (i == j) continue;
                    for (int q = 0; q < d_; ++q) k[static_cast<std::size_t>(q)] = counts_[p * d_ + q];
                    k[static_cast<std::size_t>(i)] -= 1;
                    k[static_cast<std::size_t>(j)] += 1;
                    neighbors_[(p * d_ + i) * d_ + j] =
                        static_cast<std::int64_t>(index_of(k));
                }
            }
        }
    }

    int d_;
    int n_;
    std::size_t size_ = 0;
    std::vector<std::uint64_t> binom_;
    std::vector<int> counts_;        // size_ * d_
    std::vector<double> coords_;     // size_ * d_
    std::vector<std::int64_t> neighbors_;  // size_ * d_ * d_, -1 = absent
};

inline std::shared_ptr<const SimplexGrid> enumerate_grid(
    int d, int n, std::size_t memory_cap = SimplexGrid::kDefaultCap) {
    return std::make_shared<const SimplexGrid>(d, n, memory_cap);
}

// ---------------------------------------------------------------------------
// Point-level operations
// ---------------------------------------------------------------------------

// m + (delta_j - delta_i)/N; absent when k_i = 0. States are 0-based.
inline std::optional<SimplexPoint> neighbor(const SimplexPoint& m, int i, int j) {
    const int d = m.dimension();
    if (i == j) throw ArgumentError("neighbor: i == j");
    if (i < 0 || i >= d || j < 0 || j >= d) throw ArgumentError("neighbor: state out of range");
    if (m.count(i) == 0) return std::nullopt;
    std::vector<int> k = m.counts();
    k[static_cast<std::size_t>(i)] -= 1;
    k[static_cast<std::size_t>(j)] += 1;
    return SimplexPoint(std::move(k), m.resolution());
}

// Empirical measure of a state profile; states are 0-based in [0, d).
inline SimplexPoint empirical_measure(std::span<const int> states, int d) {
    if (states.empty()) throw ArgumentError("empirical_measure: empty profile");
    std::vector<int> k(static_cast<std::size_t>(d), 0);
    for (int s : states) {
        if (s < 0 || s >= d)
            throw ArgumentError("empirical_measure: state " + std::to_string(s) +
                                " out of range [0," + std::to_string(d) + ")");
        k[static_cast<std::size_t>(s)] += 1;
    }
    return SimplexPoint(std::move(k), static_cast<int>(states.size()));
}

inline ChartPoint to_chart(const SimplexPoint& m) {
    ChartPoint x;
    x.x.resize(static_cast<std::size_t>(m.dimension() - 1));
    for (int j = 0; j + 1 < m.dimension(); ++j) x.x[static_cast<std::size_t>(j)] = m.coord(j);
    return x;
}

inline ChartPoint to_chart(std::span<const double> m) {
    ChartPoint x;
    x.x.assign(m.begin(), m.end() - 1);
    return x;
}

// Full simplex coordinates from a chart point; validates the domain.
inline std::vector<double> from_chart(const ChartPoint& x, double tol = 1e-12) {
    double s = 0;
    for (double v : x.x) {
        if (v < -tol) throw DomainError("from_chart: negative chart coordinate");
        s += v;
    }
    if (s > 1.0 + tol) throw DomainError("from_chart: coordinates sum above 1");
    std::vector<double> m(x.x.begin(), x.x.end());
    m.push_back(1.0 - s);
    return m;
}

// Exact reconstruction of a grid point from its chart image.
inline SimplexPoint from_chart(const ChartPoint& x, int resolution) {
    std::vector<int> k;
    k.reserve(x.x.size() + 1);
    int sum = 0;
    for (double v : x.x) {
        const int c = static_cast<int>(std::nearbyint(v * resolution));
        if (c < 0 || std::abs(v * resolution - c) > 1e-6)
            throw DomainError("from_chart: not a grid point at this resolution");
        k.push_back(c);
        sum += c;
    }
    if (sum > resolution) throw DomainError("from_chart: coordinates sum above 1");
    k.push_back(resolution - sum);
    return SimplexPoint(std::move(k), resolution);
}

// D^{N,i} v(m): component j is N [v(m + (delta_j - delta_i)/N) - v(m)].
// Component i is exactly 0; components with absent neighbors are 0 (they only
// ever get multiplied by m_i = 0 downstream).
inline void discrete_derivative_into(const SimplexGrid& grid, std::span<const double> field,
                                     std::size_t idx, int i, std::span<double> out) {
    const int d = grid.dim();
    const double scale = grid.resolution();
    const double base = field[idx];
    for (int j = 0; j < d; ++j) {
        if (j == i) {
            out[static_cast<std::size_t>(j)] = 0.0;
            continue;
        }
        const std::int64_t nb = grid.neighbor_index(idx, i, j);
        out[static_cast<std::size_t>(j)] =
            nb < 0 ? 0.0 : scale * (field[static_cast<std::size_t>(nb)] - base);
    }
}

inline std::vector<double> discrete_derivative(const SimplexGrid& grid,
                                               std::span<const double> field,
                                               std::size_t idx, int i) {
    if (field.size() != grid.size()) throw ArgumentError("discrete_derivative: field/grid size mismatch");
    if (i < 0 || i >= grid.dim()) throw ArgumentError("discrete_derivative: state out of range");
    std::vector<double> out(static_cast<std::size_t>(grid.dim()));
    discrete_derivative_into(grid, field, idx, i, out);
    return out;
}

// Interior lower bound mu^i_t >= mu^i_0 exp(-T M (d-1)) for any admissible flow.
inline double interior_lower_bound(double m0_i, double horizon, double rate_bound, int d) {
    return m0_i * std::exp(-horizon * rate_bound * (d - 1));
}

}  // namespace mfc
