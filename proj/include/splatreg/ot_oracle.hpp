#pragma once

// Exact (unregularized) optimal transport for small instances. Used to
// validate the entropic solver as epsilon shrinks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <queue>
#include <span>
#include <vector>

#include "splatreg/bures.hpp"

namespace splatreg {

struct ExactTransport {
    std::vector<double> coupling;  // row-major rows x cols
    double cost = 0.0;
    std::vector<std::size_t> permutation;  // filled in the assignment regime only
};

inline constexpr std::size_t kMaxAssignmentSize = 8;
inline constexpr std::size_t kMaxTransportCells = 64;

/// Brute force over all n! assignments; square uniform instances only.
inline ExactTransport assignment_bruteforce(const CostMatrix& c) {
    const std::size_t n = c.rows();
    if (n != c.cols() || n == 0 || n > kMaxAssignmentSize) {
        throw Error(ErrorCode::TooLarge, "assignment brute force needs a square matrix with n <= 8");
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<std::size_t> best = perm;
    double best_sum = std::numeric_limits<double>::infinity();
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += c(i, perm[i]);
        if (s < best_sum) {
            best_sum = s;
            best = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));

    ExactTransport out;
    out.coupling.assign(n * n, 0.0);
    const double w = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) out.coupling[i * n + best[i]] = w;
    out.cost = best_sum * w;
    out.permutation = best;
    return out;
}

/// Transportation simplex: north-west-corner basis, u/v potentials, and
/// cycle pivots with Bland's rule until no reduced cost is negative.
inline ExactTransport transportation_simplex(const CostMatrix& c, std::span<const double> w_a,
                                             std::span<const double> w_b) {
    const std::size_t m = c.rows();
    const std::size_t n = c.cols();
    if (m == 0 || n == 0 || m * n > kMaxTransportCells) {
        throw Error(ErrorCode::TooLarge, "transportation simplex limited to M*N <= 64");
    }
    if (w_a.size() != m || w_b.size() != n) {
        throw Error(ErrorCode::DimensionMismatch, "marginals do not match cost matrix");
    }

    std::vector<double> x(m * n, 0.0);
    std::vector<char> basic(m * n, 0);
    {
        std::vector<double> supply(w_a.begin(), w_a.end());
        std::vector<double> demand(w_b.begin(), w_b.end());
        std::size_t i = 0, k = 0;
        while (i < m && k < n) {
            const double q = std::min(supply[i], demand[k]);
            x[i * n + k] = q;
            basic[i * n + k] = 1;
            supply[i] -= q;
            demand[k] -= q;
            if (i == m - 1) {
                ++k;
            } else if (k == n - 1) {
                ++i;
            } else if (supply[i] <= demand[k]) {
                ++i;
            } else {
                ++k;
            }
        }
        // The last cell absorbs floating-point residue of the marginals.
        x[(m - 1) * n + (n - 1)] += std::max(0.0, supply[m - 1]);
    }

    // Nodes 0..m-1 are rows, m..m+n-1 are columns; basic cells are tree edges.
    const std::size_t nodes = m + n;
    std::vector<double> pot(nodes);
    std::vector<int> parent(nodes);
    std::vector<std::size_t> parent_cell(nodes);

    auto build_tree = [&]() {
        std::fill(parent.begin(), parent.end(), -2);
        std::queue<std::size_t> todo;
        parent[0] = -1;
        pot[0] = 0.0;
        todo.push(0);
        while (!todo.empty()) {
            const std::size_t u = todo.front();
            todo.pop();
            if (u < m) {
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t cell = u * n + k;
                    const std::size_t v = m + k;
                    if (basic[cell] && parent[v] == -2) {
                        parent[v] = static_cast<int>(u);
                        parent_cell[v] = cell;
                        pot[v] = c(u, k) - pot[u];
                        todo.push(v);
                    }
                }
            } else {
                const std::size_t k = u - m;
                for (std::size_t i = 0; i < m; ++i) {
                    const std::size_t cell = i * n + k;
                    if (basic[cell] && parent[i] == -2) {
                        parent[i] = static_cast<int>(u);
                        parent_cell[i] = cell;
                        pot[i] = c(i, k) - pot[u];
                        todo.push(i);
                    }
                }
            }
        }
    };

    auto path_to_root = [&](std::size_t v) {
        std::vector<std::size_t> path{v};
        while (parent[v] >= 0) {
            v = static_cast<std::size_t>(parent[v]);
            path.push_back(v);
        }
        return path;
    };

    for (int iter = 0; iter < 10000; ++iter) {
        build_tree();
        std::size_t entering = m * n;
        for (std::size_t cell = 0; cell < m * n && entering == m * n; ++cell) {
            if (basic[cell]) continue;
            const std::size_t i = cell / n, k = cell % n;
            const double reduced = c(i, k) - pot[i] - pot[m + k];
            if (reduced < -1e-12 * std::max(1.0, std::abs(c(i, k)))) entering = cell;
        }
        if (entering == m * n) break;

        // Cycle: entering cell (row i -> column k), then the tree path k ... i.
        const std::size_t ei = entering / n, ek = entering % n;
        const auto pa = path_to_root(ei);
        const auto pb = path_to_root(m + ek);
        std::size_t lca = pa.back();
        std::size_t ia = pa.size(), ib = pb.size();
        while (ia > 0 && ib > 0 && pa[ia - 1] == pb[ib - 1]) {
            lca = pa[ia - 1];
            --ia;
            --ib;
        }
        (void)lca;
        // Tree edges from column k up to the LCA, then down to row i.
        std::vector<std::size_t> cells;
        for (std::size_t j = 0; j < ib; ++j) cells.push_back(parent_cell[pb[j]]);
        std::vector<std::size_t> down;
        for (std::size_t j = 0; j < ia; ++j) down.push_back(parent_cell[pa[j]]);
        std::reverse(down.begin(), down.end());
        cells.insert(cells.end(), down.begin(), down.end());

        // Alternating signs around the cycle: entering is +, first tree edge -.
        double delta = std::numeric_limits<double>::infinity();
        std::size_t leaving = m * n;
        for (std::size_t j = 0; j < cells.size(); j += 2) {
            const std::size_t cell = cells[j];
            if (x[cell] < delta || (x[cell] == delta && cell < leaving)) {
                delta = x[cell];
                leaving = cell;
            }
        }
        for (std::size_t j = 0; j < cells.size(); ++j) {
            x[cells[j]] += (j % 2 == 0) ? -delta : delta;
        }
        x[entering] = delta;
        x[leaving] = 0.0;
        basic[entering] = 1;
        basic[leaving] = 0;
    }

    ExactTransport out;
    out.coupling.assign(m * n, 0.0);
    for (std::size_t cell = 0; cell < m * n; ++cell) {
        const double v = std::max(0.0, x[cell]);
        out.coupling[cell] = v;
        out.cost += v * c.data()[cell];
    }
    return out;
}

/// Globally optimal unregularized transport. Uniform square instances with
/// n <= 8 use the permutation brute force; otherwise M*N <= 64 is solved as
/// a transportation LP.
inline ExactTransport exact_ot_oracle(const CostMatrix& c, std::span<const double> w_a,
                                      std::span<const double> w_b) {
    const std::size_t m = c.rows();
    const std::size_t n = c.cols();
    if (w_a.size() != m || w_b.size() != n) {
        throw Error(ErrorCode::DimensionMismatch, "marginals do not match cost matrix");
    }
    auto uniform = [](std::span<const double> w) {
        const double u = 1.0 / static_cast<double>(w.size());
        return std::all_of(w.begin(), w.end(), [&](double x) { return std::abs(x - u) <= 1e-12; });
    };
    if (m == n && m <= kMaxAssignmentSize && uniform(w_a) && uniform(w_b)) {
        return assignment_bruteforce(c);
    }
    if (m * n <= kMaxTransportCells) return transportation_simplex(c, w_a, w_b);
    throw Error(ErrorCode::TooLarge, "exact oracle limited to n <= 8 assignments or M*N <= 64");
}

}  // namespace splatreg
