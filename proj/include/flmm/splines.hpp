#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "flmm/errors.hpp"

namespace flmm {

/// Clamped B-spline basis of order `order` (degree order-1) on [0,1] with
/// `interiorKnots` equally spaced interior knots.  The basis has
/// size() = interiorKnots + order functions.  Immutable after construction.
template <typename Scalar = double>
struct BSplineBasis {
    using Vector = Eigen::Vector<Scalar, Eigen::Dynamic>;

    int order = 0;          // r >= 1
    int interiorKnots = 0;  // L0 >= 0
    Vector knots;           // full clamped vector, length size() + order

    int size() const { return interiorKnots + order; }

    static BSplineBasis make(int order, int interiorKnots) {
        if (order < 1)
            throw InvalidConfigError("spline order must be >= 1, got " + std::to_string(order));
        if (interiorKnots < 0)
            throw InvalidConfigError("interior knot count must be >= 0, got " +
                                     std::to_string(interiorKnots));
        BSplineBasis b;
        b.order = order;
        b.interiorKnots = interiorKnots;
        const int L = interiorKnots + order;
        b.knots.resize(L + order);
        for (int i = 0; i < order; ++i) b.knots[i] = Scalar(0);
        for (int j = 1; j <= interiorKnots; ++j)
            b.knots[order - 1 + j] = Scalar(j) / Scalar(interiorKnots + 1);
        for (int i = L; i < L + order; ++i) b.knots[i] = Scalar(1);
        return b;
    }
};

namespace detail {

/// Index of the knot span containing t: knots[span] <= t < knots[span+1],
/// right-continuous at interior knots; t = 1 falls in the last nonempty span.
template <typename Scalar>
int findSpan(const BSplineBasis<Scalar>& basis, Scalar t) {
    const int L = basis.size();
    const int r = basis.order;
    if (t >= Scalar(1)) return L - 1;
    int lo = r - 1, hi = L;
    while (hi - lo > 1) {
        const int mid = (lo + hi) / 2;
        if (t < basis.knots[mid])
            hi = mid;
        else
            lo = mid;
    }
    return lo;
}

/// Values and first/second derivatives of all basis functions at t, by
/// differentiating the triangular recursion level by level.  Zero knot
/// differences (repeated clamped knots) drop their term: the corresponding
/// lower-order function is identically zero.  Derivatives at knot points are
/// one-sided limits, from the right except at t = 1.
template <typename Scalar>
void basisAllDerivatives(const BSplineBasis<Scalar>& basis, Scalar t, int maxDeriv,
                         Eigen::Vector<Scalar, Eigen::Dynamic>* value,
                         Eigen::Vector<Scalar, Eigen::Dynamic>* d1,
                         Eigen::Vector<Scalar, Eigen::Dynamic>* d2) {
    using Vec = Eigen::Vector<Scalar, Eigen::Dynamic>;
    const int r = basis.order;
    const int L = basis.size();
    const auto& knots = basis.knots;
    const int nFuncs = L + r - 1;  // order-1 functions at the bottom level

    Vec b = Vec::Zero(nFuncs), db = Vec::Zero(nFuncs), ddb = Vec::Zero(nFuncs);
    b[findSpan(basis, t)] = Scalar(1);

    Vec bp, dbp, ddbp;
    for (int s = 1; s < r; ++s) {  // s+1 = order of the level being built
        bp = b;
        dbp = db;
        ddbp = ddb;
        b.setZero();
        db.setZero();
        ddb.setZero();
        const int count = nFuncs - s;
        for (int i = 0; i < count; ++i) {
            const Scalar xden = knots[i + s] - knots[i];
            if (xden > Scalar(0)) {
                const Scalar x = (t - knots[i]) / xden;
                b[i] += x * bp[i];
                if (maxDeriv >= 1) db[i] += bp[i] / xden + x * dbp[i];
                if (maxDeriv >= 2) ddb[i] += Scalar(2) * dbp[i] / xden + x * ddbp[i];
            }
            const Scalar yden = knots[i + s + 1] - knots[i + 1];
            if (yden > Scalar(0)) {
                const Scalar y = (knots[i + s + 1] - t) / yden;
                b[i] += y * bp[i + 1];
                if (maxDeriv >= 1) db[i] += -bp[i + 1] / yden + y * dbp[i + 1];
                if (maxDeriv >= 2) ddb[i] += Scalar(-2) * dbp[i + 1] / yden + y * ddbp[i + 1];
            }
        }
    }
    if (value) *value = b.head(L);
    if (d1) *d1 = db.head(L);
    if (d2) *d2 = ddb.head(L);
}

template <typename Scalar>
void checkDomain(Scalar t) {
    if (!(t >= Scalar(0) && t <= Scalar(1)))
        throw DomainError("evaluation point outside [0,1]: " + std::to_string(double(t)));
}

} // namespace detail

/// Basis values at t.  Nonnegative, at most `order` consecutive nonzeros,
/// sums to one.
template <typename Scalar>
Eigen::Vector<Scalar, Eigen::Dynamic> evalBasis(const BSplineBasis<Scalar>& basis, Scalar t) {
    detail::checkDomain(t);
    Eigen::Vector<Scalar, Eigen::Dynamic> v;
    detail::basisAllDerivatives<Scalar>(basis, t, 0, &v, nullptr, nullptr);
    return v;
}

/// Second derivatives of the basis at t (one-sided limits at knots).
/// Entries sum to zero; identically zero for order <= 2.
template <typename Scalar>
Eigen::Vector<Scalar, Eigen::Dynamic> evalBasisSecondDeriv(const BSplineBasis<Scalar>& basis,
                                                           Scalar t) {
    detail::checkDomain(t);
    Eigen::Vector<Scalar, Eigen::Dynamic> v;
    detail::basisAllDerivatives<Scalar>(basis, t, 2, nullptr, nullptr, &v);
    return v;
}

/// Gauss-Legendre nodes and weights on [-1,1].
inline void gaussLegendre(int n, std::vector<double>& nodes, std::vector<double>& weights) {
    nodes.assign(n, 0.0);
    weights.assign(n, 0.0);
    for (int i = 0; i < n; ++i) {
        double x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
        double pp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = 0.0;
            for (int k = 0; k < n; ++k) {
                const double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * k + 1.0) * x * p1 - k * p2) / (k + 1.0);
            }
            pp = n * (x * p0 - p1) / (x * x - 1.0);
            const double dx = p0 / pp;
            x -= dx;
            if (std::abs(dx) < 1e-15) break;
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * pp * pp);
    }
}

/// Roughness penalty: the matrix of integrated products of second derivatives
/// of the basis functions over [0,1].  Computed span by span with fixed-order
/// Gauss-Legendre quadrature, exact for the piecewise-polynomial integrand.
/// Symmetric PSD; annihilates constants; zero for order <= 2.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> penaltyMatrix(
    const BSplineBasis<Scalar>& basis) {
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    const int L = basis.size();
    Mat M = Mat::Zero(L, L);
    if (basis.order <= 2) return M;

    const int nNodes = basis.order;  // exact beyond degree 2(order-2)
    std::vector<double> gx, gw;
    gaussLegendre(nNodes, gx, gw);

    for (int k = basis.order - 1; k < L; ++k) {
        const Scalar a = basis.knots[k], b = basis.knots[k + 1];
        if (!(b > a)) continue;
        const Scalar half = (b - a) / Scalar(2), mid = (a + b) / Scalar(2);
        for (int g = 0; g < nNodes; ++g) {
            const Scalar t = mid + half * Scalar(gx[g]);
            const auto d2 = evalBasisSecondDeriv(basis, t);
            M.template selfadjointView<Eigen::Lower>().rankUpdate(d2, half * Scalar(gw[g]));
        }
    }
    M = Mat(M.template selfadjointView<Eigen::Lower>());
    return M;
}

using BSplineBasisd = BSplineBasis<double>;

} // namespace flmm
