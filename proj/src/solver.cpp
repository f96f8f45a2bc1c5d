#include "flmm/solver.hpp"

#include <cmath>
#include <limits>

#include "flmm/errors.hpp"
#include "flmm/smoothing.hpp"

namespace flmm {

Eigen::MatrixXd blockDiagPenalty(const Eigen::VectorXd& weights, const Eigen::MatrixXd& block) {
    const int L = static_cast<int>(block.rows());
    const int k = static_cast<int>(weights.size());
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(k * L, k * L);
    for (int i = 0; i < k; ++i) out.block(i * L, i * L, L, L) = weights[i] * block;
    return out;
}

Eigen::MatrixXd repairCovariance(const Eigen::MatrixXd& omega, double floor) {
    if (!omega.allFinite()) throw IllConditionedError("covariance has non-finite entries");
    Eigen::MatrixXd sym = 0.5 * (omega + omega.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
    if (eig.info() != Eigen::Success)
        throw IllConditionedError("covariance eigendecomposition failed");
    Eigen::VectorXd vals = eig.eigenvalues();
    if (vals.maxCoeff() > 1e16)
        throw IllConditionedError("covariance scale beyond repair: max eigenvalue " +
                                  std::to_string(vals.maxCoeff()));
    for (int i = 0; i < vals.size(); ++i) vals[i] = std::max(vals[i], floor);
    return eig.eigenvectors() * vals.asDiagonal() * eig.eigenvectors().transpose();
}

Eigen::MatrixXd enforceBlockDiagonal(const Eigen::MatrixXd& omega, int q, int L) {
    if (q <= 1) return omega;
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(omega.rows(), omega.cols());
    for (int k = 0; k < q; ++k)
        out.block(k * L, k * L, L, L) = omega.block(k * L, k * L, L, L);
    return out;
}

namespace {

Eigen::MatrixXd invertSpd(const Eigen::MatrixXd& a, const char* what) {
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() != Eigen::Success)
        throw NumericalError(std::string(what) + ": matrix not positive definite");
    return llt.solve(Eigen::MatrixXd::Identity(a.rows(), a.cols()));
}

Eigen::MatrixXd omegaStarFrom(const Eigen::MatrixXd& omega, const Eigen::MatrixXd& deltaNu) {
    const Eigen::MatrixXd repaired = repairCovariance(omega);
    const Eigen::MatrixXd omegaInv = invertSpd(repaired, "omega");
    return invertSpd(omegaInv + deltaNu, "omega^-1 + deltaNu");
}

} // namespace

StateCache makeStateCache(const DesignMatrices& design, const VarianceState& variance,
                          const Penalties& penalties) {
    if (!(variance.sigmaE2 > 0.0))
        throw DomainError("sigmaE2 must be positive, got " + std::to_string(variance.sigmaE2));
    StateCache cache;
    cache.omegaStar = omegaStarFrom(variance.omega, penalties.nu);
    cache.sigmaStar.reserve(design.subjects.size());
    cache.sigmaStarLlt.reserve(design.subjects.size());
    for (const auto& subj : design.subjects) {
        const int m = static_cast<int>(subj.U.rows());
        Eigen::MatrixXd s = subj.U * cache.omegaStar * subj.U.transpose();
        s.diagonal().array() += variance.sigmaE2;
        Eigen::LLT<Eigen::MatrixXd> llt(s);
        if (llt.info() != Eigen::Success)
            throw NumericalError("working covariance not positive definite (m=" +
                                 std::to_string(m) + ")");
        cache.sigmaStar.push_back(std::move(s));
        cache.sigmaStarLlt.push_back(std::move(llt));
    }
    return cache;
}

namespace {

/// Penalized normal matrix W' S^-1 W + deltaBeta and its factorization.
struct NormalSystem {
    Eigen::MatrixXd solvedW;  // stacked S^-1 W, N x pL
    Eigen::MatrixXd H;        // pL x pL
    Eigen::LDLT<Eigen::MatrixXd> Hldlt;
};

NormalSystem makeNormalSystem(const DesignMatrices& design, const StateCache& cache,
                              const Eigen::MatrixXd& deltaBeta) {
    NormalSystem sys;
    const int pL = design.fixedDim();
    sys.solvedW.resize(design.N, pL);
    sys.H = deltaBeta;
    for (size_t i = 0; i < design.subjects.size(); ++i) {
        const auto& subj = design.subjects[i];
        const Eigen::MatrixXd vi = cache.sigmaStarLlt[i].solve(subj.W);
        sys.solvedW.middleRows(subj.offset, subj.W.rows()) = vi;
        sys.H.noalias() += subj.W.transpose() * vi;
    }
    sys.Hldlt.compute(sys.H);
    const Eigen::VectorXd dvec = sys.Hldlt.vectorD();
    const double minPivot = dvec.cwiseAbs().minCoeff();
    if (sys.Hldlt.info() != Eigen::Success || minPivot < 1e-12 * dvec.cwiseAbs().maxCoeff())
        throw RankDeficiencyError("penalized normal matrix numerically singular; smallest pivot " +
                                  std::to_string(minPivot));
    return sys;
}

} // namespace

Eigen::VectorXd solveTheta(const DesignMatrices& design, const StateCache& cache,
                           const Eigen::MatrixXd& deltaBeta) {
    const NormalSystem sys = makeNormalSystem(design, cache, deltaBeta);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(design.fixedDim());
    for (const auto& subj : design.subjects)
        rhs.noalias() +=
            sys.solvedW.middleRows(subj.offset, subj.W.rows()).transpose() * subj.y;
    return sys.Hldlt.solve(rhs);
}

std::vector<Eigen::VectorXd> solveAlpha(const DesignMatrices& design, const StateCache& cache,
                                        const Eigen::VectorXd& theta) {
    if (theta.size() != design.fixedDim())
        throw ShapeError("theta has length " + std::to_string(theta.size()) + ", expected " +
                         std::to_string(design.fixedDim()));
    std::vector<Eigen::VectorXd> alphas;
    alphas.reserve(design.subjects.size());
    for (size_t i = 0; i < design.subjects.size(); ++i) {
        const auto& subj = design.subjects[i];
        const Eigen::VectorXd resid = subj.y - subj.W * theta;
        alphas.push_back(cache.omegaStar * subj.U.transpose() *
                         cache.sigmaStarLlt[i].solve(resid));
    }
    return alphas;
}

Eigen::MatrixXd projectionP(const DesignMatrices& design, const StateCache& cache,
                            const Eigen::MatrixXd& deltaBeta) {
    const NormalSystem sys = makeNormalSystem(design, cache, deltaBeta);
    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(design.N, design.N);
    for (size_t i = 0; i < design.subjects.size(); ++i) {
        const auto& subj = design.subjects[i];
        const int m = static_cast<int>(subj.W.rows());
        P.block(subj.offset, subj.offset, m, m) =
            cache.sigmaStarLlt[i].solve(Eigen::MatrixXd::Identity(m, m));
    }
    P.noalias() -= sys.solvedW * sys.Hldlt.solve(sys.solvedW.transpose());
    P = 0.5 * (P + P.transpose()).eval();
    return P;
}

double varianceScore(double sigmaE2, const DesignMatrices& design, const Eigen::MatrixXd& omega,
                     const Penalties& penalties, const Eigen::VectorXd& y,
                     const Eigen::MatrixXd* dSigmaStar) {
    if (!(sigmaE2 > 0.0))
        throw DomainError("variance candidate must be positive, got " + std::to_string(sigmaE2));
    VarianceState state{sigmaE2, omega};
    const StateCache cache = makeStateCache(design, state, penalties);
    const Eigen::MatrixXd P = projectionP(design, cache, penalties.beta);

    // LP = dSigmaStar * P (identity derivative when unset)
    const Eigen::MatrixXd* LP = &P;
    Eigen::MatrixXd LPbuf;
    if (dSigmaStar) {
        LPbuf.noalias() = (*dSigmaStar) * P;
        LP = &LPbuf;
    }

    // quadratic part: y' P dS P y
    const Eigen::VectorXd Py = P * y;
    const double quad = dSigmaStar ? Py.dot((*dSigmaStar) * Py) : Py.squaredNorm();

    // trace part: tr(P Sigma P dS) = sum_i tr(Sigma_i [P dS P]_{ii}) using the
    // block-diagonal true covariance Sigma_i = U_i omega U_i' + sigmaE2 I
    double tracePart = 0.0;
    for (const auto& subj : design.subjects) {
        const int m = static_cast<int>(subj.U.rows());
        Eigen::MatrixXd sigmaI = subj.U * omega * subj.U.transpose();
        sigmaI.diagonal().array() += sigmaE2;
        const Eigen::MatrixXd blk =
            P.middleRows(subj.offset, m) * LP->middleCols(subj.offset, m);
        tracePart += (sigmaI.array() * blk.transpose().array()).sum();
    }
    return -tracePart + quad;
}

double solveVariance(const DesignMatrices& design, const Eigen::MatrixXd& omega,
                     const Penalties& penalties, const Eigen::VectorXd& y,
                     std::pair<double, double> bracket) {
    double lo = bracket.first, hi = bracket.second;
    if (!(lo > 0.0) || !(hi > lo)) throw DomainError("invalid variance bracket");
    auto f = [&](double v) { return varianceScore(v, design, omega, penalties, y); };

    double flo = f(lo), fhi = f(hi);
    for (int e = 0; e < 10 && flo * fhi > 0.0; ++e) {
        hi *= 2.0;
        fhi = f(hi);
    }
    for (int e = 0; e < 10 && flo * fhi > 0.0; ++e) {
        lo *= 0.5;
        flo = f(lo);
    }
    if (flo * fhi > 0.0)
        throw RootBracketError("variance score does not change sign on [" + std::to_string(lo) +
                               ", " + std::to_string(hi) + "]");
    if (flo == 0.0) return lo;
    if (fhi == 0.0) return hi;

    // Illinois-damped regula falsi
    double x = 0.5 * (lo + hi);
    int side = 0;
    for (int it = 0; it < 200; ++it) {
        x = (flo * hi - fhi * lo) / (flo - fhi);
        const double span = hi - lo;
        if (!(x > lo) || !(x < hi)) x = 0.5 * (lo + hi);
        const double fx = f(x);
        if (fx == 0.0) return x;
        if (fx * flo > 0.0) {
            lo = x;
            flo = fx;
            if (side == -1) fhi *= 0.5;
            side = -1;
        } else {
            hi = x;
            fhi = fx;
            if (side == 1) flo *= 0.5;
            side = 1;
        }
        if (span <= 1e-8 * std::max(1.0, std::abs(x))) break;
    }
    return x;
}

Eigen::MatrixXd updateOmega(const DesignMatrices& design, const VarianceState& variance,
                            const Penalties& penalties,
                            const std::vector<Eigen::VectorXd>& alphas) {
    const int n = design.n();
    if (static_cast<int>(alphas.size()) != n)
        throw ShapeError("alphas count does not match subject count");
    const int qL = design.randomDim();
    const Eigen::MatrixXd omegaStar = omegaStarFrom(variance.omega, penalties.nu);

    // true-form covariance at the current estimates and its normal system
    std::vector<Eigen::LLT<Eigen::MatrixXd>> sigmaLlt;
    sigmaLlt.reserve(n);
    Eigen::MatrixXd Htilde = penalties.beta;
    for (const auto& subj : design.subjects) {
        Eigen::MatrixXd s = subj.U * variance.omega * subj.U.transpose();
        s.diagonal().array() += variance.sigmaE2;
        Eigen::LLT<Eigen::MatrixXd> llt(s);
        if (llt.info() != Eigen::Success)
            throw NumericalError("covariance not positive definite in omega update");
        Htilde.noalias() += subj.W.transpose() * llt.solve(subj.W);
        sigmaLlt.push_back(std::move(llt));
    }
    Eigen::LDLT<Eigen::MatrixXd> Hldlt(Htilde);
    if (Hldlt.info() != Eigen::Success)
        throw RankDeficiencyError("normal matrix singular in omega update");

    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(qL, qL);
    for (int i = 0; i < n; ++i) {
        const auto& subj = design.subjects[i];
        const Eigen::MatrixXd siU = sigmaLlt[i].solve(subj.U);
        const Eigen::MatrixXd a = subj.U.transpose() * siU;                  // U' S^-1 U
        const Eigen::MatrixXd c = subj.W.transpose() * siU;                  // W' S^-1 U
        const Eigen::MatrixXd uMu = a - c.transpose() * Hldlt.solve(c);
        acc.noalias() += alphas[i] * alphas[i].transpose();
        acc.noalias() += omegaStar;
        acc.noalias() -= omegaStar * uMu * omegaStar;
    }
    Eigen::MatrixXd omegaHat = acc / double(n);
    omegaHat = enforceBlockDiagonal(0.5 * (omegaHat + omegaHat.transpose()), design.q, design.Lr);
    return repairCovariance(omegaHat);
}

void FittedModel::refreshCaches(const DesignMatrices& design) {
    cache = makeStateCache(design, variance, penalties);
    P = projectionP(design, cache, penalties.beta);
}

namespace {

Eigen::VectorXd broadcast(const Eigen::VectorXd& v, int k, const char* what) {
    if (v.size() == k) return v;
    if (v.size() == 1) return Eigen::VectorXd::Constant(k, v[0]);
    throw InvalidConfigError(std::string(what) + " has length " + std::to_string(v.size()) +
                             ", expected " + std::to_string(k) + " (or 1 to broadcast)");
}

double maxAbsDiff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return (a - b).cwiseAbs().maxCoeff();
}

} // namespace

FittedModel fit(const LongitudinalDataset& data, const BSplineBasisd& fixedBasis,
                const BSplineBasisd& randomBasis, const FitConfig& config) {
    const DesignMatrices design = buildDesign(data, fixedBasis, randomBasis);
    const Eigen::MatrixXd rawFixed = penaltyMatrix(fixedBasis);
    const Eigen::MatrixXd rawRandom = penaltyMatrix(randomBasis);
    const int p = design.p, q = design.q;

    FittedModel model;
    model.p = p;
    model.q = q;
    model.fixedBasis = fixedBasis;
    model.randomBasis = randomBasis;

    VarianceState state;
    state.sigmaE2 = 1.0;
    state.omega = Eigen::MatrixXd::Identity(design.randomDim(), design.randomDim());

    // smoothing weights, chosen once up front and then frozen unless asked
    Eigen::VectorXd lambda, eta;
    if (config.lambdaMode == SmoothingMode::Fixed) {
        lambda = broadcast(config.lambdaFixed, p, "lambda");
    } else {
        const SelectLambdaResult sel = selectLambda(design, state, fixedBasis.order,
                                                    config.lambdaLog10Lo, config.lambdaLog10Hi);
        lambda = sel.lambda;
        model.diagnostics.lambdaAtLowerBound = sel.atLowerBound;
        model.diagnostics.lambdaAtUpperBound = sel.atUpperBound;
    }
    Penalties penalties;
    penalties.beta = blockDiagPenalty(lambda, rawFixed);

    if (config.etaMode == SmoothingMode::Fixed) {
        eta = broadcast(config.etaFixed, q, "eta");
        penalties.nu = blockDiagPenalty(eta, rawRandom);
    } else {
        eta = Eigen::VectorXd::Ones(q);
        penalties.nu = blockDiagPenalty(eta, rawRandom);
        StateCache cache0 = makeStateCache(design, state, penalties);
        const Eigen::VectorXd theta0 = solveTheta(design, cache0, penalties.beta);
        const auto alpha0 = solveAlpha(design, cache0, theta0);
        eta = updateEta(alpha0, design, state.sigmaE2, rawRandom, eta);
        penalties.nu = blockDiagPenalty(eta, rawRandom);
    }

    StateCache cache = makeStateCache(design, state, penalties);
    Eigen::VectorXd theta = solveTheta(design, cache, penalties.beta);
    std::vector<Eigen::VectorXd> alphas = solveAlpha(design, cache, theta);

    bool converged = false;
    double delta = std::numeric_limits<double>::infinity();
    int iter = 0;
    for (; iter < config.maxIterations; ++iter) {
        const Eigen::VectorXd thetaPrev = theta;
        const Eigen::MatrixXd omegaPrev = state.omega;
        const double sigmaPrev = state.sigmaE2;

        state.sigmaE2 = solveVariance(design, state.omega, penalties, design.y, config.bracket);

        cache = makeStateCache(design, state, penalties);
        theta = solveTheta(design, cache, penalties.beta);
        alphas = solveAlpha(design, cache, theta);
        state.omega = updateOmega(design, state, penalties, alphas);

        if (config.reselectEachIteration) {
            if (config.lambdaMode == SmoothingMode::Select) {
                const SelectLambdaResult sel = selectLambda(
                    design, state, fixedBasis.order, config.lambdaLog10Lo, config.lambdaLog10Hi);
                lambda = sel.lambda;
                penalties.beta = blockDiagPenalty(lambda, rawFixed);
            }
            if (config.etaMode == SmoothingMode::Select) {
                eta = updateEta(alphas, design, state.sigmaE2, rawRandom, eta);
                penalties.nu = blockDiagPenalty(eta, rawRandom);
            }
        }

        delta = std::max({(theta - thetaPrev).cwiseAbs().maxCoeff(),
                          maxAbsDiff(state.omega, omegaPrev),
                          std::abs(state.sigmaE2 - sigmaPrev)});
        if (delta < config.tol) {
            converged = true;
            ++iter;
            break;
        }
    }
    if (!converged)
        throw ConvergenceError("fit did not converge: last max parameter change " +
                                   std::to_string(delta) + " after " +
                                   std::to_string(config.maxIterations) + " iterations",
                               config.maxIterations, delta);

    // refresh estimates at the final variance state
    cache = makeStateCache(design, state, penalties);
    theta = solveTheta(design, cache, penalties.beta);
    alphas = solveAlpha(design, cache, theta);

    model.theta = theta;
    model.alphas = alphas;
    model.variance = state;
    model.lambda = lambda;
    model.eta = eta;
    model.penalties = penalties;
    model.diagnostics.iterations = iter;
    model.diagnostics.finalDelta = delta;
    model.diagnostics.converged = true;
    model.cache = std::move(cache);
    model.P = projectionP(design, model.cache, penalties.beta);
    return model;
}

} // namespace flmm
