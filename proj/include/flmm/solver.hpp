#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <utility>
#include <vector>

#include "flmm/design.hpp"

namespace flmm {

/// Residual variance and random-coefficient covariance.  omega is
/// (q*Lr) x (q*Lr), block diagonal with one L x L block per random covariate.
struct VarianceState {
    double sigmaE2 = 1.0;
    Eigen::MatrixXd omega;
};

/// Assembled roughness penalties: beta is Diag{lambda_k * Delta} over the p
/// fixed expansions, nu is Diag{eta_k * Delta_r} over the q random ones.
struct Penalties {
    Eigen::MatrixXd beta;  // (p*Lf) x (p*Lf)
    Eigen::MatrixXd nu;    // (q*Lr) x (q*Lr)
};

Eigen::MatrixXd blockDiagPenalty(const Eigen::VectorXd& weights, const Eigen::MatrixXd& block);

/// Symmetrize and floor eigenvalues at `floor`.  Throws IllConditionedError if
/// the matrix is non-finite or its scale is beyond repair.
Eigen::MatrixXd repairCovariance(const Eigen::MatrixXd& omega, double floor = 1e-10);

/// Enforce the Diag{Omega_1..Omega_q} structure by zeroing cross-covariate
/// blocks (no-op for q = 1).
Eigen::MatrixXd enforceBlockDiagonal(const Eigen::MatrixXd& omega, int q, int L);

/// Factorized per-subject working covariances at one variance state:
/// omegaStar = (omega^-1 + nu)^-1 and sigmaStar_i = U_i omegaStar U_i' + sigmaE2 I.
struct StateCache {
    Eigen::MatrixXd omegaStar;
    std::vector<Eigen::MatrixXd> sigmaStar;
    std::vector<Eigen::LLT<Eigen::MatrixXd>> sigmaStarLlt;
};

StateCache makeStateCache(const DesignMatrices& design, const VarianceState& variance,
                          const Penalties& penalties);

/// Penalized GLS estimate of the stacked fixed coefficients.
Eigen::VectorXd solveTheta(const DesignMatrices& design, const StateCache& cache,
                           const Eigen::MatrixXd& deltaBeta);

/// Shrunken per-subject random coefficients given theta.
std::vector<Eigen::VectorXd> solveAlpha(const DesignMatrices& design, const StateCache& cache,
                                        const Eigen::VectorXd& theta);

/// N x N projection used by the variance estimating equation:
/// P = S^-1 - S^-1 W (W' S^-1 W + deltaBeta)^-1 W' S^-1 with S the working
/// covariance.  Symmetric; annihilates W exactly when deltaBeta = 0.
Eigen::MatrixXd projectionP(const DesignMatrices& design, const StateCache& cache,
                            const Eigen::MatrixXd& deltaBeta);

/// Bias-corrected REML-type score for the residual variance evaluated at the
/// candidate value.  dSigmaStar = nullptr means the identity derivative (the
/// single residual-variance component).
double varianceScore(double sigmaE2, const DesignMatrices& design, const Eigen::MatrixXd& omega,
                     const Penalties& penalties, const Eigen::VectorXd& y,
                     const Eigen::MatrixXd* dSigmaStar = nullptr);

/// Root of the variance score on the bracket, expanded geometrically (up to
/// 2^10 on each side) until the score changes sign.  Relative tolerance 1e-8.
double solveVariance(const DesignMatrices& design, const Eigen::MatrixXd& omega,
                     const Penalties& penalties, const Eigen::VectorXd& y,
                     std::pair<double, double> bracket = {1e-6, 1e2});

/// One fixed-point update of the random-coefficient covariance given the
/// current state and shrunken coefficients.  Result is symmetrized,
/// block-diagonal enforced, and eigenvalue-floored.
Eigen::MatrixXd updateOmega(const DesignMatrices& design, const VarianceState& variance,
                            const Penalties& penalties,
                            const std::vector<Eigen::VectorXd>& alphas);

enum class SmoothingMode { Select, Fixed };

struct FitConfig {
    SmoothingMode lambdaMode = SmoothingMode::Select;
    SmoothingMode etaMode = SmoothingMode::Select;
    Eigen::VectorXd lambdaFixed;  // used when lambdaMode == Fixed; scalar broadcasts
    Eigen::VectorXd etaFixed;     // used when etaMode == Fixed; scalar broadcasts
    double lambdaLog10Lo = -4.0;
    double lambdaLog10Hi = 8.0;
    bool reselectEachIteration = false;
    double tol = 1e-6;
    int maxIterations = 200;
    std::pair<double, double> bracket = {1e-6, 1e2};
};

struct FitDiagnostics {
    int iterations = 0;
    double finalDelta = 0.0;
    bool converged = false;
    bool lambdaAtLowerBound = false;
    bool lambdaAtUpperBound = false;
};

struct FittedModel {
    int p = 0, q = 0;
    BSplineBasisd fixedBasis;
    BSplineBasisd randomBasis;
    Eigen::VectorXd theta;
    std::vector<Eigen::VectorXd> alphas;
    VarianceState variance;
    Eigen::VectorXd lambda;  // p
    Eigen::VectorXd eta;     // q
    Penalties penalties;     // materialized at (lambda, eta)
    FitDiagnostics diagnostics;

    // refreshed caches at the stored state (not serialized)
    StateCache cache;
    Eigen::MatrixXd P;

    void refreshCaches(const DesignMatrices& design);
};

/// Full iterative fit: smoothing parameters chosen (or fixed) up front, then
/// the residual-variance root and the (theta, alpha, omega) updates alternate
/// from omega = I, sigmaE2 = 1 until the largest parameter change drops below
/// tol.  Throws ConvergenceError when the iteration cap is hit.
FittedModel fit(const LongitudinalDataset& data, const BSplineBasisd& fixedBasis,
                const BSplineBasisd& randomBasis, const FitConfig& config = {});

} // namespace flmm
