#pragma once

#include <Eigen/Dense>
#include <vector>

#include "flmm/solver.hpp"

namespace flmm {

/// Marginal REML criterion for the fixed-effect smoothing weights: the first
/// `order` columns of each fixed expansion stay fixed, the remaining columns
/// are absorbed into the marginal covariance at weight 1/lambda_k, and the
/// retained coefficients are profiled out by GLS at every evaluation.
double remlLambdaObjective(const Eigen::VectorXd& lambda, const DesignMatrices& design,
                           const VarianceState& variance, int order);

struct SelectLambdaResult {
    Eigen::VectorXd lambda;
    double objective = 0.0;
    bool atLowerBound = false;
    bool atUpperBound = false;
    int cycles = 0;
    // every probed point, for monotone-acceptance checks
    std::vector<std::pair<Eigen::VectorXd, double>> probes;
};

/// Coordinate-wise golden-section search of the REML criterion on the log10
/// scale, cycled until the relative objective change falls below 1e-6.
SelectLambdaResult selectLambda(const DesignMatrices& design, const VarianceState& variance,
                                int order, double log10Lo = -4.0, double log10Hi = 8.0,
                                int maxCycles = 20);

/// Closed-form update of the random-effect smoothing weights from the current
/// shrunken coefficients:
///   eta_k = L / (sum_i alpha_ik' D alpha_ik + tr(H^-1 Dtilde_k)),
/// H_i = U_i' U_i / sigmaE2 + Diag{eta_k D}.  D is the raw (unscaled) penalty
/// block of the random basis.  Requires every H_i positive definite.
Eigen::VectorXd updateEta(const std::vector<Eigen::VectorXd>& alphas,
                          const DesignMatrices& design, double sigmaE2,
                          const Eigen::MatrixXd& rawRandomPenalty,
                          const Eigen::VectorXd& currentEta);

} // namespace flmm
