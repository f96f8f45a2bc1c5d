#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "flmm/solver.hpp"

namespace flmm {

struct PredictionResult {
    double aNaive = 0.0;
    double aCorrected = 0.0;
    double biasEstimate = 0.0;     // estimated bias of the naive prediction
    double mseFirstOrder = 0.0;
    double msePlugin = 0.0;
    double lower = 0.0;
    double upper = 0.0;
    bool mseClamped = false;       // plug-in MSE was in [-1e-10, 0) and clamped
};

/// Target-independent matrices for prediction MSE evaluation at one fitted
/// state.  Expensive to build, immutable afterwards; per-target predictions
/// against one workspace may run concurrently.
struct MseWorkspace {
    int g = 1;  // number of residual variance components

    StateCache cache;                         // sigmaStar / omegaStar at the fit
    std::vector<Eigen::LLT<Eigen::MatrixXd>> sigmaLlt;  // true-form per-subject
    Eigen::MatrixXd Sigma;                    // N x N true-form covariance
    Eigen::MatrixXd P;                        // projection at the fitted state
    std::vector<Eigen::MatrixXd> Qblocks;     // per-subject sigmaStar^-1 - sigma^-1
    Eigen::MatrixXd Dmat;                     // correction to the GLS information inverse
    Eigen::MatrixXd Delta1;                   // pL x N correction to the GLS projector
    Eigen::MatrixXd Delta1Sigma;              // Delta1 * Sigma
    Eigen::MatrixXd Jvec;                     // N x g score linearization vectors
    Eigen::MatrixXd SigmaJ;                   // Sigma * Jvec
    Eigen::MatrixXd Djac;                     // g x g estimating-equation Jacobian
    Eigen::MatrixXd DjacInv;
    std::vector<Eigen::MatrixXd> Gmats;       // P dSigma_k P
    Eigen::MatrixXd SigmaW;                   // (2 tr(G_i Sigma G_j Sigma))_{ij}
    std::vector<std::vector<Eigen::MatrixXd>> Cjl;  // Sigma(G_j S G_j + G_l S G_j)Sigma

    Eigen::LLT<Eigen::MatrixXd> Fllt;         // W' Sigma^-1 W
    Eigen::MatrixXd SigmaInvW;                // N x pL
    Eigen::LDLT<Eigen::MatrixXd> HstarLdlt;   // W' SigmaStar^-1 W + deltaBeta
    Eigen::MatrixXd solvedWstar;              // SigmaStar^-1 W, N x pL

    Eigen::MatrixXd deltaBeta;
    Eigen::VectorXd thetaRef;                 // theta used in bias/score linearization

    const DesignMatrices* design = nullptr;
    VarianceState variance;
};

/// Builds the workspace at the fitted variance state.  thetaRef defaults to
/// the fitted theta; a simulation truth can be supplied for validation runs.
MseWorkspace buildMseWorkspace(const DesignMatrices& design, const FittedModel& model,
                               const std::optional<Eigen::VectorXd>& thetaRef = std::nullopt);

/// l' theta + d' alpha with the sparse d contraction.
double predictNaive(const FittedModel& model, const TargetVectors& target);

/// Estimated bias of the naive prediction at the reference coefficients.
double biasNaive(const MseWorkspace& ws, const TargetVectors& target,
                 const Eigen::VectorXd& thetaRef);

/// Bias-corrected prediction: the naive value minus its estimated bias at the
/// fitted coefficients.
double predictCorrected(const FittedModel& model, const MseWorkspace& ws,
                        const TargetVectors& target);

/// First-order prediction MSE (known-variance part, penalty-corrected).
double mseFirstOrder(const MseWorkspace& ws, const TargetVectors& target);

/// First-order MSE plus the variance inflation from estimating the residual
/// variance components.
double msePlugin(const MseWorkspace& ws, const TargetVectors& target);

/// Central finite-difference Jacobian of the variance score at sigmaE2, one
/// row/column per variance component.
Eigen::MatrixXd jacobianD(const DesignMatrices& design, const VarianceState& variance,
                          const Penalties& penalties, const Eigen::VectorXd& y);

/// aCorrected -/+ 2 sqrt(msePlugin); clamps msePlugin in [-1e-10, 0) to zero,
/// rejects anything more negative.
std::pair<double, double> predictionInterval(double aCorrected, double msePluginValue,
                                             bool* clamped = nullptr);

/// Full per-target evaluation against a shared workspace.
PredictionResult predictTarget(const FittedModel& model, const MseWorkspace& ws,
                               const TargetVectors& target);

} // namespace flmm
