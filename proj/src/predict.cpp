#include "flmm/predict.hpp"

#include <cmath>

#include "flmm/errors.hpp"

namespace flmm {

namespace {

/// Scatter the sparse target into the dense weight vector s = SigmaStar^-1 U omegaStar d.
Eigen::VectorXd denseS(const MseWorkspace& ws, const TargetVectors& target) {
    const auto& design = *ws.design;
    Eigen::VectorXd s = Eigen::VectorXd::Zero(design.N);
    for (const auto& [i, di] : target.d) {
        const auto& subj = design.subjects[i];
        s.segment(subj.offset, subj.U.rows()) =
            ws.cache.sigmaStarLlt[i].solve(subj.U * (ws.cache.omegaStar * di));
    }
    return s;
}

void checkTarget(const MseWorkspace& ws, const TargetVectors& target) {
    const auto& design = *ws.design;
    if (target.l.size() != design.fixedDim())
        throw ShapeError("target l has length " + std::to_string(target.l.size()) +
                         ", expected " + std::to_string(design.fixedDim()));
    for (const auto& [i, di] : target.d) {
        if (i < 0 || i >= design.n())
            throw ShapeError("target subject " + std::to_string(i) + " out of range");
        if (di.size() != design.randomDim())
            throw ShapeError("target d block has length " + std::to_string(di.size()) +
                             ", expected " + std::to_string(design.randomDim()));
    }
}

} // namespace

MseWorkspace buildMseWorkspace(const DesignMatrices& design, const FittedModel& model,
                               const std::optional<Eigen::VectorXd>& thetaRef) {
    MseWorkspace ws;
    ws.design = &design;
    ws.variance = model.variance;
    ws.deltaBeta = model.penalties.beta;
    ws.thetaRef = thetaRef.value_or(model.theta);
    ws.g = 1;

    const int N = design.N;
    const int pL = design.fixedDim();
    const double v = model.variance.sigmaE2;
    const Eigen::MatrixXd& omega = model.variance.omega;

    ws.cache = makeStateCache(design, model.variance, model.penalties);
    ws.P = projectionP(design, ws.cache, model.penalties.beta);

    // true-form covariance and its factorizations
    ws.Sigma = Eigen::MatrixXd::Zero(N, N);
    ws.sigmaLlt.reserve(design.subjects.size());
    ws.Qblocks.reserve(design.subjects.size());
    Eigen::MatrixXd F = Eigen::MatrixXd::Zero(pL, pL);
    ws.SigmaInvW.resize(N, pL);
    for (size_t i = 0; i < design.subjects.size(); ++i) {
        const auto& subj = design.subjects[i];
        const int m = static_cast<int>(subj.U.rows());
        Eigen::MatrixXd si = subj.U * omega * subj.U.transpose();
        si.diagonal().array() += v;
        Eigen::LLT<Eigen::MatrixXd> llt(si);
        if (llt.info() != Eigen::Success)
            throw NumericalError("true-form covariance not positive definite");
        ws.Sigma.block(subj.offset, subj.offset, m, m) = si;
        const Eigen::MatrixXd siw = llt.solve(subj.W);
        ws.SigmaInvW.middleRows(subj.offset, m) = siw;
        F.noalias() += subj.W.transpose() * siw;
        const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(m, m);
        ws.Qblocks.push_back(ws.cache.sigmaStarLlt[i].solve(id) - llt.solve(id));
        ws.sigmaLlt.push_back(std::move(llt));
    }
    ws.Fllt.compute(F);
    if (ws.Fllt.info() != Eigen::Success)
        throw RankDeficiencyError("GLS information matrix not positive definite");

    // penalized system at the starred covariance
    Eigen::MatrixXd Hstar = model.penalties.beta;
    ws.solvedWstar.resize(N, pL);
    for (size_t i = 0; i < design.subjects.size(); ++i) {
        const auto& subj = design.subjects[i];
        const Eigen::MatrixXd vi = ws.cache.sigmaStarLlt[i].solve(subj.W);
        ws.solvedWstar.middleRows(subj.offset, subj.W.rows()) = vi;
        Hstar.noalias() += subj.W.transpose() * vi;
    }
    ws.HstarLdlt.compute(Hstar);

    // D = F^-1 (I + B F^-1)^-1 B F^-1 with B = W'QW + deltaBeta
    Eigen::MatrixXd Bpen = model.penalties.beta;
    Eigen::MatrixXd WtQ = Eigen::MatrixXd::Zero(pL, N);
    for (size_t i = 0; i < design.subjects.size(); ++i) {
        const auto& subj = design.subjects[i];
        const Eigen::MatrixXd wq = subj.W.transpose() * ws.Qblocks[i];
        WtQ.middleCols(subj.offset, subj.U.rows()) = wq;
        Bpen.noalias() += wq * subj.W;
    }
    const Eigen::MatrixXd identityPl = Eigen::MatrixXd::Identity(pL, pL);
    const Eigen::MatrixXd BFinv = Bpen * ws.Fllt.solve(identityPl);
    ws.Dmat = ws.Fllt.solve((identityPl + BFinv).partialPivLu().solve(BFinv));

    // Delta1 = F^-1 W' Q - D W' (Sigma^-1 + Q)
    ws.Delta1 = ws.Fllt.solve(WtQ) - ws.Dmat * (ws.SigmaInvW.transpose() + WtQ);
    ws.Delta1Sigma = ws.Delta1 * ws.Sigma;

    // score linearization vectors J_k (identity derivative for the single
    // residual-variance component)
    const Eigen::VectorXd wTheta = design.W * ws.thetaRef;
    ws.Jvec.resize(N, ws.g);
    ws.Jvec.col(0) = ws.solvedWstar * ws.HstarLdlt.solve(model.penalties.beta * ws.thetaRef) +
                     ws.P * (ws.P * wTheta);
    ws.SigmaJ = ws.Sigma * ws.Jvec;

    ws.Djac = jacobianD(design, model.variance, model.penalties, design.y);
    if (!ws.Djac.allFinite() || std::abs(ws.Djac.determinant()) < 1e-300)
        throw NumericalError("estimating-equation Jacobian numerically singular");
    ws.DjacInv = ws.Djac.inverse();

    ws.Gmats.push_back(ws.P * ws.P);
    ws.SigmaW.resize(ws.g, ws.g);
    std::vector<Eigen::MatrixXd> GS(ws.g);
    for (int k = 0; k < ws.g; ++k) GS[k] = ws.Gmats[k] * ws.Sigma;
    for (int i = 0; i < ws.g; ++i)
        for (int j = 0; j < ws.g; ++j)
            ws.SigmaW(i, j) = 2.0 * (GS[i].array() * GS[j].transpose().array()).sum();

    ws.Cjl.resize(ws.g);
    for (int j = 0; j < ws.g; ++j) {
        ws.Cjl[j].resize(ws.g);
        for (int l = 0; l < ws.g; ++l)
            ws.Cjl[j][l] = ws.Sigma * (GS[j] * ws.Gmats[j] + GS[l] * ws.Gmats[j]) * ws.Sigma;
    }
    return ws;
}

double predictNaive(const FittedModel& model, const TargetVectors& target) {
    if (target.l.size() != model.theta.size())
        throw ShapeError("target l has length " + std::to_string(target.l.size()) +
                         ", expected " + std::to_string(model.theta.size()));
    double a = target.l.dot(model.theta);
    for (const auto& [i, di] : target.d) {
        if (i < 0 || i >= static_cast<int>(model.alphas.size()))
            throw ShapeError("target subject " + std::to_string(i) + " out of range");
        if (di.size() != model.alphas[i].size())
            throw ShapeError("target d block has length " + std::to_string(di.size()) +
                             ", expected " + std::to_string(model.alphas[i].size()));
        a += di.dot(model.alphas[i]);
    }
    return a;
}

double biasNaive(const MseWorkspace& ws, const TargetVectors& target,
                 const Eigen::VectorXd& thetaRef) {
    checkTarget(ws, target);
    const Eigen::VectorXd s = denseS(ws, target);
    const Eigen::VectorXd lminus = target.l - ws.design->W.transpose() * s;
    return -lminus.dot(ws.HstarLdlt.solve(ws.deltaBeta * thetaRef));
}

double predictCorrected(const FittedModel& model, const MseWorkspace& ws,
                        const TargetVectors& target) {
    return predictNaive(model, target) - biasNaive(ws, target, model.theta);
}

double mseFirstOrder(const MseWorkspace& ws, const TargetVectors& target) {
    checkTarget(ws, target);
    const auto& design = *ws.design;
    const Eigen::MatrixXd& omega = ws.variance.omega;

    const Eigen::VectorXd s = denseS(ws, target);
    const Eigen::VectorXd lminus = target.l - design.W.transpose() * s;

    const double t1 = lminus.dot(ws.Fllt.solve(lminus));

    double t2 = 0.0;
    for (const auto& [i, di] : target.d) {
        const auto& subj = design.subjects[i];
        const Eigen::VectorXd od = omega * di;
        const Eigen::VectorXd uod = subj.U * od;
        t2 += di.dot(od) - uod.dot(ws.sigmaLlt[i].solve(uod));
    }

    const Eigen::VectorXd w1 = ws.Delta1.transpose() * lminus;       // Delta1' (l - W's)
    const Eigen::VectorXd w2 = ws.Delta1Sigma.transpose() * lminus;  // Sigma Delta1' (l - W's)
    const double t3 = w1.dot(w2);

    const Eigen::VectorXd c = s + ws.SigmaInvW * ws.Fllt.solve(lminus);
    const double t4 = 2.0 * w2.dot(c);

    double t5 = 0.0;
    for (const auto& [i, di] : target.d) {
        const auto& subj = design.subjects[i];
        t5 -= 2.0 * w1.segment(subj.offset, subj.U.rows()).dot(subj.U * (omega * di));
    }

    return t1 + t2 + t3 + t4 + t5;
}

double msePlugin(const MseWorkspace& ws, const TargetVectors& target) {
    const double first = mseFirstOrder(ws, target);
    const auto& design = *ws.design;

    const Eigen::VectorXd s = denseS(ws, target);
    const Eigen::VectorXd lminus = target.l - design.W.transpose() * s;
    const Eigen::VectorXd naiveWeights = s + ws.solvedWstar * ws.HstarLdlt.solve(lminus);

    // B_k = -P dSigma_k (naive weights); identity derivative in this version
    Eigen::MatrixXd B(design.N, ws.g);
    B.col(0) = -(ws.P * naiveWeights);

    const Eigen::MatrixXd K = ws.DjacInv * (ws.SigmaJ.transpose() * B);  // D^-1 (J Sigma B)
    const double trK = K.trace();
    const double termA = 2.0 * (K.array() * K.transpose().array()).sum();
    const double termB = trK * trK;

    const Eigen::MatrixXd SB = ws.Sigma * B;
    const Eigen::MatrixXd BtSB = B.transpose() * SB;
    const double termC = (ws.DjacInv * BtSB * ws.DjacInv * ws.SigmaW).trace();

    const Eigen::MatrixXd lambdaMat = B * ws.DjacInv.transpose();
    double termD = 0.0;
    for (int j = 0; j < ws.g; ++j)
        for (int l = 0; l < ws.g; ++l)
            termD += lambdaMat.col(j).dot(ws.Cjl[j][l] * lambdaMat.col(l));
    termD *= 4.0;

    return first + termA + termB + termC + termD;
}

Eigen::MatrixXd jacobianD(const DesignMatrices& design, const VarianceState& variance,
                          const Penalties& penalties, const Eigen::VectorXd& y) {
    const int g = 1;
    const double v = variance.sigmaE2;
    const double h = 1e-5 * std::max(v, 1.0);
    if (!(v - h > 0.0) || (v + h) - (v - h) == 0.0)
        throw NumericalError("finite-difference step underflow at sigmaE2 = " +
                             std::to_string(v));
    Eigen::MatrixXd D(g, g);
    const double up = varianceScore(v + h, design, variance.omega, penalties, y);
    const double dn = varianceScore(v - h, design, variance.omega, penalties, y);
    D(0, 0) = (up - dn) / (2.0 * h);
    return D;
}

std::pair<double, double> predictionInterval(double aCorrected, double msePluginValue,
                                             bool* clamped) {
    if (clamped) *clamped = false;
    double m = msePluginValue;
    if (m < 0.0) {
        if (m < -1e-10)
            throw InvalidMseError("plug-in MSE negative beyond slack: " + std::to_string(m));
        m = 0.0;
        if (clamped) *clamped = true;
    }
    const double half = 2.0 * std::sqrt(m);
    return {aCorrected - half, aCorrected + half};
}

PredictionResult predictTarget(const FittedModel& model, const MseWorkspace& ws,
                               const TargetVectors& target) {
    PredictionResult r;
    r.aNaive = predictNaive(model, target);
    r.biasEstimate = biasNaive(ws, target, model.theta);
    r.aCorrected = r.aNaive - r.biasEstimate;
    r.mseFirstOrder = mseFirstOrder(ws, target);
    r.msePlugin = msePlugin(ws, target);
    const auto iv = predictionInterval(r.aCorrected, r.msePlugin, &r.mseClamped);
    r.lower = iv.first;
    r.upper = iv.second;
    return r;
}

} // namespace flmm
