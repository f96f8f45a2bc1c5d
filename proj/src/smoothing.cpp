#include "flmm/smoothing.hpp"

#include <cmath>

#include "flmm/errors.hpp"

namespace flmm {

namespace {

std::string lambdaString(const Eigen::VectorXd& lambda) {
    std::string s = "(";
    for (int i = 0; i < lambda.size(); ++i)
        s += (i ? ", " : "") + std::to_string(lambda[i]);
    return s + ")";
}

} // namespace

double remlLambdaObjective(const Eigen::VectorXd& lambda, const DesignMatrices& design,
                           const VarianceState& variance, int order) {
    const int p = design.p, Lf = design.Lf, N = design.N;
    if (lambda.size() != p) throw ShapeError("lambda must have one entry per fixed covariate");
    if (order > Lf) throw InvalidConfigError("basis order exceeds basis size");
    const int L0 = Lf - order;
    for (int k = 0; k < p; ++k)
        if (!(lambda[k] > 0.0)) throw DomainError("lambda entries must be positive");

    // marginal covariance: residual + random-effect part + absorbed basis tail
    Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(N, N);
    for (const auto& subj : design.subjects) {
        const int m = static_cast<int>(subj.U.rows());
        sigma.block(subj.offset, subj.offset, m, m) =
            subj.U * variance.omega * subj.U.transpose();
    }
    sigma.diagonal().array() += variance.sigmaE2;
    for (int k = 0; k < p && L0 > 0; ++k) {
        const Eigen::MatrixXd tail = design.W.middleCols(k * Lf + order, L0);
        sigma.noalias() += (1.0 / lambda[k]) * tail * tail.transpose();
    }

    Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    if (llt.info() != Eigen::Success)
        throw NumericalError("marginal covariance indefinite at lambda " + lambdaString(lambda));

    double logDetSigma = 0.0;
    for (int i = 0; i < N; ++i) logDetSigma += 2.0 * std::log(llt.matrixLLT()(i, i));

    Eigen::MatrixXd w1(N, p * order);
    for (int k = 0; k < p; ++k)
        w1.middleCols(k * order, order) = design.W.middleCols(k * Lf, order);

    const Eigen::MatrixXd sw1 = llt.solve(w1);
    const Eigen::MatrixXd gram = w1.transpose() * sw1;
    Eigen::LLT<Eigen::MatrixXd> gllt(gram);
    if (gllt.info() != Eigen::Success)
        throw NumericalError("retained-coefficient information indefinite at lambda " +
                             lambdaString(lambda));
    const Eigen::VectorXd theta1 = gllt.solve(sw1.transpose() * design.y);
    const Eigen::VectorXd resid = design.y - w1 * theta1;
    const double quad = resid.dot(llt.solve(resid));

    double logDetGram = 0.0;
    for (int i = 0; i < gram.rows(); ++i) logDetGram += 2.0 * std::log(gllt.matrixLLT()(i, i));

    return logDetSigma + quad + logDetGram;
}

SelectLambdaResult selectLambda(const DesignMatrices& design, const VarianceState& variance,
                                int order, double log10Lo, double log10Hi, int maxCycles) {
    const int p = design.p;
    const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
    const double xtol = 1e-3;

    SelectLambdaResult result;
    Eigen::VectorXd logl = Eigen::VectorXd::Constant(p, 0.5 * (log10Lo + log10Hi));

    double bestValue = std::numeric_limits<double>::infinity();
    Eigen::VectorXd bestLog = logl;
    auto eval = [&](const Eigen::VectorXd& lg) {
        Eigen::VectorXd lam(p);
        for (int k = 0; k < p; ++k) lam[k] = std::pow(10.0, lg[k]);
        const double v = remlLambdaObjective(lam, design, variance, order);
        result.probes.emplace_back(lam, v);
        if (v < bestValue) {
            bestValue = v;
            bestLog = lg;
        }
        return v;
    };

    double prev = eval(logl);
    for (int cycle = 0; cycle < maxCycles; ++cycle) {
        for (int k = 0; k < p; ++k) {
            double a = log10Lo, b = log10Hi;
            double x1 = b - phi * (b - a), x2 = a + phi * (b - a);
            Eigen::VectorXd lg = logl;
            lg[k] = x1;
            double f1 = eval(lg);
            lg[k] = x2;
            double f2 = eval(lg);
            while (b - a > xtol) {
                if (f1 <= f2) {
                    b = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = b - phi * (b - a);
                    lg[k] = x1;
                    f1 = eval(lg);
                } else {
                    a = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = a + phi * (b - a);
                    lg[k] = x2;
                    f2 = eval(lg);
                }
            }
            logl[k] = 0.5 * (a + b);
        }
        const double cur = eval(logl);
        result.cycles = cycle + 1;
        if (std::abs(prev - cur) <= 1e-6 * std::max(1.0, std::abs(cur))) break;
        prev = cur;
    }

    // return the best probed point so the accepted value never exceeds a probe
    result.lambda.resize(p);
    for (int k = 0; k < p; ++k) result.lambda[k] = std::pow(10.0, bestLog[k]);
    result.objective = bestValue;
    for (int k = 0; k < p; ++k) {
        if (bestLog[k] <= log10Lo + 2.0 * xtol) result.atLowerBound = true;
        if (bestLog[k] >= log10Hi - 2.0 * xtol) result.atUpperBound = true;
    }
    return result;
}

Eigen::VectorXd updateEta(const std::vector<Eigen::VectorXd>& alphas,
                          const DesignMatrices& design, double sigmaE2,
                          const Eigen::MatrixXd& rawRandomPenalty,
                          const Eigen::VectorXd& currentEta) {
    const int q = design.q, Lr = design.Lr;
    if (currentEta.size() != q) throw ShapeError("eta must have one entry per random covariate");
    if (static_cast<int>(alphas.size()) != design.n())
        throw ShapeError("alphas count does not match subject count");

    Eigen::VectorXd quad = Eigen::VectorXd::Zero(q);
    for (const auto& a : alphas)
        for (int k = 0; k < q; ++k)
            quad[k] += a.segment(k * Lr, Lr).dot(rawRandomPenalty * a.segment(k * Lr, Lr));

    const Eigen::MatrixXd deltaNu = blockDiagPenalty(currentEta, rawRandomPenalty);
    Eigen::VectorXd trace = Eigen::VectorXd::Zero(q);
    for (const auto& subj : design.subjects) {
        Eigen::MatrixXd h = subj.U.transpose() * subj.U / sigmaE2 + deltaNu;
        Eigen::LLT<Eigen::MatrixXd> llt(h);
        if (llt.info() != Eigen::Success)
            throw DegenerateSmoothingError(
                "per-subject curvature matrix not positive definite; "
                "fix eta explicitly for this design");
        const Eigen::MatrixXd hinv =
            llt.solve(Eigen::MatrixXd::Identity(h.rows(), h.cols()));
        for (int k = 0; k < q; ++k)
            trace[k] += (hinv.block(k * Lr, k * Lr, Lr, Lr).array() *
                         rawRandomPenalty.transpose().array())
                            .sum();
    }

    Eigen::VectorXd eta(q);
    for (int k = 0; k < q; ++k) {
        const double denom = quad[k] + trace[k];
        if (!(denom > 0.0))
            throw DegenerateSmoothingError("eta update denominator not positive for component " +
                                           std::to_string(k + 1));
        eta[k] = double(Lr) / denom;
    }
    return eta;
}

} // namespace flmm
