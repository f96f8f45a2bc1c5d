#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "flmm/simulate.hpp"
#include "flmm/solver.hpp"
#include "oracles.hpp"

using namespace flmm;
using testutil::denseSigma;
using testutil::denseSigmaStar;
using testutil::fullOmega;
using testutil::fullU;

namespace {

struct Problem {
    LongitudinalDataset data;
    BSplineBasisd fixedBasis, randomBasis;
    DesignMatrices design;
    VarianceState state;
    Penalties penalties;
};

Problem makeProblem(std::mt19937_64& rng, int n, int m, int p, int q, int order, int knots,
                    double lambda, double eta) {
    Problem pr;
    pr.data = testutil::randomDataset(rng, n, m, p, q);
    pr.fixedBasis = BSplineBasisd::make(order, knots);
    pr.randomBasis = BSplineBasisd::make(order, knots);
    pr.design = buildDesign(pr.data, pr.fixedBasis, pr.randomBasis);
    pr.state.sigmaE2 = 1.0;
    pr.state.omega = testutil::randomSpd(rng, pr.design.randomDim());
    pr.penalties.beta = blockDiagPenalty(Eigen::VectorXd::Constant(p, lambda),
                                         penaltyMatrix(pr.fixedBasis));
    pr.penalties.nu = blockDiagPenalty(Eigen::VectorXd::Constant(q, eta),
                                       penaltyMatrix(pr.randomBasis));
    return pr;
}

} // namespace

TEST_CASE("working covariance collapses to the true covariance without penalty") {
    std::mt19937_64 rng(1);
    auto pr = makeProblem(rng, 4, 3, 1, 1, 3, 2, 0.7, 0.0);
    const auto cache = makeStateCache(pr.design, pr.state, pr.penalties);
    for (int i = 0; i < pr.design.n(); ++i) {
        const auto& s = pr.design.subjects[i];
        const Eigen::MatrixXd sigmaI =
            s.U * pr.state.omega * s.U.transpose() +
            pr.state.sigmaE2 * Eigen::MatrixXd::Identity(s.U.rows(), s.U.rows());
        CHECK((cache.sigmaStar[i] - sigmaI).cwiseAbs().maxCoeff() <= 1e-12);
    }
}

TEST_CASE("working covariance with zero random design is sigmaE2 I") {
    std::mt19937_64 rng(2);
    auto pr = makeProblem(rng, 3, 2, 1, 1, 3, 2, 0.7, 0.9);
    for (auto& s : pr.design.subjects) s.U.setZero();
    pr.state.sigmaE2 = 2.5;
    const auto cache = makeStateCache(pr.design, pr.state, pr.penalties);
    for (int i = 0; i < pr.design.n(); ++i)
        CHECK((cache.sigmaStar[i] -
               2.5 * Eigen::MatrixXd::Identity(cache.sigmaStar[i].rows(),
                                               cache.sigmaStar[i].cols()))
                  .cwiseAbs()
                  .maxCoeff() <= 1e-14);
}

TEST_CASE("working covariance matches dense composition") {
    std::mt19937_64 rng(3);
    auto pr = makeProblem(rng, 5, 3, 2, 1, 4, 2, 0.3, 1.7);
    const auto cache = makeStateCache(pr.design, pr.state, pr.penalties);
    const Eigen::MatrixXd dense =
        denseSigmaStar(pr.design, pr.state.omega, pr.penalties.nu, pr.state.sigmaE2);
    for (int i = 0; i < pr.design.n(); ++i) {
        const auto& s = pr.design.subjects[i];
        CHECK((cache.sigmaStar[i] -
               dense.block(s.offset, s.offset, s.U.rows(), s.U.rows()))
                  .cwiseAbs()
                  .maxCoeff() <= 1e-10);
    }
}

TEST_CASE("non-finite covariance is rejected") {
    std::mt19937_64 rng(4);
    auto pr = makeProblem(rng, 3, 2, 1, 1, 3, 1, 0.1, 0.1);
    pr.state.omega(0, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(makeStateCache(pr.design, pr.state, pr.penalties), IllConditionedError);
}

TEST_CASE("covariance repair floors eigenvalues") {
    Eigen::MatrixXd m(2, 2);
    m << 1.0, 0.0, 0.0, -0.5;
    const Eigen::MatrixXd r = repairCovariance(m);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(r);
    CHECK(eig.eigenvalues().minCoeff() >= 1e-10);
    CHECK(eig.eigenvalues().maxCoeff() == doctest::Approx(1.0));
}

TEST_CASE("theta reduces to OLS without random effects or penalty") {
    std::mt19937_64 rng(5);
    auto pr = makeProblem(rng, 10, 2, 1, 1, 1, 0, 0.0, 0.0);
    for (auto& s : pr.design.subjects) s.U.setZero();
    pr.state.sigmaE2 = 1.0;
    const auto cache = makeStateCache(pr.design, pr.state, pr.penalties);
    const Eigen::VectorXd theta = solveTheta(pr.design, cache, pr.penalties.beta);
    // single constant basis function and constant-in-t covariate: OLS slope
    const Eigen::MatrixXd w = pr.design.W;
    const Eigen::VectorXd ols =
        (w.transpose() * w).inverse() * (w.transpose() * pr.design.y);
    CHECK((theta - ols).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("huge penalty drives theta into the penalty null space") {
    std::mt19937_64 rng(6);
    auto pr = makeProblem(rng, 40, 2, 1, 1, 4, 4, 1e8, 0.5);
    const auto cache = makeStateCache(pr.design, pr.state, pr.penalties);
    const Eigen::VectorXd theta = solveTheta(pr.design, cache, pr.penalties.beta);

    // curvature of the fit is essentially zero
    const Eigen::MatrixXd rawPenalty = penaltyMatrix(pr.fixedBasis);
    CHECK(theta.dot(rawPenalty * theta) <= 1e-10);

    // independent constrained-GLS oracle over the penalty null space
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(rawPenalty);
    std::vector<int> nullIdx;
    for (int i = 0; i < eig.eigenvalues().size(); ++i)
        if (eig.eigenvalues()[i] <= 1e-8 * eig.eigenvalues().maxCoeff()) nullIdx.push_back(i);
    Eigen::MatrixXd nullBasis(rawPenalty.rows(), nullIdx.size());
    for (size_t c = 0; c < nullIdx.size(); ++c)
        nullBasis.col(c) = eig.eigenvectors().col(nullIdx[c]);

    const Eigen::MatrixXd sStarInv =
        denseSigmaStar(pr.design, pr.state.omega, pr.penalties.nu, pr.state.sigmaE2).inverse();
    const Eigen::MatrixXd wn = pr.design.W * nullBasis;
    const Eigen::VectorXd coef =
        (wn.transpose() * sStarInv * wn).inverse() * (wn.transpose() * sStarInv * pr.design.y);
    const Eigen::VectorXd constrained = nullBasis * coef;
    CHECK((pr.design.W * (theta - constrained)).cwiseAbs().maxCoeff() <= 1e-5);
}

TEST_CASE("theta matches dense penalized normal equations") {
    std::mt19937_64 rng(7);
    auto pr = makeProblem(rng, 2, 2, 1, 1, 2, 0, 0.4, 0.8);
    const auto cache = makeStateCache(pr.design, pr.state, pr.penalties);
    const Eigen::VectorXd theta = solveTheta(pr.design, cache, pr.penalties.beta);

    const Eigen::MatrixXd sInv =
        denseSigmaStar(pr.design, pr.state.omega, pr.penalties.nu, pr.state.sigmaE2).inverse();
    const Eigen::MatrixXd h =
        pr.design.W.transpose() * sInv * pr.design.W + pr.penalties.beta;
    const Eigen::VectorXd dense = h.inverse() * (pr.design.W.transpose() * sInv * pr.design.y);
    CHECK((theta - dense).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("rank-deficient normal matrix names the smallest pivot") {
    std::mt19937_64 rng(8);
    auto pr = makeProblem(rng, 4, 2, 1, 1, 4, 2, 0.0, 0.0);
    for (auto& s : pr.design.subjects) s.W.setZero();
    pr.design.W.setZero();
    const auto cache = makeStateCache(pr.design, pr.state, pr.penalties);
    try {
        solveTheta(pr.design, cache, pr.penalties.beta);
        FAIL("expected RankDeficiencyError");
    } catch (const RankDeficiencyError& e) {
        CHECK(std::string(e.what()).find("pivot") != std::string::npos);
    }
}

TEST_CASE("alpha is zero on exactly representable data without penalty") {
    std::mt19937_64 rng(9);
    auto pr = makeProblem(rng, 6, 3, 1, 1, 3, 2, 0.0, 0.0);
    const Eigen::VectorXd trueTheta = testutil::randomVector(rng, pr.design.fixedDim());
    pr.design.y = pr.design.W * trueTheta;
    for (int i = 0; i < pr.design.n(); ++i) {
        auto& s = pr.design.subjects[i];
        s.y = pr.design.y.segment(s.offset, s.U.rows());
    }
    const auto cache = makeStateCache(pr.design, pr.state, pr.penalties);
    const Eigen::VectorXd theta = solveTheta(pr.design, cache, pr.penalties.beta);
    const auto alphas = solveAlpha(pr.design, cache, theta);
    for (const auto& a : alphas) CHECK(a.cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("alpha shrinks to zero as the prior covariance vanishes") {
    std::mt19937_64 rng(10);
    auto pr = makeProblem(rng, 5, 3, 1, 1, 3, 1, 0.2, 0.2);
    double prev = std::numeric_limits<double>::infinity();
    for (double scale : {1e-2, 1e-4, 1e-6}) {
        VarianceState st = pr.state;
        st.omega = scale * Eigen::MatrixXd::Identity(pr.design.randomDim(),
                                                     pr.design.randomDim());
        const auto cache = makeStateCache(pr.design, st, pr.penalties);
        const Eigen::VectorXd theta = solveTheta(pr.design, cache, pr.penalties.beta);
        const auto alphas = solveAlpha(pr.design, cache, theta);
        double norm = 0.0;
        for (const auto& a : alphas) norm = std::max(norm, a.cwiseAbs().maxCoeff());
        CHECK(norm < prev);
        prev = norm;
    }
    CHECK(prev <= 1e-4);
}

TEST_CASE("theta and alpha jointly minimize the penalized objective") {
    std::mt19937_64 rng(11);
    auto pr = makeProblem(rng, 4, 3, 1, 1, 3, 2, 0.6, 1.1);
    const auto cache = makeStateCache(pr.design, pr.state, pr.penalties);
    const Eigen::VectorXd theta = solveTheta(pr.design, cache, pr.penalties.beta);
    const auto alphas = solveAlpha(pr.design, cache, theta);

    // direct dense minimization of the joint quadratic over (theta, alpha)
    const int pL = pr.design.fixedDim(), qL = pr.design.randomDim(), n = pr.design.n();
    const int dim = pL + n * qL;
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dim);
    const double rInv = 1.0 / pr.state.sigmaE2;
    const Eigen::MatrixXd prior =
        pr.state.omega.inverse() + pr.penalties.nu;  // per-subject quadratic weight
    h.topLeftCorner(pL, pL) = pr.penalties.beta;
    for (int i = 0; i < n; ++i) {
        const auto& s = pr.design.subjects[i];
        h.topLeftCorner(pL, pL) += rInv * s.W.transpose() * s.W;
        h.block(0, pL + i * qL, pL, qL) = rInv * s.W.transpose() * s.U;
        h.block(pL + i * qL, 0, qL, pL) = rInv * s.U.transpose() * s.W;
        h.block(pL + i * qL, pL + i * qL, qL, qL) = rInv * s.U.transpose() * s.U + prior;
        rhs.head(pL) += rInv * s.W.transpose() * s.y;
        rhs.segment(pL + i * qL, qL) = rInv * s.U.transpose() * s.y;
    }
    const Eigen::VectorXd joint = h.inverse() * rhs;
    CHECK((theta - joint.head(pL)).cwiseAbs().maxCoeff() <= 1e-8);
    for (int i = 0; i < n; ++i)
        CHECK((alphas[i] - joint.segment(pL + i * qL, qL)).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("projection annihilates the fixed design without penalty") {
    std::mt19937_64 rng(12);
    auto pr = makeProblem(rng, 5, 2, 1, 1, 3, 2, 0.0, 0.4);
    const auto cache = makeStateCache(pr.design, pr.state, pr.penalties);
    const Eigen::MatrixXd p = projectionP(pr.design, cache, pr.penalties.beta);
    CHECK((p * pr.design.W).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((p - p.transpose()).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("projection with zero fixed design is the working precision") {
    std::mt19937_64 rng(13);
    auto pr = makeProblem(rng, 4, 2, 1, 1, 2, 1, 0.0, 0.3);
    for (auto& s : pr.design.subjects) s.W.setZero();
    pr.design.W.setZero();
    const Eigen::MatrixXd id =
        Eigen::MatrixXd::Identity(pr.design.fixedDim(), pr.design.fixedDim());
    const auto cache = makeStateCache(pr.design, pr.state, pr.penalties);
    const Eigen::MatrixXd p = projectionP(pr.design, cache, id);
    const Eigen::MatrixXd dense =
        denseSigmaStar(pr.design, pr.state.omega, pr.penalties.nu, pr.state.sigmaE2).inverse();
    CHECK((p - dense).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("projection matches its dense composition") {
    std::mt19937_64 rng(14);
    auto pr = makeProblem(rng, 4, 3, 2, 1, 3, 1, 0.8, 0.6);
    const auto cache = makeStateCache(pr.design, pr.state, pr.penalties);
    const Eigen::MatrixXd p = projectionP(pr.design, cache, pr.penalties.beta);

    const Eigen::MatrixXd sInv =
        denseSigmaStar(pr.design, pr.state.omega, pr.penalties.nu, pr.state.sigmaE2).inverse();
    const Eigen::MatrixXd w = pr.design.W;
    const Eigen::MatrixXd dense =
        sInv - sInv * w *
                   (w.transpose() * sInv * w + pr.penalties.beta).inverse() *
                   w.transpose() * sInv;
    CHECK((p - dense).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("variance score: trace term only at zero response, quadratic scaling") {
    std::mt19937_64 rng(15);
    auto pr = makeProblem(rng, 6, 2, 1, 1, 3, 2, 0.5, 0.7);
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(pr.design.N);
    const double s0 = varianceScore(1.3, pr.design, pr.state.omega, pr.penalties, zero);
    CHECK(s0 < 0.0);

    const Eigen::VectorXd y = pr.design.y;
    const double s1 = varianceScore(1.3, pr.design, pr.state.omega, pr.penalties, y);
    const double s2 = varianceScore(1.3, pr.design, pr.state.omega, pr.penalties, 2.0 * y);
    // score = -trace + quad, quad scales with the squared response
    CHECK(s2 - s0 == doctest::Approx(4.0 * (s1 - s0)).epsilon(1e-10));
    CHECK(s2 > s1);

    CHECK_THROWS_AS(varianceScore(-1.0, pr.design, pr.state.omega, pr.penalties, y),
                    DomainError);
}

TEST_CASE("variance root: residual score vanishes and matches a dense grid search") {
    SimulationConfig cfg;
    cfg.n = 60;
    cfg.m = 2;
    cfg.masterSeed = 99;
    const auto gen = generate(cfg, 0, 0.5);
    const auto basis = BSplineBasisd::make(4, 3);
    const auto design = buildDesign(gen.data, basis, basis);
    Penalties pen;
    pen.beta = blockDiagPenalty(Eigen::VectorXd::Constant(1, 0.1), penaltyMatrix(basis));
    pen.nu = blockDiagPenalty(Eigen::VectorXd::Constant(1, 0.5), penaltyMatrix(basis));
    const Eigen::MatrixXd omega =
        Eigen::MatrixXd::Identity(design.randomDim(), design.randomDim());

    const double root = solveVariance(design, omega, pen, design.y);
    CHECK(root > 0.0);
    CHECK(std::abs(varianceScore(root, design, omega, pen, design.y)) <= 1e-6 * design.n());

    // dense log-spaced grid oracle
    double bestLo = 1e-6, bestHi = 1e2;
    double prevV = 1e-6;
    double prevS = varianceScore(prevV, design, omega, pen, design.y);
    for (int i = 1; i <= 4000; ++i) {
        const double v = std::pow(10.0, -6.0 + 8.0 * i / 4000.0);
        const double s = varianceScore(v, design, omega, pen, design.y);
        if (prevS * s <= 0.0) {
            bestLo = prevV;
            bestHi = v;
            break;
        }
        prevV = v;
        prevS = s;
    }
    for (int it = 0; it < 80; ++it) {
        const double mid = 0.5 * (bestLo + bestHi);
        const double s = varianceScore(mid, design, omega, pen, design.y);
        if (s * prevS > 0.0)
            bestLo = mid;
        else
            bestHi = mid;
    }
    CHECK(root == doctest::Approx(0.5 * (bestLo + bestHi)).epsilon(1e-4));
}

TEST_CASE("variance root is rejected when no sign change exists") {
    std::mt19937_64 rng(16);
    auto pr = makeProblem(rng, 4, 2, 1, 1, 2, 0, 0.0, 0.0);
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(pr.design.N);
    // score < 0 for every candidate when the response is zero
    CHECK_THROWS_AS(solveVariance(pr.design, pr.state.omega, pr.penalties, zero),
                    RootBracketError);
}

TEST_CASE("omega update reduces to the penalized prior when data carry nothing") {
    std::mt19937_64 rng(17);
    auto pr = makeProblem(rng, 5, 2, 1, 1, 3, 1, 0.3, 0.9);
    for (auto& s : pr.design.subjects) s.U.setZero();
    std::vector<Eigen::VectorXd> alphas(pr.design.n(),
                                        Eigen::VectorXd::Zero(pr.design.randomDim()));
    const Eigen::MatrixXd updated = updateOmega(pr.design, pr.state, pr.penalties, alphas);
    const Eigen::MatrixXd expected =
        (pr.state.omega.inverse() + pr.penalties.nu).inverse();
    CHECK((updated - expected).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("omega update matches the dense single-subject composition") {
    std::mt19937_64 rng(18);
    auto pr = makeProblem(rng, 1, 4, 1, 1, 3, 1, 0.5, 0.8);
    const auto cache = makeStateCache(pr.design, pr.state, pr.penalties);
    const Eigen::VectorXd theta = solveTheta(pr.design, cache, pr.penalties.beta);
    const auto alphas = solveAlpha(pr.design, cache, theta);
    const Eigen::MatrixXd updated = updateOmega(pr.design, pr.state, pr.penalties, alphas);

    const auto& s = pr.design.subjects[0];
    const Eigen::MatrixXd omegaStar =
        (pr.state.omega.inverse() + pr.penalties.nu).inverse();
    const Eigen::MatrixXd sigma = denseSigma(pr.design, pr.state.omega, pr.state.sigmaE2);
    const Eigen::MatrixXd sigmaInv = sigma.inverse();
    const Eigen::MatrixXd h =
        s.W.transpose() * sigmaInv * s.W + pr.penalties.beta;
    const Eigen::MatrixXd mi =
        sigmaInv - sigmaInv * s.W * h.inverse() * s.W.transpose() * sigmaInv;
    Eigen::MatrixXd expected =
        alphas[0] * alphas[0].transpose() + omegaStar -
        omegaStar * s.U.transpose() * mi * s.U * omegaStar;
    expected = 0.5 * (expected + expected.transpose());
    // production output is eigenvalue-floored; compare after the same repair
    CHECK((updated - repairCovariance(expected)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("omega update is unbiased at the truth without penalties") {
    // fixed design, many response draws, one update step from the true state
    std::mt19937_64 rng(19);
    const int n = 300, m = 2;
    auto data = testutil::randomDataset(rng, n, m, 1, 1, 1.0, 1.0);
    const auto basis = BSplineBasisd::make(2, 1);
    auto design = buildDesign(data, basis, basis);
    const int qL = design.randomDim();

    VarianceState truth;
    truth.sigmaE2 = 1.0;
    truth.omega = testutil::randomSpd(rng, qL, 0.3);
    Penalties pen;
    pen.beta = Eigen::MatrixXd::Zero(design.fixedDim(), design.fixedDim());
    pen.nu = Eigen::MatrixXd::Zero(qL, qL);
    const Eigen::VectorXd trueTheta = testutil::randomVector(rng, design.fixedDim());
    const Eigen::MatrixXd omegaChol = Eigen::LLT<Eigen::MatrixXd>(truth.omega).matrixL();
    const auto cache = makeStateCache(design, truth, pen);

    std::normal_distribution<double> normal(0.0, 1.0);
    const int reps = 150;
    Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(qL, qL);
    Eigen::MatrixXd meanSq = Eigen::MatrixXd::Zero(qL, qL);
    for (int r = 0; r < reps; ++r) {
        for (auto& s : design.subjects) {
            const Eigen::VectorXd alpha = omegaChol * testutil::randomVector(rng, qL);
            for (int j = 0; j < m; ++j)
                s.y[j] = s.W.row(j).dot(trueTheta) + s.U.row(j).dot(alpha) + normal(rng);
            design.y.segment(s.offset, m) = s.y;
        }
        const Eigen::VectorXd theta = solveTheta(design, cache, pen.beta);
        const auto alphas = solveAlpha(design, cache, theta);
        const Eigen::MatrixXd upd = updateOmega(design, truth, pen, alphas);
        mean += upd;
        meanSq += upd.cwiseProduct(upd);
    }
    mean /= reps;
    meanSq /= reps;
    const Eigen::MatrixXd var = meanSq - mean.cwiseProduct(mean);
    for (int a = 0; a < qL; ++a)
        for (int b = 0; b < qL; ++b) {
            const double se = std::sqrt(std::max(var(a, b), 1e-12) / reps);
            CHECK(std::abs(mean(a, b) - truth.omega(a, b)) <= 3.5 * se + 1e-3);
        }
}

TEST_CASE("fit recovers the generating coefficients on near-noiseless data") {
    std::mt19937_64 rng(20);
    LongitudinalDataset data = testutil::randomDataset(rng, 40, 2, 1, 1);
    const auto basis = BSplineBasisd::make(1, 0);  // single constant function
    const double trueTheta = 2.5;
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& s : data.subjects) {
        s.z.setZero();
        for (int j = 0; j < s.y.size(); ++j) s.y[j] = s.x(j, 0) * trueTheta + 1e-6 * normal(rng);
    }
    FitConfig cfg;
    cfg.lambdaMode = SmoothingMode::Fixed;
    cfg.lambdaFixed = Eigen::VectorXd::Zero(1);
    cfg.etaMode = SmoothingMode::Fixed;
    cfg.etaFixed = Eigen::VectorXd::Zero(1);
    cfg.bracket = {1e-16, 1e2};
    const FittedModel model = fit(data, basis, basis, cfg);
    CHECK(std::abs(model.theta[0] - trueTheta) <= 1e-6);
    for (const auto& a : model.alphas) CHECK(a.cwiseAbs().maxCoeff() <= 1e-5);
    CHECK(model.variance.sigmaE2 <= 1e-10);
}

TEST_CASE("fit is exchangeable under subject permutation and bitwise deterministic") {
    SimulationConfig scfg;
    scfg.n = 20;
    scfg.m = 2;
    scfg.masterSeed = 5;
    const auto gen = generate(scfg, 0, 0.5);
    const auto basis = BSplineBasisd::make(4, 2);
    FitConfig cfg;
    cfg.lambdaMode = SmoothingMode::Fixed;
    cfg.lambdaFixed = Eigen::VectorXd::Constant(1, 0.5);
    cfg.etaMode = SmoothingMode::Fixed;
    cfg.etaFixed = Eigen::VectorXd::Ones(1);

    const FittedModel a = fit(gen.data, basis, basis, cfg);
    const FittedModel b = fit(gen.data, basis, basis, cfg);
    CHECK((a.theta - b.theta).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.variance.sigmaE2 == b.variance.sigmaE2);

    LongitudinalDataset permuted = gen.data;
    std::reverse(permuted.subjects.begin(), permuted.subjects.end());
    const FittedModel c = fit(permuted, basis, basis, cfg);
    CHECK((a.theta - c.theta).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(std::abs(a.variance.sigmaE2 - c.variance.sigmaE2) <= 1e-10);
    CHECK((a.variance.omega - c.variance.omega).cwiseAbs().maxCoeff() <= 1e-10);
    for (int i = 0; i < gen.data.n(); ++i)
        CHECK((a.alphas[i] - c.alphas[gen.data.n() - 1 - i]).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("fitted coefficients are stationary for the joint objective") {
    SimulationConfig scfg;
    scfg.n = 15;
    scfg.m = 3;
    scfg.masterSeed = 6;
    const auto gen = generate(scfg, 0, 0.5);
    const auto basis = BSplineBasisd::make(3, 2);
    FitConfig cfg;
    cfg.lambdaMode = SmoothingMode::Fixed;
    cfg.lambdaFixed = Eigen::VectorXd::Constant(1, 0.7);
    cfg.etaMode = SmoothingMode::Fixed;
    cfg.etaFixed = Eigen::VectorXd::Constant(1, 0.4);
    const FittedModel model = fit(gen.data, basis, basis, cfg);

    const auto design = buildDesign(gen.data, basis, basis);
    const double rInv = 1.0 / model.variance.sigmaE2;
    const Eigen::MatrixXd prior = model.variance.omega.inverse() + model.penalties.nu;
    Eigen::VectorXd gradTheta = 2.0 * model.penalties.beta * model.theta;
    double maxAlphaGrad = 0.0;
    for (int i = 0; i < design.n(); ++i) {
        const auto& s = design.subjects[i];
        const Eigen::VectorXd resid = s.y - s.W * model.theta - s.U * model.alphas[i];
        gradTheta -= 2.0 * rInv * s.W.transpose() * resid;
        const Eigen::VectorXd ga =
            -2.0 * rInv * s.U.transpose() * resid + 2.0 * prior * model.alphas[i];
        maxAlphaGrad = std::max(maxAlphaGrad, ga.cwiseAbs().maxCoeff());
    }
    CHECK(gradTheta.cwiseAbs().maxCoeff() <= 1e-6);
    CHECK(maxAlphaGrad <= 1e-6);
}

TEST_CASE("BLUP reduction: no penalties recover the classical estimators") {
    std::mt19937_64 rng(21);
    for (int rep = 0; rep < 10; ++rep) {
        auto pr = makeProblem(rng, 4, 3, 1, 1, 2, 1, 0.0, 0.0);
        const auto cache = makeStateCache(pr.design, pr.state, pr.penalties);
        const Eigen::VectorXd theta = solveTheta(pr.design, cache, pr.penalties.beta);
        const auto alphas = solveAlpha(pr.design, cache, theta);
        const auto oracle =
            testutil::blupOracle(pr.design, pr.state.omega, pr.state.sigmaE2, pr.design.y);
        CHECK((theta - oracle.theta).cwiseAbs().maxCoeff() <= 1e-8);
        for (int i = 0; i < pr.design.n(); ++i)
            CHECK((alphas[i] - oracle.alphas[i]).cwiseAbs().maxCoeff() <= 1e-8);
    }
}
