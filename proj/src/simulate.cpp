#include "flmm/simulate.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <thread>

#include "flmm/errors.hpp"

namespace flmm {

std::string toString(SimCase c) {
    switch (c) {
        case SimCase::I: return "I";
        case SimCase::II: return "II";
        case SimCase::III: return "III";
    }
    return "?";
}

SimCase simCaseFromString(const std::string& s) {
    if (s == "I" || s == "1") return SimCase::I;
    if (s == "II" || s == "2") return SimCase::II;
    if (s == "III" || s == "3") return SimCase::III;
    throw InvalidConfigError("unknown simulation case '" + s + "' (expected I, II or III)");
}

std::string rngIdentity() { return "mt19937_64/seed_seq(master,replicate)-v1"; }

namespace {

std::mt19937_64 replicateRng(std::uint64_t masterSeed, int replicateIndex) {
    std::seed_seq seq{static_cast<std::uint32_t>(masterSeed & 0xffffffffu),
                      static_cast<std::uint32_t>(masterSeed >> 32),
                      static_cast<std::uint32_t>(replicateIndex), 0x9e3779b9u};
    return std::mt19937_64(seq);
}

double betaTruth(SimCase c, double t) {
    return c == SimCase::III ? std::cos(2.0 * M_PI * t) : 2.0 * std::cos(t);
}

} // namespace

Eigen::MatrixXd caseIITimeCovariance(const Eigen::VectorXd& times, double rho) {
    const int m = static_cast<int>(times.size());
    Eigen::MatrixXd c(m, m);
    for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b) c(a, b) = std::pow(rho, std::abs(times[a] - times[b]));
    return c;
}

double resolveT0(const SimulationConfig& config) {
    if (std::isfinite(config.t0)) {
        if (!(config.t0 >= 0.0 && config.t0 <= 1.0))
            throw DomainError("t0 outside [0,1]: " + std::to_string(config.t0));
        return config.t0;
    }
    // first uniform draw of replicate 0 is the first generated time point
    auto rng = replicateRng(config.masterSeed, 0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    return unif(rng);
}

GeneratedReplicate generate(const SimulationConfig& config, int replicateIndex, double t0) {
    if (config.n < 2 || config.m < 1 || config.K < 1)
        throw InvalidConfigError("simulation needs n >= 2, m >= 1, K >= 1");
    auto rng = replicateRng(config.masterSeed, replicateIndex);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    const BSplineBasisd randomBasis = BSplineBasisd::make(config.order, config.interiorKnots);
    const int L = randomBasis.size();

    // coefficient covariance for the basis-driven random functions
    Eigen::MatrixXd coefChol;
    if (config.simCase != SimCase::II) {
        Eigen::MatrixXd cov(L, L);
        for (int a = 0; a < L; ++a)
            for (int b = 0; b < L; ++b) cov(a, b) = std::pow(config.rho, std::abs(a - b));
        coefChol = Eigen::LLT<Eigen::MatrixXd>(cov).matrixL();
    }

    GeneratedReplicate out;
    out.t0 = t0;
    out.data.p = 1;
    out.data.q = 1;
    out.trueA.resize(config.n);
    const Eigen::VectorXd basisAtT0 = evalBasis(randomBasis, t0);

    for (int i = 0; i < config.n; ++i) {
        const int m = config.m;
        SubjectData subj;
        subj.id = std::to_string(i + 1);
        subj.times.resize(m);
        for (int j = 0; j < m; ++j) subj.times[j] = unif(rng);
        std::sort(subj.times.data(), subj.times.data() + m);

        subj.x.resize(m, 1);
        subj.z.resize(m, 1);
        for (int j = 0; j < m; ++j) subj.x(j, 0) = 1.0 + 0.5 * subj.times[j] + 0.5 * normal(rng);
        for (int j = 0; j < m; ++j)
            subj.z(j, 0) = 0.1 * (-0.8415 / 2.0 + std::sin(subj.times[j]) + 0.4 * normal(rng));

        // subject-specific random function at the observed times and at t0
        Eigen::VectorXd nuObs = Eigen::VectorXd::Zero(m);
        double nuT0 = 0.0;
        if (!config.disableRandomEffects) {
            if (config.simCase == SimCase::II) {
                Eigen::VectorXd pts(m + 1);
                pts.head(m) = subj.times;
                pts[m] = t0;
                Eigen::MatrixXd cov = caseIITimeCovariance(pts, config.rho);
                cov.diagonal().array() += 1e-12;  // guard exact time ties
                const Eigen::MatrixXd chol = Eigen::LLT<Eigen::MatrixXd>(cov).matrixL();
                Eigen::VectorXd z(m + 1);
                for (int j = 0; j <= m; ++j) z[j] = normal(rng);
                const Eigen::VectorXd vals = chol * z;
                nuObs = vals.head(m);
                nuT0 = vals[m];
            } else {
                Eigen::VectorXd z(L);
                for (int j = 0; j < L; ++j) z[j] = normal(rng);
                const Eigen::VectorXd alpha = coefChol * z;
                for (int j = 0; j < m; ++j)
                    nuObs[j] = evalBasis(randomBasis, subj.times[j]).dot(alpha);
                nuT0 = basisAtT0.dot(alpha);
            }
        }

        subj.y.resize(m);
        for (int j = 0; j < m; ++j) {
            const double eps = config.sigmaEps * normal(rng);
            subj.y[j] = subj.x(j, 0) * betaTruth(config.simCase, subj.times[j]) +
                        subj.z(j, 0) * nuObs[j] + eps;
        }

        out.trueA[i] = subj.x.col(0).mean() * betaTruth(config.simCase, t0) +
                       subj.z.col(0).mean() * nuT0;
        out.data.subjects.push_back(std::move(subj));
    }
    return out;
}

namespace {

void runReplicate(const SimulationConfig& config, int k, double t0, ReplicateRecord& rec) {
    try {
        const GeneratedReplicate gen = generate(config, k, t0);
        const BSplineBasisd fixedBasis = BSplineBasisd::make(config.order, config.interiorKnots);
        const BSplineBasisd randomBasis = fixedBasis;
        const FittedModel model = fit(gen.data, fixedBasis, randomBasis, config.fitConfig);
        const DesignMatrices design = buildDesign(gen.data, fixedBasis, randomBasis);
        const MseWorkspace ws = buildMseWorkspace(design, model);

        const int n = config.n;
        rec.trueA = gen.trueA;
        rec.aHat.resize(n);
        rec.mseEst.resize(n);
        rec.mseFirst.resize(n);
        rec.lower.resize(n);
        rec.upper.resize(n);
        rec.covered.assign(n, 0);
        rec.sigmaHat2 = model.variance.sigmaE2;
        for (int i = 0; i < n; ++i) {
            const TargetVectors tv = buildTarget(subjectMeanTarget(gen.data, i, t0), fixedBasis,
                                                 randomBasis, n, design.p, design.q);
            const PredictionResult r = predictTarget(model, ws, tv);
            rec.aHat[i] = r.aCorrected;
            rec.mseEst[i] = r.msePlugin;
            rec.mseFirst[i] = r.mseFirstOrder;
            if (config.forceInfiniteIntervals) {
                rec.lower[i] = -std::numeric_limits<double>::infinity();
                rec.upper[i] = std::numeric_limits<double>::infinity();
            } else {
                rec.lower[i] = r.lower;
                rec.upper[i] = r.upper;
            }
            rec.covered[i] =
                (gen.trueA[i] >= rec.lower[i] && gen.trueA[i] <= rec.upper[i]) ? 1 : 0;
        }
        rec.failed = false;
    } catch (const Error& e) {
        rec.failed = true;
        rec.error = e.what();
    }
}

double sampleSd(const Eigen::VectorXd& v) {
    if (v.size() < 2) return 0.0;
    const double mean = v.mean();
    return std::sqrt((v.array() - mean).square().sum() / double(v.size() - 1));
}

} // namespace

ReplicationReport runStudy(const SimulationConfig& config) {
    const auto start = std::chrono::steady_clock::now();
    const double t0 = resolveT0(config);

    ReplicationReport report;
    report.simCase = config.simCase;
    report.n = config.n;
    report.m = config.m;
    report.K = config.K;
    report.seed = config.masterSeed;
    report.t0 = t0;
    report.records.resize(config.K);

    const int jobs = std::max(1, config.jobs);
    if (jobs == 1) {
        for (int k = 0; k < config.K; ++k) runReplicate(config, k, t0, report.records[k]);
    } else {
        std::vector<std::thread> workers;
        workers.reserve(jobs);
        for (int w = 0; w < jobs; ++w)
            workers.emplace_back([&, w] {
                for (int k = w; k < config.K; k += jobs)
                    runReplicate(config, k, t0, report.records[k]);
            });
        for (auto& th : workers) th.join();
    }

    // deterministic fold in replicate-index order
    const int n = config.n;
    Eigen::VectorXd sqErr = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd estSum = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd covSum = Eigen::VectorXd::Zero(n);
    std::vector<double> sigmaHats;
    std::vector<double> repCoverage;
    int ok = 0;
    for (const auto& rec : report.records) {
        if (rec.failed) {
            ++report.failedReplicates;
            continue;
        }
        ++ok;
        double hits = 0.0;
        for (int i = 0; i < n; ++i) {
            const double err = rec.aHat[i] - rec.trueA[i];
            sqErr[i] += err * err;
            estSum[i] += rec.mseEst[i];
            covSum[i] += rec.covered[i];
            hits += rec.covered[i];
            report.minPluginMinusFirst =
                std::min(report.minPluginMinusFirst, rec.mseEst[i] - rec.mseFirst[i]);
            if (std::isfinite(rec.upper[i]) && std::isfinite(rec.lower[i])) {
                const double width = rec.upper[i] - rec.lower[i];
                report.maxWidthIdentityError =
                    std::max(report.maxWidthIdentityError,
                             std::abs(width - 4.0 * std::sqrt(std::max(0.0, rec.mseEst[i]))));
            }
        }
        sigmaHats.push_back(std::sqrt(rec.sigmaHat2));
        repCoverage.push_back(hits / double(n));
    }
    if (ok == 0) throw NumericalError("all replicates failed");
    if (double(report.failedReplicates) > 0.02 * double(config.K))
        throw NumericalError(std::to_string(report.failedReplicates) + " of " +
                             std::to_string(config.K) + " replicates failed (limit 2%)");

    report.trueMsePerSubject = sqErr / double(ok);
    report.meanEstMsePerSubject = estSum / double(ok);
    report.coveragePerSubject = covSum / double(ok);

    report.coverage = report.coveragePerSubject.mean();
    report.coverageSeSubjects = sampleSd(report.coveragePerSubject) / std::sqrt(double(n));
    Eigen::VectorXd repCov = Eigen::Map<Eigen::VectorXd>(repCoverage.data(), ok);
    report.coverageSeReplicates = sampleSd(repCov) / std::sqrt(double(ok));

    report.trueMse = report.trueMsePerSubject.mean();
    report.trueMseSe = sampleSd(report.trueMsePerSubject) / std::sqrt(double(n));

    Eigen::VectorXd relBias(n);
    for (int i = 0; i < n; ++i)
        relBias[i] =
            (report.meanEstMsePerSubject[i] - report.trueMsePerSubject[i]) /
            report.trueMsePerSubject[i];
    report.relativeBias = relBias.mean();
    report.relativeBiasSe = sampleSd(relBias) / std::sqrt(double(n));

    Eigen::VectorXd sig = Eigen::Map<Eigen::VectorXd>(sigmaHats.data(), ok);
    report.sigmaHatMean = sig.mean();
    report.sigmaHatSe = sampleSd(sig);

    report.wallSeconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

TimeMetrics metricsAtTime(const Eigen::MatrixXd& truth, const Eigen::MatrixXd& predicted,
                          const Eigen::MatrixXd& lower, const Eigen::MatrixXd& upper) {
    if (truth.rows() != predicted.rows() || truth.cols() != predicted.cols() ||
        truth.rows() != lower.rows() || truth.cols() != lower.cols() ||
        truth.rows() != upper.rows() || truth.cols() != upper.cols())
        throw ShapeError("metricsAtTime arrays must be aligned");
    TimeMetrics m;
    const auto total = double(truth.size());
    double biasSum = 0.0;
    long biasCount = 0;
    for (Eigen::Index j = 0; j < truth.cols(); ++j) {
        for (Eigen::Index i = 0; i < truth.rows(); ++i) {
            const double a = truth(i, j);
            m.coverage += (a >= lower(i, j) && a <= upper(i, j)) ? 1.0 : 0.0;
            m.meanLength += upper(i, j) - lower(i, j);
            if (a == 0.0) {
                ++m.excluded;
            } else {
                biasSum += std::abs((a - predicted(i, j)) / a);
                ++biasCount;
            }
        }
    }
    m.coverage /= total;
    m.meanLength /= total;
    m.predictionBias = biasCount > 0 ? biasSum / double(biasCount) : 0.0;
    return m;
}

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

void writeRawCsv(const ReplicationReport& report, std::ostream& out,
                 const std::string& headerComment) {
    out << "# " << headerComment << "\n";
    out << "replicate,subject,A,A_hat,MSE_est,covered,sigma_hat2\n";
    for (int k = 0; k < static_cast<int>(report.records.size()); ++k) {
        const auto& rec = report.records[k];
        if (rec.failed) continue;
        for (int i = 0; i < report.n; ++i)
            out << k << ',' << (i + 1) << ',' << fmt(rec.trueA[i]) << ',' << fmt(rec.aHat[i])
                << ',' << fmt(rec.mseEst[i]) << ',' << int(rec.covered[i]) << ','
                << fmt(rec.sigmaHat2) << "\n";
    }
}

void writeSummaryCsv(const ReplicationReport& report, std::ostream& out,
                     const std::string& headerComment) {
    out << "# " << headerComment << "\n";
    out << "case,n,sigma_hat,sigma_hat_se,coverage,coverage_se_subjects,"
           "coverage_se_replicates,relative_bias,relative_bias_se,true_mse,true_mse_se,"
           "failed_replicates,wall_clock_sec\n";
    out << toString(report.simCase) << ',' << report.n << ',' << fmt(report.sigmaHatMean) << ','
        << fmt(report.sigmaHatSe) << ',' << fmt(report.coverage) << ','
        << fmt(report.coverageSeSubjects) << ',' << fmt(report.coverageSeReplicates) << ','
        << fmt(report.relativeBias) << ',' << fmt(report.relativeBiasSe) << ','
        << fmt(report.trueMse) << ',' << fmt(report.trueMseSe) << ','
        << report.failedReplicates << ',' << fmt(report.wallSeconds) << "\n";
}

} // namespace flmm
