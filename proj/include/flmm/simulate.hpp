#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "flmm/predict.hpp"
#include "flmm/solver.hpp"

namespace flmm {

enum class SimCase { I, II, III };

std::string toString(SimCase c);
SimCase simCaseFromString(const std::string& s);

inline FitConfig defaultStudyFitConfig() {
    FitConfig c;
    // closed-form eta updates need per-subject curvature matrices that are
    // singular at one observation per subject, so the study fixes eta
    c.etaMode = SmoothingMode::Fixed;
    c.etaFixed = Eigen::VectorXd::Ones(1);
    return c;
}

struct SimulationConfig {
    SimCase simCase = SimCase::I;
    int n = 50;
    int m = 1;
    int K = 600;
    std::uint64_t masterSeed = 1;
    int order = 4;
    int interiorKnots = 5;
    double t0 = std::numeric_limits<double>::quiet_NaN();  // NaN: first time of replicate 0
    double rho = 0.4;
    double sigmaEps = 1.0;
    bool disableRandomEffects = false;
    bool forceInfiniteIntervals = false;  // test hook: coverage must then be 1
    int jobs = 1;
    FitConfig fitConfig = defaultStudyFitConfig();
};

/// Identity string of the replicate RNG scheme, pinned into every output.
std::string rngIdentity();

struct GeneratedReplicate {
    LongitudinalDataset data;
    Eigen::VectorXd trueA;  // subject-mean mixed effects at t0
    double t0 = 0.0;
};

/// Deterministic synthetic dataset for one replicate; identical inputs give
/// identical output.  t0 must be resolved by the caller (see resolveT0).
GeneratedReplicate generate(const SimulationConfig& config, int replicateIndex, double t0);

/// The configured t0, or the first generated time of replicate 0 when unset.
double resolveT0(const SimulationConfig& config);

/// Covariance used for the direct Gaussian-process draws of the second case.
Eigen::MatrixXd caseIITimeCovariance(const Eigen::VectorXd& times, double rho);

struct ReplicateRecord {
    bool failed = false;
    std::string error;
    double sigmaHat2 = std::numeric_limits<double>::quiet_NaN();
    Eigen::VectorXd trueA;
    Eigen::VectorXd aHat;
    Eigen::VectorXd mseEst;    // plug-in MSE used for the intervals
    Eigen::VectorXd mseFirst;
    Eigen::VectorXd lower, upper;
    std::vector<std::uint8_t> covered;
};

struct ReplicationReport {
    SimCase simCase = SimCase::I;
    int n = 0, m = 0, K = 0;
    std::uint64_t seed = 0;
    double t0 = 0.0;

    Eigen::VectorXd trueMsePerSubject;
    Eigen::VectorXd meanEstMsePerSubject;
    Eigen::VectorXd coveragePerSubject;

    double coverage = 0.0;
    double coverageSeSubjects = 0.0;
    double coverageSeReplicates = 0.0;
    double relativeBias = 0.0;
    double relativeBiasSe = 0.0;
    double trueMse = 0.0;
    double trueMseSe = 0.0;
    double sigmaHatMean = 0.0;  // on the sigma scale
    double sigmaHatSe = 0.0;

    int failedReplicates = 0;
    double wallSeconds = 0.0;
    double minPluginMinusFirst = std::numeric_limits<double>::infinity();
    double maxWidthIdentityError = 0.0;

    std::vector<ReplicateRecord> records;
};

/// Fits and predicts every replicate (subject-mean targets with bias
/// correction), then aggregates in replicate-index order regardless of the
/// parallel schedule.  Throws if more than 2% of replicates fail.
ReplicationReport runStudy(const SimulationConfig& config);

struct TimeMetrics {
    double coverage = 0.0;
    double meanLength = 0.0;
    double predictionBias = 0.0;  // mean |(A - Ahat)/A|, zero-A pairs excluded
    int excluded = 0;
};

/// Pointwise metrics over aligned (subject x replicate) arrays.
TimeMetrics metricsAtTime(const Eigen::MatrixXd& truth, const Eigen::MatrixXd& predicted,
                          const Eigen::MatrixXd& lower, const Eigen::MatrixXd& upper);

/// Raw per-replicate rows: replicate, subject, A, A_hat, MSE_est, covered,
/// sigma_hat2.  `headerComment` goes on the first line after '#'.
void writeRawCsv(const ReplicationReport& report, std::ostream& out,
                 const std::string& headerComment);

/// One-row study summary matching the report fields.
void writeSummaryCsv(const ReplicationReport& report, std::ostream& out,
                     const std::string& headerComment);

} // namespace flmm
