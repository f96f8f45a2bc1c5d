#pragma once

#include <Eigen/Dense>
#include <map>
#include <vector>

#include "flmm/dataset.hpp"
#include "flmm/splines.hpp"

namespace flmm {

/// Per-subject design blocks: row j of W is the concatenation over fixed
/// covariates k of X_k(t_ij) * B(t_ij)'; U is the analogue with the random
/// covariates and the random-effect basis.
struct SubjectDesign {
    Eigen::MatrixXd W;  // m_i x (p * Lf)
    Eigen::MatrixXd U;  // m_i x (q * Lr)
    Eigen::VectorXd y;  // m_i
    int offset = 0;     // first row of this subject in the stacked system
};

struct DesignMatrices {
    std::vector<SubjectDesign> subjects;
    Eigen::MatrixXd W;  // stacked N x (p * Lf)
    Eigen::VectorXd y;  // stacked N
    int p = 0, q = 0;
    int Lf = 0, Lr = 0;  // basis sizes for the fixed and random expansions
    int N = 0;           // total observations

    int n() const { return static_cast<int>(subjects.size()); }
    int fixedDim() const { return p * Lf; }
    int randomDim() const { return q * Lr; }
};

DesignMatrices buildDesign(const LongitudinalDataset& data, const BSplineBasisd& fixedBasis,
                           const BSplineBasisd& randomBasis);

/// A mixed-effect target at time t0: weight l0 on the fixed coefficient
/// functions plus per-subject weights d0 on the random coefficient functions.
/// Only a bounded number of subjects may carry nonzero d0.
struct MixedEffectTarget {
    Eigen::VectorXd l0;              // p
    std::map<int, Eigen::VectorXd> d0;  // subject index -> q-vector
    double t0 = 0.0;
};

/// Expanded target vectors: l in the theta parameterization, d kept sparse
/// keyed by subject (each block has length q * Lr).
struct TargetVectors {
    Eigen::VectorXd l;                  // p * Lf
    std::map<int, Eigen::VectorXd> d;   // subject -> q * Lr block
    double t0 = 0.0;
};

/// Largest number of subjects a single target may touch.  Keeping this a
/// structural bound makes the sparse-target assumption behind the prediction
/// theory checkable rather than advisory.
inline constexpr int kMaxTargetSubjects = 8;

TargetVectors buildTarget(const MixedEffectTarget& target, const BSplineBasisd& fixedBasis,
                          const BSplineBasisd& randomBasis, int nSubjects, int p, int q);

/// Subject-mean target for subject i: l0 = mean of X rows, d0_i = mean of Z
/// rows, all other subjects zero.
MixedEffectTarget subjectMeanTarget(const LongitudinalDataset& data, int subject, double t0);

} // namespace flmm
