#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <string>
#include <vector>

#include "flmm/errors.hpp"

namespace flmm {

/// One subject's observations, rows ordered by time.
struct SubjectData {
    std::string id;
    Eigen::VectorXd times;  // in [0,1]
    Eigen::VectorXd y;
    Eigen::MatrixXd x;  // m_i x p fixed-effect covariates
    Eigen::MatrixXd z;  // m_i x q random-effect covariates
};

/// Longitudinal data grouped by subject.  p, q are constant across subjects;
/// every observed time carries a response and full covariate rows.
struct LongitudinalDataset {
    std::vector<SubjectData> subjects;
    int p = 0;
    int q = 0;

    int n() const { return static_cast<int>(subjects.size()); }
    int totalObs() const {
        int s = 0;
        for (const auto& subj : subjects) s += static_cast<int>(subj.times.size());
        return s;
    }
};

/// Reads a CSV with header columns: subject, t, y, x1..xp, z1..zq.
/// Subjects keep first-appearance order; rows are stably sorted by t within
/// each subject.  Throws SchemaError / ParseError / DomainError with the
/// offending column or 1-based row number.
LongitudinalDataset loadDataset(const std::string& path);
LongitudinalDataset readDatasetCsv(std::istream& in, const std::string& sourceName);

/// Writes the dataset in the same schema with full round-trip precision.
void writeDatasetCsv(const LongitudinalDataset& data, std::ostream& out);
void saveDataset(const LongitudinalDataset& data, const std::string& path);

} // namespace flmm
