#pragma once

#include <string>

#include "flmm/solver.hpp"

namespace flmm {

/// Writes the fitted model as JSON (matrices row-major as nested arrays) with
/// a leading '#' comment line.  Reload reproduces predictions bit for bit.
void saveModel(const FittedModel& model, const std::string& path,
               const std::string& headerComment);

/// Reads a model archive; penalties are rebuilt from the stored smoothing
/// weights and basis configuration.  Caches are left empty, call
/// refreshCaches() against a design before using them.
FittedModel loadModel(const std::string& path);

} // namespace flmm
