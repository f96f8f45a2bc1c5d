#include "flmm/model_io.hpp"

#include <fstream>

#include <json.hpp>

#include "flmm/errors.hpp"

namespace flmm {

namespace {

using nlohmann::json;

json vectorToJson(const Eigen::VectorXd& v) {
    json a = json::array();
    for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

json matrixToJson(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (int i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

Eigen::VectorXd vectorFromJson(const json& a) {
    Eigen::VectorXd v(a.size());
    for (size_t i = 0; i < a.size(); ++i) v[static_cast<int>(i)] = a[i].get<double>();
    return v;
}

Eigen::MatrixXd matrixFromJson(const json& a) {
    const int rows = static_cast<int>(a.size());
    const int cols = rows > 0 ? static_cast<int>(a[0].size()) : 0;
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = a[i][j].get<double>();
    return m;
}

} // namespace

void saveModel(const FittedModel& model, const std::string& path,
               const std::string& headerComment) {
    json j;
    j["format"] = "flmm-model-v1";
    j["p"] = model.p;
    j["q"] = model.q;
    j["fixed_basis"] = {{"order", model.fixedBasis.order},
                        {"interior_knots", model.fixedBasis.interiorKnots}};
    j["random_basis"] = {{"order", model.randomBasis.order},
                         {"interior_knots", model.randomBasis.interiorKnots}};
    j["theta"] = vectorToJson(model.theta);
    json alphas = json::array();
    for (const auto& a : model.alphas) alphas.push_back(vectorToJson(a));
    j["alphas"] = std::move(alphas);
    j["omega"] = matrixToJson(model.variance.omega);
    j["sigma_e2"] = model.variance.sigmaE2;
    j["lambda"] = vectorToJson(model.lambda);
    j["eta"] = vectorToJson(model.eta);
    j["diagnostics"] = {{"iterations", model.diagnostics.iterations},
                        {"final_delta", model.diagnostics.finalDelta},
                        {"converged", model.diagnostics.converged},
                        {"lambda_at_lower_bound", model.diagnostics.lambdaAtLowerBound},
                        {"lambda_at_upper_bound", model.diagnostics.lambdaAtUpperBound}};

    std::ofstream out(path);
    if (!out) throw SchemaError("cannot open model archive for writing: " + path);
    out << "# " << headerComment << "\n" << j.dump(2) << "\n";
}

FittedModel loadModel(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError("cannot open model archive: " + path);
    std::string line, body;
    while (std::getline(in, line)) {
        if (!line.empty() && line[0] == '#') continue;
        body += line;
        body += '\n';
    }
    json j;
    try {
        j = json::parse(body);
    } catch (const std::exception& e) {
        throw ParseError("model archive is not valid JSON: " + std::string(e.what()));
    }
    if (j.value("format", "") != "flmm-model-v1")
        throw CompatibilityError("unknown model archive format '" + j.value("format", "") + "'");

    FittedModel model;
    model.p = j.at("p").get<int>();
    model.q = j.at("q").get<int>();
    model.fixedBasis = BSplineBasisd::make(j.at("fixed_basis").at("order").get<int>(),
                                           j.at("fixed_basis").at("interior_knots").get<int>());
    model.randomBasis = BSplineBasisd::make(j.at("random_basis").at("order").get<int>(),
                                            j.at("random_basis").at("interior_knots").get<int>());
    model.theta = vectorFromJson(j.at("theta"));
    for (const auto& a : j.at("alphas")) model.alphas.push_back(vectorFromJson(a));
    model.variance.omega = matrixFromJson(j.at("omega"));
    model.variance.sigmaE2 = j.at("sigma_e2").get<double>();
    model.lambda = vectorFromJson(j.at("lambda"));
    model.eta = vectorFromJson(j.at("eta"));
    const auto& d = j.at("diagnostics");
    model.diagnostics.iterations = d.at("iterations").get<int>();
    model.diagnostics.finalDelta = d.at("final_delta").get<double>();
    model.diagnostics.converged = d.at("converged").get<bool>();
    model.diagnostics.lambdaAtLowerBound = d.value("lambda_at_lower_bound", false);
    model.diagnostics.lambdaAtUpperBound = d.value("lambda_at_upper_bound", false);

    model.penalties.beta = blockDiagPenalty(model.lambda, penaltyMatrix(model.fixedBasis));
    model.penalties.nu = blockDiagPenalty(model.eta, penaltyMatrix(model.randomBasis));
    return model;
}

} // namespace flmm
