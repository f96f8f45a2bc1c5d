// Command-line front end: fit a functional linear mixed model from CSV,
// predict mixed effects with bias correction and MSE-based intervals, or run
// a replicated simulation study.
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "flmm/dataset.hpp"
#include "flmm/design.hpp"
#include "flmm/errors.hpp"
#include "flmm/model_io.hpp"
#include "flmm/predict.hpp"
#include "flmm/simulate.hpp"
#include "flmm/smoothing.hpp"
#include "flmm/solver.hpp"

namespace {

using nlohmann::json;

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string hashHex(const std::string& s) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, fnv1a(s));
    return buf;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct CommonOptions {
    std::string input;
    std::string out = ".";
    int order = 4;
    int knots = 5;
    int randomOrder = -1;  // -1: same as fixed
    int randomKnots = -1;
    std::string smoothing = "select";
    std::vector<double> lambda;
    std::vector<double> eta;
};

flmm::FitConfig makeFitConfig(const CommonOptions& opt) {
    flmm::FitConfig cfg;
    const bool fixedMode = opt.smoothing == "fixed";
    if (opt.smoothing != "fixed" && opt.smoothing != "select")
        throw CLI::ValidationError("--smoothing must be 'select' or 'fixed'");
    if (fixedMode || !opt.lambda.empty()) {
        cfg.lambdaMode = flmm::SmoothingMode::Fixed;
        cfg.lambdaFixed = Eigen::VectorXd::Ones(1);
        if (!opt.lambda.empty())
            cfg.lambdaFixed = Eigen::Map<const Eigen::VectorXd>(
                opt.lambda.data(), static_cast<Eigen::Index>(opt.lambda.size()));
    }
    if (fixedMode || !opt.eta.empty()) {
        cfg.etaMode = flmm::SmoothingMode::Fixed;
        cfg.etaFixed = Eigen::VectorXd::Ones(1);
        if (!opt.eta.empty())
            cfg.etaFixed = Eigen::Map<const Eigen::VectorXd>(
                opt.eta.data(), static_cast<Eigen::Index>(opt.eta.size()));
    }
    return cfg;
}

flmm::BSplineBasisd fixedBasisOf(const CommonOptions& opt) {
    return flmm::BSplineBasisd::make(opt.order, opt.knots);
}

flmm::BSplineBasisd randomBasisOf(const CommonOptions& opt) {
    return flmm::BSplineBasisd::make(opt.randomOrder < 0 ? opt.order : opt.randomOrder,
                                     opt.randomKnots < 0 ? opt.knots : opt.randomKnots);
}

void requireFile(const std::string& path, const std::string& what) {
    if (path.empty() || !std::filesystem::exists(path))
        throw CLI::ValidationError(what + " file not found: '" + path + "'");
}

std::ofstream openOutput(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw flmm::SchemaError("cannot open output file: " + path.string());
    return out;
}

std::string smoothingDescription(const CommonOptions& opt) {
    std::ostringstream s;
    s << opt.smoothing;
    for (double v : opt.lambda) s << " lambda=" << v;
    for (double v : opt.eta) s << " eta=" << v;
    return s.str();
}

int runFit(const CommonOptions& opt) {
    requireFile(opt.input, "input");
    std::filesystem::create_directories(opt.out);
    const std::string hash =
        hashHex("fit|" + opt.input + "|order=" + std::to_string(opt.order) +
                "|knots=" + std::to_string(opt.knots) +
                "|rorder=" + std::to_string(opt.randomOrder) +
                "|rknots=" + std::to_string(opt.randomKnots) + "|" + smoothingDescription(opt));
    const std::string comment = "config=" + hash + " seed=none";

    const flmm::LongitudinalDataset data = flmm::loadDataset(opt.input);
    const auto fixedBasis = fixedBasisOf(opt);
    const auto randomBasis = randomBasisOf(opt);
    const flmm::FitConfig cfg = makeFitConfig(opt);

    const std::filesystem::path outDir(opt.out);
    try {
        const flmm::FittedModel model = flmm::fit(data, fixedBasis, randomBasis, cfg);
        flmm::saveModel(model, (outDir / "model.json").string(), comment);
        auto diag = openOutput(outDir / "fit_diagnostics.txt");
        diag << "# " << comment << "\n";
        diag << "subjects: " << data.n() << "\nobservations: " << data.totalObs() << "\n";
        diag << "iterations: " << model.diagnostics.iterations << "\n";
        diag << "final_delta: " << fmt(model.diagnostics.finalDelta) << "\n";
        diag << "sigma_e2: " << fmt(model.variance.sigmaE2) << "\n";
        diag << "lambda:";
        for (int i = 0; i < model.lambda.size(); ++i) diag << ' ' << fmt(model.lambda[i]);
        diag << "\neta:";
        for (int i = 0; i < model.eta.size(); ++i) diag << ' ' << fmt(model.eta[i]);
        diag << "\nlambda_at_lower_bound: " << model.diagnostics.lambdaAtLowerBound
             << "\nlambda_at_upper_bound: " << model.diagnostics.lambdaAtUpperBound << "\n";
        std::cout << "fit converged in " << model.diagnostics.iterations << " iterations; "
                  << "archive written to " << (outDir / "model.json").string() << "\n";
        return 0;
    } catch (const flmm::ConvergenceError& e) {
        std::cerr << "fit failed: " << e.what() << "\n"
                  << "iterations: " << e.iterations << ", last delta: " << e.lastDelta << "\n";
        auto diag = openOutput(outDir / "fit_diagnostics.txt");
        diag << "# " << comment << "\nconverged: 0\niterations: " << e.iterations
             << "\nlast_delta: " << fmt(e.lastDelta) << "\n";
        return 1;
    }
}

int runPredict(const CommonOptions& opt, const std::string& modelPath, double t0,
               const json& configJson) {
    requireFile(opt.input, "input");
    requireFile(modelPath, "model");
    std::filesystem::create_directories(opt.out);

    flmm::FittedModel model = flmm::loadModel(modelPath);
    const flmm::LongitudinalDataset data = flmm::loadDataset(opt.input);
    if (model.p != data.p || model.q != data.q)
        throw flmm::CompatibilityError(
            "model archive has p=" + std::to_string(model.p) + ", q=" + std::to_string(model.q) +
            " but dataset has p=" + std::to_string(data.p) + ", q=" + std::to_string(data.q));
    // basis flags, when given, must agree with the archive
    if (opt.order != model.fixedBasis.order || opt.knots != model.fixedBasis.interiorKnots)
        throw flmm::CompatibilityError(
            "requested basis (order=" + std::to_string(opt.order) +
            ", knots=" + std::to_string(opt.knots) + ") differs from archive basis (order=" +
            std::to_string(model.fixedBasis.order) +
            ", knots=" + std::to_string(model.fixedBasis.interiorKnots) + ")");

    const flmm::DesignMatrices design =
        flmm::buildDesign(data, model.fixedBasis, model.randomBasis);
    model.refreshCaches(design);
    const flmm::MseWorkspace ws = flmm::buildMseWorkspace(design, model);

    if (!std::isfinite(t0)) t0 = data.subjects.front().times[0];

    struct NamedTarget {
        std::string name;
        flmm::MixedEffectTarget target;
    };
    std::vector<NamedTarget> targets;
    if (configJson.contains("targets")) {
        int idx = 0;
        for (const auto& jt : configJson["targets"]) {
            flmm::MixedEffectTarget t;
            t.t0 = jt.value("t0", t0);
            const auto l0 = jt.at("l0").get<std::vector<double>>();
            t.l0 = Eigen::Map<const Eigen::VectorXd>(l0.data(), l0.size());
            if (jt.contains("d0"))
                for (const auto& [key, val] : jt["d0"].items()) {
                    const auto w = val.get<std::vector<double>>();
                    t.d0[std::stoi(key) - 1] =
                        Eigen::Map<const Eigen::VectorXd>(w.data(), w.size());
                }
            targets.push_back({"target" + std::to_string(++idx), std::move(t)});
        }
    } else {
        for (int i = 0; i < data.n(); ++i)
            targets.push_back({data.subjects[i].id, flmm::subjectMeanTarget(data, i, t0)});
    }

    const std::string hash = hashHex("predict|" + opt.input + "|" + modelPath +
                                     "|t0=" + fmt(t0) + "|targets=" +
                                     std::to_string(targets.size()));
    auto out = openOutput(std::filesystem::path(opt.out) / "predictions.csv");
    out << "# config=" << hash << " seed=none\n";
    out << "target,t0,a_naive,a_corrected,mse_first,mse_plugin,lower,upper\n";
    for (const auto& [name, target] : targets) {
        const flmm::TargetVectors tv = flmm::buildTarget(target, model.fixedBasis,
                                                         model.randomBasis, data.n(), data.p,
                                                         data.q);
        const flmm::PredictionResult r = flmm::predictTarget(model, ws, tv);
        out << name << ',' << fmt(target.t0) << ',' << fmt(r.aNaive) << ','
            << fmt(r.aCorrected) << ',' << fmt(r.mseFirstOrder) << ',' << fmt(r.msePlugin)
            << ',' << fmt(r.lower) << ',' << fmt(r.upper) << "\n";
    }
    std::cout << targets.size() << " predictions written to "
              << (std::filesystem::path(opt.out) / "predictions.csv").string() << "\n";
    return 0;
}

int runSimulate(const CommonOptions& opt, const std::string& caseName, int n, int m, int K,
                std::uint64_t seed, int jobs, double t0) {
    std::filesystem::create_directories(opt.out);
    flmm::SimulationConfig cfg;
    cfg.simCase = flmm::simCaseFromString(caseName);
    cfg.n = n;
    cfg.m = m;
    cfg.K = K;
    cfg.masterSeed = seed;
    cfg.order = opt.order;
    cfg.interiorKnots = opt.knots;
    cfg.t0 = t0;
    cfg.jobs = jobs > 0 ? jobs : int(std::max(1u, std::thread::hardware_concurrency()));
    if (opt.smoothing == "fixed" || !opt.lambda.empty() || !opt.eta.empty()) {
        const flmm::FitConfig base = makeFitConfig(opt);
        cfg.fitConfig = base;
        if (cfg.fitConfig.etaMode == flmm::SmoothingMode::Select && m == 1)
            cfg.fitConfig = flmm::defaultStudyFitConfig();
    }

    // semantic hash: jobs and output paths do not change results
    const std::string hash = hashHex(
        "simulate|case=" + caseName + "|n=" + std::to_string(n) + "|m=" + std::to_string(m) +
        "|K=" + std::to_string(K) + "|seed=" + std::to_string(seed) + "|order=" +
        std::to_string(opt.order) + "|knots=" + std::to_string(opt.knots) + "|t0=" + fmt(t0) +
        "|" + smoothingDescription(opt) + "|rng=" + flmm::rngIdentity());
    const std::string comment =
        "config=" + hash + " seed=" + std::to_string(seed) + " rng=" + flmm::rngIdentity();

    const flmm::ReplicationReport report = flmm::runStudy(cfg);
    {
        auto raw = openOutput(std::filesystem::path(opt.out) / "raw.csv");
        flmm::writeRawCsv(report, raw, comment);
    }
    {
        auto summary = openOutput(std::filesystem::path(opt.out) / "summary.csv");
        flmm::writeSummaryCsv(report, summary, comment);
    }
    std::cout << "case " << caseName << " n=" << n << " K=" << K
              << ": coverage=" << report.coverage << " sigma_hat=" << report.sigmaHatMean
              << " relative_bias=" << report.relativeBias << " true_mse=" << report.trueMse
              << " wall=" << report.wallSeconds << "s\n";
    return 0;
}

json loadConfigJson(int argc, char** argv) {
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--config") {
            std::ifstream in(argv[i + 1]);
            if (!in) throw CLI::ValidationError("cannot open config file: " + std::string(argv[i + 1]));
            json j;
            in >> j;
            return j;
        }
    return json::object();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"functional linear mixed models: penalized-spline fitting, bias-corrected "
                 "mixed-effect prediction with MSE estimates, and simulation studies"};
    app.require_subcommand(1);

    json configJson;
    try {
        configJson = loadConfigJson(argc, argv);
    } catch (const CLI::Error& e) {
        std::cerr << e.what() << "\n";
        return 2;
    }

    CommonOptions opt;
    std::string configPath;
    std::string modelPath;
    std::string caseName = configJson.value("case", "I");
    int n = configJson.value("n", 50);
    int m = configJson.value("m", 1);
    int K = configJson.value("K", 600);
    std::uint64_t seed = configJson.value("seed", 1ull);
    int jobs = configJson.value("jobs", 0);
    double t0 = configJson.value("t0", std::numeric_limits<double>::quiet_NaN());

    opt.input = configJson.value("input", "");
    opt.out = configJson.value("out", ".");
    opt.order = configJson.value("order", 4);
    opt.knots = configJson.value("knots", 5);
    opt.smoothing = configJson.value("smoothing", "select");
    if (configJson.contains("lambda")) opt.lambda = configJson["lambda"].get<std::vector<double>>();
    if (configJson.contains("eta")) opt.eta = configJson["eta"].get<std::vector<double>>();
    modelPath = configJson.value("model", "");

    auto addCommon = [&](CLI::App* sub) {
        sub->add_option("--config", configPath, "JSON config file; explicit flags win");
        sub->add_option("--input", opt.input, "input CSV dataset");
        sub->add_option("--out", opt.out, "output directory");
        sub->add_option("--order", opt.order, "spline order for both roles");
        sub->add_option("--knots", opt.knots, "interior knot count for both roles");
        sub->add_option("--random-order", opt.randomOrder, "random-effect basis order override");
        sub->add_option("--random-knots", opt.randomKnots,
                        "random-effect basis interior knots override");
        sub->add_option("--smoothing", opt.smoothing, "select | fixed");
        sub->add_option("--lambda", opt.lambda, "fixed-effect smoothing weights (fixes lambda)");
        sub->add_option("--eta", opt.eta, "random-effect smoothing weights (fixes eta)");
    };

    CLI::App* fitCmd = app.add_subcommand("fit", "fit a model from a CSV dataset");
    addCommon(fitCmd);

    CLI::App* predictCmd =
        app.add_subcommand("predict", "predict mixed effects from a fitted model archive");
    addCommon(predictCmd);
    predictCmd->add_option("--model", modelPath, "model archive from 'fit'");
    predictCmd->add_option("--t0", t0, "target time (default: first observed time)");

    CLI::App* simulateCmd = app.add_subcommand("simulate", "run a replicated simulation study");
    addCommon(simulateCmd);
    simulateCmd->add_option("--case", caseName, "I | II | III");
    simulateCmd->add_option("--n", n, "subjects per replicate");
    simulateCmd->add_option("--m", m, "observations per subject");
    simulateCmd->add_option("--K", K, "replicate count");
    simulateCmd->add_option("--seed", seed, "master seed");
    simulateCmd->add_option("--jobs", jobs, "parallel replicate workers (0 = cores)");
    simulateCmd->add_option("--t0", t0, "target time (default: first time of replicate 0)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp")
            return app.exit(e);
        std::cerr << e.what() << "\n";
        return 2;
    }

    try {
        if (fitCmd->parsed()) return runFit(opt);
        if (predictCmd->parsed()) return runPredict(opt, modelPath, t0, configJson);
        return runSimulate(opt, caseName, n, m, K, seed, jobs, t0);
    } catch (const CLI::Error& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const flmm::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
