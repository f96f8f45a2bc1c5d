#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <sstream>

#include "flmm/design.hpp"
#include "flmm/simulate.hpp"

using namespace flmm;

namespace {

LongitudinalDataset fromCsv(const std::string& text) {
    std::istringstream in(text);
    return readDatasetCsv(in, "inline");
}

} // namespace

TEST_CASE("loader groups rows by subject and orders by time") {
    const auto data = fromCsv(
        "subject,t,y,x1,z1\n"
        "a,0.9,1.0,1.0,0.5\n"
        "a,0.1,2.0,2.0,0.25\n"
        "b,0.3,3.0,3.0,0.75\n"
        "b,0.6,4.0,4.0,0.5\n");
    CHECK(data.n() == 2);
    CHECK(data.p == 1);
    CHECK(data.q == 1);
    REQUIRE(data.subjects[0].times.size() == 2);
    REQUIRE(data.subjects[1].times.size() == 2);
    CHECK(data.subjects[0].id == "a");
    // sorted by t within subject, covariates moved with their rows
    CHECK(data.subjects[0].times[0] == 0.1);
    CHECK(data.subjects[0].y[0] == 2.0);
    CHECK(data.subjects[0].x(0, 0) == 2.0);
    CHECK(data.totalObs() == 4);
}

TEST_CASE("loader errors carry the offending row or column") {
    CHECK_THROWS_AS(fromCsv("subject,t,x1,z1\na,0.5,1,1\n"), SchemaError);  // no y
    CHECK_THROWS_AS(fromCsv("subject,t,y,z1\na,0.5,1,1\n"), SchemaError);   // no x1

    try {
        fromCsv("subject,t,y,x1,z1\na,0.5,1,1,1\nb,1.5,1,1,1\n");
        FAIL("expected DomainError");
    } catch (const DomainError& e) {
        CHECK(std::string(e.what()).find("row 3") != std::string::npos);
    }
    try {
        fromCsv("subject,t,y,x1,z1\na,0.5,oops,1,1\n");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("row 2") != std::string::npos);
        CHECK(std::string(e.what()).find("y") != std::string::npos);
    }
}

TEST_CASE("generated data round-trips through CSV bit for bit") {
    SimulationConfig cfg;
    cfg.n = 12;
    cfg.m = 3;
    cfg.K = 1;
    cfg.masterSeed = 42;
    const auto gen = generate(cfg, 0, 0.37);

    std::ostringstream out;
    writeDatasetCsv(gen.data, out);
    const auto back = fromCsv(out.str());

    REQUIRE(back.n() == gen.data.n());
    CHECK(back.p == gen.data.p);
    CHECK(back.q == gen.data.q);
    for (int i = 0; i < back.n(); ++i) {
        CHECK(back.subjects[i].id == gen.data.subjects[i].id);
        CHECK((back.subjects[i].times - gen.data.subjects[i].times).cwiseAbs().maxCoeff() == 0.0);
        CHECK((back.subjects[i].y - gen.data.subjects[i].y).cwiseAbs().maxCoeff() == 0.0);
        CHECK((back.subjects[i].x - gen.data.subjects[i].x).cwiseAbs().maxCoeff() == 0.0);
        CHECK((back.subjects[i].z - gen.data.subjects[i].z).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("constant-covariate design with a single constant basis function") {
    const auto data = fromCsv(
        "subject,t,y,x1,z1\n"
        "a,0.2,1,1,1\n"
        "a,0.8,2,1,1\n"
        "b,0.5,3,1,1\n");
    const auto basis = BSplineBasisd::make(1, 0);  // single indicator over [0,1]
    const auto design = buildDesign(data, basis, basis);
    CHECK(design.W.rows() == 3);
    CHECK(design.W.cols() == 1);
    CHECK((design.W - Eigen::MatrixXd::Ones(3, 1)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("time covariate reproduces observation times in the design column") {
    const auto data = fromCsv(
        "subject,t,y,x1,z1\n"
        "a,0.2,1,0.2,1\n"
        "a,0.8,2,0.8,1\n"
        "b,0.5,3,0.5,1\n");
    const auto basis = BSplineBasisd::make(1, 0);
    const auto design = buildDesign(data, basis, basis);
    CHECK(design.W(0, 0) == 0.2);
    CHECK(design.W(1, 0) == 0.8);
    CHECK(design.W(2, 0) == 0.5);
}

TEST_CASE("design entries match elementwise recomputation") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    LongitudinalDataset data;
    data.p = 2;
    data.q = 1;
    for (int i = 0; i < 3; ++i) {
        SubjectData s;
        s.id = std::to_string(i);
        s.times.resize(2);
        s.y.resize(2);
        s.x.resize(2, 2);
        s.z.resize(2, 1);
        for (int j = 0; j < 2; ++j) {
            s.times[j] = unif(rng);
            s.y[j] = normal(rng);
            s.x(j, 0) = normal(rng);
            s.x(j, 1) = normal(rng);
            s.z(j, 0) = normal(rng);
        }
        std::sort(s.times.data(), s.times.data() + 2);
        data.subjects.push_back(s);
    }
    const auto fb = BSplineBasisd::make(4, 3);
    const auto rb = BSplineBasisd::make(4, 3);
    const auto design = buildDesign(data, fb, rb);
    CHECK(design.W.rows() == 6);
    CHECK(design.W.cols() == 2 * fb.size());

    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 2; ++j) {
            const auto b = evalBasis(fb, data.subjects[i].times[j]);
            const auto br = evalBasis(rb, data.subjects[i].times[j]);
            for (int k = 0; k < 2; ++k)
                for (int l = 0; l < fb.size(); ++l)
                    CHECK(std::abs(design.subjects[i].W(j, k * fb.size() + l) -
                                   data.subjects[i].x(j, k) * b[l]) <= 1e-14);
            for (int l = 0; l < rb.size(); ++l)
                CHECK(std::abs(design.subjects[i].U(j, l) - data.subjects[i].z(j, 0) * br[l]) <=
                      1e-14);
        }
}

TEST_CASE("design is linear in the covariates") {
    SimulationConfig cfg;
    cfg.n = 4;
    cfg.m = 2;
    auto gen = generate(cfg, 1, 0.5);
    const auto basis = BSplineBasisd::make(4, 2);
    const auto d1 = buildDesign(gen.data, basis, basis);
    for (auto& s : gen.data.subjects) s.x *= 3.0;
    const auto d3 = buildDesign(gen.data, basis, basis);
    CHECK((d3.W - 3.0 * d1.W).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("basis expansion evaluates consistently with the model form") {
    // W theta + U alpha at row (i,j) equals the basis-expanded functions
    // evaluated at t_ij, weighted by the covariates
    SimulationConfig cfg;
    cfg.n = 5;
    cfg.m = 3;
    const auto gen = generate(cfg, 2, 0.5);
    const auto fb = BSplineBasisd::make(4, 4);
    const auto rb = BSplineBasisd::make(3, 2);
    const auto design = buildDesign(gen.data, fb, rb);

    std::mt19937_64 rng(3);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd theta(design.fixedDim());
    for (int i = 0; i < theta.size(); ++i) theta[i] = normal(rng);

    for (int i = 0; i < design.n(); ++i) {
        Eigen::VectorXd alpha(design.randomDim());
        for (int k = 0; k < alpha.size(); ++k) alpha[k] = normal(rng);
        const Eigen::VectorXd lhs =
            design.subjects[i].W * theta + design.subjects[i].U * alpha;
        for (int j = 0; j < gen.data.subjects[i].times.size(); ++j) {
            const double t = gen.data.subjects[i].times[j];
            const double beta = evalBasis(fb, t).dot(theta);
            const double nu = evalBasis(rb, t).dot(alpha);
            const double rhs = gen.data.subjects[i].x(j, 0) * beta +
                               gen.data.subjects[i].z(j, 0) * nu;
            CHECK(std::abs(lhs[j] - rhs) <= 1e-12);
        }
    }
}

TEST_CASE("target vectors: zero weights give zero vectors") {
    const auto fb = BSplineBasisd::make(4, 2);
    MixedEffectTarget t;
    t.t0 = 0.4;
    t.l0 = Eigen::VectorXd::Zero(1);
    const auto tv = buildTarget(t, fb, fb, 5, 1, 1);
    CHECK(tv.l.cwiseAbs().maxCoeff() == 0.0);
    CHECK(tv.d.empty());
}

TEST_CASE("target vectors: constant basis collapses to the raw weights") {
    const auto basis = BSplineBasisd::make(1, 0);
    MixedEffectTarget t;
    t.t0 = 0.9;
    t.l0 = Eigen::VectorXd::Ones(1);
    t.d0[2] = Eigen::VectorXd::Ones(1);
    const auto tv = buildTarget(t, basis, basis, 5, 1, 1);
    REQUIRE(tv.l.size() == 1);
    CHECK(tv.l[0] == 1.0);
    REQUIRE(tv.d.count(2) == 1);
    CHECK(tv.d.at(2)[0] == 1.0);
    CHECK(tv.d.size() == 1);
}

TEST_CASE("subject-mean target reproduces the direct evaluation") {
    SimulationConfig cfg;
    cfg.n = 6;
    cfg.m = 4;
    const auto gen = generate(cfg, 3, 0.0);
    const auto fb = BSplineBasisd::make(4, 3);
    const auto rb = BSplineBasisd::make(4, 3);
    const double t0 = 0.62;

    std::mt19937_64 rng(9);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd theta(fb.size());
    for (int i = 0; i < theta.size(); ++i) theta[i] = normal(rng);
    std::vector<Eigen::VectorXd> alphas;
    for (int i = 0; i < 6; ++i) {
        Eigen::VectorXd a(rb.size());
        for (int k = 0; k < a.size(); ++k) a[k] = normal(rng);
        alphas.push_back(a);
    }

    for (int i = 0; i < 6; ++i) {
        const auto target = subjectMeanTarget(gen.data, i, t0);
        const auto tv = buildTarget(target, fb, rb, 6, 1, 1);
        double a = tv.l.dot(theta);
        for (const auto& [s, d] : tv.d) a += d.dot(alphas[s]);

        const double xbar = gen.data.subjects[i].x.col(0).mean();
        const double zbar = gen.data.subjects[i].z.col(0).mean();
        const double direct = xbar * evalBasis(fb, t0).dot(theta) +
                              zbar * evalBasis(rb, t0).dot(alphas[i]);
        CHECK(std::abs(a - direct) <= 1e-12);
    }
}

TEST_CASE("dense targets violate the sparse-target bound") {
    const auto basis = BSplineBasisd::make(4, 2);
    MixedEffectTarget t;
    t.t0 = 0.5;
    t.l0 = Eigen::VectorXd::Ones(1);
    for (int i = 0; i < 20; ++i) t.d0[i] = Eigen::VectorXd::Ones(1);
    CHECK_THROWS_AS(buildTarget(t, basis, basis, 20, 1, 1), SparsityError);
}

TEST_CASE("target validation") {
    const auto basis = BSplineBasisd::make(4, 2);
    MixedEffectTarget bad;
    bad.t0 = 1.5;
    bad.l0 = Eigen::VectorXd::Ones(1);
    CHECK_THROWS_AS(buildTarget(bad, basis, basis, 3, 1, 1), DomainError);

    MixedEffectTarget wrongL;
    wrongL.t0 = 0.5;
    wrongL.l0 = Eigen::VectorXd::Ones(2);
    CHECK_THROWS_AS(buildTarget(wrongL, basis, basis, 3, 1, 1), ShapeError);

    MixedEffectTarget outOfRange;
    outOfRange.t0 = 0.5;
    outOfRange.l0 = Eigen::VectorXd::Ones(1);
    outOfRange.d0[7] = Eigen::VectorXd::Ones(1);
    CHECK_THROWS_AS(buildTarget(outOfRange, basis, basis, 3, 1, 1), ShapeError);
}
