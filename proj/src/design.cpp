#include "flmm/design.hpp"

namespace flmm {

DesignMatrices buildDesign(const LongitudinalDataset& data, const BSplineBasisd& fixedBasis,
                           const BSplineBasisd& randomBasis) {
    DesignMatrices d;
    d.p = data.p;
    d.q = data.q;
    d.Lf = fixedBasis.size();
    d.Lr = randomBasis.size();
    d.N = data.totalObs();
    d.W.resize(d.N, d.p * d.Lf);
    d.y.resize(d.N);

    int offset = 0;
    for (const auto& subj : data.subjects) {
        const int m = static_cast<int>(subj.times.size());
        SubjectDesign sd;
        sd.offset = offset;
        sd.W.resize(m, d.p * d.Lf);
        sd.U.resize(m, d.q * d.Lr);
        sd.y = subj.y;
        for (int j = 0; j < m; ++j) {
            const Eigen::VectorXd bf = evalBasis(fixedBasis, subj.times[j]);
            const Eigen::VectorXd br = evalBasis(randomBasis, subj.times[j]);
            for (int k = 0; k < d.p; ++k)
                sd.W.row(j).segment(k * d.Lf, d.Lf) = subj.x(j, k) * bf.transpose();
            for (int k = 0; k < d.q; ++k)
                sd.U.row(j).segment(k * d.Lr, d.Lr) = subj.z(j, k) * br.transpose();
        }
        d.W.middleRows(offset, m) = sd.W;
        d.y.segment(offset, m) = sd.y;
        offset += m;
        d.subjects.push_back(std::move(sd));
    }
    return d;
}

TargetVectors buildTarget(const MixedEffectTarget& target, const BSplineBasisd& fixedBasis,
                          const BSplineBasisd& randomBasis, int nSubjects, int p, int q) {
    if (!(target.t0 >= 0.0 && target.t0 <= 1.0))
        throw DomainError("target time outside [0,1]: " + std::to_string(target.t0));
    if (target.l0.size() != p)
        throw ShapeError("target l0 has length " + std::to_string(target.l0.size()) +
                         ", expected p=" + std::to_string(p));

    int nonzero = 0;
    for (const auto& [i, w] : target.d0) {
        if (i < 0 || i >= nSubjects)
            throw ShapeError("target references subject " + std::to_string(i) +
                             " outside 0.." + std::to_string(nSubjects - 1));
        if (w.size() != q)
            throw ShapeError("target d0 block has length " + std::to_string(w.size()) +
                             ", expected q=" + std::to_string(q));
        if (w.norm() > 0.0) ++nonzero;
    }
    if (nonzero > kMaxTargetSubjects)
        throw SparsityError("target touches " + std::to_string(nonzero) +
                            " subjects; sparse-target bound is " +
                            std::to_string(kMaxTargetSubjects));

    TargetVectors tv;
    tv.t0 = target.t0;
    const Eigen::VectorXd bf = evalBasis(fixedBasis, target.t0);
    const Eigen::VectorXd br = evalBasis(randomBasis, target.t0);
    const int Lf = fixedBasis.size(), Lr = randomBasis.size();
    tv.l = Eigen::VectorXd::Zero(p * Lf);
    for (int k = 0; k < p; ++k) tv.l.segment(k * Lf, Lf) = target.l0[k] * bf;
    for (const auto& [i, w] : target.d0) {
        if (w.norm() == 0.0) continue;
        Eigen::VectorXd block = Eigen::VectorXd::Zero(q * Lr);
        for (int k = 0; k < q; ++k) block.segment(k * Lr, Lr) = w[k] * br;
        tv.d[i] = std::move(block);
    }
    return tv;
}

MixedEffectTarget subjectMeanTarget(const LongitudinalDataset& data, int subject, double t0) {
    if (subject < 0 || subject >= data.n())
        throw ShapeError("subject index " + std::to_string(subject) + " out of range");
    MixedEffectTarget t;
    t.t0 = t0;
    t.l0 = data.subjects[subject].x.colwise().mean();
    t.d0[subject] = data.subjects[subject].z.colwise().mean();
    return t;
}

} // namespace flmm
