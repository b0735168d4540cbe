#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "neurocarve/errors.hpp"
#include "neurocarve/mesh.hpp"
#include "neurocarve/rng.hpp"

namespace ncarve {

// Principal square root of a symmetric PSD matrix via eigendecomposition.
// Eigenvalues in [-1e-8, 0) are treated as rounding noise and clamped.
inline Eigen::MatrixXd matrix_sqrt_psd(const Eigen::MatrixXd& m) {
    if (m.rows() != m.cols()) throw NotSymmetric("non-square");
    const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-8) throw NotSymmetric("asymmetry " + std::to_string(asym));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd ev = es.eigenvalues();
    for (int i = 0; i < ev.size(); ++i) {
        if (ev[i] < -1e-8)
            throw IndefiniteBeyondTolerance("eigenvalue " + std::to_string(ev[i]));
        if (ev[i] < 0) ev[i] = 0;
    }
    return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

// Frechet distance between two Gaussians:
//   |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)
inline double gaussian_frechet(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a,
                               const Eigen::VectorXd& mu_b, const Eigen::MatrixXd& cov_b) {
    if (mu_a.size() != mu_b.size() || cov_a.rows() != cov_b.rows())
        throw SizeMismatch("moment dims differ");
    const Eigen::MatrixXd sqrt_a = matrix_sqrt_psd(cov_a);
    const Eigen::MatrixXd inner = sqrt_a * cov_b * sqrt_a;
    const Eigen::MatrixXd cross = matrix_sqrt_psd(inner);
    return (mu_a - mu_b).squaredNorm() + (cov_a + cov_b - 2.0 * cross).trace();
}

// Deterministic per-point features: xyz coordinates plus seeded random
// Fourier features, 64 dims total. Stands in for a learned point encoder;
// numbers are comparable only within one extractor seed.
class PointFeatureExtractor {
public:
    static constexpr int kDim = 64;

    explicit PointFeatureExtractor(uint64_t seed = 17, double bandwidth = 2.0) {
        Rng rng(mix_seed(seed, 0x8f3a));
        const int nf = kDim - 3;
        omega_.resize(nf);
        phase_.resize(nf);
        for (int i = 0; i < nf; ++i) {
            omega_[i] = Vec3{rng.normal(), rng.normal(), rng.normal()} * bandwidth;
            phase_[i] = rng.uniform() * 2.0 * M_PI;
        }
    }

    // rows = points, cols = kDim
    Eigen::MatrixXd features(const PointCloud& pc) const {
        Eigen::MatrixXd out(static_cast<long>(pc.points.size()), kDim);
        for (size_t i = 0; i < pc.points.size(); ++i) {
            const Vec3& p = pc.points[i];
            out(static_cast<long>(i), 0) = p.x;
            out(static_cast<long>(i), 1) = p.y;
            out(static_cast<long>(i), 2) = p.z;
            for (size_t k = 0; k < omega_.size(); ++k)
                out(static_cast<long>(i), 3 + static_cast<long>(k)) =
                    std::cos(omega_[k].dot(p) + phase_[k]);
        }
        return out;
    }

private:
    std::vector<Vec3> omega_;
    std::vector<double> phase_;
};

inline void fit_gaussian(const Eigen::MatrixXd& rows, Eigen::VectorXd& mu,
                         Eigen::MatrixXd& cov) {
    const long n = rows.rows();
    mu = rows.colwise().mean();
    const Eigen::MatrixXd centered = rows.rowwise() - mu.transpose();
    cov = centered.transpose() * centered / static_cast<double>(n - 1);
}

// Frechet point-cloud distance over Gaussian fits of per-point features.
inline double fpd(const PointCloud& a, const PointCloud& b, const PointFeatureExtractor& fx) {
    if (a.points.size() < 2 || b.points.size() < 2)
        throw TooFewSamples("need >= 2 points per cloud");
    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd cov_a, cov_b;
    fit_gaussian(fx.features(a), mu_a, cov_a);
    fit_gaussian(fx.features(b), mu_b, cov_b);
    return gaussian_frechet(mu_a, cov_a, mu_b, cov_b);
}

}  // namespace ncarve
