#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <Eigen/Dense>
#include <cmath>

#include "doctest.h"
#include "eqtrack/geometry.hpp"
#include "eqtrack/harmonics.hpp"
#include "eqtrack/rng.hpp"

using namespace eqtrack;

TEST_CASE("real_sph_harm closed-form anchors") {
  auto y0 = real_sph_harm(0, {0.3, -0.8, 0.52});
  CHECK(y0.size() == 1);
  CHECK(y0[0] == doctest::Approx(0.28209479177).epsilon(1e-10));

  auto y1 = real_sph_harm(1, {0.0, 0.0, 1.0});
  REQUIRE(y1.size() == 3);
  CHECK(y1[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(y1[1] == doctest::Approx(0.48860251190).epsilon(1e-10));
  CHECK(y1[2] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("real_sph_harm rejects zero-length directions") {
  CHECK_THROWS_AS(real_sph_harm(1, {0.0, 0.0, 0.0}), Error);
  CHECK_THROWS_AS(real_sph_harm(5, {0.0, 0.0, 1.0}), Error);  // order out of range
}

TEST_CASE("real harmonics are orthonormal under Monte-Carlo quadrature") {
  // inner products over 10^6 uniform sphere samples must approach delta_mm'
  Rng rng(42);
  const int n = 1000000;
  // all components for l = 0..4 stacked: 25 values
  std::vector<double> gram(25 * 25, 0.0);
  for (int i = 0; i < n; ++i) {
    auto u = rng.unit_vector();
    double y[25];
    int at = 0;
    for (int l = 0; l <= 4; ++l) {
      auto yl = real_sph_harm(l, u);
      for (double v : yl) y[at++] = v;
    }
    for (int a = 0; a < 25; ++a)
      for (int b = a; b < 25; ++b) gram[a * 25 + b] += y[a] * y[b];
  }
  const double scale = 4.0 * M_PI / n;  // surface measure of the unit sphere
  for (int a = 0; a < 25; ++a)
    for (int b = a; b < 25; ++b) {
      double v = gram[a * 25 + b] * scale;
      double expect = a == b ? 1.0 : 0.0;
      CHECK(std::fabs(v - expect) < 5e-3);
    }
}

TEST_CASE("cg_real trivial and selection-rule cases") {
  ClebschGordanBlock c000 = cg_real(0, 0, 0);
  CHECK(c000.coefficients.numel() == 1);
  CHECK(std::fabs(c000.coefficients[0]) == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS_AS(cg_real(0, 1, 0), Error);  // |0-1| <= J fails
  CHECK_THROWS_AS(cg_real(1, 1, 3), Error);  // J > l_in + l_out
}

TEST_CASE("cg_real(1,1,0) is the invariant dot-product pairing") {
  ClebschGordanBlock c = cg_real(1, 1, 0);
  // 3x3x1 block proportional to the identity
  double diag = c.coefficients[0];
  CHECK(std::fabs(diag) > 0.1);
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      CHECK(c.coefficients[(a * 3 + b)] == doctest::Approx(a == b ? diag : 0.0).epsilon(1e-12));
}

TEST_CASE("cg_real(1,1,1) is the antisymmetric cross-product pairing") {
  ClebschGordanBlock c = cg_real(1, 1, 1);
  for (int n = 0; n < 3; ++n)
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) {
        double vab = c.coefficients[(a * 3 + b) * 3 + n];
        double vba = c.coefficients[(b * 3 + a) * 3 + n];
        CHECK(vab == doctest::Approx(-vba).epsilon(1e-12));
      }
  CHECK(c.coefficients.max_abs() > 0.1);
}

TEST_CASE("cg_real intertwining identity for random rotations") {
  Rng rng(7);
  for (int li = 0; li <= 2; ++li)
    for (int lo = 0; lo <= 2; ++lo)
      for (int J = std::abs(li - lo); J <= li + lo; ++J) {
        ClebschGordanBlock cg = cg_real(li, lo, J);
        const int di = 2 * li + 1, dj = 2 * J + 1, dO = 2 * lo + 1;
        for (int trial = 0; trial < 5; ++trial) {
          Eigen::Matrix3d r = random_rotation(rng);
          Eigen::MatrixXd din = wigner_d_real(li, r);
          Eigen::MatrixXd dJ = wigner_d_real(J, r);
          Eigen::MatrixXd dout = wigner_d_real(lo, r);
          for (int mo = 0; mo < dO; ++mo)
            for (int mi = 0; mi < di; ++mi)
              for (int n = 0; n < dj; ++n) {
                double lhs = 0.0;
                for (int mi2 = 0; mi2 < di; ++mi2)
                  for (int n2 = 0; n2 < dj; ++n2)
                    lhs += cg.coefficients[(mo * di + mi2) * dj + n2] * din(mi2, mi) * dJ(n2, n);
                double rhs = 0.0;
                for (int mo2 = 0; mo2 < dO; ++mo2)
                  rhs += dout(mo, mo2) * cg.coefficients[(mo2 * di + mi) * dj + n];
                CHECK(std::fabs(lhs - rhs) < 1e-9);
              }
        }
      }
}

TEST_CASE("radial_profile Gaussian shell values") {
  CHECK(radial_profile(0, 0.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(radial_profile(1, 1.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(radial_profile(1, 0.0) == doctest::Approx(std::exp(-1.0 / 0.72)).epsilon(1e-12));
  CHECK(radial_profile(1, 0.0) == doctest::Approx(0.2494).epsilon(1e-3));
}

TEST_CASE("scalar-to-scalar kernels are exactly isotropic") {
  auto basis = build_kernel_basis(0, 0, 3);
  REQUIRE(!basis.empty());
  for (const KernelBasis& kb : basis) {
    CHECK(kb.J == 0);
    // equal values at equal radius
    std::map<long long, double> by_radius;
    for (int iz = 0; iz < 3; ++iz)
      for (int iy = 0; iy < 3; ++iy)
        for (int ix = 0; ix < 3; ++ix) {
          long long r2 = (ix - 1) * (ix - 1) + (iy - 1) * (iy - 1) + (iz - 1) * (iz - 1);
          double v = kb.samples[(static_cast<std::int64_t>(iz) * 3 + iy) * 3 + ix];
          auto it = by_radius.find(r2);
          if (it == by_radius.end())
            by_radius[r2] = v;
          else
            CHECK(v == doctest::Approx(it->second).epsilon(1e-12));
        }
  }
}

TEST_CASE("scalar-to-vector basis has J=1 only, one element per live shell") {
  auto basis = build_kernel_basis(0, 1, 5);
  CHECK(!basis.empty());
  for (const KernelBasis& kb : basis) CHECK(kb.J == 1);
  CHECK(basis.size() <= 3);  // shells 0..2 minus null elements
  CHECK(basis.size() >= 2);
}

TEST_CASE("build_kernel_basis rejects even widths") {
  CHECK_THROWS_AS(build_kernel_basis(0, 0, 4), Error);
}

TEST_CASE("kernel basis elements are linearly independent") {
  for (auto [li, lo] : std::vector<std::pair<int, int>>{{0, 0}, {1, 1}, {2, 2}, {1, 2}}) {
    auto basis = build_kernel_basis(li, lo, 5);
    const int n = static_cast<int>(basis.size());
    REQUIRE(n > 0);
    Eigen::MatrixXd gram(n, n);
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b) {
        double dot = 0.0;
        for (std::int64_t i = 0; i < basis[a].samples.numel(); ++i)
          dot += basis[a].samples[i] * basis[b].samples[i];
        gram(a, b) = dot;
      }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
    CHECK(es.eigenvalues().minCoeff() > 1e-8);
  }
}

TEST_CASE("kernel basis intertwines under the octahedral group") {
  // kappa(R v) = D_out(R) kappa(v) D_in(R)^T at every voxel, for all 24 R
  for (auto [li, lo] : std::vector<std::pair<int, int>>{{0, 1}, {1, 1}, {1, 2}, {2, 2}}) {
    auto basis = build_kernel_basis(li, lo, 5);
    const int k = 5, r0 = 2;
    const int din = 2 * li + 1, dout = 2 * lo + 1;
    double worst = 0.0;
    for (const KernelBasis& kb : basis)
      for (const Eigen::Matrix3d& rot : octahedral_rotations()) {
        Eigen::MatrixXd dI = wigner_d_real(li, rot);
        Eigen::MatrixXd dO = wigner_d_real(lo, rot);
        for (int iz = 0; iz < k; ++iz)
          for (int iy = 0; iy < k; ++iy)
            for (int ix = 0; ix < k; ++ix) {
              Eigen::Vector3d v(ix - r0, iy - r0, iz - r0);
              Eigen::Vector3d rv = rot * v;
              int jx = static_cast<int>(std::llround(rv(0))) + r0;
              int jy = static_cast<int>(std::llround(rv(1))) + r0;
              int jz = static_cast<int>(std::llround(rv(2))) + r0;
              if (jx < 0 || jy < 0 || jz < 0 || jx >= k || jy >= k || jz >= k) continue;
              Eigen::MatrixXd krv(dout, din), kv(dout, din);
              for (int a = 0; a < dout; ++a)
                for (int b = 0; b < din; ++b) {
                  auto at = [&](int x, int y, int z) {
                    return kb.samples[((static_cast<std::int64_t>(a) * din + b) * k + z) * k * k +
                                      y * k + x];
                  };
                  krv(a, b) = at(jx, jy, jz);
                  kv(a, b) = at(ix, iy, iz);
                }
              worst = std::max(worst, (krv - dO * kv * dI.transpose()).cwiseAbs().maxCoeff());
            }
      }
    CHECK(worst < 1e-9);
  }
}

TEST_CASE("kernel samples are zero outside the cutoff ball") {
  auto basis = build_kernel_basis(1, 1, 5);
  for (const KernelBasis& kb : basis)
    for (int iz = 0; iz < 5; ++iz)
      for (int iy = 0; iy < 5; ++iy)
        for (int ix = 0; ix < 5; ++ix) {
          double rad = std::sqrt(double((ix - 2) * (ix - 2) + (iy - 2) * (iy - 2) +
                                        (iz - 2) * (iz - 2)));
          if (rad <= 2.5) continue;
          for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b)
              CHECK(kb.samples[((static_cast<std::int64_t>(a) * 3 + b) * 5 + iz) * 25 + iy * 5 +
                               ix] == 0.0);
        }
}
