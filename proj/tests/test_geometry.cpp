#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "eqtrack/geometry.hpp"
#include "eqtrack/harmonics.hpp"

using namespace eqtrack;

TEST_CASE("compose identity and inverse") {
  Rng rng(1);
  RigidTransform t;
  t.rotation = random_rotation(rng);
  t.translation_mm = Eigen::Vector3d(4, -2, 7);
  RigidTransform id;
  RigidTransform c = compose(t, id);
  CHECK((c.rotation - t.rotation).norm() < 1e-15);
  CHECK((c.translation_mm - t.translation_mm).norm() < 1e-15);
  RigidTransform inv = compose(t, inverse(t));
  CHECK((inv.rotation - Eigen::Matrix3d::Identity()).norm() < 1e-9);
  CHECK(inv.translation_mm.norm() < 1e-9);
}

TEST_CASE("compose agrees with sequential application on random points") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    RigidTransform a, b;
    a.rotation = random_rotation(rng);
    b.rotation = random_rotation(rng);
    for (int i = 0; i < 3; ++i) {
      a.translation_mm(i) = rng.uniform(-10, 10);
      b.translation_mm(i) = rng.uniform(-10, 10);
    }
    Eigen::Vector3d x(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
    CHECK((compose(a, b).apply(x) - a.apply(b.apply(x))).norm() < 1e-10);
  }
}

TEST_CASE("random_rotation is orthogonal, deterministic, uniform in angle") {
  Eigen::Matrix3d r1 = random_rotation(123u);
  Eigen::Matrix3d r2 = random_rotation(123u);
  CHECK((r1 - r2).norm() == 0.0);  // fixed seed twice
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    Eigen::Matrix3d r = random_rotation(rng);
    CHECK((r.transpose() * r - Eigen::Matrix3d::Identity()).norm() < 1e-12);
    CHECK(r.determinant() == doctest::Approx(1.0).epsilon(1e-12));
  }
  // Monte-Carlo mean rotation angle of the uniform distribution on SO(3):
  // E[theta] = pi/2 + 2/pi = 126.476 deg
  Rng rng2(4);
  double sum = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i)
    sum += rotation_error_geodesic(random_rotation(rng2), Eigen::Matrix3d::Identity());
  double mean_deg = sum / n * 180.0 / M_PI;
  CHECK(mean_deg == doctest::Approx(126.476).epsilon(2.0 / 126.476));
}

TEST_CASE("geodesic rotation error") {
  Rng rng(5);
  Eigen::Matrix3d r = random_rotation(rng);
  CHECK(rotation_error_geodesic(r, r) == doctest::Approx(0.0).epsilon(1e-9));
  Eigen::Matrix3d rz90 = axis_angle(Eigen::Vector3d::UnitZ(), M_PI / 2);
  CHECK(rotation_error_geodesic(Eigen::Matrix3d::Identity(), rz90) ==
        doctest::Approx(M_PI / 2).epsilon(1e-12));
  // quaternion oracle
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::Matrix3d a = random_rotation(rng), b = random_rotation(rng);
    Eigen::Quaterniond q(Eigen::Matrix3d(a.transpose() * b));
    double angle = 2.0 * std::atan2(q.vec().norm(), std::fabs(q.w()));
    CHECK(rotation_error_geodesic(a, b) == doctest::Approx(angle).epsilon(1e-9));
  }
}

TEST_CASE("geodesic error is symmetric and bi-invariant") {
  Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    Eigen::Matrix3d a = random_rotation(rng), b = random_rotation(rng),
                    q = random_rotation(rng);
    double e = rotation_error_geodesic(a, b);
    CHECK(rotation_error_geodesic(b, a) == doctest::Approx(e).epsilon(1e-10));
    CHECK(rotation_error_geodesic(q * a, q * b) == doctest::Approx(e).epsilon(1e-9));
    CHECK(e >= 0.0);
    CHECK(e <= M_PI + 1e-12);
  }
}

TEST_CASE("euler extraction round-trips and MAE examples") {
  CHECK(euler_mae_deg(Eigen::Matrix3d::Identity(), Eigen::Matrix3d::Identity()) == 0.0);
  Eigen::Matrix3d rz10 = axis_angle(Eigen::Vector3d::UnitZ(), 10.0 * M_PI / 180.0);
  CHECK(euler_mae_deg(rz10, Eigen::Matrix3d::Identity()) ==
        doctest::Approx(10.0 / 3.0).epsilon(1e-9));
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::Matrix3d r = random_rotation(rng);
    auto [yaw, pitch, roll] = euler_zyx_deg(r);
    Eigen::Matrix3d back = euler_zyx_to_matrix_deg(yaw, pitch, roll);
    CHECK((back - r).norm() < 1e-9);
  }
}

TEST_CASE("euler gimbal lock warning") {
  Eigen::Matrix3d r = axis_angle(Eigen::Vector3d::UnitY(), M_PI / 2);
  bool warn = false;
  euler_zyx_deg(r, &warn);
  CHECK(warn);
  warn = true;
  euler_zyx_deg(Eigen::Matrix3d::Identity(), &warn);
  CHECK(!warn);
}

TEST_CASE("wigner_d_real identity and l=1 contract") {
  Rng rng(8);
  for (int l = 0; l <= 4; ++l) {
    Eigen::MatrixXd d = wigner_d_real(l, Eigen::Matrix3d::Identity());
    CHECK((d - Eigen::MatrixXd::Identity(2 * l + 1, 2 * l + 1)).norm() < 1e-10);
  }
  // l=1 equals the rotation conjugated into (y,z,x) ordering
  Eigen::Matrix3d p = Eigen::Matrix3d::Zero();
  p(0, 1) = 1;
  p(1, 2) = 1;
  p(2, 0) = 1;
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::Matrix3d r = random_rotation(rng);
    CHECK((wigner_d_real(1, r) - p * r * p.transpose()).norm() < 1e-10);
  }
}

TEST_CASE("wigner_d_real rejects non-rotations") {
  Eigen::Matrix3d m = 2.0 * Eigen::Matrix3d::Identity();
  CHECK_THROWS_AS(wigner_d_real(2, m), Error);
  Eigen::Matrix3d refl = Eigen::Matrix3d::Identity();
  refl(2, 2) = -1.0;
  CHECK_THROWS_AS(wigner_d_real(2, refl), Error);
}

TEST_CASE("wigner_d_real homomorphism and orthogonality, 100 pairs") {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    Eigen::Matrix3d r1 = random_rotation(rng), r2 = random_rotation(rng);
    for (int l = 1; l <= 4; ++l) {
      Eigen::MatrixXd d1 = wigner_d_real(l, r1);
      if (trial < 20) {
        Eigen::MatrixXd d12 = wigner_d_real(l, r1 * r2);
        CHECK((d12 - d1 * wigner_d_real(l, r2)).norm() < 1e-10);
      }
      CHECK((d1 * d1.transpose() - Eigen::MatrixXd::Identity(2 * l + 1, 2 * l + 1)).norm() <
            1e-10);
    }
  }
}

TEST_CASE("harmonic intertwining: Y_l(Ru) = D_l(R) Y_l(u)") {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::Matrix3d r = random_rotation(rng);
    auto u = rng.unit_vector();
    Eigen::Vector3d ru = r * Eigen::Vector3d(u[0], u[1], u[2]);
    for (int l = 0; l <= 4; ++l) {
      auto yu = real_sph_harm(l, u);
      auto yru = real_sph_harm(l, {ru(0), ru(1), ru(2)});
      Eigen::MatrixXd d = wigner_d_real(l, r);
      for (int m = 0; m < 2 * l + 1; ++m) {
        double acc = 0.0;
        for (int mp = 0; mp < 2 * l + 1; ++mp) acc += d(m, mp) * yu[static_cast<size_t>(mp)];
        CHECK(std::fabs(acc - yru[static_cast<size_t>(m)]) < 1e-9);
      }
    }
  }
}

TEST_CASE("octahedral rotations: 24 proper integer rotations forming a group") {
  const auto& rots = octahedral_rotations();
  CHECK(rots.size() == 24);
  for (const auto& r : rots) {
    CHECK(r.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        CHECK(std::fabs(r(i, j) - std::round(r(i, j))) < 1e-12);
  }
  // closure
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto& a = rots[static_cast<size_t>(rng.uniform_int(24))];
    const auto& b = rots[static_cast<size_t>(rng.uniform_int(24))];
    Eigen::Matrix3d ab = a * b;
    bool found = false;
    for (const auto& c : rots)
      if ((ab - c).norm() < 1e-12) found = true;
    CHECK(found);
  }
}

TEST_CASE("transform JSON round-trip") {
  Rng rng(12);
  RigidTransform t;
  t.rotation = random_rotation(rng);
  t.translation_mm = Eigen::Vector3d(1.25, -3.5, 0.125);
  std::string path = "/tmp/eqtrack_test_transform.json";
  save_transform_json(path, t);
  RigidTransform u = load_transform_json(path);
  CHECK((u.rotation - t.rotation).norm() < 1e-15);
  CHECK((u.translation_mm - t.translation_mm).norm() < 1e-15);
}

TEST_CASE("RigidTransform validation rejects non-rotations") {
  RigidTransform t;
  t.rotation(0, 0) = 2.0;
  CHECK_THROWS_AS(t.validate(), Error);
  RigidTransform refl;
  refl.rotation(2, 2) = -1.0;
  CHECK_THROWS_AS(refl.validate(), Error);
}
