#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "eqtrack/volume.hpp"

using namespace eqtrack;

namespace {

double rel_l2(const Tensor& a, const Tensor& b) {
  double num = 0, den = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / std::max(den, 1e-30));
}

std::vector<char> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::vector<char>(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("volume invariants") {
  CHECK_THROWS_AS(Volume(Tensor({4, 8, 8}), Eigen::Vector3d::Ones(), Eigen::Vector3d::Zero()),
                  Error);
  CHECK_THROWS_AS(Volume(Tensor({8, 8, 8}), Eigen::Vector3d(1, 0, 1), Eigen::Vector3d::Zero()),
                  Error);
}

TEST_CASE("warp by identity is bit-identical") {
  auto [v, mask] = make_phantom(1, 16);
  Volume w = warp_volume(v, RigidTransform{});
  for (std::int64_t i = 0; i < v.data.numel(); ++i) CHECK(w.data[i] == v.data[i]);
}

TEST_CASE("warp by an integer-voxel translation shifts exactly on the interior") {
  auto [v, mask] = make_phantom(2, 16);
  RigidTransform t;
  t.translation_mm = v.voxel_size_mm.cwiseProduct(Eigen::Vector3d(1, 2, -1));
  Volume w = warp_volume(v, t);
  for (int z = 2; z < 14; ++z)
    for (int y = 2; y < 13; ++y)
      for (int x = 2; x < 14; ++x)
        CHECK(w.at(x, y, z) == doctest::Approx(v.at(x - 1, y - 2, z + 1)).epsilon(1e-12));
}

TEST_CASE("warp round-trip error stays below 2 percent") {
  auto [v, mask] = make_phantom(3, 24);
  RigidTransform pose = pose_sample(17, 25.0, 4.0);
  RigidTransform t = about_center(pose, v.world_center());
  Volume there = warp_volume(v, t);
  Volume back = warp_volume(there, inverse(t));
  CHECK(rel_l2(back.data, v.data) < 0.02);
}

TEST_CASE("warp composes within double interpolation blur") {
  auto [v, mask] = make_phantom(4, 24);
  RigidTransform t1 = about_center(pose_sample(31, 15.0, 3.0), v.world_center());
  RigidTransform t2 = about_center(pose_sample(32, 15.0, 3.0), v.world_center());
  Volume two_step = warp_volume(warp_volume(v, t1), t2);
  Volume one_step = warp_volume(v, compose(t2, t1));
  CHECK(rel_l2(two_step.data, one_step.data) < 0.03);
}

TEST_CASE("phantom determinism, range, asymmetry") {
  auto [v1, m1] = make_phantom(42, 20);
  auto [v2, m2] = make_phantom(42, 20);
  for (std::int64_t i = 0; i < v1.data.numel(); ++i) {
    CHECK(v1.data[i] == v2.data[i]);
    CHECK(m1.data[i] == m2.data[i]);
  }
  double lo = 1e30, hi = -1e30;
  for (std::int64_t i = 0; i < v1.data.numel(); ++i) {
    lo = std::min(lo, v1.data[i]);
    hi = std::max(hi, v1.data[i]);
  }
  CHECK(lo >= 0.0);
  CHECK(hi <= 1.0);
  CHECK(max_octahedral_autocorrelation(v1) < 0.99);
  // masks are binary and non-trivial
  double msum = m1.data.sum();
  CHECK(msum > 0);
  CHECK(msum < m1.data.numel());
}

TEST_CASE("phantom ellipsoid kind works and differs from blobs") {
  auto [vb, mb] = make_phantom(5, 20, PhantomKind::Blobs);
  auto [ve, me] = make_phantom(5, 20, PhantomKind::Ellipsoids);
  CHECK(rel_l2(vb.data, ve.data) > 0.01);
  CHECK(max_octahedral_autocorrelation(ve) < 0.99);
  CHECK_THROWS_AS(make_phantom(1, 8), Error);  // size < 16
}

TEST_CASE("percentile_normalize clamps, rescales, and is idempotent") {
  Tensor ramp({8, 8, 8});
  for (std::int64_t i = 0; i < ramp.numel(); ++i) ramp[i] = static_cast<double>(i);
  Volume v(std::move(ramp), Eigen::Vector3d::Ones(), Eigen::Vector3d::Zero());
  Volume n1 = percentile_normalize(v);
  double lo = 1e30, hi = -1e30;
  for (std::int64_t i = 0; i < n1.data.numel(); ++i) {
    lo = std::min(lo, n1.data[i]);
    hi = std::max(hi, n1.data[i]);
  }
  CHECK(lo == 0.0);
  CHECK(hi == 1.0);
  // clipped at the percentiles: the lowest 1% map to exactly 0
  std::int64_t zeros = 0;
  for (std::int64_t i = 0; i < n1.data.numel(); ++i) zeros += n1.data[i] == 0.0;
  CHECK(zeros >= ramp.numel() / 100);
  Volume n2 = percentile_normalize(n1);
  for (std::int64_t i = 0; i < n1.data.numel(); ++i)
    CHECK(n2.data[i] == doctest::Approx(n1.data[i]).epsilon(1e-12));
}

TEST_CASE("percentile_normalize of a constant volume warns and zeroes") {
  Volume v(Tensor::full({8, 8, 8}, 3.7), Eigen::Vector3d::Ones(), Eigen::Vector3d::Zero());
  Volume n = percentile_normalize(v);
  CHECK(n.data.max_abs() == 0.0);
}

TEST_CASE("dice examples and properties") {
  Mask a, b;
  a.data = Tensor({8, 8, 8});
  b.data = Tensor({8, 8, 8});
  CHECK(dice(a, b) == 1.0);  // empty vs empty
  for (int i = 0; i < 64; ++i) a.data[i] = 1.0;
  CHECK(dice(a, a) == 1.0);
  for (int i = 64; i < 128; ++i) b.data[i] = 1.0;
  CHECK(dice(a, b) == 0.0);  // disjoint
  Mask c;
  c.data = Tensor({8, 8, 8});
  for (int i = 32; i < 96; ++i) c.data[i] = 1.0;  // half-overlapping, equal size
  CHECK(dice(a, c) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(dice(c, a) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("pose_sample bounds, determinism, zero case") {
  RigidTransform t0 = pose_sample(9, 0.0, 0.0);
  CHECK((t0.rotation - Eigen::Matrix3d::Identity()).norm() == 0.0);
  CHECK(t0.translation_mm.norm() == 0.0);
  RigidTransform a = pose_sample(11, 30, 6), b = pose_sample(11, 30, 6);
  CHECK((a.rotation - b.rotation).norm() == 0.0);
  Rng rng(13);
  for (int i = 0; i < 10000; ++i) {
    RigidTransform t = pose_sample(rng, 30.0, 6.0);
    CHECK(rotation_error_geodesic(t.rotation, Eigen::Matrix3d::Identity()) <=
          30.0 * M_PI / 180.0 + 1e-9);
    for (int k = 0; k < 3; ++k) CHECK(std::fabs(t.translation_mm(k)) <= 6.0);
  }
}

TEST_CASE("volume file round-trip is bit-exact") {
  auto [v, mask] = make_phantom(6, 16);
  std::filesystem::create_directories("/tmp/eqtrack_test_io");
  save_volume("/tmp/eqtrack_test_io/v.json", v);
  Volume u = load_volume("/tmp/eqtrack_test_io/v.json");
  CHECK((u.voxel_size_mm - v.voxel_size_mm).norm() == 0.0);
  CHECK((u.origin_mm - v.origin_mm).norm() == 0.0);
  // payload is f32; a second save must reproduce the files byte-for-byte
  save_volume("/tmp/eqtrack_test_io/v2.json", u);
  CHECK(read_bytes("/tmp/eqtrack_test_io/v.raw") == read_bytes("/tmp/eqtrack_test_io/v2.raw"));
  CHECK(read_bytes("/tmp/eqtrack_test_io/v.json") ==
        read_bytes("/tmp/eqtrack_test_io/v2.json"));
  Volume u2 = load_volume("/tmp/eqtrack_test_io/v2.json");
  for (std::int64_t i = 0; i < u.data.numel(); ++i) CHECK(u.data[i] == u2.data[i]);

  save_mask("/tmp/eqtrack_test_io/m.json", mask);
  Mask mm = load_mask("/tmp/eqtrack_test_io/m.json");
  for (std::int64_t i = 0; i < mask.data.numel(); ++i) CHECK(mm.data[i] == mask.data[i]);
}

TEST_CASE("manifest round-trip") {
  Manifest m;
  DatasetItem it;
  it.volume_a = "a.json";
  it.mask_a = "am.json";
  it.volume_b = "b.json";
  it.mask_b = "bm.json";
  it.transform = "t.json";
  m.items.push_back(it);
  it.transform.reset();
  m.items.push_back(it);
  save_manifest("/tmp/eqtrack_test_io/manifest.json", m);
  Manifest l = load_manifest("/tmp/eqtrack_test_io/manifest.json");
  REQUIRE(l.items.size() == 2);
  CHECK(l.items[0].transform.has_value());
  CHECK(!l.items[1].transform.has_value());
  CHECK(l.items[0].volume_a == "a.json");
  CHECK(l.base_dir == "/tmp/eqtrack_test_io");
}

TEST_CASE("grid rotation is an exact permutation") {
  auto [v, mask] = make_phantom(7, 16);
  for (const Eigen::Matrix3d& r : octahedral_rotations()) {
    Volume rot = rotate_grid_exact(v, r);
    CHECK(rot.data.sum() == doctest::Approx(v.data.sum()).epsilon(1e-12));
    Volume back = rotate_grid_exact(rot, r.transpose());
    for (std::int64_t i = 0; i < v.data.numel(); ++i) CHECK(back.data[i] == v.data[i]);
  }
}
