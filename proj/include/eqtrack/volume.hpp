#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "eqtrack/geometry.hpp"
#include "eqtrack/tensor.hpp"

namespace eqtrack {

// Scalar 3D image on a regular grid. Data is [D,H,W] with flat index
// (iz*H + iy)*W + ix; world(x,y,z) = voxel_size .* (ix,iy,iz) + origin.
struct Volume {
  Tensor data;  // [D,H,W]
  Eigen::Vector3d voxel_size_mm = Eigen::Vector3d::Ones();
  Eigen::Vector3d origin_mm = Eigen::Vector3d::Zero();

  Volume() = default;
  Volume(Tensor d, Eigen::Vector3d voxel_size, Eigen::Vector3d origin);

  int dz() const { return data.dim(0); }
  int dy() const { return data.dim(1); }
  int dx() const { return data.dim(2); }

  Eigen::Vector3d world(int ix, int iy, int iz) const {
    return origin_mm + voxel_size_mm.cwiseProduct(Eigen::Vector3d(ix, iy, iz));
  }
  Eigen::Vector3d world_center() const {
    return origin_mm +
           voxel_size_mm.cwiseProduct(Eigen::Vector3d(dx() - 1, dy() - 1, dz() - 1)) / 2.0;
  }
  double at(int ix, int iy, int iz) const {
    return data[(static_cast<std::int64_t>(iz) * dy() + iy) * dx() + ix];
  }
  double& at(int ix, int iy, int iz) {
    return data[(static_cast<std::int64_t>(iz) * dy() + iy) * dx() + ix];
  }
  // trilinear sample at fractional index coordinates, zero outside
  double sample_index(double fx, double fy, double fz) const;
  double sample_world(const Eigen::Vector3d& w) const;
};

struct Mask {
  Tensor data;  // [D,H,W] of {0,1}
  Eigen::Vector3d voxel_size_mm = Eigen::Vector3d::Ones();
  Eigen::Vector3d origin_mm = Eigen::Vector3d::Zero();
};

// JSON header + little-endian float32 payload in a sibling .raw file
void save_volume(const std::string& json_path, const Volume& v);
Volume load_volume(const std::string& json_path);
void save_mask(const std::string& json_path, const Mask& m);
Mask load_mask(const std::string& json_path);

// output voxel x takes the input sampled at T^-1(world(x)), trilinear
Volume warp_volume(const Volume& v, const RigidTransform& t);
Mask warp_mask(const Mask& m, const RigidTransform& t);  // trilinear + 0.5 threshold

enum class PhantomKind { Blobs, Ellipsoids };

// Random asymmetric test volume: 5-15 anisotropic Gaussian blobs or soft
// ellipsoids in a centered ball, redrawn until no octahedral rotation
// correlates above 0.99. Mask is the 5%-of-max support dilated by 4 voxels.
std::pair<Volume, Mask> make_phantom(std::uint64_t seed, int size,
                                     PhantomKind kind = PhantomKind::Blobs,
                                     double voxel_size_mm = 3.0);

// clamp to [p_low, p_high] percentiles and rescale to [0,1]
Volume percentile_normalize(const Volume& v, double low_pct = 1.0, double high_pct = 99.0);

double dice(const Mask& a, const Mask& b);

// rotation uniform in axis with angle uniform in [0, max], translation
// uniform in the centered cube; rotation is about the world origin
RigidTransform pose_sample(std::uint64_t seed, double max_angle_deg, double max_shift_mm);
RigidTransform pose_sample(Rng& rng, double max_angle_deg, double max_shift_mm);

// conjugate a pose so its rotation acts about the given center
RigidTransform about_center(const RigidTransform& t, const Eigen::Vector3d& center);

// normalized correlation of a volume with its 23 non-identity octahedral
// rotations (exact voxel permutations); returns the maximum
double max_octahedral_autocorrelation(const Volume& v);

// exact grid rotation (octahedral R only): permutes voxels about grid center
Volume rotate_grid_exact(const Volume& v, const Eigen::Matrix3d& r);

struct DatasetItem {
  std::string volume_a, mask_a, volume_b, mask_b;
  std::optional<std::string> transform;  // true pose, when known
};

struct Manifest {
  std::vector<DatasetItem> items;
  std::string base_dir;
};

void save_manifest(const std::string& path, const Manifest& m);
Manifest load_manifest(const std::string& path);

}  // namespace eqtrack
