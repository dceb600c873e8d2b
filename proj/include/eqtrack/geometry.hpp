#pragma once

#include <Eigen/Dense>
#include <array>
#include <string>
#include <vector>

#include "eqtrack/rng.hpp"
#include "eqtrack/tensor.hpp"

namespace eqtrack {

// Rigid world-coordinate transform T(x) = R x + t, translation in millimeters.
struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation_mm = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& x) const { return rotation * x + translation_mm; }
  void validate(double tol = 1e-9) const;  // R^T R = I and det R = +1 within tol
};

RigidTransform compose(const RigidTransform& a, const RigidTransform& b);  // a after b
RigidTransform inverse(const RigidTransform& t);

// uniform rotation via unit-quaternion sampling
Eigen::Matrix3d random_rotation(Rng& rng);
Eigen::Matrix3d random_rotation(std::uint64_t seed);

Eigen::Matrix3d axis_angle(const Eigen::Vector3d& axis, double angle_rad);

// arccos((tr(Rest^T Rtrue) - 1)/2), in [0, pi]
double rotation_error_geodesic(const Eigen::Matrix3d& r_est, const Eigen::Matrix3d& r_true);

// intrinsic Z-Y-X Euler angles (yaw, pitch, roll) in degrees
std::array<double, 3> euler_zyx_deg(const Eigen::Matrix3d& r, bool* gimbal_warning = nullptr);
Eigen::Matrix3d euler_zyx_to_matrix_deg(double yaw, double pitch, double roll);

// mean absolute per-axis Euler difference in degrees, wrapped to [-180, 180]
double euler_mae_deg(const Eigen::Matrix3d& r_est, const Eigen::Matrix3d& r_true);

// Real-basis irreducible representation of a rotation for field order l <= 4,
// built by projecting the l-fold tensor-product representation onto the
// harmonic (symmetric traceless) subspace. Component order m = -l..+l; for
// l = 1 this equals r conjugated into the (y, z, x) component ordering.
Eigen::MatrixXd wigner_d_real(int l, const Eigen::Matrix3d& r);

// the 24 rotations mapping a cubic grid onto itself, det +1, entries in {0,+-1}
const std::vector<Eigen::Matrix3d>& octahedral_rotations();

void save_transform_json(const std::string& path, const RigidTransform& t);
RigidTransform load_transform_json(const std::string& path);

}  // namespace eqtrack
