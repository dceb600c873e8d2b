#pragma once

#include <Eigen/Dense>
#include <vector>

#include "eqtrack/autodiff.hpp"
#include "eqtrack/geometry.hpp"
#include "eqtrack/steerable.hpp"
#include "eqtrack/volume.hpp"

namespace eqtrack {

struct DegenerateConfiguration : Error {
  using Error::Error;
};

// K spatial means with per-channel importance weights.
struct WeightedPointSet {
  std::vector<Eigen::Vector3d> points;  // mm
  std::vector<double> weights;          // >= 0; normalized when combined
};

struct SpatialMean {
  Eigen::Vector3d point_mm = Eigen::Vector3d::Zero();
  double mass = 0.0;
  bool empty = false;  // mass below 1e-12; weight 0 downstream
};

// mass-normalized centroid of a non-negative channel
SpatialMean spatial_mean(const Tensor& channel, const Eigen::Vector3d& voxel_size_mm,
                         const Eigen::Vector3d& origin_mm);

// normalize each side to sum 1, multiply, renormalize; all-empty -> uniform
std::vector<double> channel_weights(const std::vector<double>& masses_a,
                                    const std::vector<double>& masses_b);

struct SolveResult {
  RigidTransform transform;               // T(x) = R x + t
  double residual = 0.0;                  // weighted objective at the solution
  Eigen::Vector3d singular_values = Eigen::Vector3d::Zero();
  Eigen::Vector3d translation_centroidal = Eigen::Vector3d::Zero();  // c_B - c_A
};

// weighted Kabsch: minimizes sum_k w_k |b_k - (R a_k + t)|^2 in closed form;
// throws DegenerateConfiguration when the rotation is unidentifiable
SolveResult solve_rigid_weighted(const WeightedPointSet& a, const WeightedPointSet& b);

// ------------------------------------------------------------- taped pieces

struct TapedMeans {
  Value points;  // [K,3] mm
  Value masses;  // [K,1]
};
// spatial means of every channel of a field map [K,D,H,W]
TapedMeans spatial_means_taped(Graph& g, Value fmap, const Eigen::Vector3d& voxel_size_mm,
                               const Eigen::Vector3d& origin_mm);

// combined normalized channel weights from the two mass columns [K,1]
Value channel_weights_taped(Graph& g, Value masses_a, Value masses_b);

struct TapedSolve {
  Value rotation;     // [3,3]
  Value translation;  // [1,3]
  Eigen::Vector3d singular_values = Eigen::Vector3d::Zero();
};
TapedSolve solve_rigid_weighted_taped(Graph& g, Value points_a, Value points_b,
                                      Value weights_k1);

struct TrackDiagnostics {
  std::vector<double> masses_a, masses_b, weights;
  double residual = 0.0;
  Eigen::Vector3d singular_values = Eigen::Vector3d::Zero();
  Eigen::Vector3d translation_centroidal = Eigen::Vector3d::Zero();
  int empty_channels = 0;
  double condition = 0.0;  // s1 / max(s3, eps)
};

struct TrackResult {
  RigidTransform transform;
  TrackDiagnostics diagnostics;
};

// full pipeline: shared-weight forward of both volumes, spatial means,
// channel weights, closed-form solve
TrackResult track(const SteerableModel& model, const Volume& image_a, const Volume& image_b);

struct TrackGraph {
  Value rotation;     // [3,3]
  Value translation;  // [1,3]
  SteerableModel::ParamNodes params;
  TrackDiagnostics diagnostics;
};
TrackGraph track_taped(Graph& g, const SteerableModel& model, const Volume& image_a,
                       const Volume& image_b);

std::string diagnostics_json(const TrackDiagnostics& d);

// --------------------------------------------------------------- losses

// |t_est - t_true|_2 + |R_est - R_true|_F
double loss_l2(const RigidTransform& est, const RigidTransform& truth);
Value loss_l2_taped(Graph& g, Value rotation, Value translation, const RigidTransform& truth);

// arccos((tr(R_est^T R_true) - 1)/2), clamped for differentiability
double loss_geodesic(const Eigen::Matrix3d& r_est, const Eigen::Matrix3d& r_true);
Value loss_geodesic_taped(Graph& g, Value rotation, const Eigen::Matrix3d& r_true);

// first two columns, each normalized, stacked difference norm
double loss_6d(const Eigen::Matrix3d& r_est, const Eigen::Matrix3d& r_true);
Value loss_6d_taped(Graph& g, Value rotation, const Eigen::Matrix3d& r_true);

// mean squared intensity difference after warping image_a by the estimate
double loss_image(const RigidTransform& est, const Volume& image_a, const Volume& image_b);
Value loss_image_taped(Graph& g, Value rotation, Value translation, const Volume& image_a,
                       const Volume& image_b);

}  // namespace eqtrack
