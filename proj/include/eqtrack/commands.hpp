#pragma once

#include <cstdint>
#include <string>

#include "eqtrack/registration.hpp"
#include "eqtrack/steerable.hpp"
#include "eqtrack/volume.hpp"

namespace eqtrack {

// exit codes shared by all commands
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidationFailure = 1;
inline constexpr int kExitRuntimeError = 2;

struct GenDataOptions {
  std::uint64_t seed = 1;
  int count = 10;
  int size = 32;
  std::string out_dir;
  std::string kind = "blobs";  // blobs | ellipsoids
  double max_angle_deg = 30.0;
  double max_shift_mm = 6.0;
  double voxel_size_mm = 3.0;
};
int cmd_gen_data(const GenDataOptions& opt);

struct TrainOptions {
  std::string manifest;
  std::string val_manifest;  // optional; training loss doubles as validation otherwise
  std::string out_dir = ".";
  std::string model = "default";  // default | small | tiny
  std::string init_checkpoint;    // optional warm start
  std::string loss = "geo";       // l2 | geo | 6d | image
  int epochs = 300;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
};
int cmd_train(const TrainOptions& opt);

struct TrackOptions {
  std::string checkpoint;
  std::string moving;     // image A
  std::string reference;  // image B; the estimate maps A onto B
  std::string out;        // transform JSON
  std::string diagnostics;  // optional diagnostics JSON
};
int cmd_track(const TrackOptions& opt);

struct EvalOptions {
  std::string checkpoint;
  std::string manifest;
  std::string out;  // report JSON
};
int cmd_eval(const EvalOptions& opt);

struct CheckEquivarianceOptions {
  std::string checkpoint;  // empty -> random weights
  std::string model = "default";
  bool random_weights = false;
  std::uint64_t seed = 7;
  int size = 32;
  int random_rotations = 4;
  bool inject_basis_fault = false;  // self-test: must make the suite fail
  std::string report;               // optional report JSON path
};
int cmd_check_equivariance(const CheckEquivarianceOptions& opt);

// ------------------------------------------------------------ shared pieces

ModelConfig named_model_config(const std::string& name);

struct EquivSuiteResult {
  double octahedral_max_rel = 0.0;  // worst over 24 rotations, all layers
  double shift_max_rel = 0.0;       // worst over the integer-shift probes
  double continuous_max_rel = 0.0;  // worst over random trilinear rotations
  double octahedral_tol = 1e-5;
  double continuous_tol = 0.05;
  bool octahedral_pass() const {
    return octahedral_max_rel < octahedral_tol && shift_max_rel < octahedral_tol;
  }
  bool continuous_pass() const { return continuous_max_rel < continuous_tol; }
  bool pass() const { return octahedral_pass() && continuous_pass(); }
};

EquivSuiteResult equivariance_suite(const SteerableModel& model, int size, std::uint64_t seed,
                                    int random_rotations);

struct EvalMetrics {
  double euler_mae_deg = 0.0;
  double rotation_frobenius = 0.0;  // |I - R Rhat^T|_F
  double translation_mm = 0.0;
  double translation_voxels = 0.0;
  double dice_index = 0.0;
  bool has_truth = false;
};

EvalMetrics evaluate_pair(const SteerableModel& model, const Volume& a, const Mask& ma,
                          const Volume& b, const Mask& mb, const RigidTransform* truth);

struct TrainRun {
  std::vector<double> train_losses;
  std::vector<double> val_losses;
  int best_epoch = -1;
};

// library-level training entry used by cmd_train and the acceptance suite;
// fills `model` with the best-validation parameters
TrainRun train_model(SteerableModel& model, const TrainOptions& opt);

}  // namespace eqtrack
