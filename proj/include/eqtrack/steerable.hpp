#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "eqtrack/autodiff.hpp"
#include "eqtrack/geometry.hpp"
#include "eqtrack/harmonics.hpp"

namespace eqtrack {

// Channel structure of a field map: how many fields of each order it carries.
// Fields are laid out by ascending order, each occupying 2l+1 channels.
struct FieldType {
  std::map<int, int> multiplicities;

  int channels() const;
  std::vector<int> field_orders() const;   // order of each field, expanded
  std::vector<int> field_offsets() const;  // first channel of each field
  bool operator==(const FieldType&) const = default;

  static FieldType scalars(int n) { return FieldType{{{0, n}}}; }
};

enum class Nonlinearity { ScalarRelu, NormRelu, None };

struct LayerSpec {
  FieldType in_type, out_type;
  int kernel_width = 5;
  Nonlinearity nonlinearity = Nonlinearity::NormRelu;
};

struct ModelConfig {
  std::vector<LayerSpec> layers;
  int output_channels = 64;
  std::uint64_t seed = 0;

  void validate() const;

  // 5 layers of 5x5x5 kernels, hidden fields {l0:16, l1:16, l2:4}, 64 scalar
  // output channels
  static ModelConfig paper_default();
  // desk-scale variant, {l0:8, l1:8, l2:2} hidden, 32 outputs
  static ModelConfig small();
  // minimal config exercising all field orders, for gradient checks
  static ModelConfig tiny(int kernel_width = 3);
};

std::string nonlinearity_name(Nonlinearity n);
Nonlinearity nonlinearity_from_name(const std::string& s);

struct LayerParams {
  Tensor weights;  // [n_weights]
  Tensor biases;   // [n_biases] for norm nonlinearities; empty otherwise
};

struct ModelParams {
  std::vector<LayerParams> layers;
};

// The equivariant filter bank: steerable convolutions with field-appropriate
// nonlinearities, ending in K non-negative scalar channels.
class SteerableModel {
 public:
  explicit SteerableModel(ModelConfig config);

  void init_params(std::uint64_t seed);

  // Parameter nodes on a graph. Both volumes of a pair run through the same
  // nodes, so gradients of the shared weights accumulate in one place.
  struct ParamNodes {
    std::vector<Value> weights;  // per layer
    std::vector<Value> biases;   // per layer; undefined when the layer has none
  };
  ParamNodes make_param_nodes(Graph& g) const;

  struct ForwardResult {
    Value output;                      // [K, D, H, W], non-negative
    std::vector<Value> layer_outputs;  // post-nonlinearity, when requested
  };
  ForwardResult forward(Graph& g, Value image, const ParamNodes& params,
                        bool keep_layers = false) const;
  ForwardResult forward(Graph& g, Value image, bool keep_layers = false) const;

  const ModelConfig& config() const { return config_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  int num_weights(int layer) const;
  int num_biases(int layer) const;
  std::int64_t parameter_count() const;
  std::string basis_hash() const;

  void save_checkpoint(const std::string& path) const;
  static SteerableModel load_checkpoint(const std::string& path);

  // fault injection for the equivariance checker: perturbs one basis sample
  void corrupt_basis_for_test(double factor = 1.1);

 private:
  void build_plans();

  struct LayerPlan {
    std::vector<std::shared_ptr<Tensor>> basis_store;
    std::shared_ptr<std::vector<KernelPlacement>> placements;
    std::vector<int> kernel_shape;
    int n_weights = 0;
    std::vector<int> fan_in;          // per output field
    std::vector<int> bias_fields;     // out-field indices with l >= 1
  };

  ModelConfig config_;
  ModelParams params_;
  std::vector<LayerPlan> plans_;
};

// Apply a rotation to a multi-field channel map: exact voxel permutation for
// octahedral rotations, per-field Wigner mixing of components.
Tensor rotate_field_map_exact(const Tensor& chans, const FieldType& type,
                              const Eigen::Matrix3d& r);

// Trilinear spatial rotation about the grid center (for continuous rotations).
Tensor rotate_field_map_trilinear(const Tensor& chans, const FieldType& type,
                                  const Eigen::Matrix3d& r);

// integer-voxel shift with zero fill, components untouched
Tensor shift_field_map(const Tensor& chans, int sx, int sy, int sz);

}  // namespace eqtrack
