#pragma once

#include <memory>
#include <vector>

#include "eqtrack/tensor.hpp"

namespace eqtrack {

class Graph;

// Handle to a tape node.
struct Value {
  Graph* graph = nullptr;
  int id = -1;
  bool defined() const { return graph != nullptr; }
  const Tensor& val() const;
  const Tensor& grad() const;
};

// One tape entry. Subclass per operation; `backward` accumulates into the
// gradients of the node's inputs given `grad`.
class Node {
 public:
  virtual ~Node() = default;
  virtual void backward(Graph& g) = 0;

  Tensor val;
  Tensor grad;  // allocated on demand during the backward pass
  std::vector<int> in;
  bool needs_grad = false;
  bool grad_touched = false;
};

// Placement of one weighted basis element into an assembled kernel block.
// `basis` points at model-owned storage and must outlive the graph.
struct KernelPlacement {
  int weight_index;
  int out_channel0;  // first output channel of the block
  int in_channel0;   // first input channel of the block
  const Tensor* basis;  // [block_out, block_in, k, k, k]
};

// Reverse-mode tape over Tensor-valued operations. Nodes are appended in
// topological order; backward visits them exactly once in reverse order.
class Graph {
 public:
  Value constant(Tensor v);
  Value param(Tensor v);

  // elementwise with numpy-style broadcasting
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);
  Value div(Value a, Value b);
  Value scale(Value a, double c);
  Value add_const(Value a, double c);
  Value relu(Value a);
  Value sqrt(Value a);
  Value acos_clamped(Value a);  // input clamped to [-1+1e-7, 1-1e-7], both passes

  Value matmul(Value a, Value b);  // [m,k] x [k,n]
  Value transpose(Value a);        // 2-D
  Value reshape(Value a, std::vector<int> shape);
  Value reduce_sum(Value a);                              // all axes -> [1]
  Value reduce_sum_axes(Value a, std::vector<int> axes);  // drops the axes
  Value slice0(Value a, int begin, int end);              // axis-0 block view
  Value concat0(const std::vector<Value>& parts);
  Value vector_norm(Value a);  // sqrt(sum x^2) of all elements, guarded at 1e-12

  Value conv3d(Value input, Value kernel);

  struct Svd {
    Value u, s, v;  // [3,3], [3] descending, [3,3]
  };
  Svd svd3(Value m);

  // norm nonlinearity for one (2l+1)-component field: v *= relu(|v|+bias)/|v|
  Value norm_relu(Value field, Value bias);

  // kernel = sum_i weights[placement.weight_index] * placement.basis at block
  Value assemble_kernel(Value weights, std::vector<int> kernel_shape,
                        std::shared_ptr<const std::vector<KernelPlacement>> placements);

  // extension point for fused operations defined elsewhere
  Value add_node(std::unique_ptr<Node> n, std::vector<int> inputs);

  // Reverse sweep from a scalar loss. Resets all gradients first, so repeated
  // calls yield identical results.
  void backward(Value loss);

  Node& node(int id) { return *nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return *nodes_[static_cast<size_t>(id)]; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // count of backward passes through an SVD whose singular values coincided
  // within 1e-8 (gradient regularized, see svd3)
  int svd_degenerate_count() const { return svd_degenerate_; }
  void note_svd_degenerate() { ++svd_degenerate_; }

  Tensor& grad_buffer(int id);  // allocates zeros on first touch

 private:
  std::vector<std::unique_ptr<Node>> nodes_;
  int svd_degenerate_ = 0;
};

}  // namespace eqtrack
