#pragma once

#include "eqtrack/tensor.hpp"

namespace eqtrack {

// 3D cross-correlation with 'same' zero padding.
//   out[co][p] = sum_ci sum_{d in [-r,r]^3} kernel[co][ci][d+r] * in[ci][p+d]
// in: [Cin,D,H,W], kernel: [Cout,Cin,k,k,k] (k odd), out: [Cout,D,H,W].
// Per-voxel summation order is fixed (ci, dz, dy, dx ascending), so integer
// shifts of the input shift the output bit-exactly away from the boundary.
Tensor conv3d_forward(const Tensor& in, const Tensor& kernel);

// gradient w.r.t. input: cross-correlation of gout with the kernel flipped in
// all spatial axes and transposed in (co, ci)
Tensor conv3d_grad_input(const Tensor& gout, const Tensor& kernel, int cin);

// gradient w.r.t. kernel: gk[co][ci][d+r] = sum_p gout[co][p] * in[ci][p+d]
Tensor conv3d_grad_kernel(const Tensor& gout, const Tensor& in, int k);

}  // namespace eqtrack
