#pragma once

#include <array>
#include <vector>

#include "eqtrack/tensor.hpp"

namespace eqtrack {

inline constexpr int kMaxKernelOrder = 4;  // highest angular order used anywhere

// Orthonormal real spherical harmonics (unit-sphere L2 normalization),
// component order m = -l..+l: sine terms for m < 0, cosine for m > 0.
// Throws on zero-length direction; non-unit input is normalized.
std::vector<double> real_sph_harm(int l, const std::array<double, 3>& direction);

// Homogeneous polynomial form of the degree-l harmonics: coeff[m][k] is the
// coefficient of x^a y^b z^c (exponents in monomials[k]) in component m.
struct HarmonicPolynomials {
  int l = 0;
  std::vector<std::array<int, 3>> monomials;
  std::vector<std::vector<double>> coeff;  // [2l+1][monomials]
};
const HarmonicPolynomials& harmonic_polynomials(int l);

// Real-basis Clebsch-Gordan intertwiner coupling l_in x J -> l_out:
//   sum_{mi',n'} C[mo][mi'][n'] D_in[mi'][mi] D_J[n'][n] = sum_{mo'} D_out[mo][mo'] C[mo'][mi][n]
struct ClebschGordanBlock {
  int l_in = 0, l_out = 0, J = 0;
  Tensor coefficients;  // [2*l_out+1, 2*l_in+1, 2*J+1]
};
ClebschGordanBlock cg_real(int l_in, int l_out, int J);

// Gaussian radial shell centered at integer radius `shell`, sigma 0.6 voxels.
double radial_profile(int shell, double radius);

inline constexpr double kRadialSigma = 0.6;

// One sampled equivariant kernel basis element.
struct KernelBasis {
  int l_in = 0, l_out = 0, J = 0, shell = 0;
  Tensor samples;  // [2*l_out+1, 2*l_in+1, k, k, k], L2-normalized
};

// Samples kappa(v) = phi_shell(|v|) * sum_n Y_Jn(v/|v|) * CG[:,:,n] on the
// k^3 offset grid for every J allowed by the selection rule and every shell,
// zeroing samples outside the ball |v| <= floor(k/2) + 0.5 and dropping
// numerically null elements.
std::vector<KernelBasis> build_kernel_basis(int l_in, int l_out, int k);

}  // namespace eqtrack
