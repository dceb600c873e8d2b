#include "eqtrack/harmonics.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <mutex>

namespace eqtrack {

namespace {

// associated Legendre P_l^m(x) without the Condon-Shortley phase
double assoc_legendre(int l, int m, double x) {
  double somx2 = std::sqrt(std::max(0.0, 1.0 - x * x));
  double pmm = 1.0;
  for (int i = 1; i <= m; ++i) pmm *= (2.0 * i - 1.0) * somx2;
  if (l == m) return pmm;
  double pmmp1 = x * (2.0 * m + 1.0) * pmm;
  if (l == m + 1) return pmmp1;
  double pll = 0.0;
  for (int ll = m + 2; ll <= l; ++ll) {
    pll = (x * (2.0 * ll - 1.0) * pmmp1 - (ll + m - 1.0) * pmm) / (ll - m);
    pmm = pmmp1;
    pmmp1 = pll;
  }
  return pll;
}

double factorial(int n) {
  double f = 1.0;
  for (int i = 2; i <= n; ++i) f *= i;
  return f;
}

}  // namespace

std::vector<double> real_sph_harm(int l, const std::array<double, 3>& direction) {
  if (l < 0 || l > kMaxKernelOrder)
    throw Error("real_sph_harm: order " + std::to_string(l) + " out of range");
  double x = direction[0], y = direction[1], z = direction[2];
  double n = std::sqrt(x * x + y * y + z * z);
  if (n < 1e-12) throw Error("real_sph_harm: zero-length direction");
  x /= n;
  y /= n;
  z /= n;
  double phi = std::atan2(y, x);
  std::vector<double> out(static_cast<size_t>(2 * l + 1), 0.0);
  for (int m = 0; m <= l; ++m) {
    double norm = std::sqrt((2.0 * l + 1.0) / (4.0 * M_PI) * factorial(l - m) / factorial(l + m));
    double p = assoc_legendre(l, m, z);
    if (m == 0) {
      out[static_cast<size_t>(l)] = norm * p;
    } else {
      out[static_cast<size_t>(l + m)] = std::sqrt(2.0) * norm * p * std::cos(m * phi);
      out[static_cast<size_t>(l - m)] = std::sqrt(2.0) * norm * p * std::sin(m * phi);
    }
  }
  return out;
}

const HarmonicPolynomials& harmonic_polynomials(int l) {
  static std::mutex mu;
  static std::vector<HarmonicPolynomials> cache(kMaxKernelOrder + 1);
  static std::array<bool, kMaxKernelOrder + 1> built = {};
  if (l < 0 || l > kMaxKernelOrder) throw Error("harmonic_polynomials: order out of range");
  std::lock_guard<std::mutex> lock(mu);
  if (built[static_cast<size_t>(l)]) return cache[static_cast<size_t>(l)];

  HarmonicPolynomials hp;
  hp.l = l;
  for (int a = l; a >= 0; --a)
    for (int b = l - a; b >= 0; --b) hp.monomials.push_back({a, b, l - a - b});
  int nm = static_cast<int>(hp.monomials.size());

  // fit homogeneous degree-l coefficients against evaluations on a
  // deterministic spherical Fibonacci point set
  int np = std::max(4 * nm, 48);
  Eigen::MatrixXd A(np, nm);
  Eigen::MatrixXd B(np, 2 * l + 1);
  const double golden = M_PI * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < np; ++i) {
    double z = 1.0 - 2.0 * (i + 0.5) / np;
    double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    double phi = golden * i;
    std::array<double, 3> u = {r * std::cos(phi), r * std::sin(phi), z};
    for (int k = 0; k < nm; ++k) {
      auto [a, b, c] = hp.monomials[static_cast<size_t>(k)];
      A(i, k) = std::pow(u[0], a) * std::pow(u[1], b) * std::pow(u[2], c);
    }
    std::vector<double> yv = real_sph_harm(l, u);
    for (int m = 0; m < 2 * l + 1; ++m) B(i, m) = yv[static_cast<size_t>(m)];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  Eigen::MatrixXd X = qr.solve(B);
  double residual = (A * X - B).norm();
  if (residual > 1e-9)
    throw Error("harmonic_polynomials: fit residual " + std::to_string(residual));
  hp.coeff.assign(static_cast<size_t>(2 * l + 1), std::vector<double>(static_cast<size_t>(nm)));
  for (int m = 0; m < 2 * l + 1; ++m)
    for (int k = 0; k < nm; ++k) hp.coeff[static_cast<size_t>(m)][static_cast<size_t>(k)] = X(k, m);

  cache[static_cast<size_t>(l)] = std::move(hp);
  built[static_cast<size_t>(l)] = true;
  return cache[static_cast<size_t>(l)];
}

namespace {

// <l1 m1 l2 m2 | L M> by ladder recursion from the stretched state
// table indexed [M+L][m1+l1][m2+l2]
std::vector<double> complex_cg_table(int l1, int l2, int L) {
  auto aplus = [](int j, int m) { return std::sqrt(j * (j + 1.0) - m * (m + 1.0)); };
  auto aminus = [](int j, int m) { return std::sqrt(j * (j + 1.0) - m * (m - 1.0)); };
  const int d1 = 2 * l1 + 1, d2 = 2 * l2 + 1, dL = 2 * L + 1;
  std::vector<double> cg(static_cast<size_t>(dL) * d1 * d2, 0.0);
  auto at = [&](int M, int m1, int m2) -> double& {
    return cg[(static_cast<size_t>(M + L) * d1 + (m1 + l1)) * d2 + (m2 + l2)];
  };

  // top state |L,L>: J+ annihilation fixes the ratios
  int lo = std::max(-l1, L - l2), hi = std::min(l1, L + l2);
  std::vector<double> c(static_cast<size_t>(hi - lo + 1), 0.0);
  c[0] = 1.0;
  for (int m1 = lo + 1; m1 <= hi; ++m1)
    c[static_cast<size_t>(m1 - lo)] =
        -c[static_cast<size_t>(m1 - 1 - lo)] * aplus(l1, m1 - 1) / aplus(l2, L - m1);
  double norm = 0.0;
  for (double v : c) norm += v * v;
  norm = std::sqrt(norm);
  double sign = c[static_cast<size_t>(hi - lo)] >= 0 ? 1.0 : -1.0;  // <l1 l1 ...|LL> > 0
  for (int m1 = lo; m1 <= hi; ++m1) at(L, m1, L - m1) = sign * c[static_cast<size_t>(m1 - lo)] / norm;

  // lower M one step at a time
  for (int M = L - 1; M >= -L; --M) {
    double bl = aminus(L, M + 1);
    for (int m1 = -l1; m1 <= l1; ++m1) {
      int m2 = M - m1;
      if (m2 < -l2 || m2 > l2) continue;
      double v = 0.0;
      if (m1 + 1 <= l1) v += aminus(l1, m1 + 1) * at(M + 1, m1 + 1, m2);
      if (m2 + 1 <= l2) v += aminus(l2, m2 + 1) * at(M + 1, m1, m2 + 1);
      at(M, m1, m2) = v / bl;
    }
  }
  return cg;
}

// complex-to-real change of basis, rows are real components m=-l..l
Eigen::MatrixXcd real_basis_matrix(int l) {
  using namespace std::complex_literals;
  const int d = 2 * l + 1;
  Eigen::MatrixXcd T = Eigen::MatrixXcd::Zero(d, d);
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  T(l, l) = 1.0;
  for (int m = 1; m <= l; ++m) {
    double cs = (m % 2 == 0) ? 1.0 : -1.0;  // (-1)^m
    T(l + m, l + m) = cs * inv_sqrt2;
    T(l + m, l - m) = inv_sqrt2;
    T(l - m, l + m) = -1i * cs * inv_sqrt2;
    T(l - m, l - m) = 1i * inv_sqrt2;
  }
  return T;
}

}  // namespace

ClebschGordanBlock cg_real(int l_in, int l_out, int J) {
  if (J < std::abs(l_in - l_out) || J > l_in + l_out)
    throw Error("cg_real: selection rule violated for (l_in=" + std::to_string(l_in) +
                ", l_out=" + std::to_string(l_out) + ", J=" + std::to_string(J) + ")");
  const int d1 = 2 * l_in + 1, d2 = 2 * J + 1, dL = 2 * l_out + 1;
  std::vector<double> cg = complex_cg_table(l_in, J, l_out);
  Eigen::MatrixXcd T1 = real_basis_matrix(l_in);
  Eigen::MatrixXcd T2 = real_basis_matrix(J);
  Eigen::MatrixXcd TL = real_basis_matrix(l_out);

  std::vector<std::complex<double>> block(static_cast<size_t>(dL) * d1 * d2, 0.0);
  for (int Mr = 0; Mr < dL; ++Mr)
    for (int m1r = 0; m1r < d1; ++m1r)
      for (int m2r = 0; m2r < d2; ++m2r) {
        std::complex<double> s = 0.0;
        for (int M = 0; M < dL; ++M) {
          if (TL(Mr, M) == 0.0) continue;
          for (int m1 = 0; m1 < d1; ++m1) {
            if (T1(m1r, m1) == 0.0) continue;
            for (int m2 = 0; m2 < d2; ++m2) {
              double c = cg[(static_cast<size_t>(M) * d1 + m1) * d2 + m2];
              if (c == 0.0) continue;
              s += std::conj(TL(Mr, M)) * T1(m1r, m1) * T2(m2r, m2) * c;
            }
          }
        }
        block[(static_cast<size_t>(Mr) * d1 + m1r) * d2 + m2r] = s;
      }

  // the converted block is either purely real or purely imaginary; rotate the
  // global phase to make it real and verify
  double max_re = 0.0, max_im = 0.0;
  for (const auto& v : block) {
    max_re = std::max(max_re, std::fabs(v.real()));
    max_im = std::max(max_im, std::fabs(v.imag()));
  }
  bool take_imag = max_im > max_re;
  ClebschGordanBlock out;
  out.l_in = l_in;
  out.l_out = l_out;
  out.J = J;
  out.coefficients = Tensor({dL, d1, d2});
  double resid = 0.0;
  for (size_t i = 0; i < block.size(); ++i) {
    double keep = take_imag ? block[i].imag() : block[i].real();
    double drop = take_imag ? block[i].real() : block[i].imag();
    out.coefficients[static_cast<std::int64_t>(i)] = keep;
    resid = std::max(resid, std::fabs(drop));
  }
  if (resid > 1e-12)
    throw Error("cg_real: residual imaginary part " + std::to_string(resid));
  return out;
}

double radial_profile(int shell, double radius) {
  double d = radius - shell;
  return std::exp(-d * d / (2.0 * kRadialSigma * kRadialSigma));
}

std::vector<KernelBasis> build_kernel_basis(int l_in, int l_out, int k) {
  if (k % 2 == 0) throw Error("build_kernel_basis: kernel width must be odd");
  const int r = k / 2;
  const double cutoff = r + 0.5;
  std::vector<KernelBasis> out;
  for (int J = std::abs(l_in - l_out); J <= l_in + l_out; ++J) {
    ClebschGordanBlock cg = cg_real(l_in, l_out, J);
    const int dout = 2 * l_out + 1, din = 2 * l_in + 1, dj = 2 * J + 1;
    for (int shell = 0; shell <= r; ++shell) {
      Tensor samples({dout, din, k, k, k});
      const std::int64_t kvol = static_cast<std::int64_t>(k) * k * k;
      for (int iz = 0; iz < k; ++iz)
        for (int iy = 0; iy < k; ++iy)
          for (int ix = 0; ix < k; ++ix) {
            double vx = ix - r, vy = iy - r, vz = iz - r;
            double rad = std::sqrt(vx * vx + vy * vy + vz * vz);
            if (rad > cutoff) continue;
            std::vector<double> ang(static_cast<size_t>(dj), 0.0);
            if (rad < 1e-12) {
              if (J != 0) continue;  // angular part undefined at the center
              ang[0] = 1.0 / (2.0 * std::sqrt(M_PI));
            } else {
              ang = real_sph_harm(J, {vx / rad, vy / rad, vz / rad});
            }
            double phi = radial_profile(shell, rad);
            std::int64_t voxel = (static_cast<std::int64_t>(iz) * k + iy) * k + ix;
            for (int a = 0; a < dout; ++a)
              for (int b = 0; b < din; ++b) {
                double s = 0.0;
                for (int n = 0; n < dj; ++n)
                  s += ang[static_cast<size_t>(n)] *
                       cg.coefficients[(static_cast<std::int64_t>(a) * din + b) * dj + n];
                samples[(static_cast<std::int64_t>(a) * din + b) * kvol + voxel] = phi * s;
              }
          }
      if (samples.max_abs() < 1e-12) continue;  // numerically null
      double norm = 0.0;
      for (std::int64_t i = 0; i < samples.numel(); ++i) norm += samples[i] * samples[i];
      norm = std::sqrt(norm);
      for (std::int64_t i = 0; i < samples.numel(); ++i) samples[i] /= norm;
      KernelBasis kb;
      kb.l_in = l_in;
      kb.l_out = l_out;
      kb.J = J;
      kb.shell = shell;
      kb.samples = std::move(samples);
      out.push_back(std::move(kb));
    }
  }
  return out;
}

}  // namespace eqtrack
