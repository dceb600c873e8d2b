#include "eqtrack/geometry.hpp"

#include <cmath>
#include <fstream>
#include <mutex>

#include "eqtrack/harmonics.hpp"
#include "json.hpp"

namespace eqtrack {

void RigidTransform::validate(double tol) const {
  double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).norm();
  if (ortho > tol)
    throw Error("RigidTransform: rotation not orthogonal (|R^T R - I| = " +
                std::to_string(ortho) + ")");
  if (std::fabs(rotation.determinant() - 1.0) > tol)
    throw Error("RigidTransform: det(R) = " + std::to_string(rotation.determinant()));
  if (!translation_mm.allFinite() || !rotation.allFinite())
    throw Error("RigidTransform: non-finite entries");
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  RigidTransform out;
  out.rotation = a.rotation * b.rotation;
  out.translation_mm = a.rotation * b.translation_mm + a.translation_mm;
  return out;
}

RigidTransform inverse(const RigidTransform& t) {
  RigidTransform out;
  out.rotation = t.rotation.transpose();
  out.translation_mm = -(t.rotation.transpose() * t.translation_mm);
  return out;
}

Eigen::Matrix3d random_rotation(Rng& rng) {
  double q[4];
  double n2 = 0.0;
  do {
    n2 = 0.0;
    for (double& qi : q) {
      qi = rng.normal();
      n2 += qi * qi;
    }
  } while (n2 < 1e-12);
  double n = std::sqrt(n2);
  double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
  Eigen::Matrix3d r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

Eigen::Matrix3d random_rotation(std::uint64_t seed) {
  Rng rng(seed);
  return random_rotation(rng);
}

Eigen::Matrix3d axis_angle(const Eigen::Vector3d& axis, double angle_rad) {
  Eigen::Vector3d u = axis.normalized();
  return Eigen::AngleAxisd(angle_rad, u).toRotationMatrix();
}

double rotation_error_geodesic(const Eigen::Matrix3d& r_est, const Eigen::Matrix3d& r_true) {
  // written as tr(R~ R) in some formulations; the relative rotation R~^T R is
  // what measures the error between an estimate and a reference
  double tr = (r_est.transpose() * r_true).trace();
  double c = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

std::array<double, 3> euler_zyx_deg(const Eigen::Matrix3d& r, bool* gimbal_warning) {
  const double deg = 180.0 / M_PI;
  double sp = std::clamp(-r(2, 0), -1.0, 1.0);
  double pitch = std::asin(sp);
  bool gimbal = std::fabs(std::fabs(pitch * deg) - 90.0) < 1e-6;
  if (gimbal_warning) *gimbal_warning = gimbal;
  double yaw, roll;
  if (!gimbal) {
    yaw = std::atan2(r(1, 0), r(0, 0));
    roll = std::atan2(r(2, 1), r(2, 2));
  } else {
    yaw = std::atan2(-r(0, 1), r(1, 1));
    roll = 0.0;
  }
  return {yaw * deg, pitch * deg, roll * deg};
}

Eigen::Matrix3d euler_zyx_to_matrix_deg(double yaw, double pitch, double roll) {
  const double rad = M_PI / 180.0;
  return (Eigen::AngleAxisd(yaw * rad, Eigen::Vector3d::UnitZ()) *
          Eigen::AngleAxisd(pitch * rad, Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(roll * rad, Eigen::Vector3d::UnitX()))
      .toRotationMatrix();
}

namespace {
double wrap_deg(double d) {
  d = std::fmod(d + 180.0, 360.0);
  if (d < 0) d += 360.0;
  return d - 180.0;
}
}  // namespace

double euler_mae_deg(const Eigen::Matrix3d& r_est, const Eigen::Matrix3d& r_true) {
  std::array<double, 3> a = euler_zyx_deg(r_est);
  std::array<double, 3> b = euler_zyx_deg(r_true);
  double s = 0.0;
  for (int i = 0; i < 3; ++i) s += std::fabs(wrap_deg(a[i] - b[i]));
  return s / 3.0;
}

// ------------------------------------------------------------------ wigner

namespace {

// symmetric traceless tensors S^{lm} with Y_lm(u) = <S^{lm}, u^{x l}>
struct IrrepTensors {
  int l = 0;
  std::vector<std::vector<double>> s;  // [2l+1][3^l]
  double gram = 1.0;                   // <S^{lm}, S^{lm}> (equal for all m)
};

double multinomial(int l, int a, int b, int c) {
  auto fact = [](int n) {
    double f = 1.0;
    for (int i = 2; i <= n; ++i) f *= i;
    return f;
  };
  return fact(l) / (fact(a) * fact(b) * fact(c));
}

const IrrepTensors& irrep_tensors(int l) {
  static std::mutex mu;
  static std::vector<IrrepTensors> cache(kMaxKernelOrder + 1);
  static std::array<bool, kMaxKernelOrder + 1> built = {};
  std::lock_guard<std::mutex> lock(mu);
  if (built[static_cast<size_t>(l)]) return cache[static_cast<size_t>(l)];

  const HarmonicPolynomials& hp = harmonic_polynomials(l);
  IrrepTensors it;
  it.l = l;
  int n = 1;
  for (int i = 0; i < l; ++i) n *= 3;
  it.s.assign(static_cast<size_t>(2 * l + 1), std::vector<double>(static_cast<size_t>(n), 0.0));
  for (int t = 0; t < n; ++t) {
    int counts[3] = {0, 0, 0};
    int tt = t;
    for (int i = 0; i < l; ++i) {
      counts[tt % 3]++;
      tt /= 3;
    }
    int mono = -1;
    for (size_t k = 0; k < hp.monomials.size(); ++k)
      if (hp.monomials[k][0] == counts[0] && hp.monomials[k][1] == counts[1] &&
          hp.monomials[k][2] == counts[2]) {
        mono = static_cast<int>(k);
        break;
      }
    double mn = multinomial(l, counts[0], counts[1], counts[2]);
    for (int m = 0; m < 2 * l + 1; ++m)
      it.s[static_cast<size_t>(m)][static_cast<size_t>(t)] =
          hp.coeff[static_cast<size_t>(m)][static_cast<size_t>(mono)] / mn;
  }
  double g = 0.0;
  for (double v : it.s[static_cast<size_t>(l)]) g += v * v;  // use m = 0 row
  it.gram = g;
  cache[static_cast<size_t>(l)] = std::move(it);
  built[static_cast<size_t>(l)] = true;
  return cache[static_cast<size_t>(l)];
}

// apply R to every tensor mode: out = R^{x l} s
std::vector<double> apply_tensor_power(const Eigen::Matrix3d& r, const std::vector<double>& s,
                                       int l) {
  std::vector<double> cur = s, next(s.size(), 0.0);
  int n = static_cast<int>(s.size());
  int stride = n / 3;  // stride of mode 0
  for (int mode = 0; mode < l; ++mode) {
    std::fill(next.begin(), next.end(), 0.0);
    for (int t = 0; t < n; ++t) {
      int digit = (t / stride) % 3;
      int base = t - digit * stride;
      double acc = 0.0;
      for (int q = 0; q < 3; ++q)
        acc += r(digit, q) * cur[static_cast<size_t>(base + q * stride)];
      next[static_cast<size_t>(t)] = acc;
    }
    std::swap(cur, next);
    stride /= 3;
  }
  return cur;
}

}  // namespace

Eigen::MatrixXd wigner_d_real(int l, const Eigen::Matrix3d& r) {
  if (l < 0 || l > kMaxKernelOrder) throw Error("wigner_d_real: order out of range");
  double ortho = (r.transpose() * r - Eigen::Matrix3d::Identity()).norm();
  if (ortho > 1e-6 || std::fabs(r.determinant() - 1.0) > 1e-6)
    throw Error("wigner_d_real: input is not a rotation");
  if (l == 0) return Eigen::MatrixXd::Ones(1, 1);
  const IrrepTensors& it = irrep_tensors(l);
  const int d = 2 * l + 1;
  Eigen::MatrixXd D(d, d);
  for (int mp = 0; mp < d; ++mp) {
    std::vector<double> rs = apply_tensor_power(r, it.s[static_cast<size_t>(mp)], l);
    for (int m = 0; m < d; ++m) {
      double dot = 0.0;
      const std::vector<double>& sm = it.s[static_cast<size_t>(m)];
      for (size_t i = 0; i < rs.size(); ++i) dot += sm[i] * rs[i];
      D(m, mp) = dot / it.gram;
    }
  }
  return D;
}

const std::vector<Eigen::Matrix3d>& octahedral_rotations() {
  static std::vector<Eigen::Matrix3d> rots = [] {
    std::vector<Eigen::Matrix3d> out;
    int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    for (auto& p : perms)
      for (int sx = -1; sx <= 1; sx += 2)
        for (int sy = -1; sy <= 1; sy += 2)
          for (int sz = -1; sz <= 1; sz += 2) {
            Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
            m(0, p[0]) = sx;
            m(1, p[1]) = sy;
            m(2, p[2]) = sz;
            if (std::fabs(m.determinant() - 1.0) < 1e-12) out.push_back(m);
          }
    return out;
  }();
  return rots;
}

void save_transform_json(const std::string& path, const RigidTransform& t) {
  nlohmann::json j;
  j["rotation"] = {{t.rotation(0, 0), t.rotation(0, 1), t.rotation(0, 2)},
                   {t.rotation(1, 0), t.rotation(1, 1), t.rotation(1, 2)},
                   {t.rotation(2, 0), t.rotation(2, 1), t.rotation(2, 2)}};
  j["translation_mm"] = {t.translation_mm(0), t.translation_mm(1), t.translation_mm(2)};
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path);
  f << j.dump(2) << "\n";
}

RigidTransform load_transform_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read " + path);
  nlohmann::json j;
  f >> j;
  RigidTransform t;
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 3; ++k) t.rotation(i, k) = j.at("rotation").at(i).at(k).get<double>();
    t.translation_mm(i) = j.at("translation_mm").at(i).get<double>();
  }
  t.validate(1e-6);
  return t;
}

}  // namespace eqtrack
