#pragma once

#include <functional>
#include <vector>

#include "eqtrack/rng.hpp"
#include "eqtrack/tensor.hpp"

namespace eqtrack::testutil {

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// central finite differences of a scalar function of one flat parameter vector
struct FdCheck {
  double max_rel = 0.0;
  int worst_index = -1;
  double worst_analytic = 0.0, worst_numeric = 0.0;
};

// value(p): scalar loss; analytic: gradient at p (same length as p)
inline FdCheck fd_check(const std::function<double(const std::vector<double>&)>& value,
                        std::vector<double> p, const std::vector<double>& analytic,
                        double step = 1e-5, double denom_floor = 1e-6) {
  FdCheck out;
  for (size_t i = 0; i < p.size(); ++i) {
    double orig = p[i];
    p[i] = orig + step;
    double fp = value(p);
    p[i] = orig - step;
    double fm = value(p);
    p[i] = orig;
    double numeric = (fp - fm) / (2.0 * step);
    double rel = std::fabs(analytic[i] - numeric) /
                 std::max({std::fabs(analytic[i]), std::fabs(numeric), denom_floor});
    if (rel > out.max_rel) {
      out.max_rel = rel;
      out.worst_index = static_cast<int>(i);
      out.worst_analytic = analytic[i];
      out.worst_numeric = numeric;
    }
  }
  return out;
}

// independent direct-summation cross-correlation oracle (naive loops)
inline Tensor conv3d_reference(const Tensor& in, const Tensor& kernel) {
  const int cin = in.dim(0), d = in.dim(1), h = in.dim(2), w = in.dim(3);
  const int cout = kernel.dim(0), k = kernel.dim(2), r = k / 2;
  Tensor out({cout, d, h, w});
  for (int co = 0; co < cout; ++co)
    for (int z = 0; z < d; ++z)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double acc = 0.0;
          for (int ci = 0; ci < cin; ++ci)
            for (int dz = -r; dz <= r; ++dz)
              for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx) {
                  int zz = z + dz, yy = y + dy, xx = x + dx;
                  if (zz < 0 || yy < 0 || xx < 0 || zz >= d || yy >= h || xx >= w) continue;
                  acc += kernel.at({co, ci, dz + r, dy + r, dx + r}) *
                         in[((static_cast<std::int64_t>(ci) * d + zz) * h + yy) * w + xx];
                }
          out[((static_cast<std::int64_t>(co) * d + z) * h + y) * w + x] = acc;
        }
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace eqtrack::testutil
