#include "eqtrack/registration.hpp"

#include <cmath>
#include <cstdio>

#include "json.hpp"

namespace eqtrack {

SpatialMean spatial_mean(const Tensor& channel, const Eigen::Vector3d& voxel_size_mm,
                         const Eigen::Vector3d& origin_mm) {
  if (channel.rank() != 3) throw Error("spatial_mean: channel must be [D,H,W]");
  const int d = channel.dim(0), h = channel.dim(1), w = channel.dim(2);
  double mass = 0.0;
  Eigen::Vector3d moment = Eigen::Vector3d::Zero();
  std::int64_t i = 0;
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x, ++i) {
        double f = channel[i];
        if (f < 0.0) throw Error("spatial_mean: channel must be non-negative");
        mass += f;
        moment += f * (origin_mm + voxel_size_mm.cwiseProduct(Eigen::Vector3d(x, y, z)));
      }
  SpatialMean out;
  out.mass = mass;
  if (mass < 1e-12) {
    out.empty = true;
    return out;
  }
  out.point_mm = moment / mass;
  return out;
}

std::vector<double> channel_weights(const std::vector<double>& masses_a,
                                    const std::vector<double>& masses_b) {
  if (masses_a.size() != masses_b.size()) throw Error("channel_weights: size mismatch");
  const size_t k = masses_a.size();
  auto normalize = [](std::vector<double> m) {
    double s = 0.0;
    for (double v : m) {
      if (v < 0.0) throw Error("channel_weights: masses must be non-negative");
      s += v;
    }
    if (s > 1e-12)
      for (double& v : m) v /= s;
    return m;
  };
  std::vector<double> wa = normalize(masses_a);
  std::vector<double> wb = normalize(masses_b);
  std::vector<double> w(k);
  double s = 0.0;
  for (size_t i = 0; i < k; ++i) {
    w[i] = wa[i] * wb[i];
    s += w[i];
  }
  if (s < 1e-12) {
    std::fprintf(stderr, "warning: all channels empty, using uniform weights\n");
    for (double& v : w) v = 1.0 / static_cast<double>(k);
    return w;
  }
  for (double& v : w) v /= s;
  return w;
}

// ------------------------------------------------------------- taped pieces

TapedMeans spatial_means_taped(Graph& g, Value fmap, const Eigen::Vector3d& voxel_size_mm,
                               const Eigen::Vector3d& origin_mm) {
  const Tensor& f = fmap.val();
  if (f.rank() != 4) throw Error("spatial_means_taped: need [K,D,H,W]");
  const int kch = f.dim(0), d = f.dim(1), h = f.dim(2), w = f.dim(3);
  const int n = d * h * w;
  Tensor coords({n, 3});
  std::int64_t i = 0;
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x, ++i) {
        coords[i * 3 + 0] = origin_mm(0) + voxel_size_mm(0) * x;
        coords[i * 3 + 1] = origin_mm(1) + voxel_size_mm(1) * y;
        coords[i * 3 + 2] = origin_mm(2) + voxel_size_mm(2) * z;
      }
  Value flat = g.reshape(fmap, {kch, n});
  Value moments = g.matmul(flat, g.constant(std::move(coords)));        // [K,3]
  Value masses = g.reshape(g.reduce_sum_axes(flat, {1}), {kch, 1});     // [K,1]
  TapedMeans out;
  out.masses = masses;
  // the 1e-12 guard keeps empty channels finite; their weight is ~0 anyway
  out.points = g.div(moments, g.add_const(masses, 1e-12));
  return out;
}

Value channel_weights_taped(Graph& g, Value masses_a, Value masses_b) {
  double sa = masses_a.val().sum();
  double sb = masses_b.val().sum();
  const int k = masses_a.val().dim(0);
  if (sa < 1e-12 || sb < 1e-12) {
    std::fprintf(stderr, "warning: all channels empty, using uniform weights\n");
    return g.constant(Tensor::full({k, 1}, 1.0 / k));
  }
  Value wa = g.div(masses_a, g.reduce_sum(masses_a));
  Value wb = g.div(masses_b, g.reduce_sum(masses_b));
  Value w = g.mul(wa, wb);
  return g.div(w, g.reduce_sum(w));
}

TapedSolve solve_rigid_weighted_taped(Graph& g, Value points_a, Value points_b,
                                      Value weights_k1) {
  Value ca = g.matmul(g.transpose(weights_k1), points_a);  // [1,3]
  Value cb = g.matmul(g.transpose(weights_k1), points_b);
  Value abar = g.sub(points_a, ca);
  Value bbar = g.sub(points_b, cb);
  Value h = g.matmul(g.transpose(g.mul(abar, weights_k1)), bbar);  // X_A^T W X_B
  Graph::Svd svd = g.svd3(h);
  const Tensor& s = svd.s.val();
  TapedSolve out;
  out.singular_values = Eigen::Vector3d(s[0], s[1], s[2]);
  if (s[1] < 1e-9 && s[2] < 1e-9)
    throw DegenerateConfiguration(
        "solve_rigid_weighted: rotation unidentifiable (singular values " +
        std::to_string(s[0]) + ", " + std::to_string(s[1]) + ", " + std::to_string(s[2]) + ")");
  // reflection-safe R = V diag(1,1,det(VU^T)) U^T; the sign is locally constant
  Eigen::Matrix3d u, v;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      u(i, j) = svd.u.val()[i * 3 + j];
      v(i, j) = svd.v.val()[i * 3 + j];
    }
  double det = (v * u.transpose()).determinant();
  Tensor flip({3});
  flip[0] = 1.0;
  flip[1] = 1.0;
  flip[2] = det >= 0 ? 1.0 : -1.0;
  Value vflip = g.mul(svd.v, g.constant(std::move(flip)));  // scales third column
  out.rotation = g.matmul(vflip, g.transpose(svd.u));
  out.translation = g.sub(cb, g.matmul(ca, g.transpose(out.rotation)));
  return out;
}

SolveResult solve_rigid_weighted(const WeightedPointSet& a, const WeightedPointSet& b) {
  if (a.points.size() != b.points.size() || a.points.size() != a.weights.size() ||
      b.points.size() != b.weights.size())
    throw Error("solve_rigid_weighted: size mismatch");
  const int k = static_cast<int>(a.points.size());
  int live = 0;
  for (int i = 0; i < k; ++i)
    if (a.weights[static_cast<size_t>(i)] > 0.0 && b.weights[static_cast<size_t>(i)] > 0.0)
      ++live;
  if (live < 3)
    throw DegenerateConfiguration("solve_rigid_weighted: fewer than 3 weighted points");

  std::vector<double> w = channel_weights(a.weights, b.weights);
  Graph g;
  Tensor pa({k, 3}), pb({k, 3}), wt({k, 1});
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < 3; ++j) {
      pa[static_cast<std::int64_t>(i) * 3 + j] = a.points[static_cast<size_t>(i)](j);
      pb[static_cast<std::int64_t>(i) * 3 + j] = b.points[static_cast<size_t>(i)](j);
    }
    wt[i] = w[static_cast<size_t>(i)];
  }
  Value va = g.constant(std::move(pa));
  Value vb = g.constant(std::move(pb));
  Value vw = g.constant(std::move(wt));
  TapedSolve ts = solve_rigid_weighted_taped(g, va, vb, vw);

  SolveResult out;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) out.transform.rotation(i, j) = ts.rotation.val()[i * 3 + j];
    out.transform.translation_mm(i) = ts.translation.val()[i];
  }
  out.singular_values = ts.singular_values;
  Eigen::Vector3d ca = Eigen::Vector3d::Zero(), cb = Eigen::Vector3d::Zero();
  for (int i = 0; i < k; ++i) {
    ca += w[static_cast<size_t>(i)] * a.points[static_cast<size_t>(i)];
    cb += w[static_cast<size_t>(i)] * b.points[static_cast<size_t>(i)];
  }
  out.translation_centroidal = cb - ca;
  double resid = 0.0;
  for (int i = 0; i < k; ++i)
    resid += w[static_cast<size_t>(i)] *
             (b.points[static_cast<size_t>(i)] -
              out.transform.apply(a.points[static_cast<size_t>(i)]))
                 .squaredNorm();
  out.residual = resid;
  return out;
}

// --------------------------------------------------------------------- track

namespace {

Value volume_as_input(Graph& g, const Volume& v) {
  Tensor t = v.data.reshaped({1, v.dz(), v.dy(), v.dx()});
  return g.constant(std::move(t));
}

TrackDiagnostics make_diagnostics(const Tensor& masses_a, const Tensor& masses_b,
                                  const Tensor& weights, const TapedSolve& ts,
                                  const Tensor& pa, const Tensor& pb) {
  TrackDiagnostics d;
  const int k = masses_a.dim(0);
  for (int i = 0; i < k; ++i) {
    d.masses_a.push_back(masses_a[i]);
    d.masses_b.push_back(masses_b[i]);
    d.weights.push_back(weights[i]);
    if (masses_a[i] < 1e-12 || masses_b[i] < 1e-12) d.empty_channels++;
  }
  d.singular_values = ts.singular_values;
  d.condition = ts.singular_values(0) / std::max(ts.singular_values(2), 1e-15);
  Eigen::Matrix3d r;
  Eigen::Vector3d t;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) r(i, j) = ts.rotation.val()[i * 3 + j];
    t(i) = ts.translation.val()[i];
  }
  Eigen::Vector3d ca = Eigen::Vector3d::Zero(), cb = Eigen::Vector3d::Zero();
  double resid = 0.0;
  for (int i = 0; i < k; ++i) {
    Eigen::Vector3d xa(pa[i * 3], pa[i * 3 + 1], pa[i * 3 + 2]);
    Eigen::Vector3d xb(pb[i * 3], pb[i * 3 + 1], pb[i * 3 + 2]);
    ca += weights[i] * xa;
    cb += weights[i] * xb;
    resid += weights[i] * (xb - (r * xa + t)).squaredNorm();
  }
  d.translation_centroidal = cb - ca;
  d.residual = resid;
  return d;
}

}  // namespace

TrackGraph track_taped(Graph& g, const SteerableModel& model, const Volume& image_a,
                       const Volume& image_b) {
  if (!image_a.data.same_shape(image_b.data))
    throw Error("track: image grids differ");
  if ((image_a.voxel_size_mm - image_b.voxel_size_mm).norm() > 1e-12 ||
      (image_a.origin_mm - image_b.origin_mm).norm() > 1e-12)
    throw Error("track: image geometries differ");

  TrackGraph out;
  out.params = model.make_param_nodes(g);
  Value fa = model.forward(g, volume_as_input(g, image_a), out.params).output;
  Value fb = model.forward(g, volume_as_input(g, image_b), out.params).output;
  TapedMeans ma = spatial_means_taped(g, fa, image_a.voxel_size_mm, image_a.origin_mm);
  TapedMeans mb = spatial_means_taped(g, fb, image_b.voxel_size_mm, image_b.origin_mm);
  Value w = channel_weights_taped(g, ma.masses, mb.masses);
  TapedSolve ts = solve_rigid_weighted_taped(g, ma.points, mb.points, w);
  out.rotation = ts.rotation;
  out.translation = ts.translation;
  out.diagnostics = make_diagnostics(ma.masses.val(), mb.masses.val(), w.val(), ts,
                                     ma.points.val(), mb.points.val());
  return out;
}

TrackResult track(const SteerableModel& model, const Volume& image_a, const Volume& image_b) {
  Graph g;
  TrackGraph tg = track_taped(g, model, image_a, image_b);
  TrackResult out;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) out.transform.rotation(i, j) = tg.rotation.val()[i * 3 + j];
    out.transform.translation_mm(i) = tg.translation.val()[i];
  }
  out.diagnostics = tg.diagnostics;
  return out;
}

std::string diagnostics_json(const TrackDiagnostics& d) {
  nlohmann::json j;
  j["masses_a"] = d.masses_a;
  j["masses_b"] = d.masses_b;
  j["weights"] = d.weights;
  j["residual"] = d.residual;
  j["singular_values"] = {d.singular_values(0), d.singular_values(1), d.singular_values(2)};
  j["translation_centroidal_mm"] = {d.translation_centroidal(0), d.translation_centroidal(1),
                                    d.translation_centroidal(2)};
  j["empty_channels"] = d.empty_channels;
  j["condition"] = d.condition;
  return j.dump(2);
}

// -------------------------------------------------------------------- losses

double loss_l2(const RigidTransform& est, const RigidTransform& truth) {
  return (est.translation_mm - truth.translation_mm).norm() +
         (est.rotation - truth.rotation).norm();
}

Value loss_l2_taped(Graph& g, Value rotation, Value translation, const RigidTransform& truth) {
  Tensor rt({3, 3}), tt({1, 3});
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) rt[i * 3 + j] = truth.rotation(i, j);
    tt[i] = truth.translation_mm(i);
  }
  Value dt = g.vector_norm(g.sub(translation, g.constant(std::move(tt))));
  Value dr = g.vector_norm(g.sub(rotation, g.constant(std::move(rt))));
  return g.add(dt, dr);
}

double loss_geodesic(const Eigen::Matrix3d& r_est, const Eigen::Matrix3d& r_true) {
  double tr = (r_est.transpose() * r_true).trace();
  double c = std::clamp((tr - 1.0) / 2.0, -1.0 + 1e-7, 1.0 - 1e-7);
  return std::acos(c);
}

Value loss_geodesic_taped(Graph& g, Value rotation, const Eigen::Matrix3d& r_true) {
  Tensor rt({3, 3});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) rt[i * 3 + j] = r_true(i, j);
  Value rel = g.matmul(g.transpose(rotation), g.constant(std::move(rt)));
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  Value tr = g.reduce_sum(g.mul(rel, g.constant(std::move(eye))));
  return g.acos_clamped(g.scale(g.add_const(tr, -1.0), 0.5));
}

namespace {
Eigen::Matrix3d normalize_first_two_columns(const Eigen::Matrix3d& r) {
  Eigen::Matrix3d out = r;
  out.col(0).normalize();
  out.col(1).normalize();
  return out;
}
}  // namespace

double loss_6d(const Eigen::Matrix3d& r_est, const Eigen::Matrix3d& r_true) {
  Eigen::Matrix3d a = normalize_first_two_columns(r_est);
  Eigen::Matrix3d b = normalize_first_two_columns(r_true);
  double s = (a.col(0) - b.col(0)).squaredNorm() + (a.col(1) - b.col(1)).squaredNorm();
  return std::sqrt(s);
}

Value loss_6d_taped(Graph& g, Value rotation, const Eigen::Matrix3d& r_true) {
  Value cols = g.transpose(rotation);  // rows are the columns of R
  std::vector<Value> diffs;
  for (int c = 0; c < 2; ++c) {
    Value col = g.slice0(cols, c, c + 1);  // [1,3]
    Value coln = g.div(col, g.vector_norm(col));
    Eigen::Vector3d t = r_true.col(c).normalized();
    Tensor tt({1, 3});
    for (int i = 0; i < 3; ++i) tt[i] = t(i);
    diffs.push_back(g.sub(coln, g.constant(std::move(tt))));
  }
  return g.vector_norm(g.concat0(diffs));
}

double loss_image(const RigidTransform& est, const Volume& image_a, const Volume& image_b) {
  Volume warped = warp_volume(image_a, est);
  if (!warped.data.same_shape(image_b.data)) throw Error("loss_image: grids differ");
  double s = 0.0;
  for (std::int64_t i = 0; i < warped.data.numel(); ++i) {
    double d = warped.data[i] - image_b.data[i];
    s += d * d;
  }
  return s / static_cast<double>(warped.data.numel());
}

namespace {

// Fused Eq-style image loss: mean squared difference between image_a warped by
// (R, t) and image_b, differentiable in R and t through the trilinear warp.
class ImageMseNode : public Node {
 public:
  ImageMseNode(Volume a, Volume b) : a_(std::move(a)), b_(std::move(b)) {}

  void forward(const Tensor& r, const Tensor& t) {
    if (!a_.data.same_shape(b_.data)) throw Error("loss_image: grids differ");
    double mse = 0.0;
    iterate(r, t, nullptr, nullptr, &mse);
    val = Tensor::scalar(mse);
  }

  void backward(Graph& g) override {
    Node& nr = g.node(in[0]);
    Node& nt = g.node(in[1]);
    Tensor gr({3, 3}), gt({1, 3});
    iterate(nr.val, nt.val, &gr, &gt, nullptr);
    double go = grad[0];
    if (nr.needs_grad) {
      Tensor& acc = g.grad_buffer(in[0]);
      for (int i = 0; i < 9; ++i) acc[i] += go * gr[i];
    }
    if (nt.needs_grad) {
      Tensor& acc = g.grad_buffer(in[1]);
      for (int i = 0; i < 3; ++i) acc[i] += go * gt[i];
    }
  }

 private:
  // single pass computing the loss and, when requested, d loss / d(R, t)
  void iterate(const Tensor& rt, const Tensor& tt, Tensor* gr, Tensor* gt, double* mse) const {
    Eigen::Matrix3d r;
    Eigen::Vector3d t;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) r(i, j) = rt[i * 3 + j];
      t(i) = tt[i];
    }
    const double n = static_cast<double>(b_.data.numel());
    double acc = 0.0;
    Eigen::Matrix3d gR = Eigen::Matrix3d::Zero();
    Eigen::Vector3d gT = Eigen::Vector3d::Zero();
    for (int z = 0; z < b_.dz(); ++z)
      for (int y = 0; y < b_.dy(); ++y)
        for (int x = 0; x < b_.dx(); ++x) {
          Eigen::Vector3d q = b_.world(x, y, z) - t;
          Eigen::Vector3d p = r.transpose() * q;  // T^-1(world)
          Eigen::Vector3d f = (p - a_.origin_mm).cwiseQuotient(a_.voxel_size_mm);
          double value, dfx, dfy, dfz;
          sample_grad(f(0), f(1), f(2), value, dfx, dfy, dfz);
          double diff = value - b_.at(x, y, z);
          acc += diff * diff;
          if (gr || gt) {
            Eigen::Vector3d gp(dfx / a_.voxel_size_mm(0), dfy / a_.voxel_size_mm(1),
                               dfz / a_.voxel_size_mm(2));
            gp *= 2.0 * diff / n;
            if (gt) gT -= r * gp;
            if (gr) gR += q * gp.transpose();  // d p_i / d R_ab = delta_ib q_a
          }
        }
    if (mse) *mse = acc / n;
    if (gr)
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) (*gr)[i * 3 + j] = gR(i, j);
    if (gt)
      for (int i = 0; i < 3; ++i) (*gt)[i] = gT(i);
  }

  // trilinear value and gradient w.r.t. fractional index coordinates
  void sample_grad(double fx, double fy, double fz, double& value, double& dfx, double& dfy,
                   double& dfz) const {
    int x0 = static_cast<int>(std::floor(fx));
    int y0 = static_cast<int>(std::floor(fy));
    int z0 = static_cast<int>(std::floor(fz));
    double tx = fx - x0, ty = fy - y0, tz = fz - z0;
    value = dfx = dfy = dfz = 0.0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          int x = x0 + dx, y = y0 + dy, z = z0 + dz;
          if (x < 0 || y < 0 || z < 0 || x >= a_.dx() || y >= a_.dy() || z >= a_.dz()) continue;
          double v = a_.at(x, y, z);
          double wx = dx ? tx : 1 - tx, wy = dy ? ty : 1 - ty, wz = dz ? tz : 1 - tz;
          value += wx * wy * wz * v;
          dfx += (dx ? 1.0 : -1.0) * wy * wz * v;
          dfy += wx * (dy ? 1.0 : -1.0) * wz * v;
          dfz += wx * wy * (dz ? 1.0 : -1.0) * v;
        }
  }

  Volume a_, b_;
};

}  // namespace

Value loss_image_taped(Graph& g, Value rotation, Value translation, const Volume& image_a,
                       const Volume& image_b) {
  auto n = std::make_unique<ImageMseNode>(image_a, image_b);
  n->forward(rotation.val(), translation.val());
  return g.add_node(std::move(n), {rotation.id, translation.id});
}

}  // namespace eqtrack
