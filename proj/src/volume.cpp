#include "eqtrack/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace eqtrack {

Volume::Volume(Tensor d, Eigen::Vector3d voxel_size, Eigen::Vector3d origin)
    : data(std::move(d)), voxel_size_mm(std::move(voxel_size)), origin_mm(std::move(origin)) {
  if (data.rank() != 3) throw Error("Volume: data must be [D,H,W]");
  for (int i = 0; i < 3; ++i) {
    if (data.dim(i) < 8) throw Error("Volume: extents must be >= 8");
    if (voxel_size_mm(i) <= 0.0) throw Error("Volume: voxel size must be positive");
  }
  if (!data.all_finite()) throw Error("Volume: non-finite intensities");
}

double Volume::sample_index(double fx, double fy, double fz) const {
  int x0 = static_cast<int>(std::floor(fx));
  int y0 = static_cast<int>(std::floor(fy));
  int z0 = static_cast<int>(std::floor(fz));
  double tx = fx - x0, ty = fy - y0, tz = fz - z0;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        int x = x0 + dx, y = y0 + dy, z = z0 + dz;
        if (x < 0 || y < 0 || z < 0 || x >= this->dx() || y >= this->dy() || z >= this->dz())
          continue;
        double w = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz);
        acc += w * at(x, y, z);
      }
  return acc;
}

double Volume::sample_world(const Eigen::Vector3d& w) const {
  Eigen::Vector3d f = (w - origin_mm).cwiseQuotient(voxel_size_mm);
  return sample_index(f(0), f(1), f(2));
}

namespace {

std::string raw_path_for(const std::string& json_path) {
  std::filesystem::path p(json_path);
  p.replace_extension(".raw");
  return p.string();
}

void save_grid(const std::string& json_path, const Tensor& data,
               const Eigen::Vector3d& vs, const Eigen::Vector3d& origin) {
  nlohmann::json j;
  j["dims"] = {data.dim(0), data.dim(1), data.dim(2)};
  j["voxel_size_mm"] = {vs(0), vs(1), vs(2)};
  j["origin_mm"] = {origin(0), origin(1), origin(2)};
  j["dtype"] = "f32le";
  std::ofstream hf(json_path);
  if (!hf) throw Error("cannot write " + json_path);
  hf << j.dump(2) << "\n";

  std::vector<float> payload(static_cast<size_t>(data.numel()));
  for (std::int64_t i = 0; i < data.numel(); ++i)
    payload[static_cast<size_t>(i)] = static_cast<float>(data[i]);
  std::ofstream rf(raw_path_for(json_path), std::ios::binary);
  if (!rf) throw Error("cannot write " + raw_path_for(json_path));
  rf.write(reinterpret_cast<const char*>(payload.data()),
           static_cast<std::streamsize>(payload.size() * sizeof(float)));
}

void load_grid(const std::string& json_path, Tensor& data, Eigen::Vector3d& vs,
               Eigen::Vector3d& origin) {
  std::ifstream hf(json_path);
  if (!hf) throw Error("cannot read " + json_path);
  nlohmann::json j;
  hf >> j;
  if (j.at("dtype").get<std::string>() != "f32le")
    throw Error("unsupported dtype in " + json_path);
  int d = j.at("dims").at(0).get<int>();
  int h = j.at("dims").at(1).get<int>();
  int w = j.at("dims").at(2).get<int>();
  for (int i = 0; i < 3; ++i) {
    vs(i) = j.at("voxel_size_mm").at(i).get<double>();
    origin(i) = j.at("origin_mm").at(i).get<double>();
  }
  std::int64_t n = static_cast<std::int64_t>(d) * h * w;
  std::vector<float> payload(static_cast<size_t>(n));
  std::ifstream rf(raw_path_for(json_path), std::ios::binary);
  if (!rf) throw Error("cannot read " + raw_path_for(json_path));
  rf.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (rf.gcount() != static_cast<std::streamsize>(payload.size() * sizeof(float)))
    throw Error("truncated raw payload for " + json_path);
  std::vector<double> dd(payload.begin(), payload.end());
  data = Tensor::from({d, h, w}, std::move(dd));
}

}  // namespace

void save_volume(const std::string& json_path, const Volume& v) {
  save_grid(json_path, v.data, v.voxel_size_mm, v.origin_mm);
}

Volume load_volume(const std::string& json_path) {
  Tensor data;
  Eigen::Vector3d vs, origin;
  load_grid(json_path, data, vs, origin);
  return Volume(std::move(data), vs, origin);
}

void save_mask(const std::string& json_path, const Mask& m) {
  save_grid(json_path, m.data, m.voxel_size_mm, m.origin_mm);
}

Mask load_mask(const std::string& json_path) {
  Mask m;
  load_grid(json_path, m.data, m.voxel_size_mm, m.origin_mm);
  for (std::int64_t i = 0; i < m.data.numel(); ++i)
    if (m.data[i] != 0.0 && m.data[i] != 1.0) throw Error("mask values must be 0 or 1");
  return m;
}

Volume warp_volume(const Volume& v, const RigidTransform& t) {
  t.validate(1e-6);
  RigidTransform ti = inverse(t);
  Volume out = v;
  for (int z = 0; z < v.dz(); ++z)
    for (int y = 0; y < v.dy(); ++y)
      for (int x = 0; x < v.dx(); ++x)
        out.at(x, y, z) = v.sample_world(ti.apply(v.world(x, y, z)));
  return out;
}

Mask warp_mask(const Mask& m, const RigidTransform& t) {
  Volume v(m.data, m.voxel_size_mm, m.origin_mm);
  Volume w = warp_volume(v, t);
  Mask out;
  out.voxel_size_mm = m.voxel_size_mm;
  out.origin_mm = m.origin_mm;
  out.data = Tensor(w.data.shape());
  for (std::int64_t i = 0; i < w.data.numel(); ++i) out.data[i] = w.data[i] >= 0.5 ? 1.0 : 0.0;
  return out;
}

double max_octahedral_autocorrelation(const Volume& v) {
  double norm2 = 0.0;
  for (std::int64_t i = 0; i < v.data.numel(); ++i) norm2 += v.data[i] * v.data[i];
  if (norm2 < 1e-12) return 1.0;
  double best = -1.0;
  for (const Eigen::Matrix3d& r : octahedral_rotations()) {
    if ((r - Eigen::Matrix3d::Identity()).norm() < 1e-12) continue;
    Volume rot = rotate_grid_exact(v, r);
    double dot = 0.0;
    for (std::int64_t i = 0; i < v.data.numel(); ++i) dot += v.data[i] * rot.data[i];
    best = std::max(best, dot / norm2);
  }
  return best;
}

Volume rotate_grid_exact(const Volume& v, const Eigen::Matrix3d& r) {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (std::fabs(r(i, j) - std::round(r(i, j))) > 1e-9)
        throw Error("rotate_grid_exact: not a grid rotation");
  Volume out = v;
  double cx = (v.dx() - 1) / 2.0, cy = (v.dy() - 1) / 2.0, cz = (v.dz() - 1) / 2.0;
  // out(x) = in(R^-1 (x - c) + c); R^-1 = R^T for rotations
  for (int z = 0; z < v.dz(); ++z)
    for (int y = 0; y < v.dy(); ++y)
      for (int x = 0; x < v.dx(); ++x) {
        Eigen::Vector3d p(x - cx, y - cy, z - cz);
        Eigen::Vector3d q = r.transpose() * p;
        int sx = static_cast<int>(std::llround(q(0) + cx));
        int sy = static_cast<int>(std::llround(q(1) + cy));
        int sz = static_cast<int>(std::llround(q(2) + cz));
        if (sx < 0 || sy < 0 || sz < 0 || sx >= v.dx() || sy >= v.dy() || sz >= v.dz())
          throw Error("rotate_grid_exact: grid is not cubic");
        out.at(x, y, z) = v.at(sx, sy, sz);
      }
  return out;
}

std::pair<Volume, Mask> make_phantom(std::uint64_t seed, int size, PhantomKind kind,
                                     double voxel_size_mm) {
  if (size < 16) throw Error("make_phantom: size must be >= 16");
  Rng rng(seed);
  Eigen::Vector3d vs = Eigen::Vector3d::Constant(voxel_size_mm);
  for (int attempt = 0; attempt < 64; ++attempt) {
    Tensor data({size, size, size});
    int nblobs = 5 + rng.uniform_int(11);  // 5..15
    double c = (size - 1) / 2.0;
    double ball = 0.30 * size;
    for (int b = 0; b < nblobs; ++b) {
      Eigen::Vector3d center;
      do {
        center = Eigen::Vector3d(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
      } while (center.norm() > 1.0);
      center = center * ball + Eigen::Vector3d::Constant(c);
      Eigen::Matrix3d rot = random_rotation(rng);
      Eigen::Vector3d semi(rng.uniform(0.06, 0.18) * size, rng.uniform(0.06, 0.18) * size,
                           rng.uniform(0.06, 0.18) * size);
      double amp = rng.uniform(0.5, 1.0);
      for (int z = 0; z < size; ++z)
        for (int y = 0; y < size; ++y)
          for (int x = 0; x < size; ++x) {
            Eigen::Vector3d d(x - center(0), y - center(1), z - center(2));
            Eigen::Vector3d q = (rot.transpose() * d).cwiseQuotient(semi);
            double r2 = q.squaredNorm();
            double v;
            if (kind == PhantomKind::Blobs) {
              v = amp * std::exp(-0.5 * r2);
            } else {
              double r = std::sqrt(r2);  // soft-edged solid ellipsoid
              v = r <= 1.0 ? amp : (r < 1.3 ? amp * (1.3 - r) / 0.3 : 0.0);
            }
            data[(static_cast<std::int64_t>(z) * size + y) * size + x] += v;
          }
    }
    Volume vol(std::move(data), vs, Eigen::Vector3d::Zero());
    vol = percentile_normalize(vol);
    if (max_octahedral_autocorrelation(vol) > 0.99) continue;  // reject symmetric draw

    // mask: 5% of max support, dilated 4 voxels (26-neighborhood)
    Mask mask;
    mask.voxel_size_mm = vs;
    mask.origin_mm = vol.origin_mm;
    mask.data = Tensor({size, size, size});
    double mx = vol.data.max_abs();
    for (std::int64_t i = 0; i < vol.data.numel(); ++i)
      mask.data[i] = vol.data[i] >= 0.05 * mx ? 1.0 : 0.0;
    for (int it = 0; it < 4; ++it) {
      Tensor prev = mask.data;
      auto get = [&](int x, int y, int z) -> double {
        if (x < 0 || y < 0 || z < 0 || x >= size || y >= size || z >= size) return 0.0;
        return prev[(static_cast<std::int64_t>(z) * size + y) * size + x];
      };
      for (int z = 0; z < size; ++z)
        for (int y = 0; y < size; ++y)
          for (int x = 0; x < size; ++x) {
            if (prev[(static_cast<std::int64_t>(z) * size + y) * size + x] > 0.0) continue;
            bool hit = false;
            for (int dz = -1; dz <= 1 && !hit; ++dz)
              for (int dy = -1; dy <= 1 && !hit; ++dy)
                for (int dx = -1; dx <= 1 && !hit; ++dx)
                  if (get(x + dx, y + dy, z + dz) > 0.0) hit = true;
            if (hit) mask.data[(static_cast<std::int64_t>(z) * size + y) * size + x] = 1.0;
          }
    }
    return {std::move(vol), std::move(mask)};
  }
  throw Error("make_phantom: could not draw an asymmetric phantom");
}

Volume percentile_normalize(const Volume& v, double low_pct, double high_pct) {
  std::vector<double> sorted(v.data.data(), v.data.data() + v.data.numel());
  std::sort(sorted.begin(), sorted.end());
  auto pct = [&](double p) {
    double idx = p / 100.0 * (static_cast<double>(sorted.size()) - 1);
    return sorted[static_cast<size_t>(std::llround(idx))];
  };
  double lo = pct(low_pct), hi = pct(high_pct);
  Volume out = v;
  if (hi - lo < 1e-12) {
    std::fprintf(stderr, "warning: percentile_normalize on a constant volume\n");
    for (std::int64_t i = 0; i < out.data.numel(); ++i) out.data[i] = 0.0;
    return out;
  }
  for (std::int64_t i = 0; i < out.data.numel(); ++i)
    out.data[i] = (std::clamp(out.data[i], lo, hi) - lo) / (hi - lo);
  return out;
}

double dice(const Mask& a, const Mask& b) {
  if (!a.data.same_shape(b.data)) throw Error("dice: grids differ");
  std::int64_t na = 0, nb = 0, ni = 0;
  for (std::int64_t i = 0; i < a.data.numel(); ++i) {
    bool va = a.data[i] > 0.5, vb = b.data[i] > 0.5;
    na += va;
    nb += vb;
    ni += va && vb;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
}

RigidTransform pose_sample(Rng& rng, double max_angle_deg, double max_shift_mm) {
  RigidTransform t;
  std::array<double, 3> ax = rng.unit_vector();
  double angle = rng.uniform(0.0, max_angle_deg) * M_PI / 180.0;
  t.rotation = max_angle_deg > 0.0
                   ? axis_angle(Eigen::Vector3d(ax[0], ax[1], ax[2]), angle)
                   : Eigen::Matrix3d::Identity();
  for (int i = 0; i < 3; ++i)
    t.translation_mm(i) = max_shift_mm > 0.0 ? rng.uniform(-max_shift_mm, max_shift_mm) : 0.0;
  return t;
}

RigidTransform pose_sample(std::uint64_t seed, double max_angle_deg, double max_shift_mm) {
  Rng rng(seed);
  return pose_sample(rng, max_angle_deg, max_shift_mm);
}

RigidTransform about_center(const RigidTransform& t, const Eigen::Vector3d& center) {
  RigidTransform out;
  out.rotation = t.rotation;
  out.translation_mm = center - t.rotation * center + t.translation_mm;
  return out;
}

void save_manifest(const std::string& path, const Manifest& m) {
  nlohmann::json j;
  j["items"] = nlohmann::json::array();
  for (const DatasetItem& it : m.items) {
    nlohmann::json e;
    e["volume_a"] = it.volume_a;
    e["mask_a"] = it.mask_a;
    e["volume_b"] = it.volume_b;
    e["mask_b"] = it.mask_b;
    if (it.transform) e["transform"] = *it.transform;
    j["items"].push_back(e);
  }
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path);
  f << j.dump(2) << "\n";
}

Manifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read " + path);
  nlohmann::json j;
  f >> j;
  Manifest m;
  m.base_dir = std::filesystem::path(path).parent_path().string();
  for (const auto& e : j.at("items")) {
    DatasetItem it;
    it.volume_a = e.at("volume_a").get<std::string>();
    it.mask_a = e.at("mask_a").get<std::string>();
    it.volume_b = e.at("volume_b").get<std::string>();
    it.mask_b = e.at("mask_b").get<std::string>();
    if (e.contains("transform")) it.transform = e.at("transform").get<std::string>();
    m.items.push_back(std::move(it));
  }
  return m;
}

}  // namespace eqtrack
