#include "eqtrack/steerable.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

namespace eqtrack {

int FieldType::channels() const {
  int n = 0;
  for (auto [l, count] : multiplicities) n += count * (2 * l + 1);
  return n;
}

std::vector<int> FieldType::field_orders() const {
  std::vector<int> out;
  for (auto [l, count] : multiplicities)
    for (int i = 0; i < count; ++i) out.push_back(l);
  return out;
}

std::vector<int> FieldType::field_offsets() const {
  std::vector<int> out;
  int c = 0;
  for (int l : field_orders()) {
    out.push_back(c);
    c += 2 * l + 1;
  }
  return out;
}

void ModelConfig::validate() const {
  if (layers.empty()) throw Error("ModelConfig: no layers");
  for (size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& ls = layers[i];
    if (ls.kernel_width % 2 == 0 || ls.kernel_width < 1)
      throw Error("ModelConfig: kernel width must be odd");
    for (auto [l, count] : ls.in_type.multiplicities)
      if (l < 0 || l > 2 || count < 0) throw Error("ModelConfig: field orders are 0..2");
    for (auto [l, count] : ls.out_type.multiplicities)
      if (l < 0 || l > 2 || count < 0) throw Error("ModelConfig: field orders are 0..2");
    if (i + 1 < layers.size() && !(ls.out_type == layers[i + 1].in_type))
      throw Error("ModelConfig: layer " + std::to_string(i) + " output type does not chain");
    if (ls.nonlinearity == Nonlinearity::ScalarRelu) {
      for (auto [l, count] : ls.out_type.multiplicities)
        if (l != 0 && count > 0)
          throw Error("ModelConfig: scalar-relu layer must produce scalar fields only");
    }
  }
  const FieldType& last = layers.back().out_type;
  if (!(last == FieldType::scalars(output_channels)))
    throw Error("ModelConfig: final layer must produce " + std::to_string(output_channels) +
                " scalar fields");
}

ModelConfig ModelConfig::paper_default() {
  ModelConfig c;
  FieldType hidden{{{0, 16}, {1, 16}, {2, 4}}};
  FieldType in = FieldType::scalars(1);
  FieldType out = FieldType::scalars(64);
  c.layers.push_back({in, hidden, 5, Nonlinearity::NormRelu});
  for (int i = 0; i < 3; ++i) c.layers.push_back({hidden, hidden, 5, Nonlinearity::NormRelu});
  c.layers.push_back({hidden, out, 5, Nonlinearity::ScalarRelu});
  c.output_channels = 64;
  return c;
}

ModelConfig ModelConfig::small() {
  ModelConfig c;
  FieldType hidden{{{0, 8}, {1, 8}, {2, 2}}};
  FieldType in = FieldType::scalars(1);
  FieldType out = FieldType::scalars(32);
  c.layers.push_back({in, hidden, 5, Nonlinearity::NormRelu});
  for (int i = 0; i < 2; ++i) c.layers.push_back({hidden, hidden, 5, Nonlinearity::NormRelu});
  c.layers.push_back({hidden, out, 5, Nonlinearity::ScalarRelu});
  c.output_channels = 32;
  return c;
}

ModelConfig ModelConfig::tiny(int kernel_width) {
  ModelConfig c;
  FieldType hidden{{{0, 2}, {1, 1}, {2, 1}}};
  FieldType in = FieldType::scalars(1);
  FieldType out = FieldType::scalars(4);
  c.layers.push_back({in, hidden, kernel_width, Nonlinearity::NormRelu});
  c.layers.push_back({hidden, out, kernel_width, Nonlinearity::ScalarRelu});
  c.output_channels = 4;
  return c;
}

std::string nonlinearity_name(Nonlinearity n) {
  switch (n) {
    case Nonlinearity::ScalarRelu: return "scalar-relu";
    case Nonlinearity::NormRelu: return "norm-relu";
    case Nonlinearity::None: return "none";
  }
  throw Error("bad nonlinearity");
}

Nonlinearity nonlinearity_from_name(const std::string& s) {
  if (s == "scalar-relu") return Nonlinearity::ScalarRelu;
  if (s == "norm-relu") return Nonlinearity::NormRelu;
  if (s == "none") return Nonlinearity::None;
  throw Error("unknown nonlinearity '" + s + "'");
}

SteerableModel::SteerableModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  build_plans();
  init_params(config_.seed);
}

void SteerableModel::build_plans() {
  plans_.clear();
  for (const LayerSpec& ls : config_.layers) {
    LayerPlan plan;
    const int k = ls.kernel_width;
    std::vector<int> in_orders = ls.in_type.field_orders();
    std::vector<int> in_offsets = ls.in_type.field_offsets();
    std::vector<int> out_orders = ls.out_type.field_orders();
    std::vector<int> out_offsets = ls.out_type.field_offsets();
    plan.kernel_shape = {ls.out_type.channels(), ls.in_type.channels(), k, k, k};

    // sampled bases per distinct (l_in, l_out); stable storage for placements
    std::map<std::pair<int, int>, std::vector<std::shared_ptr<Tensor>>> bases;
    for (int li : std::vector<int>(in_orders.begin(), in_orders.end()))
      for (int lo : std::vector<int>(out_orders.begin(), out_orders.end())) {
        auto key = std::make_pair(li, lo);
        if (bases.count(key)) continue;
        std::vector<std::shared_ptr<Tensor>> elems;
        for (KernelBasis& kb : build_kernel_basis(li, lo, k))
          elems.push_back(std::make_shared<Tensor>(std::move(kb.samples)));
        bases.emplace(key, std::move(elems));
      }

    auto placements = std::make_shared<std::vector<KernelPlacement>>();
    plan.fan_in.assign(out_orders.size(), 0);
    int widx = 0;
    for (size_t fo = 0; fo < out_orders.size(); ++fo) {
      for (size_t fi = 0; fi < in_orders.size(); ++fi) {
        const auto& elems = bases.at({in_orders[fi], out_orders[fo]});
        for (const auto& basis : elems) {
          plan.basis_store.push_back(basis);
          placements->push_back(KernelPlacement{widx++, out_offsets[fo], in_offsets[fi],
                                                plan.basis_store.back().get()});
          plan.fan_in[fo]++;
        }
      }
      if (ls.nonlinearity == Nonlinearity::NormRelu && out_orders[fo] >= 1)
        plan.bias_fields.push_back(static_cast<int>(fo));
    }
    plan.n_weights = widx;
    plan.placements = placements;
    plans_.push_back(std::move(plan));
  }
}

void SteerableModel::init_params(std::uint64_t seed) {
  params_.layers.clear();
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  for (size_t li = 0; li < plans_.size(); ++li) {
    const LayerPlan& plan = plans_[li];
    LayerParams lp;
    lp.weights = Tensor({std::max(plan.n_weights, 1)});
    std::vector<int> out_orders = config_.layers[li].out_type.field_orders();
    std::vector<int> out_offsets = config_.layers[li].out_type.field_offsets();
    for (const KernelPlacement& p : *plan.placements) {
      int fo = 0;
      for (size_t f = 0; f < out_offsets.size(); ++f)
        if (out_offsets[f] == p.out_channel0) fo = static_cast<int>(f);
      double stddev = 1.0 / std::sqrt(static_cast<double>(std::max(plan.fan_in[fo], 1)));
      lp.weights[p.weight_index] = stddev * rng.normal();
    }
    if (!plan.bias_fields.empty())
      lp.biases = Tensor({static_cast<int>(plan.bias_fields.size())});
    params_.layers.push_back(std::move(lp));
  }
}

int SteerableModel::num_weights(int layer) const { return plans_[static_cast<size_t>(layer)].n_weights; }

int SteerableModel::num_biases(int layer) const {
  return static_cast<int>(plans_[static_cast<size_t>(layer)].bias_fields.size());
}

std::int64_t SteerableModel::parameter_count() const {
  std::int64_t n = 0;
  for (size_t i = 0; i < plans_.size(); ++i)
    n += plans_[i].n_weights + static_cast<std::int64_t>(plans_[i].bias_fields.size());
  return n;
}

SteerableModel::ParamNodes SteerableModel::make_param_nodes(Graph& g) const {
  ParamNodes out;
  for (size_t li = 0; li < plans_.size(); ++li) {
    out.weights.push_back(g.param(params_.layers[li].weights));
    out.biases.push_back(plans_[li].bias_fields.empty() ? Value{}
                                                        : g.param(params_.layers[li].biases));
  }
  return out;
}

SteerableModel::ForwardResult SteerableModel::forward(Graph& g, Value image,
                                                      bool keep_layers) const {
  return forward(g, image, make_param_nodes(g), keep_layers);
}

SteerableModel::ForwardResult SteerableModel::forward(Graph& g, Value image,
                                                      const ParamNodes& pn,
                                                      bool keep_layers) const {
  ForwardResult result;
  Value x = image;
  if (x.val().rank() != 4 || x.val().dim(0) != config_.layers.front().in_type.channels())
    throw Error("forward: image must be [" +
                std::to_string(config_.layers.front().in_type.channels()) + ",D,H,W]");
  for (size_t li = 0; li < config_.layers.size(); ++li) {
    const LayerSpec& ls = config_.layers[li];
    const LayerPlan& plan = plans_[li];

    Value kernel = g.assemble_kernel(pn.weights[li], plan.kernel_shape, plan.placements);
    Value y = g.conv3d(x, kernel);
    Value biases = pn.biases[li];

    switch (ls.nonlinearity) {
      case Nonlinearity::None:
        break;
      case Nonlinearity::ScalarRelu:
        y = g.relu(y);
        break;
      case Nonlinearity::NormRelu: {
        std::vector<int> orders = ls.out_type.field_orders();
        std::vector<int> offsets = ls.out_type.field_offsets();
        std::vector<Value> parts;
        size_t f = 0;
        int bias_idx = 0;
        while (f < orders.size()) {
          if (orders[f] == 0) {
            // scalar fields are consecutive; one relu over the whole run
            size_t f2 = f;
            while (f2 < orders.size() && orders[f2] == 0) ++f2;
            int c0 = offsets[f];
            int c1 = f2 < orders.size() ? offsets[f2] : ls.out_type.channels();
            parts.push_back(g.relu(g.slice0(y, c0, c1)));
            f = f2;
          } else {
            int l = orders[f];
            Value field = g.slice0(y, offsets[f], offsets[f] + 2 * l + 1);
            Value b = g.slice0(biases, bias_idx, bias_idx + 1);
            ++bias_idx;
            parts.push_back(g.norm_relu(field, b));
            ++f;
          }
        }
        y = parts.size() == 1 ? parts[0] : g.concat0(parts);
        break;
      }
    }
    if (keep_layers) result.layer_outputs.push_back(y);
    x = y;
  }
  result.output = x;
  return result;
}

namespace {
std::uint64_t fnv1a(const void* data, size_t n, std::uint64_t h) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}
}  // namespace

std::string SteerableModel::basis_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const LayerPlan& plan : plans_) {
    for (int d : plan.kernel_shape) h = fnv1a(&d, sizeof(d), h);
    for (const auto& basis : plan.basis_store)
      h = fnv1a(basis->data(), static_cast<size_t>(basis->numel()) * sizeof(double), h);
  }
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void SteerableModel::corrupt_basis_for_test(double factor) {
  for (LayerPlan& plan : plans_) {
    for (auto& basis : plan.basis_store) {
      for (std::int64_t i = 0; i < basis->numel(); ++i) {
        if (std::fabs((*basis)[i]) > 1e-6) {
          (*basis)[i] *= factor;
          return;
        }
      }
    }
  }
}

namespace {

nlohmann::json field_type_to_json(const FieldType& t) {
  nlohmann::json j = nlohmann::json::object();
  for (auto [l, count] : t.multiplicities)
    if (count > 0) j[std::to_string(l)] = count;
  return j;
}

FieldType field_type_from_json(const nlohmann::json& j) {
  FieldType t;
  for (auto it = j.begin(); it != j.end(); ++it)
    t.multiplicities[std::stoi(it.key())] = it.value().get<int>();
  return t;
}

}  // namespace

void SteerableModel::save_checkpoint(const std::string& path) const {
  nlohmann::json j;
  j["format"] = "eqtrack-checkpoint";
  j["version"] = 1;
  nlohmann::json cfg;
  cfg["output_channels"] = config_.output_channels;
  cfg["seed"] = config_.seed;
  cfg["layers"] = nlohmann::json::array();
  for (const LayerSpec& ls : config_.layers) {
    nlohmann::json lj;
    lj["in"] = field_type_to_json(ls.in_type);
    lj["out"] = field_type_to_json(ls.out_type);
    lj["kernel_width"] = ls.kernel_width;
    lj["nonlinearity"] = nonlinearity_name(ls.nonlinearity);
    cfg["layers"].push_back(lj);
  }
  j["config"] = cfg;
  j["basis_hash"] = basis_hash();
  j["params"] = nlohmann::json::array();
  for (size_t li = 0; li < params_.layers.size(); ++li) {
    const LayerParams& lp = params_.layers[li];
    nlohmann::json pj;
    pj["weights"] = nlohmann::json::array();
    for (int i = 0; i < plans_[li].n_weights; ++i) pj["weights"].push_back(lp.weights[i]);
    pj["biases"] = nlohmann::json::array();
    for (int i = 0; i < num_biases(static_cast<int>(li)); ++i) pj["biases"].push_back(lp.biases[i]);
    j["params"].push_back(pj);
  }
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path);
  f << j.dump(2) << "\n";
}

SteerableModel SteerableModel::load_checkpoint(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read " + path);
  nlohmann::json j;
  f >> j;
  if (j.at("format").get<std::string>() != "eqtrack-checkpoint")
    throw Error("not a checkpoint file: " + path);
  ModelConfig cfg;
  cfg.output_channels = j.at("config").at("output_channels").get<int>();
  cfg.seed = j.at("config").at("seed").get<std::uint64_t>();
  for (const auto& lj : j.at("config").at("layers")) {
    LayerSpec ls;
    ls.in_type = field_type_from_json(lj.at("in"));
    ls.out_type = field_type_from_json(lj.at("out"));
    ls.kernel_width = lj.at("kernel_width").get<int>();
    ls.nonlinearity = nonlinearity_from_name(lj.at("nonlinearity").get<std::string>());
    cfg.layers.push_back(std::move(ls));
  }
  SteerableModel model(cfg);
  std::string hash = j.at("basis_hash").get<std::string>();
  if (hash != model.basis_hash())
    throw Error("checkpoint basis hash " + hash + " does not match this build (" +
                model.basis_hash() + ")");
  const auto& pj = j.at("params");
  if (pj.size() != model.params_.layers.size()) throw Error("checkpoint layer count mismatch");
  for (size_t li = 0; li < pj.size(); ++li) {
    const auto& wj = pj.at(li).at("weights");
    if (static_cast<int>(wj.size()) != model.plans_[li].n_weights)
      throw Error("checkpoint weight count mismatch at layer " + std::to_string(li));
    for (size_t i = 0; i < wj.size(); ++i)
      model.params_.layers[li].weights[static_cast<std::int64_t>(i)] = wj.at(i).get<double>();
    const auto& bj = pj.at(li).at("biases");
    if (static_cast<int>(bj.size()) != model.num_biases(static_cast<int>(li)))
      throw Error("checkpoint bias count mismatch at layer " + std::to_string(li));
    for (size_t i = 0; i < bj.size(); ++i)
      model.params_.layers[li].biases[static_cast<std::int64_t>(i)] = bj.at(i).get<double>();
  }
  return model;
}

// ------------------------------------------------------- field map rotation

namespace {

// spatial-only exact rotation of one channel about the grid center
void rotate_channel_exact(const double* src, double* dst, int d, int h, int w,
                          const Eigen::Matrix3d& r) {
  double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0, cz = (d - 1) / 2.0;
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        Eigen::Vector3d p(x - cx, y - cy, z - cz);
        Eigen::Vector3d q = r.transpose() * p;
        int sx = static_cast<int>(std::llround(q(0) + cx));
        int sy = static_cast<int>(std::llround(q(1) + cy));
        int sz = static_cast<int>(std::llround(q(2) + cz));
        dst[(static_cast<std::int64_t>(z) * h + y) * w + x] =
            (sx < 0 || sy < 0 || sz < 0 || sx >= w || sy >= h || sz >= d)
                ? 0.0
                : src[(static_cast<std::int64_t>(sz) * h + sy) * w + sx];
      }
}

void rotate_channel_trilinear(const double* src, double* dst, int d, int h, int w,
                              const Eigen::Matrix3d& r) {
  double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0, cz = (d - 1) / 2.0;
  auto sample = [&](double fx, double fy, double fz) -> double {
    int x0 = static_cast<int>(std::floor(fx));
    int y0 = static_cast<int>(std::floor(fy));
    int z0 = static_cast<int>(std::floor(fz));
    double tx = fx - x0, ty = fy - y0, tz = fz - z0;
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          int x = x0 + dx, y = y0 + dy, z = z0 + dz;
          if (x < 0 || y < 0 || z < 0 || x >= w || y >= h || z >= d) continue;
          acc += (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz) *
                 src[(static_cast<std::int64_t>(z) * h + y) * w + x];
        }
    return acc;
  };
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        Eigen::Vector3d p(x - cx, y - cy, z - cz);
        Eigen::Vector3d q = r.transpose() * p;
        dst[(static_cast<std::int64_t>(z) * h + y) * w + x] =
            sample(q(0) + cx, q(1) + cy, q(2) + cz);
      }
}

template <class RotChannel>
Tensor rotate_field_map_impl(const Tensor& chans, const FieldType& type,
                             const Eigen::Matrix3d& r, RotChannel&& rot_channel) {
  if (chans.rank() != 4 || chans.dim(0) != type.channels())
    throw Error("rotate_field_map: channel layout mismatch");
  const int d = chans.dim(1), h = chans.dim(2), w = chans.dim(3);
  const std::int64_t vol = static_cast<std::int64_t>(d) * h * w;
  Tensor spatial(chans.shape());
  for (int c = 0; c < chans.dim(0); ++c)
    rot_channel(chans.data() + c * vol, spatial.data() + c * vol, d, h, w, r);
  // Wigner mixing per field
  Tensor out(chans.shape());
  std::vector<int> orders = type.field_orders();
  std::vector<int> offsets = type.field_offsets();
  for (size_t f = 0; f < orders.size(); ++f) {
    int l = orders[f], c0 = offsets[f];
    if (l == 0) {
      const double* src = spatial.data() + static_cast<std::int64_t>(c0) * vol;
      double* dst = out.data() + static_cast<std::int64_t>(c0) * vol;
      for (std::int64_t i = 0; i < vol; ++i) dst[i] = src[i];
      continue;
    }
    Eigen::MatrixXd D = wigner_d_real(l, r);
    int dim = 2 * l + 1;
    for (int a = 0; a < dim; ++a) {
      double* dst = out.data() + static_cast<std::int64_t>(c0 + a) * vol;
      for (int b = 0; b < dim; ++b) {
        double coef = D(a, b);
        const double* src = spatial.data() + static_cast<std::int64_t>(c0 + b) * vol;
        for (std::int64_t i = 0; i < vol; ++i) dst[i] += coef * src[i];
      }
    }
  }
  return out;
}

}  // namespace

Tensor rotate_field_map_exact(const Tensor& chans, const FieldType& type,
                              const Eigen::Matrix3d& r) {
  return rotate_field_map_impl(chans, type, r, rotate_channel_exact);
}

Tensor rotate_field_map_trilinear(const Tensor& chans, const FieldType& type,
                                  const Eigen::Matrix3d& r) {
  return rotate_field_map_impl(chans, type, r, rotate_channel_trilinear);
}

Tensor shift_field_map(const Tensor& chans, int sx, int sy, int sz) {
  if (chans.rank() != 4) throw Error("shift_field_map: need [C,D,H,W]");
  const int d = chans.dim(1), h = chans.dim(2), w = chans.dim(3);
  const std::int64_t vol = static_cast<std::int64_t>(d) * h * w;
  Tensor out(chans.shape());
  for (int c = 0; c < chans.dim(0); ++c) {
    const double* src = chans.data() + c * vol;
    double* dst = out.data() + c * vol;
    for (int z = 0; z < d; ++z)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          int px = x - sx, py = y - sy, pz = z - sz;
          dst[(static_cast<std::int64_t>(z) * h + y) * w + x] =
              (px < 0 || py < 0 || pz < 0 || px >= w || py >= h || pz >= d)
                  ? 0.0
                  : src[(static_cast<std::int64_t>(pz) * h + py) * w + px];
        }
  }
  return out;
}

}  // namespace eqtrack
