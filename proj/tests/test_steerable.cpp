#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "eqtrack/conv3d.hpp"
#include "eqtrack/steerable.hpp"
#include "eqtrack/volume.hpp"
#include "test_utils.hpp"

using namespace eqtrack;
using namespace eqtrack::testutil;

namespace {

double rel_l2(const Tensor& a, const Tensor& b) {
  double num = 0, den = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return den < 1e-30 ? std::sqrt(num) : std::sqrt(num / den);
}

}  // namespace

TEST_CASE("field type channel bookkeeping") {
  FieldType t{{{0, 16}, {1, 16}, {2, 4}}};
  CHECK(t.channels() == 16 + 48 + 20);
  auto orders = t.field_orders();
  CHECK(orders.size() == 36);
  CHECK(orders.front() == 0);
  CHECK(orders.back() == 2);
  auto offsets = t.field_offsets();
  CHECK(offsets[16] == 16);  // first vector field starts after the scalars
  CHECK(offsets.back() == 16 + 48 + 15);
}

TEST_CASE("config validation catches mismatches") {
  ModelConfig c = ModelConfig::paper_default();
  c.validate();
  ModelConfig bad = c;
  bad.layers[1].in_type = FieldType::scalars(3);
  CHECK_THROWS_AS(bad.validate(), Error);
  ModelConfig bad2 = c;
  bad2.layers[0].kernel_width = 4;
  CHECK_THROWS_AS(bad2.validate(), Error);
  ModelConfig bad3 = c;
  bad3.output_channels = 63;
  CHECK_THROWS_AS(bad3.validate(), Error);
  ModelConfig bad4 = c;
  bad4.layers[0].nonlinearity = Nonlinearity::ScalarRelu;  // non-scalar out fields
  CHECK_THROWS_AS(bad4.validate(), Error);
}

TEST_CASE("default config matches the published architecture") {
  ModelConfig c = ModelConfig::paper_default();
  CHECK(c.layers.size() == 5);
  for (const LayerSpec& ls : c.layers) CHECK(ls.kernel_width == 5);
  FieldType hidden{{{0, 16}, {1, 16}, {2, 4}}};
  CHECK(c.layers[1].in_type == hidden);
  CHECK(c.layers[3].out_type == hidden);
  CHECK(c.output_channels == 64);
  CHECK(c.layers.back().out_type == FieldType::scalars(64));
}

TEST_CASE("zero weights give zero output") {
  ModelConfig cfg = ModelConfig::tiny(3);
  SteerableModel model(cfg);
  for (auto& lp : model.params().layers)
    for (std::int64_t i = 0; i < lp.weights.numel(); ++i) lp.weights[i] = 0.0;
  Graph g;
  Rng rng(1);
  Value img = g.constant(random_tensor({1, 10, 10, 10}, rng, 0, 1));
  auto fwd = model.forward(g, img);
  CHECK(fwd.output.val().max_abs() == 0.0);
}

TEST_CASE("single isotropic basis element with weight 1 is a plain blur") {
  // one scalar->scalar layer, weight 1 on one basis element: steerable_conv
  // must equal conv3d with that sampled kernel
  ModelConfig cfg;
  cfg.layers.push_back({FieldType::scalars(1), FieldType::scalars(1), 3, Nonlinearity::None});
  cfg.output_channels = 1;
  SteerableModel model(cfg);
  auto basis = build_kernel_basis(0, 0, 3);
  REQUIRE(model.num_weights(0) == static_cast<int>(basis.size()));
  for (std::int64_t i = 0; i < model.params().layers[0].weights.numel(); ++i)
    model.params().layers[0].weights[i] = 0.0;
  model.params().layers[0].weights[1] = 1.0;  // shell-1 element
  Rng rng(2);
  Tensor img = random_tensor({1, 9, 9, 9}, rng, 0, 1);
  Graph g;
  auto fwd = model.forward(g, g.constant(img));
  Tensor kernel({1, 1, 3, 3, 3});
  for (std::int64_t i = 0; i < kernel.numel(); ++i) kernel[i] = basis[1].samples[i];
  Tensor expect = conv3d_forward(img, kernel);
  CHECK(max_abs_diff(fwd.output.val(), expect) < 1e-14);
}

TEST_CASE("norm_relu examples") {
  Graph g;
  SUBCASE("zero field stays zero") {
    Value f = g.constant(Tensor({3, 2, 2, 2}));
    Value out = g.norm_relu(f, g.constant(Tensor::scalar(-0.5)));
    CHECK(out.val().max_abs() == 0.0);
  }
  SUBCASE("|v|=2 with bias -1 halves the field") {
    Tensor f({3, 1, 1, 1});
    f[0] = 2.0;  // vector (2,0,0), norm 2
    Value out = g.norm_relu(g.constant(f), g.constant(Tensor::scalar(-1.0)));
    CHECK(out.val()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(out.val()[1] == 0.0);
  }
  SUBCASE("negative norm plus bias clamps to zero") {
    Tensor f({3, 1, 1, 1});
    f[1] = 0.3;
    Value out = g.norm_relu(g.constant(f), g.constant(Tensor::scalar(-1.0)));
    CHECK(out.val().max_abs() == 0.0);
  }
}

TEST_CASE("norm_relu commutes with component rotation") {
  // depends only on |v|: rotating components before equals rotating after
  Rng rng(3);
  for (int l : {1, 2}) {
    int d = 2 * l + 1;
    Tensor f = random_tensor({d, 3, 3, 3}, rng);
    Eigen::MatrixXd rot = wigner_d_real(l, random_rotation(rng));
    Tensor f_rot({d, 27});
    Tensor f_flat = f.reshaped({d, 27});
    for (int a = 0; a < d; ++a)
      for (std::int64_t p = 0; p < 27; ++p) {
        double acc = 0;
        for (int b = 0; b < d; ++b) acc += rot(a, b) * f_flat[b * 27 + p];
        f_rot[a * 27 + p] = acc;
      }
    Graph g;
    Value bias = g.constant(Tensor::scalar(-0.2));
    Tensor out1 = g.norm_relu(g.constant(f_rot.reshaped({d, 3, 3, 3})), bias).val();
    Tensor out2t = g.norm_relu(g.constant(f), bias).val().reshaped({d, 27});
    Tensor out2({d, 27});
    for (int a = 0; a < d; ++a)
      for (std::int64_t p = 0; p < 27; ++p) {
        double acc = 0;
        for (int b = 0; b < d; ++b) acc += rot(a, b) * out2t[b * 27 + p];
        out2[a * 27 + p] = acc;
      }
    CHECK(max_abs_diff(out1.reshaped({d, 27}), out2) < 1e-12);
  }
}

TEST_CASE("forward yields K non-negative channels of the input shape") {
  ModelConfig cfg = ModelConfig::tiny(3);
  cfg.seed = 4;
  SteerableModel model(cfg);
  auto [phantom, mask] = make_phantom(11, 16);
  Graph g;
  auto fwd = model.forward(g, g.constant(phantom.data.reshaped({1, 16, 16, 16})));
  const Tensor& out = fwd.output.val();
  REQUIRE(out.rank() == 4);
  CHECK(out.dim(0) == cfg.output_channels);
  CHECK(out.dim(1) == 16);
  double lo = 1e30;
  for (std::int64_t i = 0; i < out.numel(); ++i) lo = std::min(lo, out[i]);
  CHECK(lo >= 0.0);

  Tensor zero({1, 16, 16, 16});
  auto fwd0 = model.forward(g, g.constant(zero));
  CHECK(fwd0.output.val().max_abs() == 0.0);
}

TEST_CASE("forward is positively homogeneous with zero biases") {
  ModelConfig cfg = ModelConfig::tiny(3);
  cfg.seed = 5;
  SteerableModel model(cfg);  // biases start at zero
  Rng rng(6);
  Tensor img = random_tensor({1, 12, 12, 12}, rng, 0, 1);
  Tensor img3(img.shape());
  for (std::int64_t i = 0; i < img.numel(); ++i) img3[i] = 3.0 * img[i];
  Graph g;
  Tensor out1 = model.forward(g, g.constant(img)).output.val();
  Tensor out3 = model.forward(g, g.constant(img3)).output.val();
  for (std::int64_t i = 0; i < out1.numel(); ++i)
    CHECK(out3[i] == doctest::Approx(3.0 * out1[i]).epsilon(1e-9));
}

TEST_CASE("octahedral equivariance of each layer, small model at 16^3") {
  ModelConfig cfg = ModelConfig::tiny(3);
  cfg.seed = 7;
  SteerableModel model(cfg);
  for (auto& lp : model.params().layers)
    for (std::int64_t i = 0; i < lp.biases.numel(); ++i) lp.biases[i] = -0.05;
  auto [phantom, mask] = make_phantom(13, 16, PhantomKind::Blobs, 1.0);
  Graph g0;
  auto base = model.forward(g0, g0.constant(phantom.data.reshaped({1, 16, 16, 16})), true);
  double worst = 0.0;
  for (const Eigen::Matrix3d& r : octahedral_rotations()) {
    Volume rot = rotate_grid_exact(phantom, r);
    Graph g;
    auto got = model.forward(g, g.constant(rot.data.reshaped({1, 16, 16, 16})), true);
    for (size_t li = 0; li < cfg.layers.size(); ++li) {
      Tensor ref = rotate_field_map_exact(base.layer_outputs[li].val(),
                                          cfg.layers[li].out_type, r);
      worst = std::max(worst, rel_l2(got.layer_outputs[li].val(), ref));
    }
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("parameter count is reported and far below a dense head") {
  SteerableModel model(ModelConfig::paper_default());
  std::int64_t n = model.parameter_count();
  CHECK(n > 1000);
  // a single 1024-unit fully connected layer on flattened 64-channel 12^3
  // features
  std::int64_t dense = 1024LL * 64 * 12 * 12 * 12;
  CHECK(n < dense);
  MESSAGE("default model parameters: ", n, " vs dense layer: ", dense);
}

TEST_CASE("checkpoint round-trip preserves params and validates basis hash") {
  ModelConfig cfg = ModelConfig::tiny(3);
  cfg.seed = 8;
  SteerableModel model(cfg);
  std::filesystem::create_directories("/tmp/eqtrack_test_ckpt");
  const std::string path = "/tmp/eqtrack_test_ckpt/model.json";
  model.save_checkpoint(path);
  SteerableModel loaded = SteerableModel::load_checkpoint(path);
  CHECK(loaded.config().layers.size() == cfg.layers.size());
  for (size_t li = 0; li < model.params().layers.size(); ++li) {
    const Tensor& a = model.params().layers[li].weights;
    const Tensor& b = loaded.params().layers[li].weights;
    for (int i = 0; i < model.num_weights(static_cast<int>(li)); ++i) CHECK(a[i] == b[i]);
  }
  // saving the loaded model reproduces the file byte-for-byte
  const std::string path2 = "/tmp/eqtrack_test_ckpt/model2.json";
  loaded.save_checkpoint(path2);
  std::ifstream f1(path), f2(path2);
  std::string s1((std::istreambuf_iterator<char>(f1)), {});
  std::string s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);

  // tampering with the basis hash must be rejected
  std::string tampered = s1;
  auto pos = tampered.find("\"basis_hash\": \"");
  REQUIRE(pos != std::string::npos);
  tampered[pos + 15] = tampered[pos + 15] == '0' ? '1' : '0';
  std::ofstream bad("/tmp/eqtrack_test_ckpt/bad.json");
  bad << tampered;
  bad.close();
  CHECK_THROWS_AS(SteerableModel::load_checkpoint("/tmp/eqtrack_test_ckpt/bad.json"), Error);
}

TEST_CASE("init is deterministic in the seed") {
  ModelConfig cfg = ModelConfig::tiny(3);
  cfg.seed = 9;
  SteerableModel a(cfg), b(cfg);
  for (size_t li = 0; li < a.params().layers.size(); ++li)
    for (int i = 0; i < a.num_weights(static_cast<int>(li)); ++i)
      CHECK(a.params().layers[li].weights[i] == b.params().layers[li].weights[i]);
  SteerableModel c(cfg);
  c.init_params(10);
  bool same = true;
  for (size_t li = 0; li < a.params().layers.size(); ++li)
    for (int i = 0; i < a.num_weights(static_cast<int>(li)); ++i)
      same = same && a.params().layers[li].weights[i] == c.params().layers[li].weights[i];
  CHECK(!same);
}
