#include "eqtrack/commands.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace eqtrack {

namespace fs = std::filesystem;

ModelConfig named_model_config(const std::string& name) {
  if (name == "default") return ModelConfig::paper_default();
  if (name == "small") return ModelConfig::small();
  if (name == "tiny") return ModelConfig::tiny();
  throw Error("unknown model config '" + name + "' (default|small|tiny)");
}

// --------------------------------------------------------------- gen-data

int cmd_gen_data(const GenDataOptions& opt) {
  if (opt.out_dir.empty()) throw Error("gen-data: --out is required");
  PhantomKind kind;
  if (opt.kind == "blobs")
    kind = PhantomKind::Blobs;
  else if (opt.kind == "ellipsoids")
    kind = PhantomKind::Ellipsoids;
  else
    throw Error("gen-data: kind must be blobs or ellipsoids");
  fs::create_directories(opt.out_dir);
  Manifest manifest;
  for (int i = 0; i < opt.count; ++i) {
    std::uint64_t phantom_seed = opt.seed * 1000003ull + static_cast<std::uint64_t>(i);
    auto [vol, mask] = make_phantom(phantom_seed, opt.size, kind, opt.voxel_size_mm);
    RigidTransform pose = pose_sample(phantom_seed ^ 0x5bf03635ull, opt.max_angle_deg,
                                      opt.max_shift_mm);
    RigidTransform t = about_center(pose, vol.world_center());
    Volume vol_b = warp_volume(vol, t);
    Mask mask_b = warp_mask(mask, t);

    char stem[64];
    std::snprintf(stem, sizeof(stem), "pair_%04d", i);
    DatasetItem item;
    item.volume_a = std::string(stem) + "_a.json";
    item.mask_a = std::string(stem) + "_a_mask.json";
    item.volume_b = std::string(stem) + "_b.json";
    item.mask_b = std::string(stem) + "_b_mask.json";
    item.transform = std::string(stem) + "_transform.json";
    save_volume((fs::path(opt.out_dir) / item.volume_a).string(), vol);
    save_mask((fs::path(opt.out_dir) / item.mask_a).string(), mask);
    save_volume((fs::path(opt.out_dir) / item.volume_b).string(), vol_b);
    save_mask((fs::path(opt.out_dir) / item.mask_b).string(), mask_b);
    save_transform_json((fs::path(opt.out_dir) / *item.transform).string(), t);
    manifest.items.push_back(std::move(item));
  }
  save_manifest((fs::path(opt.out_dir) / "manifest.json").string(), manifest);
  std::printf("wrote %d pairs to %s\n", opt.count, opt.out_dir.c_str());
  return kExitOk;
}

// ------------------------------------------------------------------- train

namespace {

struct LoadedItem {
  Volume a, b;
  Mask mask_a, mask_b;
  RigidTransform truth;
  bool has_truth = false;
};

std::vector<LoadedItem> load_items(const std::string& manifest_path, bool need_masks) {
  Manifest m = load_manifest(manifest_path);
  std::vector<LoadedItem> items;
  for (const DatasetItem& it : m.items) {
    LoadedItem li;
    auto full = [&](const std::string& rel) { return (fs::path(m.base_dir) / rel).string(); };
    li.a = load_volume(full(it.volume_a));
    li.b = load_volume(full(it.volume_b));
    if (need_masks) {
      li.mask_a = load_mask(full(it.mask_a));
      li.mask_b = load_mask(full(it.mask_b));
    }
    if (it.transform) {
      li.truth = load_transform_json(full(*it.transform));
      li.has_truth = true;
    }
    items.push_back(std::move(li));
  }
  if (items.empty()) throw Error("manifest has no items: " + manifest_path);
  return items;
}

struct AdamState {
  std::vector<Tensor> m, v;
  int step = 0;
};

void adam_update(AdamState& state, std::vector<Tensor*> params,
                 const std::vector<const Tensor*>& grads, const TrainOptions& opt) {
  if (state.m.empty()) {
    for (Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  state.step++;
  double b1 = opt.adam_beta1, b2 = opt.adam_beta2;
  double bc1 = 1.0 - std::pow(b1, state.step);
  double bc2 = 1.0 - std::pow(b2, state.step);
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::int64_t j = 0; j < p.numel(); ++j) {
      double gj = grads[i] && grads[i]->numel() == p.numel() ? (*grads[i])[j] : 0.0;
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      p[j] -= opt.learning_rate * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opt.adam_eps);
    }
  }
}

Value pose_loss(Graph& g, const TrainOptions& opt, TrackGraph& tg, const LoadedItem& item) {
  if (opt.loss == "image") return loss_image_taped(g, tg.rotation, tg.translation, item.a, item.b);
  if (!item.has_truth) throw Error("train: manifest item lacks a true transform");
  if (opt.loss == "l2") return loss_l2_taped(g, tg.rotation, tg.translation, item.truth);
  if (opt.loss == "geo") return loss_geodesic_taped(g, tg.rotation, item.truth.rotation);
  if (opt.loss == "6d") return loss_6d_taped(g, tg.rotation, item.truth.rotation);
  throw Error("train: unknown loss '" + opt.loss + "'");
}

double eval_loss(const SteerableModel& model, const TrainOptions& opt, const LoadedItem& item) {
  TrackResult tr = track(model, item.a, item.b);
  if (opt.loss == "image") return loss_image(tr.transform, item.a, item.b);
  if (opt.loss == "l2") return loss_l2(tr.transform, item.truth);
  if (opt.loss == "geo") return loss_geodesic(tr.transform.rotation, item.truth.rotation);
  if (opt.loss == "6d") return loss_6d(tr.transform.rotation, item.truth.rotation);
  throw Error("train: unknown loss '" + opt.loss + "'");
}

}  // namespace

TrainRun train_model(SteerableModel& model, const TrainOptions& opt) {
  std::vector<LoadedItem> items = load_items(opt.manifest, false);
  std::vector<LoadedItem> val_items;
  if (!opt.val_manifest.empty()) val_items = load_items(opt.val_manifest, false);

  fs::create_directories(opt.out_dir);
  std::ofstream log((fs::path(opt.out_dir) / "metrics.jsonl").string());
  if (!log) throw Error("cannot write metrics log in " + opt.out_dir);

  TrainRun run;
  AdamState adam;
  double best_val = std::numeric_limits<double>::infinity();
  ModelParams best_params = model.params();
  const std::string best_path = (fs::path(opt.out_dir) / "checkpoint_best.json").string();
  const std::string final_path = (fs::path(opt.out_dir) / "checkpoint_final.json").string();

  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    double train_loss = 0.0;
    for (const LoadedItem& item : items) {
      Graph g;
      TrackGraph tg = track_taped(g, model, item.a, item.b);
      Value loss = pose_loss(g, opt, tg, item);
      double lv = loss.val()[0];
      if (!std::isfinite(lv)) {
        std::ofstream dump((fs::path(opt.out_dir) / "nan_dump.json").string());
        dump << diagnostics_json(tg.diagnostics) << "\n";
        throw Error("train: non-finite loss at epoch " + std::to_string(epoch) +
                    " (diagnostics dumped)");
      }
      train_loss += lv;
      g.backward(loss);
      std::vector<Tensor*> params;
      std::vector<const Tensor*> grads;
      for (size_t li = 0; li < model.params().layers.size(); ++li) {
        params.push_back(&model.params().layers[li].weights);
        grads.push_back(&tg.params.weights[li].grad());
        if (model.num_biases(static_cast<int>(li)) > 0) {
          params.push_back(&model.params().layers[li].biases);
          grads.push_back(&tg.params.biases[li].grad());
        }
      }
      adam_update(adam, params, grads, opt);
    }
    train_loss /= static_cast<double>(items.size());

    double val_loss = train_loss;
    if (!val_items.empty()) {
      val_loss = 0.0;
      for (const LoadedItem& item : val_items) val_loss += eval_loss(model, opt, item);
      val_loss /= static_cast<double>(val_items.size());
    }
    run.train_losses.push_back(train_loss);
    run.val_losses.push_back(val_loss);
    if (val_loss < best_val) {
      best_val = val_loss;
      best_params = model.params();
      run.best_epoch = epoch;
    }
    char line[160];
    std::snprintf(line, sizeof(line), "{\"epoch\":%d,\"train_loss\":%.17g,\"val_loss\":%.17g}",
                  epoch, train_loss, val_loss);
    log << line << "\n";
    log.flush();
  }

  ModelParams final_params = model.params();
  model.params() = best_params;
  model.save_checkpoint(best_path);
  model.params() = final_params;
  model.save_checkpoint(final_path);
  model.params() = best_params;  // hand back the retained parameters
  return run;
}

int cmd_train(const TrainOptions& opt) {
  SteerableModel model = opt.init_checkpoint.empty()
                             ? SteerableModel([&] {
                                 ModelConfig c = named_model_config(opt.model);
                                 c.seed = opt.seed;
                                 return c;
                               }())
                             : SteerableModel::load_checkpoint(opt.init_checkpoint);
  if (opt.epochs < 0) throw Error("train: epochs must be >= 0");
  if (opt.learning_rate <= 0.0) throw Error("train: learning rate must be positive");
  TrainRun run = train_model(model, opt);
  if (!run.train_losses.empty())
    std::printf("trained %d epochs: first loss %.6g, last loss %.6g (best epoch %d)\n",
                static_cast<int>(run.train_losses.size()), run.train_losses.front(),
                run.train_losses.back(), run.best_epoch);
  else
    std::printf("no epochs requested; checkpoints written unchanged\n");
  return kExitOk;
}

// ------------------------------------------------------------------- track

int cmd_track(const TrackOptions& opt) {
  SteerableModel model = SteerableModel::load_checkpoint(opt.checkpoint);
  Volume moving = load_volume(opt.moving);
  Volume reference = load_volume(opt.reference);
  TrackResult tr = track(model, moving, reference);
  save_transform_json(opt.out, tr.transform);
  if (!opt.diagnostics.empty()) {
    std::ofstream f(opt.diagnostics);
    f << diagnostics_json(tr.diagnostics) << "\n";
  }
  std::printf("residual %.6g, condition %.3g\n", tr.diagnostics.residual,
              tr.diagnostics.condition);
  return kExitOk;
}

// -------------------------------------------------------------------- eval

EvalMetrics evaluate_pair(const SteerableModel& model, const Volume& a, const Mask& ma,
                          const Volume& b, const Mask& mb, const RigidTransform* truth) {
  TrackResult tr = track(model, a, b);
  EvalMetrics m;
  m.dice_index = dice(warp_mask(ma, tr.transform), mb);
  if (truth) {
    m.has_truth = true;
    m.euler_mae_deg = euler_mae_deg(tr.transform.rotation, truth->rotation);
    m.rotation_frobenius =
        (Eigen::Matrix3d::Identity() - truth->rotation * tr.transform.rotation.transpose())
            .norm();
    m.translation_mm = (tr.transform.translation_mm - truth->translation_mm).norm();
    double vox = (b.voxel_size_mm(0) + b.voxel_size_mm(1) + b.voxel_size_mm(2)) / 3.0;
    m.translation_voxels = m.translation_mm / vox;
  }
  return m;
}

int cmd_eval(const EvalOptions& opt) {
  SteerableModel model = SteerableModel::load_checkpoint(opt.checkpoint);
  std::vector<LoadedItem> items = load_items(opt.manifest, true);

  std::vector<EvalMetrics> all;
  for (const LoadedItem& item : items)
    all.push_back(evaluate_pair(model, item.a, item.mask_a, item.b, item.mask_b,
                                item.has_truth ? &item.truth : nullptr));

  auto stats = [&](auto get) {
    double mean = 0.0;
    int n = 0;
    for (const EvalMetrics& m : all) {
      mean += get(m);
      ++n;
    }
    mean /= std::max(n, 1);
    double var = 0.0;
    for (const EvalMetrics& m : all) var += (get(m) - mean) * (get(m) - mean);
    var /= std::max(n, 1);
    return std::make_pair(mean, std::sqrt(var));
  };

  bool has_truth = !all.empty() && all.front().has_truth;
  nlohmann::json j;
  j["pairs"] = static_cast<int>(all.size());
  auto [dice_m, dice_s] = stats([](const EvalMetrics& m) { return m.dice_index; });
  j["dice"] = {{"mean", dice_m}, {"std", dice_s}};
  if (has_truth) {
    auto [em, es] = stats([](const EvalMetrics& m) { return m.euler_mae_deg; });
    auto [fm, fsd] = stats([](const EvalMetrics& m) { return m.rotation_frobenius; });
    auto [tm, ts] = stats([](const EvalMetrics& m) { return m.translation_mm; });
    auto [vm, vs] = stats([](const EvalMetrics& m) { return m.translation_voxels; });
    j["euler_mae_deg"] = {{"mean", em}, {"std", es}};
    j["rotation_frobenius"] = {{"mean", fm}, {"std", fsd}};
    j["translation_mm"] = {{"mean", tm}, {"std", ts}};
    j["translation_voxels"] = {{"mean", vm}, {"std", vs}};
    std::printf("%-22s %10s %10s\n", "metric", "mean", "std");
    std::printf("%-22s %10.4f %10.4f\n", "euler MAE (deg)", em, es);
    std::printf("%-22s %10.4f %10.4f\n", "|I - R Rhat^T|_F", fm, fsd);
    std::printf("%-22s %10.4f %10.4f\n", "translation (mm)", tm, ts);
    std::printf("%-22s %10.4f %10.4f\n", "translation (voxels)", vm, vs);
  } else {
    std::printf("no ground-truth transforms in manifest; Dice-only report\n");
  }
  std::printf("%-22s %10.4f %10.4f\n", "dice", dice_m, dice_s);
  if (!opt.out.empty()) {
    std::ofstream f(opt.out);
    if (!f) throw Error("cannot write " + opt.out);
    f << j.dump(2) << "\n";
  }
  return kExitOk;
}

// ------------------------------------------------------- check-equivariance

namespace {

double rel_error(const Tensor& got, const Tensor& ref) {
  double num = 0.0, den = 0.0;
  for (std::int64_t i = 0; i < got.numel(); ++i) {
    double d = got[i] - ref[i];
    num += d * d;
    den += ref[i] * ref[i];
  }
  if (den < 1e-30) return std::sqrt(num);
  return std::sqrt(num / den);
}

double rel_error_masked(const Tensor& got, const Tensor& ref, const std::vector<char>& mask) {
  const std::int64_t vol = static_cast<std::int64_t>(mask.size());
  const int ch = static_cast<int>(got.numel() / vol);
  double num = 0.0, den = 0.0;
  for (int c = 0; c < ch; ++c)
    for (std::int64_t i = 0; i < vol; ++i) {
      if (!mask[static_cast<size_t>(i)]) continue;
      double r = ref[c * vol + i];
      double d = got[c * vol + i] - r;
      num += d * d;
      den += r * r;
    }
  if (den < 1e-30) return std::sqrt(num);
  return std::sqrt(num / den);
}

}  // namespace

EquivSuiteResult equivariance_suite(const SteerableModel& model, int size, std::uint64_t seed,
                                    int random_rotations) {
  EquivSuiteResult res;
  const ModelConfig& cfg = model.config();
  int receptive = 0;
  for (const LayerSpec& ls : cfg.layers) receptive += ls.kernel_width / 2;

  auto [phantom, mask] = make_phantom(seed, size, PhantomKind::Blobs, 1.0);
  Tensor image = phantom.data.reshaped({1, size, size, size});

  // base forward, keeping every layer
  Graph g0;
  auto base = model.forward(g0, g0.constant(image), true);

  // 24 exact rotations: compare every layer in its own representation
  for (const Eigen::Matrix3d& r : octahedral_rotations()) {
    Volume rotated = rotate_grid_exact(phantom, r);
    Graph g;
    auto got = model.forward(g, g.constant(rotated.data.reshaped({1, size, size, size})), true);
    for (size_t li = 0; li < cfg.layers.size(); ++li) {
      Tensor ref =
          rotate_field_map_exact(base.layer_outputs[li].val(), cfg.layers[li].out_type, r);
      res.octahedral_max_rel =
          std::max(res.octahedral_max_rel, rel_error(got.layer_outputs[li].val(), ref));
    }
  }

  // integer shifts on a phantom with a hard-zeroed margin
  {
    int margin = receptive + 4;
    Tensor windowed = phantom.data;
    for (int z = 0; z < size; ++z)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          if (x < margin || y < margin || z < margin || x >= size - margin ||
              y >= size - margin || z >= size - margin)
            windowed[(static_cast<std::int64_t>(z) * size + y) * size + x] = 0.0;
    Graph gb;
    auto base_w = model.forward(gb, gb.constant(windowed.reshaped({1, size, size, size})), true);
    const int shifts[2][3] = {{1, 0, 0}, {1, -2, 3}};
    for (const auto& s : shifts) {
      Tensor shifted =
          shift_field_map(windowed.reshaped({1, size, size, size}), s[0], s[1], s[2]);
      Graph g;
      auto got = model.forward(g, g.constant(shifted), true);
      for (size_t li = 0; li < cfg.layers.size(); ++li) {
        Tensor ref = shift_field_map(base_w.layer_outputs[li].val(), s[0], s[1], s[2]);
        res.shift_max_rel =
            std::max(res.shift_max_rel, rel_error(got.layer_outputs[li].val(), ref));
      }
    }
  }

  // random rotations with trilinear resampling, interior-masked comparison
  {
    Rng rng(seed ^ 0xabcdef12345ull);
    const std::int64_t vol = static_cast<std::int64_t>(size) * size * size;
    std::vector<char> interior(static_cast<size_t>(vol), 0);
    double c = (size - 1) / 2.0;
    double radius = size / 2.0 - receptive - 2.0;
    std::int64_t i = 0;
    for (int z = 0; z < size; ++z)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x, ++i) {
          double dx = x - c, dy = y - c, dz = z - c;
          interior[static_cast<size_t>(i)] = std::sqrt(dx * dx + dy * dy + dz * dz) <= radius;
        }
    FieldType out_type = FieldType::scalars(cfg.output_channels);
    for (int rot = 0; rot < random_rotations; ++rot) {
      Eigen::Matrix3d r = random_rotation(rng);
      Tensor rotated_in = rotate_field_map_trilinear(image, FieldType::scalars(1), r);
      Graph g;
      auto got = model.forward(g, g.constant(rotated_in));
      Tensor ref = rotate_field_map_trilinear(base.output.val(), out_type, r);
      res.continuous_max_rel =
          std::max(res.continuous_max_rel, rel_error_masked(got.output.val(), ref, interior));
    }
  }
  return res;
}

int cmd_check_equivariance(const CheckEquivarianceOptions& opt) {
  SteerableModel model = !opt.checkpoint.empty()
                             ? SteerableModel::load_checkpoint(opt.checkpoint)
                             : SteerableModel([&] {
                                 ModelConfig c = named_model_config(opt.model);
                                 c.seed = opt.seed;
                                 return c;
                               }());
  if (opt.checkpoint.empty() && !opt.random_weights)
    throw Error("check-equivariance: pass --checkpoint or --random-weights");
  if (opt.inject_basis_fault) model.corrupt_basis_for_test();

  EquivSuiteResult res = equivariance_suite(model, opt.size, opt.seed, opt.random_rotations);
  std::printf("octahedral suite:  max rel error %.3g (tol %.3g) %s\n", res.octahedral_max_rel,
              res.octahedral_tol, res.octahedral_max_rel < res.octahedral_tol ? "PASS" : "FAIL");
  std::printf("integer shifts:    max rel error %.3g (tol %.3g) %s\n", res.shift_max_rel,
              res.octahedral_tol, res.shift_max_rel < res.octahedral_tol ? "PASS" : "FAIL");
  std::printf("random rotations:  max rel error %.3g (tol %.3g) %s\n", res.continuous_max_rel,
              res.continuous_tol, res.continuous_pass() ? "PASS" : "FAIL");
  if (!opt.report.empty()) {
    nlohmann::json j;
    j["octahedral_max_rel"] = res.octahedral_max_rel;
    j["shift_max_rel"] = res.shift_max_rel;
    j["continuous_max_rel"] = res.continuous_max_rel;
    j["pass"] = res.pass();
    std::ofstream f(opt.report);
    f << j.dump(2) << "\n";
  }
  return res.pass() ? kExitOk : kExitValidationFailure;
}

}  // namespace eqtrack
