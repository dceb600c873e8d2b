#include <cstdio>
#include <exception>
#include <fstream>

#include "CLI11.hpp"
#include "eqtrack/commands.hpp"
#include "json.hpp"

using namespace eqtrack;

namespace {

// JSON config file values act as defaults; explicit flags win
void overlay_train_config(const std::string& path, TrainOptions& opt, CLI::App* cmd) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read config " + path);
  nlohmann::json j;
  f >> j;
  auto set_if = [&](const char* key, auto& field, const char* flag) {
    if (j.contains(key) && cmd->count(flag) == 0)
      field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  set_if("manifest", opt.manifest, "--manifest");
  set_if("val_manifest", opt.val_manifest, "--val-manifest");
  set_if("out_dir", opt.out_dir, "--out");
  set_if("model", opt.model, "--model");
  set_if("init_checkpoint", opt.init_checkpoint, "--init-checkpoint");
  set_if("loss", opt.loss, "--loss");
  set_if("epochs", opt.epochs, "--epochs");
  set_if("learning_rate", opt.learning_rate, "--learning-rate");
  set_if("seed", opt.seed, "--seed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rigid 3D tracking with rotation/translation-equivariant filter banks"};
  app.require_subcommand(1);

  GenDataOptions gen;
  CLI::App* cgen = app.add_subcommand("gen-data", "generate synthetic phantom pairs");
  cgen->add_option("--seed", gen.seed);
  cgen->add_option("--count", gen.count);
  cgen->add_option("--size", gen.size);
  cgen->add_option("--out", gen.out_dir)->required();
  cgen->add_option("--kind", gen.kind)->check(CLI::IsMember({"blobs", "ellipsoids"}));
  cgen->add_option("--max-angle", gen.max_angle_deg);
  cgen->add_option("--max-shift", gen.max_shift_mm);
  cgen->add_option("--voxel-size", gen.voxel_size_mm);

  TrainOptions train;
  std::string train_config;
  CLI::App* ctrain = app.add_subcommand("train", "train the filter bank on a dataset");
  ctrain->add_option("--config", train_config, "JSON config file (flags override)");
  ctrain->add_option("--manifest", train.manifest);
  ctrain->add_option("--val-manifest", train.val_manifest);
  ctrain->add_option("--out", train.out_dir);
  ctrain->add_option("--model", train.model)->check(CLI::IsMember({"default", "small", "tiny"}));
  ctrain->add_option("--init-checkpoint", train.init_checkpoint);
  ctrain->add_option("--loss", train.loss)->check(CLI::IsMember({"l2", "geo", "6d", "image"}));
  ctrain->add_option("--epochs", train.epochs);
  ctrain->add_option("--learning-rate", train.learning_rate);
  ctrain->add_option("--seed", train.seed);

  TrackOptions trk;
  CLI::App* ctrack = app.add_subcommand("track", "estimate the transform between two volumes");
  ctrack->add_option("--checkpoint", trk.checkpoint)->required();
  ctrack->add_option("--moving", trk.moving)->required();
  ctrack->add_option("--reference", trk.reference)->required();
  ctrack->add_option("--out", trk.out)->required();
  ctrack->add_option("--diagnostics", trk.diagnostics);

  EvalOptions ev;
  CLI::App* ceval = app.add_subcommand("eval", "evaluate tracking on a labelled dataset");
  ceval->add_option("--checkpoint", ev.checkpoint)->required();
  ceval->add_option("--manifest", ev.manifest)->required();
  ceval->add_option("--out", ev.out);

  CheckEquivarianceOptions chk;
  CLI::App* cchk = app.add_subcommand("check-equivariance", "verify the equivariance contract");
  cchk->add_option("--checkpoint", chk.checkpoint);
  cchk->add_flag("--random-weights", chk.random_weights);
  cchk->add_option("--model", chk.model)->check(CLI::IsMember({"default", "small", "tiny"}));
  cchk->add_option("--seed", chk.seed);
  cchk->add_option("--size", chk.size);
  cchk->add_option("--random-rotations", chk.random_rotations);
  cchk->add_flag("--inject-basis-fault", chk.inject_basis_fault);
  cchk->add_option("--report", chk.report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidationFailure;
  }

  try {
    if (cgen->parsed()) return cmd_gen_data(gen);
    if (ctrain->parsed()) {
      if (!train_config.empty()) overlay_train_config(train_config, train, ctrain);
      return cmd_train(train);
    }
    if (ctrack->parsed()) return cmd_track(trk);
    if (ceval->parsed()) return cmd_eval(ev);
    if (cchk->parsed()) return cmd_check_equivariance(chk);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntimeError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntimeError;
  }
  return kExitValidationFailure;
}
