// transadapter: gen | train | eval | export-embed | gradcheck
//
// Exit codes: 0 ok, 1 usage, 2 runtime/numeric, 3 verification failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "transadapter/transadapter.hpp"

namespace fs = std::filesystem;
using namespace transadapter;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitVerification = 3;

struct GenArgs {
  std::string out;
  SyntheticSpec spec = benchmark_spec(1);
};

struct TrainArgs {
  std::string config, out, ckpt, data_src, data_tgt, resume;
  std::optional<std::uint64_t> seed, steps, stop_after;
  std::optional<std::string> gdd, ada, cft, pixmix;
};

struct EvalArgs {
  std::string ckpt, out;
  std::vector<std::string> data;
};

struct GradArgs {
  std::size_t seeds = kGradSeeds;
  double tolerance = kGradTolerance;
  double step = 1e-5;
  std::string filter;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Dataset load_dataset_for(const std::string &path, const BackboneConfig &bb) {
  if (path.empty())
    throw UsageError("missing dataset path");
  Dataset d = load_dataset(path);
  if (d.height != bb.image_size || d.width != bb.image_size || d.channels != 3 || d.num_classes != bb.num_classes)
    throw UsageError(path + ": dataset geometry " + std::to_string(d.height) + "x" + std::to_string(d.width) + "x" +
                     std::to_string(d.channels) + " with " + std::to_string(d.num_classes) +
                     " classes does not match the model");
  return d;
}

bool same_backbone(const BackboneConfig &a, const BackboneConfig &b) {
  return a.image_size == b.image_size && a.patch_size == b.patch_size && a.embed_dim == b.embed_dim &&
         a.depth == b.depth && a.heads == b.heads && a.window == b.window && a.shift == b.shift &&
         a.num_classes == b.num_classes;
}

int run_gen(const GenArgs &a) {
  SyntheticSplits s;
  try {
    s = generate_synthetic(a.spec);
  } catch (const ContractError &e) {
    throw UsageError(e.what());
  }
  const fs::path out(a.out);
  save_dataset(s.source_train, out / "source_train.tds");
  save_dataset(s.source_eval, out / "source_eval.tds");
  save_dataset(s.target_train, out / "target_train.tds");
  save_dataset(s.target_eval, out / "target_eval.tds");
  nlohmann::ordered_json j;
  j["gen"] = out.string();
  j["seed"] = a.spec.seed;
  j["classes"] = a.spec.classes;
  j["train_per_class"] = a.spec.per_class_train;
  j["eval_per_class"] = a.spec.per_class_eval;
  j["intensity"] = a.spec.intensity;
  j["rotation_deg"] = a.spec.rotation_deg;
  j["texture"] = a.spec.texture;
  std::cout << j.dump() << '\n';
  return kExitOk;
}

bool toggle_value(const std::string &v) { return v == "on"; }

RunConfig resolve_train_config(const TrainArgs &a) {
  RunConfig rc = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  auto &t = rc.train;
  if (a.seed) t.seed = *a.seed;
  if (a.steps) t.total_steps = *a.steps;
  if (a.gdd) t.toggles.gdd = toggle_value(*a.gdd);
  if (a.ada) t.toggles.ada_entropy = toggle_value(*a.ada);
  if (a.cft) t.toggles.cft = toggle_value(*a.cft);
  if (a.pixmix) t.toggles.pixel_transform = toggle_value(*a.pixmix);
  if (!a.out.empty()) rc.paths.out = a.out;
  if (!a.ckpt.empty()) rc.paths.ckpt = a.ckpt;
  if (!a.data_src.empty()) rc.paths.data_src = a.data_src;
  if (!a.data_tgt.empty()) rc.paths.data_tgt = a.data_tgt;
  if (rc.paths.ckpt.empty())
    rc.paths.ckpt = (fs::path(rc.paths.out) / "model.tadp").string();
  try {
    t.validate();
  } catch (const ContractError &e) {
    throw UsageError(e.what());
  }
  if (rc.paths.data_src.empty() || rc.paths.data_tgt.empty())
    throw UsageError("train needs data_src and data_tgt (config keys or --data-src/--data-tgt)");
  return rc;
}

// Loads the labeler from pseudo_ckpt, or reuses/trains a source-only model
// under <out>/labeler.tadp.
TransAdapterModel obtain_labeler(const RunConfig &rc, const Dataset &src, const Dataset &tgt, bool resuming) {
  if (!rc.paths.pseudo_ckpt.empty())
    return load_checkpoint(rc.paths.pseudo_ckpt).model;
  const fs::path path = fs::path(rc.paths.out) / "labeler.tadp";
  if (resuming && fs::exists(path))
    return load_checkpoint(path).model;
  const TrainConfig base = source_only(rc.train);
  TrainingState st = fresh_state(base);
  std::ofstream csv(fs::path(rc.paths.out) / "labeler_loss.csv");
  PipelineSinks sinks{&csv, nullptr, &std::cerr, 500};
  std::cerr << "# training source-only labeler\n";
  run_training(st, TrainingData{&src, &tgt, {}}, base, base.total_steps, sinks);
  save_checkpoint(st.model, st.optim, path);
  return std::move(st.model);
}

int run_train(const TrainArgs &a) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig rc = resolve_train_config(a);
  const TrainConfig &cfg = rc.train;
  const fs::path out(rc.paths.out);
  fs::create_directories(out);

  const Dataset src = load_dataset_for(rc.paths.data_src, cfg.backbone);
  const Dataset tgt = load_dataset_for(rc.paths.data_tgt, cfg.backbone);
  if (src.domain != Domain::source || tgt.domain != Domain::target)
    throw UsageError("data_src must be a source-domain file and data_tgt a target-domain file");
  std::optional<Dataset> eval_src, eval_tgt;
  if (!rc.paths.eval_src.empty()) eval_src = load_dataset_for(rc.paths.eval_src, cfg.backbone);
  if (!rc.paths.eval_tgt.empty()) eval_tgt = load_dataset_for(rc.paths.eval_tgt, cfg.backbone);

  const bool resuming = !a.resume.empty();
  TrainingState state = resuming ? load_checkpoint(a.resume) : fresh_state(cfg);
  if (resuming && !same_backbone(state.model.config, cfg.backbone))
    throw UsageError(a.resume + ": checkpoint backbone does not match the configuration");
  if (state.optim.step > cfg.total_steps)
    throw UsageError(a.resume + ": checkpoint step is beyond total_steps");

  TrainingData data{&src, &tgt, {}};
  nlohmann::ordered_json pseudo_summary;
  if (cfg.toggles.pixel_transform) {
    const TransAdapterModel labeler = obtain_labeler(rc, src, tgt, resuming);
    PseudoLabelerInfo info;
    data.pseudo = stage_pseudo_labels(labeler, tgt, eval_src ? *eval_src : src, &info);
    pseudo_summary["threshold"] = info.threshold;
    pseudo_summary["retained"] = info.retained;
    pseudo_summary["candidates"] = info.candidates;
  }

  const bool append = resuming && state.optim.step > 0;
  const auto mode = append ? std::ios::app : std::ios::trunc;
  std::ofstream loss_csv(out / "loss.csv", std::ios::out | mode);
  std::ofstream audit(out / "mix.log", std::ios::out | mode);
  if (!loss_csv || !audit)
    throw std::runtime_error("cannot write into " + out.string());
  if (!append && !pseudo_summary.is_null())
    audit << "pseudo " << pseudo_summary.dump() << '\n';

  const std::uint64_t stop = a.stop_after ? std::min(*a.stop_after, cfg.total_steps) : cfg.total_steps;
  if (stop < state.optim.step)
    throw UsageError("--stop-after is before the checkpoint step");
  run_training(state, data, cfg, stop, PipelineSinks{&loss_csv, &audit, &std::cerr, 100});
  save_checkpoint(state.model, state.optim, rc.paths.ckpt);

  if (state.optim.step == cfg.total_steps) {
    auto report = [&](const std::string &path, const Dataset &d) {
      std::cout << eval_line(split_label(path), d, evaluate(state.model, d)) << '\n';
    };
    if (eval_src) report(rc.paths.eval_src, *eval_src);
    if (eval_tgt) report(rc.paths.eval_tgt, *eval_tgt);
    if (!eval_src && !eval_tgt) {
      report(rc.paths.data_src, src);
      report(rc.paths.data_tgt, tgt);
    }
  }
  nlohmann::ordered_json j;
  j["train"] = "done";
  j["step"] = state.optim.step;
  j["total_steps"] = cfg.total_steps;
  j["checkpoint"] = rc.paths.ckpt;
  j["loss_csv"] = (out / "loss.csv").string();
  if (!pseudo_summary.is_null())
    j["pseudo"] = pseudo_summary;
  std::cout << j.dump() << '\n';
  std::fprintf(stderr, "# train finished in %.1f s\n", seconds_since(t0));
  return kExitOk;
}

int run_eval(const EvalArgs &a) {
  const TrainingState st = load_checkpoint(a.ckpt);
  for (const auto &path : a.data) {
    const Dataset d = load_dataset_for(path, st.model.config);
    std::cout << eval_line(split_label(path), d, evaluate(st.model, d)) << '\n';
  }
  return kExitOk;
}

int run_export(const EvalArgs &a) {
  const TrainingState st = load_checkpoint(a.ckpt);
  const fs::path path(a.out);
  if (path.has_parent_path())
    fs::create_directories(path.parent_path());
  std::ofstream csv(path);
  if (!csv)
    throw std::runtime_error("cannot write " + path.string());
  csv << embeddings_csv_header(st.model.config.embed_dim);
  std::size_t rows = 0;
  for (const auto &p : a.data) {
    const Dataset d = load_dataset_for(p, st.model.config);
    write_embedding_rows(csv, d, evaluate(st.model, d));
    rows += d.size();
  }
  nlohmann::ordered_json j;
  j["export"] = path.string();
  j["rows"] = rows;
  j["columns"] = 3 + st.model.config.embed_dim;
  std::cout << j.dump() << '\n';
  return kExitOk;
}

int run_gradcheck(const GradArgs &a) {
  const GradSuiteReport r = run_gradient_suite(a.seeds, a.tolerance, a.step, a.filter);
  if (r.cases.empty())
    throw UsageError("no gradient case matches filter '" + a.filter + "'");
  char buf[256];
  for (const auto &c : r.cases) {
    std::snprintf(buf, sizeof buf, "%s %-28s seeds=%zu checked=%zu excluded=%zu max_rel_err=%.3e\n",
                  c.passed ? "PASS" : "FAIL", c.name.c_str(), c.seeds, c.checked, c.excluded, c.max_rel_error);
    std::cout << buf;
  }
  std::fprintf(stderr, "# gradcheck %.2f s\n", r.seconds);
  std::cout << (r.passed() ? "gradcheck: all cases passed" : "gradcheck: FAILED") << '\n';
  return r.passed() ? kExitOk : kExitVerification;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"TransAdapter desk-scale domain adaptation toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  auto *gen_cmd = app.add_subcommand("gen", "write the synthetic two-domain benchmark");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--seed", gen.spec.seed, "generator seed");
  gen_cmd->add_option("--classes", gen.spec.classes, "number of classes (1..3)");
  gen_cmd->add_option("--train-per-class", gen.spec.per_class_train);
  gen_cmd->add_option("--eval-per-class", gen.spec.per_class_eval);
  gen_cmd->add_option("--image-size", gen.spec.image_size);
  gen_cmd->add_option("--intensity", gen.spec.intensity, "target intensity shift in [0,1]");
  gen_cmd->add_option("--rotation", gen.spec.rotation_deg, "target extra rotation jitter, degrees");
  gen_cmd->add_option("--texture", gen.spec.texture, "target background texture in [0,1]");

  TrainArgs tr;
  auto *train_cmd = app.add_subcommand("train", "train a model from a key = value config");
  train_cmd->add_option("--config", tr.config, "config file");
  train_cmd->add_option("--seed", tr.seed);
  train_cmd->add_option("--out", tr.out, "run directory");
  train_cmd->add_option("--ckpt", tr.ckpt, "checkpoint path (default <out>/model.tadp)");
  train_cmd->add_option("--data-src", tr.data_src);
  train_cmd->add_option("--data-tgt", tr.data_tgt);
  train_cmd->add_option("--steps", tr.steps, "total steps");
  train_cmd->add_option("--resume", tr.resume, "continue from this checkpoint");
  train_cmd->add_option("--stop-after", tr.stop_after, "stop (and checkpoint) once this step is reached");
  const auto on_off = CLI::IsMember({"on", "off"});
  train_cmd->add_option("--toggle-gdd", tr.gdd)->check(on_off);
  train_cmd->add_option("--toggle-ada", tr.ada)->check(on_off);
  train_cmd->add_option("--toggle-cft", tr.cft)->check(on_off);
  train_cmd->add_option("--toggle-pixmix", tr.pixmix)->check(on_off);

  EvalArgs ev;
  auto *eval_cmd = app.add_subcommand("eval", "print accuracy lines for datasets");
  eval_cmd->add_option("--ckpt", ev.ckpt)->required();
  eval_cmd->add_option("--data", ev.data, "dataset file(s)")->required();

  EvalArgs ex;
  auto *export_cmd = app.add_subcommand("export-embed", "write final-block pooled features as CSV");
  export_cmd->add_option("--ckpt", ex.ckpt)->required();
  export_cmd->add_option("--data", ex.data, "dataset file(s)")->required();
  export_cmd->add_option("--out", ex.out, "CSV path")->required();

  GradArgs gc;
  auto *grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  grad_cmd->add_option("--seeds", gc.seeds)->check(CLI::PositiveNumber);
  grad_cmd->add_option("--tolerance", gc.tolerance)->check(CLI::NonNegativeNumber);
  grad_cmd->add_option("--step", gc.step)->check(CLI::PositiveNumber);
  grad_cmd->add_option("--filter", gc.filter, "only cases whose name contains this");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen_cmd) return run_gen(gen);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*export_cmd) return run_export(ex);
    return run_gradcheck(gc);
  } catch (const UsageError &e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
