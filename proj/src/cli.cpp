#include "pami/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "pami/data.hpp"
#include "pami/error.hpp"
#include "pami/io.hpp"
#include "pami/render.hpp"
#include "pami/trainer.hpp"

namespace pami::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Flags shared by the training-related subcommands; unset optionals leave
// the config file (or the defaults) in charge.
struct CommonFlags {
  std::string data;
  std::string out;
  std::string config;
  std::optional<int> fold;
  std::optional<int> setting;
  std::vector<int> classes;
  std::optional<std::uint64_t> seed;
  std::string ckpt;
  std::optional<int> nf;
  std::optional<int> modules;
  std::optional<double> lambda;
  std::optional<int> iterations;
};

void add_common(CLI::App* app, CommonFlags& f, bool with_ckpt) {
  app->add_option("--data", f.data, "Dataset root containing manifest.json");
  app->add_option("--out", f.out, "Output path");
  app->add_option("--config", f.config, "JSON config file; flags override its values");
  app->add_option("--fold", f.fold, "Fold index")->check(CLI::Range(0, 1000));
  app->add_option("--setting", f.setting, "Evaluation setting (1 or 2)")->check(CLI::IsMember({1, 2}));
  app->add_option("--classes", f.classes, "Class ids (comma separated)")->delimiter(',');
  app->add_option("--seed", f.seed, "RNG seed");
  if (with_ckpt) app->add_option("--ckpt", f.ckpt, "Checkpoint file");
  app->add_option("--nf", f.nf, "Foreground region count N_f")->check(CLI::PositiveNumber);
  app->add_option("--modules", f.modules, "Number of stacked debiasing modules")->check(CLI::NonNegativeNumber);
  app->add_option("--lambda", f.lambda, "Assembling coefficient")->check(CLI::Range(0.0, 1.0));
  app->add_option("--iterations", f.iterations, "Training iterations")->check(CLI::PositiveNumber);
}

TrainConfig resolve_config(const CommonFlags& f, TrainConfig base = {}) {
  if (!f.config.empty()) base.merge_json(io::read_text(f.config));
  if (f.fold) base.fold = *f.fold;
  if (f.setting) base.setting = *f.setting;
  if (f.seed) base.seed = *f.seed;
  if (f.nf) base.n_f = *f.nf;
  if (f.modules) base.m_modules = *f.modules;
  if (f.lambda) base.lambda = *f.lambda;
  if (f.iterations) base.iterations = *f.iterations;
  base.validate();
  return base;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw Error("usage", std::string(flag) + " is required");
}

Dataset load_data(const std::string& root) {
  require(root, "--data");
  if (!fs::exists(fs::path(root) / "manifest.json")) throw Error("io", "no manifest.json under " + root);
  return Dataset::load(root);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// ---- subcommands -----------------------------------------------------------

int run_synth(const SynthConfig& cfg, const std::string& out_dir, std::ostream& out) {
  require(out_dir, "--out");
  const auto m = generate_synthetic_dataset(cfg, out_dir);
  out << "wrote " << m.scans.size() << " scans, " << m.classes.size() << " classes, " << m.folds.size()
      << " folds to " << out_dir << "\n";
  return kExitOk;
}

int run_partition(const std::string& image, const std::string& mask_path, int nf, std::uint64_t seed,
                  const std::string& out_dir, std::ostream& out) {
  require(mask_path, "--mask");
  require(out_dir, "--out");
  const Mask mask = io::read_mask_png(mask_path);
  if (!image.empty()) {
    const Image2D img = io::read_slice_png(image);
    if (img.height != mask.height || img.width != mask.width)
      throw Error("bad-shape", "image and mask differ in shape");
  }
  SeedSet seeds;
  const auto regions = partition_foreground(mask, nf, seed, &seeds);
  io::write_region_masks(out_dir, regions, seeds, nf, seed);
  out << "wrote " << regions.count << " region masks to " << out_dir << "\n";
  return kExitOk;
}

int run_train(const CommonFlags& f, const std::string& resume, std::ostream& out, std::ostream& err) {
  require(f.out, "--out");
  const Dataset data = load_data(f.data);
  TrainConfig cfg = resolve_config(f);
  if (!f.classes.empty()) cfg.held_out_classes = f.classes;
  const fs::path dir(f.out);
  fs::create_directories(dir);

  std::optional<Trainer> trainer;
  if (!resume.empty()) {
    trainer.emplace(Trainer::resume(data, resume));
    if (f.iterations) {
      TrainConfig c = trainer->config();
      c.iterations = *f.iterations;
      // Only the iteration budget may change on resume.
      auto state = read_checkpoint(resume);
      state.config = c;
      write_checkpoint(dir / "resume.tmp", state);
      trainer.emplace(Trainer::resume(data, dir / "resume.tmp"));
      fs::remove(dir / "resume.tmp");
    }
  } else {
    trainer.emplace(data, cfg);
  }
  io::write_text(dir / "config.json", json::parse(trainer->config().to_json()).dump(2) + "\n");
  std::ofstream log(dir / "loss.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw Error("io", "cannot open " + (dir / "loss.jsonl").string());
  const int total = trainer->config().iterations;
  trainer->run(
      [&](const LossRecord& r) {
        log << loss_record_json(r) << "\n";
        if ((r.iter + 1) % 100 == 0 || r.iter + 1 == total)
          err << "iter " << r.iter + 1 << "/" << total << " lr " << r.lr << " loss " << fmt(r.loss) << "\n";
      },
      dir / "checkpoints");
  log.flush();
  if (!log) throw Error("io", "write failed for loss log");
  trainer->save_checkpoint(dir / "checkpoint.bin");
  out << "trained " << trainer->iteration() << " iterations; checkpoint " << (dir / "checkpoint.bin").string() << "\n";
  return kExitOk;
}

std::string mask_name(const Episode& e, const char* kind) { return e.episode_id + "_" + kind + ".png"; }

int run_eval(const CommonFlags& f, std::ostream& out) {
  require(f.ckpt, "--ckpt");
  const Dataset data = load_data(f.data);
  const Checkpoint ckpt = read_checkpoint(f.ckpt);
  if (f.modules && *f.modules != ckpt.config.m_modules)
    throw Error("usage", "--modules must match the checkpoint (" + std::to_string(ckpt.config.m_modules) + ")");
  const TrainConfig cfg = resolve_config(f, ckpt.config);
  const auto params = params_from_checkpoint(ckpt);
  const fs::path dir = f.out.empty() ? fs::path(f.ckpt).parent_path() / ("eval_fold" + std::to_string(cfg.fold)) : fs::path(f.out);
  fs::create_directories(dir / "masks");

  std::ofstream results(dir / "results.jsonl", std::ios::trunc);
  if (!results) throw Error("io", "cannot open " + (dir / "results.jsonl").string());
  EvalHooks hooks;
  hooks.on_episode = [&](const Episode& e, const Mask& pred, const Image2D&, double dsc) {
    io::write_mask_png(dir / "masks" / mask_name(e, "pred"), pred);
    io::write_mask_png(dir / "masks" / mask_name(e, "gt"), e.query_mask);
    results << json{{"episode_id", e.episode_id}, {"class", e.class_id}, {"fold", cfg.fold}, {"dsc", dsc}}.dump() << "\n";
  };
  const auto score = evaluate_fold(params, data, cfg.fold, f.classes, cfg.forward(), cfg.seed, hooks);
  results.flush();
  if (!results) throw Error("io", "write failed for results.jsonl");
  io::write_text(dir / "dsc.json", fold_score_json(score));
  io::write_text(dir / "dsc.csv", fold_score_csv(score));
  for (const auto& c : score.classes) out << c.name << " " << fmt(c.mean_dsc) << "\n";
  out << "mean " << fmt(score.mean_dsc) << "\n";
  return kExitOk;
}

struct PredictFlags {
  std::string support, support_mask, query, query_mask;
  std::string support_features, query_features, export_features, dump_prototypes;
  int class_id = 1;
  int episode = 0;
};

int run_predict(const CommonFlags& f, const PredictFlags& p, std::ostream& out) {
  require(f.ckpt, "--ckpt");
  require(f.out, "--out");
  const Checkpoint ckpt = read_checkpoint(f.ckpt);
  const TrainConfig cfg = resolve_config(f, ckpt.config);
  const auto params = params_from_checkpoint(ckpt);
  Episode e;
  if (!p.support.empty()) {
    require(p.support_mask, "--support-mask");
    require(p.query, "--query");
    e.support = io::read_slice_png(p.support);
    e.support_mask = io::read_mask_png(p.support_mask);
    e.query = io::read_slice_png(p.query);
    e.query_mask = p.query_mask.empty() ? Mask(e.query.height, e.query.width, 0) : io::read_mask_png(p.query_mask);
    e.episode_id = "custom";
  } else {
    const Dataset data = load_data(f.data);
    const auto episodes = build_eval_episodes(data, cfg.fold, p.class_id);
    if (p.episode < 0 || p.episode >= static_cast<int>(episodes.size()))
      throw Error("usage", "--episode out of range (0.." + std::to_string(episodes.size() - 1) + ")");
    e = episodes[static_cast<std::size_t>(p.episode)];
  }
  if (count_nonzero(e.support_mask) == 0) throw Error("empty-foreground", "support mask is empty");
  if (p.support_features.empty() != p.query_features.empty())
    throw Error("usage", "--support-features and --query-features go together");

  const std::uint64_t pseed = mix_seed(cfg.seed, 0x300000 + static_cast<std::uint64_t>(p.episode));
  const ForwardConfig fc = cfg.forward();
  const auto regions = partition_foreground(e.support_mask, fc.n_f, pseed);
  ad::Tensor<float> fm_s, fm_q;
  if (!p.support_features.empty()) {
    fm_s = io::read_features(p.support_features);
    fm_q = io::read_features(p.query_features);
  } else {
    fm_s = encode(e.support, params.encoder);
    fm_q = encode(e.query, params.encoder);
  }
  if (!p.export_features.empty()) {
    fs::create_directories(p.export_features);
    io::write_features(fs::path(p.export_features) / "support.bin", fm_s, "encoder");
    io::write_features(fs::path(p.export_features) / "query.bin", fm_q, "encoder");
  }
  json dump = json::object();
  ProbeFn<float> probe;
  if (!p.dump_prototypes.empty())
    probe = [&](const std::string& name, const ad::Tensor<float>& t) {
      dump[name] = {{"shape", t.shape()}, {"values", t.values()}};
    };
  const auto res = forward_features(params, fm_s, fm_q, e.support_mask, regions, fc, probe);
  if (!p.dump_prototypes.empty()) io::write_text(p.dump_prototypes, dump.dump() + "\n");
  const Mask pred = binarize(res.prediction.blended.values(), e.support_mask.height, e.support_mask.width,
                             kBinarizeThreshold);
  const double dsc = dice_score(pred, e.query_mask);
  const auto cv = render::overlay(e.query, pred, e.query_mask, dsc);
  io::write_png_rgb(f.out, cv.height, cv.width, cv.rgb);
  out << e.episode_id << " DSC " << fmt(dsc) << " -> " << f.out << "\n";
  return kExitOk;
}

int run_ablate(const CommonFlags& f, const std::string& param, std::vector<double> values, const std::vector<int>& folds_in,
               std::ostream& out, std::ostream& err) {
  require(f.out, "--out");
  const Dataset data = load_data(f.data);
  TrainConfig base = resolve_config(f);
  if (!f.classes.empty()) base.held_out_classes = f.classes;
  if (param != "nf" && param != "modules" && param != "lambda")
    throw Error("usage", "--param must be one of nf, modules, lambda");
  if (values.empty()) {
    if (param == "nf") values = {1, 4, 16, 32, 64};
    else if (param == "modules") values = {0, 1, 3, 5};
    else values = {0.0, 0.3, 0.5, 0.7, 1.0};
  }
  std::vector<int> folds = folds_in;
  if (folds.empty()) folds.push_back(base.fold);
  const fs::path dir(f.out);
  fs::create_directories(dir);

  // nf and lambda act at inference time: one trained model per fold is
  // swept. The module count changes the architecture, so each value trains.
  std::vector<std::vector<double>> scores(values.size());
  for (int fold : folds) {
    TrainConfig cfg = base;
    cfg.fold = fold;
    std::optional<PipelineParams<float>> shared;
    if (param != "modules") {
      if (!f.ckpt.empty()) {
        shared = params_from_checkpoint(read_checkpoint(f.ckpt));
      } else {
        Trainer t(data, cfg);
        t.run();
        shared = t.params();
      }
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      TrainConfig c = cfg;
      if (param == "nf") c.n_f = static_cast<int>(values[i]);
      if (param == "lambda") c.lambda = values[i];
      if (param == "modules") c.m_modules = static_cast<int>(values[i]);
      c.validate();
      double dsc;
      if (shared) {
        dsc = evaluate_fold(*shared, data, fold, c.held_out_classes, c.forward(), c.seed).mean_dsc;
      } else {
        Trainer t(data, c);
        t.run();
        dsc = evaluate_fold(t.params(), data, fold, c.held_out_classes, c.forward(), c.seed).mean_dsc;
      }
      scores[i].push_back(dsc);
      err << "fold " << fold << " " << param << "=" << values[i] << " mean DSC " << fmt(dsc) << "\n";
    }
  }
  json series = json::array();
  render::Series line{"mean DSC", values, {}};
  for (std::size_t i = 0; i < values.size(); ++i) {
    double m = 0;
    for (double s : scores[i]) m += s;
    m /= static_cast<double>(scores[i].size());
    line.y.push_back(m);
    series.push_back({{"value", values[i]}, {"per_fold", scores[i]}, {"mean_dsc", m}});
  }
  const json doc = {{"param", param}, {"folds", folds}, {"config", json::parse(base.to_json())}, {"series", series}};
  io::write_text(dir / "ablate.json", doc.dump(2) + "\n");
  const std::string xl = param == "nf" ? "N_F" : param == "modules" ? "M" : "LAMBDA";
  const auto cv = render::line_plot({line}, "ABLATION " + xl, xl, "DSC");
  io::write_png_rgb(dir / "ablate.png", cv.height, cv.width, cv.rgb);
  for (std::size_t i = 0; i < values.size(); ++i) out << param << "=" << values[i] << " " << fmt(line.y[i]) << "\n";
  return kExitOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot medical image segmentation with regional prototypes", "pami"};
  app.require_subcommand(1);
  app.fallthrough(false);

  SynthConfig synth;
  std::string synth_out;
  auto* s = app.add_subcommand("synth", "Generate a synthetic dataset");
  s->add_option("--out", synth_out, "Output directory")->required();
  s->add_option("--scans", synth.n_scans, "Number of scans")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--slices", synth.slices_per_scan, "Slices per scan")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--height", synth.height, "Slice height")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--width", synth.width, "Slice width")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--n-classes", synth.n_classes, "Number of organ classes")->capture_default_str()->check(CLI::Range(1, 254));
  s->add_option("--folds", synth.n_folds, "Number of folds")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--seed", synth.seed, "RNG seed")->capture_default_str();

  std::string part_image, part_mask, part_out;
  int part_nf = kDefaultRegionCount;
  std::uint64_t part_seed = 0;
  auto* p = app.add_subcommand("partition", "Partition a foreground mask into regions");
  p->add_option("--image", part_image, "Slice PNG (optional, shape check)");
  p->add_option("--mask", part_mask, "Foreground mask PNG")->required();
  p->add_option("--nf", part_nf, "Region count")->capture_default_str()->check(CLI::PositiveNumber);
  p->add_option("--seed", part_seed, "RNG seed")->capture_default_str();
  p->add_option("--out", part_out, "Output directory")->required();

  CommonFlags train_flags;
  std::string resume;
  auto* t = app.add_subcommand("train", "Episodic training on one fold");
  add_common(t, train_flags, false);
  t->add_option("--resume", resume, "Resume from a checkpoint");

  CommonFlags eval_flags;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a fold's held-out scans");
  add_common(e, eval_flags, true);

  CommonFlags pred_flags;
  PredictFlags pred;
  auto* pr = app.add_subcommand("predict", "Predict one episode and render an overlay");
  add_common(pr, pred_flags, true);
  pr->add_option("--class", pred.class_id, "Class id for dataset episodes")->capture_default_str();
  pr->add_option("--episode", pred.episode, "Episode index within the fold/class")->capture_default_str();
  pr->add_option("--support", pred.support, "Support slice PNG");
  pr->add_option("--support-mask", pred.support_mask, "Support mask PNG");
  pr->add_option("--query", pred.query, "Query slice PNG");
  pr->add_option("--query-mask", pred.query_mask, "Query ground-truth PNG");
  pr->add_option("--support-features", pred.support_features, "Precomputed support feature blob (skips the encoder)");
  pr->add_option("--query-features", pred.query_features, "Precomputed query feature blob");
  pr->add_option("--export-features", pred.export_features, "Write the encoder feature blobs to this directory");
  pr->add_option("--dump-prototypes", pred.dump_prototypes, "Write intermediate prototype sets as JSON");

  CommonFlags abl_flags;
  std::string abl_param = "modules";
  std::vector<double> abl_values;
  std::vector<int> abl_folds;
  auto* a = app.add_subcommand("ablate", "Sweep N_f, M or lambda and plot mean DSC");
  add_common(a, abl_flags, true);
  a->add_option("--param", abl_param, "nf | modules | lambda")->capture_default_str();
  a->add_option("--values", abl_values, "Values to sweep (comma separated)")->delimiter(',');
  a->add_option("--folds", abl_folds, "Folds to run (comma separated)")->delimiter(',');

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (s->parsed()) return run_synth(synth, synth_out, out);
    if (p->parsed()) return run_partition(part_image, part_mask, part_nf, part_seed, part_out, out);
    if (t->parsed()) return run_train(train_flags, resume, out, err);
    if (e->parsed()) return run_eval(eval_flags, out);
    if (pr->parsed()) return run_predict(pred_flags, pred, out);
    if (a->parsed()) return run_ablate(abl_flags, abl_param, abl_values, abl_folds, out, err);
  } catch (const Error& ex) {
    err << "error: " << ex.what() << "\n";
    if (ex.code() == "usage") {
      err << app.help();
      return kExitUsage;
    }
    return kExitRuntime;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitRuntime;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace pami::cli
