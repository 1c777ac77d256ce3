// pef: 2D pose estimation from first principles.
//
// Subcommands: synth | train | eval | predict | gradcheck | bench | inspect.
// Exit codes: 0 success, 1 usage, 2 data/config error, 3 numeric failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pef/pef.hpp"

namespace fs = std::filesystem;
using Real = float;

namespace {

// All dotted config keys with their defaults. Flags mirror keys one-to-one;
// precedence is defaults < config file < PEF_OUT < flags.
std::map<std::string, std::string> default_kv() {
  auto kv = pef::ModelConfig().to_kv();
  kv["train.encoder_lr"] = "1e-05";
  kv["train.decoder_lr"] = "0.0001";
  kv["train.drop_factor"] = "10";
  kv["train.drop_epoch"] = "50";
  kv["train.epochs"] = "80";
  kv["train.batch_size"] = "42";
  kv["train.grad_clip"] = "0";
  kv["train.checkpoint_every"] = "0";  // 0 = final checkpoint only
  kv["match.lambda_l1"] = "5";
  kv["match.noobj_weight"] = "0.1";
  kv["aug.enabled"] = "1";
  kv["aug.scale_min"] = "0.7";
  kv["aug.scale_max"] = "1.3";
  kv["aug.rotation_deg"] = "40";
  kv["aug.flip_prob"] = "0.5";
  kv["eval.flip_test"] = "1";
  kv["eval.argmax_filtered"] = "1";
  return kv;
}

struct RunConfig {
  pef::ModelConfig model;
  pef::ScheduleConfig schedule;
  pef::MatchingConfig matching;
  bool aug_enabled = true;
  pef::AugmentationSpec aug;
  double grad_clip = 0;
  int checkpoint_every = 0;
  bool flip_test = true;
  bool argmax_filtered = true;

  std::uint64_t seed = 0;
  bool deterministic = false;
  int jobs = 1;
  std::string out_dir = "pef_out";

  std::map<std::string, std::string> merged;  // for provenance / inspect
};

// Flag state shared by every subcommand.
struct CommonArgs {
  std::string config_path;
  std::map<std::string, std::string> flag_values;  // dotted-key flag storage
  CLI::App* cmd = nullptr;

  std::string out_dir;
  std::uint64_t seed = 0;
  bool deterministic = false;
  int jobs = 1;
};

void add_common_flags(CLI::App* cmd, CommonArgs& args) {
  args.cmd = cmd;
  cmd->add_option("--config", args.config_path,
                  "key=value config file (dotted keys)");
  cmd->add_option("--out", args.out_dir, "output directory")
      ->default_str("pef_out");
  cmd->add_option("--seed", args.seed, "run seed")->default_str("0");
  cmd->add_flag("--deterministic", args.deterministic,
                "bit-reproducible mode (forces --jobs 1)");
  cmd->add_option("--jobs", args.jobs, "worker thread cap")->default_str("1");
  for (auto& [key, def] : default_kv()) {
    auto& slot = args.flag_values[key];
    cmd->add_option("--" + key, slot)->default_str(def)->group("Config keys");
  }
}

double parse_double(const std::map<std::string, std::string>& kv,
                    const std::string& key) {
  try {
    return std::stod(kv.at(key));
  } catch (const std::exception&) {
    throw pef::ValueError("bad value for " + key + ": " + kv.at(key));
  }
}

int parse_int(const std::map<std::string, std::string>& kv,
              const std::string& key) {
  try {
    return std::stoi(kv.at(key));
  } catch (const std::exception&) {
    throw pef::ValueError("bad value for " + key + ": " + kv.at(key));
  }
}

// Merge defaults, config file, PEF_OUT, and flags into a typed RunConfig.
RunConfig build_config(const CommonArgs& args) {
  auto kv = default_kv();
  std::set<std::string> explicit_keys;
  if (!args.config_path.empty()) {
    for (auto& [key, value] : pef::parse_kv_file(args.config_path)) {
      if (!kv.count(key)) throw pef::ValueError("unknown config key: " + key);
      kv[key] = value;
      explicit_keys.insert(key);
    }
  }
  for (auto& [key, value] : args.flag_values) {
    if (args.cmd->count("--" + key)) {
      kv[key] = value;
      explicit_keys.insert(key);
    }
  }

  RunConfig cfg;
  cfg.merged = kv;
  cfg.model = pef::ModelConfig::from_kv(kv);
  cfg.schedule.encoder_lr = parse_double(kv, "train.encoder_lr");
  cfg.schedule.decoder_lr = parse_double(kv, "train.decoder_lr");
  cfg.schedule.drop_factor = parse_double(kv, "train.drop_factor");
  cfg.schedule.drop_epoch = parse_int(kv, "train.drop_epoch");
  cfg.schedule.epochs = parse_int(kv, "train.epochs");
  cfg.schedule.batch_size = parse_int(kv, "train.batch_size");
  cfg.grad_clip = parse_double(kv, "train.grad_clip");
  cfg.checkpoint_every = parse_int(kv, "train.checkpoint_every");
  cfg.matching.lambda_l1 = parse_double(kv, "match.lambda_l1");
  cfg.matching.noobj_weight = parse_double(kv, "match.noobj_weight");
  cfg.aug_enabled = kv.at("aug.enabled") != "0";
  cfg.aug.scale_min = parse_double(kv, "aug.scale_min");
  cfg.aug.scale_max = parse_double(kv, "aug.scale_max");
  cfg.aug.rotation_deg = parse_double(kv, "aug.rotation_deg");
  cfg.aug.flip_prob = parse_double(kv, "aug.flip_prob");
  cfg.aug.flip_map = pef::FlipMap::for_joint_count(cfg.model.joints);
  cfg.flip_test = kv.at("eval.flip_test") != "0";
  cfg.argmax_filtered = kv.at("eval.argmax_filtered") != "0";

  cfg.seed = args.seed;
  cfg.deterministic = args.deterministic;
  cfg.jobs = args.deterministic ? 1 : std::max(1, args.jobs);
  // model init follows the run seed unless pinned explicitly
  if (!explicit_keys.count("model.seed")) cfg.model.seed = cfg.seed;

  cfg.out_dir = "pef_out";
  if (const char* env = std::getenv("PEF_OUT")) cfg.out_dir = env;
  if (args.cmd->count("--out")) cfg.out_dir = args.out_dir;
  return cfg;
}

fs::path ensure_out_dir(const RunConfig& cfg) {
  fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  return dir;
}

// --- synth -------------------------------------------------------------------

int cmd_synth(const RunConfig& cfg, int count, const std::string& dir_flag,
              double min_contrast) {
  const fs::path dir =
      dir_flag.empty() ? ensure_out_dir(cfg) / "dataset" : fs::path(dir_flag);
  std::vector<pef::SynthSample> samples;
  samples.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    // per-sample stream: deterministic and independent of count
    std::mt19937_64 rng(pef::sample_rng_seed(cfg.seed, 0,
                                             static_cast<std::uint64_t>(i)));
    samples.push_back(pef::synth_stick_figure(rng, cfg.model.joints,
                                              cfg.model.width,
                                              cfg.model.height, min_contrast));
  }
  pef::write_coco_dataset(dir.string(), samples, cfg.model.joints);
  std::cout << "wrote " << count << " samples to " << dir.string() << "\n";
  return 0;
}

// --- train -------------------------------------------------------------------

std::vector<pef::CropResult> load_crops(const pef::Dataset& ds, int w, int h) {
  std::vector<pef::CropResult> crops;
  crops.reserve(ds.instances.size());
  for (const auto& inst : ds.instances) {
    const pef::ImageRef& ref = ds.image_for(inst);
    const pef::Image img =
        pef::read_ppm((fs::path(ds.root_dir) / ref.file_name).string());
    crops.push_back(pef::crop_and_normalize(img, inst, w, h));
  }
  return crops;
}

template <class RealT>
pef::Checkpoint<RealT> snapshot_with_optimizer(pef::PoseModel<RealT>& model,
                                               pef::AdamW<RealT>& opt,
                                               int epoch) {
  pef::Checkpoint<RealT> ck = pef::snapshot(model, epoch);
  ck.has_optimizer_state = true;
  ck.optimizer_step = opt.step_count;
  for (auto& [name, t] : model.named_params()) {
    auto& m1 = opt.m[name];
    auto& m2 = opt.v[name];
    if (m1.size() != t.size()) m1.assign(t.size(), RealT(0));
    if (m2.size() != t.size()) m2.assign(t.size(), RealT(0));
    ck.moments1.emplace_back(name, pef::Tensor<RealT>(t.shape(), m1));
    ck.moments2.emplace_back(name, pef::Tensor<RealT>(t.shape(), m2));
  }
  return ck;
}

int cmd_train(const RunConfig& cfg, const std::string& data_path) {
  cfg.model.validate();
  cfg.schedule.validate();
  const fs::path out = ensure_out_dir(cfg);
  const pef::Dataset ds = pef::load_coco_keypoints(data_path);
  if (ds.instances.empty()) throw pef::DataError("train: dataset is empty");
  if (ds.num_joints != cfg.model.joints)
    throw pef::DataError("train: dataset has " + std::to_string(ds.num_joints) +
                         " joints, model expects " +
                         std::to_string(cfg.model.joints));
  const std::vector<pef::CropResult> crops =
      load_crops(ds, cfg.model.width, cfg.model.height);

  pef::PoseModel<Real> model(cfg.model);
  pef::AdamW<Real> opt;
  std::cout << "training " << pef::variant_name(cfg.model.variant) << " ("
            << model.param_count() << " params) on " << crops.size()
            << " instances for " << cfg.schedule.epochs << " epochs\n";

  std::ofstream log_stream(out / "loss_log.txt", std::ios::trunc);
  if (!log_stream) throw pef::DataError("cannot write loss log");

  pef::TrainOptions<Real> options;
  options.schedule = cfg.schedule;
  options.matching = cfg.matching;
  options.seed = cfg.seed;
  options.grad_clip = cfg.grad_clip;
  options.on_step = [&](const pef::TrainLogEntry& e) {
    log_stream << pef::format_log_entry(e) << "\n";
    log_stream.flush();
  };
  options.on_epoch = [&](int epoch, pef::PoseModel<Real>& m,
                         pef::AdamW<Real>& o) {
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
      const auto path =
          out / ("checkpoint_epoch" + std::to_string(epoch + 1) + ".ckpt");
      pef::save_checkpoint(path.string(), snapshot_with_optimizer(m, o, epoch + 1));
    }
  };

  auto provider = [&](int epoch, std::size_t i) {
    const pef::CropResult& c = crops[i];
    pef::TrainSample<Real> sample;
    if (cfg.aug_enabled) {
      std::mt19937_64 rng(pef::sample_rng_seed(
          cfg.seed, static_cast<std::uint64_t>(epoch), i));
      pef::AugmentResult a = pef::augment(c.crop, c.instance, cfg.aug, rng);
      sample.image = pef::image_to_tensor<Real>(a.image);
      sample.gt = pef::labeled_joints(a.instance);
    } else {
      sample.image = pef::image_to_tensor<Real>(c.crop);
      sample.gt = pef::labeled_joints(c.instance);
    }
    if (sample.gt.empty())
      sample.gt = pef::labeled_joints(c.instance);  // augmentation pushed all out
    return sample;
  };

  const auto log = pef::train_model<Real>(model, opt, crops.size(), provider,
                                          options);
  pef::save_checkpoint((out / "checkpoint.ckpt").string(),
                       snapshot_with_optimizer(model, opt, cfg.schedule.epochs));
  std::cout << "final loss " << log.back().total << " after "
            << log.size() << " steps; checkpoint at "
            << (out / "checkpoint.ckpt").string() << "\n";
  return 0;
}

// --- eval --------------------------------------------------------------------

std::vector<pef::EvalSample> load_eval_samples(const pef::Dataset& ds, int w,
                                               int h) {
  std::vector<pef::EvalSample> samples;
  for (const auto& crop : load_crops(ds, w, h))
    samples.push_back({crop.crop, crop.instance});
  return samples;
}

int cmd_eval(const RunConfig& cfg, const std::string& ckpt_path,
             const std::string& data_path) {
  const fs::path out = ensure_out_dir(cfg);
  const auto ck = pef::load_checkpoint<Real>(ckpt_path);
  pef::PoseModel<Real> model = pef::restore_model(ck);
  const int k = model.config().joints;
  const pef::Dataset ds = pef::load_coco_keypoints(data_path);
  if (ds.num_joints != k)
    throw pef::DataError("eval: dataset joints != model joints");
  const auto samples =
      load_eval_samples(ds, model.config().width, model.config().height);

  const pef::FlipMap flip_map = pef::FlipMap::for_joint_count(k);
  pef::Predictor predict = [&](const pef::Image& crop,
                               const pef::KeypointInstance&) {
    return pef::predict_joints(model, crop, cfg.flip_test, flip_map,
                               cfg.argmax_filtered);
  };
  const pef::EvalMetrics metrics =
      pef::evaluate(predict, samples, pef::sigmas_for_joint_count(k), cfg.jobs);
  const std::string report = pef::metrics_report(metrics);
  std::ofstream(out / "metrics.txt") << report;
  std::cout << report;
  return 0;
}

// --- predict -----------------------------------------------------------------

int cmd_predict(const RunConfig& cfg, const std::string& ckpt_path,
                const std::string& image_path, std::vector<double> bbox,
                bool overlay) {
  const fs::path out = ensure_out_dir(cfg);
  const auto ck = pef::load_checkpoint<Real>(ckpt_path);
  pef::PoseModel<Real> model = pef::restore_model(ck);
  const int k = model.config().joints;
  const pef::Image src = pef::read_ppm(image_path);

  pef::KeypointInstance inst;
  if (bbox.empty())
    bbox = {0, 0, static_cast<double>(src.width),
            static_cast<double>(src.height)};
  if (bbox.size() != 4) throw pef::ValueError("--bbox needs x y w h");
  for (int i = 0; i < 4; ++i) inst.bbox[i] = bbox[static_cast<std::size_t>(i)];
  inst.area = inst.bbox[2] * inst.bbox[3];
  // a dummy joint so the crop helper accepts the instance
  inst.joints.push_back({0, inst.bbox[0], inst.bbox[1], 1});
  const pef::CropResult crop =
      pef::crop_and_normalize(src, inst, model.config().width,
                              model.config().height);

  const pef::PosePrediction pred =
      pef::predict_joints(model, crop.crop, cfg.flip_test,
                          pef::FlipMap::for_joint_count(k),
                          cfg.argmax_filtered);

  const pef::Affine2 crop_to_src = crop.src_to_crop.inverse();
  const auto& names = pef::coco_joint_names();
  std::string text = "# class name x_src y_src x_norm y_norm confidence\n";
  for (int cls = 0; cls < k; ++cls) {
    const auto& p = pred[static_cast<std::size_t>(cls)];
    double sx, sy;
    crop_to_src.apply(p.x * model.config().width,
                      p.y * model.config().height, sx, sy);
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%d %s %.2f %.2f %.5f %.5f %.4f\n", cls,
                  (k == 17 ? names[static_cast<std::size_t>(cls)].c_str()
                           : ("joint" + std::to_string(cls)).c_str()),
                  sx, sy, p.x, p.y, p.confidence);
    text += buf;
  }
  std::cout << text;
  std::ofstream(out / "prediction.txt") << text;

  if (overlay) {
    pef::Image img = crop.crop;
    const int w = img.width, h = img.height;
    std::vector<std::pair<int, int>> edges;
    if (k == 17) {
      edges = pef::coco_skeleton();
    } else {
      for (int j = 0; j + 1 < k; ++j) edges.push_back({j, j + 1});
    }
    for (const auto& [a, b] : edges)
      pef::draw_line(img, pred[static_cast<std::size_t>(a)].x * w,
                     pred[static_cast<std::size_t>(a)].y * h,
                     pred[static_cast<std::size_t>(b)].x * w,
                     pred[static_cast<std::size_t>(b)].y * h, 0.8f, 0.1f,
                     0.9f, 0.1f);
    for (const auto& p : pred) {
      pef::draw_line(img, p.x * w - 3, p.y * h, p.x * w + 3, p.y * h, 0.7f,
                     1.f, 0.1f, 0.1f);
      pef::draw_line(img, p.x * w, p.y * h - 3, p.x * w, p.y * h + 3, 0.7f,
                     1.f, 0.1f, 0.1f);
    }
    pef::write_ppm((out / "overlay.ppm").string(), img);
    std::cout << "overlay written to " << (out / "overlay.ppm").string()
              << "\n";
  }
  return 0;
}

// --- gradcheck ---------------------------------------------------------------

int cmd_gradcheck(const RunConfig& cfg, const std::string& scope) {
  const auto checks = pef::run_gradcheck_suite(1e-5, 1e-4, cfg.seed + 42);
  auto in_scope = [&](const std::string& name) {
    const bool is_block = name.rfind("block-", 0) == 0;
    const bool is_model = name.rfind("model-", 0) == 0;
    if (scope == "all") return true;
    if (scope == "primitives") return !is_block && !is_model;
    if (scope == "blocks") return is_block;
    if (scope == "model") return is_model;
    throw pef::ValueError("unknown scope: " + scope);
  };
  bool all_pass = true;
  int ran = 0;
  for (const auto& check : checks) {
    if (!in_scope(check.name)) continue;
    ++ran;
    all_pass = all_pass && check.report.pass;
    char buf[200];
    std::snprintf(buf, sizeof(buf), "%-28s %s  max rel err %.3e (%zu probes)\n",
                  check.name.c_str(), check.report.pass ? "PASS" : "FAIL",
                  check.report.max_rel_error, check.report.probes);
    std::cout << buf;
  }
  if (ran == 0) throw pef::ValueError("scope matched no checks: " + scope);
  std::cout << (all_pass ? "gradcheck: all pass\n" : "gradcheck: FAILURES\n");
  if (!all_pass)
    throw pef::NumericError("gradient check failed");
  return 0;
}

// --- bench -------------------------------------------------------------------

int cmd_bench(const RunConfig& cfg, std::vector<int> tokens, int dim,
              int reps) {
  const fs::path out = ensure_out_dir(cfg);
  if (tokens.empty())
    for (int n = 256; n <= 4096; n *= 2) tokens.push_back(n);
  const pef::BenchResult result =
      pef::bench_attention_scaling(tokens, dim, reps, cfg.seed + 7);
  const std::string report = pef::bench_report(result);
  std::ofstream(out / "bench.txt") << report;
  std::cout << report;
  return 0;
}

// --- inspect -----------------------------------------------------------------

int cmd_inspect(const std::string& ckpt_path) {
  const auto ck = pef::load_checkpoint<Real>(ckpt_path);
  std::cout << pef::kv_to_string(ck.config.to_kv());
  std::cout << "epoch = " << ck.epoch << "\n";
  std::size_t total = 0;
  for (const auto& [name, t] : ck.params) {
    std::cout << name << " " << pef::shape_str(t.shape()) << " " << t.size()
              << "\n";
    total += t.size();
  }
  std::cout << "parameters = " << total << "\n";
  std::cout << "optimizer_state = " << (ck.has_optimizer_state ? "yes" : "no");
  if (ck.has_optimizer_state) std::cout << " (step " << ck.optimizer_step << ")";
  std::cout << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"2D human pose estimation from first principles"};
  app.require_subcommand(1);

  CommonArgs synth_args, train_args, eval_args, predict_args, grad_args,
      bench_args, inspect_args;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common_flags(synth, synth_args);
  int synth_count = 128;
  std::string synth_dir;
  double synth_contrast = 0.5;
  synth->add_option("--count", synth_count, "number of samples")
      ->default_str("128");
  synth->add_option("--dir", synth_dir, "dataset directory (default OUT/dataset)");
  synth->add_option("--min-contrast", synth_contrast,
                    "minimum figure/background contrast")->default_str("0.5");

  auto* train = app.add_subcommand("train", "train a model");
  add_common_flags(train, train_args);
  std::string train_data;
  train->add_option("--data", train_data, "COCO-format annotation file")
      ->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common_flags(eval, eval_args);
  std::string eval_ckpt, eval_data;
  eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "COCO-format annotation file")
      ->required();

  auto* predict = app.add_subcommand("predict", "predict joints for one image");
  add_common_flags(predict, predict_args);
  std::string pred_ckpt, pred_image;
  std::vector<double> pred_bbox;
  bool pred_no_overlay = false;
  predict->add_option("--ckpt", pred_ckpt, "checkpoint file")->required();
  predict->add_option("--image", pred_image, "input image (P6 PPM)")
      ->required();
  predict->add_option("--bbox", pred_bbox, "person box: x y w h (source px)")
      ->expected(4);
  predict->add_flag("--no-overlay", pred_no_overlay, "skip overlay rendering");

  auto* gradcheck = app.add_subcommand("gradcheck",
                                       "finite-difference gradient checks");
  add_common_flags(gradcheck, grad_args);
  std::string grad_scope = "all";
  gradcheck->add_option("--scope", grad_scope,
                        "all | primitives | blocks | model")
      ->default_str("all");
  gradcheck->add_flag("--all", [&grad_scope](std::int64_t) {
    grad_scope = "all";
  }, "check everything (same as --scope all)");

  auto* bench = app.add_subcommand("bench", "attention scaling benchmark");
  add_common_flags(bench, bench_args);
  std::vector<int> bench_tokens;
  int bench_dim = 64, bench_reps = 20;
  bench->add_option("--tokens", bench_tokens,
                    "token counts, ascending (default 256..4096 doubling)");
  bench->add_option("--dim", bench_dim, "embedding dim")->default_str("64");
  bench->add_option("--reps", bench_reps, "timed repetitions per size")
      ->default_str("20");

  auto* inspect = app.add_subcommand("inspect", "describe a checkpoint");
  add_common_flags(inspect, inspect_args);
  std::string inspect_ckpt;
  inspect->add_option("--ckpt", inspect_ckpt, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed())
      return cmd_synth(build_config(synth_args), synth_count, synth_dir,
                       synth_contrast);
    if (train->parsed()) return cmd_train(build_config(train_args), train_data);
    if (eval->parsed())
      return cmd_eval(build_config(eval_args), eval_ckpt, eval_data);
    if (predict->parsed())
      return cmd_predict(build_config(predict_args), pred_ckpt, pred_image,
                         pred_bbox, !pred_no_overlay);
    if (gradcheck->parsed())
      return cmd_gradcheck(build_config(grad_args), grad_scope);
    if (bench->parsed())
      return cmd_bench(build_config(bench_args), bench_tokens, bench_dim,
                       bench_reps);
    if (inspect->parsed()) return cmd_inspect(inspect_ckpt);
  } catch (const pef::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
