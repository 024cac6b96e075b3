// midccnn: synthetic-data generation, training, evaluation, the
// ten-repetition protocol, gradient checking and attention-map export.
// Exit codes: 0 success, 1 verification failure, 2 usage/config error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "midccnn/checkpoint.hpp"
#include "midccnn/eval.hpp"

namespace fs = std::filesystem;
using namespace midccnn;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) fail("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) fail("write failed for " + path.string());
}

void ensure_run_dir(const fs::path& dir) { fs::create_directories(dir); }

LabeledDataset load_for(const RunConfig& config, const std::string& data_dir) {
  LabeledDataset ds = load_image_dir(data_dir, config.model.input_size);
  if (ds.num_classes() != config.model.num_classes)
    fail("config expects " + std::to_string(config.model.num_classes) + " classes but " +
         data_dir + " provides " + std::to_string(ds.num_classes()));
  return ds;
}

int cmd_synth(int classes, int per_class, int size, uint64_t seed, const std::string& out,
              bool force) {
  if (fs::exists(out) && !fs::is_empty(out) && !force)
    fail(out + " exists and is not empty (use --force to overwrite)");
  LabeledDataset ds = synth_generate(classes, per_class, size, seed);
  for (const auto& name : ds.class_names) fs::create_directories(fs::path(out) / name);
  std::vector<int> counter(ds.class_names.size(), 0);
  char buf[32];
  for (const auto& item : ds.items) {
    std::snprintf(buf, sizeof(buf), "%04d.ppm", counter[item.label]++);
    write_ppm((fs::path(out) / ds.class_names[item.label] / buf).string(), item.image);
  }
  std::cout << ds.items.size() << " images in " << ds.class_names.size() << " classes under "
            << out << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir) {
  RunConfig config = run_config_from_file(config_path);
  ensure_run_dir(out_dir);
  write_text(fs::path(out_dir) / "resolved_config.json", run_config_to_json(config));
  LabeledDataset ds = load_for(config, data_dir);
  Bundle bundle = make_bundle(config);
  TrainResult result = train(*bundle.model, bundle.head.get(), ds, config.train);
  write_history_csv((fs::path(out_dir) / "history.csv").string(), result);
  save_bundle((fs::path(out_dir) / "model.midc").string(), bundle, result.optimizer.get());
  const auto& last = result.history.back();
  std::cout << "trained " << result.history.size() << " epochs; final mean loss "
            << last.mean_loss << ", train accuracy " << 100.0 * last.train_acc << "%\n"
            << "checkpoint: " << (fs::path(out_dir) / "model.midc").string() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& out) {
  Bundle bundle = load_bundle(ckpt_path);
  LabeledDataset ds = load_for(bundle.config, data_dir);
  EvalResult result = evaluate_oa(bundle, ds, bundle.config.train.batch_size);
  EvalReport report;
  report.per_rep_oa = {result.oa_percent};
  report.mean_oa = result.oa_percent;
  report.confusion = result.confusion;
  write_text(out, report_to_json(report));
  std::printf("OA: %.4f%% (%zu images); confusion written to %s\n", result.oa_percent,
              ds.items.size(), out.c_str());
  return 0;
}

int cmd_protocol(const std::string& config_path, const std::string& data_dir,
                 const std::string& out_dir, int reps) {
  RunConfig config = run_config_from_file(config_path);
  ensure_run_dir(out_dir);
  write_text(fs::path(out_dir) / "resolved_config.json", run_config_to_json(config));
  LabeledDataset ds = load_for(config, data_dir);
  ProtocolResult result = protocol(ds, config, reps);
  write_text(fs::path(out_dir) / "report.json", report_to_json(result.report));
  write_history_csv((fs::path(out_dir) / "history.csv").string(), result.last_history);
  save_bundle((fs::path(out_dir) / "model.midc").string(), result.last_bundle);
  std::printf("OA over %d repetitions: %.4f +/- %.4f\n", reps, result.report.mean_oa,
              result.report.std_oa);
  std::cout << "report: " << (fs::path(out_dir) / "report.json").string() << "\n";
  return 0;
}

RunConfig gradcheck_desk_config() {
  RunConfig config = desk_profile();
  config.model.input_size = 64;
  config.model.init_channels = 8;
  config.model.growth_rate = 4;
  config.model.num_classes = 3;
  config.mil.hidden_dim = 8;
  return config;
}

int cmd_gradcheck(const std::string& profile, const std::string& config_path, double tolerance,
                  int coords, uint64_t seed) {
  RunConfig config;
  if (profile == "desk") {
    config = gradcheck_desk_config();
  } else if (profile == "custom") {
    if (config_path.empty()) fail("gradcheck --profile custom requires --config");
    config = run_config_from_file(config_path);
  } else {
    fail("unknown gradcheck profile '" + profile + "' (expected desk|custom)");
  }
  Bundle bundle = make_bundle(config);
  Rng rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  auto input = make_tensor({1, 3, config.model.input_size, config.model.input_size});
  for (auto& v : input->values) v = uni(rng);
  GradCheckReport report = gradcheck(*bundle.model, bundle.head.get(), input, /*label=*/0,
                                     tolerance, static_cast<size_t>(coords), seed);
  std::printf("gradcheck: max rel err %.3e over %zu coordinates (tolerance %.1e)\n",
              report.max_rel_err, report.coords_checked, tolerance);
  for (size_t i = 0; i < std::min<size_t>(report.failures.size(), 10); ++i) {
    const auto& f = report.failures[i];
    std::printf("  FAIL %s[%lld]: analytic %.6e vs numeric %.6e (rel %.3e)\n", f.param.c_str(),
                static_cast<long long>(f.index), f.analytic, f.numeric, f.rel_err);
  }
  return report.max_rel_err < tolerance ? 0 : 1;
}

int cmd_attention(const std::string& ckpt_path, const std::string& image_path,
                  const std::string& out_prefix) {
  Bundle bundle = load_bundle(ckpt_path);
  if (!bundle.head) fail("checkpoint uses the gap_fc head; attention export needs a mil model");
  if (bundle.head->config().method != MilPooling::attention)
    fail("checkpoint pooling method is '" + to_string(bundle.head->config().method) +
         "'; attention export needs method 'attention'");
  const int size = bundle.config.model.input_size;
  TensorPtr img = resize_bilinear(read_image(image_path), size, size);
  auto batch = make_tensor({1, 3, size, size}, img->values);
  Tape tape;
  TensorPtr features = bundle.model->forward_features(tape, batch, Mode::eval);
  BagPrediction pred = bundle.head->predict(features);
  if (fs::path(out_prefix).has_parent_path()) fs::create_directories(fs::path(out_prefix).parent_path());
  export_attention_map(pred, out_prefix, size);
  int best = 0;
  for (size_t c = 1; c < pred.p_bag.size(); ++c)
    if (pred.p_bag[c] > pred.p_bag[best]) best = static_cast<int>(c);
  std::printf("predicted class %d (p=%.4f); %dx%d attention grid written to %s.{csv,pgm}\n", best,
              pred.p_bag[best], pred.grid_h, pred.grid_w, out_prefix.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DCCNN backbone with attention-based multiple-instance pooling"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic localized-cue dataset");
  int classes = 3, per_class = 100, size = 96;
  uint64_t synth_seed = 0;
  std::string synth_out;
  bool force = false;
  synth->add_option("--classes", classes, "number of glyph classes");
  synth->add_option("--per-class", per_class, "images per class");
  synth->add_option("--size", size, "image side (multiple of 32)");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--out", synth_out, "output dataset directory")->required();
  synth->add_flag("--force", force, "write into a non-empty directory");

  auto* train_cmd = app.add_subcommand("train", "train on a dataset directory");
  std::string config_path, data_dir, out_dir;
  train_cmd->add_option("--config", config_path, "run config JSON")->required();
  train_cmd->add_option("--data", data_dir, "dataset root (one subdirectory per class)")->required();
  train_cmd->add_option("--out", out_dir, "run directory")->required();

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ckpt_path, eval_out = "confusion.json";
  eval_cmd->add_option("--checkpoint", ckpt_path, "model.midc path")->required();
  eval_cmd->add_option("--data", data_dir, "dataset root")->required();
  eval_cmd->add_option("--out", eval_out, "confusion JSON output path");

  auto* proto = app.add_subcommand("protocol", "repeated split/train/eval with mean +/- std OA");
  int reps = 10;
  proto->add_option("--config", config_path, "run config JSON")->required();
  proto->add_option("--data", data_dir, "dataset root")->required();
  proto->add_option("--out", out_dir, "run directory")->required();
  proto->add_option("--reps", reps, "number of repetitions");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of all gradients");
  std::string profile = "desk";
  double tolerance = 1e-4;
  int coords = 200;
  uint64_t gc_seed = 0;
  gc->add_option("--profile", profile, "desk or custom");
  gc->add_option("--config", config_path, "run config JSON (custom profile)");
  gc->add_option("--tolerance", tolerance, "max relative error allowed");
  gc->add_option("--coords", coords, "minimum coordinates to sample");
  gc->add_option("--seed", gc_seed, "input/sampling seed");

  auto* attn = app.add_subcommand("attention", "export an attention heatmap for one image");
  std::string image_path, attn_out;
  attn->add_option("--checkpoint", ckpt_path, "model.midc path")->required();
  attn->add_option("--image", image_path, "input image (PPM/PGM)")->required();
  attn->add_option("--out", attn_out, "output prefix for .csv/.pgm")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(classes, per_class, size, synth_seed, synth_out, force);
    if (train_cmd->parsed()) return cmd_train(config_path, data_dir, out_dir);
    if (eval_cmd->parsed()) return cmd_eval(ckpt_path, data_dir, eval_out);
    if (proto->parsed()) return cmd_protocol(config_path, data_dir, out_dir, reps);
    if (gc->parsed()) return cmd_gradcheck(profile, config_path, tolerance, coords, gc_seed);
    if (attn->parsed()) return cmd_attention(ckpt_path, image_path, attn_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
