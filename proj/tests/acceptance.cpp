// Acceptance suite: one pass/fail line per criterion, nonzero exit when
// anything fails. The heavy statistical experiment (criterion 6) runs the
// pinned desk configuration end to end, so a full run takes over an hour
// on a laptop CPU.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "midccnn/checkpoint.hpp"
#include "midccnn/eval.hpp"
#include "support/testutil.hpp"

namespace fs = std::filesystem;
using namespace midccnn;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;
fs::path g_work;
std::string g_cli;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void report(int id, const std::string& name, bool pass, const std::string& detail,
            double seconds) {
  std::printf("%s criterion %d [%7.1fs] %s — %s\n", pass ? "PASS" : "FAIL", id, seconds,
              name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

int run_cli(const std::string& args, std::string* output = nullptr) {
  const std::string cmd = g_cli + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return -1;
  std::string captured;
  char buf[512];
  while (fgets(buf, sizeof(buf), pipe)) captured += buf;
  const int status = pclose(pipe);
  if (output) *output = captured;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig desk_gradcheck_config() {
  RunConfig cfg = desk_profile();
  cfg.model.input_size = 64;
  cfg.model.init_channels = 8;
  cfg.model.growth_rate = 4;
  cfg.mil.hidden_dim = 8;
  return cfg;
}

RunConfig tiny_run_config(MilPooling method = MilPooling::attention) {
  RunConfig cfg = desk_profile();
  cfg.model.input_size = 32;
  cfg.model.init_channels = 8;
  cfg.model.growth_rate = 4;
  cfg.mil.hidden_dim = 8;
  cfg.mil.method = method;
  cfg.train.stage_epochs = 1;
  cfg.train.batch_size = 4;
  return cfg;
}

// --- criterion 1: gradient correctness on the desk MIDCCNN ---------------
void criterion_1() {
  const auto start = Clock::now();
  RunConfig cfg = desk_gradcheck_config();
  Bundle bundle = make_bundle(cfg);
  Rng rng(0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  auto input = make_tensor({1, 3, 64, 64});
  for (auto& v : input->values) v = uni(rng);

  GradCheckReport rep = gradcheck(*bundle.model, bundle.head.get(), input, 0, 1e-4, 200, 0);
  const int cli_exit = run_cli("gradcheck --profile desk --tolerance 1e-4 --seed 0");
  const double secs = seconds_since(start);

  char detail[256];
  std::snprintf(detail, sizeof(detail),
                "max rel err %.3e over %zu coords (tol 1e-4); cmd_gradcheck exit %d",
                rep.max_rel_err, rep.coords_checked, cli_exit);
  report(1, "gradient correctness (desk MIDCCNN vs central differences)",
         rep.max_rel_err < 1e-4 && rep.coords_checked >= 200 && cli_exit == 0 && secs < 300.0,
         detail, secs);
}

// --- criterion 2: architecture conformance -------------------------------
void criterion_2() {
  const auto start = Clock::now();
  bool ok = true;
  std::string why = "published layer geometry reproduced";

  DccnnConfig full;
  full.num_classes = 21;
  ShapePlan plan = plan_shapes(full);
  const int spatial[] = {112, 56, 56, 28, 28, 14, 14, 7, 7};
  for (int i = 0; i < 9; ++i)
    if (plan.stages[i].height != spatial[i]) ok = false;
  if (plan.stages.back().name != "classifier" || plan.stages.back().height != 1) ok = false;

  // transitions preserve channels, dense blocks add exactly 3k
  if (plan.find("dense_block_1")->channels != 64 + 3 * 32) ok = false;
  if (plan.find("transition_1")->channels != plan.find("dense_block_1")->channels) ok = false;
  if (plan.find("dense_block_2")->channels != 160 + 3 * 32) ok = false;
  if (plan.find("transition_3")->channels != plan.find("dense_block_3")->channels) ok = false;

  // plan matches a live forward at desk scale
  RunConfig desk = desk_profile();
  Bundle bundle = make_bundle(desk);
  Rng rng(1);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  auto x = make_tensor({1, 3, 96, 96});
  for (auto& v : x->values) v = uni(rng);
  Tape tape;
  std::vector<ShapePlan::Stage> observed;
  bundle.model->forward_features(tape, x, Mode::eval, nullptr, &observed);
  ShapePlan desk_plan = plan_shapes(desk.model);
  for (size_t i = 0; i < observed.size(); ++i) {
    if (observed[i].name != desk_plan.stages[i].name ||
        observed[i].channels != desk_plan.stages[i].channels ||
        observed[i].height != desk_plan.stages[i].height)
      ok = false;
  }
  if (bundle.model->weighted_conv_layers() != 23) ok = false;
  if (!ok) why = "stage mismatch against the published output sizes";
  report(2, "architecture conformance (shape plan vs published geometry)", ok, why, seconds_since(start));
}

// --- criterion 3: oracle equivalence --------------------------------------
void criterion_3() {
  const auto start = Clock::now();
  Rng rng(3);
  auto dim = [&](int lo, int hi) {
    return lo + static_cast<int>(rng() % static_cast<uint64_t>(hi - lo + 1));
  };
  double worst = 0.0;
  int conv_cases = 0, pool_cases = 0, mm_cases = 0, il_cases = 0;

  while (conv_cases < 100) {
    const int n = dim(1, 2), cin = dim(1, 4), h = dim(5, 10), w = dim(5, 10);
    const int cout = dim(1, 4), k = dim(1, 3), stride = dim(1, 2), pad = dim(0, 1);
    if (h + 2 * pad < k || w + 2 * pad < k) continue;
    Tape tape;
    auto x = testutil::rand_tensor({n, cin, h, w}, rng);
    auto wt = testutil::rand_tensor({cout, cin, k, k}, rng);
    auto b = testutil::rand_tensor({cout}, rng);
    auto y = ops::conv2d(tape, x, wt, b, stride, pad);
    auto e = testutil::naive_conv2d(x->values, n, cin, h, w, wt->values, cout, k, k, b->values,
                                    stride, pad);
    for (size_t j = 0; j < e.size(); ++j) worst = std::max(worst, std::abs(y->values[j] - e[j]));
    ++conv_cases;
  }
  while (pool_cases < 100) {
    const int n = dim(1, 2), c = dim(1, 4), h = dim(4, 10), w = dim(4, 10);
    const int k = dim(1, 3), stride = dim(1, 3), pad = dim(0, 1);
    if (h + 2 * pad < k || w + 2 * pad < k || pad >= k) continue;
    for (bool is_max : {true, false}) {
      Tape tape;
      auto x = testutil::rand_tensor({n, c, h, w}, rng);
      auto y = ops::pool2d(tape, is_max ? ops::PoolKind::max : ops::PoolKind::avg, x, k, stride,
                           pad);
      auto e = testutil::naive_pool2d(x->values, n, c, h, w, is_max, k, stride, pad);
      for (size_t j = 0; j < e.size(); ++j) worst = std::max(worst, std::abs(y->values[j] - e[j]));
    }
    ++pool_cases;
  }
  while (mm_cases < 100) {
    const int m = dim(1, 8), k = dim(1, 8), n = dim(1, 8);
    Tape tape;
    auto a = testutil::rand_tensor({m, k}, rng);
    auto b = testutil::rand_tensor({k, n}, rng);
    auto y = ops::matmul(tape, a, b);
    auto e = testutil::naive_matmul(a->values, b->values, m, k, n);
    for (size_t j = 0; j < e.size(); ++j) worst = std::max(worst, std::abs(y->values[j] - e[j]));
    ++mm_cases;
  }
  while (il_cases < 100) {
    const int c = dim(2, 6), n_c = dim(2, 5), h = dim(1, 4), w = dim(1, 4);
    MilHeadConfig hc;
    hc.num_classes = n_c;
    hc.in_channels = c;
    hc.hidden_dim = 4;
    MilHead head(hc);
    init_params(head.parameters(), 1000 + il_cases);
    Tape tape;
    auto f = testutil::rand_tensor({1, c, h, w}, rng);
    auto logits = head.instance_logits(tape, f);
    TensorPtr wt, b;
    for (const auto& p : head.parameters()) {
      if (p.name == "mil.instance.weight") wt = p.value;
      if (p.name == "mil.instance.bias") b = p.value;
    }
    for (int cls = 0; cls < n_c; ++cls)
      for (int s = 0; s < h * w; ++s) {
        double acc = b->values[cls];
        for (int ch = 0; ch < c; ++ch)
          acc += wt->values[cls * c + ch] * f->values[ch * h * w + s];
        worst = std::max(worst, std::abs(logits->values[cls * h * w + s] - acc));
      }
    ++il_cases;
  }

  const double secs = seconds_since(start);
  char detail[160];
  std::snprintf(detail, sizeof(detail), "100 cases per op, worst abs deviation %.2e", worst);
  report(3, "oracle equivalence (conv/pool/matmul/instance_logits vs naive loops)",
         worst <= 1e-12 && secs < 60.0, detail, secs);
}

// --- criterion 4: MIL pooling identities ----------------------------------
void criterion_4() {
  const auto start = Clock::now();
  Rng rng(4);
  auto dim = [&](int lo, int hi) {
    return lo + static_cast<int>(rng() % static_cast<uint64_t>(hi - lo + 1));
  };
  bool ok = true;
  std::string why = "all identities hold";

  // (a) attention weights sum to 1 within 1e-9 across 1000 random cases
  for (int i = 0; i < 1000 && ok; ++i) {
    const int n_c = dim(2, 5), h = dim(1, 4), w = dim(1, 4), l = dim(2, 8);
    MilHeadConfig hc;
    hc.num_classes = n_c;
    hc.in_channels = 6;
    hc.hidden_dim = l;
    MilHead head(hc);
    init_params(head.parameters(), 5000 + i);
    Tape tape;
    auto logits = testutil::rand_tensor({2, n_c, h, w}, rng, -5.0, 5.0);
    auto weights = head.attention_weights(tape, logits);
    for (int b = 0; b < 2; ++b) {
      double s = 0.0;
      for (int m = 0; m < h * w; ++m) s += weights->values[b * h * w + m];
      if (std::abs(s - 1.0) > 1e-9) {
        ok = false;
        why = "attention weights drifted from 1 at case " + std::to_string(i);
      }
    }
  }

  // (b) w2 = 0 makes attention pooling equal mean pooling within 1e-9
  if (ok) {
    MilHeadConfig hc;
    hc.num_classes = 4;
    hc.in_channels = 6;
    hc.hidden_dim = 8;
    MilHead head(hc);
    init_params(head.parameters(), 77);
    for (const auto& p : head.parameters())
      if (p.name == "mil.attention.w2")
        for (auto& v : p.value->values) v = 0.0;
    Tape tape;
    auto features = testutil::rand_tensor({3, 6, 3, 3}, rng);
    auto out = head.forward(tape, features);
    auto mean = ops::instance_mean(tape, out.instance_probs);
    for (size_t i = 0; i < mean->values.size(); ++i)
      if (std::abs(out.p_bag->values[i] - mean->values[i]) > 1e-9) {
        ok = false;
        why = "w2=0 did not reduce to mean pooling";
      }
  }

  // (c) a single-instance bag returns p_11 exactly
  if (ok) {
    MilHeadConfig hc;
    hc.num_classes = 5;
    hc.in_channels = 6;
    hc.hidden_dim = 8;
    MilHead head(hc);
    init_params(head.parameters(), 78);
    Tape tape;
    auto features = testutil::rand_tensor({1, 6, 1, 1}, rng);
    auto out = head.forward(tape, features);
    for (int c = 0; c < 5; ++c)
      if (out.p_bag->values[c] != out.instance_probs->values[c]) {
        ok = false;
        why = "single-instance bag is not exactly p_11";
      }
  }

  report(4, "MIL pooling identities (normalization, mean reduction, single instance)", ok, why,
         seconds_since(start));
}

// --- criterion 5: overfit sanity -------------------------------------------
void criterion_5() {
  const auto start = Clock::now();
  RunConfig cfg = desk_profile();
  cfg.model.seed = 0;
  cfg.train.seed = 0;
  cfg.train.stage_epochs = 50;  // ladder allows up to 200 epochs
  LabeledDataset ds = synth_generate(3, 8, 96, 0);

  Bundle bundle = make_bundle(cfg);
  TrainResult result = train(*bundle.model, bundle.head.get(), ds, cfg.train);
  int reached = -1;
  for (const auto& e : result.history)
    if (e.train_acc == 1.0) {
      reached = e.epoch;
      break;
    }
  const double secs = seconds_since(start);
  char detail[160];
  std::snprintf(detail, sizeof(detail), "100%% train accuracy first reached at epoch %d", reached);
  report(5, "overfit sanity (24-image synthetic set, seed 0, <= 200 epochs)",
         reached >= 0 && reached < 200 && secs < 600.0, detail, secs);
}

// --- criterion 6: synthetic ordering experiment ----------------------------
void criterion_6() {
  const auto start = Clock::now();
  LabeledDataset ds = synth_generate(3, 100, 96, 7);

  double means[3] = {0, 0, 0};
  const MilPooling methods[3] = {MilPooling::attention, MilPooling::mean, MilPooling::max};
  std::string per_method;
  for (int mi = 0; mi < 3; ++mi) {
    RunConfig cfg = desk_profile();  // pinned seeds shared across methods
    cfg.model.seed = 100;
    cfg.train.seed = 100;
    cfg.split_seed = 1000;
    cfg.mil.method = methods[mi];
    ProtocolResult result = protocol(ds, cfg, 5);
    means[mi] = result.report.mean_oa;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%s %.2f+/-%.2f  ", to_string(methods[mi]).c_str(),
                  result.report.mean_oa, result.report.std_oa);
    per_method += buf;
  }
  const double secs = seconds_since(start);
  const bool ordered = means[0] >= means[1] && means[1] >= means[2];
  const bool gap = means[0] - means[2] >= 2.0;
  report(6, "synthetic ordering (attention >= mean >= max, gap >= 2 points, 5 reps each)",
         ordered && gap && secs <= 7200.0, per_method, secs);
}

// --- criterion 7: determinism ----------------------------------------------
void criterion_7() {
  const auto start = Clock::now();
  const fs::path dir = g_work / "det";
  fs::create_directories(dir);
  const fs::path cfg_path = dir / "tiny.json";
  {
    RunConfig cfg = tiny_run_config();
    std::ofstream(cfg_path) << run_config_to_json(cfg);
  }
  const fs::path data = dir / "data";
  bool ok = run_cli("synth --classes 3 --per-class 6 --size 32 --seed 5 --out " + data.string()) ==
            0;
  for (const char* tag : {"a", "b"})
    ok = ok && run_cli("protocol --config " + cfg_path.string() + " --data " + data.string() +
                       " --out " + (dir / tag).string() + " --reps 2") == 0;
  const bool reports_equal = slurp(dir / "a" / "report.json") == slurp(dir / "b" / "report.json");
  const bool ckpts_equal = slurp(dir / "a" / "model.midc") == slurp(dir / "b" / "model.midc");
  report(7, "determinism (two identical protocol runs, byte-identical artifacts)",
         ok && reports_equal && ckpts_equal,
         std::string("report.json ") + (reports_equal ? "identical" : "differs") +
             ", model.midc " + (ckpts_equal ? "identical" : "differs"),
         seconds_since(start));
}

// --- criterion 8: persistence ----------------------------------------------
void criterion_8() {
  const auto start = Clock::now();
  const fs::path path = g_work / "roundtrip.midc";
  RunConfig cfg = tiny_run_config();
  Bundle bundle = make_bundle(cfg);
  LabeledDataset ds = synth_generate(3, 4, 32, 8);
  TrainResult trained = train(*bundle.model, bundle.head.get(), ds, cfg.train);
  save_bundle(path.string(), bundle, trained.optimizer.get());
  Bundle restored = load_bundle(path.string());

  Rng rng(88);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  bool identical = true;
  for (int i = 0; i < 10; ++i) {
    auto x = make_tensor({1, 3, 32, 32});
    for (auto& v : x->values) v = uni(rng);
    Tape t1, t2;
    auto p1 = bundle.head->forward(t1, bundle.model->forward_features(t1, x, Mode::eval)).p_bag;
    auto p2 =
        restored.head->forward(t2, restored.model->forward_features(t2, x, Mode::eval)).p_bag;
    if (p1->values != p2->values) identical = false;
  }
  report(8, "persistence (save -> load -> eval bit-identical on 10 inputs)", identical,
         identical ? "all probability vectors byte-equal" : "outputs diverged after reload",
         seconds_since(start));
}

// --- criterion 9: UCM-layout protocol runs without code changes ------------
void criterion_9() {
  const auto start = Clock::now();
  const fs::path dir = g_work / "ucm";
  const fs::path data = dir / "data";
  Rng rng(9);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int c = 0; c < 21; ++c) {
    char cls[32];
    std::snprintf(cls, sizeof(cls), "class%02d", c);
    fs::create_directories(data / cls);
    for (int i = 0; i < 3; ++i) {
      auto img = make_tensor({3, 64, 64});
      for (auto& v : img->values) v = uni(rng);
      write_ppm((data / cls / (std::to_string(i) + ".ppm")).string(), img);
    }
  }
  // UCM settings from the published protocol: 21 classes, ratio 0.8,
  // stage_epochs 40; desk-scale input keeps the run tractable on a CPU
  RunConfig cfg = tiny_run_config();
  cfg.model.num_classes = 21;
  cfg.train.stage_epochs = 40;
  cfg.train_ratio = 0.8;
  const fs::path cfg_path = dir / "ucm.json";
  std::ofstream(cfg_path) << run_config_to_json(cfg);

  std::string out;
  const int code = run_cli("protocol --config " + cfg_path.string() + " --data " + data.string() +
                               " --out " + (dir / "run").string() + " --reps 10",
                           &out);
  const std::string report_json = slurp(dir / "run" / "report.json");
  size_t reps = 0;
  const size_t array_start = report_json.find('[');
  if (array_start != std::string::npos) {
    const size_t array_end = report_json.find(']', array_start);
    reps = static_cast<size_t>(std::count(report_json.begin() + static_cast<long>(array_start),
                                          report_json.begin() + static_cast<long>(array_end),
                                          ',')) +
           1;
  }
  const double secs = seconds_since(start);
  char detail[200];
  std::snprintf(detail, sizeof(detail),
                "ten-repetition protocol exit %d with %zu per-rep entries; published benchmark "
                "accuracies are out of desk scope by design",
                code, reps);
  report(9, "UCM-layout directory runs the full protocol without code changes",
         code == 0 && reps == 10, detail, secs);
}

}  // namespace

int main() {
  const char* cli = std::getenv("MIDCCNN_CLI");
  g_cli = cli ? cli : "";
  if (g_cli.empty()) {
    std::fprintf(stderr, "MIDCCNN_CLI is not set; criteria 1, 7 and 9 need the CLI binary\n");
    return 2;
  }
  g_work = fs::temp_directory_path() / "midccnn_acceptance";
  fs::remove_all(g_work);
  fs::create_directories(g_work);

  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7();
  criterion_8();
  criterion_9();

  std::printf("%s: %d of 9 criteria failed\n", g_failures == 0 ? "SUCCESS" : "FAILURE",
              g_failures);
  fs::remove_all(g_work);
  return g_failures == 0 ? 0 : 1;
}
