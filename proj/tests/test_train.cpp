#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "midccnn/config.hpp"
#include "midccnn/train.hpp"
#include "support/testutil.hpp"

using namespace midccnn;
using testutil::fd_max_rel_err;
using testutil::rand_tensor;

namespace {

RunConfig tiny_config(MilPooling method = MilPooling::attention) {
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

// Independent scalar Adam recurrence; mirrors the published update rule,
// not the library code.
struct ScalarAdamOracle {
  double m = 0.0, v = 0.0;
  int t = 0;
  double step(double w, double g, double lr, double b1, double b2, double eps) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    return w - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

}  // namespace

TEST_CASE("cross entropy on bag probabilities") {
  Tape tape;
  auto onehot = make_tensor({3}, {0.0, 1.0, 0.0});
  CHECK(ops::cross_entropy_bag(tape, onehot, 1)->scalar() == doctest::Approx(0.0).epsilon(1e-12));

  auto uniform21 = make_tensor({21}, 1.0 / 21);
  CHECK(ops::cross_entropy_bag(tape, uniform21, 7)->scalar() ==
        doctest::Approx(std::log(21.0)).epsilon(1e-12));

  // clamped floor keeps the loss finite at p = 0
  auto zerop = make_tensor({2}, {1.0, 0.0});
  CHECK(ops::cross_entropy_bag(tape, zerop, 1)->scalar() ==
        doctest::Approx(-std::log(1e-12)).epsilon(1e-9));

  CHECK_THROWS_WITH_AS(ops::cross_entropy_bag(tape, onehot, 3), doctest::Contains("out of range"),
                       std::runtime_error);
  auto not_prob = make_tensor({3}, {0.5, 0.2, 0.1});
  CHECK_THROWS_WITH_AS(ops::cross_entropy_bag(tape, not_prob, 0),
                       doctest::Contains("probability"), std::runtime_error);
}

TEST_CASE("cross entropy gradient matches finite differences") {
  Rng rng(60);
  auto logits = rand_tensor({4, 5}, rng, -2.0, 2.0, true);
  const std::vector<int> labels{0, 3, 2, 4};
  auto loss_fn = [&] {
    Tape tape;
    return ops::cross_entropy_mean(tape, ops::softmax(tape, logits, 1), labels)->scalar();
  };
  Tape tape;
  tape.backward(ops::cross_entropy_mean(tape, ops::softmax(tape, logits, 1), labels));
  CHECK(fd_max_rel_err(loss_fn, logits, logits->grad) < 1e-6);
}

TEST_CASE("lr schedule: repeated division by 10 until below 1e-6") {
  TrainConfig cfg;
  cfg.stage_epochs = 40;

  CHECK(*lr_at_epoch(cfg, 0) == 1e-3);
  CHECK(*lr_at_epoch(cfg, 39) == 1e-3);
  CHECK(*lr_at_epoch(cfg, 40) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(*lr_at_epoch(cfg, 80) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(*lr_at_epoch(cfg, 120) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK_FALSE(lr_at_epoch(cfg, 160).has_value());  // 1e-7 < lr_min terminates

  // non-increasing, piecewise constant with period stage_epochs
  double prev = cfg.lr0;
  for (int e = 0; e < 161; ++e) {
    auto lr = lr_at_epoch(cfg, e);
    if (!lr) break;
    CHECK(*lr <= prev);
    if (e % cfg.stage_epochs != 0) CHECK(*lr == *lr_at_epoch(cfg, e - 1));
    prev = *lr;
  }
}

TEST_CASE("adam step against the scalar recurrence oracle") {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;

  SUBCASE("one step from w=0 with unit gradient") {
    auto w = make_param({1}, "w");
    Adam opt({{"w", w, true}}, cfg);
    w->ensure_grad();
    w->grad[0] = 1.0;
    opt.step(1e-3);
    ScalarAdamOracle oracle;
    const double expect = oracle.step(0.0, 1.0, 1e-3, cfg.beta1, cfg.beta2, cfg.eps);
    CHECK(w->values[0] == doctest::Approx(expect).epsilon(1e-15));
    CHECK(w->values[0] == doctest::Approx(-1e-3 / (1.0 + cfg.eps)).epsilon(1e-9));
  }

  SUBCASE("zero gradient and zero decay leave parameters unchanged") {
    auto w = make_param({3}, "w");
    w->values = {0.5, -0.25, 1.0};
    Adam opt({{"w", w, true}}, cfg);
    opt.step(1e-3);
    CHECK(w->values == std::vector<double>{0.5, -0.25, 1.0});
  }

  SUBCASE("weight decay alone shrinks a positive weight") {
    TrainConfig wd = cfg;
    wd.weight_decay = 1e-6;
    auto w = make_param({1}, "w");
    w->values[0] = 1.0;
    Adam opt({{"w", w, true}}, wd);
    opt.step(1e-3);
    ScalarAdamOracle oracle;
    const double expect = oracle.step(1.0, 1e-6 * 1.0, 1e-3, wd.beta1, wd.beta2, wd.eps);
    CHECK(w->values[0] < 1.0);  // update direction is negative
    CHECK(w->values[0] == doctest::Approx(expect).epsilon(1e-15));
  }

  SUBCASE("decay does not touch bias-flagged parameters") {
    TrainConfig wd = cfg;
    wd.weight_decay = 1e-2;
    auto b = make_param({1}, "b");
    b->values[0] = 1.0;
    Adam opt({{"b", b, false}}, wd);
    opt.step(1e-3);
    CHECK(b->values[0] == 1.0);
  }

  SUBCASE("a 50-step trajectory tracks the oracle") {
    auto w = make_param({1}, "w");
    w->values[0] = 0.3;
    Adam opt({{"w", w, true}}, cfg);
    ScalarAdamOracle oracle;
    Rng rng(61);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    double expect = 0.3;
    for (int i = 0; i < 50; ++i) {
      const double g = uni(rng);
      w->ensure_grad();
      w->grad[0] = g;
      opt.step(1e-3);
      expect = oracle.step(expect, g, 1e-3, cfg.beta1, cfg.beta2, cfg.eps);
      w->zero_grad();
    }
    CHECK(w->values[0] == doctest::Approx(expect).epsilon(1e-12));
  }

  SUBCASE("non-finite gradients name the parameter") {
    auto w = make_param({2}, "block1.layer1.conv.weight");
    Adam opt({{"block1.layer1.conv.weight", w, true}}, cfg);
    w->ensure_grad();
    w->grad[1] = std::nan("");
    CHECK_THROWS_WITH_AS(opt.step(1e-3), doctest::Contains("block1.layer1.conv.weight"),
                         std::runtime_error);
  }
}

TEST_CASE("one small training step on a single bag decreases its loss") {
  RunConfig cfg = tiny_config();
  Bundle bundle = make_bundle(cfg);
  LabeledDataset ds = synth_generate(3, 1, 32, 62);
  ds.items.resize(1);

  auto bag_loss = [&] {
    Tape tape;
    auto x = make_tensor({1, 3, 32, 32}, ds.items[0].image->values);
    auto features = bundle.model->forward_features(tape, x, Mode::eval);
    auto p_bag = bundle.head->forward(tape, features).p_bag;
    return ops::cross_entropy_mean(tape, p_bag, {ds.items[0].label})->scalar();
  };
  const double before = bag_loss();

  TrainConfig step_cfg = cfg.train;
  step_cfg.dropout = 0.0;
  Adam opt(bundle.parameters(), step_cfg);
  {
    Tape tape;
    auto x = make_tensor({1, 3, 32, 32}, ds.items[0].image->values);
    auto features = bundle.model->forward_features(tape, x, Mode::eval);
    auto p_bag = bundle.head->forward(tape, features).p_bag;
    auto loss = ops::cross_entropy_mean(tape, p_bag, {ds.items[0].label});
    opt.zero_grad();
    tape.backward(loss);
    opt.step(1e-4);
  }
  CHECK(bag_loss() < before);
}

TEST_CASE("training runs the decided schedule and is reproducible") {
  RunConfig cfg = tiny_config();
  LabeledDataset ds = synth_generate(3, 4, 32, 63);

  auto run = [&] {
    Bundle bundle = make_bundle(cfg);
    return train(*bundle.model, bundle.head.get(), ds, cfg.train);
  };
  TrainResult a = run();
  CHECK(a.history.size() == 4);  // ladder 1e-3 .. 1e-6 with one epoch each
  CHECK(a.history[0].lr == 1e-3);
  CHECK(a.history[0].mean_loss < 2.0 * std::log(3.0));  // in-epoch updates drift the mean

  TrainResult b = run();
  REQUIRE(b.history.size() == a.history.size());
  for (size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].mean_loss == b.history[i].mean_loss);
    CHECK(a.history[i].train_acc == b.history[i].train_acc);
  }

  SUBCASE("class-count mismatch is rejected") {
    LabeledDataset wrong = synth_generate(4, 2, 32, 64);
    Bundle bundle = make_bundle(cfg);
    CHECK_THROWS_WITH_AS(train(*bundle.model, bundle.head.get(), wrong, cfg.train),
                         doctest::Contains("classes"), std::runtime_error);
  }
  SUBCASE("empty dataset is rejected") {
    LabeledDataset empty;
    empty.class_names = {"a", "b", "c"};
    Bundle bundle = make_bundle(cfg);
    CHECK_THROWS_WITH_AS(train(*bundle.model, bundle.head.get(), empty, cfg.train),
                         doctest::Contains("empty"), std::runtime_error);
  }
}

TEST_CASE("init distribution: desk-profile loss starts near ln(3)") {
  // the 3x3 instance grid averages near-independent instance predictions,
  // so the bag distribution starts close to uniform
  RunConfig cfg = desk_profile();
  Bundle bundle = make_bundle(cfg);
  LabeledDataset ds = synth_generate(3, 4, 96, 42);
  double loss_sum = 0.0;
  for (const auto& item : ds.items) {
    Tape tape;
    auto x = make_tensor({1, 3, 96, 96}, item.image->values);
    auto p_bag =
        bundle.head->forward(tape, bundle.model->forward_features(tape, x, Mode::eval)).p_bag;
    loss_sum += ops::cross_entropy_mean(tape, p_bag, {item.label})->scalar();
  }
  CHECK(loss_sum / ds.items.size() == doctest::Approx(std::log(3.0)).epsilon(0.10));
}

TEST_CASE("gradcheck: small mil model passes at 1e-4") {
  RunConfig cfg = tiny_config();
  cfg.train.dropout = 0.0;
  Bundle bundle = make_bundle(cfg);
  Rng rng(65);
  auto input = rand_tensor({1, 3, 32, 32}, rng, 0.0, 1.0);

  GradCheckReport report =
      gradcheck(*bundle.model, bundle.head.get(), input, 1, 1e-4, /*min_coords=*/120, 66);
  CHECK(report.coords_checked >= 120);
  CHECK(report.max_rel_err < 1e-4);
  CHECK(report.failures.empty());
}

TEST_CASE("mutation canary: a corrupted backward rule is detected") {
  // Record a relu whose derivative is off by 1.5x through the public tape
  // API; the finite-difference comparison must flag it.
  Rng rng(67);
  auto x = rand_tensor({6}, rng, 0.2, 1.5, true);
  std::vector<double> analytic;
  {
    Tape tape;
    auto out = make_tensor(x->shape);
    auto compute = [=] {
      for (int i = 0; i < 6; ++i) out->values[i] = std::max(0.0, x->values[i]);
    };
    compute();
    auto backward = [=] {
      x->ensure_grad();
      for (int i = 0; i < 6; ++i)
        if (x->values[i] > 0.0) x->grad[i] += out->grad[i] * 1.5;  // wrong on purpose
    };
    tape.record("broken_relu", {x}, out, backward, compute);
    auto loss = ops::sum_all(tape, ops::mul(tape, out, out));
    tape.backward(loss);
    analytic = x->grad;
  }
  auto clean_loss = [&] {
    Tape tape;
    auto y = ops::relu(tape, x);
    return ops::sum_all(tape, ops::mul(tape, y, y))->scalar();
  };
  CHECK(fd_max_rel_err(clean_loss, x, analytic) > 1e-2);
}

TEST_CASE("history csv carries epoch, lr, loss and accuracy") {
  TrainResult result;
  result.history = {{0, 1e-3, 1.0986, 0.33}, {1, 1e-3, 0.9, 0.5}};
  const std::string path = "/tmp/midccnn_history_test.csv";
  write_history_csv(path, result);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,lr,mean_loss,train_acc");
  std::getline(in, line);
  CHECK(line.substr(0, 2) == "0,");
  std::getline(in, line);
  CHECK(line.substr(0, 2) == "1,");
}
