#include "midccnn/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "kernels.hpp"

namespace midccnn {

namespace {
constexpr double kProbClamp = 1e-12;
}

std::vector<std::string> TrainConfig::validate() const {
  std::vector<std::string> errors;
  if (!(lr0 > 0.0)) errors.push_back("lr0 must be positive");
  if (!(lr_min > 0.0 && lr_min < lr0)) errors.push_back("lr_min must satisfy 0 < lr_min < lr0");
  if (!(lr_factor > 0.0 && lr_factor < 1.0)) errors.push_back("lr_factor must be in (0, 1)");
  if (stage_epochs < 1) errors.push_back("stage_epochs must be >= 1");
  if (!(weight_decay >= 0.0)) errors.push_back("weight_decay must be >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) errors.push_back("dropout must be in [0, 1)");
  if (batch_size < 1) errors.push_back("batch_size must be >= 1");
  if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0))
    errors.push_back("adam betas must be in (0, 1)");
  if (!(eps > 0.0)) errors.push_back("adam eps must be positive");
  return errors;
}

namespace ops {

TensorPtr cross_entropy_mean(Tape& tape, const TensorPtr& probs, const std::vector<int>& labels) {
  if (probs->rank() != 2) fail("cross_entropy: probs must be [N, C], got " + shape_str(probs->shape));
  const int64_t n = probs->shape[0], c = probs->shape[1];
  if (static_cast<int64_t>(labels.size()) != n)
    fail("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
         " rows");
  for (int64_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= c)
      fail("cross_entropy: label " + std::to_string(labels[i]) + " out of range [0, " +
           std::to_string(c) + ")");
    double s = 0.0;
    for (int64_t cc = 0; cc < c; ++cc) s += probs->values[i * c + cc];
    if (std::abs(s - 1.0) > 1e-6)
      fail("cross_entropy: row " + std::to_string(i) + " sums to " + std::to_string(s) +
           ", not a probability vector");
  }
  auto out = make_tensor(Shape{1});
  auto labels_copy = std::make_shared<std::vector<int>>(labels);

  auto compute = [=] {
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i)
      total -= std::log(std::max(probs->values[i * c + (*labels_copy)[i]], kProbClamp));
    out->values[0] = total / static_cast<double>(n);
  };
  compute();

  auto backward = [=] {
    if (double* gp = detail::grad_dst(probs)) {
      const double g = out->grad[0] / static_cast<double>(n);
      for (int64_t i = 0; i < n; ++i) {
        const double p = probs->values[i * c + (*labels_copy)[i]];
        if (p > kProbClamp) gp[i * c + (*labels_copy)[i]] -= g / p;
      }
    }
  };

  return tape.record("cross_entropy", {probs}, out, std::move(backward), std::move(compute));
}

TensorPtr cross_entropy_bag(Tape& tape, const TensorPtr& p_bag, int label) {
  if (p_bag->rank() == 1)
    return cross_entropy_mean(tape, reshape(tape, p_bag, {1, p_bag->shape[0]}), {label});
  if (p_bag->rank() == 2 && p_bag->shape[0] == 1) return cross_entropy_mean(tape, p_bag, {label});
  fail("cross_entropy_bag: expected a probability vector, got " + shape_str(p_bag->shape));
}

}  // namespace ops

std::optional<double> lr_at_epoch(const TrainConfig& config, int epoch) {
  if (epoch < 0) fail("lr_at_epoch: epoch must be >= 0");
  const int stage = epoch / config.stage_epochs;
  double lr = config.lr0;
  for (int i = 0; i < stage; ++i) lr *= config.lr_factor;
  // tolerant compare so the lr_min stage itself still runs
  if (lr < config.lr_min * (1.0 - 1e-9)) return std::nullopt;
  return lr;
}

Adam::Adam(std::vector<Parameter> params, const TrainConfig& config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.push_back(make_tensor(p.value->shape));
    v_.push_back(make_tensor(p.value->shape));
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.value->zero_grad();
}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    auto& m = m_[i]->values;
    auto& v = v_[i]->values;
    const bool has_grad = !p.value->grad.empty();
    const int64_t n = p.value->numel();
    for (int64_t j = 0; j < n; ++j) {
      double g = has_grad ? p.value->grad[j] : 0.0;
      if (p.decay) g += config_.weight_decay * p.value->values[j];
      if (!std::isfinite(g))
        fail("adam_step: non-finite gradient in parameter " + p.name + " at index " +
             std::to_string(j));
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g;
      p.value->values[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config_.eps);
    }
  }
}

namespace {

TensorPtr batch_images(const LabeledDataset& ds, const std::vector<size_t>& order, size_t begin,
                       size_t end, int input_size) {
  const int64_t per = 3LL * input_size * input_size;
  auto x = make_tensor({static_cast<int>(end - begin), 3, input_size, input_size});
  for (size_t i = begin; i < end; ++i) {
    const auto& img = ds.items[order[i]].image;
    if (img->rank() != 3 || img->shape[0] != 3 || img->shape[1] != input_size ||
        img->shape[2] != input_size)
      fail("train: item " + ds.items[order[i]].source_id + " has shape " + shape_str(img->shape) +
           ", expected [3, " + std::to_string(input_size) + ", " + std::to_string(input_size) + "]");
    std::copy(img->values.begin(), img->values.end(), x->values.begin() + (i - begin) * per);
  }
  return x;
}

}  // namespace

TrainResult train(Dccnn& model, MilHead* head, const LabeledDataset& dataset,
                  const TrainConfig& config) {
  auto errors = config.validate();
  if (!errors.empty()) {
    std::string msg = "invalid TrainConfig:";
    for (const auto& e : errors) msg += "\n  - " + e;
    fail(msg);
  }
  if (dataset.items.empty()) fail("train: dataset is empty");
  if (model.config().num_classes != dataset.num_classes())
    fail("train: model has " + std::to_string(model.config().num_classes) +
         " classes but dataset has " + std::to_string(dataset.num_classes()));
  if (head && head->config().num_classes != dataset.num_classes())
    fail("train: head has " + std::to_string(head->config().num_classes) +
         " classes but dataset has " + std::to_string(dataset.num_classes()));
  if (!head && model.config().head != HeadKind::gap_fc)
    fail("train: model was built for a mil head but none was provided");

  model.dropout_rate = config.dropout;
  std::vector<Parameter> params = model.parameters();
  if (head)
    for (auto& p : head->parameters()) params.push_back(p);
  auto opt = std::make_shared<Adam>(params, config);

  Rng rng(config.seed);
  std::vector<size_t> order(dataset.items.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.optimizer = opt;
  const int input_size = model.config().input_size;
  for (int epoch = 0;; ++epoch) {
    const auto lr = lr_at_epoch(config, epoch);
    if (!lr) break;
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    size_t correct = 0;
    for (size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const size_t end = std::min(order.size(), begin + config.batch_size);
      TensorPtr x = batch_images(dataset, order, begin, end, input_size);
      std::vector<int> labels;
      for (size_t i = begin; i < end; ++i) labels.push_back(dataset.items[order[i]].label);

      Tape tape;
      TensorPtr features = model.forward_features(tape, x, Mode::train, &rng);
      TensorPtr p_bag =
          head ? head->forward(tape, features).p_bag : model.forward_gap_head(tape, features);
      TensorPtr loss = ops::cross_entropy_mean(tape, p_bag, labels);
      const double loss_value = loss->scalar();
      if (!std::isfinite(loss_value))
        fail("train: loss diverged to non-finite at epoch " + std::to_string(epoch) + ", batch " +
             std::to_string(begin / config.batch_size));
      opt->zero_grad();
      tape.backward(loss);
      opt->step(*lr);

      loss_sum += loss_value * static_cast<double>(end - begin);
      const int n_c = p_bag->shape[1];
      for (size_t i = 0; i < end - begin; ++i) {
        int best = 0;
        for (int cc = 1; cc < n_c; ++cc)
          if (p_bag->values[i * n_c + cc] > p_bag->values[i * n_c + best]) best = cc;
        if (best == labels[i]) ++correct;
      }
    }
    result.history.push_back({epoch, *lr, loss_sum / static_cast<double>(order.size()),
                              static_cast<double>(correct) / static_cast<double>(order.size())});
  }
  return result;
}

void write_history_csv(const std::string& path, const TrainResult& result) {
  std::ofstream out(path);
  if (!out) fail("write_history_csv: cannot open " + path);
  out << "epoch,lr,mean_loss,train_acc\n";
  char buf[128];
  for (const auto& e : result.history) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", e.epoch, e.lr, e.mean_loss,
                  e.train_acc);
    out << buf;
  }
  if (!out) fail("write_history_csv: write failed for " + path);
}

namespace {

double model_loss(Dccnn& model, MilHead* head, const TensorPtr& input, int label) {
  Tape tape;
  TensorPtr features = model.forward_features(tape, input, Mode::eval);
  TensorPtr p_bag =
      head ? head->forward(tape, features).p_bag : model.forward_gap_head(tape, features);
  return ops::cross_entropy_mean(tape, p_bag, {label})->scalar();
}

}  // namespace

GradCheckReport gradcheck(Dccnn& model, MilHead* head, const TensorPtr& input, int label,
                          double tolerance, size_t min_coords, uint64_t seed, double fd_step) {
  const double saved_rate = model.dropout_rate;
  model.dropout_rate = 0.0;

  std::vector<Parameter> params = model.parameters();
  if (head)
    for (auto& p : head->parameters()) params.push_back(p);

  // analytic gradients from a single eval-mode forward/backward
  for (auto& p : params) {
    p.value->ensure_grad();
    p.value->zero_grad();
  }
  {
    Tape tape;
    TensorPtr features = model.forward_features(tape, input, Mode::eval);
    TensorPtr p_bag =
        head ? head->forward(tape, features).p_bag : model.forward_gap_head(tape, features);
    TensorPtr loss = ops::cross_entropy_mean(tape, p_bag, {label});
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) analytic.push_back(p.value->grad);

  // at least ceil(min_coords / #tensors) coordinates per tensor
  Rng rng(seed);
  const size_t per_tensor = (min_coords + params.size() - 1) / params.size();
  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& value = params[pi].value->values;
    const int64_t n = static_cast<int64_t>(value.size());
    std::vector<int64_t> coords;
    if (static_cast<size_t>(n) <= per_tensor) {
      coords.resize(static_cast<size_t>(n));
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      std::vector<int64_t> all(static_cast<size_t>(n));
      std::iota(all.begin(), all.end(), 0);
      std::shuffle(all.begin(), all.end(), rng);
      coords.assign(all.begin(), all.begin() + static_cast<int64_t>(per_tensor));
      std::sort(coords.begin(), coords.end());
    }
    for (int64_t idx : coords) {
      const double original = value[idx];
      value[idx] = original + fd_step;
      const double plus = model_loss(model, head, input, label);
      value[idx] = original - fd_step;
      const double minus = model_loss(model, head, input, label);
      value[idx] = original;
      const double numeric = (plus - minus) / (2.0 * fd_step);
      const double a = analytic[pi][idx];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
      report.max_rel_err = std::max(report.max_rel_err, rel);
      ++report.coords_checked;
      if (rel > tolerance)
        report.failures.push_back({params[pi].name, idx, a, numeric, rel});
    }
  }

  model.dropout_rate = saved_rate;
  return report;
}

}  // namespace midccnn
