#include "midccnn/dccnn.hpp"

#include <cmath>

namespace midccnn {

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

int refine_out_channels(const DccnnConfig& c) {
  int ch = c.init_channels;
  for (int len : c.block_lengths) ch += len * c.growth_rate;
  return c.refine_channels > 0 ? c.refine_channels : ch;
}

}  // namespace

std::vector<std::string> DccnnConfig::validate() const {
  std::vector<std::string> errors;
  if (input_size <= 0 || input_size % 32 != 0)
    errors.push_back("input_size must be a positive multiple of 32, got " +
                     std::to_string(input_size));
  if (in_channels != 3) errors.push_back("in_channels must be 3, got " + std::to_string(in_channels));
  if (init_channels <= 0)
    errors.push_back("init_channels must be positive, got " + std::to_string(init_channels));
  if (growth_rate <= 0)
    errors.push_back("growth_rate must be positive, got " + std::to_string(growth_rate));
  if (block_lengths != std::vector<int>{3, 3, 3})
    errors.push_back("block_lengths is fixed at [3, 3, 3]");
  if (refine_channels < 0)
    errors.push_back("refine_channels must be >= 0, got " + std::to_string(refine_channels));
  if (num_classes < 2)
    errors.push_back("num_classes must be >= 2, got " + std::to_string(num_classes));
  return errors;
}

const ShapePlan::Stage* ShapePlan::find(const std::string& name) const {
  for (const auto& s : stages)
    if (s.name == name) return &s;
  return nullptr;
}

ShapePlan plan_shapes(const DccnnConfig& config) {
  ShapePlan plan;
  int s = config.input_size / 2;
  int ch = config.init_channels;
  plan.stages.push_back({"stem_conv", ch, s, s});
  s /= 2;
  plan.stages.push_back({"stem_pool", ch, s, s});
  for (size_t b = 0; b < config.block_lengths.size(); ++b) {
    ch += config.block_lengths[b] * config.growth_rate;
    plan.stages.push_back({"dense_block_" + std::to_string(b + 1), ch, s, s});
    s /= 2;
    plan.stages.push_back({"transition_" + std::to_string(b + 1), ch, s, s});
  }
  plan.stages.push_back({"refine_conv", refine_out_channels(config), s, s});
  if (config.head == HeadKind::gap_fc) plan.stages.push_back({"classifier", config.num_classes, 1, 1});
  return plan;
}

Dccnn::Dccnn(const DccnnConfig& config) : config_(config) {
  auto errors = config.validate();
  if (!errors.empty()) {
    std::string msg = "invalid DccnnConfig:";
    for (const auto& e : errors) msg += "\n  - " + e;
    fail(msg);
  }
  stem_ = Conv2d(config.in_channels, config.init_channels, 7, 2, 3, "stem");
  int ch = config.init_channels;
  for (size_t b = 0; b < config.block_lengths.size(); ++b) {
    blocks_.emplace_back(ch, config.growth_rate, config.block_lengths[b], config.use_batchnorm,
                         "block" + std::to_string(b + 1));
    ch = blocks_.back().out_channels();
    transitions_.emplace_back(ch, config.use_batchnorm, "transition" + std::to_string(b + 1));
  }
  final_bn_ = BatchNorm2d(ch, "final_bn");
  refine_ = Conv2d(ch, refine_out_channels(config), 1, 1, 0, "refine");
  if (config.head == HeadKind::gap_fc)
    fc_.emplace(refine_out_channels(config), config.num_classes, "fc");
}

int Dccnn::feature_channels() const { return refine_out_channels(config_); }

TensorPtr Dccnn::forward_features(Tape& tape, const TensorPtr& x, Mode mode, Rng* rng,
                                  std::vector<ShapePlan::Stage>* stages) const {
  if (x->rank() != 4 || x->shape[1] != config_.in_channels || x->shape[2] != config_.input_size ||
      x->shape[3] != config_.input_size)
    fail("forward_features: expected [N, " + std::to_string(config_.in_channels) + ", " +
         std::to_string(config_.input_size) + ", " + std::to_string(config_.input_size) +
         "], got " + shape_str(x->shape));
  auto observe = [&](const std::string& name, const TensorPtr& t) {
    if (stages) stages->push_back({name, t->shape[1], t->shape[2], t->shape[3]});
  };

  TensorPtr h = stem_.forward(tape, x);
  observe("stem_conv", h);
  h = ops::pool2d(tape, ops::PoolKind::max, h, 3, 2, 1);
  observe("stem_pool", h);
  for (size_t b = 0; b < blocks_.size(); ++b) {
    h = blocks_[b].forward(tape, h, mode);
    observe("dense_block_" + std::to_string(b + 1), h);
    h = transitions_[b].forward(tape, h, mode);
    observe("transition_" + std::to_string(b + 1), h);
    h = ops::dropout(tape, h, dropout_rate, mode, rng);
  }
  if (config_.use_batchnorm) h = final_bn_.forward(tape, h, mode);
  h = ops::relu(tape, h);
  h = refine_.forward(tape, h);
  observe("refine_conv", h);
  h = ops::dropout(tape, h, dropout_rate, mode, rng);
  return h;
}

TensorPtr Dccnn::forward_gap_head(Tape& tape, const TensorPtr& features) const {
  if (!fc_) fail("forward_gap_head: model was built with the mil head");
  TensorPtr pooled =
      ops::pool2d(tape, ops::PoolKind::avg, features, features->shape[2], features->shape[2], 0);
  TensorPtr flat = ops::reshape(tape, pooled, {features->shape[0], features->shape[1]});
  return ops::softmax(tape, fc_->forward(tape, flat), 1);
}

std::vector<Parameter> Dccnn::parameters() const {
  std::vector<Parameter> out;
  auto add_conv = [&](const Conv2d& c) {
    out.push_back({c.weight->name, c.weight, true});
    out.push_back({c.bias->name, c.bias, false});
  };
  auto add_bn = [&](const BatchNorm2d& bn) {
    out.push_back({bn.gamma->name, bn.gamma, false});
    out.push_back({bn.beta->name, bn.beta, false});
  };
  add_conv(stem_);
  for (const auto& block : blocks_) {
    for (const auto& layer : block.layers) {
      add_bn(layer.bn1);
      add_conv(layer.bottleneck);
      add_bn(layer.bn2);
      add_conv(layer.conv);
    }
  }
  for (const auto& t : transitions_) {
    add_bn(t.bn);
    add_conv(t.conv);
  }
  add_bn(final_bn_);
  add_conv(refine_);
  if (fc_) {
    out.push_back({fc_->weight->name, fc_->weight, true});
    out.push_back({fc_->bias->name, fc_->bias, false});
  }
  return out;
}

std::vector<TensorPtr> Dccnn::buffers() const {
  std::vector<TensorPtr> out;
  auto add_bn = [&](const BatchNorm2d& bn) {
    out.push_back(bn.running_mean);
    out.push_back(bn.running_var);
  };
  for (const auto& block : blocks_)
    for (const auto& layer : block.layers) {
      add_bn(layer.bn1);
      add_bn(layer.bn2);
    }
  for (const auto& t : transitions_) add_bn(t.bn);
  add_bn(final_bn_);
  return out;
}

int Dccnn::weighted_conv_layers() const {
  int count = 1;  // stem
  for (const auto& block : blocks_) count += 2 * static_cast<int>(block.layers.size());
  count += static_cast<int>(transitions_.size());
  count += 1;  // refine
  return count;
}

int64_t Dccnn::parameter_count() const {
  int64_t total = 0;
  for (const auto& p : parameters()) total += p.value->numel();
  return total;
}

void init_params(const std::vector<Parameter>& params, uint64_t seed) {
  Rng rng(seed);
  for (const auto& p : params) {
    auto& v = p.value->values;
    if (ends_with(p.name, ".bias") || ends_with(p.name, ".beta") || ends_with(p.name, ".b")) {
      std::fill(v.begin(), v.end(), 0.001);
    } else if (ends_with(p.name, ".gamma")) {
      std::fill(v.begin(), v.end(), 1.0);
    } else {
      const auto& s = p.value->shape;
      int64_t fan_in = s.size() == 4 ? static_cast<int64_t>(s[1]) * s[2] * s[3]
                       : s.size() == 2 ? s[1]
                                       : s[0];
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      for (auto& x : v) x = dist(rng);
    }
  }
}

}  // namespace midccnn
