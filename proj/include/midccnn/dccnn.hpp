#pragma once

#include <optional>
#include <string>
#include <vector>

#include "midccnn/layers.hpp"

namespace midccnn {

enum class HeadKind { gap_fc, mil };

struct DccnnConfig {
  int input_size = 224;  // square, multiple of 32
  int in_channels = 3;
  int init_channels = 64;  // c0
  int growth_rate = 32;    // k
  std::vector<int> block_lengths{3, 3, 3};
  int refine_channels = 0;  // 0 = preserve the channel count entering the refine conv
  int num_classes = 0;
  HeadKind head = HeadKind::gap_fc;
  uint64_t seed = 0;
  bool use_batchnorm = true;

  // Exhaustive validation; returns one message per violation.
  std::vector<std::string> validate() const;
};

struct ShapePlan {
  struct Stage {
    std::string name;
    int channels, height, width;
  };
  std::vector<Stage> stages;

  const Stage* find(const std::string& name) const;
};

ShapePlan plan_shapes(const DccnnConfig& config);

struct Parameter {
  std::string name;
  TensorPtr value;
  bool decay;  // L2-regularized (weights yes; biases and BN affine no)
};

// 23-conv-layer backbone: stem 7x7/2 conv -> 3x3/2 max pool ->
// [dense block -> transition] x3 -> BN+relu -> 1x1 refine conv.
// The gap_fc head adds global average pooling, one FC layer and softmax.
class Dccnn {
 public:
  explicit Dccnn(const DccnnConfig& config);

  const DccnnConfig& config() const { return config_; }
  int feature_channels() const;

  // F, shape [N, refine_channels, input_size/32, input_size/32].
  // `stages` (optional) receives every stage output for shape probing.
  TensorPtr forward_features(Tape& tape, const TensorPtr& x, Mode mode, Rng* rng = nullptr,
                             std::vector<ShapePlan::Stage>* stages = nullptr) const;

  // Global average pool -> FC -> softmax; rows sum to 1.
  TensorPtr forward_gap_head(Tape& tape, const TensorPtr& features) const;

  std::vector<Parameter> parameters() const;
  std::vector<TensorPtr> buffers() const;  // BN running stats
  int weighted_conv_layers() const;
  int64_t parameter_count() const;

  double dropout_rate = 0.0;  // set by the trainer; eval paths ignore it

 private:
  DccnnConfig config_;
  Conv2d stem_;
  std::vector<DenseBlock> blocks_;
  std::vector<TransitionLayer> transitions_;
  BatchNorm2d final_bn_;
  Conv2d refine_;
  std::optional<Linear> fc_;  // gap_fc head only
};

// Biases (conv, linear, BN beta) get exactly 0.001, BN gamma 1, weights a
// fan-in-scaled normal with std sqrt(2/fan_in). Deterministic per seed.
void init_params(const std::vector<Parameter>& params, uint64_t seed);

}  // namespace midccnn
