#pragma once

#include <vector>

#include "midccnn/tensor.hpp"

namespace midccnn {

namespace ops {

// Cross-correlation with zero padding and per-channel bias.
// x: [N, Cin, H, W], weight: [Cout, Cin, KH, KW], bias: [Cout].
TensorPtr conv2d(Tape& tape, const TensorPtr& x, const TensorPtr& weight,
                 const TensorPtr& bias, int stride, int padding);

enum class PoolKind { max, avg };

// Max ties break toward the lowest flat index; avg excludes padding cells
// from the denominator at borders.
TensorPtr pool2d(Tape& tape, PoolKind kind, const TensorPtr& x, int k, int stride, int padding);

// Train mode normalizes with batch statistics and updates running stats
// in place (momentum 0.1, unbiased running variance); eval mode reads the
// running stats only.
TensorPtr batch_norm(Tape& tape, const TensorPtr& x, const TensorPtr& gamma,
                     const TensorPtr& beta, const TensorPtr& running_mean,
                     const TensorPtr& running_var, double eps, double momentum, Mode mode);

// Inverted dropout: train mode zeroes with probability `rate` and scales
// survivors by 1/(1-rate); eval mode is the identity. The mask is drawn
// from `rng` at record time and reused on replay.
TensorPtr dropout(Tape& tape, const TensorPtr& x, double rate, Mode mode, Rng* rng);

// out[n,o] = sum_i x[n,i] * weight[o,i] + bias[o]
TensorPtr linear(Tape& tape, const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias);

}  // namespace ops

struct Conv2d {
  TensorPtr weight;  // [out_ch, in_ch, kh, kw]
  TensorPtr bias;    // [out_ch]
  int stride = 1;
  int padding = 0;

  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int k, int stride, int padding, const std::string& name);
  int in_channels() const { return weight->shape[1]; }
  int out_channels() const { return weight->shape[0]; }
  TensorPtr forward(Tape& tape, const TensorPtr& x) const;
};

struct BatchNorm2d {
  TensorPtr gamma, beta;
  TensorPtr running_mean, running_var;  // buffers, not parameters
  double eps = 1e-5;
  double momentum = 0.1;

  BatchNorm2d() = default;
  BatchNorm2d(int channels, const std::string& name);
  TensorPtr forward(Tape& tape, const TensorPtr& x, Mode mode) const;
};

struct Linear {
  TensorPtr weight;  // [out, in]
  TensorPtr bias;    // [out]

  Linear() = default;
  Linear(int in, int out, const std::string& name);
  TensorPtr forward(Tape& tape, const TensorPtr& x) const;
};

// H_l: BN -> relu -> conv. `use_bn` off skips the BN (debug aid).
TensorPtr composite_fn(Tape& tape, const BatchNorm2d& bn, const Conv2d& conv, const TensorPtr& x,
                       Mode mode, bool use_bn = true);

// Three bottleneck+conv pairs wired with dense connections: layer l sees
// the concat of the block input and all previous layer outputs, and the
// block returns the concat of everything. Output channels = in + 3k.
struct DenseBlock {
  struct Layer {
    BatchNorm2d bn1;
    Conv2d bottleneck;  // 1x1, 4k channels
    BatchNorm2d bn2;
    Conv2d conv;  // 3x3 pad 1, k channels
  };
  std::vector<Layer> layers;
  int in_channels = 0;
  int growth_rate = 0;
  bool use_bn = true;

  DenseBlock() = default;
  DenseBlock(int in_ch, int k, int num_layers, bool use_bn, const std::string& name);
  int out_channels() const { return in_channels + static_cast<int>(layers.size()) * growth_rate; }
  TensorPtr forward(Tape& tape, const TensorPtr& x, Mode mode) const;
};

// BN -> relu -> 1x1 conv (channel count preserved) -> 2x2 avg pool stride 2.
struct TransitionLayer {
  BatchNorm2d bn;
  Conv2d conv;
  bool use_bn = true;

  TransitionLayer() = default;
  TransitionLayer(int channels, bool use_bn, const std::string& name);
  TensorPtr forward(Tape& tape, const TensorPtr& x, Mode mode) const;
};

}  // namespace midccnn
