#pragma once

#include <optional>
#include <string>
#include <vector>

#include "midccnn/dccnn.hpp"

namespace midccnn {

namespace ops {

// s[n,i,j] = w2 . tanh(W1 x[n,:,i,j] + b), one score per instance position.
// x: [N, C, H, W], W1: [L, C], w2: [L], b: [L] -> [N, H, W].
TensorPtr attention_scores(Tape& tape, const TensorPtr& x, const TensorPtr& w1,
                           const TensorPtr& w2, const TensorPtr& b);

// Convex combination of instance vectors: [N,C,H,W] x [N,H,W] -> [N,C].
TensorPtr weighted_pool(Tape& tape, const TensorPtr& probs, const TensorPtr& weights);

TensorPtr instance_mean(Tape& tape, const TensorPtr& probs);  // [N,C,H,W] -> [N,C]
TensorPtr instance_max(Tape& tape, const TensorPtr& probs);   // ties to lowest flat index

// y[n,:] = x[n,:] / sum(x[n,:]); requires positive row sums.
TensorPtr row_normalize(Tape& tape, const TensorPtr& x);

}  // namespace ops

enum class MilPooling { attention, mean, max };

std::string to_string(MilPooling method);
MilPooling mil_pooling_from_string(const std::string& name);

struct MilHeadConfig {
  int num_classes = 0;
  int in_channels = 0;     // feature channels from the backbone
  int hidden_dim = 64;     // L
  MilPooling method = MilPooling::attention;
  bool attention_on_probs = false;  // feed post-softmax probs into Eq-style scoring
};

struct BagPrediction {
  std::vector<double> p_bag;                      // length N_c, sums to 1
  TensorPtr instance_probs;                       // [N_c, H', W']
  std::optional<std::vector<double>> attention;   // H'*W', row-major, sums to 1
  int grid_h = 0, grid_w = 0;
};

// Instance classifier (N_c 1x1 filters) plus the attention network and a
// pooling-method selector.
class MilHead {
 public:
  explicit MilHead(const MilHeadConfig& config);

  const MilHeadConfig& config() const { return config_; }

  TensorPtr instance_logits(Tape& tape, const TensorPtr& features) const;
  static TensorPtr instance_probs(Tape& tape, const TensorPtr& logits);  // softmax over classes
  // Softmax over all H'*W' positions jointly per bag; [N, H', W'].
  TensorPtr attention_weights(Tape& tape, const TensorPtr& logits) const;

  struct Output {
    TensorPtr p_bag;           // [N, N_c]
    TensorPtr instance_probs;  // [N, N_c, H', W']
    TensorPtr attention;       // [N, H', W'] or null for mean/max
  };
  Output forward(Tape& tape, const TensorPtr& features) const;

  // Single-bag convenience over forward(); features [1, C, H', W'].
  BagPrediction predict(const TensorPtr& features) const;

  std::vector<Parameter> parameters() const;

 private:
  MilHeadConfig config_;
  Conv2d instance_conv_;
  TensorPtr w1_, w2_, b_;
};

// Aggregates instance probabilities into a bag distribution. `weights`
// is required for attention pooling; max pooling renormalizes the
// per-class maxima back to a distribution.
TensorPtr mil_pool(Tape& tape, MilPooling method, const TensorPtr& probs,
                   const TensorPtr& weights);

// Writes `<prefix>.csv` ("h,w,weight" rows) and `<prefix>.pgm`, an 8-bit
// P5 heatmap min-max normalized and nearest-neighbor upscaled so the long
// side is `target_size`.
void export_attention_map(const BagPrediction& pred, const std::string& prefix, int target_size);

}  // namespace midccnn
