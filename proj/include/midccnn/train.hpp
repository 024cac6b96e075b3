#pragma once

#include <optional>
#include <string>
#include <vector>

#include "midccnn/data.hpp"
#include "midccnn/dccnn.hpp"
#include "midccnn/mil.hpp"

namespace midccnn {

struct TrainConfig {
  double lr0 = 1e-3;
  int stage_epochs = 100;  // 40 for UCM-like runs
  double lr_factor = 0.1;
  double lr_min = 1e-6;
  double weight_decay = 1e-6;
  double dropout = 0.2;
  int batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t seed = 0;

  std::vector<std::string> validate() const;
};

namespace ops {

// -log(max(p_bag[label], 1e-12)); p_bag must sum to 1 within 1e-6.
TensorPtr cross_entropy_bag(Tape& tape, const TensorPtr& p_bag, int label);

// Mean bag loss over a batch of probability rows [N, N_c].
TensorPtr cross_entropy_mean(Tape& tape, const TensorPtr& probs, const std::vector<int>& labels);

}  // namespace ops

// lr0 * lr_factor^floor(epoch / stage_epochs); nullopt once lr < lr_min.
// With the defaults the realized ladder is 1e-3, 1e-4, 1e-5, 1e-6, stop.
std::optional<double> lr_at_epoch(const TrainConfig& config, int epoch);

// Bias-corrected Adam with coupled L2 (weight_decay * param added to the
// gradient, decay-flagged parameters only).
class Adam {
 public:
  Adam(std::vector<Parameter> params, const TrainConfig& config);

  void zero_grad();
  void step(double lr);

  int64_t step_count() const { return t_; }
  const std::vector<Parameter>& params() const { return params_; }
  // Exposed for checkpointing; slot order matches params().
  std::vector<TensorPtr>& first_moments() { return m_; }
  std::vector<TensorPtr>& second_moments() { return v_; }
  void set_step_count(int64_t t) { t_ = t; }

 private:
  std::vector<Parameter> params_;
  std::vector<TensorPtr> m_, v_;
  TrainConfig config_;
  int64_t t_ = 0;
};

struct EpochStats {
  int epoch;
  double lr;
  double mean_loss;
  double train_acc;  // fraction in [0, 1], from the train-mode forward
};

struct TrainResult {
  std::vector<EpochStats> history;
  std::shared_ptr<Adam> optimizer;  // final state, for checkpointing
};

// Seeded-shuffled minibatch epochs until lr_at_epoch terminates. The head
// is optional: without it the model's gap_fc head is trained instead.
TrainResult train(Dccnn& model, MilHead* head, const LabeledDataset& dataset,
                  const TrainConfig& config);

void write_history_csv(const std::string& path, const TrainResult& result);

struct GradCheckReport {
  double max_rel_err = 0.0;
  size_t coords_checked = 0;
  struct Failure {
    std::string param;
    int64_t index;
    double analytic, numeric, rel_err;
  };
  std::vector<Failure> failures;  // entries exceeding the tolerance
};

// Central finite differences (h = 1e-5) vs analytic gradients on a seeded
// sample of >= min_coords coordinates spanning every parameter tensor.
// Relative error uses denominator max(|analytic|, |numeric|, 1e-3).
// Deterministic forward required: dropout off, batch norm in eval mode.
GradCheckReport gradcheck(Dccnn& model, MilHead* head, const TensorPtr& input, int label,
                          double tolerance, size_t min_coords = 200, uint64_t seed = 0,
                          double fd_step = 1e-5);

}  // namespace midccnn
