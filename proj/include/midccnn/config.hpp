#pragma once

#include <memory>
#include <string>

#include "midccnn/mil.hpp"
#include "midccnn/train.hpp"

namespace midccnn {

// One JSON document drives a whole run: model architecture, mil head,
// training schedule and data handling. Unknown keys are rejected and all
// violations are reported together.
struct RunConfig {
  DccnnConfig model;
  MilHeadConfig mil;
  TrainConfig train;
  double train_ratio = 0.8;
  uint64_t split_seed = 0;
};

RunConfig run_config_from_json(const std::string& text);
RunConfig run_config_from_file(const std::string& path);
// Fully resolved (defaults applied) document, suitable for echoing into
// the run directory.
std::string run_config_to_json(const RunConfig& config);

// Ships with the repo: input 96, c0 16, k 8 -- small enough for CPU runs
// while keeping every structural invariant.
RunConfig desk_profile();

struct Bundle {
  RunConfig config;
  std::shared_ptr<Dccnn> model;
  std::shared_ptr<MilHead> head;  // null when the gap_fc head is selected

  std::vector<Parameter> parameters() const;
  std::vector<TensorPtr> buffers() const;
};

// Builds the model (and mil head when selected) and initializes all
// parameters from config.model.seed.
Bundle make_bundle(const RunConfig& config);

}  // namespace midccnn
