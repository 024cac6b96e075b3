#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "midccnn/config.hpp"

namespace midccnn {

struct EvalResult {
  double oa_percent = 0.0;
  std::vector<std::vector<int64_t>> confusion;  // [true][predicted]
};

// Eval-mode forward (dropout off, BN running stats); argmax ties go to
// the lowest class index.
EvalResult evaluate_oa(const Bundle& bundle, const LabeledDataset& test, int batch_size = 8);

struct EvalReport {
  std::vector<double> per_rep_oa;  // percent
  double mean_oa = 0.0;
  double std_oa = 0.0;  // sample standard deviation (n-1); 0 for one rep
  std::vector<std::vector<int64_t>> confusion;  // last repetition
};

std::string report_to_json(const EvalReport& report);

struct ProtocolResult {
  EvalReport report;
  Bundle last_bundle;
  TrainResult last_history;
};

// Repetition r: fresh split with seed split_seed + r, fresh init with
// model seed + r, train seed + r, then train and evaluate.
ProtocolResult protocol(const LabeledDataset& dataset, const RunConfig& config, int repetitions);

}  // namespace midccnn
