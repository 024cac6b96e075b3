#include "midccnn/eval.hpp"

#include <cmath>

#include <json.hpp>

namespace midccnn {

EvalResult evaluate_oa(const Bundle& bundle, const LabeledDataset& test, int batch_size) {
  if (test.items.empty()) fail("evaluate_oa: test set is empty");
  const int n_c = bundle.config.model.num_classes;
  if (test.num_classes() != n_c)
    fail("evaluate_oa: model has " + std::to_string(n_c) + " classes but dataset has " +
         std::to_string(test.num_classes()));
  const int s = bundle.config.model.input_size;
  const int64_t per = 3LL * s * s;

  EvalResult result;
  result.confusion.assign(n_c, std::vector<int64_t>(n_c, 0));
  int64_t correct = 0;
  for (size_t begin = 0; begin < test.items.size(); begin += batch_size) {
    const size_t end = std::min(test.items.size(), begin + batch_size);
    auto x = make_tensor({static_cast<int>(end - begin), 3, s, s});
    for (size_t i = begin; i < end; ++i) {
      const auto& img = test.items[i].image;
      if (img->shape != Shape{3, s, s})
        fail("evaluate_oa: item " + test.items[i].source_id + " has shape " +
             shape_str(img->shape) + ", expected [3, " + std::to_string(s) + ", " +
             std::to_string(s) + "]");
      std::copy(img->values.begin(), img->values.end(), x->values.begin() + (i - begin) * per);
    }
    Tape tape;
    TensorPtr features = bundle.model->forward_features(tape, x, Mode::eval);
    TensorPtr p_bag = bundle.head ? bundle.head->forward(tape, features).p_bag
                                  : bundle.model->forward_gap_head(tape, features);
    for (size_t i = begin; i < end; ++i) {
      const double* row = p_bag->values.data() + (i - begin) * n_c;
      int best = 0;
      for (int c = 1; c < n_c; ++c)
        if (row[c] > row[best]) best = c;  // ties keep the lowest class index
      const int truth = test.items[i].label;
      result.confusion[truth][best] += 1;
      if (best == truth) ++correct;
    }
  }
  result.oa_percent = 100.0 * static_cast<double>(correct) / static_cast<double>(test.items.size());
  return result;
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::json doc;
  doc["per_rep_oa"] = report.per_rep_oa;
  doc["mean_oa"] = report.mean_oa;
  doc["std_oa"] = report.std_oa;
  doc["confusion"] = report.confusion;
  return doc.dump(2) + "\n";
}

ProtocolResult protocol(const LabeledDataset& dataset, const RunConfig& config, int repetitions) {
  if (repetitions < 1) fail("protocol: repetitions must be >= 1");
  if (dataset.num_classes() != config.model.num_classes)
    fail("protocol: config expects " + std::to_string(config.model.num_classes) +
         " classes but dataset has " + std::to_string(dataset.num_classes()));

  EvalReport report;
  std::optional<ProtocolResult> result;
  for (int r = 0; r < repetitions; ++r) {
    auto [train_set, test_set] =
        stratified_split(dataset, config.train_ratio, config.split_seed + static_cast<uint64_t>(r));
    RunConfig rep_config = config;
    rep_config.model.seed = config.model.seed + static_cast<uint64_t>(r);
    rep_config.train.seed = config.train.seed + static_cast<uint64_t>(r);
    Bundle bundle = make_bundle(rep_config);
    TrainResult history = train(*bundle.model, bundle.head.get(), train_set, rep_config.train);
    EvalResult eval = evaluate_oa(bundle, test_set, rep_config.train.batch_size);
    report.per_rep_oa.push_back(eval.oa_percent);
    if (r == repetitions - 1) {
      report.confusion = eval.confusion;
      result = ProtocolResult{EvalReport{}, std::move(bundle), std::move(history)};
    }
  }

  double sum = 0.0;
  for (double oa : report.per_rep_oa) sum += oa;
  report.mean_oa = sum / static_cast<double>(repetitions);
  double sq = 0.0;
  for (double oa : report.per_rep_oa) sq += (oa - report.mean_oa) * (oa - report.mean_oa);
  report.std_oa = repetitions > 1 ? std::sqrt(sq / static_cast<double>(repetitions - 1)) : 0.0;

  result->report = std::move(report);
  return std::move(*result);
}

}  // namespace midccnn
