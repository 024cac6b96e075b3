#include "midccnn/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

using nlohmann::json;

namespace midccnn {
namespace {

// Strict object reader: every key must be consumed, every violation is
// collected rather than thrown one at a time.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string path, std::vector<std::string>& errors)
      : obj_(obj), path_(std::move(path)), errors_(errors) {
    if (!obj.is_object()) errors_.push_back(path_ + " must be a JSON object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    if (!obj_.is_object() || !obj_.contains(key)) return;
    seen_.push_back(key);
    try {
      out = obj_.at(key).get<T>();
    } catch (const json::exception&) {
      errors_.push_back(path_ + "." + key + " has the wrong type");
    }
  }

  void read_string(const char* key, std::string& out) { read<std::string>(key, out); }

  const json* child(const char* key) {
    if (!obj_.is_object() || !obj_.contains(key)) return nullptr;
    seen_.push_back(key);
    return &obj_.at(key);
  }

  void finish() {
    if (!obj_.is_object()) return;
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      bool known = false;
      for (const auto& s : seen_)
        if (s == it.key()) known = true;
      if (!known) errors_.push_back(path_ + "." + it.key() + " is not a recognized key");
    }
  }

 private:
  const json& obj_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::vector<std::string> seen_;
};

void parse_model(const json& obj, DccnnConfig& cfg, std::vector<std::string>& errors) {
  ObjectReader r(obj, "model", errors);
  r.read("input_size", cfg.input_size);
  r.read("in_channels", cfg.in_channels);
  r.read("init_channels", cfg.init_channels);
  r.read("growth_rate", cfg.growth_rate);
  r.read("block_lengths", cfg.block_lengths);
  r.read("refine_channels", cfg.refine_channels);
  r.read("num_classes", cfg.num_classes);
  r.read("seed", cfg.seed);
  r.read("use_batchnorm", cfg.use_batchnorm);
  std::string head;
  r.read_string("head", head);
  if (!head.empty()) {
    if (head == "gap_fc") cfg.head = HeadKind::gap_fc;
    else if (head == "mil") cfg.head = HeadKind::mil;
    else errors.push_back("model.head must be \"gap_fc\" or \"mil\", got \"" + head + "\"");
  }
  r.finish();
}

void parse_mil(const json& obj, MilHeadConfig& cfg, std::vector<std::string>& errors) {
  ObjectReader r(obj, "mil", errors);
  r.read("hidden_dim", cfg.hidden_dim);
  r.read("attention_on_probs", cfg.attention_on_probs);
  std::string method;
  r.read_string("method", method);
  if (!method.empty()) {
    try {
      cfg.method = mil_pooling_from_string(method);
    } catch (const std::exception& e) {
      errors.push_back(std::string("mil.method: ") + e.what());
    }
  }
  r.finish();
}

void parse_train(const json& obj, TrainConfig& cfg, std::vector<std::string>& errors) {
  ObjectReader r(obj, "train", errors);
  r.read("lr0", cfg.lr0);
  r.read("stage_epochs", cfg.stage_epochs);
  r.read("lr_factor", cfg.lr_factor);
  r.read("lr_min", cfg.lr_min);
  r.read("weight_decay", cfg.weight_decay);
  r.read("dropout", cfg.dropout);
  r.read("batch_size", cfg.batch_size);
  r.read("beta1", cfg.beta1);
  r.read("beta2", cfg.beta2);
  r.read("eps", cfg.eps);
  r.read("seed", cfg.seed);
  r.finish();
}

}  // namespace

RunConfig run_config_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    fail(std::string("config: invalid JSON: ") + e.what());
  }
  RunConfig cfg;
  std::vector<std::string> errors;
  ObjectReader root(doc, "config", errors);
  if (const json* model = root.child("model")) parse_model(*model, cfg.model, errors);
  if (const json* mil = root.child("mil")) parse_mil(*mil, cfg.mil, errors);
  if (const json* train = root.child("train")) parse_train(*train, cfg.train, errors);
  if (const json* data = root.child("data")) {
    ObjectReader r(*data, "data", errors);
    r.read("train_ratio", cfg.train_ratio);
    r.read("split_seed", cfg.split_seed);
    r.finish();
  }
  root.finish();

  for (const auto& e : cfg.model.validate()) errors.push_back("model: " + e);
  for (const auto& e : cfg.train.validate()) errors.push_back("train: " + e);
  if (!(cfg.train_ratio > 0.0 && cfg.train_ratio < 1.0))
    errors.push_back("data.train_ratio must be in (0, 1)");
  if (cfg.mil.hidden_dim < 1) errors.push_back("mil.hidden_dim must be positive");

  if (!errors.empty()) {
    std::string msg = "config validation failed:";
    for (const auto& e : errors) msg += "\n  - " + e;
    fail(msg);
  }
  cfg.mil.num_classes = cfg.model.num_classes;
  return cfg;
}

RunConfig run_config_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return run_config_from_json(buf.str());
}

std::string run_config_to_json(const RunConfig& cfg) {
  json doc;
  doc["model"] = {
      {"input_size", cfg.model.input_size},
      {"in_channels", cfg.model.in_channels},
      {"init_channels", cfg.model.init_channels},
      {"growth_rate", cfg.model.growth_rate},
      {"block_lengths", cfg.model.block_lengths},
      {"refine_channels", cfg.model.refine_channels},
      {"num_classes", cfg.model.num_classes},
      {"head", cfg.model.head == HeadKind::mil ? "mil" : "gap_fc"},
      {"seed", cfg.model.seed},
      {"use_batchnorm", cfg.model.use_batchnorm},
  };
  doc["mil"] = {
      {"method", to_string(cfg.mil.method)},
      {"hidden_dim", cfg.mil.hidden_dim},
      {"attention_on_probs", cfg.mil.attention_on_probs},
  };
  doc["train"] = {
      {"lr0", cfg.train.lr0},
      {"stage_epochs", cfg.train.stage_epochs},
      {"lr_factor", cfg.train.lr_factor},
      {"lr_min", cfg.train.lr_min},
      {"weight_decay", cfg.train.weight_decay},
      {"dropout", cfg.train.dropout},
      {"batch_size", cfg.train.batch_size},
      {"beta1", cfg.train.beta1},
      {"beta2", cfg.train.beta2},
      {"eps", cfg.train.eps},
      {"seed", cfg.train.seed},
  };
  doc["data"] = {
      {"train_ratio", cfg.train_ratio},
      {"split_seed", cfg.split_seed},
  };
  return doc.dump(2) + "\n";
}

RunConfig desk_profile() {
  RunConfig cfg;
  cfg.model.input_size = 96;
  cfg.model.init_channels = 16;
  cfg.model.growth_rate = 8;
  cfg.model.num_classes = 3;
  cfg.model.head = HeadKind::mil;
  cfg.mil.hidden_dim = 64;
  cfg.train.stage_epochs = 10;
  cfg.train.batch_size = 8;
  return cfg;
}

std::vector<Parameter> Bundle::parameters() const {
  std::vector<Parameter> params = model->parameters();
  if (head)
    for (auto& p : head->parameters()) params.push_back(p);
  return params;
}

std::vector<TensorPtr> Bundle::buffers() const { return model->buffers(); }

Bundle make_bundle(const RunConfig& config) {
  Bundle bundle;
  bundle.config = config;
  bundle.config.mil.num_classes = config.model.num_classes;
  bundle.model = std::make_shared<Dccnn>(bundle.config.model);
  if (config.model.head == HeadKind::mil) {
    bundle.config.mil.in_channels = bundle.model->feature_channels();
    bundle.head = std::make_shared<MilHead>(bundle.config.mil);
  }
  init_params(bundle.parameters(), config.model.seed);
  return bundle;
}

}  // namespace midccnn
