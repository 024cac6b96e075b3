// Python bindings: numpy-facing wrappers over the tensor ops plus the
// model/train/eval workflows.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "midccnn/checkpoint.hpp"
#include "midccnn/eval.hpp"

namespace py = pybind11;
using namespace midccnn;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

TensorPtr to_tensor(const Array& arr) {
  Shape shape;
  for (py::ssize_t i = 0; i < arr.ndim(); ++i)
    shape.push_back(static_cast<int>(arr.shape(i)));
  std::vector<double> values(arr.data(), arr.data() + arr.size());
  return make_tensor(std::move(shape), std::move(values));
}

Array to_array(const TensorPtr& t) {
  std::vector<py::ssize_t> shape(t->shape.begin(), t->shape.end());
  Array arr(shape);
  std::copy(t->values.begin(), t->values.end(), arr.mutable_data());
  return arr;
}

LabeledDataset dataset_from_python(const std::vector<Array>& images,
                                   const std::vector<int>& labels,
                                   std::vector<std::string> class_names) {
  if (images.size() != labels.size()) fail("images and labels must have the same length");
  if (class_names.empty()) {
    int n_c = 0;
    for (int l : labels) n_c = std::max(n_c, l + 1);
    for (int c = 0; c < n_c; ++c) class_names.push_back("class" + std::to_string(c));
  }
  LabeledDataset ds;
  ds.class_names = std::move(class_names);
  for (size_t i = 0; i < images.size(); ++i) {
    TensorPtr img = to_tensor(images[i]);
    if (img->rank() != 3 || img->shape[0] != 3) fail("images must be [3, H, W] float arrays");
    ds.items.push_back({img, labels[i], "python/" + std::to_string(i)});
  }
  return ds;
}

// Bundle plus training state, the unit the python side works with.
class PyModel {
 public:
  explicit PyModel(const std::string& config_json)
      : bundle_(make_bundle(run_config_from_json(config_json))) {}
  explicit PyModel(Bundle bundle) : bundle_(std::move(bundle)) {}

  std::string config_json() const { return run_config_to_json(bundle_.config); }

  py::dict predict(const Array& image) {
    TensorPtr img = to_tensor(image);
    const int s = bundle_.config.model.input_size;
    if (img->rank() != 3 || img->shape[0] != 3) fail("expected a [3, H, W] image");
    if (img->shape[1] != s || img->shape[2] != s) img = resize_bilinear(img, s, s);
    auto x = make_tensor({1, 3, s, s}, img->values);
    Tape tape;
    TensorPtr features = bundle_.model->forward_features(tape, x, Mode::eval);
    py::dict out;
    if (bundle_.head) {
      BagPrediction pred = bundle_.head->predict(features);
      out["p_bag"] = py::cast(pred.p_bag);
      out["instance_probs"] = to_array(pred.instance_probs);
      if (pred.attention) {
        auto attn = make_tensor({pred.grid_h, pred.grid_w}, *pred.attention);
        out["attention"] = to_array(attn);
      } else {
        out["attention"] = py::none();
      }
    } else {
      TensorPtr p = bundle_.model->forward_gap_head(tape, features);
      out["p_bag"] = py::cast(p->values);
      out["instance_probs"] = py::none();
      out["attention"] = py::none();
    }
    return out;
  }

  Array features(const Array& image) {
    TensorPtr img = to_tensor(image);
    const int s = bundle_.config.model.input_size;
    if (img->shape[1] != s || img->shape[2] != s) img = resize_bilinear(img, s, s);
    auto x = make_tensor({1, 3, s, s}, img->values);
    Tape tape;
    return to_array(bundle_.model->forward_features(tape, x, Mode::eval));
  }

  py::list fit(const std::vector<Array>& images, const std::vector<int>& labels,
               const std::vector<std::string>& class_names) {
    LabeledDataset ds = dataset_from_python(images, labels, class_names);
    TrainResult result = train(*bundle_.model, bundle_.head.get(), ds, bundle_.config.train);
    py::list history;
    for (const auto& e : result.history) {
      py::dict row;
      row["epoch"] = e.epoch;
      row["lr"] = e.lr;
      row["mean_loss"] = e.mean_loss;
      row["train_acc"] = e.train_acc;
      history.append(row);
    }
    optimizer_ = result.optimizer;
    return history;
  }

  double evaluate(const std::vector<Array>& images, const std::vector<int>& labels,
                  const std::vector<std::string>& class_names) {
    LabeledDataset ds = dataset_from_python(images, labels, class_names);
    return evaluate_oa(bundle_, ds, bundle_.config.train.batch_size).oa_percent;
  }

  void save(const std::string& path) { save_bundle(path, bundle_, optimizer_.get()); }

  py::dict gradcheck_report(const Array& image, int label, double tolerance, size_t coords,
                            uint64_t seed) {
    TensorPtr img = to_tensor(image);
    const int s = bundle_.config.model.input_size;
    auto x = make_tensor({1, 3, s, s}, img->values);
    GradCheckReport report =
        gradcheck(*bundle_.model, bundle_.head.get(), x, label, tolerance, coords, seed);
    py::dict out;
    out["max_rel_err"] = report.max_rel_err;
    out["coords_checked"] = report.coords_checked;
    out["failures"] = static_cast<int>(report.failures.size());
    return out;
  }

 private:
  Bundle bundle_;
  std::shared_ptr<Adam> optimizer_;
};

Array op_unary(const Array& a, ops::EwKind kind) {
  Tape tape;
  return to_array(ops::elementwise(tape, kind, to_tensor(a)));
}

}  // namespace

PYBIND11_MODULE(_midccnn, m) {
  m.doc() = "DCCNN backbone with attention-based multiple-instance pooling";
  m.attr("__version__") = "0.1.0";

  m.def("relu", [](const Array& a) { return op_unary(a, ops::EwKind::relu); });
  m.def("tanh", [](const Array& a) { return op_unary(a, ops::EwKind::tanh); });
  m.def(
      "softmax",
      [](const Array& a, int axis) {
        Tape tape;
        return to_array(ops::softmax(tape, to_tensor(a), axis));
      },
      py::arg("x"), py::arg("axis"));
  m.def("matmul", [](const Array& a, const Array& b) {
    Tape tape;
    return to_array(ops::matmul(tape, to_tensor(a), to_tensor(b)));
  });
  m.def(
      "conv2d",
      [](const Array& x, const Array& w, const Array& b, int stride, int padding) {
        Tape tape;
        return to_array(ops::conv2d(tape, to_tensor(x), to_tensor(w), to_tensor(b), stride, padding));
      },
      py::arg("x"), py::arg("weight"), py::arg("bias"), py::arg("stride") = 1,
      py::arg("padding") = 0);
  m.def(
      "pool2d",
      [](const Array& x, const std::string& kind, int k, int stride, int padding) {
        Tape tape;
        return to_array(ops::pool2d(tape, kind == "max" ? ops::PoolKind::max : ops::PoolKind::avg,
                                    to_tensor(x), k, stride, padding));
      },
      py::arg("x"), py::arg("kind"), py::arg("k"), py::arg("stride"), py::arg("padding") = 0);

  m.def("desk_config", [] { return run_config_to_json(desk_profile()); });
  m.def("shape_plan", [](const std::string& config_json) {
    ShapePlan plan = plan_shapes(run_config_from_json(config_json).model);
    py::list out;
    for (const auto& s : plan.stages) out.append(py::make_tuple(s.name, s.channels, s.height, s.width));
    return out;
  });
  m.def(
      "synth_generate",
      [](int classes, int per_class, int size, uint64_t seed) {
        LabeledDataset ds = synth_generate(classes, per_class, size, seed);
        py::list images, labels;
        for (const auto& item : ds.items) {
          images.append(to_array(item.image));
          labels.append(item.label);
        }
        return py::make_tuple(images, labels, ds.class_names);
      },
      py::arg("classes"), py::arg("per_class"), py::arg("size"), py::arg("seed") = 0);
  m.def(
      "load_image_dir",
      [](const std::string& root, int target_size) {
        LabeledDataset ds = load_image_dir(root, target_size);
        py::list images, labels;
        for (const auto& item : ds.items) {
          images.append(to_array(item.image));
          labels.append(item.label);
        }
        return py::make_tuple(images, labels, ds.class_names);
      },
      py::arg("root"), py::arg("target_size"));

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("config_json"))
      .def_static("load", [](const std::string& path) { return PyModel(load_bundle(path)); })
      .def("config_json", &PyModel::config_json)
      .def("predict", &PyModel::predict, py::arg("image"))
      .def("features", &PyModel::features, py::arg("image"))
      .def("fit", &PyModel::fit, py::arg("images"), py::arg("labels"),
           py::arg("class_names") = std::vector<std::string>{})
      .def("evaluate", &PyModel::evaluate, py::arg("images"), py::arg("labels"),
           py::arg("class_names") = std::vector<std::string>{})
      .def("save", &PyModel::save, py::arg("path"))
      .def("gradcheck", &PyModel::gradcheck_report, py::arg("image"), py::arg("label"),
           py::arg("tolerance") = 1e-4, py::arg("coords") = 200, py::arg("seed") = 0);
}
