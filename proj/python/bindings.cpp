#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "famseg/checkpoint.hpp"
#include "famseg/config.hpp"
#include "famseg/gradcheck_suites.hpp"
#include "famseg/metrics.hpp"
#include "famseg/optim.hpp"
#include "famseg/phantom.hpp"
#include "famseg/train.hpp"

namespace py = pybind11;
using namespace famseg;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

F64 to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  F64 out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const F64& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

U8 mask_to_numpy(const Mask& m) {
  U8 out({m.height, m.width});
  std::copy(m.labels.begin(), m.labels.end(), out.mutable_data());
  return out;
}

Mask mask_from_numpy(const U8& a) {
  if (a.ndim() != 2) throw ShapeError("mask arrays must be 2-D");
  return Mask{static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
              std::vector<std::uint8_t>(a.data(), a.data() + a.size())};
}

// Owns the network; built from config text or restored from a checkpoint.
class PyModel {
 public:
  PyModel(const std::string& config_text, std::uint64_t seed)
      : model_(std::make_unique<FamSegModel>(parse_config(config_text).train.model, seed)) {}
  explicit PyModel(std::unique_ptr<FamSegModel> m) : model_(std::move(m)) {}

  F64 forward(const F64& images) const {
    NoGradGuard guard;
    return to_numpy(model_->forward(from_numpy(images)));
  }
  U8 predict(const F64& image) const { return mask_to_numpy(infer(*model_, from_numpy(image))); }
  std::size_t num_parameters() const { return model_->params().total_numel(); }
  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : model_->params().entries()) out.push_back(name);
    return out;
  }
  std::string config_text() const { return model_config_text(model_->config()); }
  void save(const std::string& path) const { save_checkpoint(path, make_checkpoint(*model_, {})); }

 private:
  std::unique_ptr<FamSegModel> model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "famseg C++ core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<IncompatibleError>(m, "IncompatibleError", PyExc_ValueError);

  m.def(
      "generate",
      [](int n, std::uint64_t seed, int image_size) {
        PhantomSpec spec;
        spec.image_size = image_size;
        py::list out;
        for (const auto& s : generate(spec, n, seed)) out.append(py::make_tuple(to_numpy(s.image), mask_to_numpy(s.mask)));
        return out;
      },
      py::arg("n"), py::arg("seed") = 7, py::arg("image_size") = 64,
      "Synthetic phantoms as a list of (image [3,H,W] float64, mask [H,W] uint8).");

  m.def(
      "iou",
      [](const std::vector<U8>& gt, const std::vector<U8>& pred, int num_classes) {
        if (gt.size() != pred.size()) throw ShapeError("iou: gt and pred lists differ in length");
        ConfusionMatrix cm(num_classes);
        for (std::size_t i = 0; i < gt.size(); ++i) cm.accumulate(mask_from_numpy(gt[i]), mask_from_numpy(pred[i]));
        const IouReport r = iou(cm);
        py::dict d;
        d["per_class"] = r.per_class;
        d["miou"] = r.miou;
        return d;
      },
      py::arg("gt"), py::arg("pred"), py::arg("num_classes") = 3);

  m.def(
      "lr_fit",
      [](int batch, double init_lr, double min_lr, double limit_max, double limit_min) {
        const LrRange r = lr_fit(batch, init_lr, min_lr, limit_max, limit_min);
        return py::make_tuple(r.init_lr, r.min_lr);
      },
      py::arg("batch_size"), py::arg("init_lr") = 0.01, py::arg("min_lr") = 0.0001, py::arg("lr_limit_max") = 0.001,
      py::arg("lr_limit_min") = 0.0001);

  m.def(
      "strip_param_count",
      [](std::int64_t k, std::int64_t ho, std::int64_t wo) {
        const StripCost c = strip_param_count(k, ho, wo);
        return py::make_tuple(c.standard, c.strip);
      },
      py::arg("k"), py::arg("ho"), py::arg("wo"), "(standard, strip) multiply counts of one k-tap block.");

  m.def(
      "gradcheck",
      [](const std::string& module) {
        const SuiteResult r = run_gradcheck_suite(module);
        py::dict d;
        d["passed"] = r.report.passed;
        d["max_rel_error"] = r.report.max_rel_error;
        d["checked"] = r.report.checked;
        d["worst"] = r.report.worst;
        return d;
      },
      py::arg("module"));

  m.def(
      "parse_config",
      [](const std::string& text) { return model_config_text(parse_config(text).train.model); },
      py::arg("text"), "Validates config text and returns the canonical model section.");

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&, std::uint64_t>(), py::arg("config") = "", py::arg("seed") = 1)
      .def_static(
          "load", [](const std::string& path) { return PyModel(restore_model(load_checkpoint(path))); },
          py::arg("path"))
      .def("forward", &PyModel::forward, py::arg("images"), "[N,3,H,W] -> logits [N,classes,H,W]")
      .def("predict", &PyModel::predict, py::arg("image"), "[3,H,W] -> mask [H,W]")
      .def("save", &PyModel::save, py::arg("path"))
      .def_property_readonly("num_parameters", &PyModel::num_parameters)
      .def_property_readonly("parameter_names", &PyModel::parameter_names)
      .def_property_readonly("config_text", &PyModel::config_text);
}
