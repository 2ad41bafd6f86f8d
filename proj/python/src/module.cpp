// Python bindings. Arrays cross the boundary as numpy copies and configs as
// JSON text; the pure-Python package layer turns those into dicts.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <sstream>

#include <torch/torch.h>

#include "e2kd/cli.hpp"
#include "e2kd/data.hpp"
#include "e2kd/distill.hpp"
#include "e2kd/explain.hpp"
#include "e2kd/frozen_store.hpp"
#include "e2kd/losses.hpp"
#include "e2kd/metrics.hpp"
#include "e2kd/nets.hpp"

namespace py = pybind11;
using namespace e2kd;

namespace {

torch::Tensor to_tensor(const py::array& a) {
  auto dt = a.dtype();
  torch::Dtype t;
  if (dt.is(py::dtype::of<float>())) t = torch::kFloat32;
  else if (dt.is(py::dtype::of<double>())) t = torch::kFloat64;
  else if (dt.is(py::dtype::of<int64_t>())) t = torch::kInt64;
  else if (dt.is(py::dtype::of<int32_t>())) t = torch::kInt32;
  else if (dt.is(py::dtype::of<bool>())) t = torch::kBool;
  else throw InputError("unsupported array dtype (float32, float64, int32, int64, bool)");
  auto c = py::array::ensure(a, py::array::c_style);
  std::vector<int64_t> shape(c.shape(), c.shape() + c.ndim());
  return torch::from_blob(const_cast<void*>(c.data()), shape, t).clone();
}

py::array to_numpy(torch::Tensor t) {
  t = t.detach().contiguous().cpu();
  py::dtype dt;
  switch (t.scalar_type()) {
    case torch::kFloat32: dt = py::dtype::of<float>(); break;
    case torch::kFloat64: dt = py::dtype::of<double>(); break;
    case torch::kInt64: dt = py::dtype::of<int64_t>(); break;
    case torch::kInt32: dt = py::dtype::of<int32_t>(); break;
    case torch::kBool: dt = py::dtype::of<bool>(); break;
    default: t = t.to(torch::kFloat64); dt = py::dtype::of<double>();
  }
  std::vector<py::ssize_t> shape(t.sizes().begin(), t.sizes().end());
  py::array out(dt, shape);
  std::memcpy(out.mutable_data(), t.data_ptr(), t.nbytes());
  return out;
}

json parse(const std::string& text) {
  if (text.empty()) return json::object();
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
}

TrainData train_data(const DatasetSplit& s) { return {s.train, s.val}; }

}  // namespace

PYBIND11_MODULE(_e2kd, m) {
  m.doc() = "Explanation-enhanced knowledge distillation core";
  m.attr("__version__") = E2KD_VERSION;

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<InputError>(m, "InputError", base.ptr());
  py::register_exception<UnsupportedError>(m, "UnsupportedError", base.ptr());
  py::register_exception<GeometryError>(m, "GeometryError", base.ptr());
  py::register_exception<StorageError>(m, "StorageError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<StateError>(m, "StateError", base.ptr());
  py::register_exception<IntegrityError>(m, "IntegrityError", base.ptr());
  py::register_exception<TrainingError>(m, "TrainingError", base.ptr());

  // losses
  m.def("kd_loss", [](const py::array& t, const py::array& s, double tau) {
    return kd_loss(to_tensor(t), to_tensor(s), tau).item<double>();
  }, py::arg("teacher_logits"), py::arg("student_logits"), py::arg("tau") = 1.0);
  m.def("mld_loss", [](const py::array& t, const py::array& s, double tau) {
    return mld_loss(to_tensor(t), to_tensor(s), tau).item<double>();
  }, py::arg("teacher_logits"), py::arg("student_logits"), py::arg("tau") = 1.0);
  m.def("exp_loss", [](const py::array& t, const py::array& s) {
    return exp_loss(to_tensor(t), to_tensor(s)).item<double>();
  }, py::arg("teacher_maps"), py::arg("student_maps"));
  m.def("map_cosine", [](const py::array& a, const py::array& b) { return map_cosine(to_tensor(a), to_tensor(b)); });

  // metrics
  m.def("agreement", [](const py::array& a, const py::array& b) { return agreement(to_tensor(a), to_tensor(b)); });
  auto box = [](std::tuple<int64_t, int64_t, int64_t, int64_t> b) {
    return BBox{std::get<0>(b), std::get<1>(b), std::get<2>(b), std::get<3>(b)};
  };
  m.def("epg", [box](const py::array& map, std::tuple<int64_t, int64_t, int64_t, int64_t> b, int64_t h, int64_t w) {
    auto s = epg(to_tensor(map), box(b), h, w);
    return std::make_pair(s.value, s.degenerate);
  }, py::arg("map"), py::arg("bbox"), py::arg("height"), py::arg("width"),
        "Energy inside bbox (top, left, height, width); returns (value, degenerate).");
  m.def("iou", [box](const py::array& map, std::tuple<int64_t, int64_t, int64_t, int64_t> b, int64_t h, int64_t w,
                     double thr) {
    auto s = iou(to_tensor(map), box(b), h, w, thr);
    return std::make_pair(s.value, s.degenerate);
  }, py::arg("map"), py::arg("bbox"), py::arg("height"), py::arg("width"), py::arg("threshold") = 0.05);
  m.def("estimate_period", &estimate_period, py::arg("curve"), py::arg("eps") = 0.02);
  m.def("shift_diagonal", [](const py::array& images, int64_t t) { return to_numpy(shift_diagonal(to_tensor(images), t)); });

  // data
  py::class_<Dataset>(m, "Dataset")
      .def_readonly("name", &Dataset::name)
      .def_readonly("num_classes", &Dataset::num_classes)
      .def_readonly("multilabel", &Dataset::multilabel)
      .def("__len__", &Dataset::size)
      .def("images", [](const Dataset& d) { return to_numpy(d.images()); })
      .def("labels", [](const Dataset& d) { return to_numpy(d.labels()); })
      .def("targets", [](const Dataset& d) { return to_numpy(d.targets()); })
      .def("sample_ids", [](const Dataset& d) {
        std::vector<std::string> ids;
        for (const auto& s : d.samples) ids.push_back(s.sample_id);
        return ids;
      })
      .def("bboxes", [](const Dataset& d) {
        std::vector<std::tuple<int64_t, int64_t, int64_t, int64_t>> out;
        for (const auto& s : d.samples) out.emplace_back(s.bbox().top, s.bbox().left, s.bbox().height, s.bbox().width);
        return out;
      })
      .def("groups", [](const Dataset& d) {
        std::vector<std::string> out;
        for (const auto& s : d.samples) out.push_back(group_name(s.group()));
        return out;
      })
      .def("fingerprint", [](const Dataset& d) { return dataset_fingerprint(d); });

  py::class_<DatasetSplit>(m, "DatasetSplit")
      .def_readonly("kind", &DatasetSplit::kind)
      .def_readonly("correlation", &DatasetSplit::correlation)
      .def_readonly("seed", &DatasetSplit::seed)
      .def_readonly("train", &DatasetSplit::train)
      .def_readonly("val", &DatasetSplit::val)
      .def_readonly("test_id", &DatasetSplit::test_id)
      .def_readonly("test_ood", &DatasetSplit::test_ood)
      .def("params_json", [](const DatasetSplit& s) { return s.params.dump(); })
      .def("fingerprint", [](const DatasetSplit& s) { return dataset_fingerprint(s); });

  m.def("generate_biased", [](const std::string& params) {
    return generate_biased_dataset(biased_params_from_json(parse(params)));
  }, py::arg("params_json") = "");
  m.def("generate_shapes", [](const std::string& params) {
    return generate_shapes_dataset(shapes_params_from_json(parse(params)));
  }, py::arg("params_json") = "");
  m.def("save_dataset", &save_dataset);
  m.def("load_dataset", &load_dataset);
  m.def("subsample_fraction", &subsample_fraction);
  m.def("subsample_shots", &subsample_shots);

  // nets and explanations
  py::class_<Model, std::shared_ptr<Model>>(m, "Model")
      .def(py::init([](const std::string& spec) { return std::make_shared<Model>(spec_from_json(parse(spec))); }),
           py::arg("spec_json"))
      .def_static("load", [](const std::filesystem::path& p) { return std::make_shared<Model>(load_checkpoint(p)); })
      .def("save", [](const Model& mdl, const std::filesystem::path& p) { save_checkpoint(mdl, p); })
      .def("spec_json", [](const Model& mdl) { return to_json(mdl.spec()).dump(); })
      .def_property_readonly("family", [](const Model& mdl) { return to_string(mdl.family()); })
      .def_property_readonly("model_id", &Model::model_id)
      .def_property_readonly("digest", &Model::digest)
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def_property_readonly("training", [](const Model& mdl) { return mdl.mode() == Mode::Train; })
      .def("eval", [](Model& mdl) { mdl.set_mode(Mode::Eval); })
      .def("train", [](Model& mdl) { mdl.set_mode(Mode::Train); })
      .def("clone", [](const Model& mdl) { return std::make_shared<Model>(mdl.clone()); })
      .def("forward", [](const Model& mdl, const py::array& rgb) {
        torch::NoGradGuard g;
        return to_numpy(mdl.forward(prepare_input(mdl, to_tensor(rgb))));
      }, "Logits for raw RGB images [N,3,H,W] in [0,1].")
      .def("explain", [](const Model& mdl, const py::array& rgb, int64_t cls, const std::string& method) {
        auto x = prepare_input(mdl, to_tensor(rgb).unsqueeze(0))[0];
        auto mth = method.empty() ? default_method(mdl.family()) : explain_method_from_string(method);
        return to_numpy(explain(mdl, x, cls, mth).values);
      }, py::arg("image"), py::arg("class_id"), py::arg("method") = "",
           "Explanation of one raw RGB image [3,H,W] for class_id.");

  py::class_<FrozenStore>(m, "FrozenStore")
      .def("__len__", &FrozenStore::size)
      .def("manifest_json", [](const FrozenStore& s) { return s.manifest().dump(); })
      .def("save", &FrozenStore::save)
      .def_static("load", &FrozenStore::load);
  m.def("freeze", [](const Model& teacher, const Dataset& d, const std::string& method, int64_t bs) {
    auto mth = method.empty() ? default_method(teacher.family()) : explain_method_from_string(method);
    return freeze(teacher, d, mth, bs);
  }, py::arg("teacher"), py::arg("dataset"), py::arg("method") = "", py::arg("batch_size") = 32);

  // training
  m.def("train_teacher", [](const Model& model, const DatasetSplit& split, const std::string& cfg) {
    auto r = train_teacher(model.clone(), train_data(split), teacher_config_from_json(parse(cfg)));
    return std::make_pair(std::make_shared<Model>(std::move(r.model)), to_json(r.history).dump());
  }, py::arg("model"), py::arg("split"), py::arg("config_json") = "", py::call_guard<py::gil_scoped_release>());
  m.def("default_distill_config", [](const std::string& family) {
    return to_json(default_distill_config(family_from_string(family))).dump();
  });
  m.def("distill", [](const Model& teacher, const Model& student, const DatasetSplit& split, const std::string& cfg,
                      const FrozenStore* store) {
    auto r = distill(teacher, student.clone(), train_data(split), distill_config_from_json(parse(cfg)), store);
    return std::make_pair(std::make_shared<Model>(std::move(r.model)), to_json(r.history).dump());
  }, py::arg("teacher"), py::arg("student"), py::arg("split"), py::arg("config_json"), py::arg("store") = nullptr,
        py::call_guard<py::gil_scoped_release>());
  m.def("evaluate", [](const Model& student, const Model& teacher, const DatasetSplit& split, const std::string& cfg) {
    return to_json(evaluate(student, teacher, split.test_id, split.test_ood, eval_config_from_json(parse(cfg)))).dump();
  }, py::arg("student"), py::arg("teacher"), py::arg("split"), py::arg("config_json") = "",
        py::call_guard<py::gil_scoped_release>());

  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    int code = cli::run(args, out, err);
    return std::make_tuple(code, out.str(), err.str());
  }, py::arg("args"), "Runs one CLI command in-process; returns (exit_code, stdout, stderr).");
}
