#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ppg/errors.hpp"
#include "ppg/io.hpp"
#include "ppg/module_checks.hpp"
#include "ppg/ops.hpp"
#include "ppg/train.hpp"

namespace py = pybind11;
using namespace ppg;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

std::vector<ObjectClass> to_classes(const std::vector<std::string>& names) {
  std::vector<ObjectClass> out;
  for (const auto& n : names) out.push_back(parse_class(n));
  return out;
}

std::vector<std::string> class_names(const std::vector<ObjectClass>& cs) {
  std::vector<std::string> out;
  for (auto c : cs) out.push_back(class_name(c));
  return out;
}

py::dict episode_dict(const Episode& ep) {
  py::dict d;
  d["classes"] = class_names(ep.classes);
  d["target"] = to_array(ep.target);
  d["gt"] = to_array(ep.gt);
  d["support_images"] = to_array(ep.support.images);
  d["support_masks"] = to_array(ep.support.masks);
  return d;
}

Episode episode_from(const py::dict& d) {
  Episode ep;
  ep.classes = to_classes(d["classes"].cast<std::vector<std::string>>());
  ep.target = to_tensor(d["target"].cast<Array>());
  ep.gt = to_tensor(d["gt"].cast<Array>());
  ep.support = {to_tensor(d["support_images"].cast<Array>()), to_tensor(d["support_masks"].cast<Array>())};
  return ep;
}

std::vector<Episode> episodes_from(const py::list& l) {
  std::vector<Episode> out;
  for (const auto& item : l) out.push_back(episode_from(item.cast<py::dict>()));
  return out;
}

EpisodeSpec make_spec(std::uint64_t seed, std::size_t size, const std::vector<std::string>& classes,
                      std::size_t shots, double noise, double deformation) {
  EpisodeSpec s;
  s.seed = seed;
  s.height = s.width = size;
  s.classes = to_classes(classes);
  s.shots = shots;
  s.noise = noise;
  s.deformation = deformation;
  return s;
}

ModelConfig model_config(const py::kwargs& kw) {
  const auto known = ModelConfig{}.to_map();
  std::map<std::string, std::string> m;
  for (const auto& [key, value] : kw) {
    const auto k = key.cast<std::string>();
    if (!known.count(k)) throw UsageError("unknown model option '" + k + "'");
    m[k] = py::isinstance<py::bool_>(value) ? (value.cast<bool>() ? "true" : "false") : py::str(value).cast<std::string>();
  }
  return ModelConfig::from_map(m);
}

}  // namespace

PYBIND11_MODULE(_ppg, mod) {
  mod.doc() = "Proxy prompt generator core";

  py::register_exception<UsageError>(mod, "UsageError", PyExc_ValueError);
  py::register_exception<ShapeError>(mod, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(mod, "ConfigError", PyExc_ValueError);
  py::register_exception<ParseError>(mod, "ParseError", PyExc_ValueError);
  py::register_exception<NumericError>(mod, "NumericError", PyExc_ArithmeticError);

  mod.def(
      "generate_episode",
      [](std::uint64_t seed, std::size_t size, const std::vector<std::string>& classes, std::size_t shots,
         double noise, double deformation) {
        return episode_dict(generate_episode(make_spec(seed, size, classes, shots, noise, deformation)));
      },
      py::arg("seed"), py::arg("size") = 64, py::arg("classes") = std::vector<std::string>{"blob", "ring"},
      py::arg("shots") = 1, py::arg("noise") = 0.1, py::arg("deformation") = 0.5);

  mod.def(
      "generate_suite",
      [](std::uint64_t seed, std::size_t count, std::size_t size, const std::vector<std::string>& classes,
         std::size_t shots, bool shuffle) {
        py::list out;
        for (const auto& ep : generate_suite(make_spec(seed, size, classes, shots, 0.1, 0.5), count, shuffle))
          out.append(episode_dict(ep));
        return out;
      },
      py::arg("seed"), py::arg("count"), py::arg("size") = 64,
      py::arg("classes") = std::vector<std::string>{"blob", "ring"}, py::arg("shots") = 1,
      py::arg("shuffle_classes") = false);

  mod.def(
      "dice_loss", [](const Array& p, const Array& g) { return dice_loss(to_tensor(p), to_tensor(g)).item(); },
      py::arg("pred"), py::arg("gt"));
  mod.def(
      "dice_score",
      [](const Array& p, const Array& g) { return dice_score(to_tensor(p).data(), to_tensor(g).data()); },
      py::arg("pred"), py::arg("gt"));
  mod.def(
      "iou_score", [](const Array& p, const Array& g) { return iou_score(to_tensor(p).data(), to_tensor(g).data()); },
      py::arg("pred"), py::arg("gt"));

  mod.def(
      "selective_map",
      [](const Array& sup, const Array& x) {
        const Tensor raw = compute_selective_map(to_tensor(sup), to_tensor(x));
        return py::make_tuple(to_array(raw), to_array(softmax(raw, 0)));
      },
      py::arg("support_features"), py::arg("target_features"),
      "Raw and column-normalized selective map of [C, P] support and [C, Q] target features.");

  mod.def("encode_ppgt", [](const Array& a) {
    const auto bytes = encode_ppgt(to_tensor(a));
    return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  });
  mod.def("decode_ppgt", [](const py::bytes& b) {
    const std::string s = b;
    return to_array(decode_ppgt({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}));
  });
  mod.def("save_tensor", [](const std::filesystem::path& p, const Array& a) { save_tensor(p, to_tensor(a)); });
  mod.def("load_tensor", [](const std::filesystem::path& p) { return to_array(load_tensor(p)); });

  mod.def("checkable_modules", &checkable_modules);
  mod.def(
      "gradcheck",
      [](const std::string& module, double tol) {
        GradCheckOptions opt;
        opt.tolerance = tol;
        py::list out;
        for (const auto& c : run_module_checks(module, opt))
          out.append(py::make_tuple(c.name, c.report.max_rel_error(), c.report.passed()));
        return out;
      },
      py::arg("module"), py::arg("tolerance") = 1e-4,
      "Runs a module's finite-difference checks; returns (name, max relative error, passed) tuples.");

  py::class_<ProxyPromptModel>(mod, "Model")
      .def(py::init([](const py::kwargs& kw) { return ProxyPromptModel(model_config(kw)); }))
      .def_static("load", &ProxyPromptModel::load, py::arg("path"))
      .def("save", &ProxyPromptModel::save, py::arg("path"))
      .def_property_readonly("config", [](const ProxyPromptModel& m) { return m.config().to_map(); })
      .def("parameter_count",
           [](const ProxyPromptModel& m, bool trainable) { return m.params().numel(trainable); },
           py::arg("trainable") = true)
      .def(
          "forward",
          [](const ProxyPromptModel& m, const Array& target, const Array& images, const Array& masks) {
            Prediction p;
            {
              NoGradScope ng;
              p = m.forward(to_tensor(target), {to_tensor(images), to_tensor(masks)});
            }
            py::dict d;
            d["probs"] = to_array(p.probs);
            d["prompt"] = to_array(p.prompt);
            d["selective_map"] = to_array(p.csm.normalized);
            d["e_ctx"] = to_array(p.csm.e_ctx);
            return d;
          },
          py::arg("target"), py::arg("support_images"), py::arg("support_masks"))
      .def(
          "train",
          [](ProxyPromptModel& m, const py::list& episodes, std::size_t steps, std::size_t shots, double lr,
             std::uint64_t seed) {
            TrainConfig tc;
            tc.steps = steps;
            tc.shots = shots;
            tc.sgd.learning_rate = lr;
            tc.seed = seed;
            const TrainResult r = train(m, episodes_from(episodes), tc);
            if (r.diverged) throw NumericError(r.message);
            return r.losses;
          },
          py::arg("episodes"), py::arg("steps"), py::arg("shots") = 1, py::arg("learning_rate") = 0.01,
          py::arg("seed") = 1)
      .def(
          "evaluate",
          [](const ProxyPromptModel& m, const py::list& episodes, const py::list& pool, std::size_t shots,
             std::size_t repeats, std::uint64_t seed) {
            EvalConfig ec{shots, repeats, seed};
            const MetricsReport r = evaluate(model_predictor(m), episodes_from(episodes), episodes_from(pool), ec);
            py::dict d;
            d["mean_dice"] = r.mean_dice;
            d["std_dice"] = r.std_dice;
            d["mean_iou"] = r.mean_iou;
            d["std_iou"] = r.std_iou;
            d["repeat_dice"] = r.repeat_dice;
            return d;
          },
          py::arg("episodes"), py::arg("pool"), py::arg("shots") = 4, py::arg("repeats") = 5, py::arg("seed") = 1);
}
