#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "pami/cli.hpp"
#include "pami/error.hpp"
#include "pami/inference.hpp"
#include "pami/partition.hpp"
#include "pami/trainer.hpp"

namespace py = pybind11;
using namespace pami;

namespace {

template <typename V>
py::array_t<V> to_array(const Grid<V>& g) {
  py::array_t<V> a({g.height, g.width});
  std::copy(g.data.begin(), g.data.end(), a.mutable_data());
  return a;
}

template <typename V>
Grid<V> from_array(const py::array_t<V, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw Error("bad-shape", "expected a 2D array");
  Grid<V> g(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), g.data.begin());
  return g;
}

Mask mask_from(const py::object& a) {
  auto as_int = py::array_t<int, py::array::c_style | py::array::forcecast>::ensure(a);
  if (!as_int) throw Error("bad-shape", "mask must be numeric");
  const auto g = from_array<int>(as_int);
  Mask m(g.height, g.width);
  for (std::size_t i = 0; i < g.size(); ++i) m.data[i] = g.data[i] != 0;
  return m;
}

py::dict episode_dict(const Episode& e) {
  py::dict d;
  d["support"] = to_array(e.support);
  d["support_mask"] = to_array(e.support_mask);
  d["query"] = to_array(e.query);
  d["query_mask"] = to_array(e.query_mask);
  d["class_id"] = e.class_id;
  d["episode_id"] = e.episode_id;
  return d;
}

TrainConfig train_config(const std::string& json) {
  TrainConfig cfg;
  if (!json.empty()) cfg.merge_json(json);
  cfg.validate();
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_pami, m) {
  m.doc() = "Few-shot medical image segmentation with regional prototypes.";

  static py::exception<Error> error(m, "PamiError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetObject(error.ptr(), py::make_tuple(e.code(), e.what()).ptr());
    }
  });

  m.def(
      "partition",
      [](const py::object& mask, int n_f, std::uint64_t seed) {
        SeedSet seeds;
        const RegionMaskSet r = partition_foreground(mask_from(mask), n_f, seed, &seeds);
        py::array_t<int> labels({r.height, r.width});
        std::copy(r.labels.begin(), r.labels.end(), labels.mutable_data());
        std::vector<std::pair<int, int>> coords;
        for (const auto& c : seeds.coords) coords.emplace_back(c.row, c.col);
        return py::make_tuple(labels, coords);
      },
      py::arg("mask"), py::arg("n_f") = kDefaultRegionCount, py::arg("seed") = 0,
      "Split a binary mask into Voronoi regions. Returns (labels, seeds), labels = -1 outside the mask.");

  m.def(
      "dice", [](const py::object& a, const py::object& b) { return dice_score(mask_from(a), mask_from(b)); },
      py::arg("pred"), py::arg("target"));

  m.def(
      "default_train_config", [] { return TrainConfig{}.to_json(); },
      "Default training configuration as a JSON string.");

  py::class_<Dataset>(m, "Dataset")
      .def_static("load", &Dataset::load, py::arg("root"))
      .def_static(
          "synthetic",
          [](int n_scans, int slices, int height, int width, std::uint64_t seed) {
            SynthConfig c;
            c.n_scans = n_scans;
            c.slices_per_scan = slices;
            c.height = height;
            c.width = width;
            c.seed = seed;
            return Dataset::in_memory(c);
          },
          py::arg("n_scans") = 10, py::arg("slices") = 16, py::arg("height") = 64, py::arg("width") = 64,
          py::arg("seed") = 0)
      .def_property_readonly("scan_ids",
                             [](const Dataset& d) {
                               std::vector<std::string> ids;
                               for (const auto& s : d.manifest.scans) ids.push_back(s.id);
                               return ids;
                             })
      .def(
          "eval_episodes",
          [](const Dataset& d, int fold, int class_id) {
            py::list out;
            for (const auto& e : build_eval_episodes(d, fold, class_id)) out.append(episode_dict(e));
            return out;
          },
          py::arg("fold"), py::arg("class_id"));

  py::class_<Trainer>(m, "Trainer")
      .def(py::init([](const Dataset& data, const std::string& config) { return Trainer(data, train_config(config)); }),
           py::arg("data"), py::arg("config") = "", py::keep_alive<1, 2>())
      .def("step",
           [](Trainer& t) {
             const LossRecord r = t.step();
             return py::make_tuple(r.iter, r.lr, r.loss);
           })
      .def_property_readonly("iteration", &Trainer::iteration)
      .def("save", &Trainer::save_checkpoint, py::arg("path"))
      .def(
          "evaluate",
          [](Trainer& t, const Dataset& data, int fold, std::uint64_t seed) {
            return fold_score_json(evaluate_fold(t.params(), data, fold, {}, t.config().forward(), seed));
          },
          py::arg("data"), py::arg("fold") = 0, py::arg("seed") = 0, "Per-class DSC table as a JSON string.")
      .def(
          "predict",
          [](Trainer& t, const py::dict& episode, std::uint64_t seed) {
            Episode e;
            e.support = from_array<float>(episode["support"].cast<py::array>());
            e.support_mask = mask_from(episode["support_mask"]);
            e.query = from_array<float>(episode["query"].cast<py::array>());
            Image2D soft;
            const Mask pred = predict_mask(t.params(), e, t.config().forward(), seed, &soft);
            return py::make_tuple(to_array(pred), to_array(soft));
          },
          py::arg("episode"), py::arg("seed") = 0, "Returns (binary mask, soft prediction).");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli::dispatch(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run a command-line invocation in-process. Returns (exit code, stdout, stderr).");
}
