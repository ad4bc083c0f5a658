// Python bindings. Structured values cross the boundary as JSON text in the
// same layouts as the on-disk files; the cotrain package wraps them as dicts.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cotrain/engine.hpp"
#include "cotrain/error.hpp"
#include "cotrain/eval.hpp"
#include "cotrain/experiment.hpp"
#include "cotrain/io.hpp"
#include "cotrain/json_util.hpp"
#include "cotrain/simdet.hpp"

namespace py = pybind11;
using namespace cotrain;
using nlohmann::json;

namespace {

eval::EvalProtocol protocol_from(double min_height, int recall_points) {
  eval::EvalProtocol p;
  p.min_height = min_height;
  p.recall_points = recall_points;
  p.validate();
  return p;
}

PseudoLabelSet pseudo_from(const std::string& text) { return experiment::parse_pseudo_labels(json::parse(text)); }

std::string dump(const json& j) { return j.dump(); }

json outcome_to_json(const experiment::CellOutcome& o) {
  json j{{"seed", o.seed},         {"labeled_percent", o.labeled_percent}, {"rho", o.rho},
         {"cotrained", o.cotrained}, {"cycles", o.cycles},                   {"final_map", o.final_map},
         {"dir", o.dir.string()}};
  j["lb_map"] = o.lb_map ? json(*o.lb_map) : json(nullptr);
  j["ub_map"] = o.ub_map ? json(*o.ub_map) : json(nullptr);
  return j;
}

}  // namespace

PYBIND11_MODULE(_cotrain, m) {
  m.doc() = "Disagreement-based co-training of 2D box detectors";

  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<BackendError>(m, "BackendError", PyExc_RuntimeError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);

  m.def(
      "iou",
      [](std::array<double, 4> a, std::array<double, 4> b) {
        return eval::iou({a[0], a[1], a[2], a[3]}, {b[0], b[1], b[2], b[3]});
      },
      py::arg("a"), py::arg("b"));

  m.def(
      "average_precision",
      [](const std::vector<bool>& is_tp, std::size_t num_gt, int recall_points) {
        return eval::average_precision(is_tp, num_gt, recall_points);
      },
      py::arg("is_tp"), py::arg("num_gt"), py::arg("recall_points") = 11);

  m.def(
      "evaluate",
      [](const std::string& dets, const std::string& gt, double min_height, int recall_points) {
        const auto report = eval::evaluate(parse_detections(json::parse(dets)), parse_ground_truth(json::parse(gt)),
                                           protocol_from(min_height, recall_points));
        return dump(experiment::report_to_json(report));
      },
      py::arg("dets"), py::arg("gt"), py::arg("min_height") = 25.0, py::arg("recall_points") = 11);

  m.def(
      "fuse", [](const std::string& old, const std::string& fresh) {
        return dump(pseudo_set_to_json(fuse(pseudo_from(old), pseudo_from(fresh))));
      },
      py::arg("old"), py::arg("fresh"));

  m.def(
      "select_top_m",
      [](const std::string& set, std::optional<std::size_t> m) {
        return dump(pseudo_set_to_json(select_top_m(pseudo_from(set), m.value_or(kUnbounded))));
      },
      py::arg("set"), py::arg("m") = py::none());

  m.def(
      "should_stop",
      [](int k_min, int k_max, int delta_k, double t_delta_map, double metric, int k, int counter,
         std::optional<double> previous) {
        const auto [stop, next] = should_stop(StopConfig{k_min, k_max, delta_k, t_delta_map}, metric, k,
                                              StopTracker{counter, previous});
        return py::make_tuple(stop, next.counter, next.previous_metric);
      },
      py::arg("k_min"), py::arg("k_max"), py::arg("delta_k"), py::arg("t_delta_map"), py::arg("metric"), py::arg("k"),
      py::arg("counter") = 0, py::arg("previous") = py::none());

  m.def(
      "audit",
      [](const std::string& dpl, const std::string& gt, std::size_t labeled_boxes) {
        const auto r = eval::audit_pseudo_labels(pseudo_from(dpl), parse_ground_truth(json::parse(gt)), labeled_boxes,
                                                 eval::EvalProtocol{}.iou_thresholds);
        return dump(json{{"false_positives", r.false_positives},
                         {"pseudo_boxes", r.pseudo_boxes},
                         {"labeled_boxes", r.labeled_boxes},
                         {"fp_percent", r.fp_percent},
                         {"fp_corrected", pseudo_set_to_json(r.fp_corrected)},
                         {"bb_corrected", pseudo_set_to_json(r.bb_corrected)},
                         {"fpbb_corrected", pseudo_set_to_json(r.fpbb_corrected)}});
      },
      py::arg("dpl"), py::arg("gt"), py::arg("labeled_boxes") = 0);

  m.def(
      "run_sim_cell",
      [](std::uint64_t seed, double labeled_percent, const std::string& mode, const std::string& world,
         const std::string& params, std::optional<std::filesystem::path> out_dir, bool baselines) {
        const auto vm = experiment::view_mode(mode);
        experiment::SimCell cell;
        cell.world = sim::parse_world_config(json::parse(world));
        cell.world.seed = seed;
        cell.world.rho = vm.rho;
        cell.world.view2_kind = vm.kind;
        cell.labeled_percent = labeled_percent;
        cell.config.rng_seed = seed;
        cell.params = sim::parse_params(json::parse(params));
        cell.baselines = baselines;
        py::gil_scoped_release release;
        return dump(outcome_to_json(experiment::run_sim_cell(cell, out_dir)));
      },
      py::arg("seed"), py::arg("labeled_percent") = 5.0, py::arg("mode") = "rgb_d", py::arg("world") = "{}",
      py::arg("params") = "{}", py::arg("out_dir") = py::none(), py::arg("baselines") = true);

  m.def(
      "cycle_curve",
      [](const std::filesystem::path& cell_dir) {
        std::vector<std::string> warnings;
        const auto curve = experiment::cycle_curve(cell_dir, &warnings);
        json points = json::array();
        for (const auto& p : curve) points.push_back(json{{"k", p.k}, {"report", experiment::report_to_json(p.report)}});
        return py::make_tuple(dump(points), warnings);
      },
      py::arg("cell_dir"));
}
