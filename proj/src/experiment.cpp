#include "cotrain/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "cotrain/engine.hpp"
#include "cotrain/error.hpp"
#include "cotrain/io.hpp"
#include "cotrain/json_util.hpp"
#include "cotrain/random.hpp"

namespace cotrain::experiment {

using nlohmann::json;
using namespace json_util;

ViewMode view_mode(const std::string& name) {
  if (name == "rgb_d") return {name, 0.2, TransformKind::Identity};
  if (name == "rgb_mirror") return {name, 0.95, TransformKind::HorizontalMirror};
  throw ValidationError("unknown view mode '" + name + "' (expected rgb_d or rgb_mirror)");
}

CoTrainConfig default_config() { return CoTrainConfig{}; }

namespace {

json protocol_to_json(const eval::EvalProtocol& p) {
  return json{{"min_height", p.min_height}, {"iou_thresholds", p.iou_thresholds}, {"recall_points", p.recall_points}};
}

eval::EvalProtocol parse_protocol(const json& j) {
  eval::EvalProtocol p;
  if (const auto* v = json_util::optional(j, "min_height")) p.min_height = number(*v, "protocol.min_height");
  if (const auto* v = json_util::optional(j, "recall_points"))
    p.recall_points = static_cast<int>(integer(*v, "protocol.recall_points"));
  if (const auto* v = json_util::optional(j, "iou_thresholds")) {
    p.iou_thresholds.clear();
    for (const auto& [c, t] : object(*v, "protocol.iou_thresholds").items())
      p.iou_thresholds[c] = number(t, "protocol.iou_thresholds." + c);
  }
  p.validate();
  return p;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

}  // namespace

ExperimentManifest load_manifest(const fs::path& file) {
  const json j = read_file(file);
  const auto base = file.parent_path();
  ExperimentManifest m;

  const auto& c = require(j, "config", "");
  m.config = c.is_string() ? load_config(resolve(base, c.get<std::string>())) : parse_config(c);

  if (const auto* b = json_util::optional(j, "backend")) {
    if (const auto* k = json_util::optional(*b, "kind")) m.backend.kind = string(*k, "backend.kind");
    if (m.backend.kind != "simulated" && m.backend.kind != "external")
      throw ValidationError("backend.kind must be simulated or external");
    if (const auto* e = json_util::optional(*b, "executable")) m.backend.executable = resolve(base, string(*e, "backend.executable"));
    if (const auto* s = json_util::optional(*b, "sim")) m.backend.sim = sim::parse_params(*s);
  }
  if (const auto* p = json_util::optional(j, "protocol")) m.protocol = parse_protocol(*p);
  if (const auto* o = json_util::optional(j, "out")) m.out = resolve(base, string(*o, "out"));
  if (const auto* w = json_util::optional(j, "world")) m.world = sim::parse_world_config(*w);
  if (const auto* s = json_util::optional(j, "seeds")) {
    m.seeds.clear();
    for (std::size_t i = 0; i < array(*s, "seeds").size(); ++i) m.seeds.push_back((*s)[i].get<std::uint64_t>());
  }
  if (const auto* d = json_util::optional(j, "dataset")) m.dataset = resolve(base, string(*d, "dataset"));
  if (const auto* d = json_util::optional(j, "test_dataset")) m.test_dataset = resolve(base, string(*d, "test_dataset"));

  const auto& cells = array(require(j, "cells", ""), "cells");
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto p = index("cells", i);
    CellSpec cell;
    cell.name = require_string(cells[i], "name", p);
    if (const auto* v = json_util::optional(cells[i], "labeled_percent")) cell.labeled_percent = number(*v, join(p, "labeled_percent"));
    if (const auto* v = json_util::optional(cells[i], "mode")) cell.mode = string(*v, join(p, "mode"));
    if (const auto* v = json_util::optional(cells[i], "rho")) cell.rho = number(*v, join(p, "rho"));
    view_mode(cell.mode);
    for (const auto& prev : m.cells)
      if (prev.name == cell.name) throw ValidationError("duplicate cell name '" + cell.name + "'");
    m.cells.push_back(cell);
  }
  if (m.backend.kind == "external" && !m.dataset) throw ValidationError("external backend requires a dataset manifest");
  return m;
}

std::uint64_t detection_seed(const sim::World& world) {
  return derive_seed(world.config().seed, {hash_string("detect")});
}

eval::EvalReport evaluate_detector(DetectorBackend& backend, const ModelHandle& model, const ViewPairedDataset& test,
                                   const eval::EvalProtocol& protocol) {
  std::map<Category, double> no_threshold;
  for (const auto& [c, t] : protocol.iou_thresholds) no_threshold[c] = 0.0;
  std::vector<ImageId> ids;
  for (const auto& img : test.images) ids.push_back(img.id);
  const auto dets = detect_all(backend, model, test, ids, 1, no_threshold);
  return eval::evaluate(dets, test.labels, protocol);
}

json report_to_json(const eval::EvalReport& report) {
  json cats = json::object();
  for (const auto& [c, r] : report.categories) {
    cats[c] = json{{"ap", r.ap * 100.0}, {"num_gt", r.num_gt}, {"tp", r.tp}, {"fp", r.fp}, {"fn", r.fn}};
  }
  return json{{"map", report.map}, {"categories", cats}};
}

std::string report_csv(const eval::EvalReport& report) {
  std::string out = "category,ap,num_gt,tp,fp,fn\n";
  for (const auto& [c, r] : report.categories) {
    out += c + "," + fmt(r.ap * 100.0) + "," + std::to_string(r.num_gt) + "," + std::to_string(r.tp) + "," +
           std::to_string(r.fp) + "," + std::to_string(r.fn) + "\n";
  }
  out += "mAP," + fmt(report.map) + ",,,,\n";
  return out;
}

namespace {

void write_report(const fs::path& dir, const std::string& stem, const eval::EvalReport& report) {
  write_file(dir / (stem + ".json"), report_to_json(report));
  write_text(dir / (stem + ".csv"), report_csv(report));
}

}  // namespace

CellOutcome run_sim_cell(const SimCell& cell, const std::optional<fs::path>& dir, std::optional<int> halt_after) {
  const auto world = sim::generate_world(cell.world);
  auto cfg = cell.config;
  cfg.view2_transform = world.view2_transform();
  const auto data = sim::split_labeled(world, cell.labeled_percent, cell.world.seed);
  const auto test = world.test_dataset();
  sim::SimulatedBackend backend(world, cell.params, detection_seed(world));

  CellOutcome out;
  out.seed = cell.world.seed;
  out.labeled_percent = cell.labeled_percent;
  out.rho = cell.world.rho;
  if (dir) {
    out.dir = *dir;
    fs::create_directories(*dir);
    save_dataset(data, *dir / "manifest.json");
    sim::save_truth(world, *dir / "truth.json");
    write_file(*dir / "sim.json", json{{"params", sim::params_to_json(cell.params)},
                                       {"detection_seed", detection_seed(world)},
                                       {"labeled_percent", cell.labeled_percent},
                                       {"protocol", protocol_to_json(cell.protocol)}});
  }

  PseudoLabelSet pseudo;
  pseudo.producing_view = 1;
  if (cell.labeled_percent < 100) {
    RunOptions opts;
    opts.run_dir = dir;
    opts.protocol = cell.protocol;
    opts.halt_after = halt_after;
    auto res = run(cfg, data, backend, opts);
    out.cotrained = true;
    out.cycles = res.state.k;
    if (!res.finished) return out;
    pseudo = res.labels;
  }

  const auto final_model = train_final(backend, data, pseudo);
  const auto report = evaluate_detector(backend, final_model, test, cell.protocol);
  out.final_map = report.map;
  if (dir) write_report(*dir, "eval", report);

  if (cell.baselines) {
    PseudoLabelSet none;
    out.lb_map = evaluate_detector(backend, train_final(backend, data, none), test, cell.protocol).map;
    out.ub_map = evaluate_detector(backend, train_final(backend, world.dataset(), none), test, cell.protocol).map;
  }
  return out;
}

std::vector<CellOutcome> run_experiment(const ExperimentManifest& m) {
  std::vector<CellOutcome> outcomes;
  for (const auto& cell : m.cells) {
    const auto mode = view_mode(cell.mode);
    for (const auto seed : m.seeds) {
      const auto dir = m.out / cell.name / seed_dir(seed);
      try {
        if (m.backend.kind == "simulated") {
          SimCell sc;
          sc.world = m.world;
          sc.world.seed = seed;
          sc.world.rho = cell.rho.value_or(mode.rho);
          sc.world.view2_kind = mode.kind;
          sc.labeled_percent = cell.labeled_percent;
          sc.config = m.config;
          sc.config.rng_seed = seed;
          sc.params = m.backend.sim;
          sc.protocol = m.protocol;
          auto o = run_sim_cell(sc, dir);
          o.cell = cell.name;
          o.mode = cell.mode;
          outcomes.push_back(o);
          continue;
        }

        if (!m.backend.executable) throw BackendError("external backend needs an executable (or COTRAIN_WORKER)");
        const auto data = load_dataset(*m.dataset);
        auto cfg = m.config;
        cfg.rng_seed = seed;
        ExternalBackend backend(*m.backend.executable, dir / "worker");
        RunOptions opts;
        opts.run_dir = dir;
        opts.protocol = m.protocol;
        auto res = run(cfg, data, backend, opts);
        CellOutcome o;
        o.cell = cell.name;
        o.seed = seed;
        o.mode = cell.mode;
        o.cotrained = true;
        o.cycles = res.state.k;
        o.dir = dir;
        o.final_map = std::nan("");
        if (m.test_dataset) {
          const auto test = load_dataset(*m.test_dataset);
          const auto report = evaluate_detector(backend, train_final(backend, data, res.labels), test, m.protocol);
          o.final_map = report.map;
          write_report(dir, "eval", report);
        }
        outcomes.push_back(o);
      } catch (const std::exception& e) {
        const std::string where = "cell '" + cell.name + "' seed " + std::to_string(seed) + ": ";
        if (dynamic_cast<const BackendError*>(&e)) throw BackendError(where + e.what());
        if (dynamic_cast<const ParseError*>(&e)) throw ParseError(where + e.what());
        if (dynamic_cast<const ValidationError*>(&e)) throw ValidationError(where + e.what());
        if (dynamic_cast<const CheckpointError*>(&e)) throw CheckpointError(where + e.what());
        throw std::runtime_error(where + e.what());
      }
    }
  }

  auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  std::string csv = "cell,seed,labeled_percent,mode,rho,cotrained,cycles,lb_map,final_map,ub_map\n";
  json summary = json::array();
  for (const auto& o : outcomes) {
    csv += o.cell + "," + std::to_string(o.seed) + "," + fmt(o.labeled_percent) + "," + o.mode + "," + fmt(o.rho) + "," +
           (o.cotrained ? "1" : "0") + "," + std::to_string(o.cycles) + "," + opt(o.lb_map) + "," +
           (std::isnan(o.final_map) ? std::string() : fmt(o.final_map)) + "," + opt(o.ub_map) + "\n";
    json row{{"cell", o.cell}, {"seed", o.seed},       {"labeled_percent", o.labeled_percent},
             {"mode", o.mode}, {"rho", o.rho},         {"cotrained", o.cotrained},
             {"cycles", o.cycles}, {"dir", o.dir.string()}};
    row["lb_map"] = o.lb_map ? json(*o.lb_map) : json(nullptr);
    row["ub_map"] = o.ub_map ? json(*o.ub_map) : json(nullptr);
    row["final_map"] = std::isnan(o.final_map) ? json(nullptr) : json(o.final_map);
    summary.push_back(row);
  }
  write_text(m.out / "summary.csv", csv);
  write_file(m.out / "summary.json", summary);
  return outcomes;
}

std::vector<CurvePoint> cycle_curve(const fs::path& cell_dir, std::vector<std::string>* warnings) {
  for (const char* f : {"manifest.json", "truth.json", "sim.json", "config.json"})
    if (!fs::exists(cell_dir / f)) throw ValidationError("cycle-curve: " + (cell_dir / f).string() + " not found");

  const auto data = load_dataset(cell_dir / "manifest.json");
  const auto world = sim::load_truth(cell_dir / "truth.json");
  const auto sim_meta = read_file(cell_dir / "sim.json");
  const auto params = sim::parse_params(require(sim_meta, "params", ""));
  const auto protocol = parse_protocol(require(sim_meta, "protocol", ""));
  const auto seed = require(sim_meta, "detection_seed", "").get<std::uint64_t>();
  sim::SimulatedBackend backend(world, params, seed);
  const auto test = world.test_dataset();

  const auto ks = checkpoint_cycles(cell_dir);
  if (ks.empty()) throw CheckpointError("cycle-curve: no checkpoints under " + (cell_dir / "cycles").string());

  std::vector<CurvePoint> curve;
  for (int k = 0; k <= ks.back(); ++k) {
    PseudoLabelSet pseudo;
    pseudo.producing_view = 1;
    if (k > 0) {
      try {
        pseudo = load_checkpoint(cycle_dir(cell_dir, k)).fresh1;
      } catch (const CheckpointError& e) {
        if (warnings) warnings->push_back("skipping cycle " + std::to_string(k) + ": " + e.what());
        continue;
      }
    }
    curve.push_back({k, evaluate_detector(backend, train_final(backend, data, pseudo), test, protocol)});
  }
  return curve;
}

std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::set<Category> cats;
  for (const auto& p : curve)
    for (const auto& [c, r] : p.report.categories) cats.insert(c);
  std::string out = "k,map";
  for (const auto& c : cats) out += "," + c + "_ap";
  out += "\n";
  for (const auto& p : curve) {
    out += std::to_string(p.k) + "," + fmt(p.report.map);
    for (const auto& c : cats) {
      auto it = p.report.categories.find(c);
      out += "," + (it == p.report.categories.end() ? std::string() : fmt(it->second.ap * 100.0));
    }
    out += "\n";
  }
  return out;
}

AuditFiles audit_to_dir(const PseudoLabelSet& pl, const GroundTruthSet& gt, std::size_t labeled_boxes,
                        const std::map<Category, double>& iou_thresholds, const fs::path& out_dir) {
  AuditFiles f;
  f.report = eval::audit_pseudo_labels(pl, gt, labeled_boxes, iou_thresholds);
  f.summary = json{{"false_positives", f.report.false_positives},
                   {"fp_percent", f.report.fp_percent},
                   {"pseudo_boxes", f.report.pseudo_boxes},
                   {"labeled_boxes", f.report.labeled_boxes},
                   {"boxes_fp", f.report.fp_corrected.num_boxes()},
                   {"boxes_bb", f.report.bb_corrected.num_boxes()},
                   {"boxes_fpbb", f.report.fpbb_corrected.num_boxes()}};
  write_file(out_dir / "audit.json", f.summary);
  write_file(out_dir / "dpl_fp.json", pseudo_set_to_json(f.report.fp_corrected));
  write_file(out_dir / "dpl_bb.json", pseudo_set_to_json(f.report.bb_corrected));
  write_file(out_dir / "dpl_fpbb.json", pseudo_set_to_json(f.report.fpbb_corrected));
  return f;
}

PseudoLabelSet load_pseudo_labels(const fs::path& file) { return parse_pseudo_labels(read_file(file)); }

PseudoLabelSet parse_pseudo_labels(const json& j) {
  if (j.is_object() && j.contains("entries") && j.contains("producing_view")) return parse_pseudo_set(j);
  PseudoLabelSet set;
  set.entries = parse_detections(j);
  return set;
}

GroundTruthSet load_any_ground_truth(const fs::path& file) {
  const auto j = read_file(file);
  if (j.is_object() && j.contains("train") && j.contains("config")) return sim::parse_world(j).train_ground_truth();
  if (j.is_object() && j.contains("images")) {
    auto data = parse_dataset(j);
    data.validate();
    return data.labels;
  }
  return parse_ground_truth(j);
}

}  // namespace cotrain::experiment
