// cotrain: experiment runner and report emitter.
//
//   cotrain run <experiment.json> [--halt-after K]
//   cotrain eval --gt <labels> --dets <detections> [--min-height H]
//   cotrain audit --dpl <dpl.json> --truth <truth> [--manifest <dataset>]
//   cotrain cycle-curve <cell dir>
//   cotrain gen-world [--mode rgb_d|rgb_mirror] [--labeled-percent P]
//
// Global flags: --seed, --out, --config. COTRAIN_WORKER overrides the
// external worker executable.
//
// Exit codes: 0 ok, 2 usage, 3 data (parse/validation/checkpoint/io),
// 4 backend, 1 anything else.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "cotrain/engine.hpp"
#include "cotrain/error.hpp"
#include "cotrain/experiment.hpp"
#include "cotrain/io.hpp"
#include "cotrain/json_util.hpp"
#include "cotrain/simdet.hpp"

namespace fs = std::filesystem;
using namespace cotrain;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitBackend = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> config;
};

eval::EvalProtocol protocol_from(std::optional<double> min_height, std::optional<int> recall_points) {
  eval::EvalProtocol p;
  if (min_height) p.min_height = *min_height;
  if (recall_points) p.recall_points = *recall_points;
  p.validate();
  return p;
}

int cmd_run(const Globals& g, const std::string& manifest_path, std::optional<int> halt_after) {
  auto m = experiment::load_manifest(manifest_path);
  if (g.config) m.config = load_config(*g.config);
  if (g.out) m.out = *g.out;
  if (g.seed) m.seeds = {*g.seed};
  if (const char* w = std::getenv("COTRAIN_WORKER"); w && *w) m.backend.executable = fs::path(w);

  if (halt_after) {
    // Partial run: co-train each simulated cell up to the given cycle only.
    if (m.backend.kind != "simulated") throw UsageError("--halt-after is only supported with the simulated backend");
    for (const auto& cell : m.cells) {
      const auto mode = experiment::view_mode(cell.mode);
      for (const auto seed : m.seeds) {
        experiment::SimCell sc;
        sc.world = m.world;
        sc.world.seed = seed;
        sc.world.rho = cell.rho.value_or(mode.rho);
        sc.world.view2_kind = mode.kind;
        sc.labeled_percent = cell.labeled_percent;
        sc.config = m.config;
        sc.config.rng_seed = seed;
        sc.params = m.backend.sim;
        sc.protocol = m.protocol;
        const auto dir = m.out / cell.name / ("seed_" + std::to_string(seed));
        const auto o = experiment::run_sim_cell(sc, dir, halt_after);
        std::cout << cell.name << " seed " << seed << ": halted at cycle " << o.cycles << "\n";
      }
    }
    return 0;
  }

  const auto outcomes = experiment::run_experiment(m);
  for (const auto& o : outcomes) {
    std::cout << o.cell << " seed " << o.seed << ": cycles=" << o.cycles;
    if (o.lb_map) std::cout << " lb=" << *o.lb_map;
    std::cout << " final=" << o.final_map;
    if (o.ub_map) std::cout << " ub=" << *o.ub_map;
    std::cout << "\n";
  }
  std::cout << "summary: " << (m.out / "summary.csv").string() << "\n";
  return 0;
}

int cmd_eval(const Globals& g, const std::string& gt_path, const std::string& dets_path,
             std::optional<double> min_height, std::optional<int> recall_points) {
  const auto gt = experiment::load_any_ground_truth(gt_path);
  const auto dets = load_detections(dets_path);
  const auto report = eval::evaluate(dets, gt, protocol_from(min_height, recall_points));
  const auto j = experiment::report_to_json(report);
  if (g.out) {
    const fs::path dir(*g.out);
    json_util::write_file(dir / "report.json", j);
    json_util::write_text(dir / "report.csv", experiment::report_csv(report));
  }
  std::cout << experiment::report_csv(report);
  return 0;
}

int cmd_audit(const Globals& g, const std::string& dpl_path, const std::string& truth_path,
              const std::optional<std::string>& manifest, std::optional<std::size_t> labeled_boxes) {
  const auto pl = experiment::load_pseudo_labels(dpl_path);
  const auto gt = experiment::load_any_ground_truth(truth_path);
  std::size_t labeled = labeled_boxes.value_or(0);
  if (manifest) {
    if (labeled_boxes) throw UsageError("--manifest and --labeled-boxes are mutually exclusive");
    const auto data = load_dataset(*manifest);
    for (const auto& [id, labels] : data.labels) labeled += labels.size();
  }
  const fs::path out = g.out ? fs::path(*g.out) : fs::path(dpl_path).parent_path();
  const auto files = experiment::audit_to_dir(pl, gt, labeled, eval::EvalProtocol{}.iou_thresholds, out);
  std::cout << files.summary.dump(2) << "\n";
  return 0;
}

int cmd_cycle_curve(const Globals& g, const std::string& cell_dir) {
  std::vector<std::string> warnings;
  const auto curve = experiment::cycle_curve(cell_dir, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  const auto csv = experiment::curve_csv(curve);
  const fs::path file = g.out ? fs::path(*g.out) / "curve.csv" : fs::path(cell_dir) / "curve.csv";
  json_util::write_text(file, csv);
  std::cout << csv;
  return 0;
}

int cmd_gen_world(const Globals& g, const std::string& mode_name, std::optional<double> rho, double percent,
                  std::optional<int> num_images, std::optional<int> num_test) {
  const auto mode = experiment::view_mode(mode_name);
  sim::WorldConfig cfg;
  cfg.seed = g.seed.value_or(0);
  cfg.rho = rho.value_or(mode.rho);
  cfg.view2_kind = mode.kind;
  if (num_images) cfg.num_images = *num_images;
  if (num_test) cfg.num_test_images = *num_test;
  const auto world = sim::generate_world(cfg);
  const fs::path out = g.out.value_or(".");
  fs::create_directories(out);
  save_dataset(sim::split_labeled(world, percent, cfg.seed), out / "manifest.json");
  save_dataset(world.test_dataset(), out / "test_manifest.json");
  sim::save_truth(world, out / "truth.json");
  std::cout << "wrote " << (out / "manifest.json").string() << ", " << (out / "test_manifest.json").string()
            << ", " << (out / "truth.json").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Disagreement-based co-training of two object detectors"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "RNG seed (restricts `run` to a single seed)");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--config", g.config, "co-training config JSON");

  auto* run = app.add_subcommand("run", "run every cell of an experiment manifest");
  std::string manifest_path;
  std::optional<int> halt_after;
  run->add_option("manifest", manifest_path, "experiment manifest JSON")->required()->check(CLI::ExistingFile);
  run->add_option("--halt-after", halt_after, "stop each cell after this cycle (resumable)")->check(CLI::NonNegativeNumber);

  auto* ev = app.add_subcommand("eval", "evaluate detections against ground truth");
  std::string gt_path, dets_path;
  std::optional<double> min_height;
  std::optional<int> recall_points;
  ev->add_option("--gt", gt_path, "labels, dataset manifest or truth.json")->required()->check(CLI::ExistingFile);
  ev->add_option("--dets", dets_path, "detections JSON")->required()->check(CLI::ExistingFile);
  ev->add_option("--min-height", min_height, "minimum evaluated box height in pixels");
  ev->add_option("--recall-points", recall_points, "interpolation points");

  auto* audit = app.add_subcommand("audit", "count false positives in a pseudo-label set and write corrected sets");
  std::string dpl_path, truth_path;
  std::optional<std::string> audit_manifest;
  std::optional<std::size_t> labeled_boxes;
  audit->add_option("--dpl", dpl_path, "pseudo-label file")->required()->check(CLI::ExistingFile);
  audit->add_option("--truth", truth_path, "labels, dataset manifest or truth.json")->required()->check(CLI::ExistingFile);
  audit->add_option("--manifest", audit_manifest, "dataset manifest; its labeled boxes join the FP% pool")->check(CLI::ExistingFile);
  audit->add_option("--labeled-boxes", labeled_boxes, "labeled box count for the FP% pool");

  auto* curve = app.add_subcommand("cycle-curve", "final-detector mAP per stopping cycle of a simulated cell");
  std::string cell_dir;
  curve->add_option("cell_dir", cell_dir, "cell run directory")->required()->check(CLI::ExistingDirectory);

  auto* gen = app.add_subcommand("gen-world", "generate a synthetic dataset manifest and its hidden truth");
  std::string mode_name = "rgb_d";
  std::optional<double> rho;
  double percent = 5;
  std::optional<int> num_images, num_test;
  gen->add_option("--mode", mode_name, "view pairing")->check(CLI::IsMember({"rgb_d", "rgb_mirror"}));
  gen->add_option("--rho", rho, "view latent correlation")->check(CLI::Range(0.0, 1.0));
  gen->add_option("--labeled-percent", percent, "share of labeled training images")->check(CLI::Range(0.0, 100.0));
  gen->add_option("--num-images", num_images, "training images")->check(CLI::PositiveNumber);
  gen->add_option("--num-test-images", num_test, "test images")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*run) return cmd_run(g, manifest_path, halt_after);
    if (*ev) return cmd_eval(g, gt_path, dets_path, min_height, recall_points);
    if (*audit) return cmd_audit(g, dpl_path, truth_path, audit_manifest, labeled_boxes);
    if (*curve) return cmd_cycle_curve(g, cell_dir);
    if (*gen) return cmd_gen_world(g, mode_name, rho, percent, num_images, num_test);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitData;
  } catch (const ValidationError& e) {
    std::cerr << "invalid data: " << e.what() << "\n";
    return kExitData;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}
