#pragma once

// Experiment orchestration behind the command-line tool: comparison cells,
// lower/upper-bound baselines, final-detector evaluation, stopping-cycle
// curves and report writers.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cotrain/core.hpp"
#include "cotrain/detector.hpp"
#include "cotrain/eval.hpp"
#include "cotrain/simdet.hpp"
#include "json.hpp"

namespace cotrain::experiment {

namespace fs = std::filesystem;

/// View pairing of a cell. rgb_d: identity geometry, weakly correlated views;
/// rgb_mirror: mirrored geometry, strongly correlated views.
struct ViewMode {
  std::string name;
  double rho = 0.2;
  TransformKind kind = TransformKind::Identity;
};

ViewMode view_mode(const std::string& name);

struct BackendSpec {
  std::string kind = "simulated";  // simulated | external
  std::optional<fs::path> executable;
  sim::SimDetectorParams sim;
};

struct CellSpec {
  std::string name;
  double labeled_percent = 5;
  std::string mode = "rgb_d";
  std::optional<double> rho;  // overrides the mode's default
};

struct ExperimentManifest {
  CoTrainConfig config;
  BackendSpec backend;
  eval::EvalProtocol protocol;
  fs::path out = "runs";
  // Simulated backend: one world per (cell, seed).
  sim::WorldConfig world;
  std::vector<std::uint64_t> seeds{0};
  // External backend: fixed datasets.
  std::optional<fs::path> dataset;
  std::optional<fs::path> test_dataset;
  std::vector<CellSpec> cells;
};

/// Relative paths are resolved against the manifest's directory.
ExperimentManifest load_manifest(const fs::path& file);

/// Default hyper-parameters without sequence constraints.
CoTrainConfig default_config();

struct CellOutcome {
  std::string cell;
  std::uint64_t seed = 0;
  double labeled_percent = 0;
  std::string mode;
  double rho = 0;
  bool cotrained = false;
  int cycles = 0;
  std::optional<double> lb_map;
  double final_map = 0;
  std::optional<double> ub_map;
  fs::path dir;
};

/// Detection seed shared by every detector of a world, so that baselines and
/// co-trained detectors are compared under the same noise.
std::uint64_t detection_seed(const sim::World& world);

/// Final-detector quality: detect on the test images (view 1, no threshold)
/// and evaluate against their labels.
eval::EvalReport evaluate_detector(DetectorBackend& backend, const ModelHandle& model, const ViewPairedDataset& test,
                                   const eval::EvalProtocol& protocol);

struct SimCell {
  sim::WorldConfig world;
  double labeled_percent = 5;
  CoTrainConfig config = default_config();
  sim::SimDetectorParams params;
  eval::EvalProtocol protocol;
  bool baselines = true;  // also compute LB and UB
};

/// Generates the world, splits it, co-trains (unless fully labeled), trains
/// and evaluates the final detector. With `dir`, writes the cell's artifacts
/// and resumes from its checkpoints.
CellOutcome run_sim_cell(const SimCell& cell, const std::optional<fs::path>& dir = std::nullopt,
                         std::optional<int> halt_after = std::nullopt);

/// Runs every (cell, seed) of the manifest and writes summary.csv/json.
std::vector<CellOutcome> run_experiment(const ExperimentManifest& manifest);

struct CurvePoint {
  int k = 0;
  eval::EvalReport report;
};

/// Final-detector mAP as if co-training had stopped at each checkpointed
/// cycle; k = 0 is the lower bound (no pseudo-labels). Needs a simulated cell
/// directory (manifest.json, truth.json, sim.json and cycles/).
std::vector<CurvePoint> cycle_curve(const fs::path& cell_dir, std::vector<std::string>* warnings = nullptr);
std::string curve_csv(const std::vector<CurvePoint>& curve);

nlohmann::json report_to_json(const eval::EvalReport& report);
std::string report_csv(const eval::EvalReport& report);

struct AuditFiles {
  eval::AuditReport report;
  nlohmann::json summary;
};

/// Audit of a pseudo-label file against ground truth; writes audit.json and the
/// three corrected sets into out_dir.
AuditFiles audit_to_dir(const PseudoLabelSet& pl, const GroundTruthSet& gt, std::size_t labeled_boxes,
                        const std::map<Category, double>& iou_thresholds, const fs::path& out_dir);

/// Pseudo-label set from either a checkpoint-style file or a plain detections file.
PseudoLabelSet load_pseudo_labels(const fs::path& file);
PseudoLabelSet parse_pseudo_labels(const nlohmann::json& j);
/// Ground truth from a detections/labels file, a dataset manifest or a simulator truth file.
GroundTruthSet load_any_ground_truth(const fs::path& file);

}  // namespace cotrain::experiment
