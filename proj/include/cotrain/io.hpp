#pragma once

// File formats: dataset manifests, KITTI label files, run configurations,
// detection files and cycle checkpoints.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cotrain/core.hpp"
#include "json.hpp"

namespace cotrain {

using nlohmann::json;

ViewPairedDataset parse_dataset(const json& manifest);
json dataset_to_json(const ViewPairedDataset& data);

/// Reads and validates a dataset manifest. Throws ParseError or ValidationError
/// naming the offending record.
ViewPairedDataset load_dataset(const std::filesystem::path& manifest_path);
void save_dataset(const ViewPairedDataset& data, const std::filesystem::path& manifest_path);

/// One KITTI label line: type, truncation, occlusion, alpha, then the 2D box
/// (left, top, right, bottom) in columns 5-8. Returns nullopt for types that
/// are not evaluated (DontCare, Van, Cyclist, ...).
std::optional<LabelRecord> parse_kitti_label_line(const std::string& line);
std::vector<LabelRecord> load_kitti_labels(const std::filesystem::path& file);

CoTrainConfig parse_config(const json& j);
json config_to_json(const CoTrainConfig& cfg);
CoTrainConfig load_config(const std::filesystem::path& file);

json view_transform_to_json(const ViewTransform& t);
ViewTransform parse_view_transform(const json& j, const std::string& path);

/// {image_id: [{category, bbox, confidence}]}
json detections_to_json(const ImageDetections& dets);
ImageDetections parse_detections(const json& j, const std::string& path = "");
ImageDetections load_detections(const std::filesystem::path& file);
void save_detections(const ImageDetections& dets, const std::filesystem::path& file);

/// {image_id: [{category, bbox, source?}]}; a detections file is accepted too.
GroundTruthSet parse_ground_truth(const json& j);
GroundTruthSet load_ground_truth(const std::filesystem::path& file);
json ground_truth_to_json(const GroundTruthSet& gt);

json pseudo_set_to_json(const PseudoLabelSet& set);
PseudoLabelSet parse_pseudo_set(const json& j, const std::string& path = "");

/// Writes dpl1.json, dpl2.json and state.json into `cycle_dir`. Output is
/// canonical: two saves of equal states are byte-identical.
void save_checkpoint(const CycleState& state, const std::filesystem::path& cycle_dir);
/// Throws CheckpointError naming the missing or corrupt file.
CycleState load_checkpoint(const std::filesystem::path& cycle_dir);

/// Highest-numbered cycle directory under run_dir/cycles with a complete
/// checkpoint, if any.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& run_dir);
std::vector<int> checkpoint_cycles(const std::filesystem::path& run_dir);
std::filesystem::path cycle_dir(const std::filesystem::path& run_dir, int k);

}  // namespace cotrain
