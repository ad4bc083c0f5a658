#pragma once

// Domain types shared by every module: boxes, detections, labels, view-paired
// datasets, pseudo-label sets and the co-training configuration.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cotrain {

using ImageId = std::string;
using Category = std::string;

inline const Category kVehicle = "vehicle";
inline const Category kPedestrian = "pedestrian";

/// Axis-aligned box in continuous pixel coordinates. No +1 pixel correction:
/// area is (x2-x1)*(y2-y1).
struct BoundingBox {
  double x1 = 0;
  double y1 = 0;
  double x2 = 0;
  double y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const { return x1 < x2 && y1 < y2; }

  bool operator==(const BoundingBox&) const = default;
};

struct DetectionRecord {
  BoundingBox box;
  Category category;
  double confidence = 0;

  bool operator==(const DetectionRecord&) const = default;
};

enum class LabelSource { Human, Virtual, Pseudo };

const char* to_string(LabelSource source);
LabelSource label_source_from_string(const std::string& name);

struct LabelRecord {
  BoundingBox box;
  Category category;
  LabelSource source = LabelSource::Human;
  // Producing cycle; required when source is Pseudo.
  std::optional<int> cycle;

  bool operator==(const LabelRecord&) const = default;
};

struct ImageRecord {
  ImageId id;
  int width = 0;
  int height = 0;
  std::optional<std::string> sequence_id;
  std::optional<int> frame_index;
  std::string view1_ref;
  std::optional<std::string> view2_ref;

  // Payload reference for view 1 or 2; view 2 falls back to view 1.
  const std::string& payload_ref(int view) const;

  bool operator==(const ImageRecord&) const = default;
};

enum class TransformKind { Identity, HorizontalMirror };

const char* to_string(TransformKind kind);
TransformKind transform_kind_from_string(const std::string& name);

/// Maps view-1 geometry into view-2 geometry. Both kinds are involutions.
struct ViewTransform {
  TransformKind kind = TransformKind::Identity;
  std::optional<double> image_width;

  bool operator==(const ViewTransform&) const = default;
};

/// Identity returns the box unchanged; mirror returns (W-x2, y1, W-x1, y2).
/// Throws ValidationError when a mirror has no width or the box exceeds it.
BoundingBox transform_box(const BoundingBox& box, const ViewTransform& t);
DetectionRecord transform_detection(DetectionRecord det, const ViewTransform& t);

/// Transform taking boxes from view `from` into the frame of view `to`.
ViewTransform transform_between(const ViewTransform& view2_transform, int from, int to);

using ImageDetections = std::map<ImageId, std::vector<DetectionRecord>>;
using GroundTruthSet = std::map<ImageId, std::vector<LabelRecord>>;

/// Images labeled by one model, boxes expressed in that view's frame.
struct PseudoLabelSet {
  ImageDetections entries;
  int producing_view = 1;
  int cycle = 0;

  std::size_t num_images() const { return entries.size(); }
  std::size_t num_boxes() const;
  bool contains(const ImageId& id) const { return entries.count(id) != 0; }
  std::set<ImageId> image_ids() const;

  bool operator==(const PseudoLabelSet&) const = default;
};

struct ViewPairedDataset {
  std::vector<ImageRecord> images;
  // Presence of an id here marks the image as labeled (view-1 frame).
  GroundTruthSet labels;
  ViewTransform view2_transform;

  const ImageRecord* find(const ImageId& id) const;
  const ImageRecord& at(const ImageId& id) const;
  bool is_labeled(const ImageId& id) const { return labels.count(id) != 0; }
  std::vector<ImageId> labeled_ids() const;
  std::vector<ImageId> unlabeled_ids() const;

  // Labels of an image expressed in the frame of `view`.
  std::vector<LabelRecord> labels_in_view(const ImageId& id, int view) const;

  /// Throws ValidationError naming the first offending record.
  void validate() const;
};

/// Mean confidence of an image's detections; 0 for an empty list.
double image_confidence(std::span<const DetectionRecord> dets);

/// Keeps detections with confidence >= thresholds[category], preserving order.
/// Throws ValidationError on a category without a threshold.
std::vector<DetectionRecord> apply_confidence_thresholds(
    std::span<const DetectionRecord> dets, const std::map<Category, double>& thresholds);

// ---------------------------------------------------------------------------
// Configuration

struct StopConfig {
  int k_min = 20;
  int k_max = 30;
  int delta_k = 5;
  double t_delta_map = 2.0;  // mAP points, 0..100

  bool operator==(const StopConfig&) const = default;
};

struct SeqConfig {
  int delta_t1 = 5;
  int delta_t2 = 10;

  bool operator==(const SeqConfig&) const = default;
};

inline constexpr std::size_t kUnbounded = std::numeric_limits<std::size_t>::max();

struct CoTrainConfig {
  std::map<Category, double> thresholds{{kVehicle, 0.8}, {kPedestrian, 0.8}};
  std::size_t sample_size = 500;   // N
  std::size_t keep_lowest = 100;   // n
  std::size_t share_top = kUnbounded;  // m
  StopConfig stop;
  std::optional<SeqConfig> seq;
  ViewTransform view2_transform;
  std::uint64_t rng_seed = 0;
  // Attach the receiver's own detections to exchanged images instead of the
  // sender's pseudo-labels (literal reading of the exchange step).
  bool receiver_labels = false;

  void validate() const;
  bool operator==(const CoTrainConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Cycle state

struct ModelHandle {
  std::string backend;
  std::string token;
  std::string path;
  int view = 1;
  int cycle = 0;
  // Backend-defined serialized model description (opaque to the engine).
  std::string payload;

  bool operator==(const ModelHandle&) const = default;
};

using FramePosition = std::pair<std::string, int>;  // (sequence_id, frame_index)

struct SelectionHistory {
  std::set<FramePosition> view1;
  std::set<FramePosition> view2;

  std::set<FramePosition>& of(int view) { return view == 1 ? view1 : view2; }
  const std::set<FramePosition>& of(int view) const { return view == 1 ? view1 : view2; }
  bool operator==(const SelectionHistory&) const = default;
};

struct StopTracker {
  int counter = 0;
  std::optional<double> previous_metric;

  bool operator==(const StopTracker&) const = default;
};

struct CycleLogRow {
  int k = 0;
  double stop_map = 0;
  std::size_t n_img_1 = 0;
  std::size_t n_box_1 = 0;
  std::size_t n_img_2 = 0;
  std::size_t n_box_2 = 0;
  std::size_t n_up = 0;
  std::size_t n_down = 0;
  // Wall time is reported in log.csv only; checkpoints stay reproducible.
  double seconds = 0;

  bool operator==(const CycleLogRow& o) const {
    return k == o.k && stop_map == o.stop_map && n_img_1 == o.n_img_1 && n_box_1 == o.n_box_1 &&
           n_img_2 == o.n_img_2 && n_box_2 == o.n_box_2 && n_up == o.n_up && n_down == o.n_down;
  }
};

struct CycleState {
  int k = 0;
  std::uint64_t rng_seed = 0;
  ModelHandle model1;
  ModelHandle model2;
  PseudoLabelSet accumulated1;
  PseudoLabelSet accumulated2;
  PseudoLabelSet fresh1;
  PseudoLabelSet fresh2;
  SelectionHistory history;
  StopTracker stop;
  std::vector<CycleLogRow> log;
  bool finished = false;

  bool operator==(const CycleState&) const = default;
};

}  // namespace cotrain
