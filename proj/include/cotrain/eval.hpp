#pragma once

// KITTI-style 2D detection evaluation: height-based difficulty filter,
// confidence-ordered greedy matching with don't-care regions, N-point
// interpolated AP, and the pseudo-label audit.

#include <map>
#include <span>
#include <vector>

#include "cotrain/core.hpp"

namespace cotrain::eval {

struct EvalProtocol {
  double min_height = 25;
  std::map<Category, double> iou_thresholds{{kVehicle, 0.7}, {kPedestrian, 0.5}};
  int recall_points = 11;

  double iou_threshold(const Category& c) const;
  void validate() const;
};

/// Protocol used to compare two pseudo-label sets: no height filtering.
EvalProtocol stop_metric_protocol(const EvalProtocol& base = {});

double iou(const BoundingBox& a, const BoundingBox& b);

struct DifficultySplit {
  std::vector<LabelRecord> evaluated;
  std::vector<LabelRecord> ignored;
};

DifficultySplit filter_difficulty(std::span<const LabelRecord> gt, const EvalProtocol& protocol);

enum class DetOutcome { TruePositive, FalsePositive, Ignored };

struct MatchResult {
  std::vector<DetOutcome> detections;  // indexed like the input detections
  std::vector<int> matched_gt;         // evaluated-GT index per detection, -1 if none
  std::vector<bool> gt_matched;        // per evaluated GT

  std::size_t true_positives() const;
  std::size_t false_positives() const;
};

/// Greedy matching of single-category detections. Detections are visited in
/// decreasing confidence (ties: input order); each claims the unmatched
/// evaluated GT of highest IoU >= iou_thr, else is absorbed by an ignored GT
/// with IoU >= iou_thr, else is a false positive.
MatchResult match_detections(std::span<const DetectionRecord> dets, std::span<const BoundingBox> gt_evaluated,
                             std::span<const BoundingBox> gt_ignored, double iou_thr);

/// Interpolated AP in [0,1] over `recall_points` equally spaced recall levels.
/// `is_tp` lists non-ignored detections in decreasing confidence.
double average_precision(const std::vector<bool>& is_tp, std::size_t num_gt, int recall_points = 11);

/// Unweighted mean; throws ValidationError on an empty map.
double mean_ap(const std::map<Category, double>& per_category);

struct CategoryResult {
  double ap = 0;  // [0,1]
  std::size_t num_gt = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
};

struct EvalReport {
  std::map<Category, CategoryResult> categories;
  double map = 0;  // 0..100
};

/// Categories evaluated are those of the protocol present in either side.
/// With none present the report is vacuously perfect (mAP 100).
EvalReport evaluate(const ImageDetections& dets, const GroundTruthSet& gt, const EvalProtocol& protocol);

GroundTruthSet as_ground_truth(const ImageDetections& dets);

/// mAP (0..100) of `fresh` scored against `old` as ground truth.
double stop_metric_map(const PseudoLabelSet& old, const PseudoLabelSet& fresh, const EvalProtocol& protocol = {});

/// Scales each box about its center by its category's factor.
std::vector<DetectionRecord> resize_boxes_per_category(std::span<const DetectionRecord> dets,
                                                       const std::map<Category, double>& factors);
ImageDetections resize_boxes_per_category(const ImageDetections& dets, const std::map<Category, double>& factors);

struct AuditReport {
  std::size_t false_positives = 0;
  std::size_t pseudo_boxes = 0;
  std::size_t labeled_boxes = 0;
  double fp_percent = 0;
  PseudoLabelSet fp_corrected;    // false positives removed
  PseudoLabelSet bb_corrected;    // matched boxes take their GT geometry
  PseudoLabelSet fpbb_corrected;  // both
};

/// Classifies pseudo-labels against GT with the greedy rule (no height
/// filter). FP% = #FP / (labeled_boxes + pseudo boxes) * 100.
AuditReport audit_pseudo_labels(const PseudoLabelSet& pl, const GroundTruthSet& gt, std::size_t labeled_boxes,
                                const std::map<Category, double>& iou_thresholds);

}  // namespace cotrain::eval
