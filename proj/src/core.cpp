#include "cotrain/core.hpp"

#include <algorithm>
#include <numeric>

#include "cotrain/error.hpp"

namespace cotrain {

const char* to_string(LabelSource source) {
  switch (source) {
    case LabelSource::Human: return "human";
    case LabelSource::Virtual: return "virtual";
    case LabelSource::Pseudo: return "pseudo";
  }
  return "?";
}

LabelSource label_source_from_string(const std::string& name) {
  if (name == "human") return LabelSource::Human;
  if (name == "virtual") return LabelSource::Virtual;
  if (name == "pseudo") return LabelSource::Pseudo;
  throw ParseError("unknown label source '" + name + "'");
}

const char* to_string(TransformKind kind) {
  return kind == TransformKind::Identity ? "identity" : "horizontal_mirror";
}

TransformKind transform_kind_from_string(const std::string& name) {
  if (name == "identity") return TransformKind::Identity;
  if (name == "horizontal_mirror" || name == "mirror") return TransformKind::HorizontalMirror;
  throw ParseError("unknown view transform '" + name + "'");
}

const std::string& ImageRecord::payload_ref(int view) const {
  if (view == 2 && view2_ref) return *view2_ref;
  return view1_ref;
}

BoundingBox transform_box(const BoundingBox& box, const ViewTransform& t) {
  if (t.kind == TransformKind::Identity) return box;
  if (!t.image_width) throw ValidationError("horizontal_mirror transform requires image_width");
  const double w = *t.image_width;
  if (box.x2 > w) {
    throw ValidationError("box x2=" + std::to_string(box.x2) + " exceeds mirror width " +
                          std::to_string(w));
  }
  return {w - box.x2, box.y1, w - box.x1, box.y2};
}

DetectionRecord transform_detection(DetectionRecord det, const ViewTransform& t) {
  det.box = transform_box(det.box, t);
  return det;
}

ViewTransform transform_between(const ViewTransform& view2_transform, int from, int to) {
  if (from == to) return {};
  // Involution: view2->view1 uses the same map as view1->view2.
  return view2_transform;
}

std::size_t PseudoLabelSet::num_boxes() const {
  std::size_t n = 0;
  for (const auto& [id, dets] : entries) n += dets.size();
  return n;
}

std::set<ImageId> PseudoLabelSet::image_ids() const {
  std::set<ImageId> ids;
  for (const auto& [id, dets] : entries) ids.insert(id);
  return ids;
}

const ImageRecord* ViewPairedDataset::find(const ImageId& id) const {
  for (const auto& img : images)
    if (img.id == id) return &img;
  return nullptr;
}

const ImageRecord& ViewPairedDataset::at(const ImageId& id) const {
  const auto* img = find(id);
  if (!img) throw ValidationError("unknown image id '" + id + "'");
  return *img;
}

std::vector<ImageId> ViewPairedDataset::labeled_ids() const {
  std::vector<ImageId> out;
  for (const auto& img : images)
    if (is_labeled(img.id)) out.push_back(img.id);
  return out;
}

std::vector<ImageId> ViewPairedDataset::unlabeled_ids() const {
  std::vector<ImageId> out;
  for (const auto& img : images)
    if (!is_labeled(img.id)) out.push_back(img.id);
  return out;
}

std::vector<LabelRecord> ViewPairedDataset::labels_in_view(const ImageId& id, int view) const {
  auto it = labels.find(id);
  if (it == labels.end()) return {};
  auto out = it->second;
  if (view == 2) {
    for (auto& l : out) l.box = transform_box(l.box, view2_transform);
  }
  return out;
}

void ViewPairedDataset::validate() const {
  std::set<ImageId> ids;
  std::set<FramePosition> frames;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    const std::string where = "images[" + std::to_string(i) + "] (id '" + img.id + "')";
    if (img.id.empty()) throw ValidationError(where + ": empty id");
    if (!ids.insert(img.id).second) throw ValidationError(where + ": duplicate image id");
    if (img.width <= 0 || img.height <= 0) throw ValidationError(where + ": non-positive size");
    if (img.sequence_id && !img.frame_index)
      throw ValidationError(where + ": sequence_id without frame_index");
    if (img.sequence_id && !frames.insert({*img.sequence_id, *img.frame_index}).second)
      throw ValidationError(where + ": frame_index repeated within sequence");
  }
  if (view2_transform.kind == TransformKind::HorizontalMirror && !view2_transform.image_width)
    throw ValidationError("view2_transform: horizontal_mirror requires image_width");
  for (const auto& [id, recs] : labels) {
    if (!ids.count(id)) throw ValidationError("labels['" + id + "']: image not in images");
    for (std::size_t j = 0; j < recs.size(); ++j) {
      const auto& r = recs[j];
      const std::string where = "labels['" + id + "'][" + std::to_string(j) + "]";
      if (!r.box.valid()) throw ValidationError(where + ": degenerate box");
      if (r.source == LabelSource::Pseudo)
        throw ValidationError(where + ": pseudo labels belong in a pseudo-label set");
      if (r.category.empty()) throw ValidationError(where + ": empty category");
    }
  }
}

double image_confidence(std::span<const DetectionRecord> dets) {
  if (dets.empty()) return 0.0;
  double sum = 0;
  for (const auto& d : dets) sum += d.confidence;
  return sum / static_cast<double>(dets.size());
}

std::vector<DetectionRecord> apply_confidence_thresholds(
    std::span<const DetectionRecord> dets, const std::map<Category, double>& thresholds) {
  std::vector<DetectionRecord> out;
  for (const auto& d : dets) {
    auto it = thresholds.find(d.category);
    if (it == thresholds.end())
      throw ValidationError("no confidence threshold for category '" + d.category + "'");
    if (d.confidence >= it->second) out.push_back(d);
  }
  return out;
}

void CoTrainConfig::validate() const {
  if (thresholds.empty()) throw ValidationError("config: T must name at least one category");
  for (const auto& [cat, t] : thresholds)
    if (t < 0 || t > 1) throw ValidationError("config: T['" + cat + "'] outside [0,1]");
  if (sample_size < 1) throw ValidationError("config: N must be positive");
  if (keep_lowest < 1) throw ValidationError("config: n must be positive");
  if (share_top < 1) throw ValidationError("config: m must be positive");
  if (keep_lowest > sample_size) throw ValidationError("config: n must not exceed N");
  if (stop.k_min < 1) throw ValidationError("config: K_min must be >= 1");
  if (stop.k_min > stop.k_max) throw ValidationError("config: K_min must not exceed K_max");
  if (stop.delta_k < 0 || stop.delta_k > stop.k_min)
    throw ValidationError("config: delta_K must lie in [0, K_min]");
  if (stop.t_delta_map < 0 || stop.t_delta_map > 100)
    throw ValidationError("config: T_delta_map outside [0,100]");
  if (seq && (seq->delta_t1 < 0 || seq->delta_t2 < 0))
    throw ValidationError("config: delta_t thresholds must be non-negative");
  if (view2_transform.kind == TransformKind::HorizontalMirror && !view2_transform.image_width)
    throw ValidationError("config: horizontal_mirror requires image_width");
}

}  // namespace cotrain
