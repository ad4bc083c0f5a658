#include "cotrain/eval.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <tuple>

#include "cotrain/error.hpp"

namespace cotrain::eval {

double EvalProtocol::iou_threshold(const Category& c) const {
  auto it = iou_thresholds.find(c);
  if (it == iou_thresholds.end()) throw ValidationError("no IoU threshold for category '" + c + "'");
  return it->second;
}

void EvalProtocol::validate() const {
  if (min_height < 0) throw ValidationError("protocol: min_height must be >= 0");
  if (recall_points < 2) throw ValidationError("protocol: recall_points must be >= 2");
  for (const auto& [c, t] : iou_thresholds)
    if (!(t > 0 && t <= 1)) throw ValidationError("protocol: IoU threshold for '" + c + "' outside (0,1]");
}

EvalProtocol stop_metric_protocol(const EvalProtocol& base) {
  auto p = base;
  p.min_height = 0;
  return p;
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

DifficultySplit filter_difficulty(std::span<const LabelRecord> gt, const EvalProtocol& protocol) {
  DifficultySplit out;
  for (const auto& g : gt) {
    if (g.box.height() >= protocol.min_height) {
      out.evaluated.push_back(g);
    } else {
      out.ignored.push_back(g);
    }
  }
  return out;
}

std::size_t MatchResult::true_positives() const {
  return static_cast<std::size_t>(std::count(detections.begin(), detections.end(), DetOutcome::TruePositive));
}

std::size_t MatchResult::false_positives() const {
  return static_cast<std::size_t>(std::count(detections.begin(), detections.end(), DetOutcome::FalsePositive));
}

MatchResult match_detections(std::span<const DetectionRecord> dets, std::span<const BoundingBox> gt_evaluated,
                             std::span<const BoundingBox> gt_ignored, double iou_thr) {
  MatchResult r;
  r.detections.assign(dets.size(), DetOutcome::FalsePositive);
  r.matched_gt.assign(dets.size(), -1);
  r.gt_matched.assign(gt_evaluated.size(), false);

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });

  for (std::size_t di : order) {
    const auto& box = dets[di].box;
    int best = -1;
    double best_iou = -1;
    for (std::size_t g = 0; g < gt_evaluated.size(); ++g) {
      if (r.gt_matched[g]) continue;
      const double o = iou(box, gt_evaluated[g]);
      if (o >= iou_thr && o > best_iou) {
        best = static_cast<int>(g);
        best_iou = o;
      }
    }
    if (best >= 0) {
      r.detections[di] = DetOutcome::TruePositive;
      r.matched_gt[di] = best;
      r.gt_matched[static_cast<std::size_t>(best)] = true;
      continue;
    }
    for (const auto& ig : gt_ignored) {
      if (iou(box, ig) >= iou_thr) {
        r.detections[di] = DetOutcome::Ignored;
        break;
      }
    }
  }
  return r;
}

double average_precision(const std::vector<bool>& is_tp, std::size_t num_gt, int recall_points) {
  if (recall_points < 2) throw ValidationError("recall_points must be >= 2");
  if (num_gt == 0) return is_tp.empty() ? 1.0 : 0.0;
  if (is_tp.empty()) return 0.0;

  const std::size_t n = is_tp.size();
  std::vector<std::size_t> tp(n);
  std::size_t acc = 0;
  for (std::size_t j = 0; j < n; ++j) {
    acc += is_tp[j] ? 1 : 0;
    tp[j] = acc;
  }
  // Envelope: best precision at this rank or any later (higher-recall) rank.
  std::vector<double> envelope(n);
  double best = 0;
  for (std::size_t j = n; j-- > 0;) {
    best = std::max(best, static_cast<double>(tp[j]) / static_cast<double>(j + 1));
    envelope[j] = best;
  }

  const auto levels = static_cast<std::size_t>(recall_points - 1);
  double sum = 0;
  std::size_t j = 0;
  for (std::size_t i = 0; i <= levels; ++i) {
    // recall >= i/levels, in exact integer arithmetic
    while (j < n && tp[j] * levels < i * num_gt) ++j;
    if (j == n) break;
    sum += envelope[j];
  }
  return sum / static_cast<double>(recall_points);
}

double mean_ap(const std::map<Category, double>& per_category) {
  if (per_category.empty()) throw ValidationError("mean_ap of an empty category map");
  double sum = 0;
  for (const auto& [c, ap] : per_category) sum += ap;
  return sum / static_cast<double>(per_category.size());
}

EvalReport evaluate(const ImageDetections& dets, const GroundTruthSet& gt, const EvalProtocol& protocol) {
  protocol.validate();

  std::set<ImageId> ids;
  std::set<Category> present;
  for (const auto& [id, list] : dets) {
    ids.insert(id);
    for (const auto& d : list) present.insert(d.category);
  }
  for (const auto& [id, list] : gt) {
    ids.insert(id);
    for (const auto& g : list) present.insert(g.category);
  }
  for (const auto& c : present) protocol.iou_threshold(c);

  static const std::vector<DetectionRecord> kNoDets;
  static const std::vector<LabelRecord> kNoGt;

  EvalReport report;
  std::map<Category, double> aps;
  for (const auto& category : present) {
    const double thr = protocol.iou_threshold(category);
    // (confidence, image, index) -> tp flag
    std::vector<std::tuple<double, const ImageId*, std::size_t, bool>> scored;
    CategoryResult res;

    for (const auto& id : ids) {
      auto dit = dets.find(id);
      auto git = gt.find(id);
      const auto& dlist = dit == dets.end() ? kNoDets : dit->second;
      const auto& glist = git == gt.end() ? kNoGt : git->second;

      std::vector<DetectionRecord> cd;
      for (const auto& d : dlist)
        if (d.category == category) cd.push_back(d);
      std::vector<BoundingBox> evaluated, ignored;
      for (const auto& g : glist) {
        if (g.category != category) continue;
        (g.box.height() >= protocol.min_height ? evaluated : ignored).push_back(g.box);
      }
      res.num_gt += evaluated.size();

      const auto m = match_detections(cd, evaluated, ignored, thr);
      for (std::size_t i = 0; i < cd.size(); ++i) {
        if (m.detections[i] == DetOutcome::Ignored) continue;
        scored.emplace_back(cd[i].confidence, &id, i, m.detections[i] == DetOutcome::TruePositive);
      }
    }

    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
      if (*std::get<1>(a) != *std::get<1>(b)) return *std::get<1>(a) < *std::get<1>(b);
      return std::get<2>(a) < std::get<2>(b);
    });
    std::vector<bool> flags;
    flags.reserve(scored.size());
    for (const auto& s : scored) {
      flags.push_back(std::get<3>(s));
      (std::get<3>(s) ? res.tp : res.fp) += 1;
    }
    res.fn = res.num_gt - res.tp;
    res.ap = average_precision(flags, res.num_gt, protocol.recall_points);
    aps[category] = res.ap * 100.0;
    report.categories[category] = res;
  }
  report.map = aps.empty() ? 100.0 : mean_ap(aps);
  return report;
}

GroundTruthSet as_ground_truth(const ImageDetections& dets) {
  GroundTruthSet gt;
  for (const auto& [id, list] : dets) {
    auto& dst = gt[id];
    for (const auto& d : list) dst.push_back({d.box, d.category, LabelSource::Pseudo, std::nullopt});
  }
  return gt;
}

double stop_metric_map(const PseudoLabelSet& old, const PseudoLabelSet& fresh, const EvalProtocol& protocol) {
  return evaluate(fresh.entries, as_ground_truth(old.entries), stop_metric_protocol(protocol)).map;
}

std::vector<DetectionRecord> resize_boxes_per_category(std::span<const DetectionRecord> dets,
                                                       const std::map<Category, double>& factors) {
  std::vector<DetectionRecord> out;
  out.reserve(dets.size());
  for (auto d : dets) {
    auto it = factors.find(d.category);
    if (it == factors.end()) throw ValidationError("no resize factor for category '" + d.category + "'");
    const double f = it->second;
    if (!(f > 0)) throw ValidationError("resize factor for '" + d.category + "' must be positive");
    const double cx = 0.5 * (d.box.x1 + d.box.x2);
    const double cy = 0.5 * (d.box.y1 + d.box.y2);
    const double hw = 0.5 * d.box.width() * f;
    const double hh = 0.5 * d.box.height() * f;
    d.box = {cx - hw, cy - hh, cx + hw, cy + hh};
    out.push_back(d);
  }
  return out;
}

ImageDetections resize_boxes_per_category(const ImageDetections& dets, const std::map<Category, double>& factors) {
  ImageDetections out;
  for (const auto& [id, list] : dets) out[id] = resize_boxes_per_category(list, factors);
  return out;
}

AuditReport audit_pseudo_labels(const PseudoLabelSet& pl, const GroundTruthSet& gt, std::size_t labeled_boxes,
                                const std::map<Category, double>& iou_thresholds) {
  AuditReport report;
  report.labeled_boxes = labeled_boxes;
  for (auto* s : {&report.fp_corrected, &report.bb_corrected, &report.fpbb_corrected}) {
    s->producing_view = pl.producing_view;
    s->cycle = pl.cycle;
  }

  for (const auto& [id, list] : pl.entries) {
    auto git = gt.find(id);
    if (git == gt.end()) throw ValidationError("audit: no ground truth for image '" + id + "'");
    report.pseudo_boxes += list.size();

    std::vector<bool> is_fp(list.size(), true);
    std::vector<BoundingBox> replaced(list.size());
    std::set<Category> cats;
    for (const auto& d : list) cats.insert(d.category);
    for (const auto& c : cats) {
      auto tit = iou_thresholds.find(c);
      if (tit == iou_thresholds.end()) throw ValidationError("audit: no IoU threshold for category '" + c + "'");
      std::vector<std::size_t> idx;
      std::vector<DetectionRecord> cd;
      for (std::size_t i = 0; i < list.size(); ++i) {
        if (list[i].category == c) {
          idx.push_back(i);
          cd.push_back(list[i]);
        }
      }
      std::vector<BoundingBox> gboxes;
      for (const auto& g : git->second)
        if (g.category == c) gboxes.push_back(g.box);
      const auto m = match_detections(cd, gboxes, {}, tit->second);
      for (std::size_t k = 0; k < cd.size(); ++k) {
        if (m.detections[k] == DetOutcome::TruePositive) {
          is_fp[idx[k]] = false;
          replaced[idx[k]] = gboxes[static_cast<std::size_t>(m.matched_gt[k])];
        }
      }
    }

    std::vector<DetectionRecord> fp, bb, fpbb;
    for (std::size_t i = 0; i < list.size(); ++i) {
      auto corrected = list[i];
      if (!is_fp[i]) corrected.box = replaced[i];
      bb.push_back(corrected);
      if (is_fp[i]) {
        ++report.false_positives;
        continue;
      }
      fp.push_back(list[i]);
      fpbb.push_back(corrected);
    }
    report.bb_corrected.entries[id] = std::move(bb);
    if (!fp.empty()) report.fp_corrected.entries[id] = std::move(fp);
    if (!fpbb.empty()) report.fpbb_corrected.entries[id] = std::move(fpbb);
  }

  const auto denom = labeled_boxes + report.pseudo_boxes;
  report.fp_percent = denom == 0 ? 0.0 : 100.0 * static_cast<double>(report.false_positives) / static_cast<double>(denom);
  return report;
}

}  // namespace cotrain::eval
