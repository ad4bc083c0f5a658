#include "cotrain/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cotrain/error.hpp"
#include "cotrain/io.hpp"
#include "cotrain/json_util.hpp"
#include "cotrain/random.hpp"

namespace cotrain {

namespace fs = std::filesystem;

PseudoLabelSet rand_select(const PseudoLabelSet& candidates, std::size_t n, const std::optional<SeqConfig>& seq,
                           const ViewPairedDataset& data, std::set<FramePosition>& history, std::mt19937_64& rng) {
  if (n < 1) throw ValidationError("rand_select: N must be >= 1");

  std::vector<ImageId> survivors;
  if (!seq) {
    for (const auto& [id, dets] : candidates.entries) survivors.push_back(id);
  } else {
    std::map<std::string, std::vector<std::pair<int, ImageId>>> by_sequence;
    for (const auto& [id, dets] : candidates.entries) {
      const auto& img = data.at(id);
      if (img.sequence_id && img.frame_index) {
        by_sequence[*img.sequence_id].emplace_back(*img.frame_index, id);
      } else {
        survivors.push_back(id);
      }
    }
    for (auto& [sequence, frames] : by_sequence) {
      std::sort(frames.begin(), frames.end());
      std::optional<int> last_kept;
      for (const auto& [frame, id] : frames) {
        if (last_kept && frame - *last_kept < seq->delta_t1) continue;
        bool far_from_history = true;
        for (auto it = history.lower_bound({sequence, frame - seq->delta_t2 + 1});
             it != history.end() && it->first == sequence && it->second < frame + seq->delta_t2; ++it) {
          if (std::abs(it->second - frame) < seq->delta_t2) {
            far_from_history = false;
            break;
          }
        }
        if (!far_from_history) continue;
        last_kept = frame;
        survivors.push_back(id);
      }
    }
    std::sort(survivors.begin(), survivors.end());
  }

  if (survivors.size() > n) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, survivors.size() - 1);
      std::swap(survivors[i], survivors[pick(rng)]);
    }
    survivors.resize(n);
  }

  PseudoLabelSet out;
  out.producing_view = candidates.producing_view;
  out.cycle = candidates.cycle;
  for (const auto& id : survivors) {
    out.entries[id] = candidates.entries.at(id);
    if (seq) {
      const auto& img = data.at(id);
      if (img.sequence_id && img.frame_index) history.insert({*img.sequence_id, *img.frame_index});
    }
  }
  return out;
}

PseudoLabelSet select_top_m(const PseudoLabelSet& set, std::size_t m) {
  if (m == kUnbounded || m >= set.num_images()) return set;
  std::vector<std::pair<double, const ImageId*>> ranked;
  for (const auto& [id, dets] : set.entries) ranked.emplace_back(image_confidence(dets), &id);
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return *a.second < *b.second;
  });
  PseudoLabelSet out;
  out.producing_view = set.producing_view;
  out.cycle = set.cycle;
  for (std::size_t i = 0; i < m; ++i) out.entries[*ranked[i].second] = set.entries.at(*ranked[i].second);
  return out;
}

CrossScore cross_score(DetectorBackend& backend, const ModelHandle& receiver, const PseudoLabelSet& shared,
                       const ViewPairedDataset& data, const std::map<Category, double>& thresholds) {
  std::vector<ImageId> ids;
  for (const auto& [id, dets] : shared.entries) ids.push_back(id);
  CrossScore cs;
  cs.receiver_detections = detect_all(backend, receiver, data, ids, receiver.view, thresholds);
  for (const auto& id : ids) cs.scores[id] = image_confidence(cs.receiver_detections[id]);
  return cs;
}

PseudoLabelSet select_bottom_n(const std::map<ImageId, double>& scores, const PseudoLabelSet& shared, std::size_t n,
                               const ViewTransform& to_receiver, int receiver_view) {
  std::vector<std::pair<double, const ImageId*>> ranked;
  for (const auto& [id, dets] : shared.entries) {
    auto it = scores.find(id);
    if (it == scores.end()) throw ValidationError("select_bottom_n: no score for image '" + id + "'");
    ranked.emplace_back(it->second, &id);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return *a.second < *b.second;
  });
  PseudoLabelSet out;
  out.producing_view = receiver_view;
  out.cycle = shared.cycle;
  const std::size_t keep = std::min(n, ranked.size());
  for (std::size_t i = 0; i < keep; ++i) {
    const auto& id = *ranked[i].second;
    auto& dst = out.entries[id];
    for (const auto& d : shared.entries.at(id)) dst.push_back(transform_detection(d, to_receiver));
  }
  return out;
}

PseudoLabelSet fuse(const PseudoLabelSet& old, const PseudoLabelSet& fresh) {
  if (old.producing_view != fresh.producing_view)
    throw ValidationError("fuse: pseudo-label sets from different views");
  PseudoLabelSet out = old;
  out.cycle = std::max(old.cycle, fresh.cycle);
  for (const auto& [id, dets] : fresh.entries) out.entries[id] = dets;
  return out;
}

std::pair<bool, StopTracker> should_stop(const StopConfig& stop, double metric, int k, StopTracker tracker) {
  if (tracker.previous_metric) {
    if (std::abs(metric - *tracker.previous_metric) < stop.t_delta_map) {
      ++tracker.counter;
    } else {
      tracker.counter = 0;
    }
  }
  tracker.previous_metric = metric;
  const bool done = k >= stop.k_max || (k >= stop.k_min && tracker.counter >= stop.delta_k);
  return {done, tracker};
}

std::pair<bool, StopTracker> should_stop(const StopConfig& stop, const PseudoLabelSet& old,
                                         const PseudoLabelSet& fresh, int k, const StopTracker& tracker,
                                         const eval::EvalProtocol& protocol) {
  if (k < 1) throw ValidationError("should_stop: k must be >= 1");
  return should_stop(stop, eval::stop_metric_map(old, fresh, protocol), k, tracker);
}

namespace {

PseudoLabelSet empty_set(int view, int cycle) {
  PseudoLabelSet s;
  s.producing_view = view;
  s.cycle = cycle;
  return s;
}

void check_categories(const CoTrainConfig& cfg, const ViewPairedDataset& data) {
  for (const auto& [id, recs] : data.labels)
    for (const auto& r : recs)
      if (!cfg.thresholds.count(r.category))
        throw ValidationError("label category '" + r.category + "' of image '" + id + "' has no threshold in T");
}

}  // namespace

CycleState initialize(const CoTrainConfig& cfg, const ViewPairedDataset& data, DetectorBackend& backend) {
  cfg.validate();
  data.validate();
  if (data.labels.empty()) throw ValidationError("initialize: the labeled split is empty");
  if (!(data.view2_transform == cfg.view2_transform))
    throw ValidationError("initialize: dataset and config disagree on the view-2 transform");
  check_categories(cfg, data);

  CycleState st;
  st.rng_seed = cfg.rng_seed;
  st.accumulated1 = empty_set(1, 0);
  st.accumulated2 = empty_set(2, 0);
  const auto unlabeled = data.unlabeled_ids();
  st.model1 = train(backend, make_train_request(data, st.accumulated1, 1, 0));
  st.model2 = train(backend, make_train_request(data, st.accumulated2, 2, 0));
  st.fresh1 = detect(backend, st.model1, data, unlabeled, 1, cfg.thresholds, 0);
  st.fresh2 = detect(backend, st.model2, data, unlabeled, 2, cfg.thresholds, 0);
  return st;
}

CycleExchange run_cycle(const CoTrainConfig& cfg, const ViewPairedDataset& data, DetectorBackend& backend,
                        CycleState& st, const eval::EvalProtocol& protocol) {
  const int next = st.k + 1;
  const PseudoLabelSet old = st.fresh1;
  CycleExchange ex;

  std::mt19937_64 rng1(derive_seed(cfg.rng_seed, {static_cast<std::uint64_t>(next), 1}));
  std::mt19937_64 rng2(derive_seed(cfg.rng_seed, {static_cast<std::uint64_t>(next), 2}));
  ex.up1 = select_top_m(rand_select(st.fresh1, cfg.sample_size, cfg.seq, data, st.history.view1, rng1), cfg.share_top);
  ex.up2 = select_top_m(rand_select(st.fresh2, cfg.sample_size, cfg.seq, data, st.history.view2, rng2), cfg.share_top);

  auto exchange = [&](const ModelHandle& receiver, const PseudoLabelSet& shared, int receiver_view) {
    const auto cs = cross_score(backend, receiver, shared, data, cfg.thresholds);
    const int sender_view = 3 - receiver_view;
    if (!cfg.receiver_labels) {
      return select_bottom_n(cs.scores, shared, cfg.keep_lowest,
                             transform_between(cfg.view2_transform, sender_view, receiver_view), receiver_view);
    }
    PseudoLabelSet own = empty_set(receiver_view, shared.cycle);
    own.entries = cs.receiver_detections;
    auto picked = select_bottom_n(cs.scores, own, cfg.keep_lowest, ViewTransform{}, receiver_view);
    std::erase_if(picked.entries, [](const auto& e) { return e.second.empty(); });
    return picked;
  };
  ex.down1 = exchange(st.model1, ex.up2, 1);
  ex.down2 = exchange(st.model2, ex.up1, 2);
  ex.down1.cycle = next;
  ex.down2.cycle = next;

  st.accumulated1 = fuse(st.accumulated1, ex.down1);
  st.accumulated2 = fuse(st.accumulated2, ex.down2);

  const auto unlabeled = data.unlabeled_ids();
  st.model1 = train(backend, make_train_request(data, st.accumulated1, 1, next));
  st.model2 = train(backend, make_train_request(data, st.accumulated2, 2, next));
  st.fresh1 = detect(backend, st.model1, data, unlabeled, 1, cfg.thresholds, next);
  st.fresh2 = detect(backend, st.model2, data, unlabeled, 2, cfg.thresholds, next);
  st.k = next;

  const double metric = eval::stop_metric_map(old, st.fresh1, protocol);
  auto [done, tracker] = should_stop(cfg.stop, metric, st.k, st.stop);
  st.stop = tracker;
  st.finished = done;

  CycleLogRow row;
  row.k = st.k;
  row.stop_map = metric;
  row.n_img_1 = st.accumulated1.num_images();
  row.n_box_1 = st.accumulated1.num_boxes();
  row.n_img_2 = st.accumulated2.num_images();
  row.n_box_2 = st.accumulated2.num_boxes();
  row.n_up = ex.up1.num_images() + ex.up2.num_images();
  row.n_down = ex.down1.num_images() + ex.down2.num_images();
  st.log.push_back(row);
  return ex;
}

namespace {

constexpr const char* kLogHeader = "k,stop_map,n_img_1,n_box_1,n_img_2,n_box_2,n_up,n_down,seconds";

std::string log_line(const CycleLogRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.6f,%zu,%zu,%zu,%zu,%zu,%zu,%.3f", r.k, r.stop_map, r.n_img_1, r.n_box_1,
                r.n_img_2, r.n_box_2, r.n_up, r.n_down, r.seconds);
  return buf;
}

// Keeps log.csv rows up to cycle k (inclusive); creates the file if missing.
void reset_log(const fs::path& file, int k) {
  std::vector<std::string> kept;
  std::ifstream in(file);
  std::string line;
  bool header = true;
  while (in && std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stoi(line.substr(0, line.find(','))) <= k) kept.push_back(line);
  }
  std::string text = std::string(kLogHeader) + "\n";
  for (const auto& l : kept) text += l + "\n";
  json_util::write_text(file, text);
}

void append_log(const fs::path& file, const CycleLogRow& row) {
  std::ofstream out(file, std::ios::app);
  out << log_line(row) << "\n";
}

}  // namespace

RunResult run(const CoTrainConfig& cfg, const ViewPairedDataset& data, DetectorBackend& backend,
              const RunOptions& options) {
  cfg.validate();
  RunResult result;
  CycleState st;
  bool resumed = false;

  if (options.run_dir) {
    const auto& dir = *options.run_dir;
    fs::create_directories(dir);
    const auto cfg_file = dir / "config.json";
    if (fs::exists(cfg_file)) {
      const auto stored = parse_config(json_util::read_file(cfg_file));
      if (!(stored == cfg)) throw ValidationError("run directory " + dir.string() + " holds a different config");
    } else {
      json_util::write_file(cfg_file, config_to_json(cfg));
    }
    if (auto latest = latest_checkpoint(dir)) {
      st = load_checkpoint(*latest);
      resumed = true;
    }
  }

  if (!resumed) {
    st = initialize(cfg, data, backend);
    if (options.run_dir) save_checkpoint(st, cycle_dir(*options.run_dir, 0));
  }
  if (options.run_dir) reset_log(*options.run_dir / "log.csv", st.k);

  while (!st.finished) {
    if (options.halt_after && st.k >= *options.halt_after) break;
    const auto t0 = std::chrono::steady_clock::now();
    const auto ex = run_cycle(cfg, data, backend, st, options.protocol);
    st.log.back().seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (options.run_dir) {
      save_checkpoint(st, cycle_dir(*options.run_dir, st.k));
      append_log(*options.run_dir / "log.csv", st.log.back());
    }
    if (options.on_cycle) options.on_cycle(st, ex);
  }

  result.labels = st.fresh1;
  result.finished = st.finished;
  result.state = std::move(st);
  if (options.run_dir && result.finished) json_util::write_file(*options.run_dir / "dpl.json", pseudo_set_to_json(result.labels));
  return result;
}

ModelHandle train_final(DetectorBackend& backend, const ViewPairedDataset& data, const PseudoLabelSet& pseudo) {
  if (data.labels.empty() && pseudo.entries.empty())
    throw ValidationError("train_final: labeled and pseudo-labeled sets are both empty");
  if (pseudo.producing_view != 1) throw ValidationError("train_final: pseudo-labels must be in the view-1 frame");
  return train(backend, make_train_request(data, pseudo, 1, -1));
}

}  // namespace cotrain
