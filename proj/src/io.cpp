#include "cotrain/io.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "cotrain/error.hpp"
#include "cotrain/json_util.hpp"

namespace cotrain {

namespace fs = std::filesystem;
using namespace json_util;

namespace {

constexpr int kCheckpointVersion = 1;

ImageRecord parse_image(const json& j, const std::string& path) {
  ImageRecord img;
  img.id = require_string(j, "id", path);
  img.width = static_cast<int>(require_integer(j, "width", path));
  img.height = static_cast<int>(require_integer(j, "height", path));
  if (const auto* s = json_util::optional(j, "sequence_id")) img.sequence_id = string(*s, join(path, "sequence_id"));
  if (const auto* f = json_util::optional(j, "frame_index"))
    img.frame_index = static_cast<int>(integer(*f, join(path, "frame_index")));
  const auto& views = object(require(j, "views", path), join(path, "views"));
  const auto vpath = join(path, "views");
  img.view1_ref = require_string(views, "v1", vpath);
  if (const auto* v2 = json_util::optional(views, "v2")) img.view2_ref = string(*v2, join(vpath, "v2"));
  return img;
}

json image_to_json(const ImageRecord& img) {
  json j;
  j["id"] = img.id;
  j["width"] = img.width;
  j["height"] = img.height;
  if (img.sequence_id) j["sequence_id"] = *img.sequence_id;
  if (img.frame_index) j["frame_index"] = *img.frame_index;
  json views;
  views["v1"] = img.view1_ref;
  if (img.view2_ref) views["v2"] = *img.view2_ref;
  j["views"] = views;
  return j;
}

LabelRecord parse_label(const json& j, const std::string& path) {
  LabelRecord r;
  r.category = require_string(j, "category", path);
  r.box = bbox(require(j, "bbox", path), join(path, "bbox"));
  if (const auto* s = json_util::optional(j, "source"))
    r.source = label_source_from_string(string(*s, join(path, "source")));
  if (const auto* c = json_util::optional(j, "cycle")) r.cycle = static_cast<int>(integer(*c, join(path, "cycle")));
  return r;
}

json label_to_json(const LabelRecord& r) {
  json j;
  j["category"] = r.category;
  j["bbox"] = bbox_to_json(r.box);
  j["source"] = to_string(r.source);
  if (r.cycle) j["cycle"] = *r.cycle;
  return j;
}

DetectionRecord parse_detection(const json& j, const std::string& path) {
  DetectionRecord d;
  d.category = require_string(j, "category", path);
  d.box = bbox(require(j, "bbox", path), join(path, "bbox"));
  d.confidence = require_number(j, "confidence", path);
  if (d.confidence < 0 || d.confidence > 1) throw ParseError("confidence outside [0,1] at " + join(path, "confidence"));
  return d;
}

json detection_to_json(const DetectionRecord& d) {
  json j;
  j["category"] = d.category;
  j["bbox"] = bbox_to_json(d.box);
  j["confidence"] = d.confidence;
  return j;
}

json handle_to_json(const ModelHandle& h) {
  return json{{"backend", h.backend}, {"token", h.token}, {"path", h.path},
              {"view", h.view},       {"cycle", h.cycle}, {"payload", h.payload}};
}

ModelHandle parse_handle(const json& j, const std::string& path) {
  ModelHandle h;
  h.backend = require_string(j, "backend", path);
  h.token = require_string(j, "token", path);
  h.path = require_string(j, "path", path);
  h.view = static_cast<int>(require_integer(j, "view", path));
  h.cycle = static_cast<int>(require_integer(j, "cycle", path));
  h.payload = require_string(j, "payload", path);
  return h;
}

json history_to_json(const std::set<FramePosition>& h) {
  json arr = json::array();
  for (const auto& [seq, frame] : h) arr.push_back(json::array({seq, frame}));
  return arr;
}

std::set<FramePosition> parse_history(const json& j, const std::string& path) {
  std::set<FramePosition> out;
  const auto& arr = array(j, path);
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto p = index(path, i);
    if (!arr[i].is_array() || arr[i].size() != 2) throw ParseError("expected [sequence, frame] at " + p);
    out.insert({string(arr[i][0], index(p, 0)), static_cast<int>(integer(arr[i][1], index(p, 1)))});
  }
  return out;
}

json log_row_to_json(const CycleLogRow& r) {
  return json{{"k", r.k},           {"stop_map", r.stop_map}, {"n_img_1", r.n_img_1}, {"n_box_1", r.n_box_1},
              {"n_img_2", r.n_img_2}, {"n_box_2", r.n_box_2},   {"n_up", r.n_up},       {"n_down", r.n_down}};
}

CycleLogRow parse_log_row(const json& j, const std::string& path) {
  CycleLogRow r;
  r.k = static_cast<int>(require_integer(j, "k", path));
  r.stop_map = require_number(j, "stop_map", path);
  r.n_img_1 = static_cast<std::size_t>(require_integer(j, "n_img_1", path));
  r.n_box_1 = static_cast<std::size_t>(require_integer(j, "n_box_1", path));
  r.n_img_2 = static_cast<std::size_t>(require_integer(j, "n_img_2", path));
  r.n_box_2 = static_cast<std::size_t>(require_integer(j, "n_box_2", path));
  r.n_up = static_cast<std::size_t>(require_integer(j, "n_up", path));
  r.n_down = static_cast<std::size_t>(require_integer(j, "n_down", path));
  return r;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset manifest

ViewPairedDataset parse_dataset(const json& manifest) {
  ViewPairedDataset data;
  const auto& images = array(require(manifest, "images", ""), "images");
  for (std::size_t i = 0; i < images.size(); ++i) data.images.push_back(parse_image(images[i], index("images", i)));
  if (const auto* labels = json_util::optional(manifest, "labels")) {
    object(*labels, "labels");
    for (const auto& [id, recs] : labels->items()) {
      const auto p = join("labels", id);
      array(recs, p);
      auto& out = data.labels[id];
      for (std::size_t j = 0; j < recs.size(); ++j) out.push_back(parse_label(recs[j], index(p, j)));
    }
  }
  if (const auto* t = json_util::optional(manifest, "view2_transform"))
    data.view2_transform = parse_view_transform(*t, "view2_transform");
  return data;
}

json dataset_to_json(const ViewPairedDataset& data) {
  json j;
  j["images"] = json::array();
  for (const auto& img : data.images) j["images"].push_back(image_to_json(img));
  json labels = json::object();
  for (const auto& [id, recs] : data.labels) {
    json arr = json::array();
    for (const auto& r : recs) arr.push_back(label_to_json(r));
    labels[id] = arr;
  }
  j["labels"] = labels;
  j["view2_transform"] = view_transform_to_json(data.view2_transform);
  return j;
}

ViewPairedDataset load_dataset(const fs::path& manifest_path) {
  auto data = parse_dataset(read_file(manifest_path));
  try {
    data.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(manifest_path.string() + ": " + e.what());
  }
  return data;
}

void save_dataset(const ViewPairedDataset& data, const fs::path& manifest_path) {
  write_file(manifest_path, dataset_to_json(data));
}

// ---------------------------------------------------------------------------
// KITTI labels

std::optional<LabelRecord> parse_kitti_label_line(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> fields;
  for (std::string f; in >> f;) fields.push_back(f);
  if (fields.empty()) return std::nullopt;
  if (fields.size() < 8) throw ParseError("KITTI label line has " + std::to_string(fields.size()) + " fields, need >= 8: '" + trim(line) + "'");

  std::string category;
  if (fields[0] == "Car") {
    category = kVehicle;
  } else if (fields[0] == "Pedestrian") {
    category = kPedestrian;
  } else {
    return std::nullopt;
  }

  BoundingBox box;
  try {
    box = {std::stod(fields[4]), std::stod(fields[5]), std::stod(fields[6]), std::stod(fields[7])};
  } catch (const std::exception&) {
    throw ParseError("KITTI label line has a non-numeric box: '" + trim(line) + "'");
  }
  if (!box.valid()) throw ValidationError("KITTI label line has a degenerate box: '" + trim(line) + "'");
  return LabelRecord{box, category, LabelSource::Human, std::nullopt};
}

std::vector<LabelRecord> load_kitti_labels(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ParseError("cannot open " + file.string());
  std::vector<LabelRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    try {
      if (auto rec = parse_kitti_label_line(line)) out.push_back(*rec);
    } catch (const ParseError& e) {
      throw ParseError(file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run configuration

json view_transform_to_json(const ViewTransform& t) {
  json j;
  j["kind"] = to_string(t.kind);
  if (t.image_width) j["image_width"] = *t.image_width;
  return j;
}

ViewTransform parse_view_transform(const json& j, const std::string& path) {
  ViewTransform t;
  t.kind = transform_kind_from_string(require_string(j, "kind", path));
  if (const auto* w = json_util::optional(j, "image_width")) t.image_width = number(*w, join(path, "image_width"));
  return t;
}

CoTrainConfig parse_config(const json& j) {
  CoTrainConfig cfg;
  cfg.thresholds.clear();
  const auto& t = object(require(j, "T", ""), "T");
  for (const auto& [cat, v] : t.items()) cfg.thresholds[cat] = number(v, "T." + cat);

  auto positive = [&](const char* key) {
    auto v = require_integer(j, key, "");
    if (v < 1) throw ValidationError(std::string("config: ") + key + " must be positive");
    return static_cast<std::size_t>(v);
  };
  cfg.sample_size = positive("N");
  cfg.keep_lowest = positive("n");
  const auto& m = require(j, "m", "");
  if (m.is_string()) {
    if (m.get<std::string>() != "inf") throw ParseError("m must be a positive integer or \"inf\"");
    cfg.share_top = kUnbounded;
  } else {
    cfg.share_top = positive("m");
  }
  cfg.stop.k_min = static_cast<int>(require_integer(j, "K_min", ""));
  cfg.stop.k_max = static_cast<int>(require_integer(j, "K_max", ""));
  cfg.stop.delta_k = static_cast<int>(require_integer(j, "delta_K", ""));
  cfg.stop.t_delta_map = require_number(j, "T_delta_map", "");

  const auto* dt1 = json_util::optional(j, "delta_t1");
  const auto* dt2 = json_util::optional(j, "delta_t2");
  if (dt1 || dt2) {
    SeqConfig seq{0, 0};
    if (dt1) seq.delta_t1 = static_cast<int>(integer(*dt1, "delta_t1"));
    if (dt2) seq.delta_t2 = static_cast<int>(integer(*dt2, "delta_t2"));
    cfg.seq = seq;
  }
  cfg.view2_transform = parse_view_transform(require(j, "view2_transform", ""), "view2_transform");
  const auto& seed = require(j, "rng_seed", "");
  if (!seed.is_number_integer() || (seed.is_number_integer() && !seed.is_number_unsigned() && seed.get<long long>() < 0))
    throw ParseError("rng_seed must be a non-negative integer");
  cfg.rng_seed = seed.get<std::uint64_t>();
  if (const auto* ex = json_util::optional(j, "exchange_labels")) {
    const auto mode = string(*ex, "exchange_labels");
    if (mode != "sender" && mode != "receiver") throw ParseError("exchange_labels must be \"sender\" or \"receiver\"");
    cfg.receiver_labels = mode == "receiver";
  }
  cfg.validate();
  return cfg;
}

json config_to_json(const CoTrainConfig& cfg) {
  json j;
  j["T"] = cfg.thresholds;
  j["N"] = cfg.sample_size;
  j["n"] = cfg.keep_lowest;
  if (cfg.share_top == kUnbounded) {
    j["m"] = "inf";
  } else {
    j["m"] = cfg.share_top;
  }
  j["K_min"] = cfg.stop.k_min;
  j["K_max"] = cfg.stop.k_max;
  j["delta_K"] = cfg.stop.delta_k;
  j["T_delta_map"] = cfg.stop.t_delta_map;
  if (cfg.seq) {
    j["delta_t1"] = cfg.seq->delta_t1;
    j["delta_t2"] = cfg.seq->delta_t2;
  }
  j["view2_transform"] = view_transform_to_json(cfg.view2_transform);
  j["rng_seed"] = cfg.rng_seed;
  if (cfg.receiver_labels) j["exchange_labels"] = "receiver";
  return j;
}

CoTrainConfig load_config(const fs::path& file) {
  try {
    return parse_config(read_file(file));
  } catch (const ParseError& e) {
    throw ParseError(file.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Detections and ground truth

json detections_to_json(const ImageDetections& dets) {
  json j = json::object();
  for (const auto& [id, list] : dets) {
    json arr = json::array();
    for (const auto& d : list) arr.push_back(detection_to_json(d));
    j[id] = arr;
  }
  return j;
}

ImageDetections parse_detections(const json& j, const std::string& path) {
  ImageDetections out;
  object(j, path.empty() ? "<root>" : path);
  for (const auto& [id, list] : j.items()) {
    const auto p = path.empty() ? id : join(path, id);
    array(list, p);
    auto& dst = out[id];
    for (std::size_t i = 0; i < list.size(); ++i) dst.push_back(parse_detection(list[i], index(p, i)));
  }
  return out;
}

ImageDetections load_detections(const fs::path& file) {
  try {
    return parse_detections(read_file(file));
  } catch (const ParseError& e) {
    throw ParseError(file.string() + ": " + e.what());
  }
}

void save_detections(const ImageDetections& dets, const fs::path& file) { write_file(file, detections_to_json(dets)); }

GroundTruthSet parse_ground_truth(const json& j) {
  GroundTruthSet out;
  object(j, "<root>");
  for (const auto& [id, list] : j.items()) {
    array(list, id);
    auto& dst = out[id];
    for (std::size_t i = 0; i < list.size(); ++i) {
      auto rec = parse_label(list[i], index(id, i));
      rec.source = LabelSource::Human;
      rec.cycle.reset();
      dst.push_back(rec);
    }
  }
  return out;
}

GroundTruthSet load_ground_truth(const fs::path& file) {
  try {
    return parse_ground_truth(read_file(file));
  } catch (const ParseError& e) {
    throw ParseError(file.string() + ": " + e.what());
  }
}

json ground_truth_to_json(const GroundTruthSet& gt) {
  json j = json::object();
  for (const auto& [id, list] : gt) {
    json arr = json::array();
    for (const auto& r : list) arr.push_back(json{{"category", r.category}, {"bbox", bbox_to_json(r.box)}});
    j[id] = arr;
  }
  return j;
}

json pseudo_set_to_json(const PseudoLabelSet& set) {
  return json{{"producing_view", set.producing_view}, {"cycle", set.cycle}, {"entries", detections_to_json(set.entries)}};
}

PseudoLabelSet parse_pseudo_set(const json& j, const std::string& path) {
  PseudoLabelSet set;
  set.producing_view = static_cast<int>(require_integer(j, "producing_view", path));
  set.cycle = static_cast<int>(require_integer(j, "cycle", path));
  set.entries = parse_detections(require(j, "entries", path), join(path, "entries"));
  return set;
}

// ---------------------------------------------------------------------------
// Checkpoints

fs::path cycle_dir(const fs::path& run_dir, int k) { return run_dir / "cycles" / std::to_string(k); }

void save_checkpoint(const CycleState& state, const fs::path& dir) {
  fs::create_directories(dir);
  write_file(dir / "dpl1.json", pseudo_set_to_json(state.accumulated1));
  write_file(dir / "dpl2.json", pseudo_set_to_json(state.accumulated2));

  json s;
  s["version"] = kCheckpointVersion;
  s["k"] = state.k;
  s["rng"] = json{{"seed", state.rng_seed}, {"stream", state.k}};
  s["model1"] = handle_to_json(state.model1);
  s["model2"] = handle_to_json(state.model2);
  s["fresh1"] = pseudo_set_to_json(state.fresh1);
  s["fresh2"] = pseudo_set_to_json(state.fresh2);
  s["history"] = json{{"view1", history_to_json(state.history.view1)}, {"view2", history_to_json(state.history.view2)}};
  json stop{{"counter", state.stop.counter}};
  stop["previous_metric"] = state.stop.previous_metric ? json(*state.stop.previous_metric) : json(nullptr);
  s["stop"] = stop;
  s["log"] = json::array();
  for (const auto& row : state.log) s["log"].push_back(log_row_to_json(row));
  s["finished"] = state.finished;
  // state.json last: its presence marks a complete checkpoint.
  write_file(dir / "state.json", s);
}

CycleState load_checkpoint(const fs::path& dir) {
  auto read = [&](const char* name) {
    const auto file = dir / name;
    if (!fs::exists(file)) throw CheckpointError("missing checkpoint file " + file.string());
    try {
      return read_file(file);
    } catch (const ParseError& e) {
      throw CheckpointError("corrupt checkpoint file " + file.string() + ": " + e.what());
    }
  };
  const json s = read("state.json");
  const json d1 = read("dpl1.json");
  const json d2 = read("dpl2.json");

  CycleState st;
  try {
    if (require_integer(s, "version", "") != kCheckpointVersion)
      throw CheckpointError("unsupported checkpoint version in " + (dir / "state.json").string());
    st.k = static_cast<int>(require_integer(s, "k", ""));
    const auto& rng = require(s, "rng", "");
    st.rng_seed = require(rng, "seed", "rng").get<std::uint64_t>();
    st.model1 = parse_handle(require(s, "model1", ""), "model1");
    st.model2 = parse_handle(require(s, "model2", ""), "model2");
    st.fresh1 = parse_pseudo_set(require(s, "fresh1", ""), "fresh1");
    st.fresh2 = parse_pseudo_set(require(s, "fresh2", ""), "fresh2");
    const auto& hist = require(s, "history", "");
    st.history.view1 = parse_history(require(hist, "view1", "history"), "history.view1");
    st.history.view2 = parse_history(require(hist, "view2", "history"), "history.view2");
    const auto& stop = require(s, "stop", "");
    st.stop.counter = static_cast<int>(require_integer(stop, "counter", "stop"));
    if (const auto* pm = json_util::optional(stop, "previous_metric")) st.stop.previous_metric = number(*pm, "stop.previous_metric");
    const auto& log = array(require(s, "log", ""), "log");
    for (std::size_t i = 0; i < log.size(); ++i) st.log.push_back(parse_log_row(log[i], index("log", i)));
    st.finished = boolean(require(s, "finished", ""), "finished");
    st.accumulated1 = parse_pseudo_set(d1, "dpl1");
    st.accumulated2 = parse_pseudo_set(d2, "dpl2");
  } catch (const ParseError& e) {
    throw CheckpointError("corrupt checkpoint in " + dir.string() + ": " + e.what());
  } catch (const json::exception& e) {
    throw CheckpointError("corrupt checkpoint in " + dir.string() + ": " + e.what());
  }
  return st;
}

std::vector<int> checkpoint_cycles(const fs::path& run_dir) {
  std::vector<int> ks;
  const auto root = run_dir / "cycles";
  if (!fs::is_directory(root)) return ks;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_directory()) continue;
    const auto name = entry.path().filename().string();
    if (name.empty() || !std::all_of(name.begin(), name.end(), ::isdigit)) continue;
    if (!fs::exists(entry.path() / "state.json")) continue;
    ks.push_back(std::stoi(name));
  }
  std::sort(ks.begin(), ks.end());
  return ks;
}

std::optional<fs::path> latest_checkpoint(const fs::path& run_dir) {
  auto ks = checkpoint_cycles(run_dir);
  if (ks.empty()) return std::nullopt;
  return cycle_dir(run_dir, ks.back());
}

}  // namespace cotrain
