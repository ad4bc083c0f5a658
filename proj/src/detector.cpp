#include "cotrain/detector.hpp"

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "cotrain/error.hpp"
#include "cotrain/io.hpp"
#include "cotrain/json_util.hpp"

namespace cotrain {

namespace fs = std::filesystem;
using namespace json_util;

void TrainRequest::validate() const {
  if (view != 1 && view != 2) throw ValidationError("train request: view must be 1 or 2");
  std::set<ImageId> seen;
  for (const auto& img : images) {
    if (!seen.insert(img.id).second) throw ValidationError("train request: duplicate image '" + img.id + "'");
    if (!img.mine_negatives) continue;
    for (const auto& l : img.labels) {
      if (l.source == LabelSource::Pseudo) {
        throw ValidationError("train request: image '" + img.id +
                              "' carries pseudo-labels and must not be used for negative mining");
      }
    }
  }
}

TrainRequest make_train_request(const ViewPairedDataset& data, const PseudoLabelSet& pseudo, int view, int cycle) {
  TrainRequest req;
  req.view = view;
  req.cycle = cycle;
  for (const auto& img : data.images) {
    if (!data.is_labeled(img.id)) continue;
    req.images.push_back({img.id, img.payload_ref(view), data.labels_in_view(img.id, view), true});
  }
  for (const auto& [id, dets] : pseudo.entries) {
    if (data.is_labeled(id)) throw ValidationError("pseudo-label set contains labeled image '" + id + "'");
    TrainImage ti{id, data.at(id).payload_ref(view), {}, false};
    for (const auto& d : dets) ti.labels.push_back({d.box, d.category, LabelSource::Pseudo, pseudo.cycle});
    req.images.push_back(std::move(ti));
  }
  return req;
}

ModelHandle train(DetectorBackend& backend, const TrainRequest& request) {
  request.validate();
  try {
    return backend.train(request);
  } catch (const BackendError& e) {
    throw BackendError("train (view " + std::to_string(request.view) + "): " + e.what());
  }
}

ImageDetections detect_all(DetectorBackend& backend, const ModelHandle& model, const ViewPairedDataset& data,
                           const std::vector<ImageId>& ids, int view, const std::map<Category, double>& thresholds) {
  DetectRequest req;
  req.view = view;
  req.thresholds = thresholds;
  for (const auto& id : ids) req.images.push_back({id, data.at(id).payload_ref(view)});
  if (req.images.empty()) return {};

  ImageDetections raw;
  try {
    raw = backend.detect(model, req);
  } catch (const BackendError& e) {
    throw BackendError("detect (view " + std::to_string(view) + "): " + e.what());
  }

  const std::set<ImageId> requested(ids.begin(), ids.end());
  ImageDetections out;
  for (const auto& id : ids) out[id];
  for (auto& [id, dets] : raw) {
    if (!requested.count(id)) {
      throw BackendError("detect (view " + std::to_string(view) + "): backend returned unrequested image '" + id + "'");
    }
    out[id] = apply_confidence_thresholds(dets, thresholds);
  }
  return out;
}

PseudoLabelSet detect(DetectorBackend& backend, const ModelHandle& model, const ViewPairedDataset& data,
                      const std::vector<ImageId>& ids, int view, const std::map<Category, double>& thresholds,
                      int cycle) {
  PseudoLabelSet set;
  set.producing_view = view;
  set.cycle = cycle;
  for (auto& [id, dets] : detect_all(backend, model, data, ids, view, thresholds)) {
    if (!dets.empty()) set.entries[id] = std::move(dets);
  }
  return set;
}

// ---------------------------------------------------------------------------
// Wire protocol

namespace wire {
namespace {

json parse_text(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what());
  }
}

void check_version(const json& j) {
  const auto v = require_integer(j, "version", "");
  if (v != kProtocolVersion) {
    throw ParseError("protocol version mismatch: got " + std::to_string(v) + ", expected " +
                     std::to_string(kProtocolVersion));
  }
}

int parse_view(const json& j) {
  const auto v = require_integer(j, "view", "");
  if (v != 1 && v != 2) throw ParseError("view must be 1 or 2");
  return static_cast<int>(v);
}

}  // namespace

std::string encode_train_request(const TrainRequest& r) {
  json j;
  j["version"] = kProtocolVersion;
  j["view"] = r.view;
  j["cycle"] = r.cycle;
  j["images"] = json::array();
  for (const auto& img : r.images) {
    json ji;
    ji["id"] = img.id;
    ji["payload_ref"] = img.payload_ref;
    ji["mine_negatives"] = img.mine_negatives;
    ji["labels"] = json::array();
    for (const auto& l : img.labels) {
      json jl{{"category", l.category}, {"bbox", bbox_to_json(l.box)}, {"source", to_string(l.source)}};
      if (l.cycle) jl["cycle"] = *l.cycle;
      ji["labels"].push_back(jl);
    }
    j["images"].push_back(ji);
  }
  return canonical_dump(j);
}

TrainRequest decode_train_request(const std::string& text) {
  const json j = parse_text(text);
  check_version(j);
  TrainRequest r;
  r.view = parse_view(j);
  if (const auto* c = json_util::optional(j, "cycle")) r.cycle = static_cast<int>(integer(*c, "cycle"));
  const auto& images = array(require(j, "images", ""), "images");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto p = index("images", i);
    TrainImage img;
    img.id = require_string(images[i], "id", p);
    img.payload_ref = require_string(images[i], "payload_ref", p);
    img.mine_negatives = boolean(require(images[i], "mine_negatives", p), join(p, "mine_negatives"));
    const auto lp = join(p, "labels");
    const auto& labels = array(require(images[i], "labels", p), lp);
    for (std::size_t k = 0; k < labels.size(); ++k) {
      const auto q = index(lp, k);
      LabelRecord l;
      l.category = require_string(labels[k], "category", q);
      l.box = bbox(require(labels[k], "bbox", q), join(q, "bbox"));
      l.source = label_source_from_string(require_string(labels[k], "source", q));
      if (const auto* c = json_util::optional(labels[k], "cycle")) l.cycle = static_cast<int>(integer(*c, join(q, "cycle")));
      img.labels.push_back(l);
    }
    r.images.push_back(std::move(img));
  }
  return r;
}

std::string encode_detect_request(const DetectRequest& r) {
  json j;
  j["version"] = kProtocolVersion;
  j["view"] = r.view;
  j["thresholds"] = r.thresholds;
  j["images"] = json::array();
  for (const auto& img : r.images) j["images"].push_back(json{{"id", img.id}, {"payload_ref", img.payload_ref}});
  return canonical_dump(j);
}

DetectRequest decode_detect_request(const std::string& text) {
  const json j = parse_text(text);
  check_version(j);
  DetectRequest r;
  r.view = parse_view(j);
  const auto& t = object(require(j, "thresholds", ""), "thresholds");
  for (const auto& [c, v] : t.items()) r.thresholds[c] = number(v, join("thresholds", c));
  const auto& images = array(require(j, "images", ""), "images");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto p = index("images", i);
    r.images.push_back({require_string(images[i], "id", p), require_string(images[i], "payload_ref", p)});
  }
  return r;
}

std::string encode_detections(const ImageDetections& results) {
  json j;
  j["version"] = kProtocolVersion;
  j["results"] = detections_to_json(results);
  return canonical_dump(j);
}

ImageDetections decode_detections(const std::string& text) {
  const json j = parse_text(text);
  check_version(j);
  return parse_detections(require(j, "results", ""), "results");
}

}  // namespace wire

// ---------------------------------------------------------------------------
// Process execution

ProcessResult run_process(const std::vector<std::string>& argv) {
  if (argv.empty()) throw BackendError("run_process: empty argv");

  char capture_path[] = "/tmp/cotrain-stderr-XXXXXX";
  const int capture = ::mkstemp(capture_path);
  if (capture < 0) throw BackendError(std::string("mkstemp: ") + std::strerror(errno));

  std::vector<char*> args;
  args.reserve(argv.size() + 1);
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);

  const pid_t pid = ::fork();
  if (pid < 0) {
    ::close(capture);
    ::unlink(capture_path);
    throw BackendError(std::string("fork: ") + std::strerror(errno));
  }
  if (pid == 0) {
    ::dup2(capture, STDERR_FILENO);
    const int devnull = ::open("/dev/null", O_WRONLY);
    if (devnull >= 0) ::dup2(devnull, STDOUT_FILENO);
    ::execv(args[0], args.data());
    const std::string msg = std::string("exec ") + args[0] + ": " + std::strerror(errno) + "\n";
    (void)!::write(STDERR_FILENO, msg.data(), msg.size());
    ::_exit(127);
  }

  int status = 0;
  while (::waitpid(pid, &status, 0) < 0) {
    if (errno != EINTR) break;
  }
  ::close(capture);

  ProcessResult r;
  if (WIFEXITED(status)) {
    r.exit_code = WEXITSTATUS(status);
  } else if (WIFSIGNALED(status)) {
    r.exit_code = 128 + WTERMSIG(status);
  }
  std::ifstream in(capture_path);
  std::stringstream buf;
  buf << in.rdbuf();
  r.stderr_text = buf.str();
  ::unlink(capture_path);
  return r;
}

ExternalBackend::ExternalBackend(fs::path executable, fs::path work_dir)
    : executable_(std::move(executable)), work_dir_(std::move(work_dir)) {
  if (executable_.empty() || !fs::exists(executable_))
    throw BackendError("worker executable not found: '" + executable_.string() + "'");
  executable_ = fs::absolute(executable_);
  fs::create_directories(work_dir_);
}

namespace {

void check_exit(const ProcessResult& r, const std::string& what) {
  if (r.exit_code == 0) return;
  throw BackendError(what + " failed with exit code " + std::to_string(r.exit_code) +
                     (r.stderr_text.empty() ? "" : "; stderr: " + r.stderr_text));
}

}  // namespace

ModelHandle ExternalBackend::train(const TrainRequest& request) {
  const auto tag = "v" + std::to_string(request.view) + (request.cycle < 0 ? "_final" : "_c" + std::to_string(request.cycle));
  const auto req_file = work_dir_ / "requests" / ("train_" + tag + ".json");
  const auto model_dir = work_dir_ / "models" / tag;
  write_text(req_file, wire::encode_train_request(request));
  fs::create_directories(model_dir);

  const auto r = run_process({executable_.string(), "train", "--request", req_file.string(), "--model-out",
                              model_dir.string()});
  check_exit(r, "worker train");

  ModelHandle h;
  h.backend = kind();
  h.token = tag;
  h.path = model_dir.string();
  h.view = request.view;
  h.cycle = request.cycle;
  return h;
}

ImageDetections ExternalBackend::detect(const ModelHandle& model, const DetectRequest& request) {
  if (model.backend != kind()) throw BackendError("model handle from backend '" + model.backend + "' used with external backend");
  const auto tag = model.token + "_" + std::to_string(detect_calls_++);
  const auto req_file = work_dir_ / "requests" / ("detect_" + tag + ".json");
  const auto out_file = work_dir_ / "responses" / ("detections_" + tag + ".json");
  write_text(req_file, wire::encode_detect_request(request));
  fs::create_directories(out_file.parent_path());
  fs::remove(out_file);

  const auto r = run_process({executable_.string(), "detect", "--model", model.path, "--request", req_file.string(),
                              "--out", out_file.string()});
  check_exit(r, "worker detect");

  std::ifstream in(out_file);
  if (!in) throw BackendError("worker detect produced no output file " + out_file.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return wire::decode_detections(buf.str());
  } catch (const ParseError& e) {
    throw BackendError("malformed worker response " + out_file.string() + ": " + e.what());
  }
}

}  // namespace cotrain
