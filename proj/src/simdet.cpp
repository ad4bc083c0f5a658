#include "cotrain/simdet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cotrain/error.hpp"
#include "cotrain/eval.hpp"
#include "cotrain/json_util.hpp"
#include "cotrain/random.hpp"

namespace cotrain::sim {

using nlohmann::json;
using namespace json_util;

namespace {

enum Stream : std::uint64_t { kTrainImage = 1, kTestImage = 2, kSequence = 3, kSplit = 4, kSpurious = 5 };

int poisson_quantile(double u, double mean) {
  if (mean <= 0) return 0;
  double p = std::exp(-mean);
  double cdf = p;
  int k = 0;
  while (u > cdf && k < 1000) {
    ++k;
    p *= mean / k;
    cdf += p;
  }
  return k;
}

struct Sampler {
  std::mt19937_64 rng;
  explicit Sampler(std::uint64_t seed) : rng(seed) {}
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(rng); }
};

Category pick_category(const WorldConfig& cfg, double u) {
  double total = 0;
  for (const auto& [c, s] : cfg.categories) total += s.fraction;
  double acc = 0;
  for (const auto& [c, s] : cfg.categories) {
    acc += s.fraction / total;
    if (u < acc) return c;
  }
  return cfg.categories.rbegin()->first;
}

BoundingBox sample_box(const WorldConfig& cfg, const CategoryShape& shape, Sampler& s) {
  const double W = cfg.image_width;
  const double H = cfg.image_height;
  double h = std::exp(shape.height_log_mean + shape.height_log_sigma * s.normal());
  h = std::clamp(h, 12.0, H - 2.0);
  double w = std::clamp(shape.aspect * h, 4.0, W - 2.0);
  const double x1 = s.uniform(0.0, W - w - 1.0);
  const double y2 = s.uniform(h, H);
  return {x1, y2 - h, x1 + w, y2};
}

SimObject sample_object(const WorldConfig& cfg, Sampler& s) {
  SimObject o;
  o.category = pick_category(cfg, s.uniform());
  o.box = sample_box(cfg, cfg.categories.at(o.category), s);
  const double z1 = s.normal();
  const double e = s.normal();
  const double z2 = cfg.rho * z1 + std::sqrt(std::max(0.0, 1.0 - cfg.rho * cfg.rho)) * e;
  o.latent = {z1, z2};
  o.difficulty = {logistic(z1), logistic(z2 + cfg.view2_difficulty_offset)};
  return o;
}

int object_count(const WorldConfig& cfg, Sampler& s) {
  return 1 + poisson_quantile(s.uniform(), std::max(0.0, cfg.mean_objects - 1.0));
}

ImageRecord make_record(const WorldConfig& cfg, const std::string& id) {
  ImageRecord r;
  r.id = id;
  r.width = cfg.image_width;
  r.height = cfg.image_height;
  r.view1_ref = "sim://" + id + "/v1";
  r.view2_ref = "sim://" + id + "/v2";
  return r;
}

std::string numbered(const char* prefix, std::size_t i, int width = 4) {
  std::string n = std::to_string(i);
  if (static_cast<int>(n.size()) < width) n.insert(0, static_cast<std::size_t>(width) - n.size(), '0');
  return prefix + n;
}

SimImage isolated_image(const WorldConfig& cfg, const std::string& id, std::uint64_t seed) {
  Sampler s(seed);
  SimImage img{make_record(cfg, id), {}};
  const int n = object_count(cfg, s);
  for (int i = 0; i < n; ++i) img.objects.push_back(sample_object(cfg, s));
  return img;
}

std::vector<SimImage> sequence_images(const WorldConfig& cfg, int seq) {
  const auto& layout = *cfg.sequences;
  Sampler s(derive_seed(cfg.seed, {kSequence, static_cast<std::uint64_t>(seq)}));
  std::vector<SimObject> objects;
  const int n = object_count(cfg, s);
  for (int i = 0; i < n; ++i) objects.push_back(sample_object(cfg, s));

  std::vector<SimImage> out;
  const auto seq_id = numbered("seq_", static_cast<std::size_t>(seq), 3);
  for (int f = 0; f < layout.length; ++f) {
    if (f > 0) {
      for (auto& o : objects) {
        const double w = o.box.width();
        const double dx = layout.jitter * s.normal();
        const double x1 = std::clamp(o.box.x1 + dx, 0.0, cfg.image_width - w - 1.0);
        o.box.x1 = x1;
        o.box.x2 = x1 + w;
      }
    }
    auto rec = make_record(cfg, seq_id + "_" + numbered("", static_cast<std::size_t>(f)));
    rec.sequence_id = seq_id;
    rec.frame_index = f;
    out.push_back({rec, objects});
  }
  return out;
}

json shape_to_json(const CategoryShape& s) {
  return json{{"fraction", s.fraction},
              {"height_log_mean", s.height_log_mean},
              {"height_log_sigma", s.height_log_sigma},
              {"aspect", s.aspect}};
}

json sim_image_to_json(const SimImage& img) {
  json j;
  j["id"] = img.record.id;
  if (img.record.sequence_id) j["sequence_id"] = *img.record.sequence_id;
  if (img.record.frame_index) j["frame_index"] = *img.record.frame_index;
  j["objects"] = json::array();
  for (const auto& o : img.objects) {
    j["objects"].push_back(json{{"category", o.category},
                                {"bbox", bbox_to_json(o.box)},
                                {"latent", o.latent},
                                {"difficulty", o.difficulty}});
  }
  return j;
}

SimImage parse_sim_image(const WorldConfig& cfg, const json& j, const std::string& path) {
  SimImage img{make_record(cfg, require_string(j, "id", path)), {}};
  if (const auto* s = json_util::optional(j, "sequence_id")) img.record.sequence_id = string(*s, join(path, "sequence_id"));
  if (const auto* f = json_util::optional(j, "frame_index"))
    img.record.frame_index = static_cast<int>(integer(*f, join(path, "frame_index")));
  const auto op = join(path, "objects");
  const auto& objs = array(require(j, "objects", path), op);
  for (std::size_t i = 0; i < objs.size(); ++i) {
    const auto p = index(op, i);
    SimObject o;
    o.category = require_string(objs[i], "category", p);
    o.box = bbox(require(objs[i], "bbox", p), join(p, "bbox"));
    const auto& lat = require(objs[i], "latent", p);
    const auto& dif = require(objs[i], "difficulty", p);
    if (!lat.is_array() || lat.size() != 2 || !dif.is_array() || dif.size() != 2)
      throw ParseError("expected two views of latent/difficulty at " + p);
    o.latent = {number(lat[0], join(p, "latent")), number(lat[1], join(p, "latent"))};
    o.difficulty = {number(dif[0], join(p, "difficulty")), number(dif[1], join(p, "difficulty"))};
    img.objects.push_back(o);
  }
  return img;
}

}  // namespace

// ---------------------------------------------------------------------------
// World

void WorldConfig::validate() const {
  if (!(rho >= -1.0 && rho <= 1.0)) throw ValidationError("world: rho must lie in [-1,1]");
  if (categories.empty()) throw ValidationError("world: at least one category required");
  for (const auto& [c, s] : categories)
    if (s.fraction <= 0 || s.aspect <= 0 || s.height_log_sigma < 0)
      throw ValidationError("world: invalid shape for category '" + c + "'");
  if (mean_objects < 1) throw ValidationError("world: mean_objects must be >= 1");
  if (image_width < 64 || image_height < 32) throw ValidationError("world: image too small");
  if (sequences && (sequences->length < 1 || sequences->num_sequences < 1))
    throw ValidationError("world: sequence length and count must be >= 1");
  if (!sequences && num_images < 1) throw ValidationError("world: num_images must be >= 1");
}

ViewTransform WorldConfig::view2_transform() const {
  ViewTransform t;
  t.kind = view2_kind;
  if (view2_kind == TransformKind::HorizontalMirror) t.image_width = image_width;
  return t;
}

World::World(WorldConfig config, std::vector<SimImage> train, std::vector<SimImage> test)
    : config_(std::move(config)), train_(std::move(train)), test_(std::move(test)) {
  for (std::size_t i = 0; i < train_.size(); ++i) index_.emplace(train_[i].record.id, i);
  for (std::size_t i = 0; i < test_.size(); ++i) {
    if (!index_.emplace(test_[i].record.id, train_.size() + i).second)
      throw ValidationError("world: duplicate image id '" + test_[i].record.id + "'");
  }
}

const SimImage* World::find(const ImageId& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return nullptr;
  return it->second < train_.size() ? &train_[it->second] : &test_[it->second - train_.size()];
}

BoundingBox World::box_in_view(const SimObject& obj, int view) const {
  return view == 2 ? transform_box(obj.box, view2_transform()) : obj.box;
}

namespace {

ViewPairedDataset to_dataset(const std::vector<SimImage>& images, const ViewTransform& t) {
  ViewPairedDataset d;
  d.view2_transform = t;
  for (const auto& img : images) {
    d.images.push_back(img.record);
    auto& labels = d.labels[img.record.id];
    for (const auto& o : img.objects) labels.push_back({o.box, o.category, LabelSource::Human, std::nullopt});
  }
  return d;
}

}  // namespace

ViewPairedDataset World::dataset() const { return to_dataset(train_, view2_transform()); }
ViewPairedDataset World::test_dataset() const { return to_dataset(test_, view2_transform()); }
GroundTruthSet World::test_ground_truth() const { return test_dataset().labels; }
GroundTruthSet World::train_ground_truth() const { return dataset().labels; }

World generate_world(const WorldConfig& cfg) {
  cfg.validate();
  std::vector<SimImage> train;
  if (cfg.sequences) {
    for (int s = 0; s < cfg.sequences->num_sequences; ++s) {
      auto frames = sequence_images(cfg, s);
      train.insert(train.end(), frames.begin(), frames.end());
    }
  } else {
    for (std::size_t i = 0; i < cfg.num_images; ++i)
      train.push_back(isolated_image(cfg, numbered("img_", i), derive_seed(cfg.seed, {kTrainImage, i})));
  }
  std::vector<SimImage> test;
  for (std::size_t i = 0; i < cfg.num_test_images; ++i)
    test.push_back(isolated_image(cfg, numbered("test_", i), derive_seed(cfg.seed, {kTestImage, i})));
  return World(cfg, std::move(train), std::move(test));
}

ViewPairedDataset split_labeled(const World& world, double percent, std::uint64_t seed) {
  if (!(percent > 0 && percent <= 100)) throw ValidationError("labeled percent must lie in (0,100]");
  auto data = world.dataset();
  const std::size_t total = data.images.size();
  auto keep = static_cast<std::size_t>(std::llround(percent / 100.0 * static_cast<double>(total)));
  keep = std::clamp<std::size_t>(keep, 1, total);

  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, {kSplit}));
  std::shuffle(order.begin(), order.end(), rng);

  GroundTruthSet labels;
  for (std::size_t i = 0; i < keep; ++i) {
    const auto& id = data.images[order[i]].id;
    labels[id] = data.labels.at(id);
  }
  data.labels = std::move(labels);
  return data;
}

json world_config_to_json(const WorldConfig& cfg) {
  json j;
  j["num_images"] = cfg.num_images;
  j["num_test_images"] = cfg.num_test_images;
  j["mean_objects"] = cfg.mean_objects;
  json cats = json::object();
  for (const auto& [c, s] : cfg.categories) cats[c] = shape_to_json(s);
  j["categories"] = cats;
  j["rho"] = cfg.rho;
  j["view2_difficulty_offset"] = cfg.view2_difficulty_offset;
  j["view2_kind"] = to_string(cfg.view2_kind);
  if (cfg.sequences)
    j["sequences"] = json{{"num_sequences", cfg.sequences->num_sequences},
                          {"length", cfg.sequences->length},
                          {"jitter", cfg.sequences->jitter}};
  j["image_width"] = cfg.image_width;
  j["image_height"] = cfg.image_height;
  j["seed"] = cfg.seed;
  return j;
}

WorldConfig parse_world_config(const json& j, const WorldConfig& defaults) {
  WorldConfig cfg = defaults;
  object(j, "world");
  if (const auto* v = json_util::optional(j, "num_images")) cfg.num_images = static_cast<std::size_t>(integer(*v, "world.num_images"));
  if (const auto* v = json_util::optional(j, "num_test_images"))
    cfg.num_test_images = static_cast<std::size_t>(integer(*v, "world.num_test_images"));
  if (const auto* v = json_util::optional(j, "mean_objects")) cfg.mean_objects = number(*v, "world.mean_objects");
  if (const auto* v = json_util::optional(j, "categories")) {
    cfg.categories.clear();
    for (const auto& [c, s] : object(*v, "world.categories").items()) {
      const auto p = "world.categories." + c;
      cfg.categories[c] = {require_number(s, "fraction", p), require_number(s, "height_log_mean", p),
                           require_number(s, "height_log_sigma", p), require_number(s, "aspect", p)};
    }
  }
  if (const auto* v = json_util::optional(j, "rho")) cfg.rho = number(*v, "world.rho");
  if (const auto* v = json_util::optional(j, "view2_difficulty_offset"))
    cfg.view2_difficulty_offset = number(*v, "world.view2_difficulty_offset");
  if (const auto* v = json_util::optional(j, "view2_kind")) cfg.view2_kind = transform_kind_from_string(string(*v, "world.view2_kind"));
  if (const auto* v = json_util::optional(j, "sequences")) {
    SequenceLayout s;
    s.num_sequences = static_cast<int>(require_integer(*v, "num_sequences", "world.sequences"));
    s.length = static_cast<int>(require_integer(*v, "length", "world.sequences"));
    if (const auto* jt = json_util::optional(*v, "jitter")) s.jitter = number(*jt, "world.sequences.jitter");
    cfg.sequences = s;
  }
  if (const auto* v = json_util::optional(j, "image_width")) cfg.image_width = static_cast<int>(integer(*v, "world.image_width"));
  if (const auto* v = json_util::optional(j, "image_height")) cfg.image_height = static_cast<int>(integer(*v, "world.image_height"));
  if (const auto* v = json_util::optional(j, "seed")) cfg.seed = v->get<std::uint64_t>();
  cfg.validate();
  return cfg;
}

json world_to_json(const World& world) {
  json j;
  j["config"] = world_config_to_json(world.config());
  j["train"] = json::array();
  for (const auto& img : world.train_images()) j["train"].push_back(sim_image_to_json(img));
  j["test"] = json::array();
  for (const auto& img : world.test_images()) j["test"].push_back(sim_image_to_json(img));
  return j;
}

World parse_world(const json& j) {
  const auto cfg = parse_world_config(require(j, "config", ""));
  std::vector<SimImage> train, test;
  const auto& tr = array(require(j, "train", ""), "train");
  for (std::size_t i = 0; i < tr.size(); ++i) train.push_back(parse_sim_image(cfg, tr[i], index("train", i)));
  const auto& te = array(require(j, "test", ""), "test");
  for (std::size_t i = 0; i < te.size(); ++i) test.push_back(parse_sim_image(cfg, te[i], index("test", i)));
  return World(cfg, std::move(train), std::move(test));
}

void save_truth(const World& world, const std::filesystem::path& file) { write_file(file, world_to_json(world)); }

World load_truth(const std::filesystem::path& file) {
  try {
    return parse_world(read_file(file));
  } catch (const ParseError& e) {
    throw ParseError(file.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Detector model

void SimDetectorParams::validate() const {
  if (!(s0 > 0 && s0 < s_max && s_max < 1)) throw ValidationError("sim params: need 0 < s0 < s_max < 1");
  if (lambda <= 0 || gain <= 0) throw ValidationError("sim params: lambda and gain must be positive");
  if (beta < 0 || gamma < 0) throw ValidationError("sim params: beta and gamma must be non-negative");
  if (sigma_conf < 0 || sigma_loc < 0 || mu_fp < 0) throw ValidationError("sim params: noise terms must be non-negative");
  if (!(fp_conf_low <= fp_conf_high)) throw ValidationError("sim params: fp confidence range inverted");
}

json params_to_json(const SimDetectorParams& p) {
  return json{{"s0", p.s0},
              {"s_max", p.s_max},
              {"lambda", p.lambda},
              {"gain", p.gain},
              {"beta", p.beta},
              {"gamma", p.gamma},
              {"sigma_conf", p.sigma_conf},
              {"sigma_loc", p.sigma_loc},
              {"mu_fp", p.mu_fp},
              {"fp_conf_low", p.fp_conf_low},
              {"fp_conf_high", p.fp_conf_high},
              {"iou_thresholds", p.iou_thresholds}};
}

SimDetectorParams parse_params(const json& j, const SimDetectorParams& defaults) {
  SimDetectorParams p = defaults;
  object(j, "sim");
  auto num = [&](const char* key, double& dst) {
    if (const auto* v = json_util::optional(j, key)) dst = number(*v, join("sim", key));
  };
  num("s0", p.s0);
  num("s_max", p.s_max);
  num("lambda", p.lambda);
  num("gain", p.gain);
  num("beta", p.beta);
  num("gamma", p.gamma);
  num("sigma_conf", p.sigma_conf);
  num("sigma_loc", p.sigma_loc);
  num("mu_fp", p.mu_fp);
  num("fp_conf_low", p.fp_conf_low);
  num("fp_conf_high", p.fp_conf_high);
  if (const auto* v = json_util::optional(j, "iou_thresholds")) {
    p.iou_thresholds.clear();
    for (const auto& [c, t] : object(*v, "sim.iou_thresholds").items()) p.iou_thresholds[c] = number(t, "sim.iou_thresholds." + c);
  }
  p.validate();
  return p;
}

double Evidence::n_eff(const SimDetectorParams& p) const {
  return std::max(0.0, weighted_tp - p.beta * static_cast<double>(fp));
}

double skill_from_evidence(const SimDetectorParams& p, double n_eff) {
  return p.s_max - (p.s_max - p.s0) * std::exp(-p.lambda * std::max(0.0, n_eff));
}

std::map<Category, Evidence> tally_training_boxes(const SimDetectorParams& p, const World& world,
                                                  const TrainRequest& request) {
  std::map<Category, Evidence> ev;
  for (const auto& img : request.images) {
    const auto* truth = world.find(img.id);
    if (!truth) throw BackendError("simulated backend: unknown image '" + img.id + "'");

    std::map<Category, std::vector<std::size_t>> by_cat;
    for (std::size_t i = 0; i < img.labels.size(); ++i) by_cat[img.labels[i].category].push_back(i);
    for (const auto& [cat, idx] : by_cat) {
      auto& e = ev[cat];
      std::vector<DetectionRecord> boxes;
      for (auto i : idx) boxes.push_back({img.labels[i].box, cat, 1.0});
      std::vector<BoundingBox> gt;
      std::vector<const SimObject*> gt_obj;
      for (const auto& o : truth->objects) {
        if (o.category != cat) continue;
        gt.push_back(world.box_in_view(o, request.view));
        gt_obj.push_back(&o);
      }
      auto it = p.iou_thresholds.find(cat);
      const double thr = it == p.iou_thresholds.end() ? 0.5 : it->second;
      const auto m = eval::match_detections(boxes, gt, {}, thr);
      for (std::size_t k = 0; k < boxes.size(); ++k) {
        if (m.detections[k] == eval::DetOutcome::TruePositive) {
          const auto* o = gt_obj[static_cast<std::size_t>(m.matched_gt[k])];
          const double d = o->difficulty[static_cast<std::size_t>(request.view - 1)];
          e.weighted_tp += std::pow(d / 0.5, p.gamma);
          ++e.tp;
        } else {
          ++e.fp;
        }
      }
    }
  }
  return ev;
}

SkillTable sim_train(const SimDetectorParams& p, const World& world, const TrainRequest& request) {
  const auto ev = tally_training_boxes(p, world, request);
  SkillTable skill;
  for (const auto& [cat, shape] : world.config().categories) {
    auto it = ev.find(cat);
    skill[cat] = skill_from_evidence(p, it == ev.end() ? 0.0 : it->second.n_eff(p));
  }
  return skill;
}

ImageDetections sim_detect(const SimDetectorParams& p, const SkillTable& skill, const World& world, int view,
                           const std::vector<ImageId>& ids, std::uint64_t seed) {
  if (view != 1 && view != 2) throw ValidationError("sim_detect: view must be 1 or 2");
  const auto& cfg = world.config();
  auto skill_of = [&](const Category& c) {
    auto it = skill.find(c);
    return it == skill.end() ? p.s0 : it->second;
  };

  ImageDetections out;
  for (const auto& id : ids) {
    const auto* img = world.find(id);
    if (!img) throw BackendError("simulated backend: unknown image '" + id + "'");
    auto& dets = out[id];

    // Fixed draw count per object keeps outcomes coupled across skill levels.
    Sampler s(derive_seed(seed, {hash_string(id)}));
    for (const auto& o : img->objects) {
      const double u = s.uniform();
      const double e_conf = s.normal();
      const std::array<double, 4> jitter{s.normal(), s.normal(), s.normal(), s.normal()};
      const double sk = skill_of(o.category);
      const double prob = logistic(p.gain * (sk - o.difficulty[static_cast<std::size_t>(view - 1)]));
      if (u >= prob) continue;

      auto box = world.box_in_view(o, view);
      const double scale = p.sigma_loc * (1.0 - sk) * box.height();
      // Clipped to the image, like any real detector output.
      box = {std::max(0.0, box.x1 + scale * jitter[0]), std::max(0.0, box.y1 + scale * jitter[1]),
             std::min<double>(cfg.image_width, box.x2 + scale * jitter[2]),
             std::min<double>(cfg.image_height, box.y2 + scale * jitter[3])};
      if (!box.valid()) continue;
      dets.push_back({box, o.category, std::clamp(prob + p.sigma_conf * e_conf, 0.0, 1.0)});
    }

    for (const auto& [cat, shape] : cfg.categories) {
      Sampler fs(derive_seed(seed, {hash_string(id), kSpurious, hash_string(cat)}));
      double total = 0;
      for (const auto& [c, sh] : cfg.categories) total += sh.fraction;
      const double mean = p.mu_fp * (1.0 - skill_of(cat)) * shape.fraction / total;
      const int count = poisson_quantile(fs.uniform(), mean);
      for (int i = 0; i < count; ++i) {
        const auto box = sample_box(cfg, shape, fs);
        dets.push_back({box, cat, fs.uniform(p.fp_conf_low, p.fp_conf_high)});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backend

SimulatedBackend::SimulatedBackend(const World& world, SimDetectorParams params, std::uint64_t seed)
    : world_(world), params_(std::move(params)), seed_(seed) {
  params_.validate();
}

ModelHandle SimulatedBackend::train(const TrainRequest& request) {
  train_log_.push_back(request);
  const auto skill = sim_train(params_, world_, request);
  ModelHandle h;
  h.backend = kind();
  h.view = request.view;
  h.cycle = request.cycle;
  h.token = "sim-v" + std::to_string(request.view) + "-c" + std::to_string(request.cycle);
  h.payload = json(skill).dump();
  return h;
}

SkillTable SimulatedBackend::skill_of(const ModelHandle& model) {
  if (model.backend != "simulated") throw BackendError("model handle from backend '" + model.backend + "' used with simulated backend");
  try {
    return json::parse(model.payload).get<SkillTable>();
  } catch (const json::exception& e) {
    throw BackendError(std::string("corrupt simulated model payload: ") + e.what());
  }
}

ImageDetections SimulatedBackend::detect(const ModelHandle& model, const DetectRequest& request) {
  std::vector<ImageId> ids;
  ids.reserve(request.images.size());
  for (const auto& img : request.images) ids.push_back(img.id);
  return sim_detect(params_, skill_of(model), world_, request.view, ids, seed_);
}

}  // namespace cotrain::sim
