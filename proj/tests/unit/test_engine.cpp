#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "cotrain/engine.hpp"
#include "cotrain/error.hpp"
#include "cotrain/experiment.hpp"
#include "cotrain/io.hpp"
#include "cotrain/simdet.hpp"
#include "doctest.h"

using namespace cotrain;
namespace fs = std::filesystem;

namespace {

DetectionRecord det(double conf, const Category& c = kVehicle, BoundingBox b = {10, 20, 110, 220}) {
  return {b, c, conf};
}

PseudoLabelSet set_of(std::initializer_list<std::pair<const ImageId, std::vector<DetectionRecord>>> e, int view = 1) {
  PseudoLabelSet s;
  s.producing_view = view;
  s.entries = e;
  return s;
}

ViewPairedDataset sequence_data(const std::vector<int>& frames) {
  ViewPairedDataset d;
  for (int f : frames) {
    ImageRecord r;
    r.id = "f" + std::to_string(100 + f);
    r.width = 1240;
    r.height = 375;
    r.sequence_id = "s0";
    r.frame_index = f;
    r.view1_ref = r.id;
    d.images.push_back(r);
  }
  return d;
}

PseudoLabelSet candidates_for(const ViewPairedDataset& d) {
  PseudoLabelSet s;
  for (const auto& img : d.images) s.entries[img.id] = {det(0.9)};
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cotrain_engine_" + name);
  fs::remove_all(p);
  return p;
}

// Backend returning fixed detections per view; records every request.
class ScriptedBackend : public DetectorBackend {
 public:
  std::map<int, ImageDetections> outputs;
  std::vector<TrainRequest> trained;
  std::vector<DetectRequest> detected;

  std::string kind() const override { return "scripted"; }
  ModelHandle train(const TrainRequest& r) override {
    trained.push_back(r);
    return {"scripted", "m" + std::to_string(trained.size()), "", r.view, r.cycle, ""};
  }
  ImageDetections detect(const ModelHandle& m, const DetectRequest& r) override {
    detected.push_back(r);
    ImageDetections out;
    for (const auto& img : r.images) {
      auto it = outputs[m.view].find(img.id);
      if (it != outputs[m.view].end()) out[img.id] = it->second;
    }
    return out;
  }
};

sim::WorldConfig small_world(std::uint64_t seed, double rho = 0.2) {
  sim::WorldConfig w;
  w.num_images = 80;
  w.num_test_images = 40;
  w.seed = seed;
  w.rho = rho;
  return w;
}

}  // namespace

// ---------------------------------------------------------------------------
// Selection

TEST_CASE("rand_select without sequences") {
  std::set<FramePosition> hist;
  std::mt19937_64 rng(1);
  const auto c = set_of({{"a", {det(0.9)}}, {"b", {det(0.8)}}, {"c", {det(0.85)}}});
  ViewPairedDataset none;
  CHECK(rand_select(c, 3, std::nullopt, none, hist, rng) == c);
  CHECK(rand_select(c, 10, std::nullopt, none, hist, rng) == c);
  const auto two = rand_select(c, 2, std::nullopt, none, hist, rng);
  CHECK(two.num_images() == 2);
  for (const auto& [id, v] : two.entries) CHECK(c.entries.at(id) == v);
  CHECK_THROWS_AS(rand_select(c, 0, std::nullopt, none, hist, rng), ValidationError);
}

TEST_CASE("rand_select is uniform over candidates") {
  PseudoLabelSet c;
  for (int i = 0; i < 10; ++i) c.entries["i" + std::to_string(i)] = {det(0.9)};
  std::map<ImageId, int> counts;
  std::mt19937_64 rng(99);
  ViewPairedDataset none;
  std::set<FramePosition> hist;
  const int trials = 20000;
  for (int t = 0; t < trials; ++t)
    for (const auto& [id, v] : rand_select(c, 3, std::nullopt, none, hist, rng).entries) ++counts[id];
  // Expected 6000 each; binomial sd ~ 65.
  for (const auto& [id, n] : counts) CHECK(std::abs(n - 6000) < 6 * 65);
}

TEST_CASE("rand_select with frame-distance constraints") {
  SUBCASE("intra-cycle distance") {
    const auto d = sequence_data({0, 1, 2, 3, 10});
    std::set<FramePosition> hist;
    std::mt19937_64 rng(4);
    const auto out = rand_select(candidates_for(d), 2, SeqConfig{5, 0}, d, hist, rng);
    REQUIRE(out.num_images() == 2);
    CHECK(out.contains("f110"));
    const bool first_ok = out.contains("f100") || out.contains("f101") || out.contains("f102") || out.contains("f103");
    CHECK(first_ok);
    CHECK(hist.size() == 2);
  }
  SUBCASE("distance to history") {
    const auto d = sequence_data({12, 18});
    std::set<FramePosition> hist{{"s0", 7}};
    std::mt19937_64 rng(4);
    const auto out = rand_select(candidates_for(d), 5, SeqConfig{0, 10}, d, hist, rng);
    CHECK_FALSE(out.contains("f112"));
    CHECK(out.contains("f118"));
    CHECK(hist.count({"s0", 18}) == 1);
  }
}

TEST_CASE("select_top_m") {
  const auto s = set_of({{"A", {det(0.9)}}, {"B", {det(0.7)}}, {"C", {det(0.8)}}});
  CHECK(select_top_m(s, kUnbounded) == s);
  CHECK(select_top_m(s, 2).image_ids() == std::set<ImageId>{"A", "C"});
  const auto ties = set_of({{"z", {det(0.5)}}, {"m", {det(0.5)}}, {"b", {det(0.5)}}});
  CHECK(select_top_m(ties, 1).image_ids() == std::set<ImageId>{"b"});
}

TEST_CASE("cross_score") {
  ViewPairedDataset d;
  for (const char* id : {"x", "y", "z"}) {
    ImageRecord r;
    r.id = id;
    r.width = 100;
    r.height = 100;
    r.view1_ref = id;
    d.images.push_back(r);
  }
  const auto shared = set_of({{"x", {det(0.9)}}, {"y", {det(0.95)}}, {"z", {det(0.99)}}}, 1);
  const std::map<Category, double> T{{kVehicle, 0.8}, {kPedestrian, 0.8}};
  ScriptedBackend b;
  const ModelHandle receiver{"scripted", "r", "", 2, 1, ""};

  SUBCASE("receiver sees nothing") {
    const auto cs = cross_score(b, receiver, shared, d, T);
    for (const auto& [id, s] : cs.scores) CHECK(s == 0.0);
    CHECK(cs.scores.size() == 3);
  }
  SUBCASE("mean of surviving detections") {
    b.outputs[2]["x"] = {det(0.8), det(1.0), det(0.5)};  // 0.5 is below T
    const auto cs = cross_score(b, receiver, shared, d, T);
    CHECK(cs.scores.at("x") == doctest::Approx(0.9));
    CHECK(cs.receiver_detections.at("x").size() == 2);
  }
  SUBCASE("self-scoring returns the sender's confidences") {
    b.outputs[1] = shared.entries;
    const auto cs = cross_score(b, {"scripted", "s", "", 1, 1, ""}, shared, d, T);
    for (const auto& [id, dets] : shared.entries) CHECK(cs.scores.at(id) == image_confidence(dets));
  }
}

TEST_CASE("select_bottom_n") {
  const auto shared = set_of({{"A", {det(0.9)}}, {"B", {det(0.95)}}, {"C", {det(0.99)}}}, 1);
  const std::map<ImageId, double> scores{{"A", 0.0}, {"B", 0.9}, {"C", 0.5}};
  const auto two = select_bottom_n(scores, shared, 2, {}, 2);
  CHECK(two.image_ids() == std::set<ImageId>{"A", "C"});
  CHECK(two.producing_view == 2);
  CHECK(two.entries.at("A") == shared.entries.at("A"));  // sender's labels
  CHECK(select_bottom_n(scores, shared, 10, {}, 2).num_images() == 3);

  const ViewTransform m{TransformKind::HorizontalMirror, 1240.0};
  const auto mirrored = select_bottom_n(scores, shared, 3, m, 2);
  for (const auto& [id, dets] : mirrored.entries)
    CHECK(dets[0].box == transform_box(shared.entries.at(id)[0].box, m));

  CHECK_THROWS_AS(select_bottom_n({{"A", 0.0}}, shared, 2, {}, 2), ValidationError);
}

TEST_CASE("fuse") {
  const auto p1 = std::vector<DetectionRecord>{det(0.81)};
  const auto p2 = std::vector<DetectionRecord>{det(0.82)};
  const auto p3 = std::vector<DetectionRecord>{det(0.83)};
  const auto p4 = std::vector<DetectionRecord>{det(0.84)};
  const auto x = set_of({{"A", p1}, {"B", p2}});
  const PseudoLabelSet empty;
  CHECK(fuse(empty, x).entries == x.entries);
  CHECK(fuse(x, empty).entries == x.entries);
  CHECK(fuse(x, x) == x);
  const auto f = fuse(x, set_of({{"B", p3}, {"C", p4}}));
  CHECK(f.entries == ImageDetections{{"A", p1}, {"B", p3}, {"C", p4}});
  CHECK_THROWS_AS(fuse(x, set_of({}, 2)), ValidationError);
}

TEST_CASE("should_stop") {
  const StopConfig defaults;
  SUBCASE("before K_min") {
    StopTracker t{7, 50.0};
    CHECK_FALSE(should_stop(defaults, 50.0, 10, t).first);
  }
  SUBCASE("at K_max regardless of counter") {
    StopTracker t{0, 10.0};
    CHECK(should_stop(defaults, 90.0, 30, t).first);
  }
  SUBCASE("stream of small changes converges at K_min") {
    // Successive differences 1.0, 1.5, 0.5, 1.9, 1.2 are all below 2.0.
    const std::vector<double> metrics{50.0, 51.0, 52.5, 52.0, 53.9, 55.1};
    StopTracker t;
    bool done = false;
    for (std::size_t i = 0; i < metrics.size(); ++i) {
      const int k = defaults.k_min - static_cast<int>(metrics.size()) + 1 + static_cast<int>(i);
      std::tie(done, t) = should_stop(defaults, metrics[i], k, t);
    }
    CHECK(t.counter == 5);
    CHECK(done);
  }
  SUBCASE("a large change resets the counter") {
    StopTracker t{4, 50.0};
    auto [done, next] = should_stop(defaults, 60.0, 25, t);
    CHECK_FALSE(done);
    CHECK(next.counter == 0);
  }
  SUBCASE("first metric is never compared") {
    auto [done, next] = should_stop(defaults, 50.0, 1, StopTracker{});
    CHECK(next.counter == 0);
    CHECK(next.previous_metric == 50.0);
  }
  SUBCASE("set overload needs k >= 1") {
    CHECK_THROWS_AS(should_stop(defaults, PseudoLabelSet{}, PseudoLabelSet{}, 0, StopTracker{}), ValidationError);
  }
}

// ---------------------------------------------------------------------------
// Full loop on the simulator

TEST_CASE("initialize on the default-style world") {
  const auto world = sim::generate_world(small_world(0));
  const auto data = sim::split_labeled(world, 10, 0);
  sim::SimulatedBackend backend(world, {}, experiment::detection_seed(world));
  const auto st = initialize(CoTrainConfig{}, data, backend);
  CHECK(st.k == 0);
  CHECK(st.accumulated1.entries.empty());
  CHECK(st.accumulated2.entries.empty());
  CHECK(st.fresh1.num_images() > 0);
  CHECK(st.fresh2.num_images() > 0);
  const auto pool = data.unlabeled_ids();
  const std::set<ImageId> unl(pool.begin(), pool.end());
  for (const auto& id : st.fresh1.image_ids()) CHECK(unl.count(id));
  for (const auto& id : st.fresh2.image_ids()) CHECK(unl.count(id));
  for (const auto& [id, dets] : st.fresh1.entries)
    for (const auto& d : dets) CHECK(d.confidence >= 0.8);
}

TEST_CASE("identical views yield identical fresh sets") {
  auto w = small_world(3, 1.0);
  const auto world = sim::generate_world(w);
  const auto data = sim::split_labeled(world, 10, 3);
  sim::SimulatedBackend backend(world, {}, experiment::detection_seed(world));
  const auto st = initialize(CoTrainConfig{}, data, backend);
  CHECK(st.fresh1.image_ids() == st.fresh2.image_ids());
  CHECK(st.fresh1.entries == st.fresh2.entries);
}

TEST_CASE("empty unlabeled pool stops at K_min with nothing") {
  const auto world = sim::generate_world(small_world(1));
  const auto data = sim::split_labeled(world, 100, 1);
  sim::SimulatedBackend backend(world, {}, 5);
  const auto res = run(CoTrainConfig{}, data, backend);
  CHECK(res.finished);
  CHECK(res.state.k == CoTrainConfig{}.stop.k_min);
  CHECK(res.labels.entries.empty());
}

TEST_CASE("run: bounds, containment, provenance") {
  const auto world = sim::generate_world(small_world(0));
  const auto data = sim::split_labeled(world, 10, 0);
  sim::SimulatedBackend backend(world, {}, experiment::detection_seed(world));
  CoTrainConfig cfg;
  cfg.sample_size = 30;
  cfg.keep_lowest = 8;
  cfg.share_top = 20;

  const auto pool = data.unlabeled_ids();
  const std::set<ImageId> unl(pool.begin(), pool.end());
  CycleState before;
  bool have_before = false;
  RunOptions opts;
  int cycles = 0;
  opts.on_cycle = [&](const CycleState& st, const CycleExchange& ex) {
    ++cycles;
    CHECK(ex.down1.num_images() <= cfg.keep_lowest);
    CHECK(ex.down2.num_images() <= cfg.keep_lowest);
    CHECK(ex.up1.num_images() <= cfg.share_top);
    CHECK(ex.up1.num_images() <= cfg.sample_size);
    for (const auto& id : ex.down1.image_ids()) CHECK(ex.up2.contains(id));
    for (const auto& id : ex.down2.image_ids()) CHECK(ex.up1.contains(id));
    for (const auto& id : st.accumulated1.image_ids()) CHECK(unl.count(id));
    for (const auto& id : st.accumulated2.image_ids()) CHECK(unl.count(id));
    if (have_before) {
      for (const auto& id : ex.up1.image_ids()) CHECK(before.fresh1.contains(id));
      for (const auto& id : ex.up2.image_ids()) CHECK(before.fresh2.contains(id));
    }
    CHECK(st.log.size() == static_cast<std::size_t>(st.k));
    before = st;
    have_before = true;
  };
  // The first cycle's up-sets come from the initial fresh sets.
  before = initialize(cfg, data, backend);
  have_before = true;
  const auto res = run(cfg, data, backend, opts);
  CHECK(res.finished);
  CHECK(res.state.k >= cfg.stop.k_min);
  CHECK(res.state.k <= cfg.stop.k_max);
  CHECK(cycles == res.state.k);
  CHECK(res.labels == res.state.fresh1);

  // No pseudo-labeled image is ever offered for negative mining.
  for (const auto& req : backend.train_log())
    for (const auto& img : req.images)
      if (img.mine_negatives) CHECK(data.is_labeled(img.id));
}

TEST_CASE("receiver-label switch attaches the receiver's detections") {
  const auto world = sim::generate_world(small_world(2));
  const auto data = sim::split_labeled(world, 10, 2);
  sim::SimulatedBackend backend(world, {}, experiment::detection_seed(world));
  CoTrainConfig cfg;
  cfg.receiver_labels = true;
  cfg.stop = {2, 2, 0, 2.0};
  RunOptions opts;
  opts.on_cycle = [&](const CycleState&, const CycleExchange& ex) {
    for (const auto& [id, dets] : ex.down1.entries) {
      CHECK_FALSE(dets.empty());
      CHECK(ex.up2.contains(id));
    }
  };
  CHECK(run(cfg, data, backend, opts).finished);
}

TEST_CASE("checkpointed runs are deterministic and resumable") {
  const auto world = sim::generate_world(small_world(4));
  const auto data = sim::split_labeled(world, 10, 4);
  CoTrainConfig cfg;
  cfg.rng_seed = 4;
  cfg.sample_size = 40;
  cfg.keep_lowest = 10;
  const auto seed = experiment::detection_seed(world);

  const auto a = scratch("det_a"), b = scratch("det_b"), c = scratch("det_c");
  sim::SimulatedBackend ba(world, {}, seed), bb(world, {}, seed), bc(world, {}, seed);
  const auto ra = run(cfg, data, ba, {a, {}, std::nullopt, {}});
  const auto rb = run(cfg, data, bb, {b, {}, std::nullopt, {}});
  REQUIRE(ra.finished);
  CHECK(ra.labels == rb.labels);
  CHECK(slurp(a / "dpl.json") == slurp(b / "dpl.json"));
  for (int k = 0; k <= ra.state.k; ++k)
    for (const char* f : {"state.json", "dpl1.json", "dpl2.json"})
      CHECK(slurp(cycle_dir(a, k) / f) == slurp(cycle_dir(b, k) / f));

  // Halt after cycle 7, then resume in a fresh process-equivalent.
  const auto half = run(cfg, data, bc, {c, {}, 7, {}});
  CHECK_FALSE(half.finished);
  CHECK(half.state.k == 7);
  CHECK(checkpoint_cycles(c).back() == 7);
  sim::SimulatedBackend bc2(world, {}, seed);
  int first_cycle = -1;
  RunOptions resume{c, {}, std::nullopt, [&](const CycleState& st, const CycleExchange&) {
                      if (first_cycle < 0) first_cycle = st.k;
                    }};
  const auto rest = run(cfg, data, bc2, resume);
  CHECK(first_cycle == 8);
  REQUIRE(rest.finished);
  CHECK(rest.labels == ra.labels);
  CHECK(slurp(c / "dpl.json") == slurp(a / "dpl.json"));
  CHECK(slurp(cycle_dir(c, ra.state.k) / "state.json") == slurp(cycle_dir(a, ra.state.k) / "state.json"));

  // log.csv: header plus one row per cycle, no duplicates after resume.
  std::ifstream log(c / "log.csv");
  std::string line;
  std::getline(log, line);
  CHECK(line == "k,stop_map,n_img_1,n_box_1,n_img_2,n_box_2,n_up,n_down,seconds");
  int rows = 0;
  while (std::getline(log, line))
    if (!line.empty()) CHECK(std::stoi(line) == ++rows);
  CHECK(rows == ra.state.k);

  // A different config cannot reuse the directory.
  auto other = cfg;
  other.keep_lowest = 11;
  sim::SimulatedBackend bd(world, {}, seed);
  CHECK_THROWS_AS(run(other, data, bd, {c, {}, std::nullopt, {}}), ValidationError);
}

TEST_CASE("sequence constraints hold across a run") {
  auto w = small_world(6);
  w.sequences = sim::SequenceLayout{4, 20, 3.0};
  const auto world = sim::generate_world(w);
  const auto data = sim::split_labeled(world, 10, 6);
  sim::SimulatedBackend backend(world, {}, experiment::detection_seed(world));
  CoTrainConfig cfg;
  cfg.seq = SeqConfig{3, 4};
  cfg.stop = {6, 6, 0, 2.0};
  std::set<FramePosition> prior1;
  RunOptions opts;
  opts.on_cycle = [&](const CycleState& st, const CycleExchange& ex) {
    std::vector<FramePosition> chosen;
    for (const auto& id : ex.up1.image_ids()) {
      const auto& img = data.at(id);
      chosen.push_back({*img.sequence_id, *img.frame_index});
    }
    for (std::size_t i = 0; i < chosen.size(); ++i) {
      for (std::size_t j = i + 1; j < chosen.size(); ++j)
        if (chosen[i].first == chosen[j].first) CHECK(std::abs(chosen[i].second - chosen[j].second) >= 3);
      for (const auto& h : prior1)
        if (h.first == chosen[i].first) CHECK(std::abs(h.second - chosen[i].second) >= 4);
    }
    prior1 = st.history.view1;
  };
  CHECK(run(cfg, data, backend, opts).finished);
}

TEST_CASE("train_final") {
  const auto world = sim::generate_world(small_world(0));
  const auto data = sim::split_labeled(world, 10, 0);
  sim::SimulatedBackend backend(world, {}, 1);

  const auto lb = sim::SimulatedBackend::skill_of(train_final(backend, data, PseudoLabelSet{}));
  CHECK(backend.train_log().back().cycle == -1);
  CHECK(backend.train_log().back().view == 1);

  // Accurate pseudo-labels: the truth of a few unlabeled images.
  PseudoLabelSet good;
  for (const auto& id : data.unlabeled_ids()) {
    for (const auto& l : world.dataset().labels.at(id)) good.entries[id].push_back({l.box, l.category, 1.0});
    if (good.num_images() >= 20) break;
  }
  const auto with = sim::SimulatedBackend::skill_of(train_final(backend, data, good));
  CHECK(with.at(kVehicle) > lb.at(kVehicle));
  CHECK(with.at(kPedestrian) > lb.at(kPedestrian));

  ViewPairedDataset none = data;
  none.labels.clear();
  CHECK_THROWS_AS(train_final(backend, none, PseudoLabelSet{}), ValidationError);
  CHECK_NOTHROW(train_final(backend, none, good));
}
