// Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cotrain/engine.hpp"
#include "cotrain/eval.hpp"
#include "cotrain/experiment.hpp"
#include "cotrain/io.hpp"
#include "support/oracle.hpp"

using namespace cotrain;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kOracleTol = 1e-9;
constexpr double kOracleSeconds = 10;
constexpr int kOracleInstances = 1000;
constexpr double kApTol = 1e-12;
constexpr int kPropertyCases = 10000;
constexpr double kPropertySeconds = 30;
constexpr double kBenchmarkSeconds = 300;
constexpr double kBenchmarkLabeledPercent = 5;
constexpr int kBenchmarkSeeds = 10;
constexpr int kRecoverySeedsNeeded = 8;
constexpr double kRecoveryFraction = 0.5;
constexpr int kCorrelationSeedsNeeded = 8;
constexpr double kDriftPoints = 3.0;
constexpr double kAuditTol = 1e-12;

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const std::string& name, bool ok, const std::string& detail) {
  std::printf("%s [%d] %s: %s\n", ok ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// ---------------------------------------------------------------------------

void oracle_equivalence() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1000);
  double worst = 0;
  bool counts_ok = true;
  for (int t = 0; t < kOracleInstances; ++t) {
    const auto in = oracle::random_instance(rng);
    const auto got = eval::evaluate(in.dets, in.gt, {});
    const auto want = oracle::brute_force_evaluate(in.dets, in.gt, {});
    worst = std::max(worst, std::abs(got.map - want.map));
    if (got.categories.size() != want.categories.size()) {
      counts_ok = false;
      continue;
    }
    for (const auto& [c, w] : want.categories) {
      const auto it = got.categories.find(c);
      if (it == got.categories.end()) {
        counts_ok = false;
        continue;
      }
      worst = std::max(worst, std::abs(it->second.ap - w.ap));
      counts_ok &= it->second.num_gt == w.num_gt && it->second.tp == w.tp && it->second.fp == w.fp;
    }
  }
  const double secs = since(t0);
  report(1, "oracle equivalence", worst < kOracleTol && counts_ok && secs < kOracleSeconds,
         fmt("%d instances, max |delta| %.3g (< %.0g), counts %s, %.2f s (< %.0f s)", kOracleInstances, worst,
             kOracleTol, counts_ok ? "equal" : "differ", secs, kOracleSeconds));
}

void ap_hand_cases() {
  const double mixed = eval::average_precision({true, false, true}, 2);
  const double perfect = eval::average_precision({true, true, true}, 3);
  const double empty = eval::average_precision({}, 3);

  GroundTruthSet gt;
  gt["a"] = {{{0, 0, 100, 100}, kVehicle, LabelSource::Human, std::nullopt},
             {{200, 0, 240, 90}, kPedestrian, LabelSource::Human, std::nullopt}};
  ImageDetections same;
  for (const auto& l : gt["a"]) same["a"].push_back({l.box, l.category, 0.9});
  const double perfect_map = eval::evaluate(same, gt, {}).map;
  const double empty_map = eval::evaluate({}, gt, {}).map;

  const bool ok = std::abs(mixed - 28.0 / 33.0) < kApTol && std::abs(perfect - 1.0) < kApTol &&
                  std::abs(empty) < kApTol && std::abs(perfect_map - 100.0) < kApTol && std::abs(empty_map) < kApTol;
  report(2, "AP hand cases", ok,
         fmt("[TP,FP,TP]/2 GT = %.15f (28/33 = %.15f), perfect = %.3f, empty = %.3f, mAP perfect %.3f empty %.3f",
             mixed, 28.0 / 33.0, perfect, empty, perfect_map, empty_map));
}

// ---------------------------------------------------------------------------

PseudoLabelSet random_set(std::mt19937_64& rng, int pool, double presence) {
  std::bernoulli_distribution present(presence);
  std::uniform_int_distribution<int> nbox(0, 3);
  std::uniform_real_distribution<double> coord(0, 500), conf(0.8, 1.0);
  PseudoLabelSet s;
  for (int i = 0; i < pool; ++i) {
    if (!present(rng)) continue;
    auto& v = s.entries["i" + std::to_string(i)];
    for (int b = nbox(rng); b > 0; --b) {
      const double x = coord(rng), y = coord(rng);
      v.push_back({{x, y, x + 10 + coord(rng) / 5, y + 10 + coord(rng) / 5}, b % 2 ? kVehicle : kPedestrian, conf(rng)});
    }
  }
  return s;
}

bool subset(const std::set<ImageId>& a, const std::set<ImageId>& b) {
  return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

struct Suite {
  std::string name;
  int violations = 0;
};

Suite fuse_suite(std::mt19937_64& rng) {
  Suite s{"fuse identity/idempotence/new-wins"};
  std::uniform_int_distribution<int> pool(0, 12);
  for (int t = 0; t < kPropertyCases; ++t) {
    const auto a = random_set(rng, pool(rng), 0.5), b = random_set(rng, pool(rng), 0.5);
    const PseudoLabelSet none;
    const auto ab = fuse(a, b);
    bool ok = fuse(a, none).entries == a.entries && fuse(none, a).entries == a.entries;
    ok &= fuse(a, a).entries == a.entries && fuse(ab, b).entries == ab.entries;
    auto ids = a.image_ids();
    for (const auto& id : b.image_ids()) ids.insert(id);
    ok &= ab.image_ids() == ids;
    for (const auto& [id, v] : ab.entries) ok &= v == (b.contains(id) ? b.entries.at(id) : a.entries.at(id));
    s.violations += !ok;
  }
  return s;
}

Suite selection_suite(std::mt19937_64& rng) {
  Suite s{"containment chain and |D_down| <= n"};
  std::uniform_int_distribution<int> pool(0, 40), size(1, 50), flip(0, 3);
  std::uniform_real_distribution<double> score(0, 1);
  const ViewPairedDataset none;
  for (int t = 0; t < kPropertyCases; ++t) {
    const auto fresh = random_set(rng, pool(rng), 0.7);
    const auto N = static_cast<std::size_t>(size(rng));
    const auto m = flip(rng) == 0 ? kUnbounded : static_cast<std::size_t>(size(rng));
    const auto n = static_cast<std::size_t>(size(rng));
    std::set<FramePosition> hist;
    const auto sample = rand_select(fresh, N, std::nullopt, none, hist, rng);
    const auto up = select_top_m(sample, m);
    std::map<ImageId, double> scores;
    for (const auto& id : up.image_ids()) scores[id] = score(rng);
    const auto down = select_bottom_n(scores, up, n, ViewTransform{}, 2);
    bool ok = subset(down.image_ids(), up.image_ids()) && subset(up.image_ids(), sample.image_ids()) &&
              subset(sample.image_ids(), fresh.image_ids());
    ok &= sample.num_images() == std::min(N, fresh.num_images());
    ok &= up.num_images() == std::min(m, sample.num_images());
    ok &= down.num_images() == std::min(n, up.num_images()) && down.num_images() <= n;
    for (const auto& [id, v] : sample.entries) ok &= v == fresh.entries.at(id);
    s.violations += !ok;
  }
  return s;
}

Suite stop_suite(std::mt19937_64& rng) {
  Suite s{"K_min <= k_final <= K_max"};
  std::uniform_int_distribution<int> kmin(1, 15), span(0, 15), dk(0, 6);
  std::uniform_real_distribution<double> thr(0.25, 4), step_scale(0, 6), unit(-1, 1);
  for (int t = 0; t < kPropertyCases; ++t) {
    StopConfig cfg;
    cfg.k_min = kmin(rng);
    cfg.k_max = cfg.k_min + span(rng);
    cfg.delta_k = dk(rng);
    cfg.t_delta_map = thr(rng);
    const double scale = step_scale(rng);
    StopTracker tracker;
    double metric = 50;
    int k = 1;
    bool done = false;
    for (;; ++k) {
      metric += scale * unit(rng);
      std::tie(done, tracker) = should_stop(cfg, metric, k, tracker);
      if (done || k > cfg.k_max) break;
    }
    bool ok = done && k >= cfg.k_min && k <= cfg.k_max;
    if (done && k < cfg.k_max) ok &= tracker.counter >= cfg.delta_k;
    s.violations += !ok;
  }
  return s;
}

Suite frame_distance_suite(std::mt19937_64& rng) {
  Suite s{"delta_t constraints"};
  std::uniform_int_distribution<int> nseq(1, 4), dt1(0, 6), dt2(0, 10), nsel(1, 12), nhist(0, 3), frame(0, 40);
  std::bernoulli_distribution keep_frame(0.5), candidate(0.8);
  for (int t = 0; t < kPropertyCases; ++t) {
    ViewPairedDataset data;
    PseudoLabelSet cands;
    const int sequences = nseq(rng);
    for (int q = 0; q < sequences; ++q) {
      for (int f = 0; f <= 40; ++f) {
        if (!keep_frame(rng)) continue;
        ImageRecord r;
        r.id = "s" + std::to_string(q) + "_" + std::to_string(f);
        r.width = 1240;
        r.height = 375;
        r.sequence_id = "s" + std::to_string(q);
        r.frame_index = f;
        r.view1_ref = r.id;
        data.images.push_back(r);
        if (candidate(rng)) cands.entries[r.id] = {{{0, 0, 10, 10}, kVehicle, 0.9}};
      }
    }
    const SeqConfig seq{dt1(rng), dt2(rng)};
    std::set<FramePosition> hist;
    for (int h = nhist(rng); h > 0; --h) hist.insert({"s" + std::to_string(h % sequences), frame(rng)});
    bool ok = true;
    for (int round = 0; round < 3; ++round) {
      const auto before = hist;
      const auto out = rand_select(cands, static_cast<std::size_t>(nsel(rng)), seq, data, hist, rng);
      std::vector<FramePosition> chosen;
      for (const auto& id : out.image_ids()) {
        const auto& r = data.at(id);
        chosen.push_back({*r.sequence_id, *r.frame_index});
      }
      for (std::size_t i = 0; i < chosen.size(); ++i) {
        for (std::size_t j = i + 1; j < chosen.size(); ++j)
          if (chosen[i].first == chosen[j].first) ok &= std::abs(chosen[i].second - chosen[j].second) >= seq.delta_t1;
        for (const auto& h : before)
          if (h.first == chosen[i].first) ok &= std::abs(h.second - chosen[i].second) >= seq.delta_t2;
        ok &= hist.count(chosen[i]) == 1;
      }
    }
    s.violations += !ok;
  }
  return s;
}

void property_suites() {
  std::mt19937_64 rng(3);
  for (const auto& suite : std::vector<std::function<Suite(std::mt19937_64&)>>{fuse_suite, selection_suite, stop_suite,
                                                                                frame_distance_suite}) {
    const auto t0 = Clock::now();
    const auto r = suite(rng);
    const double secs = since(t0);
    report(3, "property: " + r.name, r.violations == 0 && secs < kPropertySeconds,
           fmt("%d cases, %d violations, %.2f s (< %.0f s)", kPropertyCases, r.violations, secs, kPropertySeconds));
  }
}

// ---------------------------------------------------------------------------

experiment::SimCell benchmark_cell(std::uint64_t seed, const std::string& mode_name) {
  const auto mode = experiment::view_mode(mode_name);
  experiment::SimCell c;
  c.world.seed = seed;
  c.world.rho = mode.rho;
  c.world.view2_kind = mode.kind;
  c.labeled_percent = kBenchmarkLabeledPercent;
  c.config = experiment::default_config();
  c.config.rng_seed = seed;
  return c;
}

void benchmark(const fs::path& work) {
  const auto t0 = Clock::now();
  int bounded = 0, recovered = 0, correlation = 0, no_drift = 0;
  std::string worst;
  double min_recovery = 1e9;
  for (int s = 0; s < kBenchmarkSeeds; ++s) {
    const auto dir = work / "benchmark" / ("seed_" + std::to_string(s));
    fs::remove_all(dir);
    const auto rgbd = experiment::run_sim_cell(benchmark_cell(s, "rgb_d"), dir);
    auto mirror_cell = benchmark_cell(s, "rgb_mirror");
    mirror_cell.baselines = false;
    const auto mirror = experiment::run_sim_cell(mirror_cell);

    const double lb = *rgbd.lb_map, ub = *rgbd.ub_map, ct = rgbd.final_map;
    bounded += lb < ct && ct <= ub;
    const double recovery = ub > lb ? (ct - lb) / (ub - lb) : 0.0;
    min_recovery = std::min(min_recovery, recovery);
    recovered += recovery >= kRecoveryFraction;
    correlation += ct > mirror.final_map;

    const auto curve = experiment::cycle_curve(dir);
    double running = -1, drop = 0;
    for (std::size_t i = 1; i < curve.size(); ++i) {
      running = std::max(running, curve[i].report.map);
      drop = std::max(drop, running - curve[i].report.map);
    }
    const bool steady = curve.size() > 1 && curve.back().k == rgbd.cycles &&
                        curve.back().report.map >= curve[1].report.map && drop <= kDriftPoints;
    no_drift += steady;
    std::printf("  seed %d: LB %.2f  co-train %.2f  UB %.2f  recovery %.2f  mirror %.2f  stop k=%d  curve k1 %.2f "
                "stop %.2f max-drop %.2f\n",
                s, lb, ct, ub, recovery, mirror.final_map, rgbd.cycles, curve.size() > 1 ? curve[1].report.map : NAN,
                curve.back().report.map, drop);
  }
  const double secs = since(t0);
  const bool in_time = secs < kBenchmarkSeconds;
  report(4, "LB < co-train <= UB", bounded == kBenchmarkSeeds && in_time,
         fmt("%d/%d seeds, %.1f s (< %.0f s)", bounded, kBenchmarkSeeds, secs, kBenchmarkSeconds));
  report(4, "gap recovery >= 50%", recovered >= kRecoverySeedsNeeded && in_time,
         fmt("%d/%d seeds (need %d), min recovery %.2f", recovered, kBenchmarkSeeds, kRecoverySeedsNeeded,
             min_recovery));
  report(5, "rho=0.2 beats rho=0.95", correlation >= kCorrelationSeedsNeeded,
         fmt("%d/%d seeds (need %d)", correlation, kBenchmarkSeeds, kCorrelationSeedsNeeded));
  report(6, "no drift", no_drift == kBenchmarkSeeds,
         fmt("%d/%d seeds: stop >= cycle 1 and never %.0f points below running max", no_drift, kBenchmarkSeeds,
             kDriftPoints));
}

// ---------------------------------------------------------------------------

void audit_fixture(const fs::path& work) {
  const fs::path fixtures = COTRAIN_FIXTURES;
  const auto pl = experiment::load_pseudo_labels(fixtures / "audit_dpl.json");
  const auto gt = experiment::load_any_ground_truth(fixtures / "eval_gt.json");
  const auto out = work / "audit";
  fs::remove_all(out);
  const auto files = experiment::audit_to_dir(pl, gt, 12, eval::EvalProtocol{}.iou_thresholds, out);
  const auto& r = files.report;

  // 8 pseudo boxes: an unmatched pedestrian, a vehicle over no GT and a
  // duplicate vehicle below the 0.7 IoU threshold are the 3 false positives.
  bool ok = r.false_positives == 3 && r.pseudo_boxes == 8 && r.labeled_boxes == 12;
  ok &= std::abs(r.fp_percent - 3.0 / 20.0 * 100.0) < kAuditTol;
  ok &= r.fp_corrected.num_boxes() == 5 && r.bb_corrected.num_boxes() == 8 && r.fpbb_corrected.num_boxes() == 5;
  const BoundingBox shifted_gt{600, 160, 700, 220};
  const auto& bb = r.bb_corrected.entries.at("000001");
  ok &= std::count_if(bb.begin(), bb.end(), [&](const DetectionRecord& d) { return d.box == shifted_gt; }) == 1;
  for (const auto& [id, dets] : r.fpbb_corrected.entries)
    for (const auto& d : dets) {
      const auto& labels = gt.at(id);
      ok &= std::any_of(labels.begin(), labels.end(), [&](const LabelRecord& l) { return l.box == d.box; });
    }
  ok &= fs::exists(out / "audit.json") && fs::exists(out / "dpl_fp.json") && fs::exists(out / "dpl_bb.json") &&
        fs::exists(out / "dpl_fpbb.json");
  report(7, "audit arithmetic", ok,
         fmt("FP %zu of %zu pseudo + %zu labeled, FP%% %.4f (want 15), boxes fp/bb/fpbb %zu/%zu/%zu", r.false_positives,
             r.pseudo_boxes, r.labeled_boxes, r.fp_percent, r.fp_corrected.num_boxes(), r.bb_corrected.num_boxes(),
             r.fpbb_corrected.num_boxes()));
}

void determinism(const fs::path& work) {
  const auto a = work / "determinism" / "a", b = work / "determinism" / "b";
  fs::remove_all(work / "determinism");
  experiment::run_sim_cell(benchmark_cell(3, "rgb_d"), a);
  experiment::run_sim_cell(benchmark_cell(3, "rgb_d"), b);

  std::size_t compared = 0, differing = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a / "cycles")) {
    if (!entry.is_regular_file()) continue;
    const auto other = b / fs::relative(entry.path(), a);
    ++compared;
    differing += !fs::exists(other) || slurp(entry.path()) != slurp(other);
  }
  const std::size_t checkpoints_b =
      std::count_if(fs::recursive_directory_iterator(b / "cycles"), fs::recursive_directory_iterator{},
                    [](const fs::directory_entry& e) { return e.is_regular_file(); });
  const bool dpl_same = fs::exists(a / "dpl.json") && slurp(a / "dpl.json") == slurp(b / "dpl.json");
  report(8, "determinism", compared > 0 && differing == 0 && checkpoints_b == compared && dpl_same,
         fmt("%zu checkpoint files compared, %zu differ, final dpl.json %s", compared, differing,
             dpl_same ? "identical" : "differs"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"co-training acceptance checks"};
  fs::path work = fs::temp_directory_path() / "cotrain_acceptance";
  app.add_option("--work-dir", work, "scratch directory for run artifacts");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  oracle_equivalence();
  ap_hand_cases();
  property_suites();
  benchmark(work);
  audit_fixture(work);
  determinism(work);

  std::printf("%s: %d failing check(s)\n", failures ? "FAILED" : "ALL PASSED", failures);
  return failures ? 1 : 0;
}
