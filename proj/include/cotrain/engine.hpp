#pragma once

// Disagreement-based co-training of two detectors over view-paired data.
//
// Each cycle, per direction (sender j -> receiver i):
//   up_j   = top-m most confident images of a random N-sample of fresh_j
//   down_i = the n images of up_j the receiver is least confident about,
//            carrying the sender's pseudo-labels in the receiver's frame
//   acc_i  = fuse(acc_i, down_i)
// then both detectors are retrained on labeled + acc_i and re-run on the
// unlabeled pool. The loop stops once the agreement between consecutive fresh
// view-1 sets has been stable long enough (see should_stop).

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <utility>
#include <vector>

#include "cotrain/core.hpp"
#include "cotrain/detector.hpp"
#include "cotrain/eval.hpp"

namespace cotrain {

/// Uniform random sample of at most `n` candidate images. With `seq`, frames
/// are first thinned per sequence by a greedy frame-order scan: a frame is
/// kept iff it is >= delta_t1 from the previously kept frame and >= delta_t2
/// from every history frame of its sequence. Selected frames join `history`.
PseudoLabelSet rand_select(const PseudoLabelSet& candidates, std::size_t n, const std::optional<SeqConfig>& seq,
                           const ViewPairedDataset& data, std::set<FramePosition>& history, std::mt19937_64& rng);

/// The m most confident images (ties: smaller image id first). kUnbounded
/// returns the input.
PseudoLabelSet select_top_m(const PseudoLabelSet& set, std::size_t m);

struct CrossScore {
  std::map<ImageId, double> scores;
  ImageDetections receiver_detections;  // receiver frame, thresholded
};

/// Runs the receiver detector over the shared images in its own view and
/// scores each image by the mean confidence of its surviving detections.
CrossScore cross_score(DetectorBackend& backend, const ModelHandle& receiver, const PseudoLabelSet& shared,
                       const ViewPairedDataset& data, const std::map<Category, double>& thresholds);

/// The min(n, |shared|) lowest-scored images (ties: smaller id first) with the
/// sender's labels mapped through `to_receiver`.
PseudoLabelSet select_bottom_n(const std::map<ImageId, double>& scores, const PseudoLabelSet& shared, std::size_t n,
                               const ViewTransform& to_receiver, int receiver_view);

/// Union of image ids; on the intersection the new labels win.
PseudoLabelSet fuse(const PseudoLabelSet& old, const PseudoLabelSet& fresh);

/// Stability rule. A cycle is stable iff |metric - previous| < T_delta_map;
/// the counter increments on stable cycles and resets otherwise (no
/// comparison on the first metric). Stops iff k >= K_max, or k >= K_min and
/// counter >= delta_K.
std::pair<bool, StopTracker> should_stop(const StopConfig& stop, double metric, int k, StopTracker tracker);
std::pair<bool, StopTracker> should_stop(const StopConfig& stop, const PseudoLabelSet& old,
                                         const PseudoLabelSet& fresh, int k, const StopTracker& tracker,
                                         const eval::EvalProtocol& protocol = {});

/// Trains both detectors on their labeled views and labels the unlabeled pool.
CycleState initialize(const CoTrainConfig& cfg, const ViewPairedDataset& data, DetectorBackend& backend);

struct CycleExchange {
  PseudoLabelSet up1, up2;
  PseudoLabelSet down1, down2;
};

/// One repeat-body iteration, including the stop check; advances state.k.
CycleExchange run_cycle(const CoTrainConfig& cfg, const ViewPairedDataset& data, DetectorBackend& backend,
                        CycleState& state, const eval::EvalProtocol& protocol = {});

struct RunOptions {
  std::optional<std::filesystem::path> run_dir;  // checkpoints + log.csv
  eval::EvalProtocol protocol;                   // IoU thresholds for the stop metric
  std::optional<int> halt_after;                 // return unfinished after this cycle
  std::function<void(const CycleState&, const CycleExchange&)> on_cycle;
};

struct RunResult {
  PseudoLabelSet labels;  // final fresh view-1 set
  CycleState state;
  bool finished = false;
};

/// Full loop. With a run_dir, every cycle is checkpointed and an existing
/// checkpoint is resumed; the config must match the one stored there.
RunResult run(const CoTrainConfig& cfg, const ViewPairedDataset& data, DetectorBackend& backend,
              const RunOptions& options = {});

/// Final detector on labeled + pseudo-labeled images (view 1).
ModelHandle train_final(DetectorBackend& backend, const ViewPairedDataset& data, const PseudoLabelSet& pseudo);

}  // namespace cotrain
