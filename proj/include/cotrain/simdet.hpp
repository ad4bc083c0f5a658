#pragma once

// Seeded synthetic worlds and a statistical detector.
//
// Every object carries one difficulty per view, d_v = logistic(z_v + offset_v)
// with (z_1, z_2) standard bivariate normal of correlation rho. A detector is
// a per-category skill s in [s0, s_max]; it finds an object with probability
// logistic(gain * (s - d_view)). Skill grows with the evidence a detector was
// trained on:
//
//   s(n_eff) = s_max - (s_max - s0) * exp(-lambda * n_eff)
//   n_eff    = sum over true-positive boxes of (d_view / 0.5)^gamma
//              - beta * #false-positive boxes                (floored at 0)
//
// so a box teaches more when it is hard for the view being trained, and
// wrong pseudo-labels actively hurt.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <unordered_map>
#include <vector>

#include "cotrain/core.hpp"
#include "cotrain/detector.hpp"
#include "json.hpp"

namespace cotrain::sim {

struct CategoryShape {
  double fraction = 0.5;        // share of objects
  double height_log_mean = 4.0;  // log pixels
  double height_log_sigma = 0.4;
  double aspect = 1.0;  // width / height

  bool operator==(const CategoryShape&) const = default;
};

struct SequenceLayout {
  int num_sequences = 10;
  int length = 20;
  double jitter = 4.0;  // per-frame box displacement std, pixels

  bool operator==(const SequenceLayout&) const = default;
};

struct WorldConfig {
  std::size_t num_images = 200;
  std::size_t num_test_images = 200;
  double mean_objects = 3.0;  // 1 + Poisson(mean_objects - 1) per image
  std::map<Category, CategoryShape> categories{
      {kVehicle, {0.6, 3.9, 0.45, 1.6}},
      {kPedestrian, {0.4, 4.0, 0.35, 0.42}},
  };
  double rho = 0.5;
  double view2_difficulty_offset = 0.0;
  TransformKind view2_kind = TransformKind::Identity;
  std::optional<SequenceLayout> sequences;
  int image_width = 1240;
  int image_height = 375;
  std::uint64_t seed = 0;

  void validate() const;
  ViewTransform view2_transform() const;
  bool operator==(const WorldConfig&) const = default;
};

struct SimObject {
  Category category;
  BoundingBox box;  // view-1 frame
  std::array<double, 2> latent{};
  std::array<double, 2> difficulty{};

  bool operator==(const SimObject&) const = default;
};

struct SimImage {
  ImageRecord record;
  std::vector<SimObject> objects;

  bool operator==(const SimImage&) const = default;
};

class World {
 public:
  World() = default;
  World(WorldConfig config, std::vector<SimImage> train, std::vector<SimImage> test);

  const WorldConfig& config() const { return config_; }
  const std::vector<SimImage>& train_images() const { return train_; }
  const std::vector<SimImage>& test_images() const { return test_; }
  ViewTransform view2_transform() const { return config_.view2_transform(); }

  // Train or test image; nullptr when unknown.
  const SimImage* find(const ImageId& id) const;
  // Object box in the frame of `view`.
  BoundingBox box_in_view(const SimObject& obj, int view) const;

  /// Training pool with every image labeled (source human).
  ViewPairedDataset dataset() const;
  /// Test images with their labels.
  ViewPairedDataset test_dataset() const;
  GroundTruthSet test_ground_truth() const;
  GroundTruthSet train_ground_truth() const;

  bool operator==(const World& o) const { return config_ == o.config_ && train_ == o.train_ && test_ == o.test_; }

 private:
  WorldConfig config_;
  std::vector<SimImage> train_;
  std::vector<SimImage> test_;
  std::unordered_map<ImageId, std::size_t> index_;  // test images offset by train_.size()
};

World generate_world(const WorldConfig& cfg);

/// Keeps ground truth on a random `percent` of the training images (rounded
/// to nearest, at least one) and leaves the rest unlabeled.
ViewPairedDataset split_labeled(const World& world, double percent, std::uint64_t seed);

nlohmann::json world_config_to_json(const WorldConfig& cfg);
WorldConfig parse_world_config(const nlohmann::json& j, const WorldConfig& defaults = {});
nlohmann::json world_to_json(const World& world);
World parse_world(const nlohmann::json& j);
void save_truth(const World& world, const std::filesystem::path& file);
World load_truth(const std::filesystem::path& file);

// ---------------------------------------------------------------------------
// Detector model

struct SimDetectorParams {
  double s0 = 0.3;
  double s_max = 0.95;
  double lambda = 0.01;
  double gain = 10.0;
  double beta = 0.5;
  double gamma = 1.0;  // difficulty weighting of true-positive boxes
  double sigma_conf = 0.05;
  double sigma_loc = 0.1;
  double mu_fp = 0.5;
  double fp_conf_low = 0.5;
  double fp_conf_high = 0.95;
  std::map<Category, double> iou_thresholds{{kVehicle, 0.7}, {kPedestrian, 0.5}};

  void validate() const;
  bool operator==(const SimDetectorParams&) const = default;
};

nlohmann::json params_to_json(const SimDetectorParams& p);
SimDetectorParams parse_params(const nlohmann::json& j, const SimDetectorParams& defaults = {});

using SkillTable = std::map<Category, double>;

struct Evidence {
  double weighted_tp = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;

  double n_eff(const SimDetectorParams& p) const;
};

double skill_from_evidence(const SimDetectorParams& p, double n_eff);

/// Per-category TP/FP tally of a training request against the hidden truth.
std::map<Category, Evidence> tally_training_boxes(const SimDetectorParams& p, const World& world,
                                                  const TrainRequest& request);

/// Skill per world category; categories without evidence sit at s0.
SkillTable sim_train(const SimDetectorParams& p, const World& world, const TrainRequest& request);

/// Unthresholded detections in the frame of `view` for every id (empty lists
/// included). Per-image randomness depends only on (seed, image id).
ImageDetections sim_detect(const SimDetectorParams& p, const SkillTable& skill, const World& world, int view,
                           const std::vector<ImageId>& ids, std::uint64_t seed);

class SimulatedBackend : public DetectorBackend {
 public:
  SimulatedBackend(const World& world, SimDetectorParams params, std::uint64_t seed);

  std::string kind() const override { return "simulated"; }
  ModelHandle train(const TrainRequest& request) override;
  ImageDetections detect(const ModelHandle& model, const DetectRequest& request) override;

  const std::vector<TrainRequest>& train_log() const { return train_log_; }
  static SkillTable skill_of(const ModelHandle& model);

 private:
  const World& world_;
  SimDetectorParams params_;
  std::uint64_t seed_;
  std::vector<TrainRequest> train_log_;
};

}  // namespace cotrain::sim
