#pragma once

// Detector backends. The engine talks to a backend through two calls, train
// and detect; the engine-side wrappers below enforce the contract (negative
// mining only on labeled images, thresholds re-applied after every detect)
// regardless of how the backend behaves.

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cotrain/core.hpp"

namespace cotrain {

inline constexpr int kProtocolVersion = 1;

struct TrainImage {
  ImageId id;
  std::string payload_ref;
  std::vector<LabelRecord> labels;  // in the request's view frame
  bool mine_negatives = false;

  bool operator==(const TrainImage&) const = default;
};

struct TrainRequest {
  int view = 1;
  int cycle = 0;
  std::vector<TrainImage> images;

  /// Throws ValidationError when a pseudo-labeled image is flagged for
  /// negative mining.
  void validate() const;
  bool operator==(const TrainRequest&) const = default;
};

struct DetectImage {
  ImageId id;
  std::string payload_ref;

  bool operator==(const DetectImage&) const = default;
};

struct DetectRequest {
  int view = 1;
  std::map<Category, double> thresholds;
  std::vector<DetectImage> images;

  bool operator==(const DetectRequest&) const = default;
};

class DetectorBackend {
 public:
  virtual ~DetectorBackend() = default;
  virtual std::string kind() const = 0;
  virtual ModelHandle train(const TrainRequest& request) = 0;
  // May return detections below threshold or for unrequested ids; the engine
  // wrapper filters or rejects them.
  virtual ImageDetections detect(const ModelHandle& model, const DetectRequest& request) = 0;
};

/// Builds a training request for `view`: labeled images carry their labels
/// (mine_negatives=true), pseudo images carry `pseudo` boxes (false).
TrainRequest make_train_request(const ViewPairedDataset& data, const PseudoLabelSet& pseudo, int view, int cycle);

ModelHandle train(DetectorBackend& backend, const TrainRequest& request);

/// Runs the detector on `ids` in `view` and keeps detections with
/// confidence >= thresholds. Images without surviving detections are omitted.
/// Throws BackendError if the backend reports an image that was not requested.
PseudoLabelSet detect(DetectorBackend& backend, const ModelHandle& model, const ViewPairedDataset& data,
                      const std::vector<ImageId>& ids, int view, const std::map<Category, double>& thresholds,
                      int cycle);

/// Same as detect() but keeps every requested image (empty lists included).
ImageDetections detect_all(DetectorBackend& backend, const ModelHandle& model, const ViewPairedDataset& data,
                           const std::vector<ImageId>& ids, int view, const std::map<Category, double>& thresholds);

// ---------------------------------------------------------------------------
// Wire protocol (JSON files exchanged with external workers)

namespace wire {

std::string encode_train_request(const TrainRequest& r);
TrainRequest decode_train_request(const std::string& text);

std::string encode_detect_request(const DetectRequest& r);
DetectRequest decode_detect_request(const std::string& text);

std::string encode_detections(const ImageDetections& results);
/// Throws ParseError naming the field path, e.g. "results.img7[3].confidence".
ImageDetections decode_detections(const std::string& text);

}  // namespace wire

// ---------------------------------------------------------------------------
// External worker process

struct ProcessResult {
  int exit_code = -1;
  std::string stderr_text;
};

/// Runs argv[0] with arguments, capturing stderr. No shell is involved.
ProcessResult run_process(const std::vector<std::string>& argv);

/// One process invocation per call:
///   <worker> train --request <train.json> --model-out <dir>
///   <worker> detect --model <dir> --request <detect.json> --out <detections.json>
class ExternalBackend : public DetectorBackend {
 public:
  ExternalBackend(std::filesystem::path executable, std::filesystem::path work_dir);

  std::string kind() const override { return "external"; }
  ModelHandle train(const TrainRequest& request) override;
  ImageDetections detect(const ModelHandle& model, const DetectRequest& request) override;

 private:
  std::filesystem::path executable_;
  std::filesystem::path work_dir_;
  int detect_calls_ = 0;
};

}  // namespace cotrain
