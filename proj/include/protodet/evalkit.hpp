#pragma once

#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protodet/detector.hpp"

namespace protodet {

struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<int> labels;

  static GroundTruth of(const SceneSample& scene) { return {scene.boxes, scene.labels}; }
};

/// Per-class average precision at IoU 0.5. `detections[i]` and `truth[i]`
/// belong to the same scene. Detections are ranked by confidence (ties: scene
/// order, then list order) and greedily matched to the highest-IoU unmatched
/// box of their class; AP integrates the interpolated precision envelope
/// over every recall step. Classes without ground truth are omitted.
std::map<int, double> ap50(const std::vector<std::vector<Detection>>& detections,
                           const std::vector<GroundTruth>& truth);

/// Fraction of rows whose own class mean is strictly the L1-nearest of all
/// class means, the means taken over the same rows.
double centroid_accuracy(const Tensor& features, const std::vector<int>& labels);

enum class EmbeddingStage { raw, pre_isam, post_isam };
std::string to_string(EmbeddingStage s);

/// CSV: "class_id,stage,v0,...,v{d-1}" then one row per vector, in input
/// order, values printed with round-trip precision.
void write_embeddings(std::ostream& os, const Tensor& features, const std::vector<int>& labels,
                      EmbeddingStage stage);
void export_embeddings(const Tensor& features, const std::vector<int>& labels,
                       EmbeddingStage stage, const std::string& path);

struct MetricReport {
  std::map<int, double> per_class_ap50;
  std::vector<int> novel_classes;
  double mean_novel_ap50 = 0.0;
  std::uint64_t seed = 0;
  std::size_t shots = 0;
  std::string prototype_mode;
  std::string baseline_variant;
  bool use_isam = false;
  bool use_qsam = false;

  // Recomputes mean_novel_ap50 from per_class_ap50 and novel_classes.
  void finalize();
};

struct ClusterReport {
  double accuracy_raw = 0.0;
  double accuracy_pre_isam = 0.0;
  double accuracy_post_isam = 0.0;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

struct RunStats {
  std::map<int, MeanStd> per_class_ap50;
  MeanStd mean_novel_ap50;
  std::size_t runs = 0;
};

/// Sample mean and (n-1) standard deviation of every metric across runs.
/// Needs at least two reports covering the same classes.
RunStats multi_run_stats(const std::vector<MetricReport>& reports);

double median(std::vector<double> values);

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);
void to_json(nlohmann::json& j, const ClusterReport& r);
void from_json(const nlohmann::json& j, ClusterReport& r);
void to_json(nlohmann::json& j, const MeanStd& m);
void to_json(nlohmann::json& j, const RunStats& s);

}  // namespace protodet
