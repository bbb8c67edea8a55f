#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protodet/aggregation.hpp"
#include "protodet/world.hpp"

namespace protodet {

/// fewx:      query/support aggregation before the proposal stage and on
///            RoIs, pairwise episodes, binary match head.
/// fsdetview: raw query features feed the proposal stage, aggregation on
///            RoIs only, all-way episodes, multi-class softmax head.
enum class DetectorStyle { fewx, fsdetview };
enum class HeadMode { binary_match, multiclass };

std::string to_string(DetectorStyle s);
DetectorStyle parse_detector_style(const std::string& s);

struct DetectorConfig {
  DetectorStyle style = DetectorStyle::fsdetview;
  std::size_t dim = 16;
  // Total number of class ids in the world; sizes the multi-class head and
  // the meta classifier.
  std::size_t num_classes = 9;
  AttentionConfig attention;
  AggregationFlags flags;
  std::vector<std::size_t> anchor_sizes{2, 4};
  std::size_t top_k = 16;
  double positive_iou = 0.5;
  double negative_iou = 0.3;
  double nms_iou = 0.5;

  HeadMode head_mode() const {
    return style == DetectorStyle::fewx ? HeadMode::binary_match : HeadMode::multiclass;
  }
  std::size_t head_outputs() const { return head_mode() == HeadMode::binary_match ? 2 : num_classes + 1; }
  std::size_t head_input_width() const;
  // Aggregation flags for the spatial point; single-prototype fusion there
  // is always the width-preserving product.
  AggregationFlags spatial_flags() const;
  void validate() const;
};

struct DetectorParams {
  Tensor backbone_w, backbone_b;  // d x d, d
  Tensor rpn_cls_w, rpn_cls_b;    // d x 2 (background, object)
  Tensor rpn_box_w, rpn_box_b;    // d x 4
  std::optional<Tensor> head_in_w, head_in_b;  // width x d hidden layer (ReLU)
  Tensor cls_w, cls_b;            // d x head_outputs
  Tensor box_w, box_b;            // d x 4
  Tensor meta_w, meta_b;          // d x num_classes

  static DetectorParams init(const DetectorConfig& cfg, std::mt19937_64& rng);
  void visit_params(const ParamVisitor& f);
};

/// Complete trainable detector: detector weights plus the aggregation
/// stacks for the RoI point and, in fewx style, the spatial point.
struct Model {
  DetectorConfig config;
  DetectorParams det;
  std::optional<AggregatorStacks> spatial;
  AggregatorStacks roi;

  static Model init(const DetectorConfig& cfg, std::uint64_t seed);
  void visit_params(const ParamVisitor& f);
  // Copy whose parameters are watched leaves of `tape`.
  Model tracked(Tape& tape) const;
  // Parameters in visit order, and the inverse (shapes must match).
  std::vector<Tensor> parameters() const;
  Model with_parameters(const std::vector<Tensor>& values) const;
};

struct Anchor {
  Box box;
  std::size_t size = 0;
};

struct Proposal {
  Box box;
  double score = 0.0;
  Box anchor;
};

struct Detection {
  Box box;
  int class_id = 0;
  double confidence = 0.0;
  std::uint64_t scene_id = 0;
};

struct LossBreakdown {
  double rpn_loc = 0, rpn_cls = 0, det_loc = 0, det_cls = 0, meta = 0, total = 0;
};

struct HeadOutput {
  Tensor logits;   // N x 2 (binary) or N x (C+1) (multi-class)
  Tensor offsets;  // N x 4
};

/// Per-cell linear map plus ReLU.
FeatureMap backbone_stub(const FeatureMap& grid, const DetectorParams& params);
/// Same transform applied to support rows (K x d).
Tensor support_features(const Tensor& raw, const DetectorParams& params);

/// Square anchors of every configured size at every cell that fits, ordered
/// by (y1, x1, size).
std::vector<Anchor> enumerate_anchors(std::size_t height, std::size_t width,
                                      const std::vector<std::size_t>& sizes);

struct RpnOutput {
  Tensor logits;   // A x 2
  Tensor offsets;  // A x 4
};
RpnOutput rpn_forward(const FeatureMap& fm, const DetectorParams& params,
                      const std::vector<Anchor>& anchors);

/// Scores every anchor on its mean-pooled feature and returns the top_k by
/// objectness (object minus background logit); ties by (y1, x1, size). Boxes
/// are the regressed anchors rounded to whole cells and clipped to the grid.
std::vector<Proposal> propose(const FeatureMap& fm, const DetectorParams& params,
                              std::size_t top_k, const std::vector<std::size_t>& anchor_sizes);
std::vector<Proposal> select_proposals(const RpnOutput& rpn, const std::vector<Anchor>& anchors,
                                       std::size_t top_k, std::size_t height, std::size_t width);

/// Mean-pools the cells inside each box.
RoIFeatures roi_extract(const FeatureMap& fm, const std::vector<Box>& boxes);

HeadOutput head_forward(const RoIFeatures& rois, const DetectorParams& params, HeadMode mode);

/// Everything the five loss terms are computed from. Label vectors use
/// `kIgnore` for anchors that take no part in the objectness loss.
struct LossInputs {
  static constexpr std::size_t kIgnore = static_cast<std::size_t>(-1);

  Tensor rpn_logits;                   // A x 2
  Tensor rpn_offsets;                  // A x 4
  std::vector<std::size_t> rpn_labels;  // 0 background, 1 object, kIgnore
  std::vector<std::vector<double>> rpn_targets;  // per anchor; used where label == 1

  Tensor det_logits;                   // N x n
  std::vector<std::size_t> det_labels;  // 0 = background
  Tensor det_offsets;                  // N x 4
  std::vector<std::vector<double>> det_targets;  // per RoI; used where label > 0

  Tensor meta_logits;                   // S x C
  std::vector<std::size_t> meta_labels;
};

struct LossTerms {
  Tensor rpn_loc, rpn_cls, det_loc, det_cls, meta, total;
  LossBreakdown values;
};

/// Smooth-L1 localization on positives only (zero when there are none),
/// cross-entropy classification, cross-entropy meta term; unweighted sum.
LossTerms compute_losses(const LossInputs& in);

/// IoU-based anchor assignment: positive >= pos_iou, negative < neg_iou,
/// ignored otherwise. Targets are offsets to the best-overlapping box.
void assign_anchors(const std::vector<Anchor>& anchors, const std::vector<Box>& gt,
                    double pos_iou, double neg_iou, std::vector<std::size_t>& labels,
                    std::vector<std::vector<double>>& targets);

/// Support vectors for one class, before the backbone.
struct SupportSet {
  int class_id = 0;
  Tensor raw;  // K x d
};

/// Full training forward pass on one query with its support sets.
LossTerms episode_losses(const Model& model, const SceneSample& query,
                         const std::vector<SupportSet>& supports, const ForwardContext& ctx);

/// Refined prototypes per class for each aggregation point, computed once in
/// eval mode and reused across scenes.
struct PrototypeCache {
  std::map<int, PrototypeSet> roi;
  std::map<int, PrototypeSet> spatial;
  // Per-sample refined vectors regardless of prototype mode.
  std::map<int, Tensor> refined;
  PrototypeMode mode = PrototypeMode::per_sample;
  std::uint64_t seed = 0;

  std::vector<int> classes() const;
};

PrototypeCache build_prototype_cache(const Model& model, const std::vector<SupportSet>& supports,
                                     std::uint64_t seed = 0);

/// Detections after per-class NMS for every class in the cache.
std::vector<Detection> infer(const Model& model, const SceneSample& scene,
                             const PrototypeCache& cache);
/// Same pipeline, recomputing prototypes from raw supports.
std::vector<Detection> infer_uncached(const Model& model, const SceneSample& scene,
                                      const std::vector<SupportSet>& supports);

void to_json(nlohmann::json& j, const Detection& d);
void from_json(const nlohmann::json& j, Detection& d);

}  // namespace protodet
