#pragma once

#include <optional>
#include <string>

#include "protodet/attention.hpp"
#include "protodet/feature_map.hpp"

namespace protodet {

enum class PrototypeMode { per_sample, averaged };

/// Support prototypes for one class: K vectors (per-sample) or a single
/// class mean (averaged). `refined` marks vectors that already went through
/// the intra-support encoder.
struct PrototypeSet {
  int class_id = 0;
  Tensor vectors;
  PrototypeMode mode = PrototypeMode::per_sample;
  bool refined = false;

  std::size_t count() const { return vectors.rows(); }
};

/// Single-prototype fusion used by the baselines:
/// mult        -> query * proto                      (q x d)
/// mult_sub_id -> [query * proto, query - proto, query] (q x 3d)
enum class BaselineVariant { mult, mult_sub_id };

std::string to_string(PrototypeMode m);
std::string to_string(BaselineVariant v);
PrototypeMode parse_prototype_mode(const std::string& s);
BaselineVariant parse_baseline_variant(const std::string& s);

/// Which halves of the attention aggregator are active at one aggregation
/// point. use_qsam=false falls back to the single-prototype baseline fusion
/// with the (optionally refined) supports averaged.
struct AggregationFlags {
  bool use_isam = true;
  bool use_qsam = true;
  BaselineVariant variant = BaselineVariant::mult_sub_id;

  PrototypeMode prototype_mode() const {
    return use_qsam ? PrototypeMode::per_sample : PrototypeMode::averaged;
  }
};

/// Encoder/decoder pair owned by one aggregation point. Either half is
/// absent when the corresponding flag is off.
struct AggregatorStacks {
  std::optional<EncoderStack> isam;
  std::optional<DecoderStack> qsam;

  static AggregatorStacks init(const AttentionConfig& cfg, const AggregationFlags& flags,
                               std::mt19937_64& rng);
  void visit_params(const std::string& point, const ParamVisitor& f);
};

Tensor average_prototype(const Tensor& supports);

/// Support refinement at an aggregation point: the intra-support encoder
/// output added to its input rows.
Tensor refine_supports(const Tensor& supports, const EncoderStack& stack, const ForwardContext& ctx);

Tensor baseline_aggregate(const Tensor& query, const Tensor& proto, BaselineVariant variant);

/// Refines per-sample supports with the point's encoder (when present) and
/// collapses them to one mean vector when the flags select averaged mode.
/// Already-refined sets pass through unchanged.
PrototypeSet prepare_prototypes(const PrototypeSet& supports, const AggregatorStacks& stacks,
                                const AggregationFlags& flags, const ForwardContext& ctx);

/// Fuses query rows with a class's prototypes. Per-sample prototypes go
/// through the decoder; an averaged prototype goes through the baseline
/// fusion. Output is q x d, or q x 3d for the mult_sub_id baseline.
Tensor aggregate_rows(const Tensor& queries, const PrototypeSet& protos,
                      const AggregatorStacks& stacks, const AggregationFlags& flags,
                      const ForwardContext& ctx);

/// Flattens the map to H*W query rows, aggregates them against the
/// prototypes and restores the H x W layout.
FeatureMap query_spatial_aggregation(const FeatureMap& fm, const PrototypeSet& protos,
                                     const AggregatorStacks& stacks, const AggregationFlags& flags,
                                     const ForwardContext& ctx);

/// Aggregates every RoI row against the prototypes; boxes pass through.
RoIFeatures query_roi_aggregation(const RoIFeatures& rois, const PrototypeSet& protos,
                                  const AggregatorStacks& stacks, const AggregationFlags& flags,
                                  const ForwardContext& ctx);

}  // namespace protodet
