#include "protodet/aggregation.hpp"

namespace protodet {

std::string to_string(PrototypeMode m) {
  return m == PrototypeMode::per_sample ? "per_sample" : "averaged";
}

std::string to_string(BaselineVariant v) {
  return v == BaselineVariant::mult ? "mult" : "mult_sub_id";
}

PrototypeMode parse_prototype_mode(const std::string& s) {
  if (s == "per_sample") return PrototypeMode::per_sample;
  if (s == "averaged") return PrototypeMode::averaged;
  throw ParameterError("unknown prototype mode '" + s + "'");
}

BaselineVariant parse_baseline_variant(const std::string& s) {
  if (s == "mult") return BaselineVariant::mult;
  if (s == "mult_sub_id") return BaselineVariant::mult_sub_id;
  throw ParameterError("unknown baseline variant '" + s + "'");
}

AggregatorStacks AggregatorStacks::init(const AttentionConfig& cfg, const AggregationFlags& flags,
                                        std::mt19937_64& rng) {
  AggregatorStacks s;
  if (flags.use_isam) s.isam = EncoderStack::init(cfg, rng);
  if (flags.use_qsam) s.qsam = DecoderStack::init(cfg, rng);
  return s;
}

void AggregatorStacks::visit_params(const std::string& point, const ParamVisitor& f) {
  if (isam) isam->visit_params("isam." + point, f);
  if (qsam) qsam->visit_params("qsam." + point, f);
}

Tensor average_prototype(const Tensor& supports) {
  if (supports.rank() != 2) throw DimensionError("supports must be a K x d matrix");
  if (supports.rows() == 0) throw EmptyInputError("no support vectors to average");
  return mean_rows(supports);
}

Tensor baseline_aggregate(const Tensor& query, const Tensor& proto, BaselineVariant variant) {
  if (query.rank() != 2 || proto.numel() != query.cols() ||
      (proto.rank() == 2 && proto.rows() != 1)) {
    throw DimensionError("baseline fusion: prototype " + shape_str(proto.shape()) +
                         " does not match query " + shape_str(query.shape()));
  }
  Tensor product = mul(query, proto);
  if (variant == BaselineVariant::mult) return product;
  return concat_cols({product, sub(query, proto), query});
}

Tensor refine_supports(const Tensor& supports, const EncoderStack& stack, const ForwardContext& ctx) {
  return add(supports, isam_refine(supports, stack, ctx));
}

PrototypeSet prepare_prototypes(const PrototypeSet& supports, const AggregatorStacks& stacks,
                                const AggregationFlags& flags, const ForwardContext& ctx) {
  if (supports.vectors.rank() != 2 || supports.vectors.rows() == 0) {
    throw EmptyInputError("class " + std::to_string(supports.class_id) + " has no supports");
  }
  if (supports.refined) return supports;
  PrototypeSet out;
  out.class_id = supports.class_id;
  out.refined = true;
  out.vectors = supports.vectors;
  if (flags.use_isam) {
    if (!stacks.isam) throw ContractError("intra-support encoder requested but not built");
    out.vectors = refine_supports(supports.vectors, *stacks.isam, ctx);
  }
  out.mode = flags.prototype_mode();
  if (out.mode == PrototypeMode::averaged) out.vectors = average_prototype(out.vectors);
  return out;
}

Tensor aggregate_rows(const Tensor& queries, const PrototypeSet& protos,
                      const AggregatorStacks& stacks, const AggregationFlags& flags,
                      const ForwardContext& ctx) {
  if (queries.rank() != 2 || queries.rows() == 0) throw EmptyInputError("no query rows");
  const PrototypeSet ready = prepare_prototypes(protos, stacks, flags, ctx);
  if (ready.vectors.cols() != queries.cols()) {
    throw DimensionError("prototype width " + std::to_string(ready.vectors.cols()) +
                         " differs from query width " + std::to_string(queries.cols()));
  }
  if (ready.mode == PrototypeMode::per_sample) {
    if (!stacks.qsam) throw ContractError("per-sample aggregation needs the decoder stack");
    return qsam_aggregate(queries, ready.vectors, *stacks.qsam, ctx);
  }
  // A per-sample set reaching the baseline path is averaged first.
  Tensor proto = ready.count() == 1 ? ready.vectors : average_prototype(ready.vectors);
  return baseline_aggregate(queries, proto, flags.variant);
}

FeatureMap query_spatial_aggregation(const FeatureMap& fm, const PrototypeSet& protos,
                                     const AggregatorStacks& stacks, const AggregationFlags& flags,
                                     const ForwardContext& ctx) {
  return FeatureMap(fm.height, fm.width, aggregate_rows(fm.data, protos, stacks, flags, ctx));
}

RoIFeatures query_roi_aggregation(const RoIFeatures& rois, const PrototypeSet& protos,
                                  const AggregatorStacks& stacks, const AggregationFlags& flags,
                                  const ForwardContext& ctx) {
  if (rois.count() == 0) throw EmptyInputError("no RoIs to aggregate");
  return RoIFeatures(aggregate_rows(rois.data, protos, stacks, flags, ctx), rois.boxes);
}

}  // namespace protodet
