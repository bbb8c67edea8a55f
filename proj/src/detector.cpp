#include "protodet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace protodet {

namespace {

Tensor uniform_weight(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(fan_in * fan_out);
  for (double& x : v) x = u(rng);
  return Tensor({fan_in, fan_out}, std::move(v));
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

std::vector<Box> proposal_boxes(const std::vector<Proposal>& props) {
  std::vector<Box> boxes;
  boxes.reserve(props.size());
  for (const auto& p : props) boxes.push_back(p.box);
  return boxes;
}

// Index of the ground-truth box with the highest IoU, or npos when the best
// IoU is below `threshold`.
std::size_t best_match(const Box& box, const std::vector<Box>& gt, double threshold) {
  std::size_t best = static_cast<std::size_t>(-1);
  double best_iou = -1.0;
  for (std::size_t g = 0; g < gt.size(); ++g) {
    const double v = iou(box, gt[g]);
    if (v > best_iou) {
      best_iou = v;
      best = g;
    }
  }
  return best_iou >= threshold ? best : static_cast<std::size_t>(-1);
}

struct PreparedClass {
  int class_id = 0;
  Tensor refined;  // per-sample, after the RoI-point encoder (if any)
  PrototypeSet roi;
  std::optional<PrototypeSet> spatial;
};

PrototypeSet finalize(int class_id, const Tensor& refined, const AggregationFlags& flags) {
  PrototypeSet set;
  set.class_id = class_id;
  set.refined = true;
  set.mode = flags.prototype_mode();
  set.vectors = set.mode == PrototypeMode::averaged ? average_prototype(refined) : refined;
  return set;
}

Tensor refine(const Tensor& feats, const AggregatorStacks& stacks, const AggregationFlags& flags,
              const ForwardContext& ctx) {
  if (!flags.use_isam) return feats;
  return refine_supports(feats, *stacks.isam, ctx);
}

PreparedClass prepare_class(const Model& m, const SupportSet& s, const ForwardContext& ctx) {
  if (s.raw.rank() != 2 || s.raw.rows() == 0) {
    throw EmptyInputError("class " + std::to_string(s.class_id) + " has no support vectors");
  }
  PreparedClass p;
  p.class_id = s.class_id;
  const Tensor feats = support_features(s.raw, m.det);
  p.refined = refine(feats, m.roi, m.config.flags, ctx);
  p.roi = finalize(s.class_id, p.refined, m.config.flags);
  if (m.spatial) {
    const AggregationFlags sf = m.config.spatial_flags();
    p.spatial = finalize(s.class_id, refine(feats, *m.spatial, sf, ctx), sf);
  }
  return p;
}

std::vector<SupportSet> sorted_supports(std::vector<SupportSet> supports) {
  std::sort(supports.begin(), supports.end(),
            [](const SupportSet& a, const SupportSet& b) { return a.class_id < b.class_id; });
  for (std::size_t i = 1; i < supports.size(); ++i) {
    if (supports[i].class_id == supports[i - 1].class_id) {
      throw ContractError("duplicate support class " + std::to_string(supports[i].class_id));
    }
  }
  return supports;
}

// Multi-class logits over [background, classes...] from per-class head
// outputs: each class contributes its own column, the background logit is
// the mean of the per-class background columns.
Tensor assemble_multiclass(const std::vector<HeadOutput>& outs, const std::vector<int>& classes) {
  std::vector<Tensor> cols;
  Tensor bg;
  for (std::size_t j = 0; j < outs.size(); ++j) {
    const std::size_t zero = 0;
    Tensor b = select_cols(outs[j].logits, std::span<const std::size_t>(&zero, 1));
    bg = j == 0 ? b : add(bg, b);
  }
  cols.push_back(mul(bg, 1.0 / static_cast<double>(outs.size())));
  for (std::size_t j = 0; j < outs.size(); ++j) {
    const std::size_t col = static_cast<std::size_t>(classes[j]) + 1;
    cols.push_back(select_cols(outs[j].logits, std::span<const std::size_t>(&col, 1)));
  }
  return concat_cols(cols);
}

// Stacks the per-class offset blocks and picks, for every RoI, the block of
// `owner[i]`.
Tensor pick_offsets(const std::vector<HeadOutput>& outs, const std::vector<std::size_t>& owner) {
  std::vector<Tensor> blocks;
  for (const auto& o : outs) blocks.push_back(o.offsets);
  const Tensor stacked = blocks.size() == 1 ? blocks.front() : concat_rows(blocks);
  const std::size_t n = outs.front().offsets.rows();
  std::vector<std::size_t> rows(owner.size());
  for (std::size_t i = 0; i < owner.size(); ++i) rows[i] = owner[i] * n + i;
  return gather_rows(stacked, rows);
}

Tensor meta_logits(const Model& m, const std::vector<PreparedClass>& prepared,
                   std::vector<std::size_t>& labels) {
  std::vector<Tensor> rows;
  for (const auto& p : prepared) {
    rows.push_back(p.refined);
    labels.insert(labels.end(), p.refined.rows(), static_cast<std::size_t>(p.class_id));
  }
  return linear(rows.size() == 1 ? rows.front() : concat_rows(rows), m.det.meta_w, m.det.meta_b);
}

Tensor targets_tensor(const std::vector<std::vector<double>>& targets) {
  std::vector<double> flat;
  for (const auto& t : targets) flat.insert(flat.end(), t.begin(), t.end());
  return Tensor({targets.size(), 4}, std::move(flat));
}

std::vector<double> softmax_row(const Tensor& logits, std::size_t r) {
  std::vector<double> row = logits.row_values(r);
  const double mx = *std::max_element(row.begin(), row.end());
  double z = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : row) v /= z;
  return row;
}

void emit_class(const std::vector<Box>& roi_boxes, const Tensor& offsets,
                const std::vector<double>& conf, int class_id, std::uint64_t scene_id,
                double nms_iou, std::vector<Detection>& out) {
  std::vector<Box> boxes;
  boxes.reserve(roi_boxes.size());
  for (std::size_t i = 0; i < roi_boxes.size(); ++i) {
    const std::vector<double> off = offsets.row_values(i);
    Box b = decode_offsets(roi_boxes[i], off.data());
    if (!b.valid()) b = roi_boxes[i];
    boxes.push_back(b);
  }
  for (std::size_t i : nms(boxes, conf, nms_iou)) {
    out.push_back(Detection{boxes[i], class_id, std::clamp(conf[i], 0.0, 1.0), scene_id});
  }
}

std::vector<Detection> detect(const Model& m, const SceneSample& scene,
                              const std::map<int, PrototypeSet>& roi_protos,
                              const std::map<int, PrototypeSet>& spatial_protos) {
  const ForwardContext ctx = ForwardContext::eval();
  const DetectorConfig& cfg = m.config;
  const FeatureMap fm = backbone_stub(scene.grid, m.det);
  const auto anchors = enumerate_anchors(fm.height, fm.width, cfg.anchor_sizes);
  std::vector<Detection> out;
  if (roi_protos.empty()) throw ContractError("prototype cache is empty");

  if (cfg.style == DetectorStyle::fsdetview) {
    const RpnOutput rpn = rpn_forward(fm, m.det, anchors);
    const auto boxes = proposal_boxes(select_proposals(rpn, anchors, cfg.top_k, fm.height, fm.width));
    const RoIFeatures rois = roi_extract(fm, boxes);
    std::vector<HeadOutput> outs;
    std::vector<int> classes;
    for (const auto& [cls, protos] : roi_protos) {
      const Tensor agg = aggregate_rows(rois.data, protos, m.roi, cfg.flags, ctx);
      outs.push_back(head_forward(RoIFeatures(agg, rois.boxes), m.det, HeadMode::multiclass));
      classes.push_back(cls);
    }
    const Tensor logits = assemble_multiclass(outs, classes);
    std::vector<std::vector<double>> probs;
    for (std::size_t i = 0; i < boxes.size(); ++i) probs.push_back(softmax_row(logits, i));
    for (std::size_t j = 0; j < classes.size(); ++j) {
      std::vector<double> conf(boxes.size());
      for (std::size_t i = 0; i < boxes.size(); ++i) conf[i] = probs[i][j + 1];
      emit_class(boxes, outs[j].offsets, conf, classes[j], scene.id, cfg.nms_iou, out);
    }
    return out;
  }

  for (const auto& [cls, protos] : roi_protos) {
    auto sp = spatial_protos.find(cls);
    if (sp == spatial_protos.end()) {
      throw ContractError("no spatial prototypes for class " + std::to_string(cls));
    }
    const FeatureMap agg_map =
        query_spatial_aggregation(fm, sp->second, *m.spatial, cfg.spatial_flags(), ctx);
    const RpnOutput rpn = rpn_forward(agg_map, m.det, anchors);
    const auto boxes = proposal_boxes(select_proposals(rpn, anchors, cfg.top_k, fm.height, fm.width));
    const RoIFeatures rois = roi_extract(fm, boxes);
    const Tensor agg = aggregate_rows(rois.data, protos, m.roi, cfg.flags, ctx);
    const HeadOutput o = head_forward(RoIFeatures(agg, rois.boxes), m.det, HeadMode::binary_match);
    std::vector<double> conf(boxes.size());
    for (std::size_t i = 0; i < boxes.size(); ++i) conf[i] = softmax_row(o.logits, i)[1];
    emit_class(boxes, o.offsets, conf, cls, scene.id, cfg.nms_iou, out);
  }
  return out;
}

}  // namespace

std::string to_string(DetectorStyle s) { return s == DetectorStyle::fewx ? "fewx" : "fsdetview"; }

DetectorStyle parse_detector_style(const std::string& s) {
  if (s == "fewx") return DetectorStyle::fewx;
  if (s == "fsdetview") return DetectorStyle::fsdetview;
  throw ParameterError("unknown detector style '" + s + "'");
}

std::size_t DetectorConfig::head_input_width() const {
  if (!flags.use_qsam && flags.variant == BaselineVariant::mult_sub_id) return 3 * dim;
  return dim;
}

AggregationFlags DetectorConfig::spatial_flags() const {
  AggregationFlags f = flags;
  f.variant = BaselineVariant::mult;
  return f;
}

void DetectorConfig::validate() const {
  if (dim < 1) throw ParameterError("detector.dim must be >= 1");
  if (num_classes < 2) throw ParameterError("detector.num_classes must be >= 2");
  if (attention.model_dim != dim) {
    throw ParameterError("attention.model_dim must equal the feature dimension");
  }
  attention.validate();
  if (anchor_sizes.empty()) throw ConfigurationError("detector.anchor_sizes is empty");
  if (top_k < 1) throw ParameterError("detector.top_k must be >= 1");
  if (!(negative_iou <= positive_iou)) {
    throw ParameterError("detector.negative_iou must not exceed detector.positive_iou");
  }
}

DetectorParams DetectorParams::init(const DetectorConfig& cfg, std::mt19937_64& rng) {
  const std::size_t d = cfg.dim;
  DetectorParams p;
  p.backbone_w = uniform_weight(d, d, rng);
  p.backbone_b = Tensor::zeros({d});
  p.rpn_cls_w = uniform_weight(d, 2, rng);
  p.rpn_cls_b = Tensor::zeros({2});
  p.rpn_box_w = uniform_weight(d, 4, rng);
  p.rpn_box_b = Tensor::zeros({4});
  p.head_in_w = uniform_weight(cfg.head_input_width(), d, rng);
  p.head_in_b = Tensor::zeros({d});
  p.cls_w = uniform_weight(d, cfg.head_outputs(), rng);
  p.cls_b = Tensor::zeros({cfg.head_outputs()});
  p.box_w = uniform_weight(d, 4, rng);
  p.box_b = Tensor::zeros({4});
  p.meta_w = uniform_weight(d, cfg.num_classes, rng);
  p.meta_b = Tensor::zeros({cfg.num_classes});
  return p;
}

void DetectorParams::visit_params(const ParamVisitor& f) {
  f("backbone.w", backbone_w);
  f("backbone.b", backbone_b);
  f("rpn.cls.w", rpn_cls_w);
  f("rpn.cls.b", rpn_cls_b);
  f("rpn.box.w", rpn_box_w);
  f("rpn.box.b", rpn_box_b);
  if (head_in_w) {
    f("head.in.w", *head_in_w);
    f("head.in.b", *head_in_b);
  }
  f("head.cls.w", cls_w);
  f("head.cls.b", cls_b);
  f("head.box.w", box_w);
  f("head.box.b", box_b);
  f("meta.w", meta_w);
  f("meta.b", meta_b);
}

Model Model::init(const DetectorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Model m;
  m.config = cfg;
  m.det = DetectorParams::init(cfg, rng);
  m.roi = AggregatorStacks::init(cfg.attention, cfg.flags, rng);
  if (cfg.style == DetectorStyle::fewx) {
    m.spatial = AggregatorStacks::init(cfg.attention, cfg.spatial_flags(), rng);
  }
  return m;
}

void Model::visit_params(const ParamVisitor& f) {
  det.visit_params(f);
  if (spatial) spatial->visit_params("a", f);
  roi.visit_params("b", f);
}

Model Model::tracked(Tape& tape) const {
  Model copy = *this;
  copy.visit_params([&](const std::string&, Tensor& t) { t = tape.watch(t); });
  return copy;
}

std::vector<Tensor> Model::parameters() const {
  Model copy = *this;
  std::vector<Tensor> out;
  copy.visit_params([&](const std::string&, Tensor& t) { out.push_back(t); });
  return out;
}

Model Model::with_parameters(const std::vector<Tensor>& values) const {
  Model copy = *this;
  std::size_t i = 0;
  copy.visit_params([&](const std::string& name, Tensor& t) {
    if (i >= values.size()) throw DimensionError("too few parameter tensors");
    if (values[i].shape() != t.shape()) {
      throw DimensionError(name + ": expected " + shape_str(t.shape()) + ", got " +
                           shape_str(values[i].shape()));
    }
    t = values[i++];
  });
  if (i != values.size()) throw DimensionError("too many parameter tensors");
  return copy;
}

FeatureMap backbone_stub(const FeatureMap& grid, const DetectorParams& params) {
  return FeatureMap(grid.height, grid.width, support_features(grid.data, params));
}

Tensor support_features(const Tensor& raw, const DetectorParams& params) {
  if (raw.rank() != 2 || raw.cols() != params.backbone_w.rows()) {
    throw DimensionError("backbone expects rows of width " +
                         std::to_string(params.backbone_w.rows()) + ", got " +
                         shape_str(raw.shape()));
  }
  return relu(linear(raw, params.backbone_w, params.backbone_b));
}

std::vector<Anchor> enumerate_anchors(std::size_t height, std::size_t width,
                                      const std::vector<std::size_t>& sizes) {
  std::vector<std::size_t> sorted = sizes;
  std::sort(sorted.begin(), sorted.end());
  std::vector<Anchor> anchors;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t s : sorted) {
        if (s == 0 || y + s > height || x + s > width) continue;
        anchors.push_back(Anchor{Box{static_cast<double>(x), static_cast<double>(y),
                                     static_cast<double>(x + s), static_cast<double>(y + s)},
                                 s});
      }
    }
  }
  return anchors;
}

RpnOutput rpn_forward(const FeatureMap& fm, const DetectorParams& params,
                      const std::vector<Anchor>& anchors) {
  if (anchors.empty()) throw ConfigurationError("no anchor fits the feature map");
  std::vector<std::vector<std::size_t>> groups;
  groups.reserve(anchors.size());
  for (const auto& a : anchors) groups.push_back(fm.cells_in(a.box));
  const Tensor pooled = pool_rows(fm.data, groups);
  return {linear(pooled, params.rpn_cls_w, params.rpn_cls_b),
          linear(pooled, params.rpn_box_w, params.rpn_box_b)};
}

std::vector<Proposal> select_proposals(const RpnOutput& rpn, const std::vector<Anchor>& anchors,
                                       std::size_t top_k, std::size_t height, std::size_t width) {
  if (top_k < 1) throw ParameterError("top_k must be >= 1");
  const std::size_t n = anchors.size();
  std::vector<double> score(n);
  for (std::size_t i = 0; i < n; ++i) score[i] = rpn.logits.at(i, 1) - rpn.logits.at(i, 0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto key = [&](std::size_t i) {
    return std::tuple(anchors[i].box.y1, anchors[i].box.x1, anchors[i].size);
  };
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (score[a] != score[b]) return score[a] > score[b];
    return key(a) < key(b);
  });
  order.resize(std::min(top_k, n));

  const double W = static_cast<double>(width), H = static_cast<double>(height);
  std::vector<Proposal> out;
  out.reserve(order.size());
  for (std::size_t i : order) {
    const std::vector<double> off = rpn.offsets.row_values(i);
    const Box d = decode_offsets(anchors[i].box, off.data());
    Box b{std::clamp(std::round(d.x1), 0.0, W - 1), std::clamp(std::round(d.y1), 0.0, H - 1),
          std::clamp(std::round(d.x2), 1.0, W), std::clamp(std::round(d.y2), 1.0, H)};
    if (b.x2 <= b.x1) b.x2 = b.x1 + 1;
    if (b.y2 <= b.y1) b.y2 = b.y1 + 1;
    out.push_back(Proposal{b, score[i], anchors[i].box});
  }
  return out;
}

std::vector<Proposal> propose(const FeatureMap& fm, const DetectorParams& params,
                              std::size_t top_k, const std::vector<std::size_t>& anchor_sizes) {
  if (top_k < 1) throw ParameterError("top_k must be >= 1");
  const auto anchors = enumerate_anchors(fm.height, fm.width, anchor_sizes);
  return select_proposals(rpn_forward(fm, params, anchors), anchors, top_k, fm.height, fm.width);
}

RoIFeatures roi_extract(const FeatureMap& fm, const std::vector<Box>& boxes) {
  if (boxes.empty()) return RoIFeatures(Tensor({0, fm.dim()}, {}), {});
  std::vector<std::vector<std::size_t>> groups;
  groups.reserve(boxes.size());
  for (const auto& b : boxes) groups.push_back(fm.cells_in(b));
  return RoIFeatures(pool_rows(fm.data, groups), boxes);
}

HeadOutput head_forward(const RoIFeatures& rois, const DetectorParams& params, HeadMode mode) {
  if (rois.count() == 0) throw EmptyInputError("head needs at least one RoI");
  const std::size_t expected_out =
      mode == HeadMode::binary_match ? 2 : params.cls_w.cols();
  if (params.cls_w.cols() != expected_out || (mode == HeadMode::multiclass && expected_out < 3)) {
    throw DimensionError("head weights do not match the requested head mode");
  }
  Tensor x = rois.data;
  if (params.head_in_w) {
    x = relu(linear(x, *params.head_in_w, *params.head_in_b));
  } else if (x.cols() != params.cls_w.rows()) {
    throw DimensionError("RoI width " + std::to_string(x.cols()) + " does not match the head");
  }
  return {linear(x, params.cls_w, params.cls_b), linear(x, params.box_w, params.box_b)};
}

void assign_anchors(const std::vector<Anchor>& anchors, const std::vector<Box>& gt,
                    double pos_iou, double neg_iou, std::vector<std::size_t>& labels,
                    std::vector<std::vector<double>>& targets) {
  labels.assign(anchors.size(), 0);
  targets.assign(anchors.size(), std::vector<double>(4, 0.0));
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    double best = 0.0;
    std::size_t arg = 0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(anchors[i].box, gt[g]);
      if (v > best) {
        best = v;
        arg = g;
      }
    }
    if (best >= pos_iou) {
      labels[i] = 1;
      targets[i] = encode_offsets(anchors[i].box, gt[arg]);
    } else if (best >= neg_iou) {
      labels[i] = LossInputs::kIgnore;
    }
  }
}

LossTerms compute_losses(const LossInputs& in) {
  LossTerms t;
  const Tensor zero = Tensor::scalar(0.0);

  std::vector<std::size_t> neg_rows, pos_rows;
  std::vector<std::vector<double>> pos_targets;
  if (in.rpn_labels.size() != in.rpn_logits.rows() || in.rpn_targets.size() != in.rpn_labels.size()) {
    throw ContractError("anchor labels do not match the proposal-stage outputs");
  }
  for (std::size_t i = 0; i < in.rpn_labels.size(); ++i) {
    if (in.rpn_labels[i] == LossInputs::kIgnore) continue;
    if (in.rpn_labels[i] == 1) {
      pos_rows.push_back(i);
      pos_targets.push_back(in.rpn_targets[i]);
    } else {
      neg_rows.push_back(i);
    }
  }
  // Positive and negative anchors carry equal total weight.
  auto anchor_ce = [&](const std::vector<std::size_t>& rows, std::size_t label) {
    return cross_entropy(gather_rows(in.rpn_logits, rows), std::vector<std::size_t>(rows.size(), label));
  };
  if (pos_rows.empty() && neg_rows.empty()) {
    t.rpn_cls = zero;
  } else if (pos_rows.empty()) {
    t.rpn_cls = anchor_ce(neg_rows, 0);
  } else if (neg_rows.empty()) {
    t.rpn_cls = anchor_ce(pos_rows, 1);
  } else {
    t.rpn_cls = mul(add(anchor_ce(pos_rows, 1), anchor_ce(neg_rows, 0)), 0.5);
  }
  t.rpn_loc = pos_rows.empty()
                  ? zero
                  : smooth_l1(gather_rows(in.rpn_offsets, pos_rows), targets_tensor(pos_targets));

  if (in.det_labels.size() != in.det_logits.rows() || in.det_targets.size() != in.det_labels.size()) {
    throw ContractError("RoI labels do not match the head outputs");
  }
  t.det_cls = cross_entropy(in.det_logits, in.det_labels);
  std::vector<std::size_t> det_pos;
  std::vector<std::vector<double>> det_targets;
  for (std::size_t i = 0; i < in.det_labels.size(); ++i) {
    if (in.det_labels[i] == 0) continue;
    det_pos.push_back(i);
    det_targets.push_back(in.det_targets[i]);
  }
  t.det_loc = det_pos.empty()
                  ? zero
                  : smooth_l1(gather_rows(in.det_offsets, det_pos), targets_tensor(det_targets));

  if (in.meta_labels.size() != in.meta_logits.rows()) {
    throw ContractError("meta labels do not match the support rows");
  }
  t.meta = cross_entropy(in.meta_logits, in.meta_labels);

  t.total = add(add(add(add(t.rpn_loc, t.rpn_cls), t.det_loc), t.det_cls), t.meta);
  t.values.rpn_loc = t.rpn_loc.item();
  t.values.rpn_cls = t.rpn_cls.item();
  t.values.det_loc = t.det_loc.item();
  t.values.det_cls = t.det_cls.item();
  t.values.meta = t.meta.item();
  t.values.total = t.total.item();
  return t;
}

LossTerms episode_losses(const Model& model, const SceneSample& query,
                         const std::vector<SupportSet>& supports_in, const ForwardContext& ctx) {
  const DetectorConfig& cfg = model.config;
  if (supports_in.empty()) throw EmptyInputError("episode has no support classes");
  if (query.boxes.empty()) throw ContractError("episode query has no ground truth");
  const std::vector<SupportSet> supports = sorted_supports(supports_in);
  const FeatureMap fm = backbone_stub(query.grid, model.det);
  const auto anchors = enumerate_anchors(fm.height, fm.width, cfg.anchor_sizes);

  std::vector<PreparedClass> prepared;
  std::vector<int> classes;
  for (const auto& s : supports) {
    prepared.push_back(prepare_class(model, s, ctx));
    classes.push_back(s.class_id);
  }

  LossInputs in;
  in.meta_logits = meta_logits(model, prepared, in.meta_labels);

  if (cfg.style == DetectorStyle::fsdetview) {
    const RpnOutput rpn = rpn_forward(fm, model.det, anchors);
    in.rpn_logits = rpn.logits;
    in.rpn_offsets = rpn.offsets;
    assign_anchors(anchors, query.boxes, cfg.positive_iou, cfg.negative_iou, in.rpn_labels,
                   in.rpn_targets);
    std::vector<Box> boxes =
        proposal_boxes(select_proposals(rpn, anchors, cfg.top_k, fm.height, fm.width));
    boxes.insert(boxes.end(), query.boxes.begin(), query.boxes.end());
    const RoIFeatures rois = roi_extract(fm, boxes);

    std::vector<HeadOutput> outs;
    for (const auto& p : prepared) {
      const Tensor agg = aggregate_rows(rois.data, p.roi, model.roi, cfg.flags, ctx);
      outs.push_back(head_forward(RoIFeatures(agg, rois.boxes), model.det, HeadMode::multiclass));
    }
    in.det_logits = assemble_multiclass(outs, classes);
    std::vector<std::size_t> owner(boxes.size(), 0);
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      const std::size_t g = best_match(boxes[i], query.boxes, cfg.positive_iou);
      std::size_t label = 0;
      std::vector<double> target(4, 0.0);
      if (g != static_cast<std::size_t>(-1)) {
        auto it = std::find(classes.begin(), classes.end(), query.labels[g]);
        if (it != classes.end()) {
          owner[i] = static_cast<std::size_t>(it - classes.begin());
          label = owner[i] + 1;
          target = encode_offsets(boxes[i], query.boxes[g]);
        }
      }
      in.det_labels.push_back(label);
      in.det_targets.push_back(std::move(target));
    }
    in.det_offsets = pick_offsets(outs, owner);
    return compute_losses(in);
  }

  // fewx: one aggregated map, proposal set and binary head pass per class.
  std::vector<Tensor> rpn_logits, rpn_offsets, det_logits, det_offsets;
  for (std::size_t j = 0; j < prepared.size(); ++j) {
    const PreparedClass& p = prepared[j];
    std::vector<Box> gt;
    for (std::size_t g = 0; g < query.boxes.size(); ++g)
      if (query.labels[g] == p.class_id) gt.push_back(query.boxes[g]);

    const FeatureMap agg_map =
        query_spatial_aggregation(fm, *p.spatial, *model.spatial, cfg.spatial_flags(), ctx);
    const RpnOutput rpn = rpn_forward(agg_map, model.det, anchors);
    rpn_logits.push_back(rpn.logits);
    rpn_offsets.push_back(rpn.offsets);
    std::vector<std::size_t> labels;
    std::vector<std::vector<double>> targets;
    assign_anchors(anchors, gt, cfg.positive_iou, cfg.negative_iou, labels, targets);
    in.rpn_labels.insert(in.rpn_labels.end(), labels.begin(), labels.end());
    in.rpn_targets.insert(in.rpn_targets.end(), targets.begin(), targets.end());

    std::vector<Box> boxes =
        proposal_boxes(select_proposals(rpn, anchors, cfg.top_k, fm.height, fm.width));
    boxes.insert(boxes.end(), gt.begin(), gt.end());
    const RoIFeatures rois = roi_extract(fm, boxes);
    const Tensor agg = aggregate_rows(rois.data, p.roi, model.roi, cfg.flags, ctx);
    const HeadOutput o = head_forward(RoIFeatures(agg, rois.boxes), model.det, HeadMode::binary_match);
    det_logits.push_back(o.logits);
    det_offsets.push_back(o.offsets);
    for (const auto& b : boxes) {
      const std::size_t g = gt.empty() ? static_cast<std::size_t>(-1) : best_match(b, gt, cfg.positive_iou);
      if (g == static_cast<std::size_t>(-1)) {
        in.det_labels.push_back(0);
        in.det_targets.emplace_back(4, 0.0);
      } else {
        in.det_labels.push_back(1);
        in.det_targets.push_back(encode_offsets(b, gt[g]));
      }
    }
  }
  in.rpn_logits = concat_rows(rpn_logits);
  in.rpn_offsets = concat_rows(rpn_offsets);
  in.det_logits = concat_rows(det_logits);
  in.det_offsets = concat_rows(det_offsets);
  return compute_losses(in);
}

std::vector<int> PrototypeCache::classes() const {
  std::vector<int> out;
  for (const auto& [cls, _] : roi) out.push_back(cls);
  return out;
}

PrototypeCache build_prototype_cache(const Model& model, const std::vector<SupportSet>& supports,
                                     std::uint64_t seed) {
  PrototypeCache cache;
  cache.mode = model.config.flags.prototype_mode();
  cache.seed = seed;
  const ForwardContext ctx = ForwardContext::eval();
  for (const auto& s : sorted_supports(supports)) {
    PreparedClass p = prepare_class(model, s, ctx);
    cache.refined.emplace(s.class_id, p.refined);
    cache.roi.emplace(s.class_id, std::move(p.roi));
    if (p.spatial) cache.spatial.emplace(s.class_id, std::move(*p.spatial));
  }
  return cache;
}

std::vector<Detection> infer(const Model& model, const SceneSample& scene,
                             const PrototypeCache& cache) {
  if (model.spatial && cache.spatial.size() != cache.roi.size()) {
    throw ContractError("cache lacks spatial prototypes for this detector");
  }
  return detect(model, scene, cache.roi, cache.spatial);
}

std::vector<Detection> infer_uncached(const Model& model, const SceneSample& scene,
                                      const std::vector<SupportSet>& supports) {
  std::map<int, PrototypeSet> roi, spatial;
  for (const auto& s : sorted_supports(supports)) {
    PreparedClass p = prepare_class(model, s, ForwardContext::eval());
    roi.emplace(s.class_id, std::move(p.roi));
    if (p.spatial) spatial.emplace(s.class_id, std::move(*p.spatial));
  }
  return detect(model, scene, roi, spatial);
}

void to_json(nlohmann::json& j, const Detection& d) {
  j = {{"box", d.box}, {"class_id", d.class_id}, {"confidence", d.confidence},
       {"scene_id", d.scene_id}};
}

void from_json(const nlohmann::json& j, Detection& d) {
  d.box = j.at("box").get<Box>();
  d.class_id = j.at("class_id").get<int>();
  d.confidence = j.at("confidence").get<double>();
  d.scene_id = j.at("scene_id").get<std::uint64_t>();
}

}  // namespace protodet
