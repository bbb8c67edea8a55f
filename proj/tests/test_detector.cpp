#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "oracle.hpp"
#include "protodet/detector.hpp"
#include "protodet/gradcheck_suite.hpp"

using namespace protodet;

namespace {

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

DetectorConfig small_config(DetectorStyle style = DetectorStyle::fsdetview, AggregationFlags flags = {}) {
  DetectorConfig c;
  c.style = style;
  c.dim = 4;
  c.num_classes = 3;
  c.attention.model_dim = 4;
  c.attention.heads = 2;
  c.attention.layers = 1;
  c.attention.mlp_hidden = 8;
  c.flags = flags;
  c.anchor_sizes = {1, 2};
  c.top_k = 5;
  return c;
}

Tensor identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(v));
}

FeatureMap random_map(std::size_t h, std::size_t w, std::size_t d, std::mt19937_64& rng) {
  return FeatureMap(h, w, uniform({h * w, d}, rng));
}

}  // namespace

TEST(DetectorConfig, ValidationNamesProblems) {
  DetectorConfig c = small_config();
  c.top_k = 0;
  EXPECT_THROW(c.validate(), ParameterError);
  c = small_config();
  c.anchor_sizes.clear();
  EXPECT_THROW(c.validate(), ConfigurationError);
  c = small_config();
  c.attention.model_dim = 8;
  EXPECT_ANY_THROW(c.validate());
  EXPECT_NO_THROW(small_config().validate());
}

TEST(Backbone, IdentityOnNonnegativeInput) {
  std::mt19937_64 rng(1);
  DetectorParams p = DetectorParams::init(small_config(), rng);
  p.backbone_w = identity(4);
  p.backbone_b = Tensor::zeros({4});
  const FeatureMap fm(2, 3, uniform({6, 4}, rng, 0, 2));
  EXPECT_TRUE(backbone_stub(fm, p).data.same_values(fm.data));
}

TEST(Backbone, ZeroWeightsGiveZeroMap) {
  std::mt19937_64 rng(2);
  DetectorParams p = DetectorParams::init(small_config(), rng);
  p.backbone_w = Tensor::zeros({4, 4});
  p.backbone_b = Tensor::zeros({4});
  const FeatureMap out = backbone_stub(random_map(2, 2, 4, rng), p);
  EXPECT_TRUE(out.data.same_values(Tensor::zeros({4, 4})));
}

TEST(Backbone, MatchesPerCellOracle) {
  std::mt19937_64 rng(3);
  DetectorParams p = DetectorParams::init(small_config(), rng);
  p.backbone_b = uniform({4}, rng);
  const FeatureMap fm = random_map(3, 3, 4, rng);
  const FeatureMap out = backbone_stub(fm, p);
  const auto w = oracle::of(p.backbone_w);
  for (std::size_t c = 0; c < 9; ++c) {
    const auto cell = oracle::relu(oracle::add_row(oracle::matmul({fm.data.row_values(c)}, w), p.backbone_b.to_vector()));
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(out.data.at(c, k), cell[0][k], 1e-15);
  }
  EXPECT_EQ(out.height, 3u);
  EXPECT_EQ(out.width, 3u);
}

TEST(Backbone, DimensionMismatchThrows) {
  std::mt19937_64 rng(4);
  const DetectorParams p = DetectorParams::init(small_config(), rng);
  EXPECT_THROW(backbone_stub(random_map(2, 2, 3, rng), p), DimensionError);
}

TEST(Anchors, OrderedAndInBounds) {
  const auto anchors = enumerate_anchors(3, 4, {2, 1});
  // size 1: 12 positions, size 2: 2 x 3 = 6 positions.
  ASSERT_EQ(anchors.size(), 18u);
  for (std::size_t i = 1; i < anchors.size(); ++i) {
    const auto a = std::tuple(anchors[i - 1].box.y1, anchors[i - 1].box.x1, anchors[i - 1].size);
    const auto b = std::tuple(anchors[i].box.y1, anchors[i].box.x1, anchors[i].size);
    EXPECT_LT(a, b);
  }
  for (const auto& a : anchors) EXPECT_TRUE(a.box.within(4, 3));
  EXPECT_TRUE(enumerate_anchors(2, 2, {3}).empty());
}

TEST(Propose, SaturatesWhenTopKExceedsAnchors) {
  std::mt19937_64 rng(5);
  const DetectorParams p = DetectorParams::init(small_config(), rng);
  const auto props = propose(random_map(2, 2, 4, rng), p, 100, {1, 2});
  EXPECT_EQ(props.size(), 5u);
}

TEST(Propose, TiesBreakLexicographically) {
  std::mt19937_64 rng(6);
  DetectorParams p = DetectorParams::init(small_config(), rng);
  p.rpn_cls_w = Tensor::zeros({4, 2});
  p.rpn_box_w = Tensor::zeros({4, 4});
  const auto props = propose(random_map(3, 3, 4, rng), p, 4, {1, 2});
  const std::vector<Box> expected{{0, 0, 1, 1}, {0, 0, 2, 2}, {1, 0, 2, 1}, {1, 0, 3, 2}};
  ASSERT_EQ(props.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(props[i].anchor, expected[i]);
}

TEST(Propose, MatchesExhaustiveScoringOracle) {
  std::mt19937_64 rng(7);
  const DetectorParams p = DetectorParams::init(small_config(), rng);
  const FeatureMap fm = random_map(4, 4, 4, rng);
  const auto anchors = enumerate_anchors(4, 4, {1, 2});
  struct Scored {
    double score;
    Box box;
    std::size_t size;
  };
  std::vector<Scored> all;
  for (const auto& a : anchors) {
    std::vector<double> pooled(4, 0.0);
    const auto cells = fm.cells_in(a.box);
    for (std::size_t c : cells)
      for (std::size_t k = 0; k < 4; ++k) pooled[k] += fm.data.at(c, k) / static_cast<double>(cells.size());
    double s = p.rpn_cls_b[1] - p.rpn_cls_b[0];
    for (std::size_t k = 0; k < 4; ++k) s += pooled[k] * (p.rpn_cls_w.at(k, 1) - p.rpn_cls_w.at(k, 0));
    all.push_back({s, a.box, a.size});
  }
  std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
  const auto props = propose(fm, p, 6, {1, 2});
  ASSERT_EQ(props.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(props[i].anchor, all[i].box);
    EXPECT_NEAR(props[i].score, all[i].score, 1e-12);
    EXPECT_TRUE(props[i].box.within(4, 4));
    EXPECT_TRUE(props[i].box.is_integral());
  }
}

TEST(Propose, RepeatedCallsAreBitIdentical) {
  std::mt19937_64 rng(8);
  const DetectorParams p = DetectorParams::init(small_config(), rng);
  const FeatureMap fm = random_map(4, 4, 4, rng);
  const auto a = propose(fm, p, 7, {1, 2});
  const auto b = propose(fm, p, 7, {1, 2});
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].box, b[i].box);
    EXPECT_EQ(a[i].score, b[i].score);
  }
}

TEST(Propose, NoValidAnchorsThrows) {
  std::mt19937_64 rng(9);
  const DetectorParams p = DetectorParams::init(small_config(), rng);
  EXPECT_THROW(propose(random_map(2, 2, 4, rng), p, 3, {3}), ConfigurationError);
  EXPECT_THROW(propose(random_map(2, 2, 4, rng), p, 0, {1}), ParameterError);
}

TEST(RoiExtract, ConstantMap) {
  const FeatureMap fm(3, 3, Tensor::filled({9, 2}, -0.5));
  const RoIFeatures r = roi_extract(fm, {{0, 0, 2, 3}, {1, 1, 2, 2}});
  EXPECT_TRUE(r.data.same_values(Tensor::filled({2, 2}, -0.5)));
}

TEST(RoiExtract, SingleCellBox) {
  std::mt19937_64 rng(10);
  const FeatureMap fm = random_map(3, 3, 2, rng);
  const RoIFeatures r = roi_extract(fm, {{2, 1, 3, 2}});
  EXPECT_EQ(r.data.row_values(0), fm.data.row_values(fm.cell(1, 2)));
}

TEST(RoiExtract, TwoByThreeHandMean) {
  std::vector<double> v(12);
  std::iota(v.begin(), v.end(), 0.0);
  const FeatureMap fm(3, 4, Tensor({12, 1}, v));
  // x in [1,3), y in [0,3): cells 1,2,5,6,9,10.
  const RoIFeatures r = roi_extract(fm, {{1, 0, 3, 3}});
  EXPECT_DOUBLE_EQ(r.data.item(), (1 + 2 + 5 + 6 + 9 + 10) / 6.0);
}

TEST(RoiExtract, OutOfBoundsThrows) {
  const FeatureMap fm(2, 2, Tensor::zeros({4, 1}));
  EXPECT_THROW(roi_extract(fm, {{1, 1, 3, 2}}), BoundsError);
}

TEST(Head, ZeroWeightsGiveUniformLogitsAndZeroOffsets) {
  std::mt19937_64 rng(11);
  DetectorParams p = DetectorParams::init(small_config(), rng);
  p.visit_params([](const std::string& name, Tensor& t) {
    if (name.rfind("head.", 0) == 0) t = Tensor::zeros(t.shape());
  });
  const HeadOutput out = head_forward(RoIFeatures(uniform({3, 4}, rng), {{0, 0, 1, 1}, {0, 0, 1, 1}, {0, 0, 1, 1}}),
                                      p, HeadMode::multiclass);
  EXPECT_TRUE(out.logits.same_values(Tensor::zeros({3, 4})));
  EXPECT_TRUE(out.offsets.same_values(Tensor::zeros({3, 4})));
}

TEST(Head, ShapeContract) {
  std::mt19937_64 rng(12);
  const RoIFeatures rois(uniform({2, 4}, rng), {{0, 0, 1, 1}, {0, 0, 1, 1}});
  const DetectorParams multi = DetectorParams::init(small_config(), rng);
  EXPECT_EQ(head_forward(rois, multi, HeadMode::multiclass).logits.shape(), (Shape{2, 4}));
  const DetectorParams binary = DetectorParams::init(small_config(DetectorStyle::fewx), rng);
  EXPECT_EQ(head_forward(rois, binary, HeadMode::binary_match).logits.shape(), (Shape{2, 2}));
  EXPECT_EQ(head_forward(rois, binary, HeadMode::binary_match).offsets.shape(), (Shape{2, 4}));
  EXPECT_THROW(head_forward(RoIFeatures(Tensor({0, 4}, {}), {}), multi, HeadMode::multiclass), EmptyInputError);
}

TEST(Head, MatchesLinearMapOracle) {
  std::mt19937_64 rng(13);
  DetectorParams p = DetectorParams::init(small_config(), rng);
  p.cls_b = uniform({4}, rng);
  p.box_b = uniform({4}, rng);
  const Tensor x = uniform({3, 4}, rng);
  const HeadOutput out = head_forward(RoIFeatures(x, {{0, 0, 1, 1}, {0, 0, 1, 1}, {0, 0, 1, 1}}), p, HeadMode::multiclass);
  const auto hidden = oracle::relu(oracle::add_row(oracle::matmul(oracle::of(x), oracle::of(*p.head_in_w)),
                                                   p.head_in_b->to_vector()));
  const auto logits = oracle::add_row(oracle::matmul(hidden, oracle::of(p.cls_w)), p.cls_b.to_vector());
  const auto offsets = oracle::add_row(oracle::matmul(hidden, oracle::of(p.box_w)), p.box_b.to_vector());
  EXPECT_LE(oracle::max_abs_diff(oracle::of(out.logits), logits), 1e-14);
  EXPECT_LE(oracle::max_abs_diff(oracle::of(out.offsets), offsets), 1e-14);
}

TEST(Losses, PerfectOffsetsGiveZeroLocalization) {
  LossInputs in;
  in.rpn_logits = Tensor::matrix({{0, 1}, {1, 0}});
  in.rpn_offsets = Tensor::matrix({{0.1, -0.2, 0.3, 0.0}, {5, 5, 5, 5}});
  in.rpn_labels = {1, 0};
  in.rpn_targets = {{0.1, -0.2, 0.3, 0.0}, {0, 0, 0, 0}};
  in.det_logits = Tensor::matrix({{0, 2, 0}});
  in.det_labels = {1};
  in.det_offsets = Tensor::matrix({{0.5, 0.5, -0.1, 0.2}});
  in.det_targets = {{0.5, 0.5, -0.1, 0.2}};
  in.meta_logits = Tensor::matrix({{1, 0}});
  in.meta_labels = {0};
  const LossBreakdown b = compute_losses(in).values;
  EXPECT_EQ(b.rpn_loc, 0.0);
  EXPECT_EQ(b.det_loc, 0.0);
}

TEST(Losses, TwoAnchorOneBoxHandTrace) {
  LossInputs in;
  in.rpn_logits = Tensor::matrix({{0.2, 1.0}, {0.5, -0.3}});
  in.rpn_offsets = Tensor::matrix({{0.5, -1.5, 0.0, 0.2}, {9, 9, 9, 9}});
  in.rpn_labels = {1, 0};
  in.rpn_targets = {{0.0, 0.0, 0.0, 0.0}, {0, 0, 0, 0}};
  in.det_logits = Tensor::matrix({{0.1, 0.7, -0.2}, {1.2, 0.0, 0.3}});
  in.det_labels = {1, 0};
  in.det_offsets = Tensor::matrix({{0.3, 0.0, 2.0, -0.4}, {7, 7, 7, 7}});
  in.det_targets = {{0.1, 0.0, 0.0, 0.0}, {0, 0, 0, 0}};
  in.meta_logits = Tensor::matrix({{0.4, -0.4}, {0.0, 0.9}});
  in.meta_labels = {0, 1};

  auto nll = [](std::vector<double> row, std::size_t y) {
    double z = 0.0;
    for (double v : row) z += std::exp(v);
    return std::log(z) - row[y];
  };
  auto sl1 = [](double x) { return std::abs(x) < 1 ? 0.5 * x * x : std::abs(x) - 0.5; };
  const double rpn_cls = 0.5 * (nll({0.2, 1.0}, 1) + nll({0.5, -0.3}, 0));
  const double rpn_loc = (sl1(0.5) + sl1(-1.5) + sl1(0.0) + sl1(0.2)) / 4.0;
  const double det_cls = 0.5 * (nll({0.1, 0.7, -0.2}, 1) + nll({1.2, 0.0, 0.3}, 0));
  const double det_loc = (sl1(0.2) + sl1(0.0) + sl1(2.0) + sl1(-0.4)) / 4.0;
  const double meta = 0.5 * (nll({0.4, -0.4}, 0) + nll({0.0, 0.9}, 1));

  const LossBreakdown b = compute_losses(in).values;
  EXPECT_NEAR(b.rpn_cls, rpn_cls, 1e-14);
  EXPECT_NEAR(b.rpn_loc, rpn_loc, 1e-14);
  EXPECT_NEAR(b.det_cls, det_cls, 1e-14);
  EXPECT_NEAR(b.det_loc, det_loc, 1e-14);
  EXPECT_NEAR(b.meta, meta, 1e-14);
  EXPECT_EQ(b.total, (((b.rpn_loc + b.rpn_cls) + b.det_loc) + b.det_cls) + b.meta);
}

TEST(Losses, PositiveAndNegativeAnchorsWeighEqually) {
  LossInputs in;
  in.rpn_logits = Tensor::matrix({{0.0, 2.0}, {1.0, 0.0}, {0.3, 0.1}, {0.0, 0.0}});
  in.rpn_offsets = Tensor::zeros({4, 4});
  in.rpn_labels = {1, 0, 0, LossInputs::kIgnore};
  in.rpn_targets.assign(4, {0, 0, 0, 0});
  in.det_logits = Tensor::matrix({{0.0, 0.0}});
  in.det_labels = {0};
  in.det_offsets = Tensor::zeros({1, 4});
  in.det_targets = {{0, 0, 0, 0}};
  in.meta_logits = Tensor::matrix({{0.0, 0.0}});
  in.meta_labels = {1};
  auto nll = [](double a, double b, std::size_t y) {
    return std::log(std::exp(a) + std::exp(b)) - (y == 0 ? a : b);
  };
  const double pos = nll(0.0, 2.0, 1);
  const double neg = 0.5 * (nll(1.0, 0.0, 0) + nll(0.3, 0.1, 0));
  EXPECT_NEAR(compute_losses(in).values.rpn_cls, 0.5 * (pos + neg), 1e-14);
}

TEST(Losses, NoPositiveAnchorsGiveZeroRpnLoc) {
  LossInputs in;
  in.rpn_logits = Tensor::matrix({{0.0, 1.0}});
  in.rpn_offsets = Tensor::matrix({{3, 3, 3, 3}});
  in.rpn_labels = {0};
  in.rpn_targets = {{0, 0, 0, 0}};
  in.det_logits = Tensor::matrix({{0.0, 0.0}});
  in.det_labels = {0};
  in.det_offsets = Tensor::zeros({1, 4});
  in.det_targets = {{0, 0, 0, 0}};
  in.meta_logits = Tensor::matrix({{0.0, 0.0}});
  in.meta_labels = {0};
  EXPECT_EQ(compute_losses(in).values.rpn_loc, 0.0);
}

TEST(Losses, LabelCountMismatchThrows) {
  LossInputs in;
  in.rpn_logits = Tensor::matrix({{0.0, 1.0}});
  in.rpn_offsets = Tensor::zeros({1, 4});
  in.rpn_labels = {0, 1};
  in.rpn_targets = {{0, 0, 0, 0}, {0, 0, 0, 0}};
  EXPECT_THROW(compute_losses(in), ContractError);
}

TEST(Anchors, AssignmentThresholds) {
  const std::vector<Anchor> anchors{{{0, 0, 2, 2}, 2}, {{1, 0, 3, 2}, 2}, {{0, 0, 1, 1}, 1}, {{4, 4, 5, 5}, 1}};
  std::vector<std::size_t> labels;
  std::vector<std::vector<double>> targets;
  assign_anchors(anchors, {{0, 0, 2, 2}}, 0.5, 0.3, labels, targets);
  EXPECT_EQ(labels[0], 1u);                    // IoU 1
  EXPECT_EQ(labels[1], LossInputs::kIgnore);  // IoU 1/3
  EXPECT_EQ(labels[2], 0u);                    // IoU 1/4
  EXPECT_EQ(labels[3], 0u);
  EXPECT_EQ(targets[0], (std::vector<double>{0, 0, 0, 0}));
}

TEST(EpisodeLoss, TotalIsExactSumAndComponentsNonnegative) {
  for (DetectorStyle style : {DetectorStyle::fsdetview, DetectorStyle::fewx}) {
    for (const AggregationFlags& flags : {AggregationFlags{true, true}, AggregationFlags{false, false},
                                          AggregationFlags{true, false}, AggregationFlags{false, true}}) {
      const FixtureEpisode fx = make_fixture_episode(style, flags);
      std::mt19937_64 rng(3);
      const LossBreakdown b = episode_losses(fx.model, fx.query, fx.supports, ForwardContext::train(rng)).values;
      EXPECT_EQ(b.total, (((b.rpn_loc + b.rpn_cls) + b.det_loc) + b.det_cls) + b.meta);
      for (double v : {b.rpn_loc, b.rpn_cls, b.det_loc, b.det_cls, b.meta}) EXPECT_GE(v, 0.0);
    }
  }
}

TEST(EpisodeLoss, RequiresGroundTruthAndSupports) {
  FixtureEpisode fx = make_fixture_episode(DetectorStyle::fsdetview, {});
  EXPECT_THROW(episode_losses(fx.model, fx.query, {}, ForwardContext::eval()), EmptyInputError);
  SceneSample empty = fx.query;
  empty.boxes.clear();
  empty.labels.clear();
  EXPECT_THROW(episode_losses(fx.model, empty, fx.supports, ForwardContext::eval()), ContractError);
}

TEST(Model, ParameterNamesAndRoundTrip) {
  const FixtureEpisode fx = make_fixture_episode(DetectorStyle::fewx, {});
  Model m = fx.model;
  std::vector<std::string> names;
  m.visit_params([&](const std::string& n, Tensor&) { names.push_back(n); });
  for (const char* want : {"backbone.w", "rpn.cls.w", "head.cls.w", "meta.w"})
    EXPECT_NE(std::find(names.begin(), names.end(), want), names.end()) << want;
  bool has_spatial = false, has_roi = false;
  for (const auto& n : names) {
    has_spatial |= n.rfind("isam.a.", 0) == 0 || n.rfind("qsam.a.", 0) == 0;
    has_roi |= n.rfind("isam.b.", 0) == 0 || n.rfind("qsam.b.", 0) == 0;
  }
  EXPECT_TRUE(has_spatial);
  EXPECT_TRUE(has_roi);
  const Model back = m.with_parameters(m.parameters());
  const auto a = m.parameters(), b = back.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i].same_values(b[i]));
}

TEST(Inference, CachedEqualsUncachedBitExact) {
  for (DetectorStyle style : {DetectorStyle::fsdetview, DetectorStyle::fewx}) {
    for (const AggregationFlags& flags : {AggregationFlags{true, true}, AggregationFlags{false, false}}) {
      const FixtureEpisode fx = make_fixture_episode(style, flags);
      const PrototypeCache cache = build_prototype_cache(fx.model, fx.supports);
      const auto a = infer(fx.model, fx.query, cache);
      const auto b = infer_uncached(fx.model, fx.query, fx.supports);
      ASSERT_EQ(a.size(), b.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].box, b[i].box);
        EXPECT_EQ(a[i].class_id, b[i].class_id);
        EXPECT_EQ(a[i].confidence, b[i].confidence);
      }
    }
  }
}

TEST(Inference, DetectionsAreValid) {
  const FixtureEpisode fx = make_fixture_episode(DetectorStyle::fsdetview, {});
  SceneSample background = fx.query;
  background.grid = FeatureMap(4, 4, Tensor::zeros({16, 8}));
  for (const auto& d : infer_uncached(fx.model, background, fx.supports)) {
    EXPECT_TRUE(d.box.valid());
    EXPECT_GE(d.confidence, 0.0);
    EXPECT_LE(d.confidence, 1.0);
  }
}

TEST(Inference, CacheHoldsEvalModeEncoderOutputs) {
  const FixtureEpisode fx = make_fixture_episode(DetectorStyle::fsdetview, {});
  const PrototypeCache cache = build_prototype_cache(fx.model, fx.supports);
  for (const auto& s : fx.supports) {
    const Tensor fresh = refine_supports(support_features(s.raw, fx.model.det), *fx.model.roi.isam, ForwardContext::eval());
    EXPECT_TRUE(cache.refined.at(s.class_id).same_values(fresh));
    EXPECT_EQ(cache.roi.at(s.class_id).count(), 3u);
  }
  const FixtureEpisode avg = make_fixture_episode(DetectorStyle::fsdetview, {true, false});
  const PrototypeCache c2 = build_prototype_cache(avg.model, avg.supports);
  for (const auto& s : avg.supports) EXPECT_EQ(c2.roi.at(s.class_id).count(), 1u);
  const PrototypeCache again = build_prototype_cache(fx.model, fx.supports);
  for (const auto& [c, v] : cache.refined) EXPECT_TRUE(again.refined.at(c).same_values(v));
}

TEST(Inference, MatchesStepThroughTrace) {
  const FixtureEpisode fx = make_fixture_episode(DetectorStyle::fsdetview, {});
  const Model& m = fx.model;
  const FeatureMap fm = backbone_stub(fx.query.grid, m.det);
  std::vector<Box> boxes;
  for (const auto& p : propose(fm, m.det, m.config.top_k, m.config.anchor_sizes)) boxes.push_back(p.box);
  const RoIFeatures rois = roi_extract(fm, boxes);
  std::vector<SupportSet> supports = fx.supports;
  std::sort(supports.begin(), supports.end(), [](const auto& a, const auto& b) { return a.class_id < b.class_id; });
  std::vector<HeadOutput> outs;
  for (const auto& s : supports) {
    PrototypeSet raw;
    raw.class_id = s.class_id;
    raw.vectors = support_features(s.raw, m.det);
    const PrototypeSet protos = prepare_prototypes(raw, m.roi, m.config.flags, ForwardContext::eval());
    const Tensor agg = aggregate_rows(rois.data, protos, m.roi, m.config.flags, ForwardContext::eval());
    outs.push_back(head_forward(RoIFeatures(agg, boxes), m.det, HeadMode::multiclass));
  }
  std::vector<Detection> expected;
  for (std::size_t j = 0; j < outs.size(); ++j) {
    std::vector<double> conf;
    std::vector<Box> decoded;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      double bg = 0.0;
      for (const auto& o : outs) bg += o.logits.at(i, 0);
      std::vector<double> row{bg / static_cast<double>(outs.size())};
      for (std::size_t c = 0; c < outs.size(); ++c)
        row.push_back(outs[c].logits.at(i, static_cast<std::size_t>(supports[c].class_id) + 1));
      conf.push_back(oracle::softmax(row)[j + 1]);
      const auto off = outs[j].offsets.row_values(i);
      Box b = decode_offsets(boxes[i], off.data());
      decoded.push_back(b.valid() ? b : boxes[i]);
    }
    for (std::size_t i : nms(decoded, conf, m.config.nms_iou))
      expected.push_back({decoded[i], supports[j].class_id, conf[i], fx.query.id});
  }
  const auto got = infer_uncached(m, fx.query, fx.supports);
  ASSERT_EQ(got.size(), expected.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_EQ(got[i].box, expected[i].box);
    EXPECT_EQ(got[i].class_id, expected[i].class_id);
    EXPECT_NEAR(got[i].confidence, expected[i].confidence, 1e-12);
  }
}

TEST(Inference, UnknownSpatialPrototypesThrow) {
  const FixtureEpisode fx = make_fixture_episode(DetectorStyle::fewx, {});
  PrototypeCache cache = build_prototype_cache(fx.model, fx.supports);
  cache.spatial.clear();
  EXPECT_THROW(infer(fx.model, fx.query, cache), ContractError);
  EXPECT_THROW(infer(fx.model, fx.query, PrototypeCache{}), ContractError);
}

TEST(DetectionJson, RoundTrip) {
  const Detection d{{1, 2, 3.5, 4}, 7, 0.625, 42};
  const nlohmann::json j = d;
  EXPECT_EQ(j.at("class_id").get<int>(), 7);
  EXPECT_EQ(j.at("scene_id").get<std::uint64_t>(), 42u);
  const Detection back = j.get<Detection>();
  EXPECT_EQ(back.box, d.box);
  EXPECT_EQ(back.confidence, d.confidence);
}
