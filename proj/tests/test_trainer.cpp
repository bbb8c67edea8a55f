#include <algorithm>
#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "protodet/gradcheck.hpp"
#include "protodet/trainer.hpp"

using namespace protodet;

namespace {

WorldConfig tiny_world() {
  WorldConfig w;
  w.n_classes = 5;
  w.dim = 8;
  w.modes_per_class = 2;
  w.max_instances = 2;
  w.layout.height = 8;
  w.layout.width = 8;
  w.layout.min_box = 2;
  w.layout.max_box = 2;
  return w;
}

DatasetSplit tiny_split(std::size_t shots, std::uint64_t seed = 4) {
  return make_world(tiny_world(), 3, 2, shots, seed);
}

DetectorConfig tiny_detector(DetectorStyle style = DetectorStyle::fsdetview, AggregationFlags flags = {}) {
  DetectorConfig c;
  c.style = style;
  c.dim = 8;
  c.num_classes = 5;
  c.attention.model_dim = 8;
  c.attention.heads = 2;
  c.attention.layers = 1;
  c.attention.mlp_hidden = 16;
  c.flags = flags;
  c.anchor_sizes = {2};
  c.top_k = 6;
  return c;
}

TrainConfig tiny_train(Phase phase, std::size_t iterations, EpisodeStyle style = EpisodeStyle::allway) {
  TrainConfig t;
  t.phase = phase;
  t.k_train = 2;
  t.k_eval = 3;
  t.iterations = iterations;
  t.learning_rate = 0.01;
  t.seed = 9;
  t.style = style;
  return t;
}

bool same_parameters(const Model& a, const Model& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!pa[i].same_values(pb[i])) return false;
  return true;
}

bool in(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

}  // namespace

TEST(PairwiseSampler, DistinctClassesAndKShots) {
  const DatasetSplit split = tiny_split(3);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 30; ++i) {
    const Episode ep = sample_episode_pairwise(split, Phase::base, 4, rng);
    ASSERT_EQ(ep.supports.size(), 2u);
    ASSERT_EQ(ep.positives.size(), 1u);
    const int c1 = ep.positives.front();
    EXPECT_TRUE(ep.supports.count(c1));
    EXPECT_TRUE(in(ep.query.labels, c1));
    for (const auto& [cls, rows] : ep.supports) {
      EXPECT_TRUE(in(split.base_classes, cls));
      EXPECT_EQ(rows.rows(), 4u);
      EXPECT_EQ(rows.cols(), 8u);
    }
    EXPECT_EQ(ep.shots(), 4u);
  }
}

TEST(PairwiseSampler, DeterministicUnderSeed) {
  const DatasetSplit split = tiny_split(3);
  std::mt19937_64 a(7), b(7);
  for (int i = 0; i < 5; ++i) {
    const Episode x = sample_episode_pairwise(split, Phase::base, 2, a);
    const Episode y = sample_episode_pairwise(split, Phase::base, 2, b);
    EXPECT_EQ(x.query.id, y.query.id);
    EXPECT_EQ(x.positives, y.positives);
    ASSERT_EQ(x.supports.size(), y.supports.size());
    for (const auto& [cls, rows] : x.supports) EXPECT_TRUE(rows.same_values(y.supports.at(cls)));
  }
}

TEST(PairwiseSampler, RejectsSingleClassPhaseAndZeroShots) {
  const DatasetSplit split = make_world(tiny_world(), 1, 1, 1, 2);
  std::mt19937_64 rng(1);
  EXPECT_THROW(sample_episode_pairwise(split, Phase::base, 1, rng), SamplingError);
  EXPECT_THROW(sample_episode_pairwise(tiny_split(1), Phase::base, 0, rng), ParameterError);
}

TEST(AllwaySampler, SupportsEveryPhaseClass) {
  const DatasetSplit split = tiny_split(3);
  std::mt19937_64 rng(2);
  const Episode base = sample_episode_allway(split, Phase::base, 2, rng);
  std::vector<int> got;
  for (const auto& [cls, _] : base.supports) got.push_back(cls);
  std::vector<int> want = split.base_classes;
  std::sort(want.begin(), want.end());
  EXPECT_EQ(got, want);
  const Episode ft = sample_episode_allway(split, Phase::finetune, 3, rng);
  EXPECT_EQ(ft.supports.size(), split.base_classes.size() + split.novel_classes.size());
  for (int c : ft.positives) EXPECT_TRUE(in(ft.query.labels, c));
}

TEST(Sampler, BaseSupportsNeverComeFromTheQueryScene) {
  const DatasetSplit split = tiny_split(3);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 40; ++i) {
    const Episode ep = sample_episode(split, Phase::base, i % 2 ? EpisodeStyle::allway : EpisodeStyle::pairwise, 3, rng);
    for (const auto& [cls, scenes] : ep.support_scenes)
      for (std::uint64_t s : scenes) EXPECT_NE(s, ep.query.id);
  }
}

TEST(Sampler, FinetuneEpisodesUseTheFrozenSets) {
  const DatasetSplit split = tiny_split(3);
  std::mt19937_64 rng(4);
  for (EpisodeStyle style : {EpisodeStyle::pairwise, EpisodeStyle::allway}) {
    for (int i = 0; i < 10; ++i) {
      const Episode ep = sample_episode(split, Phase::finetune, style, 3, rng);
      for (const auto& [cls, rows] : ep.supports) {
        const auto& shots = split.frozen.at(cls);
        for (std::size_t r = 0; r < shots.size(); ++r) {
          EXPECT_EQ(rows.row_values(r), shots[r].vector.row_values(0));
          EXPECT_EQ(ep.support_scenes.at(cls)[r], shots[r].scene.id);
        }
      }
      bool frozen_query = false;
      for (const auto& [cls, shots] : split.frozen)
        for (const auto& s : shots) frozen_query |= s.scene.id == ep.query.id;
      EXPECT_TRUE(frozen_query);
    }
  }
  EXPECT_THROW(sample_episode(split, Phase::finetune, EpisodeStyle::allway, 2, rng), SamplingError);
}

TEST(TrainPhase, ZeroIterationsLeaveParametersBitIdentical) {
  const DatasetSplit split = tiny_split(3);
  const Model init = Model::init(tiny_detector(), 5);
  Model m = init;
  const LossTrace trace = train_phase(m, split, tiny_train(Phase::base, 0));
  EXPECT_TRUE(trace.empty());
  EXPECT_TRUE(same_parameters(m, init));
}

TEST(SgdStep, UpdateIsMinusLearningRateTimesGradient) {
  const DatasetSplit split = tiny_split(3);
  std::mt19937_64 sampler(6);
  const Episode ep = sample_episode_allway(split, Phase::base, 2, sampler);
  const Model before = Model::init(tiny_detector(), 8);
  const double lr = 0.05;

  const std::vector<SupportSet> supports = ep.support_sets();
  const ScalarFn loss = [&](const std::vector<Tensor>& params) {
    return episode_losses(before.with_parameters(params), ep.query, supports, ForwardContext::eval()).total;
  };
  const std::vector<Tensor> theta = before.parameters();

  Model after = before;
  std::mt19937_64 rng(0);
  sgd_step(after, ep, lr, rng, Mode::eval);
  const std::vector<Tensor> theta2 = after.parameters();

  const std::vector<Tensor> g = analytic_gradients(loss, theta);
  for (std::size_t i = 0; i < theta.size(); ++i)
    for (std::size_t k = 0; k < theta[i].numel(); ++k)
      EXPECT_EQ(theta2[i][k], theta[i][k] - lr * g[i][k]);

  // Central differences on the bias vectors give an independent gradient.
  std::vector<std::string> names;
  Model probe = before;
  probe.visit_params([&](const std::string& n, Tensor&) { names.push_back(n); });
  const double eps = 1e-5;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (names[i] != "head.cls.b" && names[i] != "rpn.cls.b" && names[i] != "meta.b") continue;
    for (std::size_t k = 0; k < theta[i].numel(); ++k) {
      auto shifted = [&](double delta) {
        std::vector<Tensor> p = theta;
        std::vector<double> v = p[i].to_vector();
        v[k] += delta;
        p[i] = Tensor(p[i].shape(), v);
        return loss(p).item();
      };
      const double fd = (shifted(eps) - shifted(-eps)) / (2 * eps);
      EXPECT_NEAR((theta[i][k] - theta2[i][k]) / lr, fd, 1e-6) << names[i] << "[" << k << "]";
      ++checked;
    }
  }
  EXPECT_GT(checked, 0u);
}

TEST(TrainPhase, TwoRunsGiveIdenticalTraces) {
  const DatasetSplit split = tiny_split(3);
  Model a = Model::init(tiny_detector(), 5), b = Model::init(tiny_detector(), 5);
  const LossTrace ta = train_phase(a, split, tiny_train(Phase::base, 6));
  const LossTrace tb = train_phase(b, split, tiny_train(Phase::base, 6));
  ASSERT_EQ(ta.size(), 6u);
  for (std::size_t i = 0; i < ta.size(); ++i) {
    EXPECT_EQ(ta[i].total, tb[i].total);
    EXPECT_EQ(ta[i].meta, tb[i].meta);
  }
  EXPECT_TRUE(same_parameters(a, b));
}

TEST(TrainPhase, TotalIsTheExactSumAtEveryStep) {
  const DatasetSplit split = tiny_split(3);
  for (DetectorStyle style : {DetectorStyle::fsdetview, DetectorStyle::fewx}) {
    Model m = Model::init(tiny_detector(style), 5);
    const LossTrace trace =
        train_phase(m, split, tiny_train(Phase::base, 5, default_episode_style(style)));
    for (const auto& b : trace) EXPECT_EQ(b.total, (((b.rpn_loc + b.rpn_cls) + b.det_loc) + b.det_cls) + b.meta);
  }
}

TEST(TrainPhase, BasePhaseNeverSeesNovelClasses) {
  const DatasetSplit split = tiny_split(3);
  Model m = Model::init(tiny_detector(), 5);
  std::size_t seen = 0;
  train_phase(m, split, tiny_train(Phase::base, 8), [&](const Episode& ep) {
    ++seen;
    for (const auto& [cls, _] : ep.supports) EXPECT_FALSE(split.is_novel(cls));
    for (int l : ep.query.labels) EXPECT_FALSE(split.is_novel(l));
  });
  EXPECT_EQ(seen, 8u);
}

TEST(Finetune, UsesFrozenSetsOverAllClasses) {
  const DatasetSplit split = tiny_split(3);
  Model m = Model::init(tiny_detector(), 5);
  std::set<int> classes;
  finetune(m, split, tiny_train(Phase::base, 4), [&](const Episode& ep) {
    for (const auto& [cls, rows] : ep.supports) {
      classes.insert(cls);
      ASSERT_EQ(rows.rows(), 3u);
      for (std::size_t r = 0; r < 3; ++r)
        EXPECT_EQ(rows.row_values(r), split.frozen.at(cls)[r].vector.row_values(0));
    }
  });
  EXPECT_EQ(classes.size(), 5u);
}

TEST(Finetune, ShotCountMustMatchTheFrozenSets) {
  const DatasetSplit split = tiny_split(2);
  Model m = Model::init(tiny_detector(), 5);
  EXPECT_THROW(finetune(m, split, tiny_train(Phase::finetune, 1)), ConfigurationError);
}

TEST(TrainConfig, RejectsBadLearningRate) {
  TrainConfig t = tiny_train(Phase::base, 1);
  t.learning_rate = 0.0;
  EXPECT_THROW(t.validate(), ParameterError);
  t.learning_rate = std::nan("");
  EXPECT_THROW(t.validate(), ParameterError);
}

TEST(TrainPhase, DivergenceRaisesTrainingError) {
  const DatasetSplit split = tiny_split(3);
  Model m = Model::init(tiny_detector(), 5);
  TrainConfig cfg = tiny_train(Phase::base, 3);
  cfg.learning_rate = 1e300;
  EXPECT_THROW(train_phase(m, split, cfg), TrainingError);
}

TEST(PrototypeCacheFromSplit, ModeFollowsTheFlags) {
  const DatasetSplit split = tiny_split(3);
  const Model full = Model::init(tiny_detector(DetectorStyle::fsdetview, {true, true}), 5);
  const PrototypeCache per_sample = build_prototype_cache(full, split);
  EXPECT_EQ(per_sample.mode, PrototypeMode::per_sample);
  for (const auto& [cls, set] : per_sample.roi) EXPECT_EQ(set.count(), 3u);
  EXPECT_EQ(per_sample.roi.size(), 5u);

  const Model avg = Model::init(tiny_detector(DetectorStyle::fsdetview, {true, false}), 5);
  const PrototypeCache averaged = build_prototype_cache(avg, split);
  EXPECT_EQ(averaged.mode, PrototypeMode::averaged);
  for (const auto& [cls, set] : averaged.roi) EXPECT_EQ(set.count(), 1u);

  for (const auto& s : frozen_supports(split)) {
    const Tensor fresh = refine_supports(support_features(s.raw, full.det), *full.roi.isam, ForwardContext::eval());
    EXPECT_TRUE(per_sample.refined.at(s.class_id).same_values(fresh));
  }
}
