#pragma once

#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "protodet/detector.hpp"

namespace protodet {

enum class EpisodeStyle { pairwise, allway };

std::string to_string(EpisodeStyle s);
EpisodeStyle parse_episode_style(const std::string& s);
std::string to_string(Phase p);
EpisodeStyle default_episode_style(DetectorStyle s);

/// One query scene with K raw support vectors for each support class.
struct Episode {
  SceneSample query;
  std::map<int, Tensor> supports;                          // class -> K x d
  std::map<int, std::vector<std::uint64_t>> support_scenes;  // provenance per row
  std::vector<int> positives;

  std::vector<SupportSet> support_sets() const;
  std::size_t shots() const;
};

/// Two distinct classes c1, c2 from the phase's class set, a query with at
/// least one c1 instance and K supports for each. Base-phase supports never
/// come from the query scene.
Episode sample_episode_pairwise(const DatasetSplit& split, Phase phase, std::size_t k,
                                std::mt19937_64& rng);
/// Supports for every class of the phase.
Episode sample_episode_allway(const DatasetSplit& split, Phase phase, std::size_t k,
                              std::mt19937_64& rng);
Episode sample_episode(const DatasetSplit& split, Phase phase, EpisodeStyle style, std::size_t k,
                       std::mt19937_64& rng);

struct TrainConfig {
  Phase phase = Phase::base;
  std::size_t k_train = 3;
  std::size_t k_eval = 5;
  std::size_t iterations = 2000;
  double learning_rate = 0.01;
  std::uint64_t seed = 0;
  EpisodeStyle style = EpisodeStyle::allway;

  // Shots per support class for the configured phase.
  std::size_t shots() const { return phase == Phase::base ? k_train : k_eval; }
  void validate() const;
};

using LossTrace = std::vector<LossBreakdown>;
using EpisodeObserver = std::function<void(const Episode&)>;

/// Plain SGD over episodes of the configured phase. Throws TrainingError on a
/// non-finite loss. `observer`, when set, sees every sampled episode.
LossTrace train_phase(Model& model, const DatasetSplit& split, const TrainConfig& cfg,
                      const EpisodeObserver& observer = {});

/// Balanced K-shot phase over base and novel classes with the frozen support
/// sets. `cfg.phase` is ignored.
LossTrace finetune(Model& model, const DatasetSplit& split, const TrainConfig& cfg,
                   const EpisodeObserver& observer = {});

/// One SGD step on a fixed episode; returns its loss terms.
LossBreakdown sgd_step(Model& model, const Episode& episode, double learning_rate,
                       std::mt19937_64& rng, Mode mode = Mode::train);

/// Frozen K-shot supports of every base and novel class.
std::vector<SupportSet> frozen_supports(const DatasetSplit& split);

PrototypeCache build_prototype_cache(const Model& model, const DatasetSplit& split);

}  // namespace protodet
