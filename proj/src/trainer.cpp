#include "protodet/trainer.hpp"

#include <algorithm>
#include <cmath>

namespace protodet {

namespace {

constexpr int kMaxResample = 32;

Tensor stack_rows(const std::vector<Tensor>& rows) {
  return rows.size() == 1 ? rows.front() : concat_rows(rows);
}

int pick(const std::vector<int>& pool, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(0, pool.size() - 1);
  return pool[d(rng)];
}

// K base-pool supports of `cls` that do not come from the query scene.
void add_base_supports(Episode& ep, const DatasetSplit& split, int cls, std::size_t k,
                       std::mt19937_64& rng) {
  std::vector<Tensor> rows;
  std::vector<std::uint64_t> scenes;
  int rejected = 0;
  while (rows.size() < k) {
    ShotSample shot = split.base_support(cls, rng());
    if (shot.scene.id == ep.query.id) {
      if (++rejected > kMaxResample) {
        throw SamplingError("cannot draw supports for class " + std::to_string(cls) +
                            " outside the query scene");
      }
      continue;
    }
    rows.push_back(shot.vector);
    scenes.push_back(shot.scene.id);
  }
  ep.supports[cls] = stack_rows(rows);
  ep.support_scenes[cls] = std::move(scenes);
}

// The frozen K-shot set of `cls`, unchanged.
void add_frozen_supports(Episode& ep, const DatasetSplit& split, int cls, std::size_t k) {
  const auto& shots = split.frozen.at(cls);
  if (shots.size() != k) {
    throw SamplingError("frozen set of class " + std::to_string(cls) + " has " +
                        std::to_string(shots.size()) + " shots, episode needs " +
                        std::to_string(k));
  }
  std::vector<Tensor> rows;
  std::vector<std::uint64_t> scenes;
  for (const auto& s : shots) {
    rows.push_back(s.vector);
    scenes.push_back(s.scene.id);
  }
  ep.supports[cls] = stack_rows(rows);
  ep.support_scenes[cls] = std::move(scenes);
}

const SceneSample& frozen_query(const DatasetSplit& split, int cls, std::mt19937_64& rng) {
  const auto& shots = split.frozen.at(cls);
  std::uniform_int_distribution<std::size_t> d(0, shots.size() - 1);
  return shots[d(rng)].scene;
}

std::vector<int> present(const SceneSample& s, const std::vector<int>& classes) {
  std::vector<int> out;
  for (int c : classes)
    if (std::find(s.labels.begin(), s.labels.end(), c) != s.labels.end()) out.push_back(c);
  return out;
}

void require_classes(const std::vector<int>& classes, std::size_t n, const char* what) {
  if (classes.size() < n) {
    throw SamplingError(std::string(what) + " needs " + std::to_string(n) +
                        " classes, the phase has " + std::to_string(classes.size()));
  }
}

std::vector<Tensor*> leaves(Model& m) {
  std::vector<Tensor*> out;
  m.visit_params([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

}  // namespace

std::string to_string(EpisodeStyle s) { return s == EpisodeStyle::pairwise ? "pairwise" : "allway"; }

EpisodeStyle parse_episode_style(const std::string& s) {
  if (s == "pairwise") return EpisodeStyle::pairwise;
  if (s == "allway") return EpisodeStyle::allway;
  throw ParameterError("unknown episode style '" + s + "'");
}

std::string to_string(Phase p) { return p == Phase::base ? "base" : "finetune"; }

EpisodeStyle default_episode_style(DetectorStyle s) {
  return s == DetectorStyle::fewx ? EpisodeStyle::pairwise : EpisodeStyle::allway;
}

std::vector<SupportSet> Episode::support_sets() const {
  std::vector<SupportSet> out;
  for (const auto& [cls, raw] : supports) out.push_back(SupportSet{cls, raw});
  return out;
}

std::size_t Episode::shots() const {
  return supports.empty() ? 0 : supports.begin()->second.rows();
}

Episode sample_episode_pairwise(const DatasetSplit& split, Phase phase, std::size_t k,
                                std::mt19937_64& rng) {
  if (k < 1) throw ParameterError("K must be >= 1");
  const std::vector<int> classes = split.classes(phase);
  require_classes(classes, 2, "a pairwise episode");
  Episode ep;
  const int c1 = pick(classes, rng);
  int c2 = c1;
  while (c2 == c1) c2 = pick(classes, rng);
  if (phase == Phase::base) {
    ep.query = split.base_scene(rng(), c1);
    add_base_supports(ep, split, c1, k, rng);
    add_base_supports(ep, split, c2, k, rng);
  } else {
    ep.query = frozen_query(split, c1, rng);
    add_frozen_supports(ep, split, c1, k);
    add_frozen_supports(ep, split, c2, k);
  }
  ep.positives = {c1};
  return ep;
}

Episode sample_episode_allway(const DatasetSplit& split, Phase phase, std::size_t k,
                              std::mt19937_64& rng) {
  if (k < 1) throw ParameterError("K must be >= 1");
  const std::vector<int> classes = split.classes(phase);
  require_classes(classes, 1, "an all-way episode");
  Episode ep;
  if (phase == Phase::base) {
    ep.query = split.base_scene(rng());
    for (int c : classes) add_base_supports(ep, split, c, k, rng);
  } else {
    ep.query = frozen_query(split, pick(classes, rng), rng);
    for (int c : classes) add_frozen_supports(ep, split, c, k);
  }
  ep.positives = present(ep.query, classes);
  return ep;
}

Episode sample_episode(const DatasetSplit& split, Phase phase, EpisodeStyle style, std::size_t k,
                       std::mt19937_64& rng) {
  return style == EpisodeStyle::pairwise ? sample_episode_pairwise(split, phase, k, rng)
                                         : sample_episode_allway(split, phase, k, rng);
}

void TrainConfig::validate() const {
  if (k_train < 1) throw ParameterError("train.k_train must be >= 1");
  if (k_eval < 1) throw ParameterError("train.k_eval must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ParameterError("train.lr must be a positive number");
  }
}

LossBreakdown sgd_step(Model& model, const Episode& episode, double learning_rate,
                       std::mt19937_64& rng, Mode mode) {
  Tape tape;
  Model tracked = model.tracked(tape);
  const ForwardContext ctx = mode == Mode::train ? ForwardContext::train(rng) : ForwardContext::eval();
  LossTerms terms = episode_losses(tracked, episode.query, episode.support_sets(), ctx);
  if (!std::isfinite(terms.values.total)) throw TrainingError(0, "non-finite loss");
  const Gradients grads = backward(terms.total);

  std::vector<Tensor*> src = leaves(tracked);
  std::vector<Tensor*> dst = leaves(model);
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const Tensor g = grads.of(*src[i]);
    std::vector<double> v = dst[i]->to_vector();
    const auto gv = g.values();
    for (std::size_t k = 0; k < v.size(); ++k) v[k] -= learning_rate * gv[k];
    *dst[i] = Tensor(dst[i]->shape(), std::move(v));
  }
  return terms.values;
}

LossTrace train_phase(Model& model, const DatasetSplit& split, const TrainConfig& cfg,
                      const EpisodeObserver& observer) {
  cfg.validate();
  std::mt19937_64 rng(derive_seed(cfg.seed, cfg.phase == Phase::base ? 101 : 102));
  LossTrace trace;
  trace.reserve(cfg.iterations);
  for (std::size_t step = 0; step < cfg.iterations; ++step) {
    const Episode ep = sample_episode(split, cfg.phase, cfg.style, cfg.shots(), rng);
    if (observer) observer(ep);
    try {
      trace.push_back(sgd_step(model, ep, cfg.learning_rate, rng));
    } catch (const TrainingError&) {
      throw TrainingError(step, std::string(to_string(cfg.phase)) + " phase diverged");
    } catch (const NumericError& e) {
      throw TrainingError(step, e.what());
    }
  }
  return trace;
}

LossTrace finetune(Model& model, const DatasetSplit& split, const TrainConfig& cfg,
                   const EpisodeObserver& observer) {
  TrainConfig ft = cfg;
  ft.phase = Phase::finetune;
  if (ft.k_eval != split.shots) {
    throw ConfigurationError("train.k_eval (" + std::to_string(ft.k_eval) +
                             ") differs from the split's frozen shot count (" +
                             std::to_string(split.shots) + ")");
  }
  return train_phase(model, split, ft, observer);
}

std::vector<SupportSet> frozen_supports(const DatasetSplit& split) {
  std::vector<SupportSet> out;
  for (const auto& [cls, shots] : split.frozen) {
    if (shots.empty()) throw ContractError("class " + std::to_string(cls) + " has no supports");
    std::vector<Tensor> rows;
    for (const auto& s : shots) rows.push_back(s.vector);
    out.push_back(SupportSet{cls, stack_rows(rows)});
  }
  return out;
}

PrototypeCache build_prototype_cache(const Model& model, const DatasetSplit& split) {
  return build_prototype_cache(model, frozen_supports(split), split.seed);
}

}  // namespace protodet
