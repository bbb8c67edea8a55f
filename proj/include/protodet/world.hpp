#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include <nlohmann/json.hpp>

#include "protodet/feature_map.hpp"

namespace protodet {

/// One class of the synthetic world: M appearance sub-modes, each a
/// d-dimensional signature, plus the per-instance spread around a mode.
struct ClassSpec {
  int id = 0;
  std::vector<std::vector<double>> modes;
  double mode_spread = 0.0;

  std::size_t dim() const { return modes.empty() ? 0 : modes.front().size(); }
};

struct ClassGenOptions {
  // Minimum L2 distance between any two signatures of different classes.
  double min_separation = 2.0;
  double mode_spread = 0.25;
  // Share of each signature that is common to all modes of its class, in
  // [0, 1]. 1 makes every class unimodal regardless of the mode count.
  double center_weight = 0.5;
  std::size_t max_retries = 200;
};

/// Deterministic under `seed`. Throws GenerationError when the separation
/// floor cannot be met within the retry budget.
std::vector<ClassSpec> generate_class_specs(std::size_t n_classes, std::size_t dim,
                                            std::size_t modes_per_class, std::uint64_t seed,
                                            const ClassGenOptions& options = {});

double min_signature_separation(const std::vector<ClassSpec>& specs);

struct SceneLayout {
  std::size_t height = 16;
  std::size_t width = 16;
  // Std-dev of the per-cell Gaussian noise, background and foreground alike.
  double noise = 0.3;
  std::size_t min_box = 2;
  std::size_t max_box = 4;
  // Placement retries aim to keep pairwise IoU at or below this; overlaps are
  // still allowed and resolved in painter order.
  double max_overlap = 0.25;
};

/// A query scene: feature grid plus ground-truth boxes and labels.
struct SceneSample {
  std::uint64_t id = 0;
  FeatureMap grid;
  std::vector<Box> boxes;
  std::vector<int> labels;
  std::vector<int> modes;  // sub-mode index per instance
};

/// Renders one scene with the given classes painted in order.
SceneSample render_scene(const std::map<int, ClassSpec>& specs, const std::vector<int>& classes,
                         const SceneLayout& layout, std::uint64_t seed);

/// Renders a scene with `instances_per_scene` instances of uniformly drawn
/// classes.
SceneSample render_scene(const std::vector<ClassSpec>& specs, std::size_t instances_per_scene,
                         std::size_t height, std::size_t width, double noise, std::uint64_t seed);

/// Mean of the scene's feature cells inside `box` as a 1 x d row.
Tensor crop_support(const SceneSample& scene, const Box& box);

/// One annotated instance used as support data.
struct ShotSample {
  int class_id = 0;
  SceneSample scene;
  std::size_t instance = 0;  // index into scene.boxes
  Tensor vector;             // crop_support of that instance, 1 x d

  const Box& box() const { return scene.boxes[instance]; }
};

struct WorldConfig {
  std::size_t n_classes = 9;
  std::size_t dim = 16;
  std::size_t modes_per_class = 3;
  std::size_t max_instances = 3;
  ClassGenOptions classes;
  SceneLayout layout;
};

enum class Phase { base, finetune };

/// Base/novel class split with its scene pools. The base pool is an infinite
/// seeded generator over base classes; the balanced K-shot set (K annotated
/// instances for every base and novel class) is materialised once and frozen.
struct DatasetSplit {
  WorldConfig world;
  std::uint64_t seed = 0;
  std::size_t shots = 1;
  std::map<int, ClassSpec> specs;
  std::vector<int> base_classes;
  std::vector<int> novel_classes;
  std::map<int, std::vector<ShotSample>> frozen;

  std::vector<int> classes(Phase phase) const;
  bool is_novel(int class_id) const;

  // Base-pool scene `index`; `forced` (if >= 0) is guaranteed to appear.
  SceneSample base_scene(std::uint64_t index, int forced = -1) const;
  // Single-instance base scene used as a support sample.
  ShotSample base_support(int class_id, std::uint64_t index) const;
  // Fresh support instance of any class, from a stream no training sampler
  // reads. Used for embedding probes only.
  ShotSample probe_support(int class_id, std::uint64_t index) const;
  // Evaluation scene over all classes with at least one novel instance.
  SceneSample eval_scene(std::uint64_t index) const;
};

/// Disjoint base/novel assignment plus frozen K-shot sets. Throws
/// ParameterError when there are not enough classes or K < 1.
DatasetSplit make_split(const std::vector<ClassSpec>& specs, const WorldConfig& world,
                        std::size_t n_base, std::size_t n_novel, std::size_t shots,
                        std::uint64_t seed);

/// Builds specs from `world` and splits them.
DatasetSplit make_world(const WorldConfig& world, std::size_t n_base, std::size_t n_novel,
                        std::size_t shots, std::uint64_t seed);

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

void to_json(nlohmann::json& j, const ClassSpec& s);
void from_json(const nlohmann::json& j, ClassSpec& s);
void to_json(nlohmann::json& j, const SceneSample& s);
void from_json(const nlohmann::json& j, SceneSample& s);
void to_json(nlohmann::json& j, const WorldConfig& w);
void from_json(const nlohmann::json& j, WorldConfig& w);
void to_json(nlohmann::json& j, const DatasetSplit& s);
void from_json(const nlohmann::json& j, DatasetSplit& s);

}  // namespace protodet
