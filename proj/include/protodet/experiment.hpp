#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protodet/evalkit.hpp"
#include "protodet/trainer.hpp"

namespace protodet {

enum class ClusterClasses { novel, all };

/// Everything one experiment needs. Every field has a dotted key; see
/// `RunConfig::keys()`.
struct RunConfig {
  WorldConfig world;
  std::size_t n_base = 6;
  std::size_t n_novel = 3;
  DetectorConfig detector;
  EpisodeStyle episode_style = EpisodeStyle::allway;
  bool episode_style_set = false;
  std::size_t k_train = 3;
  std::size_t k_eval = 5;
  std::size_t base_iterations = 2000;
  std::size_t finetune_iterations = 500;
  double learning_rate = 0.03;
  std::uint64_t seed = 0;
  std::size_t eval_scenes = 100;
  std::size_t cluster_shots = 10;
  ClusterClasses cluster_classes = ClusterClasses::novel;
  std::size_t seeds = 10;
  std::vector<std::size_t> sweep_k{1, 3, 5, 10};
  std::size_t jobs = 1;

  RunConfig();

  static const std::vector<std::string>& keys();
  // Throws ConfigurationError naming the key on an unknown key or bad value.
  void set(const std::string& key, const std::string& value);
  nlohmann::json get(const std::string& key) const;

  // "key = value" lines; blank lines and '#' comments are ignored.
  void load_file(const std::string& path);
  void load_text(const std::string& text, const std::string& origin = "<text>");

  // Derived settings (feature width, class count, episode style) filled in.
  RunConfig resolved() const;
  // Throws ConfigurationError / ParameterError naming the offending key.
  void validate() const;

  TrainConfig train_config(Phase phase, std::uint64_t seed) const;
  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Ablation arm: which of the two attention modules are active.
struct Arm {
  std::string name;
  bool use_isam = false;
  bool use_qsam = false;
};

const std::vector<Arm>& ablation_arms();
RunConfig with_arm(const RunConfig& cfg, const Arm& arm);

DatasetSplit build_split(const RunConfig& cfg, std::uint64_t seed);
std::uint64_t model_seed(std::uint64_t seed);

struct RunResult {
  Model model;
  LossTrace base_trace;
  LossTrace finetune_trace;
  ClusterReport base_cluster;  // measured right after base training
  MetricReport metrics;
};

/// Nearest-centroid accuracies of probe supports at the three feature
/// stages: crop, backbone output, intra-support encoder output.
struct ClusterProbe {
  ClusterReport report;
  Tensor raw, pre_isam, post_isam;
  std::vector<int> labels;
};
ClusterProbe cluster_probe(const Model& model, const DatasetSplit& split, std::size_t shots,
                           ClusterClasses classes);

/// AP50 over `cfg.eval_scenes` evaluation scenes with the cached frozen
/// supports.
MetricReport evaluate(const Model& model, const DatasetSplit& split, const RunConfig& cfg,
                      std::uint64_t seed);

/// Initialise, base-train, probe clustering, finetune. `finetune_phase`
/// false stops after the base phase.
RunResult train_model(const RunConfig& cfg, std::uint64_t seed, const EpisodeObserver& observer = {},
                      bool finetune_phase = true);

/// train_model followed by evaluate.
RunResult run_experiment(const RunConfig& cfg, std::uint64_t seed,
                         const EpisodeObserver& observer = {});

/// Calls `fn(i)` for i in [0, n) on up to `jobs` threads.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

void write_loss_trace(std::ostream& os, const LossTrace& trace, Phase phase);

}  // namespace protodet
