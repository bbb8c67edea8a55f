#include "protodet/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace protodet {

namespace {

using Getter = std::function<nlohmann::json(const RunConfig&)>;
using Setter = std::function<void(RunConfig&, const std::string&)>;

struct Entry {
  std::string key;
  Getter get;
  Setter set;
};

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& expected) {
  throw ConfigurationError(key + ": expected " + expected + ", got '" + value + "'");
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    bad_value(key, v, "a non-negative integer");
  }
  try {
    return static_cast<std::size_t>(std::stoull(v));
  } catch (const std::exception&) {
    bad_value(key, v, "a non-negative integer");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  double x = 0.0;
  if (!(is >> x) || !is.eof() || !std::isfinite(x)) bad_value(key, v, "a finite number");
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  bad_value(key, v, "true or false");
}

std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(key, item));
  if (out.empty()) bad_value(key, v, "a comma-separated list of integers");
  return out;
}

std::string list_text(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

#define PD_SIZE(key, expr)                                                         \
  Entry{key, [](const RunConfig& c) { return nlohmann::json(c.expr); },            \
        [](RunConfig& c, const std::string& v) { c.expr = parse_size(key, v); }}
#define PD_DOUBLE(key, expr)                                                       \
  Entry{key, [](const RunConfig& c) { return nlohmann::json(c.expr); },            \
        [](RunConfig& c, const std::string& v) { c.expr = parse_double(key, v); }}
#define PD_BOOL(key, expr)                                                         \
  Entry{key, [](const RunConfig& c) { return nlohmann::json(c.expr); },            \
        [](RunConfig& c, const std::string& v) { c.expr = parse_bool(key, v); }}

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = {
      PD_SIZE("world.classes", world.n_classes),
      PD_SIZE("world.base", n_base),
      PD_SIZE("world.novel", n_novel),
      PD_SIZE("world.dim", world.dim),
      PD_SIZE("world.modes", world.modes_per_class),
      PD_SIZE("world.max_instances", world.max_instances),
      PD_SIZE("world.height", world.layout.height),
      PD_SIZE("world.width", world.layout.width),
      PD_DOUBLE("world.noise", world.layout.noise),
      PD_SIZE("world.min_box", world.layout.min_box),
      PD_SIZE("world.max_box", world.layout.max_box),
      PD_DOUBLE("world.max_overlap", world.layout.max_overlap),
      PD_DOUBLE("world.mode_spread", world.classes.mode_spread),
      PD_DOUBLE("world.center_weight", world.classes.center_weight),
      PD_DOUBLE("world.min_separation", world.classes.min_separation),
      PD_SIZE("attention.heads", detector.attention.heads),
      PD_SIZE("attention.layers", detector.attention.layers),
      PD_SIZE("attention.mlp_hidden", detector.attention.mlp_hidden),
      PD_DOUBLE("attention.dropout", detector.attention.dropout_rate),
      PD_BOOL("attention.decoder_self_attention", detector.attention.decoder_self_attention),
      Entry{"model.style", [](const RunConfig& c) { return nlohmann::json(to_string(c.detector.style)); },
            [](RunConfig& c, const std::string& v) {
              try {
                c.detector.style = parse_detector_style(v);
              } catch (const ParameterError&) {
                bad_value("model.style", v, "fewx or fsdetview");
              }
            }},
      PD_BOOL("model.isam", detector.flags.use_isam),
      PD_BOOL("model.qsam", detector.flags.use_qsam),
      Entry{"model.variant",
            [](const RunConfig& c) { return nlohmann::json(to_string(c.detector.flags.variant)); },
            [](RunConfig& c, const std::string& v) {
              try {
                c.detector.flags.variant = parse_baseline_variant(v);
              } catch (const ParameterError&) {
                bad_value("model.variant", v, "mult or mult_sub_id");
              }
            }},
      PD_SIZE("model.top_k", detector.top_k),
      PD_DOUBLE("model.nms_iou", detector.nms_iou),
      Entry{"train.episode",
            [](const RunConfig& c) {
              return nlohmann::json(c.episode_style_set ? to_string(c.episode_style) : "auto");
            },
            [](RunConfig& c, const std::string& v) {
              if (v == "auto") {
                c.episode_style_set = false;
                return;
              }
              try {
                c.episode_style = parse_episode_style(v);
                c.episode_style_set = true;
              } catch (const ParameterError&) {
                bad_value("train.episode", v, "auto, pairwise or allway");
              }
            }},
      PD_SIZE("train.k_train", k_train),
      PD_SIZE("train.k_eval", k_eval),
      PD_SIZE("train.base_iterations", base_iterations),
      PD_SIZE("train.finetune_iterations", finetune_iterations),
      PD_DOUBLE("train.lr", learning_rate),
      Entry{"train.seed", [](const RunConfig& c) { return nlohmann::json(c.seed); },
            [](RunConfig& c, const std::string& v) { c.seed = parse_size("train.seed", v); }},
      PD_SIZE("eval.scenes", eval_scenes),
      PD_SIZE("cluster.shots", cluster_shots),
      Entry{"cluster.classes",
            [](const RunConfig& c) {
              return nlohmann::json(c.cluster_classes == ClusterClasses::all ? "all" : "novel");
            },
            [](RunConfig& c, const std::string& v) {
              if (v == "all") {
                c.cluster_classes = ClusterClasses::all;
              } else if (v == "novel") {
                c.cluster_classes = ClusterClasses::novel;
              } else {
                bad_value("cluster.classes", v, "novel or all");
              }
            }},
      PD_SIZE("sweep.seeds", seeds),
      Entry{"sweep.k_train", [](const RunConfig& c) { return nlohmann::json(list_text(c.sweep_k)); },
            [](RunConfig& c, const std::string& v) { c.sweep_k = parse_size_list("sweep.k_train", v); }},
      PD_SIZE("sweep.jobs", jobs),
  };
  return entries;
}

#undef PD_SIZE
#undef PD_DOUBLE
#undef PD_BOOL

const Entry& find_entry(const std::string& key) {
  for (const auto& e : registry())
    if (e.key == key) return e;
  throw ConfigurationError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string value_text(const nlohmann::json& v) {
  return v.is_string() ? v.get<std::string>() : v.dump();
}

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigurationError(key + ": " + what);
}

}  // namespace

RunConfig::RunConfig() {
  detector.attention.model_dim = world.dim;
  detector.attention.mlp_hidden = 64;
  world.layout.max_box = 2;
  world.classes.center_weight = 0.0;
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& e : registry()) out.push_back(e.key);
    return out;
  }();
  return k;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  find_entry(key).set(*this, trim(value));
}

nlohmann::json RunConfig::get(const std::string& key) const { return find_entry(key).get(*this); }

void RunConfig::load_text(const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigurationError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    set(trim(t.substr(0, eq)), t.substr(eq + 1));
  }
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  load_text(ss.str(), path);
}

RunConfig RunConfig::resolved() const {
  RunConfig r = *this;
  r.detector.dim = r.world.dim;
  r.detector.attention.model_dim = r.world.dim;
  r.detector.num_classes = r.world.n_classes;
  if (!r.episode_style_set) r.episode_style = default_episode_style(r.detector.style);
  return r;
}

void RunConfig::validate() const {
  require(world.n_classes >= 2, "world.classes", "must be >= 2");
  require(n_base >= 1, "world.base", "must be >= 1");
  require(n_novel >= 1, "world.novel", "must be >= 1");
  require(n_base + n_novel <= world.n_classes, "world.base",
          "world.base + world.novel exceeds world.classes");
  require(world.dim >= 2, "world.dim", "must be >= 2");
  require(world.modes_per_class >= 1, "world.modes", "must be >= 1");
  require(world.max_instances >= 1, "world.max_instances", "must be >= 1");
  require(world.layout.min_box >= 1, "world.min_box", "must be >= 1");
  require(world.layout.max_box >= world.layout.min_box, "world.max_box", "must be >= world.min_box");
  require(world.layout.max_box <= std::min(world.layout.height, world.layout.width), "world.max_box",
          "must fit inside the grid");
  require(world.layout.noise >= 0.0, "world.noise", "must be >= 0");
  require(world.classes.mode_spread >= 0.0, "world.mode_spread", "must be >= 0");
  require(world.classes.center_weight >= 0.0 && world.classes.center_weight <= 1.0,
          "world.center_weight", "must be in [0, 1]");
  require(detector.attention.heads >= 1, "attention.heads", "must be >= 1");
  require(world.dim % detector.attention.heads == 0, "attention.heads", "must divide world.dim");
  require(detector.attention.layers >= 1, "attention.layers", "must be >= 1");
  require(detector.attention.mlp_hidden >= 1, "attention.mlp_hidden", "must be >= 1");
  require(detector.attention.dropout_rate >= 0.0 && detector.attention.dropout_rate < 1.0,
          "attention.dropout", "must be in [0, 1)");
  require(detector.top_k >= 1, "model.top_k", "must be >= 1");
  require(detector.nms_iou > 0.0 && detector.nms_iou <= 1.0, "model.nms_iou", "must be in (0, 1]");
  require(k_train >= 1, "train.k_train", "must be >= 1");
  require(k_eval >= 1, "train.k_eval", "must be >= 1");
  require(learning_rate > 0.0, "train.lr", "must be > 0");
  require(eval_scenes >= 1, "eval.scenes", "must be >= 1");
  require(cluster_shots >= 1, "cluster.shots", "must be >= 1");
  require(seeds >= 1, "sweep.seeds", "must be >= 1");
  require(jobs >= 1, "sweep.jobs", "must be >= 1");
  for (std::size_t k : sweep_k) require(k >= 1, "sweep.k_train", "entries must be >= 1");
  const RunConfig r = resolved();
  if (r.episode_style == EpisodeStyle::pairwise) {
    require(n_base >= 2, "world.base", "pairwise episodes need at least two base classes");
  }
  r.detector.validate();
}

TrainConfig RunConfig::train_config(Phase phase, std::uint64_t run_seed) const {
  const RunConfig r = resolved();
  TrainConfig t;
  t.phase = phase;
  t.k_train = k_train;
  t.k_eval = k_eval;
  t.iterations = phase == Phase::base ? base_iterations : finetune_iterations;
  t.learning_rate = learning_rate;
  t.seed = derive_seed(run_seed, 12);
  t.style = r.episode_style;
  return t;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& e : registry()) j[e.key] = e.get(*this);
  return j;
}

std::string RunConfig::to_text() const {
  std::string s;
  for (const auto& e : registry()) s += e.key + " = " + value_text(e.get(*this)) + "\n";
  return s;
}

const std::vector<Arm>& ablation_arms() {
  static const std::vector<Arm> arms = {
      {"baseline", false, false},
      {"isam", true, false},
      {"qsam", false, true},
      {"full", true, true},
  };
  return arms;
}

RunConfig with_arm(const RunConfig& cfg, const Arm& arm) {
  RunConfig r = cfg;
  r.detector.flags.use_isam = arm.use_isam;
  r.detector.flags.use_qsam = arm.use_qsam;
  return r;
}

DatasetSplit build_split(const RunConfig& cfg, std::uint64_t seed) {
  return make_world(cfg.world, cfg.n_base, cfg.n_novel, cfg.k_eval, seed);
}

std::uint64_t model_seed(std::uint64_t seed) { return derive_seed(seed, 11); }

ClusterProbe cluster_probe(const Model& model, const DatasetSplit& split, std::size_t shots,
                           ClusterClasses classes) {
  const std::vector<int> ids =
      classes == ClusterClasses::all ? split.classes(Phase::finetune) : split.novel_classes;
  const ForwardContext ctx = ForwardContext::eval();
  std::vector<Tensor> raw, pre, post;
  ClusterProbe probe;
  for (int cls : ids) {
    std::vector<Tensor> rows;
    for (std::size_t k = 0; k < shots; ++k) {
      rows.push_back(split.probe_support(cls, static_cast<std::uint64_t>(cls) * 1000003ULL + k).vector);
    }
    const Tensor r = rows.size() == 1 ? rows.front() : concat_rows(rows);
    const Tensor f = support_features(r, model.det);
    raw.push_back(r);
    pre.push_back(f);
    post.push_back(model.roi.isam ? refine_supports(f, *model.roi.isam, ctx) : f);
    probe.labels.insert(probe.labels.end(), shots, cls);
  }
  probe.raw = concat_rows(raw);
  probe.pre_isam = concat_rows(pre);
  probe.post_isam = concat_rows(post);
  probe.report.accuracy_raw = centroid_accuracy(probe.raw, probe.labels);
  probe.report.accuracy_pre_isam = centroid_accuracy(probe.pre_isam, probe.labels);
  probe.report.accuracy_post_isam = centroid_accuracy(probe.post_isam, probe.labels);
  return probe;
}

MetricReport evaluate(const Model& model, const DatasetSplit& split, const RunConfig& cfg,
                      std::uint64_t seed) {
  const PrototypeCache cache = build_prototype_cache(model, split);
  std::vector<std::vector<Detection>> dets;
  std::vector<GroundTruth> truth;
  for (std::size_t i = 0; i < cfg.eval_scenes; ++i) {
    const SceneSample scene = split.eval_scene(i);
    dets.push_back(infer(model, scene, cache));
    truth.push_back(GroundTruth::of(scene));
  }
  MetricReport r;
  r.per_class_ap50 = ap50(dets, truth);
  r.novel_classes = split.novel_classes;
  r.seed = seed;
  r.shots = split.shots;
  r.prototype_mode = to_string(model.config.flags.prototype_mode());
  r.baseline_variant = to_string(model.config.flags.variant);
  r.use_isam = model.config.flags.use_isam;
  r.use_qsam = model.config.flags.use_qsam;
  r.finalize();
  return r;
}

RunResult train_model(const RunConfig& cfg_in, std::uint64_t seed, const EpisodeObserver& observer,
                      bool finetune_phase) {
  cfg_in.validate();
  const RunConfig cfg = cfg_in.resolved();
  const DatasetSplit split = build_split(cfg, seed);
  RunResult out;
  out.model = Model::init(cfg.detector, model_seed(seed));
  out.base_trace = train_phase(out.model, split, cfg.train_config(Phase::base, seed), observer);
  out.base_cluster =
      cluster_probe(out.model, split, cfg.cluster_shots, cfg.cluster_classes).report;
  if (finetune_phase) {
    out.finetune_trace =
        finetune(out.model, split, cfg.train_config(Phase::finetune, seed), observer);
  }
  return out;
}

RunResult run_experiment(const RunConfig& cfg, std::uint64_t seed, const EpisodeObserver& observer) {
  RunResult out = train_model(cfg, seed, observer);
  out.metrics = evaluate(out.model, build_split(cfg.resolved(), seed), cfg, seed);
  return out;
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(jobs, n); ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

void write_loss_trace(std::ostream& os, const LossTrace& trace, Phase phase) {
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const LossBreakdown& b = trace[i];
    nlohmann::json j = {{"phase", to_string(phase)}, {"step", i},
                        {"rpn_loc", b.rpn_loc},      {"rpn_cls", b.rpn_cls},
                        {"det_loc", b.det_loc},      {"det_cls", b.det_cls},
                        {"meta", b.meta},            {"total", b.total}};
    os << j.dump() << '\n';
  }
}

}  // namespace protodet
