#include "protodet/world.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace protodet {

namespace {

enum Stream : std::uint64_t {
  kSpecs = 1,
  kSplit = 2,
  kFrozen = 3,
  kBaseScene = 4,
  kBaseSupport = 5,
  kEvalScene = 6,
  kProbe = 7,
};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::vector<double> gaussian_vector(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(d);
  for (double& x : v) x = n(rng);
  return v;
}

double l2(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

ClassSpec draw_class(int id, std::size_t dim, std::size_t modes, const ClassGenOptions& opt,
                     std::mt19937_64& rng) {
  ClassSpec spec;
  spec.id = id;
  spec.mode_spread = opt.mode_spread;
  const double w = opt.center_weight;
  const double r = std::sqrt(std::max(0.0, 1.0 - w * w));
  const std::vector<double> center = gaussian_vector(dim, rng);
  for (std::size_t m = 0; m < modes; ++m) {
    std::vector<double> offset = gaussian_vector(dim, rng);
    std::vector<double> sig(dim);
    for (std::size_t i = 0; i < dim; ++i) sig[i] = w * center[i] + r * offset[i];
    spec.modes.push_back(std::move(sig));
  }
  return spec;
}

bool separated(const ClassSpec& c, const std::vector<ClassSpec>& others, double floor) {
  for (const auto& o : others)
    for (const auto& a : o.modes)
      for (const auto& b : c.modes)
        if (l2(a, b) < floor) return false;
  return true;
}

Box place_box(std::size_t h, std::size_t w, const SceneLayout& layout, const std::vector<Box>& placed,
              std::mt19937_64& rng) {
  const std::size_t max_w = std::min(layout.max_box, w);
  const std::size_t max_h = std::min(layout.max_box, h);
  std::uniform_int_distribution<std::size_t> bw(layout.min_box, max_w);
  std::uniform_int_distribution<std::size_t> bh(layout.min_box, max_h);
  Box box;
  for (int attempt = 0; attempt < 20; ++attempt) {
    const std::size_t sw = bw(rng), sh = bh(rng);
    std::uniform_int_distribution<std::size_t> px(0, w - sw), py(0, h - sh);
    const double x = static_cast<double>(px(rng)), y = static_cast<double>(py(rng));
    box = Box{x, y, x + static_cast<double>(sw), y + static_cast<double>(sh)};
    bool ok = true;
    for (const auto& p : placed) {
      if (iou(box, p) > layout.max_overlap) {
        ok = false;
        break;
      }
    }
    if (ok) break;
  }
  return box;
}

// A support instance on a grid just large enough for the biggest box; the
// crop has the same distribution as one taken from a full scene.
ShotSample support_shot(const std::map<int, ClassSpec>& specs, const SceneLayout& layout,
                        int class_id, std::uint64_t seed) {
  SceneLayout compact = layout;
  compact.height = std::min(layout.height, layout.max_box);
  compact.width = std::min(layout.width, layout.max_box);
  ShotSample shot;
  shot.class_id = class_id;
  shot.scene = render_scene(specs, {class_id}, compact, seed);
  shot.vector = crop_support(shot.scene, shot.box());
  return shot;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index);
}

std::vector<ClassSpec> generate_class_specs(std::size_t n_classes, std::size_t dim,
                                            std::size_t modes_per_class, std::uint64_t seed,
                                            const ClassGenOptions& options) {
  if (n_classes < 2) throw ParameterError("n_classes must be >= 2");
  if (dim < 2) throw ParameterError("dim must be >= 2");
  if (modes_per_class < 1) throw ParameterError("modes_per_class must be >= 1");
  if (!(options.center_weight >= 0.0 && options.center_weight <= 1.0)) {
    throw ParameterError("center_weight must be in [0, 1]");
  }
  std::mt19937_64 rng(derive_seed(seed, kSpecs));
  std::vector<ClassSpec> specs;
  for (std::size_t c = 0; c < n_classes; ++c) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt <= options.max_retries; ++attempt) {
      ClassSpec spec = draw_class(static_cast<int>(c), dim, modes_per_class, options, rng);
      if (separated(spec, specs, options.min_separation)) {
        specs.push_back(std::move(spec));
        placed = true;
        break;
      }
    }
    if (!placed) {
      throw GenerationError("cannot separate class " + std::to_string(c) + " by " +
                            std::to_string(options.min_separation) + " in " +
                            std::to_string(dim) + " dimensions");
    }
  }
  return specs;
}

double min_signature_separation(const std::vector<ClassSpec>& specs) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < specs.size(); ++i)
    for (std::size_t j = i + 1; j < specs.size(); ++j)
      for (const auto& a : specs[i].modes)
        for (const auto& b : specs[j].modes) best = std::min(best, l2(a, b));
  return best;
}

SceneSample render_scene(const std::map<int, ClassSpec>& specs, const std::vector<int>& classes,
                         const SceneLayout& layout, std::uint64_t seed) {
  if (classes.empty()) throw ContractError("a scene needs at least one instance");
  if (layout.height == 0 || layout.width == 0) throw PlacementError("empty grid");
  if (layout.min_box < 1 || layout.min_box > layout.max_box || layout.min_box > layout.height ||
      layout.min_box > layout.width) {
    throw PlacementError("instance boxes cannot fit in a " + std::to_string(layout.height) + "x" +
                         std::to_string(layout.width) + " grid");
  }
  const std::size_t dim = specs.begin()->second.dim();
  const std::size_t h = layout.height, w = layout.width;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<double> grid(h * w * dim);
  for (double& v : grid) v = layout.noise * gauss(rng);

  SceneSample scene;
  scene.id = seed;
  for (int cls : classes) {
    auto it = specs.find(cls);
    if (it == specs.end()) throw ContractError("unknown class id " + std::to_string(cls));
    const ClassSpec& spec = it->second;
    std::uniform_int_distribution<std::size_t> pick_mode(0, spec.modes.size() - 1);
    const std::size_t mode = pick_mode(rng);
    std::vector<double> instance = spec.modes[mode];
    for (double& v : instance) v += spec.mode_spread * gauss(rng);
    const Box box = place_box(h, w, layout, scene.boxes, rng);
    for (auto y = static_cast<std::size_t>(box.y1); y < static_cast<std::size_t>(box.y2); ++y) {
      for (auto x = static_cast<std::size_t>(box.x1); x < static_cast<std::size_t>(box.x2); ++x) {
        double* cell = &grid[(y * w + x) * dim];
        for (std::size_t k = 0; k < dim; ++k) cell[k] = instance[k] + layout.noise * gauss(rng);
      }
    }
    scene.boxes.push_back(box);
    scene.labels.push_back(cls);
    scene.modes.push_back(static_cast<int>(mode));
  }
  scene.grid = FeatureMap(h, w, Tensor({h * w, dim}, std::move(grid)));
  return scene;
}

SceneSample render_scene(const std::vector<ClassSpec>& specs, std::size_t instances_per_scene,
                         std::size_t height, std::size_t width, double noise, std::uint64_t seed) {
  if (instances_per_scene < 1) throw ContractError("instances_per_scene must be >= 1");
  if (specs.empty()) throw ContractError("no class specs");
  std::map<int, ClassSpec> by_id;
  for (const auto& s : specs) by_id.emplace(s.id, s);
  std::mt19937_64 rng(derive_seed(seed, kBaseScene));
  std::uniform_int_distribution<std::size_t> pick(0, specs.size() - 1);
  std::vector<int> classes;
  for (std::size_t i = 0; i < instances_per_scene; ++i) classes.push_back(specs[pick(rng)].id);
  SceneLayout layout;
  layout.height = height;
  layout.width = width;
  layout.noise = noise;
  return render_scene(by_id, classes, layout, seed);
}

Tensor crop_support(const SceneSample& scene, const Box& box) {
  return pool_rows(scene.grid.data, {scene.grid.cells_in(box)});
}

// ---- DatasetSplit -----------------------------------------------------------

std::vector<int> DatasetSplit::classes(Phase phase) const {
  if (phase == Phase::base) return base_classes;
  std::vector<int> all = base_classes;
  all.insert(all.end(), novel_classes.begin(), novel_classes.end());
  std::sort(all.begin(), all.end());
  return all;
}

bool DatasetSplit::is_novel(int class_id) const {
  return std::find(novel_classes.begin(), novel_classes.end(), class_id) != novel_classes.end();
}

namespace {

std::vector<int> draw_classes(const std::vector<int>& pool, std::size_t max_instances, int forced,
                              std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> count(1, std::max<std::size_t>(1, max_instances));
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  const std::size_t n = count(rng);
  std::vector<int> classes;
  for (std::size_t i = 0; i < n; ++i) classes.push_back(pool[pick(rng)]);
  if (forced >= 0) {
    std::uniform_int_distribution<std::size_t> slot(0, n - 1);
    classes[slot(rng)] = forced;
  }
  return classes;
}

}  // namespace

SceneSample DatasetSplit::base_scene(std::uint64_t index, int forced) const {
  if (forced >= 0 && is_novel(forced)) throw ContractError("novel class requested from base pool");
  std::mt19937_64 rng(derive_seed(seed, kBaseScene, index));
  const std::vector<int> classes = draw_classes(base_classes, world.max_instances, forced, rng);
  return render_scene(specs, classes, world.layout, rng());
}

ShotSample DatasetSplit::base_support(int class_id, std::uint64_t index) const {
  if (is_novel(class_id)) throw ContractError("novel class requested from base pool");
  return support_shot(specs, world.layout, class_id, derive_seed(seed, kBaseSupport, index));
}

ShotSample DatasetSplit::probe_support(int class_id, std::uint64_t index) const {
  return support_shot(specs, world.layout, class_id, derive_seed(seed, kProbe, index));
}

SceneSample DatasetSplit::eval_scene(std::uint64_t index) const {
  std::mt19937_64 rng(derive_seed(seed, kEvalScene, index));
  std::uniform_int_distribution<std::size_t> pick_novel(0, novel_classes.size() - 1);
  const int forced = novel_classes[pick_novel(rng)];
  const std::vector<int> classes =
      draw_classes(this->classes(Phase::finetune), world.max_instances, forced, rng);
  return render_scene(specs, classes, world.layout, rng());
}

DatasetSplit make_split(const std::vector<ClassSpec>& specs, const WorldConfig& world,
                        std::size_t n_base, std::size_t n_novel, std::size_t shots,
                        std::uint64_t seed) {
  if (shots < 1) throw ParameterError("shots must be >= 1");
  if (n_base < 1 || n_novel < 1) throw ParameterError("need at least one base and one novel class");
  if (n_base + n_novel > specs.size()) {
    throw ParameterError("n_base + n_novel exceeds the " + std::to_string(specs.size()) +
                         " available classes");
  }
  DatasetSplit split;
  split.world = world;
  split.seed = seed;
  split.shots = shots;
  for (const auto& s : specs) split.specs.emplace(s.id, s);

  std::vector<int> ids;
  for (const auto& s : specs) ids.push_back(s.id);
  std::mt19937_64 rng(derive_seed(seed, kSplit));
  std::shuffle(ids.begin(), ids.end(), rng);
  split.base_classes.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_base));
  split.novel_classes.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_base),
                             ids.begin() + static_cast<std::ptrdiff_t>(n_base + n_novel));
  std::sort(split.base_classes.begin(), split.base_classes.end());
  std::sort(split.novel_classes.begin(), split.novel_classes.end());

  for (int cls : split.classes(Phase::finetune)) {
    auto& shots_for = split.frozen[cls];
    for (std::size_t k = 0; k < shots; ++k) {
      ShotSample shot;
      shot.class_id = cls;
      shot.scene = render_scene(split.specs, {cls}, world.layout,
                                derive_seed(seed, kFrozen, static_cast<std::uint64_t>(cls) * 1000003ULL + k));
      shot.vector = crop_support(shot.scene, shot.box());
      shots_for.push_back(std::move(shot));
    }
  }
  return split;
}

DatasetSplit make_world(const WorldConfig& world, std::size_t n_base, std::size_t n_novel,
                        std::size_t shots, std::uint64_t seed) {
  return make_split(
      generate_class_specs(world.n_classes, world.dim, world.modes_per_class, seed, world.classes),
      world, n_base, n_novel, shots, seed);
}

// ---- JSON -------------------------------------------------------------------

void to_json(nlohmann::json& j, const ClassSpec& s) {
  j = {{"id", s.id}, {"mode_spread", s.mode_spread}, {"modes", s.modes}};
}

void from_json(const nlohmann::json& j, ClassSpec& s) {
  s.id = j.at("id").get<int>();
  s.mode_spread = j.at("mode_spread").get<double>();
  s.modes = j.at("modes").get<std::vector<std::vector<double>>>();
}

void to_json(nlohmann::json& j, const SceneSample& s) {
  j = {{"id", s.id},
       {"height", s.grid.height},
       {"width", s.grid.width},
       {"dim", s.grid.dim()},
       {"grid", s.grid.data.to_vector()},
       {"boxes", s.boxes},
       {"labels", s.labels},
       {"modes", s.modes}};
}

void from_json(const nlohmann::json& j, SceneSample& s) {
  s.id = j.at("id").get<std::uint64_t>();
  const auto h = j.at("height").get<std::size_t>();
  const auto w = j.at("width").get<std::size_t>();
  const auto d = j.at("dim").get<std::size_t>();
  s.grid = FeatureMap(h, w, Tensor({h * w, d}, j.at("grid").get<std::vector<double>>()));
  s.boxes = j.at("boxes").get<std::vector<Box>>();
  s.labels = j.at("labels").get<std::vector<int>>();
  s.modes = j.value("modes", std::vector<int>(s.labels.size(), 0));
  if (s.boxes.size() != s.labels.size()) throw ContractError("boxes and labels differ in length");
}

void to_json(nlohmann::json& j, const WorldConfig& w) {
  j = {{"n_classes", w.n_classes},
       {"dim", w.dim},
       {"modes_per_class", w.modes_per_class},
       {"max_instances", w.max_instances},
       {"min_separation", w.classes.min_separation},
       {"mode_spread", w.classes.mode_spread},
       {"center_weight", w.classes.center_weight},
       {"height", w.layout.height},
       {"width", w.layout.width},
       {"noise", w.layout.noise},
       {"min_box", w.layout.min_box},
       {"max_box", w.layout.max_box},
       {"max_overlap", w.layout.max_overlap}};
}

void from_json(const nlohmann::json& j, WorldConfig& w) {
  w.n_classes = j.at("n_classes").get<std::size_t>();
  w.dim = j.at("dim").get<std::size_t>();
  w.modes_per_class = j.at("modes_per_class").get<std::size_t>();
  w.max_instances = j.at("max_instances").get<std::size_t>();
  w.classes.min_separation = j.at("min_separation").get<double>();
  w.classes.mode_spread = j.at("mode_spread").get<double>();
  w.classes.center_weight = j.at("center_weight").get<double>();
  w.layout.height = j.at("height").get<std::size_t>();
  w.layout.width = j.at("width").get<std::size_t>();
  w.layout.noise = j.at("noise").get<double>();
  w.layout.min_box = j.at("min_box").get<std::size_t>();
  w.layout.max_box = j.at("max_box").get<std::size_t>();
  w.layout.max_overlap = j.at("max_overlap").get<double>();
}

void to_json(nlohmann::json& j, const DatasetSplit& s) {
  nlohmann::json frozen = nlohmann::json::array();
  for (const auto& [cls, shots] : s.frozen) {
    for (const auto& shot : shots) {
      frozen.push_back({{"class_id", cls},
                        {"instance", shot.instance},
                        {"scene", shot.scene},
                        {"vector", shot.vector.to_vector()}});
    }
  }
  nlohmann::json specs = nlohmann::json::array();
  for (const auto& [id, spec] : s.specs) specs.push_back(spec);
  j = {{"seed", s.seed},
       {"shots", s.shots},
       {"world", s.world},
       {"specs", std::move(specs)},
       {"base_classes", s.base_classes},
       {"novel_classes", s.novel_classes},
       {"frozen", std::move(frozen)}};
}

void from_json(const nlohmann::json& j, DatasetSplit& s) {
  s.seed = j.at("seed").get<std::uint64_t>();
  s.shots = j.at("shots").get<std::size_t>();
  s.world = j.at("world").get<WorldConfig>();
  s.specs.clear();
  for (const auto& spec : j.at("specs")) {
    auto c = spec.get<ClassSpec>();
    s.specs.emplace(c.id, std::move(c));
  }
  s.base_classes = j.at("base_classes").get<std::vector<int>>();
  s.novel_classes = j.at("novel_classes").get<std::vector<int>>();
  s.frozen.clear();
  for (const auto& f : j.at("frozen")) {
    ShotSample shot;
    shot.class_id = f.at("class_id").get<int>();
    shot.instance = f.at("instance").get<std::size_t>();
    shot.scene = f.at("scene").get<SceneSample>();
    const auto v = f.at("vector").get<std::vector<double>>();
    shot.vector = Tensor::row(v);
    s.frozen[shot.class_id].push_back(std::move(shot));
  }
}

}  // namespace protodet
