#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "oracle.hpp"
#include "protodet/evalkit.hpp"
#include "protodet/experiment.hpp"
#include "protodet/gradcheck_suite.hpp"

using namespace protodet;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::size_t kSeeds = 10;

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << std::fixed << v;
  return os.str();
}

void report(int n, const Verdict& v) {
  std::cout << "criterion " << n << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << std::endl;
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  return gather_rows(x, perm);
}

Tensor identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(v));
}

bool sums_exactly(const LossBreakdown& b) {
  return b.total == (((b.rpn_loc + b.rpn_cls) + b.det_loc) + b.det_cls) + b.meta;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict gradient_integrity() {
  const auto t0 = Clock::now();
  const auto results = run_gradcheck_suite(1e-5, 1e-4);
  const double elapsed = seconds_since(t0);
  double worst = 0.0;
  std::size_t failed = 0;
  bool end_to_end = false;
  for (const auto& r : results) {
    worst = std::max(worst, r.report.worst);
    failed += r.report.pass ? 0 : 1;
    end_to_end |= r.name.find("episode_loss") != std::string::npos;
  }
  const bool pass = failed == 0 && end_to_end && elapsed <= 120.0;
  return {pass, std::to_string(results.size()) + " checks, " + std::to_string(failed) +
                    " failed, worst rel err " + fmt(worst, 8) + ", " + fmt(elapsed, 1) + " s"};
}

Verdict attention_invariants() {
  std::mt19937_64 rng(2024);
  double softmax_err = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor p = softmax_rows(random_tensor({7, 11}, rng, 5.0));
    for (std::size_t r = 0; r < 7; ++r) {
      const auto row = p.row_values(r);
      softmax_err = std::max(softmax_err, std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0));
    }
  }

  AttentionConfig cfg;
  cfg.model_dim = 16;
  cfg.mlp_hidden = 64;
  const EncoderStack enc = EncoderStack::init(cfg, rng);
  const DecoderStack dec = DecoderStack::init(cfg, rng);
  const ForwardContext ctx = ForwardContext::eval();
  double isam_err = 0.0, qsam_err = 0.0;
  std::size_t perms = 0;
  const Tensor queries = random_tensor({4, 16}, rng);
  for (std::size_t k = 1; k <= 5; ++k) {
    const Tensor x = random_tensor({k, 16}, rng);
    const Tensor refined = isam_refine(x, enc, ctx);
    const Tensor aggregated = qsam_aggregate(queries, x, dec, ctx);
    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    do {
      const Tensor px = permute_rows(x, perm);
      isam_err = std::max(isam_err, oracle::max_abs_diff(oracle::of(isam_refine(px, enc, ctx)),
                                                         oracle::of(permute_rows(refined, perm))));
      qsam_err = std::max(qsam_err, oracle::max_abs_diff(oracle::of(qsam_aggregate(queries, px, dec, ctx)),
                                                         oracle::of(aggregated)));
      ++perms;
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
  const bool pass = softmax_err <= 1e-9 && isam_err <= 1e-9 && qsam_err <= 1e-9;
  return {pass, "softmax " + fmt(softmax_err, 17) + ", isam " + fmt(isam_err, 17) + ", qsam " +
                    fmt(qsam_err, 17) + " over " + std::to_string(perms) + " permutations"};
}

Verdict oracle_equivalence() {
  std::mt19937_64 rng(77);
  const std::size_t d = 6;

  double single_err = 0.0;
  AttentionConfig one;
  one.model_dim = d;
  one.heads = 1;
  MultiHeadParams id;
  id.query = {identity(d)};
  id.key = {identity(d)};
  id.value = {identity(d)};
  id.output = identity(d);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor q = random_tensor({3, d}, rng), k = random_tensor({5, d}, rng), v = random_tensor({5, d}, rng);
    single_err = std::max(single_err, oracle::max_abs_diff(oracle::of(multi_head(q, k, v, id, one)),
                                                           oracle::attention(oracle::of(q), oracle::of(k),
                                                                             oracle::of(v))));
  }

  double two_err = 0.0;
  AttentionConfig two;
  two.model_dim = d;
  two.heads = 2;
  for (int trial = 0; trial < 50; ++trial) {
    const MultiHeadParams p = MultiHeadParams::init(two, rng);
    std::vector<oracle::HeadWeights> heads;
    for (std::size_t h = 0; h < 2; ++h)
      heads.push_back({oracle::of(p.query[h]), oracle::of(p.key[h]), oracle::of(p.value[h])});
    const Tensor q = random_tensor({4, d}, rng), k = random_tensor({3, d}, rng), v = random_tensor({3, d}, rng);
    two_err = std::max(two_err, oracle::max_abs_diff(oracle::of(multi_head(q, k, v, p, two)),
                                                     oracle::multi_head(oracle::of(q), oracle::of(k), oracle::of(v),
                                                                        heads, oracle::of(p.output))));
  }

  std::size_t ap_cases = 0, ap_mismatch = 0;
  std::uniform_int_distribution<int> coord(0, 5), extent(1, 3), count(1, 5), ngt(1, 3);
  for (int trial = 0; trial < 5000; ++trial) {
    GroundTruth gt;
    std::vector<std::vector<std::vector<double>>> gt_oracle(1);
    for (int g = ngt(rng); g > 0; --g) {
      const double x = coord(rng), y = coord(rng), w = extent(rng), h = extent(rng);
      gt.boxes.push_back({x, y, x + w, y + h});
      gt.labels.push_back(1);
      gt_oracle[0].push_back({x, y, x + w, y + h});
    }
    std::vector<Detection> dets;
    std::vector<oracle::ScoredBox> flat;
    for (int n = count(rng); n > 0; --n) {
      const double x = coord(rng), y = coord(rng), w = extent(rng), h = extent(rng);
      const double s = static_cast<double>(rng() % 5) / 4.0;
      dets.push_back({{x, y, x + w, y + h}, 1, s, 0});
      flat.push_back({x, y, x + w, y + h, s, 0});
    }
    ++ap_cases;
    if (ap50({dets}, {gt}).at(1) != oracle::brute_force_ap50(flat, gt_oracle)) ++ap_mismatch;
  }
  const bool pass = single_err <= 1e-12 && two_err <= 1e-10 && ap_mismatch == 0;
  return {pass, "1-head " + fmt(single_err, 17) + ", 2-head " + fmt(two_err, 17) + ", AP50 " +
                    std::to_string(ap_mismatch) + "/" + std::to_string(ap_cases) + " mismatches"};
}

struct ArmRuns {
  std::vector<RunResult> runs;
  std::vector<double> ap() const {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.metrics.mean_novel_ap50);
    return v;
  }
};

ArmRuns run_arm(const RunConfig& base, const Arm& arm, std::size_t k, std::size_t jobs) {
  RunConfig cfg = with_arm(base, arm);
  cfg.k_eval = k;
  ArmRuns out;
  out.runs.resize(kSeeds);
  parallel_for(kSeeds, jobs, [&](std::size_t s) { out.runs[s] = run_experiment(cfg, s); });
  return out;
}

std::string list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(v[i], 3);
  return s + "]";
}

Verdict clustering_trend(const ArmRuns& full) {
  std::vector<double> pre, post;
  for (const auto& r : full.runs) {
    pre.push_back(r.base_cluster.accuracy_pre_isam);
    post.push_back(r.base_cluster.accuracy_post_isam);
  }
  const double gain = median(post) - median(pre);
  return {gain >= 0.05, "median pre-ISAM " + fmt(median(pre)) + ", post-ISAM " + fmt(median(post)) +
                            " (gain " + fmt(100 * gain, 1) + " pp); pre " + list(pre) + " post " + list(post)};
}

Verdict prototype_ordering(const std::map<std::string, ArmRuns>& arms) {
  const double base = median(arms.at("baseline").ap());
  const double isam = median(arms.at("isam").ap());
  const double qsam = median(arms.at("qsam").ap());
  const double full = median(arms.at("full").ap());
  const bool pass = full >= base && full >= isam && full >= qsam && isam >= base && qsam >= base;
  return {pass, "median novel AP50 at K=5: baseline " + fmt(base) + ", isam " + fmt(isam) + ", qsam " +
                    fmt(qsam) + ", full " + fmt(full)};
}

Verdict shot_monotonicity(const ArmRuns& k5, const ArmRuns& k1) {
  const double m5 = median(k5.ap()), m1 = median(k1.ap());
  return {m5 >= m1, "full method median novel AP50: K=1 " + fmt(m1) + ", K=5 " + fmt(m5) + "; K=1 " +
                        list(k1.ap()) + " K=5 " + list(k5.ap())};
}

Verdict cache_coherence(const RunConfig& base, const std::vector<const RunResult*>& models) {
  std::size_t scenes = 0, detections = 0, mismatches = 0;
  for (const RunResult* r : models) {
    const RunConfig cfg = base.resolved();
    const DatasetSplit split = build_split(cfg, r->metrics.seed);
    const PrototypeCache cache = build_prototype_cache(r->model, split);
    const std::vector<SupportSet> supports = frozen_supports(split);
    for (std::size_t i = 0; i < 100; ++i) {
      const SceneSample scene = split.eval_scene(i);
      const auto a = infer(r->model, scene, cache);
      const auto b = infer_uncached(r->model, scene, supports);
      ++scenes;
      detections += a.size();
      bool same = a.size() == b.size();
      for (std::size_t j = 0; same && j < a.size(); ++j) {
        same = a[j].box == b[j].box && a[j].class_id == b[j].class_id && a[j].confidence == b[j].confidence &&
               a[j].scene_id == b[j].scene_id;
      }
      if (!same) ++mismatches;
    }
  }
  return {mismatches == 0 && scenes >= 100, std::to_string(scenes) + " scenes, " + std::to_string(detections) +
                                                " detections, " + std::to_string(mismatches) + " mismatching scenes"};
}

Verdict loss_decomposition(const std::vector<const ArmRuns*>& all) {
  std::size_t steps = 0, bad = 0, runs = 0;
  for (const ArmRuns* arm : all) {
    for (const auto& r : arm->runs) {
      ++runs;
      for (const auto* trace : {&r.base_trace, &r.finetune_trace}) {
        for (const auto& b : *trace) {
          ++steps;
          if (!sums_exactly(b)) ++bad;
        }
      }
    }
  }
  return {bad == 0 && steps > 0, std::to_string(steps) + " steps over " + std::to_string(runs) + " runs, " +
                                     std::to_string(bad) + " inexact"};
}

Verdict determinism() {
  const fs::path root = fs::temp_directory_path() / "protodet_acceptance_determinism";
  fs::remove_all(root);
  std::vector<std::string> outputs;
  for (const char* name : {"a", "b"}) {
    const fs::path dir = root / name;
    fs::create_directories(dir);
    const std::string flags = " --seed 3 --jobs 1 --out " + dir.string() + " > /dev/null 2>&1";
    const std::string cli = PROTODET_CLI;
    if (std::system((cli + " train" + flags).c_str()) != 0 || std::system((cli + " eval" + flags).c_str()) != 0) {
      return {false, "CLI run failed in " + dir.string()};
    }
    outputs.push_back(read_file(dir / "metrics.json"));
  }
  fs::remove_all(root);
  const bool pass = !outputs[0].empty() && outputs[0] == outputs[1];
  return {pass, "metrics.json " + std::to_string(outputs[0].size()) + " bytes, " +
                    (pass ? "byte-identical" : "differs")};
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  const std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
  std::vector<bool> passed(11, false), reported(11, false);
  auto record = [&](int n, const Verdict& v) {
    passed[static_cast<std::size_t>(n)] = v.pass;
    reported[static_cast<std::size_t>(n)] = true;
    report(n, v);
  };

  try {
    record(1, gradient_integrity());
    record(2, attention_invariants());
    record(3, oracle_equivalence());

    const RunConfig base;
    std::map<std::string, ArmRuns> arms;
    for (const Arm& arm : ablation_arms()) arms[arm.name] = run_arm(base, arm, 5, jobs);
    const ArmRuns full_k1 = run_arm(base, ablation_arms().back(), 1, jobs);

    record(4, clustering_trend(arms.at("full")));
    record(5, prototype_ordering(arms));
    record(6, shot_monotonicity(arms.at("full"), full_k1));
    record(7, cache_coherence(base, {&arms.at("full").runs[0], &arms.at("baseline").runs[0]}));
    record(8, loss_decomposition({&arms.at("baseline"), &arms.at("isam"), &arms.at("qsam"), &arms.at("full"),
                                  &full_k1}));
    record(9, determinism());
  } catch (const std::exception& e) {
    std::cout << "acceptance suite aborted: " << e.what() << std::endl;
  }
  for (int n = 1; n <= 9; ++n)
    if (!reported[static_cast<std::size_t>(n)]) record(n, {false, "not evaluated"});

  const double elapsed = seconds_since(t0);
  record(10, {elapsed <= 900.0, "suite wall time " + fmt(elapsed, 1) + " s with " + std::to_string(jobs) +
                                    " worker thread(s)"});

  const bool all = std::all_of(passed.begin() + 1, passed.end(), [](bool b) { return b; });
  return all ? 0 : 1;
}
