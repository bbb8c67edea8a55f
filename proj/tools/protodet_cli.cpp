#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "protodet/experiment.hpp"
#include "protodet/gradcheck_suite.hpp"
#include "protodet/params.hpp"

namespace fs = std::filesystem;
using namespace protodet;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

struct Options {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> seeds;
  std::optional<std::size_t> k;
  std::optional<std::size_t> iterations;
  std::optional<std::size_t> jobs;
  std::string out = "out";
  std::string snapshot;
  bool print_config = false;
};

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config_file, "key = value config file");
  sub->add_option("--set", o.overrides, "override one key, e.g. --set train.lr=0.02");
  sub->add_option("--seed", o.seed, "run seed (train.seed)");
  sub->add_option("--seeds", o.seeds, "number of seeds for multi-seed commands (sweep.seeds)");
  sub->add_option("--k", o.k, "shots at finetune and inference (train.k_eval)");
  sub->add_option("--iterations", o.iterations, "base and finetune iterations");
  sub->add_option("--jobs", o.jobs, "seeds run in parallel (sweep.jobs)");
  sub->add_option("--out", o.out, "output directory");
  sub->add_flag("--print-config", o.print_config, "print the resolved config and exit");
}

RunConfig build_config(const Options& o) {
  RunConfig cfg;
  if (!o.config_file.empty()) cfg.load_file(o.config_file);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigurationError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) cfg.seed = *o.seed;
  if (o.seeds) cfg.seeds = *o.seeds;
  if (o.k) cfg.k_eval = *o.k;
  if (o.iterations) cfg.base_iterations = cfg.finetune_iterations = *o.iterations;
  if (o.jobs) cfg.jobs = *o.jobs;
  cfg.validate();
  return cfg;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json loss_summary(const LossTrace& t) {
  if (t.empty()) return json::object();
  const LossBreakdown& b = t.back();
  return {{"steps", t.size()}, {"final_total", b.total}};
}

int cmd_gradcheck(const RunConfig& cfg, const fs::path& out) {
  const auto results = run_gradcheck_suite();
  json rows = json::array();
  bool ok = true;
  for (const auto& r : results) {
    std::cout << (r.report.pass ? "PASS " : "FAIL ") << r.name << "  max_rel_error=" << r.report.worst
              << '\n';
    rows.push_back({{"name", r.name}, {"max_rel_error", r.report.worst}, {"pass", r.report.pass}});
    ok = ok && r.report.pass;
  }
  write_json(out / "gradcheck.json",
             {{"config", cfg.to_json()}, {"tolerance", 1e-4}, {"eps", 1e-5}, {"checks", rows}, {"pass", ok}});
  std::cout << (ok ? "all checks passed" : "gradient check failed") << '\n';
  return ok ? kOk : kFailed;
}

int cmd_train(const RunConfig& cfg, const fs::path& out) {
  RunResult r = train_model(cfg, cfg.seed);
  ParamSnapshot::of(r.model).save(out / "snapshot.params");
  std::ofstream losses(out / "losses.jsonl", std::ios::binary | std::ios::trunc);
  write_loss_trace(losses, r.base_trace, Phase::base);
  write_loss_trace(losses, r.finetune_trace, Phase::finetune);
  write_json(out / "train.json", {{"config", cfg.to_json()},
                                  {"seed", cfg.seed},
                                  {"base", loss_summary(r.base_trace)},
                                  {"finetune", loss_summary(r.finetune_trace)}});
  std::cout << "wrote " << (out / "snapshot.params").string() << '\n';
  return kOk;
}

int cmd_eval(const RunConfig& cfg, const fs::path& out, const std::string& snapshot) {
  const RunConfig r = cfg.resolved();
  Model model = Model::init(r.detector, model_seed(cfg.seed));
  const fs::path snap = snapshot.empty() ? out / "snapshot.params" : fs::path(snapshot);
  ParamSnapshot::load(snap).apply_to(model);
  const MetricReport report = evaluate(model, build_split(r, cfg.seed), r, cfg.seed);
  write_json(out / "metrics.json", {{"config", cfg.to_json()}, {"report", report}});
  std::cout << "mean novel AP50 " << report.mean_novel_ap50 << '\n';
  return kOk;
}

json arm_block(const std::vector<MetricReport>& reports) {
  std::vector<double> values;
  json per_seed = json::array();
  for (const auto& r : reports) {
    values.push_back(r.mean_novel_ap50);
    per_seed.push_back(r);
  }
  json j = {{"median_novel_ap50", median(values)}, {"per_seed", per_seed}};
  if (reports.size() >= 2) j["stats"] = multi_run_stats(reports);
  return j;
}

std::vector<MetricReport> run_seeds(const RunConfig& cfg) {
  std::vector<MetricReport> reports(cfg.seeds);
  parallel_for(cfg.seeds, cfg.jobs, [&](std::size_t i) {
    reports[i] = run_experiment(cfg, cfg.seed + i).metrics;
  });
  return reports;
}

int cmd_arms(const RunConfig& cfg, const fs::path& out, const std::vector<Arm>& arms,
             const std::string& file) {
  json j = {{"config", cfg.to_json()}, {"arms", json::object()}};
  for (const auto& arm : arms) {
    const auto reports = run_seeds(with_arm(cfg, arm));
    j["arms"][arm.name] = arm_block(reports);
    std::cout << arm.name << ": median novel AP50 " << j["arms"][arm.name]["median_novel_ap50"]
              << '\n';
  }
  write_json(out / file, j);
  return kOk;
}

int cmd_cluster(const RunConfig& cfg, const fs::path& out) {
  const RunConfig r = cfg.resolved();
  const RunResult trained = train_model(r, cfg.seed, {}, false);
  const ClusterProbe probe =
      cluster_probe(trained.model, build_split(r, cfg.seed), r.cluster_shots, r.cluster_classes);
  export_embeddings(probe.raw, probe.labels, EmbeddingStage::raw, (out / "embeddings_raw.csv").string());
  export_embeddings(probe.pre_isam, probe.labels, EmbeddingStage::pre_isam,
                    (out / "embeddings_pre_isam.csv").string());
  export_embeddings(probe.post_isam, probe.labels, EmbeddingStage::post_isam,
                    (out / "embeddings_post_isam.csv").string());
  write_json(out / "cluster.json", {{"config", cfg.to_json()}, {"report", probe.report}});
  std::cout << "raw " << probe.report.accuracy_raw << "  pre_isam " << probe.report.accuracy_pre_isam
            << "  post_isam " << probe.report.accuracy_post_isam << '\n';
  return kOk;
}

int cmd_sweep_basek(const RunConfig& cfg, const fs::path& out) {
  json j = {{"config", cfg.to_json()}, {"k_train", json::object()}};
  for (std::size_t k : cfg.sweep_k) {
    RunConfig c = cfg;
    c.k_train = k;
    const auto reports = run_seeds(c);
    j["k_train"][std::to_string(k)] = arm_block(reports);
    std::cout << "k_train " << k << ": median novel AP50 "
              << j["k_train"][std::to_string(k)]["median_novel_ap50"] << '\n';
  }
  write_json(out / "sweep_basek.json", j);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"protodet: few-shot detection with per-sample attention prototypes"};
  app.require_subcommand(1);
  Options o;
  struct Command {
    const char* name;
    const char* help;
  };
  const Command commands[] = {
      {"gradcheck", "finite-difference check of every differentiable operation"},
      {"train", "base training and finetuning; writes snapshot.params and losses.jsonl"},
      {"eval", "evaluate a snapshot; writes metrics.json"},
      {"ablate", "ISAM/QSAM 2x2 ablation over several seeds; writes ablate.json"},
      {"compare", "per-sample vs averaged prototypes over several seeds; writes compare.json"},
      {"cluster-report", "support clustering after base training; writes cluster.json and CSVs"},
      {"sweep-basek", "sweep the base-training shot count; writes sweep_basek.json"},
  };
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    add_common(sub, o);
    if (std::string(c.name) == "eval") {
      sub->add_option("--snapshot", o.snapshot, "parameter snapshot (default OUT/snapshot.params)");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  RunConfig cfg;
  try {
    cfg = build_config(o);
  } catch (const ConfigurationError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const ParameterError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << e.what() << '\n';
    return kUsage;
  }
  if (o.print_config) {
    std::cout << cfg.to_text();
    return kOk;
  }

  try {
    const fs::path out(o.out);
    fs::create_directories(out);
    if (name == "gradcheck") return cmd_gradcheck(cfg, out);
    if (name == "train") return cmd_train(cfg, out);
    if (name == "eval") return cmd_eval(cfg, out, o.snapshot);
    if (name == "ablate") return cmd_arms(cfg, out, ablation_arms(), "ablate.json");
    if (name == "compare") {
      const auto& arms = ablation_arms();
      return cmd_arms(cfg, out, {arms.back(), arms.front()}, "compare.json");
    }
    if (name == "cluster-report") return cmd_cluster(cfg, out);
    if (name == "sweep-basek") return cmd_sweep_basek(cfg, out);
  } catch (const std::exception& e) {
    std::cerr << name << ": " << e.what() << '\n';
    return kFailed;
  }
  return kUsage;
}
