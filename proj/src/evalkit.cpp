#include "protodet/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace protodet {

namespace {

struct Ranked {
  double confidence;
  std::size_t scene;
  std::size_t order;
  const Detection* det;
};

double area_under_envelope(const std::vector<bool>& tp, std::size_t n_gt) {
  std::vector<double> recall, precision;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    if (tp[i]) ++hits;
    recall.push_back(static_cast<double>(hits) / static_cast<double>(n_gt));
    precision.push_back(static_cast<double>(hits) / static_cast<double>(i + 1));
  }
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0.0, prev = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    if (recall[i] > prev) {
      ap += (recall[i] - prev) * precision[i];
      prev = recall[i];
    }
  }
  return ap;
}

}  // namespace

std::map<int, double> ap50(const std::vector<std::vector<Detection>>& detections,
                           const std::vector<GroundTruth>& truth) {
  if (detections.size() != truth.size()) {
    throw ContractError("detections cover " + std::to_string(detections.size()) +
                        " scenes but ground truth covers " + std::to_string(truth.size()));
  }
  std::map<int, std::size_t> n_gt;
  for (const auto& gt : truth) {
    if (gt.boxes.size() != gt.labels.size()) throw ContractError("ground truth boxes/labels differ");
    for (int c : gt.labels) ++n_gt[c];
  }

  std::map<int, double> out;
  for (const auto& [cls, count] : n_gt) {
    std::vector<Ranked> ranked;
    for (std::size_t s = 0; s < detections.size(); ++s) {
      for (std::size_t k = 0; k < detections[s].size(); ++k) {
        const Detection& d = detections[s][k];
        if (d.class_id == cls) ranked.push_back({d.confidence, s, k, &d});
      }
    }
    std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
      if (a.confidence != b.confidence) return a.confidence > b.confidence;
      if (a.scene != b.scene) return a.scene < b.scene;
      return a.order < b.order;
    });

    std::vector<std::vector<bool>> used(truth.size());
    for (std::size_t s = 0; s < truth.size(); ++s) used[s].assign(truth[s].boxes.size(), false);
    std::vector<bool> tp;
    for (const auto& r : ranked) {
      const GroundTruth& gt = truth[r.scene];
      std::size_t best = gt.boxes.size();
      double best_iou = 0.5;
      for (std::size_t g = 0; g < gt.boxes.size(); ++g) {
        if (gt.labels[g] != cls || used[r.scene][g]) continue;
        const double v = iou(r.det->box, gt.boxes[g]);
        if (v >= best_iou && (best == gt.boxes.size() || v > best_iou)) {
          best = g;
          best_iou = v;
        }
      }
      if (best < gt.boxes.size()) used[r.scene][best] = true;
      tp.push_back(best < gt.boxes.size());
    }
    out[cls] = area_under_envelope(tp, count);
  }
  return out;
}

double centroid_accuracy(const Tensor& features, const std::vector<int>& labels) {
  if (features.rank() != 2 || features.rows() != labels.size()) {
    throw DimensionError("centroid_accuracy: " + std::to_string(labels.size()) +
                         " labels for features " + shape_str(features.shape()));
  }
  std::map<int, std::vector<double>> means;
  std::map<int, std::size_t> counts;
  const std::size_t d = features.cols();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& m = means[labels[i]];
    m.resize(d, 0.0);
    for (std::size_t k = 0; k < d; ++k) m[k] += features.at(i, k);
    ++counts[labels[i]];
  }
  if (means.size() < 2) throw ContractError("centroid accuracy needs at least two classes");
  for (auto& [c, m] : means)
    for (double& v : m) v /= static_cast<double>(counts[c]);

  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double own = 0.0;
    double other = std::numeric_limits<double>::infinity();
    for (const auto& [c, m] : means) {
      double dist = 0.0;
      for (std::size_t k = 0; k < d; ++k) dist += std::abs(features.at(i, k) - m[k]);
      if (c == labels[i]) {
        own = dist;
      } else {
        other = std::min(other, dist);
      }
    }
    if (own < other) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

std::string to_string(EmbeddingStage s) {
  switch (s) {
    case EmbeddingStage::raw: return "raw";
    case EmbeddingStage::pre_isam: return "pre_isam";
    case EmbeddingStage::post_isam: return "post_isam";
  }
  return "raw";
}

void write_embeddings(std::ostream& os, const Tensor& features, const std::vector<int>& labels,
                      EmbeddingStage stage) {
  const std::size_t n = labels.size();
  const std::size_t d = n == 0 ? (features.rank() == 2 ? features.cols() : 0) : features.cols();
  if (n != 0 && (features.rank() != 2 || features.rows() != n)) {
    throw DimensionError("export_embeddings: features and labels are not aligned");
  }
  os << "class_id,stage";
  for (std::size_t k = 0; k < d; ++k) os << ",v" << k;
  os << '\n';
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  const std::string tag = to_string(stage);
  for (std::size_t i = 0; i < n; ++i) {
    os << labels[i] << ',' << tag;
    for (std::size_t k = 0; k < d; ++k) os << ',' << features.at(i, k);
    os << '\n';
  }
}

void export_embeddings(const Tensor& features, const std::vector<int>& labels,
                       EmbeddingStage stage, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_embeddings(out, features, labels, stage);
  out.flush();
  if (!out) throw IoError("failed writing '" + path + "'");
}

void MetricReport::finalize() {
  double s = 0.0;
  std::size_t n = 0;
  for (int c : novel_classes) {
    auto it = per_class_ap50.find(c);
    if (it == per_class_ap50.end()) continue;
    s += it->second;
    ++n;
  }
  mean_novel_ap50 = n == 0 ? 0.0 : s / static_cast<double>(n);
}

namespace {

MeanStd mean_std(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double residual = 0.0;
  for (double x : v) residual += x - mean;
  mean += residual / n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

}  // namespace

RunStats multi_run_stats(const std::vector<MetricReport>& reports) {
  if (reports.size() < 2) throw ContractError("multi_run_stats needs at least two reports");
  RunStats stats;
  stats.runs = reports.size();
  for (const auto& r : reports) {
    if (r.per_class_ap50.size() != reports.front().per_class_ap50.size()) {
      throw ContractError("reports cover different class sets");
    }
    for (const auto& [c, _] : reports.front().per_class_ap50) {
      if (!r.per_class_ap50.count(c)) throw ContractError("reports cover different class sets");
    }
  }
  for (const auto& [c, _] : reports.front().per_class_ap50) {
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(r.per_class_ap50.at(c));
    stats.per_class_ap50[c] = mean_std(v);
  }
  std::vector<double> m;
  for (const auto& r : reports) m.push_back(r.mean_novel_ap50);
  stats.mean_novel_ap50 = mean_std(m);
  return stats;
}

double median(std::vector<double> values) {
  if (values.empty()) throw EmptyInputError("median of no values");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [c, v] : r.per_class_ap50) per[std::to_string(c)] = v;
  j = {{"per_class_ap50", per},
       {"novel_classes", r.novel_classes},
       {"mean_novel_ap50", r.mean_novel_ap50},
       {"seed", r.seed},
       {"shots", r.shots},
       {"prototype_mode", r.prototype_mode},
       {"baseline_variant", r.baseline_variant},
       {"use_isam", r.use_isam},
       {"use_qsam", r.use_qsam}};
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  r.per_class_ap50.clear();
  for (const auto& [k, v] : j.at("per_class_ap50").items()) r.per_class_ap50[std::stoi(k)] = v.get<double>();
  r.novel_classes = j.at("novel_classes").get<std::vector<int>>();
  r.mean_novel_ap50 = j.at("mean_novel_ap50").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.shots = j.at("shots").get<std::size_t>();
  r.prototype_mode = j.at("prototype_mode").get<std::string>();
  r.baseline_variant = j.at("baseline_variant").get<std::string>();
  r.use_isam = j.at("use_isam").get<bool>();
  r.use_qsam = j.at("use_qsam").get<bool>();
}

void to_json(nlohmann::json& j, const ClusterReport& r) {
  j = {{"accuracy_raw", r.accuracy_raw},
       {"accuracy_pre_isam", r.accuracy_pre_isam},
       {"accuracy_post_isam", r.accuracy_post_isam}};
}

void from_json(const nlohmann::json& j, ClusterReport& r) {
  r.accuracy_raw = j.at("accuracy_raw").get<double>();
  r.accuracy_pre_isam = j.at("accuracy_pre_isam").get<double>();
  r.accuracy_post_isam = j.at("accuracy_post_isam").get<double>();
}

void to_json(nlohmann::json& j, const MeanStd& m) { j = {{"mean", m.mean}, {"std", m.std}}; }

void to_json(nlohmann::json& j, const RunStats& s) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [c, v] : s.per_class_ap50) per[std::to_string(c)] = v;
  j = {{"runs", s.runs}, {"mean_novel_ap50", s.mean_novel_ap50}, {"per_class_ap50", per}};
}

}  // namespace protodet
