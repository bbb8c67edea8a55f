#include "protodet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "protodet/error.hpp"

namespace protodet {

bool Box::is_integral() const {
  return x1 == std::floor(x1) && y1 == std::floor(y1) && x2 == std::floor(x2) &&
         y2 == std::floor(y2);
}

double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw ContractError("iou of a degenerate box");
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

std::vector<double> encode_offsets(const Box& ref, const Box& target) {
  const double rw = ref.width(), rh = ref.height();
  const double rcx = ref.x1 + 0.5 * rw, rcy = ref.y1 + 0.5 * rh;
  const double tcx = target.x1 + 0.5 * target.width(), tcy = target.y1 + 0.5 * target.height();
  return {(tcx - rcx) / rw, (tcy - rcy) / rh, std::log(target.width() / rw),
          std::log(target.height() / rh)};
}

Box decode_offsets(const Box& ref, const double* offsets) {
  const double rw = ref.width(), rh = ref.height();
  const double cx = ref.x1 + 0.5 * rw + offsets[0] * rw;
  const double cy = ref.y1 + 0.5 * rh + offsets[1] * rh;
  // Clamp the log-scale terms so an untrained regressor cannot overflow.
  const double w = rw * std::exp(std::clamp(offsets[2], -4.0, 4.0));
  const double h = rh * std::exp(std::clamp(offsets[3], -4.0, 4.0));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                             double iou_threshold) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> kept;
  for (std::size_t i : order) {
    bool keep = true;
    for (std::size_t k : kept) {
      if (iou(boxes[i], boxes[k]) > iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(i);
  }
  return kept;
}

void to_json(nlohmann::json& j, const Box& b) { j = nlohmann::json::array({b.x1, b.y1, b.x2, b.y2}); }

void from_json(const nlohmann::json& j, Box& b) {
  b = Box{j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(),
          j.at(3).get<double>()};
}

}  // namespace protodet
