#pragma once

#include <vector>

#include <nlohmann/json.hpp>

namespace protodet {

/// Axis-aligned box in grid-cell coordinates, inclusive-exclusive:
/// cells x1 <= x < x2, y1 <= y < y2.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const { return x1 < x2 && y1 < y2; }
  bool within(double grid_width, double grid_height) const {
    return x1 >= 0 && y1 >= 0 && x2 <= grid_width && y2 <= grid_height;
  }
  bool is_integral() const;

  friend bool operator==(const Box&, const Box&) = default;
};

/// Intersection over union; 0 when disjoint. Throws ContractError for a box
/// with zero area.
double iou(const Box& a, const Box& b);

/// Box regression targets (dx, dy, dw, dh) of `target` relative to `ref`:
/// centre offsets normalised by ref size, log-scale width and height.
std::vector<double> encode_offsets(const Box& ref, const Box& target);
Box decode_offsets(const Box& ref, const double* offsets);

/// Greedy non-maximum suppression. Returns the kept indices in descending
/// score order (ties keep the lower index first).
std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                             double iou_threshold);

void to_json(nlohmann::json& j, const Box& b);
void from_json(const nlohmann::json& j, Box& b);

}  // namespace protodet
