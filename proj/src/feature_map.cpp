#include "protodet/feature_map.hpp"

namespace protodet {

FeatureMap::FeatureMap(std::size_t h, std::size_t w, Tensor values)
    : height(h), width(w), data(std::move(values)) {
  if (h == 0 || w == 0) throw DimensionError("feature map needs positive height and width");
  if (data.rank() != 2 || data.rows() != h * w) {
    throw DimensionError("feature map data must have H*W rows, got " + shape_str(data.shape()));
  }
}

std::vector<std::size_t> FeatureMap::cells_in(const Box& box) const {
  if (!box.valid() || !box.is_integral() ||
      !box.within(static_cast<double>(width), static_cast<double>(height))) {
    throw BoundsError("box is not an integral in-bounds region of the grid");
  }
  std::vector<std::size_t> cells;
  for (auto y = static_cast<std::size_t>(box.y1); y < static_cast<std::size_t>(box.y2); ++y)
    for (auto x = static_cast<std::size_t>(box.x1); x < static_cast<std::size_t>(box.x2); ++x)
      cells.push_back(cell(y, x));
  return cells;
}

FeatureMap FeatureMap::transposed() const {
  std::vector<std::size_t> order;
  order.reserve(height * width);
  // New grid is width x height; new cell (y', x') = old (x', y').
  for (std::size_t y = 0; y < width; ++y)
    for (std::size_t x = 0; x < height; ++x) order.push_back(cell(x, y));
  return FeatureMap(width, height, gather_rows(data, order));
}

RoIFeatures::RoIFeatures(Tensor values, std::vector<Box> source_boxes)
    : data(std::move(values)), boxes(std::move(source_boxes)) {
  if (data.rank() != 2 || data.rows() != boxes.size()) {
    throw DimensionError("RoI feature rows must match the box count");
  }
}

}  // namespace protodet
