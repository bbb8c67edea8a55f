#pragma once

#include <cstddef>
#include <vector>

#include "protodet/geometry.hpp"
#include "protodet/tensor.hpp"

namespace protodet {

/// H x W grid of d-dimensional feature vectors, stored as an (H*W) x d
/// tensor in row-major spatial order (row index = y * W + x).
struct FeatureMap {
  std::size_t height = 0;
  std::size_t width = 0;
  Tensor data;

  FeatureMap() = default;
  FeatureMap(std::size_t h, std::size_t w, Tensor values);

  std::size_t dim() const { return data.cols(); }
  std::size_t cell(std::size_t y, std::size_t x) const { return y * width + x; }
  // Row indices of the cells covered by an integral, in-bounds box.
  std::vector<std::size_t> cells_in(const Box& box) const;
  // Same map with x and y swapped.
  FeatureMap transposed() const;
};

/// One pooled d-vector per region of interest; rows align with boxes.
struct RoIFeatures {
  Tensor data;
  std::vector<Box> boxes;

  RoIFeatures() = default;
  RoIFeatures(Tensor values, std::vector<Box> source_boxes);
  std::size_t count() const { return boxes.size(); }
};

}  // namespace protodet
