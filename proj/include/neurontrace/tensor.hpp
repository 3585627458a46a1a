#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace neurontrace {

using Shape = std::vector<std::size_t>;

std::size_t numel(std::span<const std::size_t> shape);
std::string shape_string(std::span<const std::size_t> shape);

/// Dense row-major tensor of doubles.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  /// Throws ConfigError when the element count does not match the shape.
  Tensor(Shape s, std::vector<double> values);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  std::span<const double> values() const { return data; }
  std::span<double> values() { return data; }

  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

}  // namespace neurontrace
