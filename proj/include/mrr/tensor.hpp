#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mrr {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major float64 array.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor from(std::initializer_list<double> values);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  // Number of elements per leading-axis entry (per sample for batched tensors).
  std::size_t row_size() const;
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }

  std::span<double> row(std::size_t i);
  std::span<const double> row(std::size_t i) const;

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  Tensor reshaped(Shape s) const;
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// Stacks rows [first, last) of a batched tensor.
Tensor slice_rows(const Tensor& t, std::size_t first, std::size_t last);
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double max_abs(std::span<const double> a);

}  // namespace mrr
