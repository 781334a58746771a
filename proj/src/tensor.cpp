#include "mrr/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "mrr/error.hpp"

namespace mrr {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    out << (i ? "," : "") << shape[i];
  }
  out << ')';
  return out.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_size(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (shape_size(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_to_string(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
}

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::row_size() const {
  if (shape.empty()) return 0;
  return shape[0] == 0 ? 0 : data.size() / shape[0];
}

std::span<double> Tensor::row(std::size_t i) {
  const std::size_t n = row_size();
  return std::span<double>(data).subspan(i * n, n);
}

std::span<const double> Tensor::row(std::size_t i) const {
  const std::size_t n = row_size();
  return std::span<const double>(data).subspan(i * n, n);
}

Tensor Tensor::reshaped(Shape s) const {
  if (shape_size(s) != data.size()) {
    throw ShapeError("cannot reshape " + shape_to_string(shape) + " to " + shape_to_string(s));
  }
  return Tensor(std::move(s), data);
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor slice_rows(const Tensor& t, std::size_t first, std::size_t last) {
  Shape shape = t.shape;
  shape[0] = last - first;
  const std::size_t n = t.row_size();
  return Tensor(std::move(shape), std::vector<double>(t.data.begin() + first * n, t.data.begin() + last * n));
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices) {
  Shape shape = t.shape;
  shape[0] = indices.size();
  Tensor out(std::move(shape));
  const std::size_t n = t.row_size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto src = t.row(indices[i]);
    std::copy(src.begin(), src.end(), out.data.begin() + i * n);
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double max_abs(std::span<const double> a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace mrr
