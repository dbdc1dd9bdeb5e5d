#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace iba {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_size(const Shape& s);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ValueError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Toggles NaN/Inf scanning after every op. Off by default; tests keep it on.
void set_nonfinite_checks(bool enabled);
bool nonfinite_checks_enabled();

// Dense 64-bit float tensor, row-major, immutable payload. Copies share
// storage. A rank-0 tensor is a scalar with one element.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  const std::vector<double>& values() const;
  const double* data() const;
  double value() const;

  // Same storage under a new shape; element count must match.
  Tensor reshaped(Shape shape) const;

  template <typename... Ix>
  double operator()(Ix... ix) const {
    const std::size_t idx[sizeof...(Ix)] = {static_cast<std::size_t>(ix)...};
    return values()[flat_index(idx, sizeof...(Ix))];
  }

  // Autodiff bookkeeping: which tape (if any) produced this tensor.
  std::uint64_t tape_id() const { return tape_id_; }
  int node() const { return node_; }
  Tensor traced(std::uint64_t tape_id, int node) const;

  void save(std::ostream& out) const;
  static Tensor load(std::istream& in);
  void save_file(const std::string& path) const;
  static Tensor load_file(const std::string& path);

 private:
  std::size_t flat_index(const std::size_t* idx, std::size_t n) const;

  Shape shape_{};
  std::shared_ptr<const std::vector<double>> data_{};
  std::uint64_t tape_id_ = 0;
  int node_ = -1;
};

double max_abs_diff(const Tensor& a, const Tensor& b);
void check_finite(const Tensor& t, const char* op);

}  // namespace iba
