#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tracke {

// Error taxonomy. The CLI maps these onto exit codes; everything numeric
// that breaks mid-run is a NumericalError.
class Error : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class ShapeError : public Error {
  using Error::Error;
};
class ValueError : public Error {
  using Error::Error;
};
class FormatError : public Error {
  using Error::Error;
};
class IoError : public Error {
  using Error::Error;
};
class NumericalError : public Error {
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

// Dense row-major tensor of doubles. Values are immutable by convention once
// a tensor has been handed to the tape; mutation is only used while building.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), values_(shape_numel(shape_), 0.0) {
    validate_shape();
  }

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    validate_shape();
    if (values_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor value count " + std::to_string(values_.size()) +
                       " does not match shape " + shape_to_string(shape_));
    }
    check_finite("tensor construction");
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.values_.begin(), t.values_.end(), v);
    return t;
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r ? rows.begin()->size() : 0;
    Tensor t({r, c});
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged row in from_rows");
      for (double v : row) t.values_[i++] = v;
    }
    t.check_finite("from_rows");
    return t;
  }

  static Tensor vector(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  std::size_t rank() const { return shape_.size(); }

  std::size_t rows() const {
    require_rank2("rows()");
    return shape_[0];
  }
  std::size_t cols() const {
    require_rank2("cols()");
    return shape_[1];
  }

  double& at(std::size_t r, std::size_t c) {
    require_rank2("at(r,c)");
    return values_[r * shape_[1] + c];
  }
  double at(std::size_t r, std::size_t c) const {
    require_rank2("at(r,c)");
    return values_[r * shape_[1] + c];
  }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  bool is_scalar() const { return size() == 1; }
  double scalar_value() const {
    if (!is_scalar()) {
      throw ShapeError("expected scalar tensor, got shape " + shape_to_string(shape_));
    }
    return values_[0];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void check_finite(const std::string& context) const {
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!std::isfinite(values_[i])) {
        throw NumericalError("non-finite value at flat index " + std::to_string(i) +
                             " during " + context);
      }
    }
  }

 private:
  void validate_shape() const {
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("zero extent in shape " + shape_to_string(shape_));
    }
  }
  void require_rank2(const char* what) const {
    if (shape_.size() != 2) {
      throw ShapeError(std::string(what) + " requires a rank-2 tensor, got " +
                       shape_to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> values_;
};

inline bool approx_equal(const Tensor& a, const Tensor& b, double tol) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::abs(a[i] - b[i]) > tol) return false;
  }
  return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Non-differentiating log-softmax over one column of a logits matrix.
// Decoding works on values only, so this lives outside the tape.
inline std::vector<double> log_softmax_column(const Tensor& logits, std::size_t col) {
  std::size_t v = logits.rows();
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < v; ++i) mx = std::max(mx, logits.at(i, col));
  double sum = 0.0;
  for (std::size_t i = 0; i < v; ++i) sum += std::exp(logits.at(i, col) - mx);
  double lse = mx + std::log(sum);
  std::vector<double> out(v);
  for (std::size_t i = 0; i < v; ++i) out[i] = logits.at(i, col) - lse;
  return out;
}

}  // namespace tracke
