#pragma once

// Define-by-run reverse-mode differentiation over dense 2-D double tensors.
//
// A Tape records every primitive application in creation order, which is a
// valid topological order by construction. Leaves created with Tape::leaf()
// accumulate gradients; constants never do. Every primitive rejects
// non-finite outputs with NumericError.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "proda/error.hpp"

namespace proda::diff {

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor(1, 1, value); }
  static Tensor row(std::span<const double> values);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::string shape_string() const;

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<const double> row_span(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols_, cols_);
  }
  std::span<double> row_span(std::size_t r) {
    return std::span<double>(data_).subspan(r * cols_, cols_);
  }

  double item() const;
  bool all_finite() const;
  bool same_shape(const Tensor& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

enum class Axis { Rows, Cols };

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  // Gradient of the last backward() loss with respect to v; zero tensor when
  // v did not contribute.
  Tensor grad(Var v) const;
  bool reached(Var v) const { return nodes_.at(v.id).touched; }

  void backward(Var loss);
  std::size_t size() const { return nodes_.size(); }

  // Used by primitives.
  Var record(Tensor value, std::vector<std::size_t> inputs, Backward backward,
             const char* op);
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor& node_value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& node_grad(std::size_t id) const { return nodes_[id].grad; }
  std::size_t input(std::size_t id, std::size_t k) const { return nodes_[id].inputs[k]; }
  std::size_t input_count(std::size_t id) const { return nodes_[id].inputs.size(); }
  // Adds g into the gradient buffer of node id (no-op for constants).
  void accumulate(std::size_t id, const Tensor& g);
  void accumulate(std::size_t id, Tensor&& g);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    Backward backward;
    bool requires_grad = false;
    bool is_leaf = false;
    bool touched = false;
  };
  std::vector<Node> nodes_;
};

struct GradOptions {
  // Throw when a parameter is not reachable from the loss.
  bool strict = false;
};

// One gradient per parameter, shaped like the parameter. Loss must be 1x1.
std::vector<Tensor> grad(Var loss, std::span<const Var> params, GradOptions options = {});

// Elementwise binary ops broadcast dimensions of size 1 (NumPy rules, rank 2).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);

Var matmul(Var a, Var b);
Var transpose(Var a);

Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var square(Var a);
Var abs(Var a);
Var sqrt(Var a);

Var sum(Var a);
// Rows: reduce over rows -> 1 x cols. Cols: reduce over columns -> rows x 1.
Var sum(Var a, Axis axis);
Var mean(Var a);
Var mean(Var a, Axis axis);
Var logsumexp(Var a);
Var logsumexp(Var a, Axis axis);

// Row-wise L2 norm (rows x 1) and row-wise normalization.
Var l2_norm(Var a);
Var l2_normalize(Var a);

Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var gather_rows(Var a, std::span<const std::size_t> indices);
Var reshape(Var a, std::size_t rows, std::size_t cols);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator/(Var a, double s) { return scale(a, 1.0 / s); }
inline Var operator+(Var a, double s) { return add_scalar(a, s); }
inline Var operator-(Var a, double s) { return add_scalar(a, -s); }

// Builds a scalar loss on a fresh tape from leaves holding the given values.
using LossBuilder = std::function<Var(Tape&, std::span<const Var>)>;

// Max over sampled coordinates of |analytic - numeric| / max(|numeric|, 1e-8),
// with numeric gradients from central differences. Samples coordinates
// without replacement (all of them when sample_count exceeds the total).
double finite_diff_check(const LossBuilder& build, std::span<const Tensor> params,
                         double step, std::size_t sample_count, std::uint64_t seed);

}  // namespace proda::diff
