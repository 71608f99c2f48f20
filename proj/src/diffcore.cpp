#include "proda/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "proda/rng.hpp"

namespace proda::diff {

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string());
  }
}

Tensor Tensor::row(std::span<const double> values) {
  return Tensor(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged rows in Tensor::from_rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(r, c, std::move(data));
}

std::string Tensor::shape_string() const {
  return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_string());
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

const Tensor& Var::value() const { return tape->value(*this); }

// ---------------------------------------------------------------------------
// Tape

Var Tape::leaf(Tensor value) {
  if (!value.all_finite()) throw NumericError("non-finite leaf value");
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NumericError("non-finite constant value");
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, Backward backward,
                 const char* op) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite output from ") + op);
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [&](std::size_t i) { return nodes_[i].requires_grad; });
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (!n.touched || n.grad.empty()) return Tensor(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (!n.touched) {
    n.grad = g;
    n.touched = true;
    return;
  }
  auto dst = n.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::accumulate(std::size_t id, Tensor&& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (!n.touched) {
    n.grad = std::move(g);
    n.touched = true;
    return;
  }
  auto dst = n.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw InvalidArgument("loss belongs to a different tape");
  if (nodes_.at(loss.id).value.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " +
                     nodes_[loss.id].value.shape_string());
  }
  for (auto& n : nodes_) {
    n.touched = false;
    n.grad = Tensor();
  }
  Node& root = nodes_[loss.id];
  root.touched = true;
  root.grad = Tensor(1, 1, 1.0);
  if (!root.requires_grad) return;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.touched || !n.backward) continue;
    n.backward(*this, i);
  }
}

std::vector<Tensor> grad(Var loss, std::span<const Var> params, GradOptions options) {
  Tape& tape = *loss.tape;
  tape.backward(loss);
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Var& p : params) {
    if (p.tape != &tape) throw InvalidArgument("parameter belongs to a different tape");
    if (options.strict && !tape.reached(p)) {
      throw InvalidArgument("parameter " + std::to_string(p.id) +
                            " is detached from the loss");
    }
    out.push_back(tape.grad(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw InvalidArgument("operands on different tapes");
  return *a.tape;
}

std::size_t broadcast_dim(std::size_t a, std::size_t b, const char* op) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw ShapeError(std::string("cannot broadcast in ") + op);
}

// Sums g down to shape (rows, cols) along broadcast dimensions.
Tensor reduce_to(const Tensor& g, std::size_t rows, std::size_t cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  Tensor out(rows, cols);
  for (std::size_t r = 0; r < g.rows(); ++r) {
    const std::size_t rr = rows == 1 ? 0 : r;
    for (std::size_t c = 0; c < g.cols(); ++c) {
      out(rr, cols == 1 ? 0 : c) += g(r, c);
    }
  }
  return out;
}

template <typename F>
Tensor broadcast_apply(const Tensor& a, const Tensor& b, F f, const char* op) {
  const std::size_t rows = broadcast_dim(a.rows(), b.rows(), op);
  const std::size_t cols = broadcast_dim(a.cols(), b.cols(), op);
  Tensor out(rows, cols);
  const bool ar = a.rows() == 1, ac = a.cols() == 1, br = b.rows() == 1, bc = b.cols() == 1;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out(r, c) = f(a(ar ? 0 : r, ac ? 0 : c), b(br ? 0 : r, bc ? 0 : c));
    }
  }
  return out;
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.rows(), a.cols());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

// out = a * b (plain dense product).
Tensor matmul_raw(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row_span(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row_span(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

// out = a * b^T
Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row_span(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row_span(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      out(i, j) = s;
    }
  }
  return out;
}

// out = a^T * b
Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  Tensor out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row_span(k);
    auto brow = b.row_span(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto orow = out.row_span(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aki * brow[j];
    }
  }
  return out;
}

Tensor transpose_raw(const Tensor& a) {
  Tensor out(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  return out;
}

template <typename F>
Var unary(Var a, F forward, const char* op,
          std::function<Tensor(const Tensor& x, const Tensor& y, const Tensor& g)> local) {
  Tape& t = *a.tape;
  Tensor out = map(t.value(a), forward);
  return t.record(std::move(out), {a.id},
                  [local = std::move(local)](Tape& tape, std::size_t self) {
                    const std::size_t in = tape.input(self, 0);
                    if (!tape.requires_grad(in)) return;
                    tape.accumulate(in, local(tape.node_value(in), tape.node_value(self),
                                              tape.node_grad(self)));
                  },
                  op);
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise binary

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  Tensor out = broadcast_apply(t.value(a), t.value(b), std::plus<>{}, "add");
  return t.record(std::move(out), {a.id, b.id}, [](Tape& tape, std::size_t self) {
    const Tensor& g = tape.node_grad(self);
    for (std::size_t k = 0; k < 2; ++k) {
      const std::size_t in = tape.input(self, k);
      if (!tape.requires_grad(in)) continue;
      const Tensor& x = tape.node_value(in);
      tape.accumulate(in, reduce_to(g, x.rows(), x.cols()));
    }
  }, "add");
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  Tensor out = broadcast_apply(t.value(a), t.value(b), std::minus<>{}, "sub");
  return t.record(std::move(out), {a.id, b.id}, [](Tape& tape, std::size_t self) {
    const Tensor& g = tape.node_grad(self);
    const std::size_t ia = tape.input(self, 0), ib = tape.input(self, 1);
    if (tape.requires_grad(ia)) {
      const Tensor& x = tape.node_value(ia);
      tape.accumulate(ia, reduce_to(g, x.rows(), x.cols()));
    }
    if (tape.requires_grad(ib)) {
      const Tensor& x = tape.node_value(ib);
      tape.accumulate(ib, map(reduce_to(g, x.rows(), x.cols()), [](double v) { return -v; }));
    }
  }, "sub");
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  Tensor out = broadcast_apply(t.value(a), t.value(b), std::multiplies<>{}, "mul");
  return t.record(std::move(out), {a.id, b.id}, [](Tape& tape, std::size_t self) {
    const Tensor& g = tape.node_grad(self);
    const std::size_t ia = tape.input(self, 0), ib = tape.input(self, 1);
    const Tensor& xa = tape.node_value(ia);
    const Tensor& xb = tape.node_value(ib);
    if (tape.requires_grad(ia)) {
      Tensor ga = broadcast_apply(g, xb, std::multiplies<>{}, "mul");
      tape.accumulate(ia, reduce_to(ga, xa.rows(), xa.cols()));
    }
    if (tape.requires_grad(ib)) {
      Tensor gb = broadcast_apply(g, xa, std::multiplies<>{}, "mul");
      tape.accumulate(ib, reduce_to(gb, xb.rows(), xb.cols()));
    }
  }, "mul");
}

Var div(Var a, Var b) {
  Tape& t = same_tape(a, b);
  Tensor out = broadcast_apply(t.value(a), t.value(b), std::divides<>{}, "div");
  return t.record(std::move(out), {a.id, b.id}, [](Tape& tape, std::size_t self) {
    const Tensor& g = tape.node_grad(self);
    const std::size_t ia = tape.input(self, 0), ib = tape.input(self, 1);
    const Tensor& xa = tape.node_value(ia);
    const Tensor& xb = tape.node_value(ib);
    if (tape.requires_grad(ia)) {
      Tensor ga = broadcast_apply(g, xb, std::divides<>{}, "div");
      tape.accumulate(ia, reduce_to(ga, xa.rows(), xa.cols()));
    }
    if (tape.requires_grad(ib)) {
      // d(a/b)/db = -out / b
      const Tensor& y = tape.node_value(self);
      Tensor gy = broadcast_apply(g, y, std::multiplies<>{}, "div");
      Tensor gb = broadcast_apply(gy, xb, [](double u, double v) { return -u / v; }, "div");
      tape.accumulate(ib, reduce_to(gb, xb.rows(), xb.cols()));
    }
  }, "div");
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, "scale",
               [s](const Tensor&, const Tensor&, const Tensor& g) {
                 return map(g, [s](double v) { return s * v; });
               });
}

Var add_scalar(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, "add_scalar",
               [](const Tensor&, const Tensor&, const Tensor& g) { return g; });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& xa = t.value(a);
  const Tensor& xb = t.value(b);
  if (xa.cols() != xb.rows()) {
    throw ShapeError("matmul " + xa.shape_string() + " x " + xb.shape_string());
  }
  Tensor out = matmul_raw(xa, xb);
  return t.record(std::move(out), {a.id, b.id}, [](Tape& tape, std::size_t self) {
    const Tensor& g = tape.node_grad(self);
    const std::size_t ia = tape.input(self, 0), ib = tape.input(self, 1);
    if (tape.requires_grad(ia)) tape.accumulate(ia, matmul_nt(g, tape.node_value(ib)));
    if (tape.requires_grad(ib)) tape.accumulate(ib, matmul_tn(tape.node_value(ia), g));
  }, "matmul");
}

Var transpose(Var a) {
  Tape& t = *a.tape;
  return t.record(transpose_raw(t.value(a)), {a.id}, [](Tape& tape, std::size_t self) {
    tape.accumulate(tape.input(self, 0), transpose_raw(tape.node_grad(self)));
  }, "transpose");
}

// ---------------------------------------------------------------------------
// Elementwise unary

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, "exp",
               [](const Tensor&, const Tensor& y, const Tensor& g) {
                 Tensor out(g.rows(), g.cols());
                 for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i] * y[i];
                 return out;
               });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, "log",
               [](const Tensor& x, const Tensor&, const Tensor& g) {
                 Tensor out(g.rows(), g.cols());
                 for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i] / x[i];
                 return out;
               });
}

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); }, "tanh",
               [](const Tensor&, const Tensor& y, const Tensor& g) {
                 Tensor out(g.rows(), g.cols());
                 for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i] * (1.0 - y[i] * y[i]);
                 return out;
               });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, "square",
               [](const Tensor& x, const Tensor&, const Tensor& g) {
                 Tensor out(g.rows(), g.cols());
                 for (std::size_t i = 0; i < g.size(); ++i) out[i] = 2.0 * x[i] * g[i];
                 return out;
               });
}

// Subgradient at 0 is 0.
Var abs(Var a) {
  return unary(a, [](double x) { return std::abs(x); }, "abs",
               [](const Tensor& x, const Tensor&, const Tensor& g) {
                 Tensor out(g.rows(), g.cols());
                 for (std::size_t i = 0; i < g.size(); ++i) {
                   out[i] = x[i] > 0.0 ? g[i] : (x[i] < 0.0 ? -g[i] : 0.0);
                 }
                 return out;
               });
}

Var sqrt(Var a) {
  return unary(a, [](double x) { return std::sqrt(x); }, "sqrt",
               [](const Tensor&, const Tensor& y, const Tensor& g) {
                 Tensor out(g.rows(), g.cols());
                 for (std::size_t i = 0; i < g.size(); ++i) out[i] = 0.5 * g[i] / y[i];
                 return out;
               });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  double s = 0.0;
  for (double v : x.data()) s += v;
  return t.record(Tensor::scalar(s), {a.id}, [](Tape& tape, std::size_t self) {
    const std::size_t in = tape.input(self, 0);
    const Tensor& x = tape.node_value(in);
    tape.accumulate(in, Tensor(x.rows(), x.cols(), tape.node_grad(self)[0]));
  }, "sum");
}

Var sum(Var a, Axis axis) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  Tensor out = axis == Axis::Rows ? Tensor(1, x.cols()) : Tensor(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) {
      if (axis == Axis::Rows) out(0, c) += x(r, c);
      else out(r, 0) += x(r, c);
    }
  const bool rows = axis == Axis::Rows;
  return t.record(std::move(out), {a.id}, [rows](Tape& tape, std::size_t self) {
    const std::size_t in = tape.input(self, 0);
    const Tensor& x = tape.node_value(in);
    const Tensor& g = tape.node_grad(self);
    Tensor gi(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < x.cols(); ++c) gi(r, c) = rows ? g(0, c) : g(r, 0);
    tape.accumulate(in, std::move(gi));
  }, "sum_axis");
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var mean(Var a, Axis axis) {
  const double n = static_cast<double>(axis == Axis::Rows ? a.rows() : a.cols());
  return scale(sum(a, axis), 1.0 / n);
}

Var logsumexp(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  if (x.empty()) throw ShapeError("logsumexp of empty tensor");
  const double m = *std::max_element(x.data().begin(), x.data().end());
  double s = 0.0;
  for (double v : x.data()) s += std::exp(v - m);
  return t.record(Tensor::scalar(m + std::log(s)), {a.id}, [](Tape& tape, std::size_t self) {
    const std::size_t in = tape.input(self, 0);
    const Tensor& x = tape.node_value(in);
    const double y = tape.node_value(self)[0];
    const double g = tape.node_grad(self)[0];
    tape.accumulate(in, map(x, [y, g](double v) { return g * std::exp(v - y); }));
  }, "logsumexp");
}

Var logsumexp(Var a, Axis axis) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  const bool over_rows = axis == Axis::Rows;
  const std::size_t outer = over_rows ? x.cols() : x.rows();
  const std::size_t inner = over_rows ? x.rows() : x.cols();
  if (inner == 0) throw ShapeError("logsumexp over empty axis");
  auto at = [&](std::size_t o, std::size_t i) { return over_rows ? x(i, o) : x(o, i); };
  Tensor out = over_rows ? Tensor(1, outer) : Tensor(outer, 1);
  for (std::size_t o = 0; o < outer; ++o) {
    double m = at(o, 0);
    for (std::size_t i = 1; i < inner; ++i) m = std::max(m, at(o, i));
    double s = 0.0;
    for (std::size_t i = 0; i < inner; ++i) s += std::exp(at(o, i) - m);
    out[o] = m + std::log(s);
  }
  return t.record(std::move(out), {a.id}, [over_rows](Tape& tape, std::size_t self) {
    const std::size_t in = tape.input(self, 0);
    const Tensor& x = tape.node_value(in);
    const Tensor& y = tape.node_value(self);
    const Tensor& g = tape.node_grad(self);
    Tensor gi(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < x.cols(); ++c) {
        const std::size_t o = over_rows ? c : r;
        gi(r, c) = g[o] * std::exp(x(r, c) - y[o]);
      }
    tape.accumulate(in, std::move(gi));
  }, "logsumexp_axis");
}

Var l2_norm(Var a) { return sqrt(sum(square(a), Axis::Cols)); }

Var l2_normalize(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  Tensor out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double n2 = 0.0;
    for (double v : x.row_span(r)) n2 += v * v;
    if (!(n2 > 0.0)) throw NumericError("l2_normalize of a zero row");
    const double inv = 1.0 / std::sqrt(n2);
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) * inv;
  }
  // d y / d x = (I - y y^T) / ||x||
  return t.record(std::move(out), {a.id}, [](Tape& tape, std::size_t self) {
    const std::size_t in = tape.input(self, 0);
    const Tensor& x = tape.node_value(in);
    const Tensor& y = tape.node_value(self);
    const Tensor& g = tape.node_grad(self);
    Tensor gi(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      double n2 = 0.0, gy = 0.0;
      for (std::size_t c = 0; c < x.cols(); ++c) {
        n2 += x(r, c) * x(r, c);
        gy += g(r, c) * y(r, c);
      }
      const double inv = 1.0 / std::sqrt(n2);
      for (std::size_t c = 0; c < x.cols(); ++c) gi(r, c) = (g(r, c) - gy * y(r, c)) * inv;
    }
    tape.accumulate(in, std::move(gi));
  }, "l2_normalize");
}

// ---------------------------------------------------------------------------
// Structural

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  Tape& t = *parts.front().tape;
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    if (p.tape != &t) throw InvalidArgument("concat_rows operands on different tapes");
    if (p.cols() != cols) throw ShapeError("concat_rows column mismatch");
    rows += p.rows();
    ids.push_back(p.id);
  }
  Tensor out(rows, cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& x = p.value();
    std::copy(x.data().begin(), x.data().end(), out.data().begin() + offset);
    offset += x.size();
  }
  return t.record(std::move(out), std::move(ids), [](Tape& tape, std::size_t self) {
    const Tensor& g = tape.node_grad(self);
    std::size_t row = 0;
    for (std::size_t k = 0; k < tape.input_count(self); ++k) {
      const std::size_t in = tape.input(self, k);
      const Tensor& x = tape.node_value(in);
      if (tape.requires_grad(in)) {
        Tensor gi(x.rows(), x.cols());
        std::copy_n(g.data().begin() + row * g.cols(), x.size(), gi.data().begin());
        tape.accumulate(in, std::move(gi));
      }
      row += x.rows();
    }
  }, "concat_rows");
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  if (begin > end || end > x.rows()) throw ShapeError("slice_rows out of range");
  Tensor out(end - begin, x.cols());
  std::copy_n(x.data().begin() + begin * x.cols(), out.size(), out.data().begin());
  return t.record(std::move(out), {a.id}, [begin](Tape& tape, std::size_t self) {
    const std::size_t in = tape.input(self, 0);
    const Tensor& x = tape.node_value(in);
    const Tensor& g = tape.node_grad(self);
    Tensor gi(x.rows(), x.cols());
    std::copy(g.data().begin(), g.data().end(), gi.data().begin() + begin * x.cols());
    tape.accumulate(in, std::move(gi));
  }, "slice_rows");
}

Var gather_rows(Var a, std::span<const std::size_t> indices) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  Tensor out(indices.size(), x.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.rows()) throw ShapeError("gather_rows index out of range");
    std::copy_n(x.data().begin() + indices[i] * x.cols(), x.cols(),
                out.data().begin() + i * x.cols());
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return t.record(std::move(out), {a.id}, [idx = std::move(idx)](Tape& tape, std::size_t self) {
    const std::size_t in = tape.input(self, 0);
    const Tensor& x = tape.node_value(in);
    const Tensor& g = tape.node_grad(self);
    Tensor gi(x.rows(), x.cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < x.cols(); ++c) gi(idx[i], c) += g(i, c);
    tape.accumulate(in, std::move(gi));
  }, "gather_rows");
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  if (rows * cols != x.size()) throw ShapeError("reshape changes element count");
  Tensor out(rows, cols, std::vector<double>(x.data().begin(), x.data().end()));
  return t.record(std::move(out), {a.id}, [](Tape& tape, std::size_t self) {
    const std::size_t in = tape.input(self, 0);
    const Tensor& x = tape.node_value(in);
    const Tensor& g = tape.node_grad(self);
    tape.accumulate(in, Tensor(x.rows(), x.cols(),
                               std::vector<double>(g.data().begin(), g.data().end())));
  }, "reshape");
}

// ---------------------------------------------------------------------------
// Finite differences

double finite_diff_check(const LossBuilder& build, std::span<const Tensor> params, double step,
                         std::size_t sample_count, std::uint64_t seed) {
  if (!(step > 0.0)) throw InvalidArgument("finite_diff_check: step must be positive");
  if (sample_count == 0) throw InvalidArgument("finite_diff_check: sample_count must be >= 1");
  if (params.empty()) throw InvalidArgument("finite_diff_check: no parameters");

  auto evaluate = [&](std::span<const Tensor> values) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(values.size());
    for (const Tensor& v : values) leaves.push_back(tape.leaf(v));
    return build(tape, leaves).value().item();
  };

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& v : params) leaves.push_back(tape.leaf(v));
    Var loss = build(tape, leaves);
    analytic = grad(loss, leaves);
  }

  // Flattened coordinate list (param index, element index).
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < params[p].size(); ++i) coords.emplace_back(p, i);
  Rng rng(seed);
  const auto picked = rng.sample_without_replacement(coords.size(), sample_count);

  std::vector<Tensor> work(params.begin(), params.end());
  double worst = 0.0;
  for (std::size_t k : picked) {
    const auto [p, i] = coords[k];
    const double original = work[p][i];
    work[p][i] = original + step;
    const double up = evaluate(work);
    work[p][i] = original - step;
    const double down = evaluate(work);
    work[p][i] = original;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_check: non-finite loss at perturbed point");
    }
    const double numeric = (up - down) / (2.0 * step);
    const double err = std::abs(analytic[p][i] - numeric) / std::max(std::abs(numeric), 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace proda::diff
