#pragma once

// Minimal reverse-mode automatic differentiation over 64-bit dense tensors.
//
// A Tensor is a cheap handle onto a shared node. Operations record their
// parents and a local backward rule when gradient recording is enabled and
// at least one input requires a gradient. There is no implicit broadcasting:
// every op checks its shapes and throws ShapeError naming the op and shapes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace langemb {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

inline thread_local bool grad_mode_enabled = true;

}  // namespace detail

/// Disables graph recording for the lifetime of the guard (inference paths).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled) {
    detail::grad_mode_enabled = false;
  }
  ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }

  static Tensor from_node(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }
  const char* op() const { return node_->op; }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }

  std::span<const double> data() const { return node_->data; }
  // Direct write access for optimizers and checkpoint loading; never used on
  // graph-interior tensors.
  std::span<double> mutable_data() { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  double item() const {
    if (numel() != 1) {
      throw ShapeError("item: tensor of shape " + shape_str(shape()) +
                       " is not a scalar");
    }
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const {
    return node_->data[r * node_->shape.back() + c];
  }

  /// Copy of the values with no graph history.
  Tensor detach() const {
    return Tensor(node_->shape, node_->data, false);
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void check_finite(std::span<const double> values, const char* op,
                         const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite " + what);
    }
  }
}

/// Builds an op result, wiring the backward rule only when it is needed.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  check_finite(data, op, "forward value");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs = false;
  if (grad_mode_enabled) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->parents.reserve(inputs.size());
    for (auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

inline std::string shapes_str(std::initializer_list<const Tensor*> ts) {
  std::string s;
  for (const Tensor* t : ts) {
    if (!s.empty()) s += " and ";
    s += shape_str(t->shape());
  }
  return s;
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " +
                     std::to_string(rank) + ", got shape " +
                     shape_str(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear algebra
// ---------------------------------------------------------------------------

/// (n x k) * (k x m) -> (n x m)
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " +
                     detail::shapes_str({&a, &b}));
  }
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out(n * m, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B + p * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
    }
  }
  return detail::make_result(
      "matmul", {n, m}, std::move(out), {a, b}, [n, k, m](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const double* G = self.grad.data();
        if (pa.requires_grad) {
          pa.ensure_grad();
          // dA = G * B^T
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double* brow = pb.data.data() + p * m;
              const double* grow = G + i * m;
              double s = 0.0;
              for (std::size_t j = 0; j < m; ++j) s += grow[j] * brow[j];
              pa.grad[i * k + p] += s;
            }
          }
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          // dB = A^T * G
          for (std::size_t i = 0; i < n; ++i) {
            const double* grow = G + i * m;
            for (std::size_t p = 0; p < k; ++p) {
              const double av = pa.data[i * k + p];
              double* dst = pb.grad.data() + p * m;
              for (std::size_t j = 0; j < m; ++j) dst[j] += av * grow[j];
            }
          }
        }
      });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + detail::shapes_str({&a, &b}));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result("add", a.shape(), std::move(out), {a, b},
                             [](detail::Node& self) {
                               for (auto& p : self.parents) {
                                 if (!p->requires_grad) continue;
                                 p->ensure_grad();
                                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   p->grad[i] += self.grad[i];
                               }
                             });
}

/// Elementwise product of equally shaped tensors.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + detail::shapes_str({&a, &b}));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(
      "mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa.grad[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pb.grad[i] += self.grad[i] * pa.data[i];
        }
      });
}

/// (n x m) plus a length-m row vector added to every row.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw ShapeError("add_bias: incompatible shapes " +
                     detail::shapes_str({&x, &bias}));
  }
  const std::size_t n = x.dim(0), m = x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bias[j];
  return detail::make_result(
      "add_bias", x.shape(), std::move(out), {x, bias},
      [n, m](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pb = *self.parents[1];
        if (px.requires_grad) {
          px.ensure_grad();
          for (std::size_t i = 0; i < n * m; ++i) px.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
              pb.grad[j] += self.grad[i * m + j];
        }
      });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return detail::make_result("relu", x.shape(), std::move(out), {x},
                             [](detail::Node& self) {
                               auto& p = *self.parents[0];
                               p.ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 if (p.data[i] > 0.0) p.grad[i] += self.grad[i];
                             });
}

/// Sum of all elements -> scalar.
inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result("sum", {}, {s}, {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (double& g : p.grad) g += self.grad[0];
  });
}

/// Multiplies every element by a constant.
inline Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return detail::make_result("scale", x.shape(), std::move(out), {x},
                             [factor](detail::Node& self) {
                               auto& p = *self.parents[0];
                               p.ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 p.grad[i] += factor * self.grad[i];
                             });
}

/// Mean of a rank-2 tensor over axis 0 (-> length cols) or axis 1 (-> rows).
inline Tensor mean_over_axis(const Tensor& x, std::size_t axis) {
  detail::require_rank(x, 2, "mean_over_axis");
  if (axis > 1) throw ShapeError("mean_over_axis: axis must be 0 or 1");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if ((axis == 0 ? r : c) == 0) {
    throw ShapeError("mean_over_axis: empty axis in shape " +
                     shape_str(x.shape()));
  }
  const std::size_t out_n = axis == 0 ? c : r;
  std::vector<double> out(out_n, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += x[i * c + j];
  const double inv = 1.0 / static_cast<double>(axis == 0 ? r : c);
  for (double& v : out) v *= inv;
  return detail::make_result(
      "mean_over_axis", {out_n}, std::move(out), {x},
      [r, c, axis, inv](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            p.grad[i * c + j] += inv * self.grad[axis == 0 ? j : i];
      });
}

/// Same values, new shape with identical element count.
inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {x},
                             [](detail::Node& self) {
                               auto& p = *self.parents[0];
                               p.ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 p.grad[i] += self.grad[i];
                             });
}

/// Concatenates rank-1 tensors (axis 0) or rank-2 tensors along axis 0 or 1.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t rank = parts[0].rank();
  if (rank == 0 || rank > 2 || axis >= rank) {
    throw ShapeError("concat: unsupported axis " + std::to_string(axis) +
                     " for shape " + shape_str(parts[0].shape()));
  }
  for (const auto& t : parts) {
    bool ok = t.rank() == rank;
    if (ok && rank == 2) ok = t.dim(1 - axis) == parts[0].dim(1 - axis);
    if (!ok) {
      throw ShapeError("concat: shape mismatch " + shape_str(parts[0].shape()) +
                       " and " + shape_str(t.shape()));
    }
  }
  Shape shape = parts[0].shape();
  shape[axis] = 0;
  for (const auto& t : parts) shape[axis] += t.dim(axis);

  // Each part occupies a rectangular block; rows x (its width) at col offset.
  const std::size_t rows = rank == 1 ? 1 : shape[0];
  const std::size_t cols = rank == 1 ? shape[0] : shape[1];
  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : parts) {
    offsets.push_back(off);
    if (rank == 2 && axis == 1) {
      const std::size_t w = t.dim(1);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * cols + off + j] = t[i * w + j];
      off += w;
    } else {
      std::copy(t.data().begin(), t.data().end(), out.begin() + off);
      off += t.numel();
    }
  }
  const bool by_cols = rank == 2 && axis == 1;
  return detail::make_result(
      "concat", std::move(shape), std::move(out), parts,
      [offsets, by_cols, rows, cols](detail::Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          auto& p = *self.parents[k];
          if (!p.requires_grad) continue;
          p.ensure_grad();
          if (by_cols) {
            const std::size_t w = p.shape[1];
            for (std::size_t i = 0; i < rows; ++i)
              for (std::size_t j = 0; j < w; ++j)
                p.grad[i * w + j] += self.grad[i * cols + offsets[k] + j];
          } else {
            for (std::size_t i = 0; i < p.grad.size(); ++i)
              p.grad[i] += self.grad[offsets[k] + i];
          }
        }
      });
}

/// Columns [begin, end) of a rank-2 tensor.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 2, "slice_cols");
  if (begin >= end || end > x.dim(1)) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") invalid for shape " +
                     shape_str(x.shape()));
  }
  const std::size_t r = x.dim(0), c = x.dim(1), w = end - begin;
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * c + begin + j];
  return detail::make_result("slice_cols", {r, w}, std::move(out), {x},
                             [r, c, w, begin](detail::Node& self) {
                               auto& p = *self.parents[0];
                               p.ensure_grad();
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < w; ++j)
                                   p.grad[i * c + begin + j] += self.grad[i * w + j];
                             });
}

/// Rows [begin, end) of a rank-2 tensor.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 2, "slice_rows");
  if (begin >= end || end > x.dim(0)) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") invalid for shape " +
                     shape_str(x.shape()));
  }
  const std::size_t c = x.dim(1);
  std::vector<double> out(x.data().begin() + begin * c,
                          x.data().begin() + end * c);
  return detail::make_result("slice_rows", {end - begin, c}, std::move(out),
                             {x}, [begin, c](detail::Node& self) {
                               auto& p = *self.parents[0];
                               p.ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 p.grad[begin * c + i] += self.grad[i];
                             });
}

/// Stacks `count` copies of a length-m vector (or 1 x m row) into count x m.
inline Tensor tile_rows(const Tensor& row, std::size_t count) {
  const bool ok = row.rank() == 1 || (row.rank() == 2 && row.dim(0) == 1);
  if (!ok || count == 0) {
    throw ShapeError("tile_rows: expected a single row, got shape " +
                     shape_str(row.shape()));
  }
  const std::size_t m = row.numel();
  std::vector<double> out(count * m);
  for (std::size_t i = 0; i < count; ++i)
    std::copy(row.data().begin(), row.data().end(), out.begin() + i * m);
  return detail::make_result("tile_rows", {count, m}, std::move(out), {row},
                             [count, m](detail::Node& self) {
                               auto& p = *self.parents[0];
                               p.ensure_grad();
                               for (std::size_t i = 0; i < count; ++i)
                                 for (std::size_t j = 0; j < m; ++j)
                                   p.grad[j] += self.grad[i * m + j];
                             });
}

// ---------------------------------------------------------------------------
// Sequence ops
// ---------------------------------------------------------------------------

/// Valid dilated 1-D convolution over time.
///
/// input: T x C_in, kernel: k x C_in x C_out, bias: C_out.
/// output[t, o] = sum_{j,c} input[t + j*dilation, c] * kernel[j, c, o] + bias[o]
/// for t in [0, T - (k-1)*dilation).
inline Tensor conv1d(const Tensor& input, const Tensor& kernel,
                     const Tensor& bias, std::size_t dilation) {
  if (input.rank() != 2 || kernel.rank() != 3 || bias.rank() != 1 ||
      kernel.dim(1) != input.dim(1) || bias.dim(0) != kernel.dim(2)) {
    throw ShapeError("conv1d: incompatible shapes " +
                     detail::shapes_str({&input, &kernel, &bias}));
  }
  if (dilation == 0) throw ShapeError("conv1d: dilation must be positive");
  const std::size_t T = input.dim(0), cin = input.dim(1);
  const std::size_t k = kernel.dim(0), cout = kernel.dim(2);
  const std::size_t span = (k - 1) * dilation;
  if (T <= span) {
    throw ShapeError("conv1d: sequence of " + std::to_string(T) +
                     " frames is shorter than the receptive field of " +
                     std::to_string(span + 1));
  }
  const std::size_t tout = T - span;
  std::vector<double> out(tout * cout, 0.0);
  const double* X = input.data().data();
  const double* K = kernel.data().data();
  for (std::size_t t = 0; t < tout; ++t) {
    double* orow = out.data() + t * cout;
    for (std::size_t j = 0; j < k; ++j) {
      const double* xrow = X + (t + j * dilation) * cin;
      const double* kj = K + j * cin * cout;
      for (std::size_t c = 0; c < cin; ++c) {
        const double xv = xrow[c];
        const double* kc = kj + c * cout;
        for (std::size_t o = 0; o < cout; ++o) orow[o] += xv * kc[o];
      }
    }
    for (std::size_t o = 0; o < cout; ++o) orow[o] += bias[o];
  }
  return detail::make_result(
      "conv1d", {tout, cout}, std::move(out), {input, kernel, bias},
      [tout, cin, cout, k, dilation](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pb = *self.parents[2];
        const double* G = self.grad.data();
        if (px.requires_grad) px.ensure_grad();
        if (pk.requires_grad) pk.ensure_grad();
        for (std::size_t t = 0; t < tout; ++t) {
          const double* grow = G + t * cout;
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t src = (t + j * dilation) * cin;
            for (std::size_t c = 0; c < cin; ++c) {
              const double* kc = pk.data.data() + (j * cin + c) * cout;
              if (px.requires_grad) {
                double s = 0.0;
                for (std::size_t o = 0; o < cout; ++o) s += grow[o] * kc[o];
                px.grad[src + c] += s;
              }
              if (pk.requires_grad) {
                const double xv = px.data[src + c];
                double* dk = pk.grad.data() + (j * cin + c) * cout;
                for (std::size_t o = 0; o < cout; ++o) dk[o] += xv * grow[o];
              }
            }
          }
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t t = 0; t < tout; ++t)
            for (std::size_t o = 0; o < cout; ++o) pb.grad[o] += G[t * cout + o];
        }
      });
}

inline constexpr double kStatsPoolingEpsilon = 1e-8;

/// T x C -> length-2C vector [mean over t, sqrt(var over t + eps)].
/// The variance is the population variance (divides by T).
inline Tensor statistics_pooling(const Tensor& x) {
  detail::require_rank(x, 2, "statistics_pooling");
  const std::size_t T = x.dim(0), C = x.dim(1);
  if (T == 0) throw ShapeError("statistics_pooling: empty sequence");
  std::vector<double> out(2 * C, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) out[c] += x[t * C + c];
  const double inv = 1.0 / static_cast<double>(T);
  for (std::size_t c = 0; c < C; ++c) out[c] *= inv;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) {
      const double d = x[t * C + c] - out[c];
      out[C + c] += d * d;
    }
  for (std::size_t c = 0; c < C; ++c)
    out[C + c] = std::sqrt(out[C + c] * inv + kStatsPoolingEpsilon);
  return detail::make_result(
      "statistics_pooling", {2 * C}, std::move(out), {x},
      [T, C, inv](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const double* mean = self.data.data();
        const double* stdv = self.data.data() + C;
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t c = 0; c < C; ++c) {
            const double d = p.data[t * C + c] - mean[c];
            p.grad[t * C + c] +=
                inv * self.grad[c] + self.grad[C + c] * d * inv / stdv[c];
          }
      });
}

// ---------------------------------------------------------------------------
// Gradient reversal
// ---------------------------------------------------------------------------

/// Identity in the forward pass; scales the upstream gradient by -lambda.
inline Tensor grad_reverse(const Tensor& x, double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw std::invalid_argument("grad_reverse: lambda must be a finite "
                                "nonnegative value, got " +
                                std::to_string(lambda));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result("grad_reverse", x.shape(), std::move(out), {x},
                             [lambda](detail::Node& self) {
                               auto& p = *self.parents[0];
                               p.ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 p.grad[i] += -lambda * self.grad[i];
                             });
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean over rows of -log softmax(logits)[label]. logits: N x K.
inline Tensor softmax_cross_entropy(const Tensor& logits,
                                    std::span<const int> labels) {
  detail::require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for logits of shape " + shape_str(logits.shape()));
  }
  if (N == 0 || K == 0) throw ShapeError("softmax_cross_entropy: empty logits");
  std::vector<int> y(labels.begin(), labels.end());
  for (int label : y) {
    if (label < 0 || static_cast<std::size_t>(label) >= K) {
      throw std::out_of_range("softmax_cross_entropy: label " +
                              std::to_string(label) + " outside [0, " +
                              std::to_string(K) + ")");
    }
  }
  std::vector<double> probs(N * K);
  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const double* row = logits.data().data() + i * K;
    const double mx = *std::max_element(row, row + K);
    double z = 0.0;
    for (std::size_t j = 0; j < K; ++j) {
      probs[i * K + j] = std::exp(row[j] - mx);
      z += probs[i * K + j];
    }
    for (std::size_t j = 0; j < K; ++j) probs[i * K + j] /= z;
    total += std::log(z) - (row[y[i]] - mx);
  }
  const double invN = 1.0 / static_cast<double>(N);
  return detail::make_result(
      "softmax_cross_entropy", {}, {total * invN}, {logits},
      [probs = std::move(probs), y = std::move(y), N, K,
       invN](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const double g = self.grad[0] * invN;
        for (std::size_t i = 0; i < N; ++i) {
          for (std::size_t j = 0; j < K; ++j)
            p.grad[i * K + j] += g * probs[i * K + j];
          p.grad[i * K + static_cast<std::size_t>(y[i])] -= g;
        }
      });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Accumulates d(root)/d(leaf) into every reachable leaf that requires grad.
/// Interior gradients are reset on every call, so calling twice without
/// zero_grad doubles leaf gradients exactly.
inline void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ShapeError("backward: root must be a scalar, got shape " +
                     (root.defined() ? shape_str(root.shape()) : "<undefined>"));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a deterministic topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order) {
    if (!n->is_leaf) n->grad.assign(n->data.size(), 0.0);
  }
  detail::Node* r = root.node().get();
  r->ensure_grad();
  r->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) {
      detail::check_finite(n->grad, n->op, "gradient");
      n->backward(*n);
    }
  }
  for (detail::Node* n : order) {
    if (n->is_leaf) detail::check_finite(n->grad, "backward", "leaf gradient");
  }
}

}  // namespace langemb
