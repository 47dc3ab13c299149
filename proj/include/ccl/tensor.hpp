#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ccl/errors.hpp"
#include "ccl/rng.hpp"

// Dense double-precision tensors with reverse-mode differentiation.
//
// Every primitive records onto the thread-active Tape (when one exists and
// an input participates in differentiation). backward() replays the tape in
// reverse execution order, which is a valid topological order by
// construction, and visits each recorded node exactly once. Shapes are
// strict: no primitive broadcasts.

namespace ccl {

class Tensor;
class Tape;

namespace detail {

struct Node {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches this node
  bool requires_grad = false;

  // Autograd wiring, set only when the node is recorded on a tape.
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  Tape* tape = nullptr;

  size_t numel() const { return data.size(); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

inline size_t checked_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dimension must be positive");
    n *= static_cast<size_t>(d);
  }
  return n;
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const std::vector<int>& shape, bool requires_grad = false) {
    return filled(shape, 0.0, requires_grad);
  }

  static Tensor filled(const std::vector<int>& shape, double value,
                       bool requires_grad = false) {
    auto node = std::make_shared<detail::Node>();
    node->shape = shape;
    node->data.assign(detail::checked_numel(shape), value);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from_data(const std::vector<int>& shape, std::vector<double> data,
                          bool requires_grad = false) {
    if (detail::checked_numel(shape) != data.size())
      throw ShapeError("from_data: shape does not match data length");
    auto node = std::make_shared<detail::Node>();
    node->shape = shape;
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  static Tensor randn(const std::vector<int>& shape, Rng& rng, double stddev,
                      bool requires_grad = false) {
    Tensor t = zeros(shape, requires_grad);
    for (double& v : t.node_->data) v = rng.normal(0.0, stddev);
    return t;
  }

  static Tensor identity(int n, bool requires_grad = false) {
    Tensor t = zeros({n, n}, requires_grad);
    for (int i = 0; i < n; ++i) t.node_->data[static_cast<size_t>(i) * n + i] = 1.0;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node()->shape; }
  int dim(size_t axis) const { return node()->shape.at(axis); }
  size_t rank() const { return node()->shape.size(); }
  size_t numel() const { return node()->numel(); }

  std::span<const double> data() const { return node()->data; }
  std::span<double> mutable_data() { return node()->data; }

  bool requires_grad() const { return node()->requires_grad; }
  void set_requires_grad(bool flag) { node()->requires_grad = flag; }

  bool has_grad() const { return !node()->grad.empty(); }
  std::span<const double> grad() const {
    if (!has_grad()) throw Error("tensor has no gradient; run backward first");
    return node()->grad;
  }
  std::span<double> mutable_grad() {
    node()->ensure_grad();
    return node()->grad;
  }
  void zero_grad() { node()->grad.clear(); }

  double value() const {
    if (numel() != 1) throw ShapeError("value(): tensor is not scalar");
    return node()->data[0];
  }

  double at(int i) const { return node()->data.at(static_cast<size_t>(i)); }
  double at(int i, int j) const {
    if (rank() != 2) throw ShapeError("at(i,j): tensor is not 2-d");
    return node()->data[static_cast<size_t>(i) * dim(1) + static_cast<size_t>(j)];
  }

  // Identity comparison: true when both handles refer to the same node.
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  // Detached value copy (no grad, no tape history).
  Tensor detached_copy() const {
    return from_data(shape(), std::vector<double>(node()->data), false);
  }

  std::shared_ptr<detail::Node> node_ptr() const { return node_; }

  // Internal: wrap an existing node (used by the primitive machinery).
  static Tensor wrap(std::shared_ptr<detail::Node> node) {
    return Tensor(std::move(node));
  }

 private:
  friend class Tape;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  detail::Node* node() const {
    if (!node_) throw Error("use of undefined tensor");
    return node_.get();
  }

  std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

// Records primitive executions for one logical thread. Constructing a Tape
// makes it the active tape for the current thread (tapes nest like a stack);
// destruction restores the previous one. backward() consumes the tape:
// entries are cleared after the reverse sweep.
class Tape {
 public:
  Tape() : previous_(active_tape_) { active_tape_ = this; }
  ~Tape() { active_tape_ = previous_; }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_tape_; }

  size_t size() const { return entries_.size(); }

  void record(const std::shared_ptr<detail::Node>& node) {
    node->tape = this;
    entries_.push_back(node);
  }

  void run_backward(const Tensor& root) {
    auto root_node = root.node_ptr();
    if (!root_node) throw Error("backward: undefined tensor");
    if (root_node->numel() != 1)
      throw ShapeError("backward: root must be scalar");
    if (root_node->tape != this)
      throw DetachedTensorError("backward: root is not recorded on this tape");
    root_node->ensure_grad();
    root_node->grad[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      detail::Node& n = **it;
      if (!n.grad.empty() && n.backward_fn) n.backward_fn(n);
    }
    // Consume: drop recorded history so node memory can be reclaimed.
    for (auto& entry : entries_) {
      entry->parents.clear();
      entry->backward_fn = nullptr;
      entry->tape = nullptr;
    }
    entries_.clear();
  }

 private:
  friend class NoGradScope;
  inline static thread_local Tape* active_tape_ = nullptr;
  Tape* previous_;
  std::vector<std::shared_ptr<detail::Node>> entries_;
};

// Suspends recording for the current thread (teacher passes, evaluation).
class NoGradScope {
 public:
  NoGradScope() : saved_(Tape::active_tape_) { Tape::active_tape_ = nullptr; }
  ~NoGradScope() { Tape::active_tape_ = saved_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* saved_;
};

// Runs the reverse sweep from a scalar root, storing gradients on every
// requires_grad ancestor. Fan-out contributions accumulate additively.
inline void backward(const Tensor& root) {
  auto node = root.node_ptr();
  if (!node) throw Error("backward: undefined tensor");
  if (node->tape == nullptr)
    throw DetachedTensorError("backward: tensor is not on any tape");
  node->tape->run_backward(root);
}

// ---------------------------------------------------------------------------
// Primitive machinery
// ---------------------------------------------------------------------------

namespace detail {

inline bool tracked(const Tensor& t) {
  return t.requires_grad() || t.node_ptr()->tape != nullptr;
}

// Creates the result node for a primitive and records it when a tape is
// active and any input participates in differentiation.
template <typename Backward>
Tensor make_result(std::vector<int> shape, std::vector<double> data,
                   std::initializer_list<Tensor> inputs, Backward&& backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  Tape* tape = Tape::active();
  if (tape != nullptr) {
    bool any_tracked = false;
    for (const Tensor& t : inputs) any_tracked = any_tracked || tracked(t);
    if (any_tracked) {
      node->requires_grad = true;
      for (const Tensor& t : inputs) node->parents.push_back(t.node_ptr());
      node->backward_fn = std::forward<Backward>(backward_fn);
      tape->record(node);
    }
  }
  return Tensor::wrap(std::move(node));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": operand shapes differ");
}

inline void accumulate(Node& parent, const std::vector<double>& grad_piece) {
  parent.ensure_grad();
  for (size_t i = 0; i < grad_piece.size(); ++i) parent.grad[i] += grad_piece[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto da = a.data(), db = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return detail::make_result(a.shape(), std::move(out), {a, b},
                             [](detail::Node& n) {
                               for (auto& p : n.parents) {
                                 p->ensure_grad();
                                 for (size_t i = 0; i < n.grad.size(); ++i)
                                   p->grad[i] += n.grad[i];
                               }
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto da = a.data(), db = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  return detail::make_result(
      a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
        detail::Node& pa = *n.parents[0];
        detail::Node& pb = *n.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) {
          pa.grad[i] += n.grad[i] * pb.data[i];
          pb.grad[i] += n.grad[i] * pa.data[i];
        }
      });
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  const auto da = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] * factor;
  return detail::make_result(a.shape(), std::move(out), {a},
                             [factor](detail::Node& n) {
                               detail::Node& p = *n.parents[0];
                               p.ensure_grad();
                               for (size_t i = 0; i < n.grad.size(); ++i)
                                 p.grad[i] += n.grad[i] * factor;
                             });
}

// C[m x n] = A[m x k] * B[k x n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: operands must be 2-d");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) throw ShapeError("matmul: inner dimensions differ");
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  const auto da = a.data(), db = b.data();
  for (int i = 0; i < m; ++i) {
    double* out_row = out.data() + static_cast<size_t>(i) * n;
    const double* a_row = da.data() + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double a_ip = a_row[p];
      const double* b_row = db.data() + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) out_row[j] += a_ip * b_row[j];
    }
  }
  return detail::make_result(
      {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& node) {
        detail::Node& pa = *node.parents[0];
        detail::Node& pb = *node.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        // dA[i,p] += sum_j dC[i,j] * B[p,j]  (row-dot-row, contiguous)
        for (int i = 0; i < m; ++i) {
          const double* dc_row = node.grad.data() + static_cast<size_t>(i) * n;
          double* da_row = pa.grad.data() + static_cast<size_t>(i) * k;
          for (int p = 0; p < k; ++p) {
            const double* b_row = pb.data.data() + static_cast<size_t>(p) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += dc_row[j] * b_row[j];
            da_row[p] += acc;
          }
        }
        // dB[p,j] += sum_i A[i,p] * dC[i,j]  (axpy over contiguous rows)
        for (int i = 0; i < m; ++i) {
          const double* a_row = pa.data.data() + static_cast<size_t>(i) * k;
          const double* dc_row = node.grad.data() + static_cast<size_t>(i) * n;
          for (int p = 0; p < k; ++p) {
            const double a_ip = a_row[p];
            if (a_ip == 0.0) continue;
            double* db_row = pb.grad.data() + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) db_row[j] += a_ip * dc_row[j];
          }
        }
      });
}

// C[m x n] = A[m x k] * B[n x k]^T. Fused form of matmul(A, transpose(B));
// both operands are walked along contiguous rows.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul_nt: operands must be 2-d");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) throw ShapeError("matmul_nt: inner dimensions differ");
  std::vector<double> out(static_cast<size_t>(m) * n);
  const auto da = a.data(), db = b.data();
  for (int i = 0; i < m; ++i) {
    const double* a_row = da.data() + static_cast<size_t>(i) * k;
    double* out_row = out.data() + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* b_row = db.data() + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a_row[p] * b_row[p];
      out_row[j] = acc;
    }
  }
  return detail::make_result(
      {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& node) {
        detail::Node& pa = *node.parents[0];
        detail::Node& pb = *node.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        // dA[i,p] += sum_j dC[i,j] * B[j,p]; dB[j,p] += sum_i dC[i,j] * A[i,p]
        for (int i = 0; i < m; ++i) {
          const double* dc_row = node.grad.data() + static_cast<size_t>(i) * n;
          double* da_row = pa.grad.data() + static_cast<size_t>(i) * k;
          const double* a_row = pa.data.data() + static_cast<size_t>(i) * k;
          for (int j = 0; j < n; ++j) {
            const double dc = dc_row[j];
            if (dc == 0.0) continue;
            const double* b_row = pb.data.data() + static_cast<size_t>(j) * k;
            double* db_row = pb.grad.data() + static_cast<size_t>(j) * k;
            for (int p = 0; p < k; ++p) {
              da_row[p] += dc * b_row[p];
              db_row[p] += dc * a_row[p];
            }
          }
        }
      });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: operand must be 2-d");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.numel());
  const auto da = a.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(j) * m + i] = da[static_cast<size_t>(i) * n + j];
  return detail::make_result({n, m}, std::move(out), {a},
                             [m, n](detail::Node& node) {
                               detail::Node& p = *node.parents[0];
                               p.ensure_grad();
                               for (int i = 0; i < m; ++i)
                                 for (int j = 0; j < n; ++j)
                                   p.grad[static_cast<size_t>(i) * n + j] +=
                                       node.grad[static_cast<size_t>(j) * m + i];
                             });
}

// Concatenate 2-d tensors along axis 0 or 1.
inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw InvalidArgumentError("concat: no operands");
  if (axis != 0 && axis != 1) throw InvalidArgumentError("concat: axis must be 0 or 1");
  for (const Tensor& t : parts)
    if (t.rank() != 2) throw ShapeError("concat: operands must be 2-d");
  const int fixed_axis = 1 - axis;
  const int fixed = parts[0].dim(static_cast<size_t>(fixed_axis));
  int total = 0;
  for (const Tensor& t : parts) {
    if (t.dim(static_cast<size_t>(fixed_axis)) != fixed)
      throw ShapeError("concat: non-concatenated dimension differs");
    total += t.dim(static_cast<size_t>(axis));
  }
  std::vector<int> out_shape = axis == 0 ? std::vector<int>{total, fixed}
                                         : std::vector<int>{fixed, total};
  std::vector<double> out(detail::checked_numel(out_shape));
  std::vector<int> offsets;
  int offset = 0;
  for (const Tensor& t : parts) {
    offsets.push_back(offset);
    const auto src = t.data();
    if (axis == 0) {
      std::copy(src.begin(), src.end(),
                out.begin() + static_cast<size_t>(offset) * fixed);
    } else {
      const int cols = t.dim(1);
      for (int i = 0; i < fixed; ++i)
        std::copy(src.begin() + static_cast<size_t>(i) * cols,
                  src.begin() + static_cast<size_t>(i + 1) * cols,
                  out.begin() + static_cast<size_t>(i) * total + offset);
    }
    offset += t.dim(static_cast<size_t>(axis));
  }

  auto node = std::make_shared<detail::Node>();
  node->shape = out_shape;
  node->data = std::move(out);
  Tape* tape = Tape::active();
  bool any_tracked = false;
  for (const Tensor& t : parts) any_tracked = any_tracked || detail::tracked(t);
  if (tape != nullptr && any_tracked) {
    node->requires_grad = true;
    for (const Tensor& t : parts) node->parents.push_back(t.node_ptr());
    std::vector<int> sizes;
    for (const Tensor& t : parts) sizes.push_back(t.dim(static_cast<size_t>(axis)));
    node->backward_fn = [axis, fixed, total, offsets, sizes](detail::Node& n) {
      for (size_t idx = 0; idx < n.parents.size(); ++idx) {
        detail::Node& p = *n.parents[idx];
        p.ensure_grad();
        const int off = offsets[idx];
        const int size = sizes[idx];
        if (axis == 0) {
          for (size_t i = 0; i < static_cast<size_t>(size) * fixed; ++i)
            p.grad[i] += n.grad[static_cast<size_t>(off) * fixed + i];
        } else {
          for (int i = 0; i < fixed; ++i)
            for (int j = 0; j < size; ++j)
              p.grad[static_cast<size_t>(i) * size + j] +=
                  n.grad[static_cast<size_t>(i) * total + off + j];
        }
      }
    };
    tape->record(node);
  }
  return Tensor::wrap(std::move(node));
}

// Slice `len` indices starting at `start` along axis 0 or 1 of a 2-d tensor.
inline Tensor slice(const Tensor& a, int axis, int start, int len) {
  if (a.rank() != 2) throw ShapeError("slice: operand must be 2-d");
  if (axis != 0 && axis != 1) throw InvalidArgumentError("slice: axis must be 0 or 1");
  const int extent = a.dim(static_cast<size_t>(axis));
  if (start < 0 || len <= 0 || start + len > extent)
    throw ShapeError("slice: range out of bounds");
  const int rows = a.dim(0), cols = a.dim(1);
  std::vector<int> out_shape = axis == 0 ? std::vector<int>{len, cols}
                                         : std::vector<int>{rows, len};
  std::vector<double> out(detail::checked_numel(out_shape));
  const auto da = a.data();
  if (axis == 0) {
    std::copy(da.begin() + static_cast<size_t>(start) * cols,
              da.begin() + static_cast<size_t>(start + len) * cols, out.begin());
  } else {
    for (int i = 0; i < rows; ++i)
      std::copy(da.begin() + static_cast<size_t>(i) * cols + start,
                da.begin() + static_cast<size_t>(i) * cols + start + len,
                out.begin() + static_cast<size_t>(i) * len);
  }
  return detail::make_result(
      out_shape, std::move(out), {a},
      [axis, start, len, rows, cols](detail::Node& n) {
        detail::Node& p = *n.parents[0];
        p.ensure_grad();
        if (axis == 0) {
          for (size_t i = 0; i < static_cast<size_t>(len) * cols; ++i)
            p.grad[static_cast<size_t>(start) * cols + i] += n.grad[i];
        } else {
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < len; ++j)
              p.grad[static_cast<size_t>(i) * cols + start + j] +=
                  n.grad[static_cast<size_t>(i) * len + j];
        }
      });
}

// Row gather: out[i] = table[ids[i]]. Gradient scatters into table rows.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be 2-d");
  if (ids.empty()) throw InvalidArgumentError("gather_rows: empty id list");
  const int rows = table.dim(0), cols = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= rows)
      throw InvalidTokenError("gather_rows: id " + std::to_string(id) +
                              " outside table of " + std::to_string(rows));
  std::vector<double> out(ids.size() * static_cast<size_t>(cols));
  const auto dt = table.data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(dt.begin() + static_cast<size_t>(ids[i]) * cols,
              dt.begin() + static_cast<size_t>(ids[i] + 1) * cols,
              out.begin() + i * static_cast<size_t>(cols));
  return detail::make_result(
      {static_cast<int>(ids.size()), cols}, std::move(out), {table},
      [ids, cols](detail::Node& n) {
        detail::Node& p = *n.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i)
          for (int j = 0; j < cols; ++j)
            p.grad[static_cast<size_t>(ids[i]) * cols + j] +=
                n.grad[i * static_cast<size_t>(cols) + j];
      });
}

// Numerically stabilized softmax over the last dimension.
inline Tensor softmax(const Tensor& a) {
  if (a.rank() < 1 || a.shape().back() < 1)
    throw ShapeError("softmax: empty last dimension");
  const int v = a.shape().back();
  const size_t rows = a.numel() / static_cast<size_t>(v);
  std::vector<double> out(a.numel());
  const auto da = a.data();
  for (size_t r = 0; r < rows; ++r) {
    const double* in_row = da.data() + r * static_cast<size_t>(v);
    double* out_row = out.data() + r * static_cast<size_t>(v);
    double max_logit = in_row[0];
    for (int j = 1; j < v; ++j) max_logit = std::max(max_logit, in_row[j]);
    double denom = 0.0;
    for (int j = 0; j < v; ++j) {
      out_row[j] = std::exp(in_row[j] - max_logit);
      denom += out_row[j];
    }
    for (int j = 0; j < v; ++j) out_row[j] /= denom;
  }
  return detail::make_result(
      a.shape(), std::move(out), {a}, [v, rows](detail::Node& n) {
        detail::Node& p = *n.parents[0];
        p.ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
          const double* s = n.data.data() + r * static_cast<size_t>(v);
          const double* dy = n.grad.data() + r * static_cast<size_t>(v);
          double* dx = p.grad.data() + r * static_cast<size_t>(v);
          double dot = 0.0;
          for (int j = 0; j < v; ++j) dot += dy[j] * s[j];
          for (int j = 0; j < v; ++j) dx[j] += s[j] * (dy[j] - dot);
        }
      });
}

// Elementwise natural log; input must be strictly positive.
inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto da = a.data();
  for (size_t i = 0; i < out.size(); ++i) {
    if (da[i] <= 0.0) throw InvalidArgumentError("log: non-positive input");
    out[i] = std::log(da[i]);
  }
  return detail::make_result(a.shape(), std::move(out), {a},
                             [](detail::Node& n) {
                               detail::Node& p = *n.parents[0];
                               p.ensure_grad();
                               for (size_t i = 0; i < n.grad.size(); ++i)
                                 p.grad[i] += n.grad[i] / p.data[i];
                             });
}

// Mean over one axis of a 2-d tensor. keepdim keeps a size-1 axis so the
// result can be concatenated ([1 x d] from axis 0, [n x 1] from axis 1).
inline Tensor mean_axis(const Tensor& a, int axis, bool keepdim = true) {
  if (a.rank() == 1) {
    if (axis != 0) throw InvalidArgumentError("mean_axis: axis out of range");
    const int n = a.dim(0);
    double acc = 0.0;
    for (double x : a.data()) acc += x;
    return detail::make_result({1}, {acc / n}, {a}, [n](detail::Node& node) {
      detail::Node& p = *node.parents[0];
      p.ensure_grad();
      const double g = node.grad[0] / n;
      for (double& gp : p.grad) gp += g;
    });
  }
  if (a.rank() != 2) throw ShapeError("mean_axis: operand must be 1-d or 2-d");
  if (axis != 0 && axis != 1) throw InvalidArgumentError("mean_axis: axis must be 0 or 1");
  const int rows = a.dim(0), cols = a.dim(1);
  const auto da = a.data();
  if (axis == 0) {
    std::vector<double> out(static_cast<size_t>(cols), 0.0);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) out[static_cast<size_t>(j)] += da[static_cast<size_t>(i) * cols + j];
    for (double& x : out) x /= rows;
    std::vector<int> shape = keepdim ? std::vector<int>{1, cols} : std::vector<int>{cols};
    return detail::make_result(shape, std::move(out), {a},
                               [rows, cols](detail::Node& n) {
                                 detail::Node& p = *n.parents[0];
                                 p.ensure_grad();
                                 for (int i = 0; i < rows; ++i)
                                   for (int j = 0; j < cols; ++j)
                                     p.grad[static_cast<size_t>(i) * cols + j] +=
                                         n.grad[static_cast<size_t>(j)] / rows;
                               });
  }
  std::vector<double> out(static_cast<size_t>(rows), 0.0);
  for (int i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (int j = 0; j < cols; ++j) acc += da[static_cast<size_t>(i) * cols + j];
    out[static_cast<size_t>(i)] = acc / cols;
  }
  std::vector<int> shape = keepdim ? std::vector<int>{rows, 1} : std::vector<int>{rows};
  return detail::make_result(shape, std::move(out), {a},
                             [rows, cols](detail::Node& n) {
                               detail::Node& p = *n.parents[0];
                               p.ensure_grad();
                               for (int i = 0; i < rows; ++i)
                                 for (int j = 0; j < cols; ++j)
                                   p.grad[static_cast<size_t>(i) * cols + j] +=
                                       n.grad[static_cast<size_t>(i)] / cols;
                             });
}

// Mean over all elements.
inline Tensor mean(const Tensor& a) {
  const size_t n = a.numel();
  double acc = 0.0;
  for (double x : a.data()) acc += x;
  return detail::make_result({1}, {acc / static_cast<double>(n)}, {a},
                             [n](detail::Node& node) {
                               detail::Node& p = *node.parents[0];
                               p.ensure_grad();
                               const double g = node.grad[0] / static_cast<double>(n);
                               for (double& gp : p.grad) gp += g;
                             });
}

// Sum over all elements.
inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double x : a.data()) acc += x;
  return detail::make_result({1}, {acc}, {a}, [](detail::Node& node) {
    detail::Node& p = *node.parents[0];
    p.ensure_grad();
    const double g = node.grad[0];
    for (double& gp : p.grad) gp += g;
  });
}

// Row-wise layer normalization with learned gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  if (x.rank() != 2) throw ShapeError("layer_norm: input must be 2-d");
  const int rows = x.dim(0), cols = x.dim(1);
  if (gain.numel() != static_cast<size_t>(cols) ||
      bias.numel() != static_cast<size_t>(cols))
    throw ShapeError("layer_norm: gain/bias length must match row width");
  std::vector<double> out(x.numel());
  std::vector<double> inv_std(static_cast<size_t>(rows));
  std::vector<double> normalized(x.numel());
  const auto dx = x.data();
  const auto dg = gain.data(), db = bias.data();
  for (int i = 0; i < rows; ++i) {
    const double* row = dx.data() + static_cast<size_t>(i) * cols;
    double mean_v = 0.0;
    for (int j = 0; j < cols; ++j) mean_v += row[j];
    mean_v /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double d = row[j] - mean_v;
      var += d * d;
    }
    var /= cols;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(i)] = is;
    for (int j = 0; j < cols; ++j) {
      const double nj = (row[j] - mean_v) * is;
      normalized[static_cast<size_t>(i) * cols + j] = nj;
      out[static_cast<size_t>(i) * cols + j] = nj * dg[j] + db[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, cols, inv_std = std::move(inv_std),
       normalized = std::move(normalized)](detail::Node& n) {
        detail::Node& px = *n.parents[0];
        detail::Node& pg = *n.parents[1];
        detail::Node& pb = *n.parents[2];
        px.ensure_grad();
        pg.ensure_grad();
        pb.ensure_grad();
        for (int i = 0; i < rows; ++i) {
          const double* dy = n.grad.data() + static_cast<size_t>(i) * cols;
          const double* nh = normalized.data() + static_cast<size_t>(i) * cols;
          const double is = inv_std[static_cast<size_t>(i)];
          double sum_dh = 0.0, sum_dh_nh = 0.0;
          for (int j = 0; j < cols; ++j) {
            const double dh = dy[j] * pg.data[static_cast<size_t>(j)];
            sum_dh += dh;
            sum_dh_nh += dh * nh[j];
            pg.grad[static_cast<size_t>(j)] += dy[j] * nh[j];
            pb.grad[static_cast<size_t>(j)] += dy[j];
          }
          for (int j = 0; j < cols; ++j) {
            const double dh = dy[j] * pg.data[static_cast<size_t>(j)];
            px.grad[static_cast<size_t>(i) * cols + j] +=
                is * (dh - sum_dh / cols - nh[j] * sum_dh_nh / cols);
          }
        }
      });
}

// Keeps x where allowed, writes `fill` where not. Gradient flows only
// through kept positions. `allowed` has one flag per element of x.
inline Tensor masked_fill(const Tensor& x, const std::vector<uint8_t>& allowed,
                          double fill) {
  if (allowed.size() != x.numel())
    throw ShapeError("masked_fill: mask size does not match tensor");
  std::vector<double> out(x.numel());
  const auto dx = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = allowed[i] ? dx[i] : fill;
  return detail::make_result(x.shape(), std::move(out), {x},
                             [allowed](detail::Node& n) {
                               detail::Node& p = *n.parents[0];
                               p.ensure_grad();
                               for (size_t i = 0; i < n.grad.size(); ++i)
                                 if (allowed[i]) p.grad[i] += n.grad[i];
                             });
}

// ---------------------------------------------------------------------------
// KL divergence
// ---------------------------------------------------------------------------

namespace detail {
constexpr double kKlTeacherEps = 1e-12;  // teacher mass below this contributes 0
constexpr double kKlStudentFloor = 1e-12;  // floor inside the student log
}  // namespace detail

// KL(q || p) = sum_v q_v ln(q_v / p_v), with 0 ln 0 = 0. Differentiable with
// respect to p (and q). Raises DivergenceUndefinedError when q_v > 0 meets
// p_v == 0 exactly; otherwise p is floored at 1e-12 inside the log.
inline Tensor kl_divergence(const Tensor& q, const Tensor& p) {
  if (q.numel() != p.numel())
    throw ShapeError("kl_divergence: distributions differ in length");
  const auto dq = q.data(), dp = p.data();
  double acc = 0.0;
  for (size_t i = 0; i < dq.size(); ++i) {
    if (dq[i] > 0.0 && dp[i] == 0.0)
      throw DivergenceUndefinedError(
          "kl_divergence: q > 0 where p == 0 at index " + std::to_string(i));
    if (dq[i] <= detail::kKlTeacherEps) continue;
    acc += dq[i] * (std::log(dq[i]) -
                    std::log(std::max(dp[i], detail::kKlStudentFloor)));
  }
  return detail::make_result({1}, {acc}, {q, p}, [](detail::Node& n) {
    detail::Node& pq = *n.parents[0];
    detail::Node& pp = *n.parents[1];
    pq.ensure_grad();
    pp.ensure_grad();
    const double g = n.grad[0];
    for (size_t i = 0; i < pq.data.size(); ++i) {
      if (pq.data[i] <= detail::kKlTeacherEps) continue;
      const double p_floored = std::max(pp.data[i], detail::kKlStudentFloor);
      pq.grad[i] += g * (std::log(pq.data[i]) - std::log(p_floored) + 1.0);
      pp.grad[i] += g * (-pq.data[i] / p_floored);
    }
  });
}

// ---------------------------------------------------------------------------
// Small helpers used across modules
// ---------------------------------------------------------------------------

inline bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel())
    throw ShapeError("max_abs_diff: tensors differ in size");
  double worst = 0.0;
  const auto da = a.data(), db = b.data();
  for (size_t i = 0; i < da.size(); ++i)
    worst = std::max(worst, std::abs(da[i] - db[i]));
  return worst;
}

}  // namespace ccl
