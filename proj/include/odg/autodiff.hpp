#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "odg/params.hpp"
#include "odg/tensor.hpp"

namespace odg {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; the tensor lives on the tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& val() const;
  const std::vector<int>& shape() const { return val().shape; }
};

/// Reverse-mode tape. Ops append nodes eagerly (values are computed forward
/// as the graph is built); backward() walks the nodes in reverse creation
/// order, which is a topological order by construction.
///
/// A tape is single-threaded. Parameters pulled in via param() are cached so
/// that reuse of the same weight anywhere in the graph accumulates into one
/// gradient buffer, which backward() then adds into the ParamStore.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_live = false;  // grad buffer has been touched this backward pass
    std::function<void(Tape&, int)> backward;
    ParamStore* store = nullptr;
    std::string param_name;
  };

  Tape() = default;
  /// grad_enabled=false builds a forward-only graph: parameters come in as
  /// constants and no backward closures are recorded downstream.
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}

  Var input(Tensor value, bool requires_grad = false) {
    check_finite(value, "input");
    return push(std::move(value), requires_grad && grad_enabled_, nullptr);
  }

  Var constant(Tensor value) { return input(std::move(value), false); }

  Var scalar(double v) { return constant(Tensor({1}, {v})); }

  /// Pull a named parameter onto the tape (cached per name per store).
  Var param(ParamStore& ps, const std::string& name) {
    auto key = std::make_pair(&ps, name);
    auto it = param_cache_.find(key);
    if (it != param_cache_.end()) return it->second;
    Var v = push(ps.value(name), grad_enabled_, nullptr);
    if (grad_enabled_) {
      nodes_[static_cast<std::size_t>(v.id)].store = &ps;
      nodes_[static_cast<std::size_t>(v.id)].param_name = name;
    }
    param_cache_.emplace(key, v);
    return v;
  }

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  Tensor& grad_buf(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_live) {
      n.grad = Tensor(n.value.shape);
      n.grad_live = true;
    }
    return n.grad;
  }

  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  const Tensor& grad(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.grad_live) n.grad = Tensor(n.value.shape);
    return n.grad;
  }

  /// Accumulate dLoss/d(node) for every grad-requiring node, then push the
  /// gradients of bound parameters into their ParamStore. Calling twice
  /// without ParamStore::zero_grad() accumulates additively there.
  void backward(Var loss) {
    if (loss.tape != this) throw InvalidInput("backward: loss from another tape");
    const Node& ln = nodes_[static_cast<std::size_t>(loss.id)];
    if (!ln.value.is_scalar())
      throw ShapeError("backward: loss must be scalar, got " + Tensor::shape_str(ln.value.shape));
    if (nodes_.empty()) throw InvalidInput("backward: empty tape");
    for (Node& n : nodes_) n.grad_live = false;
    grad_buf(loss.id).data[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.requires_grad || !n.grad_live) continue;
      if (n.backward) n.backward(*this, id);
    }
    for (Node& n : nodes_) {
      if (n.store && n.grad_live) n.store->add_grad(n.param_name, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  Var push(Tensor value, bool requires_grad, std::function<void(Tape&, int)> backward) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, false, std::move(backward),
                          nullptr, std::string{}});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  static void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite value produced");
  }

 private:
  bool grad_enabled_ = true;
  std::vector<Node> nodes_;
  std::map<std::pair<ParamStore*, std::string>, Var> param_cache_;
};

inline const Tensor& Var::val() const { return tape->value(id); }

namespace detail {

inline void require_same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape) throw InvalidInput(std::string(op) + ": operands on different tapes");
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + Tensor::shape_str(a.shape) + " vs " +
                     Tensor::shape_str(b.shape));
}

inline Var unary(Var a, const char* op, Tensor out,
                 std::function<void(const Tensor& g, const Tensor& x, const Tensor& y, Tensor& dx)> rule) {
  Tape::check_finite(out, op);
  bool rg = a.tape->requires_grad(a.id);
  std::function<void(Tape&, int)> bw;
  if (rg) {
    int aid = a.id;
    bw = [aid, rule](Tape& t, int self) {
      rule(t.grad_buf(self), t.value(aid), t.value(self), t.grad_buf(aid));
    };
  }
  return a.tape->push(std::move(out), rg, std::move(bw));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and scalar ops

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b, "add");
  detail::require_same_shape(a.val(), b.val(), "add");
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.val().data[i];
  Tape::check_finite(out, "add");
  bool rg = a.tape->requires_grad(a.id) || a.tape->requires_grad(b.id);
  std::function<void(Tape&, int)> bw;
  if (rg) {
    int aid = a.id, bid = b.id;
    bw = [aid, bid](Tape& t, int self) {
      const Tensor& g = t.grad_buf(self);
      if (t.requires_grad(aid)) {
        Tensor& da = t.grad_buf(aid);
        for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
      }
      if (t.requires_grad(bid)) {
        Tensor& db = t.grad_buf(bid);
        for (std::size_t i = 0; i < g.data.size(); ++i) db.data[i] += g.data[i];
      }
    };
  }
  return a.tape->push(std::move(out), rg, std::move(bw));
}

inline Var sub(Var a, Var b) {
  detail::require_same_tape(a, b, "sub");
  detail::require_same_shape(a.val(), b.val(), "sub");
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.val().data[i];
  Tape::check_finite(out, "sub");
  bool rg = a.tape->requires_grad(a.id) || a.tape->requires_grad(b.id);
  std::function<void(Tape&, int)> bw;
  if (rg) {
    int aid = a.id, bid = b.id;
    bw = [aid, bid](Tape& t, int self) {
      const Tensor& g = t.grad_buf(self);
      if (t.requires_grad(aid)) {
        Tensor& da = t.grad_buf(aid);
        for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
      }
      if (t.requires_grad(bid)) {
        Tensor& db = t.grad_buf(bid);
        for (std::size_t i = 0; i < g.data.size(); ++i) db.data[i] -= g.data[i];
      }
    };
  }
  return a.tape->push(std::move(out), rg, std::move(bw));
}

inline Var mul(Var a, Var b) {
  detail::require_same_tape(a, b, "mul");
  detail::require_same_shape(a.val(), b.val(), "mul");
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.val().data[i];
  Tape::check_finite(out, "mul");
  bool rg = a.tape->requires_grad(a.id) || a.tape->requires_grad(b.id);
  std::function<void(Tape&, int)> bw;
  if (rg) {
    int aid = a.id, bid = b.id;
    bw = [aid, bid](Tape& t, int self) {
      const Tensor& g = t.grad_buf(self);
      const Tensor& av = t.value(aid);
      const Tensor& bv = t.value(bid);
      if (t.requires_grad(aid)) {
        Tensor& da = t.grad_buf(aid);
        for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * bv.data[i];
      }
      if (t.requires_grad(bid)) {
        Tensor& db = t.grad_buf(bid);
        for (std::size_t i = 0; i < g.data.size(); ++i) db.data[i] += g.data[i] * av.data[i];
      }
    };
  }
  return a.tape->push(std::move(out), rg, std::move(bw));
}

inline Var scalar_mul(Var a, double c) {
  Tensor out = a.val();
  for (double& v : out.data) v *= c;
  return detail::unary(a, "scalar_mul", std::move(out),
                       [c](const Tensor& g, const Tensor&, const Tensor&, Tensor& dx) {
                         for (std::size_t i = 0; i < g.data.size(); ++i) dx.data[i] += c * g.data[i];
                       });
}

inline Var scalar_add(Var a, double c) {
  Tensor out = a.val();
  for (double& v : out.data) v += c;
  return detail::unary(a, "scalar_add", std::move(out),
                       [](const Tensor& g, const Tensor&, const Tensor&, Tensor& dx) {
                         for (std::size_t i = 0; i < g.data.size(); ++i) dx.data[i] += g.data[i];
                       });
}

inline Var relu(Var a) {
  Tensor out = a.val();
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return detail::unary(a, "relu", std::move(out),
                       [](const Tensor& g, const Tensor& x, const Tensor&, Tensor& dx) {
                         for (std::size_t i = 0; i < g.data.size(); ++i)
                           if (x.data[i] > 0.0) dx.data[i] += g.data[i];
                       });
}

inline Var exp_op(Var a) {
  Tensor out = a.val();
  for (double& v : out.data) v = std::exp(v);
  return detail::unary(a, "exp", std::move(out),
                       [](const Tensor& g, const Tensor&, const Tensor& y, Tensor& dx) {
                         for (std::size_t i = 0; i < g.data.size(); ++i)
                           dx.data[i] += g.data[i] * y.data[i];
                       });
}

inline Var log_op(Var a) {
  Tensor out = a.val();
  for (double& v : out.data) v = std::log(v);
  return detail::unary(a, "log", std::move(out),
                       [](const Tensor& g, const Tensor& x, const Tensor&, Tensor& dx) {
                         for (std::size_t i = 0; i < g.data.size(); ++i)
                           dx.data[i] += g.data[i] / x.data[i];
                       });
}

/// log(max(x, floor)); derivative is 0 on the floored region.
inline Var log_floored(Var a, double floor) {
  Tensor out = a.val();
  for (double& v : out.data) v = std::log(std::max(v, floor));
  return detail::unary(a, "log_floored", std::move(out),
                       [floor](const Tensor& g, const Tensor& x, const Tensor&, Tensor& dx) {
                         for (std::size_t i = 0; i < g.data.size(); ++i)
                           if (x.data[i] > floor) dx.data[i] += g.data[i] / x.data[i];
                       });
}

inline Var sigmoid(Var a) {
  Tensor out = a.val();
  for (double& v : out.data) {
    if (v >= 0.0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      v = e / (1.0 + e);
    }
  }
  return detail::unary(a, "sigmoid", std::move(out),
                       [](const Tensor& g, const Tensor&, const Tensor& y, Tensor& dx) {
                         for (std::size_t i = 0; i < g.data.size(); ++i)
                           dx.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
                       });
}

// ---------------------------------------------------------------------------
// reductions

inline Var sum_all(Var a) {
  double s = 0.0;
  for (double v : a.val().data) s += v;
  return detail::unary(a, "sum_all", Tensor({1}, {s}),
                       [](const Tensor& g, const Tensor&, const Tensor&, Tensor& dx) {
                         for (double& v : dx.data) v += g.data[0];
                       });
}

inline Var mean_all(Var a) {
  const double n = static_cast<double>(a.val().numel());
  double s = 0.0;
  for (double v : a.val().data) s += v;
  return detail::unary(a, "mean_all", Tensor({1}, {s / n}),
                       [n](const Tensor& g, const Tensor&, const Tensor&, Tensor& dx) {
                         for (double& v : dx.data) v += g.data[0] / n;
                       });
}

// ---------------------------------------------------------------------------
// matrix ops (2-D, row-major)

inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b, "matmul");
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[0])
    throw ShapeError("matmul: incompatible shapes " + Tensor::shape_str(A.shape) + " vs " +
                     Tensor::shape_str(B.shape));
  const int m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    const double* arow = &A.data[static_cast<std::size_t>(i) * k];
    double* orow = &out.data[static_cast<std::size_t>(i) * n];
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = &B.data[static_cast<std::size_t>(p) * n];
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  Tape::check_finite(out, "matmul");
  bool rg = a.tape->requires_grad(a.id) || a.tape->requires_grad(b.id);
  std::function<void(Tape&, int)> bw;
  if (rg) {
    int aid = a.id, bid = b.id;
    bw = [aid, bid, m, k, n](Tape& t, int self) {
      const Tensor& g = t.grad_buf(self);
      const Tensor& A = t.value(aid);
      const Tensor& B = t.value(bid);
      if (t.requires_grad(aid)) {
        Tensor& da = t.grad_buf(aid);  // dA = g * B^T
        for (int i = 0; i < m; ++i) {
          const double* grow = &g.data[static_cast<std::size_t>(i) * n];
          double* darow = &da.data[static_cast<std::size_t>(i) * k];
          for (int p = 0; p < k; ++p) {
            const double* brow = &B.data[static_cast<std::size_t>(p) * n];
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
            darow[p] += s;
          }
        }
      }
      if (t.requires_grad(bid)) {
        Tensor& db = t.grad_buf(bid);  // dB = A^T * g
        for (int p = 0; p < k; ++p) {
          double* dbrow = &db.data[static_cast<std::size_t>(p) * n];
          for (int i = 0; i < m; ++i) {
            const double av = A.data[static_cast<std::size_t>(i) * k + p];
            const double* grow = &g.data[static_cast<std::size_t>(i) * n];
            for (int j = 0; j < n; ++j) dbrow[j] += av * grow[j];
          }
        }
      }
    };
  }
  return a.tape->push(std::move(out), rg, std::move(bw));
}

inline Var transpose(Var a) {
  const Tensor& A = a.val();
  if (A.shape.size() != 2) throw ShapeError("transpose: expected 2-D, got " + Tensor::shape_str(A.shape));
  const int m = A.shape[0], n = A.shape[1];
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = A.at(i, j);
  return detail::unary(a, "transpose", std::move(out),
                       [m, n](const Tensor& g, const Tensor&, const Tensor&, Tensor& dx) {
                         for (int i = 0; i < m; ++i)
                           for (int j = 0; j < n; ++j) dx.at(i, j) += g.at(j, i);
                       });
}

inline Var reshape(Var a, std::vector<int> shape) {
  if (Tensor::numel_of(shape) != a.val().numel())
    throw ShapeError("reshape: element count mismatch " + Tensor::shape_str(a.val().shape) +
                     " -> " + Tensor::shape_str(shape));
  Tensor out(shape, a.val().data);
  return detail::unary(a, "reshape", std::move(out),
                       [](const Tensor& g, const Tensor&, const Tensor&, Tensor& dx) {
                         for (std::size_t i = 0; i < g.data.size(); ++i) dx.data[i] += g.data[i];
                       });
}

/// rows of A plus a length-C vector (bias over the last axis).
inline Var add_rowvec(Var a, Var v) {
  detail::require_same_tape(a, v, "add_rowvec");
  const Tensor& A = a.val();
  const Tensor& V = v.val();
  if (A.shape.size() != 2 || V.shape.size() != 1 || V.shape[0] != A.shape[1])
    throw ShapeError("add_rowvec: shapes " + Tensor::shape_str(A.shape) + " vs " +
                     Tensor::shape_str(V.shape));
  const int m = A.shape[0], n = A.shape[1];
  Tensor out = A;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) += V.data[static_cast<std::size_t>(j)];
  Tape::check_finite(out, "add_rowvec");
  bool rg = a.tape->requires_grad(a.id) || a.tape->requires_grad(v.id);
  std::function<void(Tape&, int)> bw;
  if (rg) {
    int aid = a.id, vid = v.id;
    bw = [aid, vid, m, n](Tape& t, int self) {
      const Tensor& g = t.grad_buf(self);
      if (t.requires_grad(aid)) {
        Tensor& da = t.grad_buf(aid);
        for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
      }
      if (t.requires_grad(vid)) {
        Tensor& dv = t.grad_buf(vid);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) dv.data[static_cast<std::size_t>(j)] += g.at(i, j);
      }
    };
  }
  return a.tape->push(std::move(out), rg, std::move(bw));
}

inline Var softmax_rows(Var a) {
  const Tensor& A = a.val();
  if (A.shape.size() != 2) throw ShapeError("softmax: expected 2-D, got " + Tensor::shape_str(A.shape));
  const int m = A.shape[0], n = A.shape[1];
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    double mx = A.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, A.at(i, j));
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      const double e = std::exp(A.at(i, j) - mx);
      out.at(i, j) = e;
      s += e;
    }
    for (int j = 0; j < n; ++j) out.at(i, j) /= s;
  }
  return detail::unary(a, "softmax", std::move(out),
                       [m, n](const Tensor& g, const Tensor&, const Tensor& y, Tensor& dx) {
                         for (int i = 0; i < m; ++i) {
                           double dot = 0.0;
                           for (int j = 0; j < n; ++j) dot += g.at(i, j) * y.at(i, j);
                           for (int j = 0; j < n; ++j)
                             dx.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
                         }
                       });
}

/// Row-wise x / ||x||; the tiny epsilon under the square root only matters
/// for exactly-zero rows.
inline Var l2_normalize_rows(Var a) {
  const Tensor& A = a.val();
  if (A.shape.size() != 2)
    throw ShapeError("l2_normalize: expected 2-D, got " + Tensor::shape_str(A.shape));
  const int m = A.shape[0], n = A.shape[1];
  Tensor out({m, n});
  std::vector<double> norms(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    double q = 1e-24;
    for (int j = 0; j < n; ++j) q += A.at(i, j) * A.at(i, j);
    const double s = std::sqrt(q);
    norms[static_cast<std::size_t>(i)] = s;
    for (int j = 0; j < n; ++j) out.at(i, j) = A.at(i, j) / s;
  }
  return detail::unary(a, "l2_normalize", std::move(out),
                       [m, n, norms](const Tensor& g, const Tensor& x, const Tensor&, Tensor& dx) {
                         for (int i = 0; i < m; ++i) {
                           const double s = norms[static_cast<std::size_t>(i)];
                           double dot = 0.0;
                           for (int j = 0; j < n; ++j) dot += g.at(i, j) * x.at(i, j);
                           for (int j = 0; j < n; ++j)
                             dx.at(i, j) += g.at(i, j) / s - x.at(i, j) * dot / (s * s * s);
                         }
                       });
}

// ---------------------------------------------------------------------------
// row selection / assembly

inline Var concat_rows(const std::vector<Var>& items) {
  if (items.empty()) throw InvalidInput("concat_rows: no inputs");
  Tape* tape = items[0].tape;
  const int cols = items[0].val().shape.size() == 2 ? items[0].val().shape[1] : -1;
  int rows = 0;
  bool rg = false;
  for (const Var& v : items) {
    if (v.tape != tape) throw InvalidInput("concat_rows: mixed tapes");
    const Tensor& t = v.val();
    if (t.shape.size() != 2 || t.shape[1] != cols)
      throw ShapeError("concat_rows: shape mismatch at " + Tensor::shape_str(t.shape));
    rows += t.shape[0];
    rg = rg || tape->requires_grad(v.id);
  }
  Tensor out({rows, cols});
  int r = 0;
  for (const Var& v : items) {
    const Tensor& t = v.val();
    std::copy(t.data.begin(), t.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(r) * cols);
    r += t.shape[0];
  }
  std::function<void(Tape&, int)> bw;
  if (rg) {
    std::vector<std::pair<int, int>> spans;  // (id, row count)
    for (const Var& v : items) spans.emplace_back(v.id, v.val().shape[0]);
    bw = [spans, cols](Tape& t, int self) {
      const Tensor& g = t.grad_buf(self);
      int r = 0;
      for (auto [id, nr] : spans) {
        if (t.requires_grad(id)) {
          Tensor& d = t.grad_buf(id);
          for (int i = 0; i < nr * cols; ++i)
            d.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(r * cols + i)];
        }
        r += nr;
      }
    };
  }
  return tape->push(std::move(out), rg, std::move(bw));
}

inline Var slice_rows(Var a, int r0, int r1) {
  const Tensor& A = a.val();
  if (A.shape.size() != 2 || r0 < 0 || r1 > A.shape[0] || r0 >= r1)
    throw ShapeError("slice_rows: bad range");
  const int cols = A.shape[1];
  Tensor out({r1 - r0, cols});
  std::copy(A.data.begin() + static_cast<std::ptrdiff_t>(r0) * cols,
            A.data.begin() + static_cast<std::ptrdiff_t>(r1) * cols, out.data.begin());
  return detail::unary(a, "slice_rows", std::move(out),
                       [r0, cols](const Tensor& g, const Tensor&, const Tensor&, Tensor& dx) {
                         for (std::size_t i = 0; i < g.data.size(); ++i)
                           dx.data[static_cast<std::size_t>(r0) * cols + i] += g.data[i];
                       });
}

inline Var gather_rows(Var a, const std::vector<int>& idx) {
  const Tensor& A = a.val();
  if (A.shape.size() != 2) throw ShapeError("gather_rows: expected 2-D");
  if (idx.empty()) throw InvalidInput("gather_rows: empty index list");
  const int cols = A.shape[1];
  Tensor out({static_cast<int>(idx.size()), cols});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= A.shape[0]) throw InvalidInput("gather_rows: index out of range");
    std::copy(A.data.begin() + static_cast<std::ptrdiff_t>(idx[i]) * cols,
              A.data.begin() + static_cast<std::ptrdiff_t>(idx[i] + 1) * cols,
              out.data.begin() + static_cast<std::ptrdiff_t>(i) * cols);
  }
  return detail::unary(a, "gather_rows", std::move(out),
                       [idx, cols](const Tensor& g, const Tensor&, const Tensor&, Tensor& dx) {
                         for (std::size_t i = 0; i < idx.size(); ++i)
                           for (int j = 0; j < cols; ++j)
                             dx.at(idx[i], j) += g.data[i * static_cast<std::size_t>(cols) + j];
                       });
}

inline Var slice_cols(Var a, int c0, int c1) {
  const Tensor& A = a.val();
  if (A.shape.size() != 2 || c0 < 0 || c1 > A.shape[1] || c0 >= c1)
    throw ShapeError("slice_cols: bad range");
  const int m = A.shape[0];
  Tensor out({m, c1 - c0});
  for (int i = 0; i < m; ++i)
    for (int j = c0; j < c1; ++j) out.at(i, j - c0) = A.at(i, j);
  return detail::unary(a, "slice_cols", std::move(out),
                       [c0](const Tensor& g, const Tensor&, const Tensor&, Tensor& dx) {
                         for (int i = 0; i < g.shape[0]; ++i)
                           for (int j = 0; j < g.shape[1]; ++j) dx.at(i, c0 + j) += g.at(i, j);
                       });
}

inline Var concat_cols(Var a, Var b) {
  detail::require_same_tape(a, b, "concat_cols");
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[0] != B.shape[0])
    throw ShapeError("concat_cols: shapes " + Tensor::shape_str(A.shape) + " vs " +
                     Tensor::shape_str(B.shape));
  const int m = A.shape[0], na = A.shape[1], nb = B.shape[1];
  Tensor out({m, na + nb});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < na; ++j) out.at(i, j) = A.at(i, j);
    for (int j = 0; j < nb; ++j) out.at(i, na + j) = B.at(i, j);
  }
  bool rg = a.tape->requires_grad(a.id) || a.tape->requires_grad(b.id);
  std::function<void(Tape&, int)> bw;
  if (rg) {
    int aid = a.id, bid = b.id;
    bw = [aid, bid, m, na, nb](Tape& t, int self) {
      const Tensor& g = t.grad_buf(self);
      if (t.requires_grad(aid)) {
        Tensor& da = t.grad_buf(aid);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < na; ++j) da.at(i, j) += g.at(i, j);
      }
      if (t.requires_grad(bid)) {
        Tensor& db = t.grad_buf(bid);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < nb; ++j) db.at(i, j) += g.at(i, na + j);
      }
    };
  }
  return a.tape->push(std::move(out), rg, std::move(bw));
}

// ---------------------------------------------------------------------------
// image ops, feature maps are (C,H,W)

inline Var conv2d(Var x, Var w, Var b, int stride, int pad) {
  detail::require_same_tape(x, w, "conv2d");
  detail::require_same_tape(x, b, "conv2d");
  const Tensor& X = x.val();
  const Tensor& W = w.val();
  const Tensor& B = b.val();
  if (X.shape.size() != 3 || W.shape.size() != 4 || B.shape.size() != 1)
    throw ShapeError("conv2d: expected x(C,H,W), w(O,C,kh,kw), b(O)");
  const int ci = X.shape[0], h = X.shape[1], wd = X.shape[2];
  const int co = W.shape[0], kh = W.shape[2], kw = W.shape[3];
  if (W.shape[1] != ci || B.shape[0] != co)
    throw ShapeError("conv2d: channel mismatch " + Tensor::shape_str(X.shape) + " vs " +
                     Tensor::shape_str(W.shape));
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  Tensor out({co, ho, wo});
  for (int oc = 0; oc < co; ++oc) {
    const double bias = B.data[static_cast<std::size_t>(oc)];
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) out.at(oc, oy, ox) = bias;
    for (int ic = 0; ic < ci; ++ic) {
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const double wv = W.data[((static_cast<std::size_t>(oc) * ci + ic) * kh + ky) * kw + kx];
          if (wv == 0.0) continue;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            double* orow = &out.data[(static_cast<std::size_t>(oc) * ho + oy) * wo];
            const double* irow = &X.data[(static_cast<std::size_t>(ic) * h + iy) * wd];
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= wd) continue;
              orow[ox] += wv * irow[ix];
            }
          }
        }
      }
    }
  }
  Tape::check_finite(out, "conv2d");
  bool rg = x.tape->requires_grad(x.id) || x.tape->requires_grad(w.id) || x.tape->requires_grad(b.id);
  std::function<void(Tape&, int)> bw;
  if (rg) {
    int xid = x.id, wid = w.id, bid = b.id;
    bw = [xid, wid, bid, ci, h, wd, co, kh, kw, ho, wo, stride, pad](Tape& t, int self) {
      const Tensor& g = t.grad_buf(self);
      const Tensor& X = t.value(xid);
      const Tensor& W = t.value(wid);
      const bool need_x = t.requires_grad(xid);
      const bool need_w = t.requires_grad(wid);
      const bool need_b = t.requires_grad(bid);
      Tensor* dx = need_x ? &t.grad_buf(xid) : nullptr;
      Tensor* dw = need_w ? &t.grad_buf(wid) : nullptr;
      Tensor* db = need_b ? &t.grad_buf(bid) : nullptr;
      for (int oc = 0; oc < co; ++oc) {
        if (need_b) {
          double s = 0.0;
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) s += g.at(oc, oy, ox);
          db->data[static_cast<std::size_t>(oc)] += s;
        }
        for (int ic = 0; ic < ci; ++ic) {
          for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
              const std::size_t widx = ((static_cast<std::size_t>(oc) * ci + ic) * kh + ky) * kw + kx;
              const double wv = W.data[widx];
              double wsum = 0.0;
              for (int oy = 0; oy < ho; ++oy) {
                const int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= h) continue;
                const double* grow = &g.data[(static_cast<std::size_t>(oc) * ho + oy) * wo];
                const double* irow = &X.data[(static_cast<std::size_t>(ic) * h + iy) * wd];
                double* dxrow = need_x ? &dx->data[(static_cast<std::size_t>(ic) * h + iy) * wd] : nullptr;
                for (int ox = 0; ox < wo; ++ox) {
                  const int ix = ox * stride + kx - pad;
                  if (ix < 0 || ix >= wd) continue;
                  const double gv = grow[ox];
                  wsum += gv * irow[ix];
                  if (need_x) dxrow[ix] += gv * wv;
                }
              }
              if (need_w) dw->data[widx] += wsum;
            }
          }
        }
      }
    };
  }
  return x.tape->push(std::move(out), rg, std::move(bw));
}

/// Non-overlapping k x k average pooling (k == stride). k = 1 is identity.
inline Var avg_pool(Var x, int k) {
  const Tensor& X = x.val();
  if (X.shape.size() != 3) throw ShapeError("avg_pool: expected (C,H,W)");
  if (k < 1 || X.shape[1] % k != 0 || X.shape[2] % k != 0)
    throw ShapeError("avg_pool: kernel " + std::to_string(k) + " does not divide " +
                     Tensor::shape_str(X.shape));
  if (k == 1) return x;
  const int c = X.shape[0], ho = X.shape[1] / k, wo = X.shape[2] / k;
  const double inv = 1.0 / (k * k);
  Tensor out({c, ho, wo});
  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double s = 0.0;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx) s += X.at(ch, oy * k + dy, ox * k + dx);
        out.at(ch, oy, ox) = s * inv;
      }
  return detail::unary(x, "avg_pool", std::move(out),
                       [c, ho, wo, k, inv](const Tensor& g, const Tensor&, const Tensor&, Tensor& dx) {
                         for (int ch = 0; ch < c; ++ch)
                           for (int oy = 0; oy < ho; ++oy)
                             for (int ox = 0; ox < wo; ++ox) {
                               const double gv = g.at(ch, oy, ox) * inv;
                               for (int dy = 0; dy < k; ++dy)
                                 for (int dxx = 0; dxx < k; ++dxx)
                                   dx.at(ch, oy * k + dy, ox * k + dxx) += gv;
                             }
                       });
}

inline Var channel_mean(Var x) {
  const Tensor& X = x.val();
  if (X.shape.size() != 3) throw ShapeError("channel_mean: expected (C,H,W)");
  const int c = X.shape[0];
  const int hw = X.shape[1] * X.shape[2];
  Tensor out({c});
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    const double* p = &X.data[static_cast<std::size_t>(ch) * hw];
    for (int i = 0; i < hw; ++i) s += p[i];
    out.data[static_cast<std::size_t>(ch)] = s / hw;
  }
  return detail::unary(x, "channel_mean", std::move(out),
                       [c, hw](const Tensor& g, const Tensor&, const Tensor&, Tensor& dx) {
                         for (int ch = 0; ch < c; ++ch) {
                           const double gv = g.data[static_cast<std::size_t>(ch)] / hw;
                           double* p = &dx.data[static_cast<std::size_t>(ch) * hw];
                           for (int i = 0; i < hw; ++i) p[i] += gv;
                         }
                       });
}

/// Per-channel sqrt(spatial variance + eps).
inline Var channel_std(Var x, double eps) {
  const Tensor& X = x.val();
  if (X.shape.size() != 3) throw ShapeError("channel_std: expected (C,H,W)");
  const int c = X.shape[0];
  const int hw = X.shape[1] * X.shape[2];
  Tensor out({c});
  std::vector<double> means(static_cast<std::size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    const double* p = &X.data[static_cast<std::size_t>(ch) * hw];
    double s = 0.0;
    for (int i = 0; i < hw; ++i) s += p[i];
    const double mu = s / hw;
    means[static_cast<std::size_t>(ch)] = mu;
    double q = 0.0;
    for (int i = 0; i < hw; ++i) q += (p[i] - mu) * (p[i] - mu);
    out.data[static_cast<std::size_t>(ch)] = std::sqrt(q / hw + eps);
  }
  return detail::unary(x, "channel_std", std::move(out),
                       [c, hw, means](const Tensor& g, const Tensor& x, const Tensor& y, Tensor& dx) {
                         for (int ch = 0; ch < c; ++ch) {
                           const double gv = g.data[static_cast<std::size_t>(ch)];
                           const double sigma = y.data[static_cast<std::size_t>(ch)];
                           const double mu = means[static_cast<std::size_t>(ch)];
                           const double* p = &x.data[static_cast<std::size_t>(ch) * hw];
                           double* d = &dx.data[static_cast<std::size_t>(ch) * hw];
                           const double coef = gv / (hw * sigma);
                           for (int i = 0; i < hw; ++i) d[i] += coef * (p[i] - mu);
                         }
                       });
}

namespace detail {

enum class ChanOp { Add, Sub, Mul, Div };

inline Var channel_broadcast(Var x, Var v, ChanOp op, const char* name) {
  require_same_tape(x, v, name);
  const Tensor& X = x.val();
  const Tensor& V = v.val();
  if (X.shape.size() != 3 || V.shape.size() != 1 || V.shape[0] != X.shape[0])
    throw ShapeError(std::string(name) + ": shapes " + Tensor::shape_str(X.shape) + " vs " +
                     Tensor::shape_str(V.shape));
  const int c = X.shape[0];
  const int hw = X.shape[1] * X.shape[2];
  Tensor out = X;
  for (int ch = 0; ch < c; ++ch) {
    const double s = V.data[static_cast<std::size_t>(ch)];
    double* p = &out.data[static_cast<std::size_t>(ch) * hw];
    switch (op) {
      case ChanOp::Add: for (int i = 0; i < hw; ++i) p[i] += s; break;
      case ChanOp::Sub: for (int i = 0; i < hw; ++i) p[i] -= s; break;
      case ChanOp::Mul: for (int i = 0; i < hw; ++i) p[i] *= s; break;
      case ChanOp::Div: for (int i = 0; i < hw; ++i) p[i] /= s; break;
    }
  }
  Tape::check_finite(out, name);
  bool rg = x.tape->requires_grad(x.id) || x.tape->requires_grad(v.id);
  std::function<void(Tape&, int)> bw;
  if (rg) {
    int xid = x.id, vid = v.id;
    bw = [xid, vid, c, hw, op](Tape& t, int self) {
      const Tensor& g = t.grad_buf(self);
      const Tensor& X = t.value(xid);
      const Tensor& V = t.value(vid);
      const bool need_x = t.requires_grad(xid);
      const bool need_v = t.requires_grad(vid);
      Tensor* dx = need_x ? &t.grad_buf(xid) : nullptr;
      Tensor* dv = need_v ? &t.grad_buf(vid) : nullptr;
      for (int ch = 0; ch < c; ++ch) {
        const double s = V.data[static_cast<std::size_t>(ch)];
        const double* gp = &g.data[static_cast<std::size_t>(ch) * hw];
        const double* xp = &X.data[static_cast<std::size_t>(ch) * hw];
        double* dxp = need_x ? &dx->data[static_cast<std::size_t>(ch) * hw] : nullptr;
        double vsum = 0.0;
        for (int i = 0; i < hw; ++i) {
          switch (op) {
            case ChanOp::Add:
              if (need_x) dxp[i] += gp[i];
              vsum += gp[i];
              break;
            case ChanOp::Sub:
              if (need_x) dxp[i] += gp[i];
              vsum -= gp[i];
              break;
            case ChanOp::Mul:
              if (need_x) dxp[i] += gp[i] * s;
              vsum += gp[i] * xp[i];
              break;
            case ChanOp::Div:
              if (need_x) dxp[i] += gp[i] / s;
              vsum -= gp[i] * xp[i] / (s * s);
              break;
          }
        }
        if (need_v) dv->data[static_cast<std::size_t>(ch)] += vsum;
      }
    };
  }
  return x.tape->push(std::move(out), rg, std::move(bw));
}

}  // namespace detail

inline Var channel_add(Var x, Var v) { return detail::channel_broadcast(x, v, detail::ChanOp::Add, "channel_add"); }
inline Var channel_sub(Var x, Var v) { return detail::channel_broadcast(x, v, detail::ChanOp::Sub, "channel_sub"); }
inline Var channel_mul(Var x, Var v) { return detail::channel_broadcast(x, v, detail::ChanOp::Mul, "channel_mul"); }
inline Var channel_div(Var x, Var v) { return detail::channel_broadcast(x, v, detail::ChanOp::Div, "channel_div"); }

// ---------------------------------------------------------------------------
// sampling

/// Bilinear sampling of a (C,H,W) map at continuous points given in map pixel
/// units (the value of cell (iy,ix) sits at coordinate (ix+0.5, iy+0.5)).
/// Border cells replicate outward. Gradients flow to the map only; the points
/// are plain data.
inline Var bilinear_sample(Var f, const std::vector<std::pair<double, double>>& points) {
  const Tensor& F = f.val();
  if (F.shape.size() != 3) throw ShapeError("bilinear_sample: expected (C,H,W)");
  const int c = F.shape[0], h = F.shape[1], w = F.shape[2];
  const int np = static_cast<int>(points.size());
  if (np == 0) throw InvalidInput("bilinear_sample: no points");

  struct Corner {
    int ix0, iy0;
    double wx, wy;  // weight of the (ix0+1 / iy0+1) side
  };
  std::vector<Corner> corners(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    double fx = points[i].first - 0.5;
    double fy = points[i].second - 0.5;
    fx = std::min(std::max(fx, 0.0), static_cast<double>(w - 1));
    fy = std::min(std::max(fy, 0.0), static_cast<double>(h - 1));
    int ix0 = std::min(static_cast<int>(std::floor(fx)), w - 2 >= 0 ? w - 2 : 0);
    int iy0 = std::min(static_cast<int>(std::floor(fy)), h - 2 >= 0 ? h - 2 : 0);
    corners[i] = Corner{ix0, iy0, fx - ix0, fy - iy0};
  }

  Tensor out({c, np});
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < np; ++i) {
      const Corner& cr = corners[static_cast<std::size_t>(i)];
      const int x1 = std::min(cr.ix0 + 1, w - 1);
      const int y1 = std::min(cr.iy0 + 1, h - 1);
      const double v00 = F.at(ch, cr.iy0, cr.ix0), v01 = F.at(ch, cr.iy0, x1);
      const double v10 = F.at(ch, y1, cr.ix0), v11 = F.at(ch, y1, x1);
      out.data[static_cast<std::size_t>(ch) * np + i] =
          (1 - cr.wy) * ((1 - cr.wx) * v00 + cr.wx * v01) + cr.wy * ((1 - cr.wx) * v10 + cr.wx * v11);
    }
  }
  return detail::unary(f, "bilinear_sample", std::move(out),
                       [c, h, w, np, corners](const Tensor& g, const Tensor&, const Tensor&, Tensor& dx) {
                         for (int ch = 0; ch < c; ++ch)
                           for (int i = 0; i < np; ++i) {
                             const Corner& cr = corners[static_cast<std::size_t>(i)];
                             const int x1 = std::min(cr.ix0 + 1, w - 1);
                             const int y1 = std::min(cr.iy0 + 1, h - 1);
                             const double gv = g.data[static_cast<std::size_t>(ch) * np + i];
                             dx.at(ch, cr.iy0, cr.ix0) += gv * (1 - cr.wy) * (1 - cr.wx);
                             dx.at(ch, cr.iy0, x1) += gv * (1 - cr.wy) * cr.wx;
                             dx.at(ch, y1, cr.ix0) += gv * cr.wy * (1 - cr.wx);
                             dx.at(ch, y1, x1) += gv * cr.wy * cr.wx;
                           }
                       });
}

// ---------------------------------------------------------------------------
// contrastive-loss building blocks

/// out[j] = S[j, pair[j]]
inline Var gather_pairs(Var s, const std::vector<int>& pair) {
  const Tensor& S = s.val();
  if (S.shape.size() != 2 || S.shape[0] != S.shape[1])
    throw ShapeError("gather_pairs: expected square matrix");
  if (static_cast<int>(pair.size()) != S.shape[0])
    throw ShapeError("gather_pairs: pair list length mismatch");
  const int n = S.shape[0];
  Tensor out({n});
  for (int j = 0; j < n; ++j) {
    if (pair[static_cast<std::size_t>(j)] < 0 || pair[static_cast<std::size_t>(j)] >= n ||
        pair[static_cast<std::size_t>(j)] == j)
      throw InvalidInput("gather_pairs: bad pair index");
    out.data[static_cast<std::size_t>(j)] = S.at(j, pair[static_cast<std::size_t>(j)]);
  }
  return detail::unary(s, "gather_pairs", std::move(out),
                       [pair, n](const Tensor& g, const Tensor&, const Tensor&, Tensor& dx) {
                         for (int j = 0; j < n; ++j)
                           dx.at(j, pair[static_cast<std::size_t>(j)]) += g.data[static_cast<std::size_t>(j)];
                       });
}

/// out[j] = log sum_{k != j} exp(S[j,k]), max-subtracted per row.
inline Var logsumexp_offdiag_rows(Var s) {
  const Tensor& S = s.val();
  if (S.shape.size() != 2 || S.shape[0] != S.shape[1] || S.shape[0] < 2)
    throw ShapeError("logsumexp_offdiag: expected square matrix with n >= 2");
  const int n = S.shape[0];
  Tensor out({n});
  for (int j = 0; j < n; ++j) {
    double mx = -1e300;
    for (int k = 0; k < n; ++k)
      if (k != j) mx = std::max(mx, S.at(j, k));
    double sum = 0.0;
    for (int k = 0; k < n; ++k)
      if (k != j) sum += std::exp(S.at(j, k) - mx);
    out.data[static_cast<std::size_t>(j)] = mx + std::log(sum);
  }
  return detail::unary(s, "logsumexp_offdiag", std::move(out),
                       [n](const Tensor& g, const Tensor& x, const Tensor& y, Tensor& dx) {
                         for (int j = 0; j < n; ++j) {
                           const double gv = g.data[static_cast<std::size_t>(j)];
                           const double lse = y.data[static_cast<std::size_t>(j)];
                           if (gv == 0.0) continue;
                           for (int k = 0; k < n; ++k)
                             if (k != j) dx.at(j, k) += gv * std::exp(x.at(j, k) - lse);
                         }
                       });
}

// ---------------------------------------------------------------------------
// supervised loss primitives

/// Weighted mean of per-row cross entropy under softmax. Rows with weight 0
/// are free; if all weights are 0 the loss is exactly 0.
inline Var cross_entropy_rows(Var logits, const std::vector<int>& labels,
                              const std::vector<double>& weights) {
  const Tensor& L = logits.val();
  if (L.shape.size() != 2) throw ShapeError("cross_entropy: expected 2-D logits");
  const int m = L.shape[0], n = L.shape[1];
  if (static_cast<int>(labels.size()) != m || static_cast<int>(weights.size()) != m)
    throw ShapeError("cross_entropy: label/weight count mismatch");
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  const double norm = wsum > 0.0 ? wsum : 1.0;
  double loss = 0.0;
  Tensor probs({m, n});
  for (int i = 0; i < m; ++i) {
    if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= n)
      throw InvalidInput("cross_entropy: label out of range");
    double mx = L.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, L.at(i, j));
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      const double e = std::exp(L.at(i, j) - mx);
      probs.at(i, j) = e;
      s += e;
    }
    for (int j = 0; j < n; ++j) probs.at(i, j) /= s;
    loss -= weights[static_cast<std::size_t>(i)] *
            std::log(std::max(probs.at(i, labels[static_cast<std::size_t>(i)]), 1e-300));
  }
  loss /= norm;
  Tensor out({1}, {loss});
  Tape::check_finite(out, "cross_entropy");
  bool rg = logits.tape->requires_grad(logits.id);
  std::function<void(Tape&, int)> bw;
  if (rg) {
    int lid = logits.id;
    bw = [lid, labels, weights, norm, probs, m, n](Tape& t, int self) {
      const double gv = t.grad_buf(self).data[0];
      Tensor& dl = t.grad_buf(lid);
      for (int i = 0; i < m; ++i) {
        const double w = weights[static_cast<std::size_t>(i)] / norm;
        if (w == 0.0) continue;
        for (int j = 0; j < n; ++j) {
          const double onehot = j == labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
          dl.at(i, j) += gv * w * (probs.at(i, j) - onehot);
        }
      }
    };
  }
  return logits.tape->push(std::move(out), rg, std::move(bw));
}

/// Row-weighted smooth-L1 (Huber) against a plain target, summed over the
/// coordinates of each row, averaged over total weight.
inline Var smooth_l1(Var pred, const Tensor& target, const std::vector<double>& weights,
                     double beta = 1.0) {
  const Tensor& P = pred.val();
  if (P.shape.size() != 2) throw ShapeError("smooth_l1: expected 2-D predictions");
  detail::require_same_shape(P, target, "smooth_l1");
  const int m = P.shape[0], n = P.shape[1];
  if (static_cast<int>(weights.size()) != m) throw ShapeError("smooth_l1: weight count mismatch");
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  const double norm = wsum > 0.0 ? wsum : 1.0;
  double loss = 0.0;
  for (int i = 0; i < m; ++i) {
    const double w = weights[static_cast<std::size_t>(i)];
    if (w == 0.0) continue;
    for (int j = 0; j < n; ++j) {
      const double d = P.at(i, j) - target.at(i, j);
      const double a = std::fabs(d);
      loss += w * (a <= beta ? 0.5 * d * d / beta : a - 0.5 * beta);
    }
  }
  loss /= norm;
  Tensor out({1}, {loss});
  Tape::check_finite(out, "smooth_l1");
  bool rg = pred.tape->requires_grad(pred.id);
  std::function<void(Tape&, int)> bw;
  if (rg) {
    int pid = pred.id;
    bw = [pid, target, weights, norm, beta, m, n](Tape& t, int self) {
      const double gv = t.grad_buf(self).data[0];
      const Tensor& P = t.value(pid);
      Tensor& dp = t.grad_buf(pid);
      for (int i = 0; i < m; ++i) {
        const double w = weights[static_cast<std::size_t>(i)] / norm;
        if (w == 0.0) continue;
        for (int j = 0; j < n; ++j) {
          const double d = P.at(i, j) - target.at(i, j);
          dp.at(i, j) += gv * w * std::clamp(d / beta, -1.0, 1.0);
        }
      }
    };
  }
  return pred.tape->push(std::move(out), rg, std::move(bw));
}

/// Weighted mean binary cross entropy on logits, the numerically stable form.
inline Var bce_logits(Var logits, const std::vector<double>& targets,
                      const std::vector<double>& weights) {
  const Tensor& L = logits.val();
  if (L.shape.size() != 1) throw ShapeError("bce_logits: expected 1-D logits");
  const int m = L.shape[0];
  if (static_cast<int>(targets.size()) != m || static_cast<int>(weights.size()) != m)
    throw ShapeError("bce_logits: target/weight count mismatch");
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  const double norm = wsum > 0.0 ? wsum : 1.0;
  double loss = 0.0;
  for (int i = 0; i < m; ++i) {
    const double w = weights[static_cast<std::size_t>(i)];
    if (w == 0.0) continue;
    const double x = L.data[static_cast<std::size_t>(i)];
    const double tgt = targets[static_cast<std::size_t>(i)];
    loss += w * (std::max(x, 0.0) - x * tgt + std::log1p(std::exp(-std::fabs(x))));
  }
  loss /= norm;
  Tensor out({1}, {loss});
  Tape::check_finite(out, "bce_logits");
  bool rg = logits.tape->requires_grad(logits.id);
  std::function<void(Tape&, int)> bw;
  if (rg) {
    int lid = logits.id;
    bw = [lid, targets, weights, norm, m](Tape& t, int self) {
      const double gv = t.grad_buf(self).data[0];
      const Tensor& L = t.value(lid);
      Tensor& dl = t.grad_buf(lid);
      for (int i = 0; i < m; ++i) {
        const double w = weights[static_cast<std::size_t>(i)] / norm;
        if (w == 0.0) continue;
        const double x = L.data[static_cast<std::size_t>(i)];
        const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        dl.data[static_cast<std::size_t>(i)] += gv * w * (s - targets[static_cast<std::size_t>(i)]);
      }
    };
  }
  return logits.tape->push(std::move(out), rg, std::move(bw));
}

// ---------------------------------------------------------------------------
// gradient checking

/// Max over coordinates of |analytic - central difference| /
/// max(1e-8, |analytic| + |central|) for a scalar-valued f(x).
template <typename F>
double grad_check(F f, const Tensor& x, double h = 1e-5) {
  ParamStore ps;
  Tensor& xt = ps.create("x", x.shape);
  xt = x;
  Tape tape;
  Var out = f(tape, tape.param(ps, "x"));
  tape.backward(out);
  const Tensor analytic = ps.grad("x");

  double max_err = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < probe.data.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + h;
    Tape tp;
    const double fp = f(tp, tp.input(probe)).val().scalar();
    probe.data[i] = orig - h;
    Tape tm;
    const double fm = f(tm, tm.input(probe)).val().scalar();
    probe.data[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic.data[i];
    const double err = std::fabs(a - numeric) / std::max(1e-8, std::fabs(a) + std::fabs(numeric));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

/// Same check against selected coordinates of named parameters; f builds the
/// whole graph from the store each call.
template <typename F>
double grad_check_params(F f, ParamStore& ps, const std::vector<std::pair<std::string, int>>& coords,
                         double h = 1e-5) {
  ps.zero_grad();
  {
    Tape tape;
    Var out = f(tape, ps);
    tape.backward(out);
  }
  double max_err = 0.0;
  for (const auto& [name, index] : coords) {
    const double analytic = ps.grad(name).data[static_cast<std::size_t>(index)];
    double& slot = ps.value(name).data[static_cast<std::size_t>(index)];
    const double orig = slot;
    slot = orig + h;
    double fp;
    {
      Tape tape;
      fp = f(tape, ps).val().scalar();
    }
    slot = orig - h;
    double fm;
    {
      Tape tape;
      fm = f(tape, ps).val().scalar();
    }
    slot = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double err =
        std::fabs(analytic - numeric) / std::max(1e-8, std::fabs(analytic) + std::fabs(numeric));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace odg
