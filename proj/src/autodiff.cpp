#include "s2sd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "s2sd/errors.hpp"

namespace s2sd {

const Tensor& Var::value() const { return graph_->value(id_); }
const Tensor& Var::grad() const { return graph_->grad(id_); }

Var Graph::parameter(Tensor value) {
  Var v = record("parameter", std::move(value), {}, {});
  nodes_.back().requires_grad = true;
  return v;
}

Var Graph::constant(Tensor value) { return record("constant", std::move(value), {}, {}); }

Var Graph::record(std::string_view op, Tensor value, std::span<const std::size_t> parents,
                  Backward backward) {
  const std::size_t id = nodes_.size();
  if (!value.all_finite()) {
    std::ostringstream os;
    os << "non-finite value at node #" << id << " (" << op << ", shape "
       << shape_string(value.shape()) << ")";
    throw NonFiniteError(id, std::string(op), os.str());
  }
  Node node;
  node.op = std::string(op);
  node.value = std::move(value);
  node.parents.assign(parents.begin(), parents.end());
  if (backward) {
    for (auto p : parents) node.requires_grad = node.requires_grad || nodes_.at(p).requires_grad;
    if (node.requires_grad) node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var(this, id);
}

const Tensor& Graph::grad(std::size_t id) const {
  const Node& n = nodes_.at(id);
  if (!n.has_grad) {
    // Unreached nodes report zeros of the right shape.
    auto& mut = const_cast<Node&>(n);
    mut.grad = Tensor(n.value.shape(), 0.0);
    mut.has_grad = true;
  }
  return n.grad;
}

Tensor* Graph::grad_slot(std::size_t id) {
  Node& n = nodes_.at(id);
  if (!n.requires_grad) return nullptr;
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return &n.grad;
}

void Graph::backward(Var root) {
  if (root.value().size() != 1) {
    throw ShapeError("backward: root of shape " + shape_string(root.shape()) +
                     " is not a scalar");
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  visits_ = 0;
  if (Tensor* g = grad_slot(root.id())) (*g)[0] = 1.0;

  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.has_grad) continue;
    ++visits_;
    if (!n.grad.all_finite()) {
      std::ostringstream os;
      os << "non-finite gradient at node #" << id << " (" << n.op << ")";
      throw NonFiniteError(id, n.op, os.str());
    }
    if (n.backward) {
      const Tensor out_grad = n.grad;
      n.backward(*this, out_grad);
    }
  }
}

namespace {

[[noreturn]] void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                   shape_string(b));
}

void require_same_graph(Var a, Var b, std::string_view op) {
  if (&a.graph() != &b.graph()) {
    throw std::invalid_argument(std::string(op) + ": operands belong to different graphs");
  }
}

void require_matrix(std::string_view op, const Tensor& t) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

Shape broadcast_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.size() == 1) return a.shape();
  if (a.size() == 1) return b.shape();
  shape_mismatch(op, a.shape(), b.shape());
}

inline double at_bc(const Tensor& t, std::size_t i) { return t.size() == 1 ? t[0] : t[i]; }

// Adds `contrib` into `slot`, summing down to one element for a broadcast operand.
void accumulate(Tensor* slot, const Tensor& contrib) {
  if (!slot) return;
  if (slot->size() == contrib.size()) {
    for (std::size_t i = 0; i < contrib.size(); ++i) (*slot)[i] += contrib[i];
  } else {
    double total = 0.0;
    for (double v : contrib.data()) total += v;
    (*slot)[0] += total;
  }
}

// `da(x, y)` / `db(x, y)` are the local partials at one element.
template <typename Fwd, typename DA, typename DB>
Var binary(std::string_view op, Var a, Var b, Fwd fwd, DA da, DB db) {
  require_same_graph(a, b, op);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(broadcast_shape(op, av, bv));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(at_bc(av, i), at_bc(bv, i));
  const std::size_t ia = a.id(), ib = b.id();
  const std::size_t ids[] = {ia, ib};
  return a.graph().record(op, std::move(out), ids, [ia, ib, da, db](Graph& g, const Tensor& go) {
    const Tensor& x = g.value(ia);
    const Tensor& y = g.value(ib);
    if (Tensor* sa = g.grad_slot(ia)) {
      Tensor c(go.shape());
      for (std::size_t i = 0; i < go.size(); ++i) c[i] = go[i] * da(at_bc(x, i), at_bc(y, i));
      accumulate(sa, c);
    }
    if (Tensor* sb = g.grad_slot(ib)) {
      Tensor c(go.shape());
      for (std::size_t i = 0; i < go.size(); ++i) c[i] = go[i] * db(at_bc(x, i), at_bc(y, i));
      accumulate(sb, c);
    }
  });
}

// `dfn(x, y)` is the local derivative given input x and output y.
template <typename Fwd, typename D>
Var unary(std::string_view op, Var a, Fwd fwd, D dfn) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  Graph& graph = a.graph();
  const std::size_t ia = a.id();
  const std::size_t io = graph.size();
  const std::size_t ids[] = {ia};
  return graph.record(op, std::move(out), ids, [ia, io, dfn](Graph& g, const Tensor& go) {
    Tensor* s = g.grad_slot(ia);
    if (!s) return;
    const Tensor& x = g.value(ia);
    const Tensor& y = g.value(io);
    for (std::size_t i = 0; i < go.size(); ++i) (*s)[i] += go[i] * dfn(x[i], y[i]);
  });
}

// out[n x m] += a[n x k] * b[k x m], with optional transposes of the stored operands.
void gemm_acc(const double* a, bool ta, const double* b, bool tb, double* out, std::size_t n,
              std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta ? a[p * n + i] : a[i * k + p];
      if (av == 0.0) continue;
      double* orow = out + i * m;
      if (!tb) {
        const double* brow = b + p * m;
        for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < m; ++j) orow[j] += av * b[j * k + p];
      }
    }
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_graph(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix("matmul", av);
  require_matrix("matmul", bv);
  if (av.cols() != bv.rows()) shape_mismatch("matmul", av.shape(), bv.shape());
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  Tensor out({n, m});
  gemm_acc(av.data().data(), false, bv.data().data(), false, out.data().data(), n, k, m);
  const std::size_t ia = a.id(), ib = b.id();
  const std::size_t ids[] = {ia, ib};
  return a.graph().record("matmul", std::move(out), ids, [ia, ib, n, k, m](Graph& g, const Tensor& go) {
    if (Tensor* sa = g.grad_slot(ia)) {
      // dA = dC * B^T
      gemm_acc(go.data().data(), false, g.value(ib).data().data(), true, sa->data().data(), n, m, k);
    }
    if (Tensor* sb = g.grad_slot(ib)) {
      // dB = A^T * dC
      gemm_acc(g.value(ia).data().data(), true, go.data().data(), false, sb->data().data(), k, n, m);
    }
  });
}

Var matmul_nt(Var a, Var b) {
  require_same_graph(a, b, "matmul_nt");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix("matmul_nt", av);
  require_matrix("matmul_nt", bv);
  if (av.cols() != bv.cols()) shape_mismatch("matmul_nt", av.shape(), bv.shape());
  const std::size_t n = av.rows(), k = av.cols(), m = bv.rows();
  Tensor out({n, m});
  gemm_acc(av.data().data(), false, bv.data().data(), true, out.data().data(), n, k, m);
  const std::size_t ia = a.id(), ib = b.id();
  const std::size_t ids[] = {ia, ib};
  return a.graph().record("matmul_nt", std::move(out), ids, [ia, ib, n, k, m](Graph& g, const Tensor& go) {
    if (Tensor* sa = g.grad_slot(ia)) {
      // dA = dC * B
      gemm_acc(go.data().data(), false, g.value(ib).data().data(), false, sa->data().data(), n, m, k);
    }
    if (Tensor* sb = g.grad_slot(ib)) {
      // dB = dC^T * A
      gemm_acc(go.data().data(), true, g.value(ia).data().data(), false, sb->data().data(), m, n, k);
    }
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_matrix("transpose", av);
  const std::size_t n = av.rows(), m = av.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(j, i) = av(i, j);
  const std::size_t ia = a.id();
  const std::size_t ids[] = {ia};
  return a.graph().record("transpose", std::move(out), ids, [ia, n, m](Graph& g, const Tensor& go) {
    Tensor* s = g.grad_slot(ia);
    if (!s) return;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) (*s)(i, j) += go(j, i);
  });
}

Var add(Var a, Var b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Var add_row(Var matrix, Var row) {
  require_same_graph(matrix, row, "add_row");
  const Tensor& mv = matrix.value();
  const Tensor& rv = row.value();
  require_matrix("add_row", mv);
  if (rv.size() != mv.cols()) shape_mismatch("add_row", mv.shape(), rv.shape());
  const std::size_t n = mv.rows(), m = mv.cols();
  Tensor out = mv;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) += rv[j];
  const std::size_t im = matrix.id(), ir = row.id();
  const std::size_t ids[] = {im, ir};
  return matrix.graph().record("add_row", std::move(out), ids, [im, ir, n, m](Graph& g, const Tensor& go) {
    accumulate(g.grad_slot(im), go);
    if (Tensor* s = g.grad_slot(ir)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*s)[j] += go(i, j);
    }
  });
}

Var scale(Var a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Var add_scalar(Var a, double offset) {
  return unary(
      "add_scalar", a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Var relu(Var a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var exp(Var a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sqrt(Var a) {
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Var maximum(Var a, double floor) {
  return unary(
      "maximum", a, [floor](double x) { return x > floor ? x : floor; },
      [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  const std::size_t ia = a.id();
  const std::size_t ids[] = {ia};
  return a.graph().record("sum", Tensor::scalar(total), ids, [ia](Graph& g, const Tensor& go) {
    Tensor* s = g.grad_slot(ia);
    if (!s) return;
    for (auto& v : s->data()) v += go[0];
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var row_sums(Var a) {
  const Tensor& av = a.value();
  require_matrix("row_sums", av);
  const std::size_t n = av.rows(), m = av.cols();
  Tensor out({n, 1});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i] += av(i, j);
  const std::size_t ia = a.id();
  const std::size_t ids[] = {ia};
  return a.graph().record("row_sums", std::move(out), ids, [ia, n, m](Graph& g, const Tensor& go) {
    Tensor* s = g.grad_slot(ia);
    if (!s) return;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) (*s)(i, j) += go[i];
  });
}

Var softmax_rows(Var a) {
  const Tensor& av = a.value();
  if (av.rank() > 2) throw ShapeError("softmax_rows: expected a matrix, got " + shape_string(av.shape()));
  const std::size_t n = av.rows(), m = av.cols();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double peak = av(i, 0);
    for (std::size_t j = 1; j < m; ++j) peak = std::max(peak, av(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      out(i, j) = std::exp(av(i, j) - peak);
      z += out(i, j);
    }
    for (std::size_t j = 0; j < m; ++j) out(i, j) /= z;
  }
  Graph& graph = a.graph();
  const std::size_t ia = a.id();
  const std::size_t io = graph.size();
  const std::size_t ids[] = {ia};
  return graph.record("softmax_rows", std::move(out), ids, [ia, io, n, m](Graph& g, const Tensor& go) {
    Tensor* s = g.grad_slot(ia);
    if (!s) return;
    const Tensor& y = g.value(io);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += go(i, j) * y(i, j);
      for (std::size_t j = 0; j < m; ++j) (*s)(i, j) += y(i, j) * (go(i, j) - dot);
    }
  });
}

Var l2_normalize_rows(Var a) {
  constexpr double kFloor = 1e-12;
  const Tensor& av = a.value();
  if (av.rank() > 2) throw ShapeError("l2_normalize_rows: expected a matrix, got " + shape_string(av.shape()));
  const std::size_t n = av.rows(), m = av.cols();
  Tensor out(av.shape());
  std::vector<double> norms(n);
  std::vector<bool> floored(n);
  for (std::size_t i = 0; i < n; ++i) {
    double peak = 0.0;
    for (std::size_t j = 0; j < m; ++j) peak = std::max(peak, std::abs(av(i, j)));
    double sq = 0.0;
    if (peak > 0.0) {
      for (std::size_t j = 0; j < m; ++j) sq += (av(i, j) / peak) * (av(i, j) / peak);
    }
    const double norm = peak * std::sqrt(sq);
    floored[i] = norm * norm < kFloor;
    norms[i] = floored[i] ? std::sqrt(kFloor) : norm;
    for (std::size_t j = 0; j < m; ++j) out(i, j) = av(i, j) / norms[i];
  }
  Graph& graph = a.graph();
  const std::size_t ia = a.id();
  const std::size_t io = graph.size();
  const std::size_t ids[] = {ia};
  return graph.record("l2_normalize_rows", std::move(out), ids,
                      [ia, io, n, m, norms = std::move(norms), floored = std::move(floored)](
                          Graph& g, const Tensor& go) {
                        Tensor* s = g.grad_slot(ia);
                        if (!s) return;
                        const Tensor& y = g.value(io);
                        for (std::size_t i = 0; i < n; ++i) {
                          double dot = 0.0;
                          if (!floored[i]) {
                            for (std::size_t j = 0; j < m; ++j) dot += y(i, j) * go(i, j);
                          }
                          for (std::size_t j = 0; j < m; ++j) {
                            (*s)(i, j) += (go(i, j) - y(i, j) * dot) / norms[i];
                          }
                        }
                      });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Graph& graph = parts[0].graph();
  const std::size_t n = parts[0].value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> ids, widths;
  for (const Var& p : parts) {
    require_same_graph(parts[0], p, "concat_cols");
    require_matrix("concat_cols", p.value());
    if (p.value().rows() != n) shape_mismatch("concat_cols", parts[0].shape(), p.shape());
    ids.push_back(p.id());
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Tensor out({n, total});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) out(i, offset + j) = v(i, j);
    offset += v.cols();
  }
  return graph.record("concat_cols", std::move(out), ids, [ids, widths, n](Graph& g, const Tensor& go) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (Tensor* s = g.grad_slot(ids[p])) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < widths[p]; ++j) (*s)(i, j) += go(i, off + j);
      }
      off += widths[p];
    }
  });
}

Var gather(Var a, std::span<const std::size_t> flat_indices) {
  const Tensor& av = a.value();
  if (flat_indices.empty()) throw ShapeError("gather: empty index set");
  Tensor out({1, flat_indices.size()});
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    if (flat_indices[i] >= av.size()) {
      throw ShapeError("gather: index " + std::to_string(flat_indices[i]) + " out of range for " +
                       shape_string(av.shape()));
    }
    out[i] = av[flat_indices[i]];
  }
  const std::size_t ia = a.id();
  const std::size_t ids[] = {ia};
  std::vector<std::size_t> idx(flat_indices.begin(), flat_indices.end());
  return a.graph().record("gather", std::move(out), ids, [ia, idx = std::move(idx)](Graph& g, const Tensor& go) {
    Tensor* s = g.grad_slot(ia);
    if (!s) return;
    for (std::size_t i = 0; i < idx.size(); ++i) (*s)[idx[i]] += go[i];
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  const std::size_t ids[] = {ia};
  return a.graph().record("reshape", std::move(out), ids, [ia](Graph& g, const Tensor& go) {
    Tensor* s = g.grad_slot(ia);
    if (!s) return;
    for (std::size_t i = 0; i < go.size(); ++i) (*s)[i] += go[i];
  });
}

Var stop_gradient(Var x) {
  Graph& g = x.graph();
  if (g.is_stop(x.id())) return x;
  const std::size_t ids[] = {x.id()};
  const std::size_t k = g.stop_values_.size();
  Tensor value = x.value();
  if (k < g.stop_replay_.size()) {
    if (g.stop_replay_[k].shape() != value.shape()) {
      throw ShapeError("stop_gradient: replayed value " + shape_string(g.stop_replay_[k].shape()) +
                       " for input " + shape_string(value.shape()));
    }
    value = g.stop_replay_[k];
  }
  g.stop_values_.push_back(value);
  // No backward closure: the node never requires a gradient, so the reverse
  // sweep deposits nothing into x or anything upstream of it through here.
  Var out = g.record("stop_gradient", std::move(value), ids, {});
  g.nodes_.back().stop = true;
  return out;
}

}  // namespace s2sd
