#pragma once

// Tape-based reverse-mode automatic differentiation over dense float tensors.
//
// A Graph records nodes in creation order, which is a valid topological order,
// so backward is a single reverse sweep. Gradients accumulate additively into
// each input, which makes shared subexpressions correct without bookkeeping.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ssvc/tensor.hpp"

namespace ssvc::ad {

/// A named trainable tensor plus its accumulated gradient.
struct Parameter {
  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape());
    else grad.fill(0.0f);
  }
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* g, int id) : g_(g), id_(id) {}

  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
  [[nodiscard]] bool requires_grad() const;
  [[nodiscard]] Graph* graph() const { return g_; }
  [[nodiscard]] int id() const { return id_; }
  [[nodiscard]] bool valid() const { return g_ != nullptr; }
  /// First element; convenient for scalar losses.
  [[nodiscard]] float item() const { return value()[0]; }

 private:
  Graph* g_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  using Backward = std::function<void(Graph&, int self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf with no gradient. The tensor is copied into the graph.
  Var constant(Tensor t) { return push(std::move(t), nullptr, false, nullptr, {}); }
  /// Leaf with no gradient that references external storage, which must outlive the graph.
  Var constant_ref(const Tensor& t) { return push(Tensor{}, &t, false, nullptr, {}); }
  /// Leaf that requires a gradient (used for gradient queries and checks).
  Var variable(Tensor t) { return push(std::move(t), nullptr, true, nullptr, {}); }
  /// Leaf bound to a parameter. backward() accumulates into p.grad when tracked;
  /// an untracked binding behaves like constant_ref.
  Var param(Parameter& p, bool track = true) {
    return push(Tensor{}, &p.value, track, track ? &p : nullptr, {});
  }

  /// Records an operation result. `inputs` are the node ids it reads.
  Var record(Tensor value, std::span<const Var> inputs, Backward fn) {
    bool rg = false;
    for (const Var& v : inputs) rg = rg || v.requires_grad();
    return push(std::move(value), nullptr, rg, nullptr, rg ? std::move(fn) : Backward{});
  }

  [[nodiscard]] const Tensor& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.external ? *n.external : n.value;
  }
  [[nodiscard]] bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Gradient buffer of a node, zero-allocated on first use.
  fvec& grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(static_cast<std::size_t>(value(id).size()), 0.0f);
    return n.grad;
  }
  [[nodiscard]] bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  [[nodiscard]] bool consumed() const { return consumed_; }

  /// Runs the reverse sweep from a scalar loss and adds the results into every
  /// tracked Parameter's grad.
  void backward(Var loss) {
    sweep(loss);
    for (Node& n : nodes_) {
      if (!n.param || n.grad.empty()) continue;
      if (n.param->grad.shape() != n.param->value.shape()) n.param->zero_grad();
      float* g = n.param->grad.data();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
  }

  /// Exact reverse-mode gradients of `loss` w.r.t. each of `wrt`. Inputs that the
  /// loss does not reach get zero gradients.
  std::vector<Tensor> gradients(Var loss, std::span<const Var> wrt) {
    sweep(loss);
    std::vector<Tensor> out;
    out.reserve(wrt.size());
    for (const Var& v : wrt) {
      const Node& n = nodes_[static_cast<std::size_t>(v.id())];
      Tensor g(v.shape());
      if (!n.grad.empty()) g.storage() = n.grad;
      out.push_back(std::move(g));
    }
    return out;
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    fvec grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    Backward backward;
  };

  Var push(Tensor v, const Tensor* ext, bool rg, Parameter* p, Backward fn) {
    if (consumed_) throw std::logic_error("graph already consumed by a backward pass");
    Node n;
    n.value = std::move(v);
    n.external = ext;
    n.requires_grad = rg;
    n.param = p;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  void sweep(Var loss) {
    if (consumed_) throw std::logic_error("graph already consumed by a backward pass");
    if (loss.graph() != this) throw std::invalid_argument("loss belongs to a different graph");
    if (loss.value().size() != 1)
      throw std::invalid_argument(cat("loss must be scalar, got shape ", shape_str(loss.shape())));
    consumed_ = true;
    if (!requires_grad(loss.id())) return;
    grad(loss.id())[0] = 1.0f;
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
    }
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return g_->value(id_); }
inline bool Var::requires_grad() const { return g_->requires_grad(id_); }

namespace detail {

inline Graph& graph_of(const Var& a) {
  SSVC_CHECK(a.valid(), "use of an empty Var");
  return *a.graph();
}

inline void check_same(const Var& a, const Var& b, const char* op) {
  SSVC_CHECK(a.graph() == b.graph(), op, ": operands from different graphs");
  SSVC_CHECK(a.shape() == b.shape(), op, ": shape mismatch ", shape_str(a.shape()), " vs ",
             shape_str(b.shape()));
}

inline void accumulate(fvec& dst, const fvec& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

/// Elementwise unary op given f(x) and f'(x, y).
template <typename F, typename DF>
Var unary(const Var& x, F f, DF df) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::int64_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const int xi = x.id();
  return g.record(std::move(out), std::span<const Var>(&x, 1), [xi, df](Graph& gr, int self) {
    const Tensor& xv2 = gr.value(xi);
    const Tensor& yv = gr.value(self);
    const auto& go = gr.grad(self);
    auto& gx = gr.grad(xi);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * df(xv2[static_cast<std::int64_t>(i)], yv[static_cast<std::int64_t>(i)]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(const Var& a, const Var& b) {
  detail::check_same(a, b, "add");
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  const int ai = a.id(), bi = b.id();
  const Var in[] = {a, b};
  return a.graph()->record(std::move(out), in, [ai, bi](Graph& g, int self) {
    const auto& go = g.grad(self);
    if (g.requires_grad(ai)) detail::accumulate(g.grad(ai), go);
    if (g.requires_grad(bi)) detail::accumulate(g.grad(bi), go);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same(a, b, "sub");
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  const int ai = a.id(), bi = b.id();
  const Var in[] = {a, b};
  return a.graph()->record(std::move(out), in, [ai, bi](Graph& g, int self) {
    const auto& go = g.grad(self);
    if (g.requires_grad(ai)) detail::accumulate(g.grad(ai), go);
    if (g.requires_grad(bi)) {
      auto& gb = g.grad(bi);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same(a, b, "mul");
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  const int ai = a.id(), bi = b.id();
  const Var in[] = {a, b};
  return a.graph()->record(std::move(out), in, [ai, bi](Graph& g, int self) {
    const auto& go = g.grad(self);
    const Tensor& av = g.value(ai);
    const Tensor& bv = g.value(bi);
    if (g.requires_grad(ai)) {
      auto& ga = g.grad(ai);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[static_cast<std::int64_t>(i)];
    }
    if (g.requires_grad(bi)) {
      auto& gb = g.grad(bi);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[static_cast<std::int64_t>(i)];
    }
  });
}

/// a*x + b elementwise, with constant a and b.
inline Var affine(const Var& x, float a, float b) {
  return detail::unary(x, [a, b](float v) { return a * v + b; }, [a](float, float) { return a; });
}

inline Var scale(const Var& x, float a) { return affine(x, a, 0.0f); }

/// x * s where s holds a single element.
inline Var mul_scalar(const Var& x, const Var& s) {
  SSVC_CHECK(s.value().size() == 1, "mul_scalar: scalar operand has shape ", shape_str(s.shape()));
  const float sv = s.value()[0];
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * sv;
  const int xi = x.id(), si = s.id();
  const Var in[] = {x, s};
  return x.graph()->record(std::move(out), in, [xi, si](Graph& g, int self) {
    const auto& go = g.grad(self);
    const Tensor& xv = g.value(xi);
    const float s0 = g.value(si)[0];
    if (g.requires_grad(xi)) {
      auto& gx = g.grad(xi);
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * s0;
    }
    if (g.requires_grad(si)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < go.size(); ++i) acc += static_cast<double>(go[i]) * xv[static_cast<std::int64_t>(i)];
      g.grad(si)[0] += static_cast<float>(acc);
    }
  });
}

/// Adds a row vector (shape {n} or {1,n}) to every row of x.
inline Var add_row(const Var& x, const Var& b) {
  const int n = x.value().cols();
  SSVC_CHECK(b.value().size() == n, "add_row: bias size ", b.value().size(), " vs cols ", n);
  const int m = x.value().rows();
  Tensor out = x.value();
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) out.row(r)[c] += b.value()[c];
  const int xi = x.id(), bi = b.id();
  const Var in[] = {x, b};
  return x.graph()->record(std::move(out), in, [xi, bi, m, n](Graph& g, int self) {
    const auto& go = g.grad(self);
    if (g.requires_grad(xi)) detail::accumulate(g.grad(xi), go);
    if (g.requires_grad(bi)) {
      auto& gb = g.grad(bi);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) gb[static_cast<std::size_t>(c)] += go[static_cast<std::size_t>(r) * n + c];
    }
  });
}

/// Multiplies every row of x elementwise by a row vector.
inline Var mul_row(const Var& x, const Var& w) {
  const int n = x.value().cols();
  SSVC_CHECK(w.value().size() == n, "mul_row: weight size ", w.value().size(), " vs cols ", n);
  const int m = x.value().rows();
  Tensor out = x.value();
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) out.row(r)[c] *= w.value()[c];
  const int xi = x.id(), wi = w.id();
  const Var in[] = {x, w};
  return x.graph()->record(std::move(out), in, [xi, wi, m, n](Graph& g, int self) {
    const auto& go = g.grad(self);
    const Tensor& xv = g.value(xi);
    const Tensor& wv = g.value(wi);
    if (g.requires_grad(xi)) {
      auto& gx = g.grad(xi);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) {
          const std::size_t k = static_cast<std::size_t>(r) * n + c;
          gx[k] += go[k] * wv[c];
        }
    }
    if (g.requires_grad(wi)) {
      auto& gw = g.grad(wi);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) {
          const std::size_t k = static_cast<std::size_t>(r) * n + c;
          gw[static_cast<std::size_t>(c)] += go[k] * xv.row(r)[c];
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Var tanh(const Var& x) {
  return detail::unary(x, [](float v) { return std::tanh(v); }, [](float, float y) { return 1.0f - y * y; });
}

inline Var relu(const Var& x) {
  return detail::unary(x, [](float v) { return v > 0.0f ? v : 0.0f; },
                       [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

/// Tanh-approximated GELU. The tanh values are computed with Eigen's
/// vectorized kernel and kept for the backward pass.
inline Var gelu(const Var& x) {
  static constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  static constexpr float c = 0.044715f;
  Graph& g = detail::graph_of(x);
  const Tensor& xv = x.value();
  const auto n = static_cast<Eigen::Index>(xv.size());
  Eigen::Map<const Eigen::ArrayXf> xa(xv.data(), n);
  auto t = std::make_shared<Eigen::ArrayXf>((k * (xa + c * xa.cube())).tanh());
  Tensor out(xv.shape());
  Eigen::Map<Eigen::ArrayXf>(out.data(), n) = 0.5f * xa * (1.0f + *t);
  const int xi = x.id();
  return g.record(std::move(out), std::span<const Var>(&x, 1), [xi, t, n](Graph& gr, int self) {
    Eigen::Map<const Eigen::ArrayXf> xa2(gr.value(xi).data(), n);
    Eigen::Map<const Eigen::ArrayXf> go(gr.grad(self).data(), n);
    Eigen::Map<Eigen::ArrayXf> gx(gr.grad(xi).data(), n);
    const auto du = k * (1.0f + 3.0f * c * xa2.square());
    gx += go * (0.5f * (1.0f + *t) + 0.5f * xa2 * (1.0f - t->square()) * du);
  });
}

inline Var exp(const Var& x) {
  return detail::unary(x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

inline Var square(const Var& x) {
  return detail::unary(x, [](float v) { return v * v; }, [](float v, float) { return 2.0f * v; });
}

inline Var abs(const Var& x) {
  return detail::unary(x, [](float v) { return std::fabs(v); },
                       [](float v, float) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); });
}

/// Identity forward; backward multiplies the upstream gradient by -scale.
inline Var gradient_reversal(const Var& x, float scale = 1.0f) {
  SSVC_CHECK(scale > 0.0f, "gradient_reversal: scale must be positive");
  Tensor out = x.value();
  const int xi = x.id();
  return x.graph()->record(std::move(out), std::span<const Var>(&x, 1), [xi, scale](Graph& g, int self) {
    const auto& go = g.grad(self);
    auto& gx = g.grad(xi);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] -= scale * go[i];
  });
}

/// Value copy that blocks gradient flow.
inline Var stop_gradient(const Var& x) { return detail::graph_of(x).constant(x.value()); }

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& x) {
  double acc = 0.0;
  for (float v : x.value().values()) acc += v;
  const int xi = x.id();
  return x.graph()->record(Tensor::scalar(static_cast<float>(acc)), std::span<const Var>(&x, 1),
                           [xi](Graph& g, int self) {
                             const float go = g.grad(self)[0];
                             for (float& v : g.grad(xi)) v += go;
                           });
}

inline Var mean(const Var& x) {
  const auto n = static_cast<float>(x.value().size());
  SSVC_CHECK(n > 0, "mean of empty tensor");
  return scale(sum(x), 1.0f / n);
}

/// Population variance of all elements.
inline Var variance(const Var& x) {
  const auto& xv = x.value();
  const std::int64_t n = xv.size();
  SSVC_CHECK(n > 0, "variance of empty tensor");
  double mu = 0.0;
  for (float v : xv.values()) mu += v;
  mu /= static_cast<double>(n);
  double acc = 0.0;
  for (float v : xv.values()) acc += (v - mu) * (v - mu);
  const int xi = x.id();
  return x.graph()->record(Tensor::scalar(static_cast<float>(acc / static_cast<double>(n))),
                           std::span<const Var>(&x, 1), [xi, mu, n](Graph& g, int self) {
                             const float go = g.grad(self)[0];
                             const Tensor& v = g.value(xi);
                             auto& gx = g.grad(xi);
                             const float k = 2.0f / static_cast<float>(n);
                             for (std::int64_t i = 0; i < n; ++i)
                               gx[static_cast<std::size_t>(i)] += go * k * static_cast<float>(v[i] - mu);
                           });
}

/// Column means of a matrix: [m x n] -> [1 x n].
inline Var mean_rows(const Var& x) {
  const int m = x.value().rows(), n = x.value().cols();
  SSVC_CHECK(m > 0, "mean_rows of empty matrix");
  Tensor out = Tensor::matrix(1, n);
  for (int c = 0; c < n; ++c) {
    double acc = 0.0;
    for (int r = 0; r < m; ++r) acc += x.value().row(r)[c];
    out[c] = static_cast<float>(acc / m);
  }
  const int xi = x.id();
  return x.graph()->record(std::move(out), std::span<const Var>(&x, 1), [xi, m, n](Graph& g, int self) {
    const auto& go = g.grad(self);
    auto& gx = g.grad(xi);
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < n; ++c) gx[static_cast<std::size_t>(r) * n + c] += go[static_cast<std::size_t>(c)] / static_cast<float>(m);
  });
}

/// Mean squared error over all elements.
inline Var mse(const Var& a, const Var& b) { return mean(square(sub(a, b))); }

// ---------------------------------------------------------------------------
// Linear algebra and shape ops

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  SSVC_CHECK(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0), "matmul shape mismatch ",
             shape_str(av.shape()), " x ", shape_str(bv.shape()));
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out = Tensor::matrix(m, n);
  kernel::gemm_nn(av.data(), bv.data(), out.data(), m, n, k, false);
  const int ai = a.id(), bi = b.id();
  const Var in[] = {a, b};
  return a.graph()->record(std::move(out), in, [ai, bi, m, n, k](Graph& g, int self) {
    const auto& go = g.grad(self);
    if (g.requires_grad(ai)) kernel::gemm_nt(go.data(), g.value(bi).data(), g.grad(ai).data(), m, k, n, true);
    if (g.requires_grad(bi)) kernel::gemm_tn(g.value(ai).data(), go.data(), g.grad(bi).data(), k, n, m, true);
  });
}

inline Var transpose(const Var& x) {
  const Tensor& xv = x.value();
  SSVC_CHECK(xv.rank() == 2, "transpose expects a matrix");
  const int m = xv.dim(0), n = xv.dim(1);
  Tensor out({n, m}, kernel::transpose(xv.data(), m, n));
  const int xi = x.id();
  return x.graph()->record(std::move(out), std::span<const Var>(&x, 1), [xi, m, n](Graph& g, int self) {
    const auto t = kernel::transpose(g.grad(self).data(), n, m);
    detail::accumulate(g.grad(xi), t);
  });
}

inline Var reshape(const Var& x, Shape s) {
  Tensor out = x.value().reshaped(std::move(s));
  const int xi = x.id();
  return x.graph()->record(std::move(out), std::span<const Var>(&x, 1),
                           [xi](Graph& g, int self) { detail::accumulate(g.grad(xi), g.grad(self)); });
}

/// Concatenates matrices with equal row counts along the column axis.
inline Var concat_cols(const std::vector<Var>& parts) {
  SSVC_CHECK(!parts.empty(), "concat_cols of nothing");
  const int m = parts[0].value().rows();
  std::vector<int> widths;
  int total = 0;
  for (const Var& p : parts) {
    SSVC_CHECK(p.value().rows() == m, "concat_cols: row mismatch");
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Tensor out = Tensor::matrix(m, total);
  int off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& pv = parts[i].value();
    for (int r = 0; r < m; ++r) std::copy(pv.row(r), pv.row(r) + widths[i], out.row(r) + off);
    off += widths[i];
  }
  std::vector<int> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return parts[0].graph()->record(std::move(out), parts, [ids, widths, m, total](Graph& g, int self) {
    const auto& go = g.grad(self);
    int o = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (g.requires_grad(ids[i])) {
        auto& gp = g.grad(ids[i]);
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < widths[i]; ++c)
            gp[static_cast<std::size_t>(r) * widths[i] + c] += go[static_cast<std::size_t>(r) * total + o + c];
      }
      o += widths[i];
    }
  });
}

/// Stacks matrices with equal column counts along the row axis. A Var may
/// appear several times; its gradient accumulates.
inline Var concat_rows(const std::vector<Var>& parts) {
  SSVC_CHECK(!parts.empty(), "concat_rows of nothing");
  const int n = parts[0].value().cols();
  int total = 0;
  std::vector<int> offsets;
  for (const Var& p : parts) {
    SSVC_CHECK(p.value().cols() == n, "concat_rows: column mismatch ", p.value().cols(), " vs ", n);
    offsets.push_back(total);
    total += p.value().rows();
  }
  Tensor out = Tensor::matrix(total, n);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& pv = parts[i].value();
    std::copy(pv.data(), pv.data() + pv.size(), out.row(offsets[i]));
  }
  std::vector<int> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return parts[0].graph()->record(std::move(out), parts, [ids, offsets, n](Graph& g, int self) {
    const auto& go = g.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!g.requires_grad(ids[i])) continue;
      auto& gp = g.grad(ids[i]);
      const std::size_t base = static_cast<std::size_t>(offsets[i]) * n;
      for (std::size_t k = 0; k < gp.size(); ++k) gp[k] += go[base + k];
    }
  });
}

inline Var slice_rows(const Var& x, int begin, int count) {
  const Tensor& xv = x.value();
  const int n = xv.cols();
  SSVC_CHECK(begin >= 0 && count >= 0 && begin + count <= xv.rows(), "slice_rows out of range");
  Tensor out = Tensor::matrix(count, n);
  std::copy(xv.row(begin), xv.row(begin) + static_cast<std::size_t>(count) * n, out.data());
  const int xi = x.id();
  return x.graph()->record(std::move(out), std::span<const Var>(&x, 1), [xi, begin, n](Graph& g, int self) {
    const auto& go = g.grad(self);
    auto& gx = g.grad(xi);
    const std::size_t base = static_cast<std::size_t>(begin) * n;
    for (std::size_t k = 0; k < go.size(); ++k) gx[base + k] += go[k];
  });
}

/// out[i] = x[idx[i]]; backs embedding lookups (gradient scatter-adds).
inline Var gather_rows(const Var& x, std::vector<int> idx) {
  const Tensor& xv = x.value();
  const int n = xv.cols(), m = xv.rows();
  Tensor out = Tensor::matrix(static_cast<int>(idx.size()), n);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    SSVC_CHECK(idx[i] >= 0 && idx[i] < m, "gather_rows index ", idx[i], " out of range [0,", m, ")");
    std::copy(xv.row(idx[i]), xv.row(idx[i]) + n, out.row(static_cast<int>(i)));
  }
  const int xi = x.id();
  return x.graph()->record(std::move(out), std::span<const Var>(&x, 1),
                           [xi, idx = std::move(idx), n](Graph& g, int self) {
                             const auto& go = g.grad(self);
                             auto& gx = g.grad(xi);
                             for (std::size_t i = 0; i < idx.size(); ++i) {
                               const std::size_t dst = static_cast<std::size_t>(idx[i]) * n;
                               const std::size_t src = i * n;
                               for (int c = 0; c < n; ++c) gx[dst + c] += go[src + c];
                             }
                           });
}

inline Var embedding(const Var& table, std::vector<int> ids) { return gather_rows(table, std::move(ids)); }

/// Width-w temporal context: row t of the result concatenates rows t-w/2 .. t+w/2
/// of x within the same segment, zero padded at segment edges. Followed by a
/// matmul this is a 1-D convolution over time.
inline Var temporal_context(const Var& x, int width, std::vector<int> segments) {
  SSVC_CHECK(width >= 1 && width % 2 == 1, "temporal_context width must be odd");
  const Tensor& xv = x.value();
  const int T = xv.rows(), D = xv.cols(), half = width / 2;
  int acc = 0;
  for (int s : segments) acc += s;
  SSVC_CHECK(acc == T, "temporal_context: segments sum ", acc, " != rows ", T);
  std::vector<int> seg_begin(static_cast<std::size_t>(T)), seg_end(static_cast<std::size_t>(T));
  int off = 0;
  for (int s : segments) {
    for (int t = off; t < off + s; ++t) {
      seg_begin[static_cast<std::size_t>(t)] = off;
      seg_end[static_cast<std::size_t>(t)] = off + s;
    }
    off += s;
  }
  Tensor out = Tensor::matrix(T, width * D);
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < width; ++j) {
      const int src = t + j - half;
      if (src < seg_begin[static_cast<std::size_t>(t)] || src >= seg_end[static_cast<std::size_t>(t)]) continue;
      std::copy(xv.row(src), xv.row(src) + D, out.row(t) + j * D);
    }
  const int xi = x.id();
  return x.graph()->record(
      std::move(out), std::span<const Var>(&x, 1),
      [xi, T, D, width, half, seg_begin = std::move(seg_begin), seg_end = std::move(seg_end)](Graph& g, int self) {
        const auto& go = g.grad(self);
        auto& gx = g.grad(xi);
        for (int t = 0; t < T; ++t)
          for (int j = 0; j < width; ++j) {
            const int src = t + j - half;
            if (src < seg_begin[static_cast<std::size_t>(t)] || src >= seg_end[static_cast<std::size_t>(t)]) continue;
            const std::size_t o = static_cast<std::size_t>(t) * width * D + static_cast<std::size_t>(j) * D;
            for (int d = 0; d < D; ++d) gx[static_cast<std::size_t>(src) * D + d] += go[o + d];
          }
      });
}

// ---------------------------------------------------------------------------
// Normalisation, softmax, losses

/// Softmax along `axis` (rank-1: axis 0; rank-2: axis 0 or 1). Max-subtracted.
inline Var softmax(const Var& x, int axis = -1) {
  const Tensor& xv = x.value();
  SSVC_CHECK(xv.rank() == 1 || xv.rank() == 2, "softmax supports rank 1 or 2");
  if (axis < 0) axis += xv.rank();
  SSVC_CHECK(axis >= 0 && axis < xv.rank(), "softmax axis out of range");
  int groups, len, stride, gstride;
  if (xv.rank() == 1) {
    groups = 1, len = xv.dim(0), stride = 1, gstride = 0;
  } else if (axis == 1) {
    groups = xv.dim(0), len = xv.dim(1), stride = 1, gstride = xv.dim(1);
  } else {
    groups = xv.dim(1), len = xv.dim(0), stride = xv.dim(1), gstride = 1;
  }
  Tensor out(xv.shape());
  for (int gi = 0; gi < groups; ++gi) {
    const std::int64_t base = static_cast<std::int64_t>(gi) * gstride;
    float mx = -std::numeric_limits<float>::infinity();
    for (int i = 0; i < len; ++i) mx = std::max(mx, xv[base + static_cast<std::int64_t>(i) * stride]);
    double z = 0.0;
    for (int i = 0; i < len; ++i) {
      const float e = std::exp(xv[base + static_cast<std::int64_t>(i) * stride] - mx);
      out[base + static_cast<std::int64_t>(i) * stride] = e;
      z += e;
    }
    for (int i = 0; i < len; ++i) out[base + static_cast<std::int64_t>(i) * stride] /= static_cast<float>(z);
  }
  const int xi = x.id();
  return x.graph()->record(std::move(out), std::span<const Var>(&x, 1),
                           [xi, groups, len, stride, gstride](Graph& g, int self) {
                             const auto& go = g.grad(self);
                             const Tensor& y = g.value(self);
                             auto& gx = g.grad(xi);
                             for (int gi = 0; gi < groups; ++gi) {
                               const std::int64_t base = static_cast<std::int64_t>(gi) * gstride;
                               double dot = 0.0;
                               for (int i = 0; i < len; ++i) {
                                 const auto k = static_cast<std::size_t>(base + static_cast<std::int64_t>(i) * stride);
                                 dot += static_cast<double>(go[k]) * y[static_cast<std::int64_t>(k)];
                               }
                               for (int i = 0; i < len; ++i) {
                                 const auto k = static_cast<std::size_t>(base + static_cast<std::int64_t>(i) * stride);
                                 gx[k] += y[static_cast<std::int64_t>(k)] * (go[k] - static_cast<float>(dot));
                               }
                             }
                           });
}

/// Mean over rows with target >= 0 of -log softmax(logits)[target]. Targets of -1
/// are ignored. Returns 0 when every row is ignored.
inline Var cross_entropy_logits(const Var& logits, const std::vector<int>& targets) {
  const Tensor& lv = logits.value();
  SSVC_CHECK(lv.rank() == 2, "cross_entropy_logits expects [N x V] logits");
  const int N = lv.dim(0), V = lv.dim(1);
  SSVC_CHECK(static_cast<int>(targets.size()) == N, "cross_entropy_logits: ", targets.size(), " targets for ", N, " rows");
  int count = 0;
  for (int t : targets) {
    SSVC_CHECK(t >= -1 && t < V, "cross_entropy_logits: target ", t, " outside [0,", V, ")");
    if (t >= 0) ++count;
  }
  auto probs = std::make_shared<fvec>(static_cast<std::size_t>(N) * V);
  double loss = 0.0;
  for (int r = 0; r < N; ++r) {
    if (targets[static_cast<std::size_t>(r)] < 0) continue;
    const float* row = lv.row(r);
    Eigen::Map<const Eigen::ArrayXf> lr(row, V);
    Eigen::Map<Eigen::ArrayXf> pr(probs->data() + static_cast<std::size_t>(r) * V, V);
    const float mx = lr.maxCoeff();
    pr = (lr - mx).exp();
    const double z = pr.cast<double>().sum();
    pr *= static_cast<float>(1.0 / z);
    loss += std::log(z) + mx - row[targets[static_cast<std::size_t>(r)]];
  }
  const float denom = count > 0 ? static_cast<float>(count) : 1.0f;
  const int li = logits.id();
  return logits.graph()->record(
      Tensor::scalar(static_cast<float>(loss / denom)), std::span<const Var>(&logits, 1),
      [li, probs, targets, N, V, denom](Graph& g, int self) {
        const float go = g.grad(self)[0] / denom;
        auto& gl = g.grad(li);
        for (int r = 0; r < N; ++r) {
          const int t = targets[static_cast<std::size_t>(r)];
          if (t < 0) continue;
          const std::size_t base = static_cast<std::size_t>(r) * V;
          for (int c = 0; c < V; ++c) gl[base + c] += go * (*probs)[base + c];
          gl[base + static_cast<std::size_t>(t)] -= go;
        }
      });
}

/// Row-wise layer normalisation with learnable gain and bias.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f) {
  const Tensor& xv = x.value();
  const int m = xv.rows(), n = xv.cols();
  SSVC_CHECK(gamma.value().size() == n && beta.value().size() == n, "layer_norm parameter size mismatch");
  auto xhat = std::make_shared<fvec>(static_cast<std::size_t>(m) * n);
  auto rstd = std::make_shared<fvec>(static_cast<std::size_t>(m));
  Tensor out(xv.shape());
  for (int r = 0; r < m; ++r) {
    const float* row = xv.row(r);
    double mu = 0.0;
    for (int c = 0; c < n; ++c) mu += row[c];
    mu /= n;
    double var = 0.0;
    for (int c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= n;
    const float rs = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*rstd)[static_cast<std::size_t>(r)] = rs;
    for (int c = 0; c < n; ++c) {
      const float h = static_cast<float>(row[c] - mu) * rs;
      (*xhat)[static_cast<std::size_t>(r) * n + c] = h;
      out.row(r)[c] = h * gamma.value()[c] + beta.value()[c];
    }
  }
  const int xi = x.id(), gi = gamma.id(), bi = beta.id();
  const Var in[] = {x, gamma, beta};
  return x.graph()->record(std::move(out), in, [xi, gi, bi, m, n, xhat, rstd](Graph& g, int self) {
    const auto& go = g.grad(self);
    const Tensor& gv = g.value(gi);
    if (g.requires_grad(gi) || g.requires_grad(bi)) {
      auto& gg = g.grad(gi);
      auto& gb = g.grad(bi);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) {
          const std::size_t k = static_cast<std::size_t>(r) * n + c;
          gg[static_cast<std::size_t>(c)] += go[k] * (*xhat)[k];
          gb[static_cast<std::size_t>(c)] += go[k];
        }
    }
    if (g.requires_grad(xi)) {
      auto& gx = g.grad(xi);
      fvec dxh(static_cast<std::size_t>(n));
      for (int r = 0; r < m; ++r) {
        double s1 = 0.0, s2 = 0.0;
        for (int c = 0; c < n; ++c) {
          const std::size_t k = static_cast<std::size_t>(r) * n + c;
          dxh[static_cast<std::size_t>(c)] = go[k] * gv[c];
          s1 += dxh[static_cast<std::size_t>(c)];
          s2 += static_cast<double>(dxh[static_cast<std::size_t>(c)]) * (*xhat)[k];
        }
        const float m1 = static_cast<float>(s1 / n), m2 = static_cast<float>(s2 / n);
        const float rs = (*rstd)[static_cast<std::size_t>(r)];
        for (int c = 0; c < n; ++c) {
          const std::size_t k = static_cast<std::size_t>(r) * n + c;
          gx[k] += rs * (dxh[static_cast<std::size_t>(c)] - m1 - (*xhat)[k] * m2);
        }
      }
    }
  });
}

/// Scales each row to unit L2 norm. Throws when a row norm is below `min_norm`.
inline Var l2_normalize_rows(const Var& x, float min_norm = 1e-12f) {
  const Tensor& xv = x.value();
  const int m = xv.rows(), n = xv.cols();
  auto norms = std::make_shared<fvec>(static_cast<std::size_t>(m));
  Tensor out(xv.shape());
  for (int r = 0; r < m; ++r) {
    double s = 0.0;
    for (int c = 0; c < n; ++c) s += static_cast<double>(xv.row(r)[c]) * xv.row(r)[c];
    const auto nr = static_cast<float>(std::sqrt(s));
    if (!(nr >= min_norm)) throw std::domain_error("degenerate embedding: vector norm below 1e-12");
    (*norms)[static_cast<std::size_t>(r)] = nr;
    for (int c = 0; c < n; ++c) out.row(r)[c] = xv.row(r)[c] / nr;
  }
  const int xi = x.id();
  return x.graph()->record(std::move(out), std::span<const Var>(&x, 1), [xi, m, n, norms](Graph& g, int self) {
    const auto& go = g.grad(self);
    const Tensor& y = g.value(self);
    auto& gx = g.grad(xi);
    for (int r = 0; r < m; ++r) {
      double dot = 0.0;
      for (int c = 0; c < n; ++c) dot += static_cast<double>(go[static_cast<std::size_t>(r) * n + c]) * y.row(r)[c];
      const float nr = (*norms)[static_cast<std::size_t>(r)];
      for (int c = 0; c < n; ++c) {
        const std::size_t k = static_cast<std::size_t>(r) * n + c;
        gx[k] += (go[k] - static_cast<float>(dot) * y.row(r)[c]) / nr;
      }
    }
  });
}

/// Row-wise dot products: [m x n], [m x n] -> [m x 1].
inline Var row_dot(const Var& a, const Var& b) {
  detail::check_same(a, b, "row_dot");
  const int m = a.value().rows(), n = a.value().cols();
  Tensor out = Tensor::matrix(m, 1);
  for (int r = 0; r < m; ++r) {
    double s = 0.0;
    for (int c = 0; c < n; ++c) s += static_cast<double>(a.value().row(r)[c]) * b.value().row(r)[c];
    out[r] = static_cast<float>(s);
  }
  const int ai = a.id(), bi = b.id();
  const Var in[] = {a, b};
  return a.graph()->record(std::move(out), in, [ai, bi, m, n](Graph& g, int self) {
    const auto& go = g.grad(self);
    const Tensor& av = g.value(ai);
    const Tensor& bv = g.value(bi);
    for (int r = 0; r < m; ++r) {
      const float gr = go[static_cast<std::size_t>(r)];
      if (g.requires_grad(ai)) {
        auto& ga = g.grad(ai);
        for (int c = 0; c < n; ++c) ga[static_cast<std::size_t>(r) * n + c] += gr * bv.row(r)[c];
      }
      if (g.requires_grad(bi)) {
        auto& gb = g.grad(bi);
        for (int c = 0; c < n; ++c) gb[static_cast<std::size_t>(r) * n + c] += gr * av.row(r)[c];
      }
    }
  });
}

/// Cosine similarity of two equally shaped tensors viewed as flat vectors.
/// Throws when either norm is below 1e-12.
inline Var cosine_similarity(const Var& a, const Var& b) {
  detail::check_same(a, b, "cosine_similarity");
  const auto n = static_cast<int>(a.value().size());
  Var fa = reshape(a, {1, n});
  Var fb = reshape(b, {1, n});
  return reshape(row_dot(l2_normalize_rows(fa), l2_normalize_rows(fb)), {1});
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled-dot-product self-attention over packed sequences.
///
/// q, k, v are [N x D] with N = sum(segments); attention never crosses a segment
/// boundary. With `causal`, row i of a segment attends to rows <= i only.
/// Heads split the column axis into equal blocks.
inline Var attention(const Var& q, const Var& k, const Var& v, int heads, const std::vector<int>& segments,
                     bool causal) {
  detail::check_same(q, k, "attention");
  detail::check_same(q, v, "attention");
  const int N = q.value().rows(), D = q.value().cols();
  SSVC_CHECK(heads >= 1 && D % heads == 0, "attention: dim ", D, " not divisible by heads ", heads);
  int total = 0;
  for (int s : segments) total += s;
  SSVC_CHECK(total == N, "attention: segments sum ", total, " != rows ", N);
  const int dh = D / heads;
  const float sc = 1.0f / std::sqrt(static_cast<float>(dh));

  // Softmax probabilities per (segment, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<fvec>>();
  Tensor out = Tensor::matrix(N, D);
  fvec qh, kh, vh, oh;
  auto gather = [&](const Tensor& src, int off, int len, int h, fvec& dst) {
    dst.resize(static_cast<std::size_t>(len) * dh);
    for (int i = 0; i < len; ++i)
      std::copy(src.row(off + i) + h * dh, src.row(off + i) + (h + 1) * dh, dst.data() + static_cast<std::size_t>(i) * dh);
  };
  int off = 0;
  for (int len : segments) {
    for (int h = 0; h < heads; ++h) {
      gather(q.value(), off, len, h, qh);
      gather(k.value(), off, len, h, kh);
      gather(v.value(), off, len, h, vh);
      fvec p(static_cast<std::size_t>(len) * len);
      kernel::gemm_nt(qh.data(), kh.data(), p.data(), len, len, dh, false);
      for (int i = 0; i < len; ++i) {
        float* row = p.data() + static_cast<std::size_t>(i) * len;
        const int lim = causal ? i + 1 : len;
        Eigen::Map<Eigen::ArrayXf> r(row, lim);
        r = (r * sc - r.maxCoeff() * sc).exp();
        r *= static_cast<float>(1.0 / r.cast<double>().sum());
        for (int j = lim; j < len; ++j) row[j] = 0.0f;
      }
      oh.assign(static_cast<std::size_t>(len) * dh, 0.0f);
      kernel::gemm_nn(p.data(), vh.data(), oh.data(), len, dh, len, false);
      for (int i = 0; i < len; ++i)
        std::copy(oh.data() + static_cast<std::size_t>(i) * dh, oh.data() + static_cast<std::size_t>(i + 1) * dh,
                  out.row(off + i) + h * dh);
      probs->push_back(std::move(p));
    }
    off += len;
  }

  const int qi = q.id(), ki = k.id(), vi = v.id();
  const Var in[] = {q, k, v};
  return q.graph()->record(std::move(out), in, [qi, ki, vi, heads, dh, D, sc, segments, probs](Graph& g, int self) {
    const auto& go = g.grad(self);
    const Tensor& qv = g.value(qi);
    const Tensor& kv = g.value(ki);
    const Tensor& vv = g.value(vi);
    auto& gq = g.grad(qi);
    auto& gk = g.grad(ki);
    auto& gv = g.grad(vi);
    fvec qh, kh, vh, doh, dp, ds, tmp;
    auto gather = [&](const float* src, int off, int len, int h, fvec& dst) {
      dst.resize(static_cast<std::size_t>(len) * dh);
      for (int i = 0; i < len; ++i)
        std::copy(src + static_cast<std::size_t>(off + i) * D + h * dh, src + static_cast<std::size_t>(off + i) * D + (h + 1) * dh,
                  dst.data() + static_cast<std::size_t>(i) * dh);
    };
    auto scatter = [&](fvec& dst, int off, int len, int h, const fvec& src) {
      for (int i = 0; i < len; ++i)
        for (int c = 0; c < dh; ++c)
          dst[static_cast<std::size_t>(off + i) * D + h * dh + c] += src[static_cast<std::size_t>(i) * dh + c];
    };
    int off = 0;
    std::size_t pi = 0;
    for (int len : segments) {
      for (int h = 0; h < heads; ++h, ++pi) {
        const auto& p = (*probs)[pi];
        gather(qv.data(), off, len, h, qh);
        gather(kv.data(), off, len, h, kh);
        gather(vv.data(), off, len, h, vh);
        gather(go.data(), off, len, h, doh);
        dp.assign(static_cast<std::size_t>(len) * len, 0.0f);
        kernel::gemm_nt(doh.data(), vh.data(), dp.data(), len, len, dh, false);
        tmp.assign(static_cast<std::size_t>(len) * dh, 0.0f);
        kernel::gemm_tn(p.data(), doh.data(), tmp.data(), len, dh, len, false);
        scatter(gv, off, len, h, tmp);
        ds.assign(static_cast<std::size_t>(len) * len, 0.0f);
        for (int i = 0; i < len; ++i) {
          const std::size_t b = static_cast<std::size_t>(i) * len;
          double dot = 0.0;
          for (int j = 0; j < len; ++j) dot += static_cast<double>(dp[b + j]) * p[b + j];
          for (int j = 0; j < len; ++j) ds[b + j] = p[b + j] * (dp[b + j] - static_cast<float>(dot)) * sc;
        }
        tmp.assign(static_cast<std::size_t>(len) * dh, 0.0f);
        kernel::gemm_nn(ds.data(), kh.data(), tmp.data(), len, dh, len, false);
        scatter(gq, off, len, h, tmp);
        tmp.assign(static_cast<std::size_t>(len) * dh, 0.0f);
        kernel::gemm_tn(ds.data(), qh.data(), tmp.data(), len, dh, len, false);
        scatter(gk, off, len, h, tmp);
      }
      off += len;
    }
  });
}

}  // namespace ssvc::ad
