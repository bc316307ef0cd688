#pragma once

// Central finite-difference gradient checking for graph-built functions.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ssvc/autodiff.hpp"
#include "ssvc/rng.hpp"

namespace ssvc::ad {

/// Builds an output from the given leaves. The output may have any shape; the
/// checker reduces it with a fixed random projection.
using GraphFn = std::function<Var(Graph&, const std::vector<Var>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;  // ||g_ad - g_fd|| / max(||g_ad||, ||g_fd||, floor) over all inputs jointly
  int input = -1;              // input with the largest absolute discrepancy
};

inline GradCheckResult check_gradients(const GraphFn& fn, const std::vector<Tensor>& inputs, double h = 1e-3,
                                       std::uint64_t seed = 7, double floor = 1e-3) {
  std::vector<float> proj;
  auto project = [&](const Tensor& out) {
    if (proj.empty()) {
      Rng rng(seed);
      proj = rng.normal_vector(static_cast<int>(out.size()));
    }
    double s = 0.0;
    for (std::int64_t i = 0; i < out.size(); ++i) s += static_cast<double>(out[i]) * proj[static_cast<std::size_t>(i)];
    return s;
  };

  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> leaves;
    for (const Tensor& t : inputs) leaves.push_back(g.variable(t));
    Var out = fn(g, leaves);
    project(out.value());
    Tensor w(out.shape(), std::vector<float>(proj.begin(), proj.end()));
    Var loss = sum(mul(out, g.constant(std::move(w))));
    analytic = g.gradients(loss, leaves);
  }

  auto eval = [&](const std::vector<Tensor>& xs) {
    Graph g;
    std::vector<Var> leaves;
    for (const Tensor& t : xs) leaves.push_back(g.constant(t));
    return project(fn(g, leaves).value());
  };

  GradCheckResult res;
  std::vector<Tensor> xs = inputs;
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0, worst = -1.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    double dk = 0.0;
    for (std::int64_t i = 0; i < xs[k].size(); ++i) {
      const float orig = xs[k][i];
      const auto xp = static_cast<float>(orig + h);
      const auto xm = static_cast<float>(orig - h);
      xs[k][i] = xp;
      const double fp = eval(xs);
      xs[k][i] = xm;
      const double fm = eval(xs);
      xs[k][i] = orig;
      const double fd = (fp - fm) / (static_cast<double>(xp) - xm);
      const double an = analytic[k][i];
      dk += (fd - an) * (fd - an);
      a2 += an * an;
      n2 += fd * fd;
    }
    diff2 += dk;
    if (dk > worst) worst = dk, res.input = static_cast<int>(k);
  }
  res.max_rel_error = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), floor});
  return res;
}

/// One differentiable op with a generator for random inputs.
struct OpCase {
  std::string name;
  GraphFn fn;
  std::function<std::vector<Tensor>(Rng&)> inputs;
};

namespace detail {

inline Tensor randn(Shape s, Rng& rng, double sd = 1.0) {
  const auto n = static_cast<int>(shape_size(s));
  return Tensor(std::move(s), rng.normal_vector(n, sd));
}

/// Entries bounded away from zero, for ops with a kink there.
inline Tensor away_from_zero(Shape s, Rng& rng) {
  Tensor t = randn(std::move(s), rng);
  for (float& v : t.values()) v = (v < 0 ? -0.5f : 0.5f) + v;
  return t;
}

}  // namespace detail

/// Every differentiable op of the engine. gradient_reversal and stop_gradient
/// are checked exactly elsewhere.
inline std::vector<OpCase> op_catalog() {
  using detail::randn;
  using V = std::vector<Var>;
  using T = std::vector<Tensor>;
  auto two = [](Rng& r) { return T{randn({4, 5}, r), randn({4, 5}, r)}; };
  auto one = [](Rng& r) { return T{randn({4, 5}, r)}; };
  return {
      {"add", [](Graph&, const V& v) { return add(v[0], v[1]); }, two},
      {"sub", [](Graph&, const V& v) { return sub(v[0], v[1]); }, two},
      {"mul", [](Graph&, const V& v) { return mul(v[0], v[1]); }, two},
      {"affine", [](Graph&, const V& v) { return affine(v[0], -1.7f, 0.3f); }, one},
      {"mul_scalar", [](Graph&, const V& v) { return mul_scalar(v[0], v[1]); },
       [](Rng& r) { return T{randn({4, 5}, r), randn({1}, r)}; }},
      {"add_row", [](Graph&, const V& v) { return add_row(v[0], v[1]); },
       [](Rng& r) { return T{randn({4, 5}, r), randn({5}, r)}; }},
      {"mul_row", [](Graph&, const V& v) { return mul_row(v[0], v[1]); },
       [](Rng& r) { return T{randn({4, 5}, r), randn({5}, r)}; }},
      {"tanh", [](Graph&, const V& v) { return tanh(v[0]); }, one},
      {"relu", [](Graph&, const V& v) { return relu(v[0]); }, [](Rng& r) { return T{detail::away_from_zero({4, 5}, r)}; }},
      {"gelu", [](Graph&, const V& v) { return gelu(v[0]); }, one},
      {"exp", [](Graph&, const V& v) { return exp(v[0]); }, one},
      {"square", [](Graph&, const V& v) { return square(v[0]); }, one},
      {"abs", [](Graph&, const V& v) { return abs(v[0]); }, [](Rng& r) { return T{detail::away_from_zero({4, 5}, r)}; }},
      {"sum", [](Graph&, const V& v) { return sum(v[0]); }, one},
      {"mean", [](Graph&, const V& v) { return mean(v[0]); }, one},
      {"variance", [](Graph&, const V& v) { return variance(v[0]); }, one},
      {"mean_rows", [](Graph&, const V& v) { return mean_rows(v[0]); }, one},
      {"mse", [](Graph&, const V& v) { return mse(v[0], v[1]); }, two},
      {"matmul", [](Graph&, const V& v) { return matmul(v[0], v[1]); },
       [](Rng& r) { return T{randn({4, 5}, r), randn({5, 3}, r)}; }},
      {"transpose", [](Graph&, const V& v) { return transpose(v[0]); }, one},
      {"reshape", [](Graph&, const V& v) { return tanh(reshape(v[0], {10, 2})); }, one},
      {"concat_cols", [](Graph&, const V& v) { return concat_cols({v[0], v[1]}); }, two},
      {"concat_rows", [](Graph&, const V& v) { return concat_rows({v[0], v[1]}); }, two},
      {"slice_rows", [](Graph&, const V& v) { return slice_rows(v[0], 1, 2); }, one},
      {"gather_rows", [](Graph&, const V& v) { return gather_rows(v[0], {3, 0, 3, 1, 1}); }, one},
      {"embedding", [](Graph&, const V& v) { return embedding(v[0], {3, 0, 3, 1}); }, one},
      {"temporal_context", [](Graph&, const V& v) { return temporal_context(v[0], 3, {1, 3}); }, one},
      {"softmax_rows", [](Graph&, const V& v) { return softmax(v[0], 1); }, one},
      {"softmax_cols", [](Graph&, const V& v) { return softmax(v[0], 0); }, one},
      {"cross_entropy", [](Graph&, const V& v) { return cross_entropy_logits(v[0], {1, 4, -1, 2}); }, one},
      {"layer_norm", [](Graph&, const V& v) { return layer_norm(v[0], v[1], v[2]); },
       [](Rng& r) { return T{randn({4, 5}, r), randn({5}, r), randn({5}, r)}; }},
      {"l2_normalize_rows", [](Graph&, const V& v) { return l2_normalize_rows(v[0]); }, one},
      {"row_dot", [](Graph&, const V& v) { return row_dot(v[0], v[1]); }, two},
      {"cosine_similarity", [](Graph&, const V& v) { return cosine_similarity(v[0], v[1]); }, two},
      {"attention_causal", [](Graph&, const V& v) { return attention(v[0], v[1], v[2], 1, {4}, true); },
       [](Rng& r) { return T{randn({4, 5}, r), randn({4, 5}, r), randn({4, 5}, r)}; }},
      {"attention_packed", [](Graph&, const V& v) { return attention(v[0], v[1], v[2], 2, {2, 4}, false); },
       [](Rng& r) { return T{randn({6, 4}, r), randn({6, 4}, r), randn({6, 4}, r)}; }},
  };
}

}  // namespace ssvc::ad
