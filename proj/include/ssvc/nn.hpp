#pragma once

// Named parameter sets and the few layer types the models are built from.

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ssvc/autodiff.hpp"
#include "ssvc/rng.hpp"

namespace ssvc::nn {

using ad::Parameter;
using ad::Var;

/// Insertion-ordered set of named parameters. Order is stable, so optimizer
/// state and checkpoints line up across runs.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& o) { *this = o; }
  ParameterSet& operator=(const ParameterSet& o) {
    if (this == &o) return *this;
    params_.clear();
    index_.clear();
    for (const auto& p : o.params_) add(p->name, p->value);
    return *this;
  }
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter& add(const std::string& name, Tensor value) {
    SSVC_CHECK(!index_.count(name), "duplicate parameter ", name);
    params_.push_back(std::make_unique<Parameter>(name, std::move(value)));
    index_[name] = params_.size() - 1;
    return *params_.back();
  }

  [[nodiscard]] bool has(const std::string& name) const { return index_.count(name) != 0; }

  Parameter& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError(cat("missing parameter '", name, "'"));
    return *params_[it->second];
  }
  [[nodiscard]] const Parameter& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError(cat("missing parameter '", name, "'"));
    return *params_[it->second];
  }

  [[nodiscard]] std::vector<Parameter*> all() const {
    std::vector<Parameter*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  [[nodiscard]] std::vector<Parameter*> with_prefix(const std::string& prefix) const {
    std::vector<Parameter*> out;
    for (const auto& p : params_)
      if (p->name.compare(0, prefix.size(), prefix) == 0) out.push_back(p.get());
    return out;
  }

  [[nodiscard]] std::size_t size() const { return params_.size(); }
  [[nodiscard]] std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Graph plus parameter source for one forward pass. With track = false the
/// parameters enter the graph as constants and receive no gradient.
struct Ctx {
  ad::Graph& g;
  ParameterSet& ps;
  bool track = true;

  Var p(const std::string& name) const { return g.param(ps.get(name), track); }
  [[nodiscard]] Ctx frozen() const { return Ctx{g, ps, false}; }
};

inline Tensor init_normal(Rng& rng, Shape s, double sd) {
  const auto n = static_cast<int>(shape_size(s));
  return Tensor(std::move(s), rng.normal_vector(n, sd));
}

inline void add_linear(ParameterSet& ps, Rng& rng, const std::string& name, int in, int out, bool bias = true,
                       double gain = 1.0) {
  ps.add(name + ".w", init_normal(rng, {in, out}, gain / std::sqrt(static_cast<double>(in))));
  if (bias) ps.add(name + ".b", Tensor({out}));
}

inline Var linear(const Ctx& c, const std::string& name, const Var& x) {
  Var y = ad::matmul(x, c.p(name + ".w"));
  if (c.ps.has(name + ".b")) y = ad::add_row(y, c.p(name + ".b"));
  return y;
}

inline void add_layer_norm(ParameterSet& ps, const std::string& name, int dim) {
  ps.add(name + ".g", Tensor({dim}, 1.0f));
  ps.add(name + ".b", Tensor({dim}));
}

inline Var layer_norm(const Ctx& c, const std::string& name, const Var& x) {
  return ad::layer_norm(x, c.p(name + ".g"), c.p(name + ".b"));
}

struct BlockShape {
  int dim = 64;
  int ff = 128;
  int heads = 2;
};

/// Pre-LN transformer block: x + attn(ln(x)), then x + ff(ln(x)).
inline void add_block(ParameterSet& ps, Rng& rng, const std::string& name, BlockShape s, int depth) {
  SSVC_CHECK(s.dim % s.heads == 0, "model dim ", s.dim, " not divisible by heads ", s.heads);
  const double out_gain = 1.0 / std::sqrt(2.0 * depth);
  add_layer_norm(ps, name + ".ln1", s.dim);
  add_linear(ps, rng, name + ".q", s.dim, s.dim, false);
  add_linear(ps, rng, name + ".k", s.dim, s.dim, false);
  add_linear(ps, rng, name + ".v", s.dim, s.dim, false);
  add_linear(ps, rng, name + ".o", s.dim, s.dim, true, out_gain);
  add_layer_norm(ps, name + ".ln2", s.dim);
  add_linear(ps, rng, name + ".ff1", s.dim, s.ff);
  add_linear(ps, rng, name + ".ff2", s.ff, s.dim, true, out_gain);
}

inline Var block(const Ctx& c, const std::string& name, const Var& x, int heads, const std::vector<int>& segments,
                 bool causal) {
  Var h = layer_norm(c, name + ".ln1", x);
  Var a = ad::attention(linear(c, name + ".q", h), linear(c, name + ".k", h), linear(c, name + ".v", h), heads,
                        segments, causal);
  Var x1 = ad::add(x, linear(c, name + ".o", a));
  Var f = linear(c, name + ".ff2", ad::gelu(linear(c, name + ".ff1", layer_norm(c, name + ".ln2", x1))));
  return ad::add(x1, f);
}

}  // namespace ssvc::nn
