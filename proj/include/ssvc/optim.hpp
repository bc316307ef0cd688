#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ssvc/autodiff.hpp"

namespace ssvc::ad {

struct AdamWConfig {
  float lr = 1e-4f;
  float beta1 = 0.8f;
  float beta2 = 0.99f;
  float weight_decay = 0.01f;
  float eps = 1e-8f;
};

/// Per-parameter moments plus the shared step counter.
struct OptimizerState {
  AdamWConfig config;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;
};

/// One AdamW update with decoupled weight decay: p <- p(1 - lr*wd) - lr * mhat / (sqrt(vhat) + eps).
/// `lr` overrides config.lr when positive (used by schedules).
inline void adamw_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, OptimizerState& st,
                       float lr = -1.0f) {
  SSVC_CHECK(params.size() == grads.size(), "adamw_step: ", params.size(), " params but ", grads.size(), " grads");
  if (st.m.empty()) {
    for (const Tensor* p : params) {
      st.m.emplace_back(p->shape());
      st.v.emplace_back(p->shape());
    }
  }
  SSVC_CHECK(st.m.size() == params.size(), "adamw_step: optimizer state holds ", st.m.size(), " moments for ",
             params.size(), " params");
  for (std::size_t i = 0; i < params.size(); ++i) {
    SSVC_CHECK(params[i]->shape() == grads[i]->shape() && params[i]->shape() == st.m[i].shape(),
               "adamw_step: shape mismatch for parameter ", i, ": ", shape_str(params[i]->shape()), " vs grad ",
               shape_str(grads[i]->shape()));
  }
  const AdamWConfig& c = st.config;
  const float rate = lr > 0.0f ? lr : c.lr;
  ++st.step;
  const double bc1 = 1.0 - std::pow(static_cast<double>(c.beta1), static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(c.beta2), static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    float* p = params[i]->data();
    const float* g = grads[i]->data();
    float* m = st.m[i].data();
    float* v = st.v[i].data();
    const std::int64_t n = params[i]->size();
    const float decay = 1.0f - rate * c.weight_decay;
    for (std::int64_t k = 0; k < n; ++k) {
      m[k] = c.beta1 * m[k] + (1.0f - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0f - c.beta2) * g[k] * g[k];
      const auto mhat = static_cast<float>(m[k] / bc1);
      const auto vhat = static_cast<float>(v[k] / bc2);
      p[k] = p[k] * decay - rate * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

/// AdamW over a fixed list of Parameters, reading their accumulated grads.
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, AdamWConfig cfg) : params_(std::move(params)) { state_.config = cfg; }

  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }

  void step(float lr = -1.0f) {
    std::vector<Tensor*> ps;
    std::vector<const Tensor*> gs;
    for (Parameter* p : params_) {
      if (p->grad.shape() != p->value.shape()) p->zero_grad();
      ps.push_back(&p->value);
      gs.push_back(&p->grad);
    }
    adamw_step(ps, gs, state_, lr);
  }

  [[nodiscard]] const OptimizerState& state() const { return state_; }
  [[nodiscard]] const std::vector<Parameter*>& params() const { return params_; }

 private:
  std::vector<Parameter*> params_;
  OptimizerState state_;
};

}  // namespace ssvc::ad
