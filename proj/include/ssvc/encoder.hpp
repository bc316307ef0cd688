#pragma once

// Frozen multi-layer frame encoder standing in for a pretrained SSL model.
//
// Layer 0 is a linear projection of the input frames. Each later layer applies
// a fixed linear map, tanh and a depthwise width-3 temporal convolution; from
// layer `norm_from` on, the result is instance-normalized over time, which
// removes per-utterance (stationary) statistics.

#include <cmath>
#include <cstdint>
#include <vector>

#include "ssvc/rng.hpp"
#include "ssvc/synth.hpp"
#include "ssvc/tensor.hpp"

namespace ssvc::encoder {

struct EncoderConfig {
  int layers = 6;
  int dim = 32;
  int input_dim = 24;
  int norm_from = 1;
  float gain = 0.8f;
  std::uint64_t seed = 0x55C0DEC;
};

/// L hidden-state matrices, each T x D.
struct LayerStack {
  std::vector<Tensor> hidden;

  [[nodiscard]] int layers() const { return static_cast<int>(hidden.size()); }
  [[nodiscard]] int length() const { return hidden.empty() ? 0 : hidden[0].rows(); }
  [[nodiscard]] int dim() const { return hidden.empty() ? 0 : hidden[0].cols(); }
};

class FrozenEncoder {
 public:
  explicit FrozenEncoder(EncoderConfig cfg = {}) : cfg_(cfg) {
    SSVC_CHECK(cfg.layers >= 1 && cfg.dim >= 1 && cfg.input_dim >= 1, "invalid encoder config");
    SSVC_CHECK(cfg.norm_from >= 1 && cfg.norm_from <= cfg.layers, "norm_from must be in [1, layers]");
    Rng rng(derive_seed(cfg.seed, 0xE4C0DE));
    proj_ = Tensor({cfg.input_dim, cfg.dim}, rng.normal_vector(cfg.input_dim * cfg.dim, 1.0 / std::sqrt(cfg.input_dim)));
    for (int l = 1; l < cfg.layers; ++l) {
      maps_.emplace_back(Shape{cfg.dim, cfg.dim},
                         rng.normal_vector(cfg.dim * cfg.dim, cfg.gain / std::sqrt(static_cast<double>(cfg.dim))));
      Tensor k({3, cfg.dim});
      for (int d = 0; d < cfg.dim; ++d) {
        k.at(0, d) = static_cast<float>(0.25 + 0.1 * rng.normal());
        k.at(1, d) = static_cast<float>(0.5 + 0.1 * rng.normal());
        k.at(2, d) = static_cast<float>(0.25 + 0.1 * rng.normal());
      }
      kernels_.push_back(std::move(k));
    }
  }

  [[nodiscard]] const EncoderConfig& config() const { return cfg_; }

  [[nodiscard]] LayerStack encode_layers(const Tensor& frames) const {
    if (frames.rank() != 2 || frames.cols() != cfg_.input_dim)
      throw DataError(cat("encoder expects T x ", cfg_.input_dim, " frames, got ", shape_str(frames.shape())));
    const int T = frames.rows(), D = cfg_.dim;
    LayerStack out;
    out.hidden.push_back(matmul_values(frames, proj_));
    for (int l = 1; l < cfg_.layers; ++l) {
      Tensor pre = matmul_values(out.hidden.back(), maps_[static_cast<std::size_t>(l - 1)]);
      for (float& v : pre.values()) v = std::tanh(v);
      const Tensor& k = kernels_[static_cast<std::size_t>(l - 1)];
      Tensor h = Tensor::matrix(T, D);
      for (int t = 0; t < T; ++t)
        for (int d = 0; d < D; ++d) {
          float acc = k.at(1, d) * pre.at(t, d);
          if (t > 0) acc += k.at(0, d) * pre.at(t - 1, d);
          if (t + 1 < T) acc += k.at(2, d) * pre.at(t + 1, d);
          h.at(t, d) = acc;
        }
      if (l >= cfg_.norm_from) instance_normalize(h);
      out.hidden.push_back(std::move(h));
    }
    return out;
  }

  [[nodiscard]] LayerStack encode_layers(const synth::FeatureSequence& f) const { return encode_layers(f.frames); }

  /// Zero mean and unit variance over time per dimension (eps 1e-5).
  static void instance_normalize(Tensor& h) {
    const int T = h.rows(), D = h.cols();
    if (T == 0) return;
    for (int d = 0; d < D; ++d) {
      double m = 0.0;
      for (int t = 0; t < T; ++t) m += h.at(t, d);
      m /= T;
      double v = 0.0;
      for (int t = 0; t < T; ++t) v += (h.at(t, d) - m) * (h.at(t, d) - m);
      v /= T;
      const double rs = 1.0 / std::sqrt(v + 1e-5);
      for (int t = 0; t < T; ++t) h.at(t, d) = static_cast<float>((h.at(t, d) - m) * rs);
    }
  }

 private:
  EncoderConfig cfg_;
  Tensor proj_;
  std::vector<Tensor> maps_;
  std::vector<Tensor> kernels_;
};

}  // namespace ssvc::encoder
