#pragma once

// Speaker-disentangling codec over frozen encoder layers.
//
// speaker branch:  softmax(W_s)-weighted layer mix -> CLS transformer -> s
// content branch:  (1 - softmax(W_s))-weighted layer mix -> C -> RVQ -> C_hat
// decoder:         [C_hat, s broadcast over frames] -> temporal-conv MLP -> frames

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "ssvc/autodiff.hpp"
#include "ssvc/checkpoint.hpp"
#include "ssvc/corpus.hpp"
#include "ssvc/encoder.hpp"
#include "ssvc/nn.hpp"
#include "ssvc/optim.hpp"
#include "ssvc/rng.hpp"
#include "ssvc/synth.hpp"

namespace ssvc::codec {

using ad::Graph;
using ad::Var;
using nn::Ctx;

// ---------------------------------------------------------------------------
// Loss weights

struct LossWeights {
  double recon = 1.0 / 301.0;
  double contrastive = 100.0 / 301.0;
  double disentangle = 100.0 / 301.0;
  double commitment = 100.0 / 301.0;

  [[nodiscard]] double sum() const { return recon + contrastive + disentangle + commitment; }

  /// Rescaled to sum to 1. Applied to user overrides.
  [[nodiscard]] LossWeights normalized() const {
    if (recon < 0 || contrastive < 0 || disentangle < 0 || commitment < 0)
      throw UsageError("loss weights must be nonnegative");
    const double s = sum();
    if (!(s > 0)) throw UsageError("loss weights must not all be zero");
    return {recon / s, contrastive / s, disentangle / s, commitment / s};
  }
};

struct LossBreakdown {
  double recon = 0;
  double contrastive = 0;
  double disentangle = 0;  // d = 1 - |cos(s_s, s_ns)|
  double commitment = 0;
  double total = 0;

  /// total = l0 recon + l1 contrastive - l2 d + l3 commitment
  static double compose(const LossWeights& w, double recon, double contrastive, double d, double commitment) {
    return w.recon * recon + w.contrastive * contrastive - w.disentangle * d + w.commitment * commitment;
  }
};

// ---------------------------------------------------------------------------
// Layer weights

enum class Branch { Speaker, NonSpeaker };

/// Mixture weights of the given branch: softmax(W_s) or 1 - softmax(W_s).
inline std::vector<double> branch_weights(std::span<const float> ws, Branch b) {
  SSVC_CHECK(!ws.empty(), "empty layer weights");
  const double mx = *std::max_element(ws.begin(), ws.end());
  std::vector<double> w(ws.size());
  double z = 0.0;
  for (std::size_t i = 0; i < ws.size(); ++i) z += (w[i] = std::exp(ws[i] - mx));
  for (double& v : w) v = b == Branch::Speaker ? v / z : 1.0 - v / z;
  return w;
}

/// Weighted sum of layers (values only).
inline Tensor layer_mix(const encoder::LayerStack& stack, std::span<const float> ws, Branch b) {
  if (stack.layers() != static_cast<int>(ws.size()))
    throw DataError(cat("layer_mix: stack has ", stack.layers(), " layers but ", ws.size(), " weights"));
  const auto w = branch_weights(ws, b);
  Tensor out(stack.hidden[0].shape());
  for (int l = 0; l < stack.layers(); ++l) {
    const Tensor& h = stack.hidden[static_cast<std::size_t>(l)];
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] += static_cast<float>(w[static_cast<std::size_t>(l)] * h[i]);
  }
  return out;
}

/// Differentiable layer mix over layer nodes of equal shape.
inline Var layer_mix(const std::vector<Var>& layers, const Var& ws, Branch b) {
  const int L = static_cast<int>(layers.size());
  SSVC_CHECK(L >= 1 && ws.value().size() == L, "layer_mix: ", L, " layers but ", ws.value().size(), " weights");
  Var w = ad::softmax(ws);
  if (b == Branch::NonSpeaker) w = ad::affine(w, -1.0f, 1.0f);
  Var col = ad::reshape(w, {L, 1});
  Var acc = ad::mul_scalar(layers[0], ad::slice_rows(col, 0, 1));
  for (int l = 1; l < L; ++l) acc = ad::add(acc, ad::mul_scalar(layers[static_cast<std::size_t>(l)], ad::slice_rows(col, l, 1)));
  return acc;
}

// ---------------------------------------------------------------------------
// Contrastive and disentanglement terms

/// Symmetric in-batch cross entropy on S = A B^T * inv_temperature with the
/// positives on the diagonal.
inline Var contrastive_loss(const Var& a, const Var& b, const Var& inv_temperature) {
  const int N = a.value().rows();
  if (N < 2) throw std::invalid_argument("contrastive_loss needs at least 2 pairs (no negatives otherwise)");
  SSVC_CHECK(a.shape() == b.shape(), "contrastive_loss: shape mismatch");
  Var s = ad::mul_scalar(ad::matmul(a, ad::transpose(b)), inv_temperature);
  std::vector<int> diag(static_cast<std::size_t>(N));
  std::iota(diag.begin(), diag.end(), 0);
  return ad::scale(ad::add(ad::cross_entropy_logits(s, diag), ad::cross_entropy_logits(ad::transpose(s), diag)), 0.5f);
}

inline double contrastive_loss(const Tensor& a, const Tensor& b, double temperature) {
  SSVC_CHECK(temperature > 0, "temperature must be positive");
  Graph g;
  return contrastive_loss(g.constant(a), g.constant(b), g.constant(Tensor::scalar(static_cast<float>(1.0 / temperature))))
      .item();
}

/// Mean over rows of 1 - |cos(s_s, s_ns)|.
inline Var disentangle_term(const Var& s_s, const Var& s_ns) {
  Var c = ad::row_dot(ad::l2_normalize_rows(s_s), ad::l2_normalize_rows(s_ns));
  return ad::affine(ad::mean(ad::abs(c)), -1.0f, 1.0f);
}

inline double disentangle_term(std::span<const float> s_s, std::span<const float> s_ns) {
  SSVC_CHECK(s_s.size() == s_ns.size(), "disentangle_term: size mismatch");
  Graph g;
  const int n = static_cast<int>(s_s.size());
  Var a = g.constant(Tensor({1, n}, std::vector<float>(s_s.begin(), s_s.end())));
  Var b = g.constant(Tensor({1, n}, std::vector<float>(s_ns.begin(), s_ns.end())));
  try {
    return disentangle_term(a, b).item();
  } catch (const std::domain_error&) {
    throw DataError("disentangle_term: degenerate zero embedding");
  }
}

// ---------------------------------------------------------------------------
// Residual vector quantization

struct CodeGrid {
  int frames = 0;
  int nq = 0;
  std::vector<int> idx;  // row-major frames x nq

  CodeGrid() = default;
  CodeGrid(int t, int q) : frames(t), nq(q), idx(static_cast<std::size_t>(t) * q, 0) {}

  int& at(int t, int i) { return idx[static_cast<std::size_t>(t) * nq + i]; }
  [[nodiscard]] int at(int t, int i) const { return idx[static_cast<std::size_t>(t) * nq + i]; }
  friend bool operator==(const CodeGrid&, const CodeGrid&) = default;

  [[nodiscard]] Tensor to_tensor() const {
    Tensor t({frames, nq});
    for (std::size_t i = 0; i < idx.size(); ++i) t[static_cast<std::int64_t>(i)] = static_cast<float>(idx[i]);
    return t;
  }
  static CodeGrid from_tensor(const Tensor& t) {
    if (t.rank() != 2) throw DataError(cat("code grid must be rank 2, got ", shape_str(t.shape())));
    CodeGrid g(t.dim(0), t.dim(1));
    for (std::size_t i = 0; i < g.idx.size(); ++i) {
      const float v = t[static_cast<std::int64_t>(i)];
      if (v != std::floor(v) || v < 0) throw DataError(cat("code grid holds non-index value ", v));
      g.idx[i] = static_cast<int>(v);
    }
    return g;
  }
};

struct RVQCodebooks {
  std::vector<Tensor> books;      // nq x (K x D)
  std::vector<Tensor> ema_count;  // nq x (K)
  std::vector<Tensor> ema_sum;    // nq x (K x D)
  std::vector<std::vector<int>> low_steps;
  bool initialized = false;

  RVQCodebooks() = default;
  RVQCodebooks(int nq, int k, int dim) {
    SSVC_CHECK(nq >= 1 && k >= 1 && dim >= 1, "invalid codebook shape");
    for (int i = 0; i < nq; ++i) {
      books.emplace_back(Shape{k, dim});
      ema_count.emplace_back(Shape{k}, 1.0f);
      ema_sum.emplace_back(Shape{k, dim});
      low_steps.emplace_back(static_cast<std::size_t>(k), 0);
    }
  }

  [[nodiscard]] int nq() const { return static_cast<int>(books.size()); }
  [[nodiscard]] int size() const { return books.empty() ? 0 : books[0].rows(); }
  [[nodiscard]] int dim() const { return books.empty() ? 0 : books[0].cols(); }
};

struct Quantized {
  CodeGrid grid;
  Tensor chat;                   // T x D
  double commitment = 0.0;       // mean ||C - C_hat||^2 over elements
  std::vector<Tensor> residuals;  // input residual of each stage
};

/// Index of the nearest row of `book` for every row of `x` (first on ties).
inline std::vector<int> nearest_codes(const Tensor& x, const Tensor& book) {
  const int T = x.rows(), K = book.rows(), D = x.cols();
  fvec dots(static_cast<std::size_t>(T) * K);
  kernel::gemm_nt(x.data(), book.data(), dots.data(), T, K, D, false);
  fvec norms(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    double s = 0.0;
    for (int d = 0; d < D; ++d) s += static_cast<double>(book.at(k, d)) * book.at(k, d);
    norms[static_cast<std::size_t>(k)] = static_cast<float>(s);
  }
  std::vector<int> out(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    const float* dr = dots.data() + static_cast<std::size_t>(t) * K;
    int best = 0;
    float bd = std::numeric_limits<float>::infinity();
    for (int k = 0; k < K; ++k) {
      const float dist = norms[static_cast<std::size_t>(k)] - 2.0f * dr[k];
      if (dist < bd) bd = dist, best = k;
    }
    // Exact-distance tie break keeps results independent of the dot-product rounding.
    double exact_best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
      const float dist = norms[static_cast<std::size_t>(k)] - 2.0f * dr[k];
      if (dist > bd + 1e-4f * (1.0f + std::fabs(bd))) continue;
      double e = 0.0;
      for (int d = 0; d < D; ++d) {
        const double diff = static_cast<double>(x.at(t, d)) - book.at(k, d);
        e += diff * diff;
      }
      if (e < exact_best) exact_best = e, best = k;
    }
    out[static_cast<std::size_t>(t)] = best;
  }
  return out;
}

inline Quantized rvq_quantize(const Tensor& c, const RVQCodebooks& books) {
  if (c.rank() != 2 || c.cols() != books.dim())
    throw DataError(cat("rvq_quantize: features of width ", c.cols(), " but codebooks of width ", books.dim()));
  const int T = c.rows(), D = c.cols();
  Quantized q;
  q.grid = CodeGrid(T, books.nq());
  q.chat = Tensor(c.shape());
  Tensor resid = c;
  for (int i = 0; i < books.nq(); ++i) {
    q.residuals.push_back(resid);
    const Tensor& book = books.books[static_cast<std::size_t>(i)];
    const auto idx = nearest_codes(resid, book);
    for (int t = 0; t < T; ++t) {
      const int k = idx[static_cast<std::size_t>(t)];
      q.grid.at(t, i) = k;
      for (int d = 0; d < D; ++d) {
        q.chat.at(t, d) += book.at(k, d);
        resid.at(t, d) -= book.at(k, d);
      }
    }
  }
  double s = 0.0;
  for (std::int64_t i = 0; i < c.size(); ++i) s += (static_cast<double>(c[i]) - q.chat[i]) * (static_cast<double>(c[i]) - q.chat[i]);
  q.commitment = c.size() ? s / static_cast<double>(c.size()) : 0.0;
  return q;
}

inline Tensor rvq_dequantize(const CodeGrid& grid, const RVQCodebooks& books) {
  if (grid.nq != books.nq()) throw DataError(cat("code grid has ", grid.nq, " codebooks, model has ", books.nq()));
  const int D = books.dim(), K = books.size();
  Tensor out = Tensor::matrix(grid.frames, D);
  for (int t = 0; t < grid.frames; ++t)
    for (int i = 0; i < grid.nq; ++i) {
      const int k = grid.at(t, i);
      if (k < 0 || k >= K) throw DataError(cat("code index ", k, " outside [0,", K, ") at frame ", t, " codebook ", i));
      const Tensor& book = books.books[static_cast<std::size_t>(i)];
      for (int d = 0; d < D; ++d) out.at(t, d) += book.at(k, d);
    }
  return out;
}

/// Data-dependent initialization: each stage's codes are random residual rows.
inline void rvq_init_from_batch(RVQCodebooks& books, const Tensor& c, Rng& rng) {
  const int T = c.rows(), D = c.cols(), K = books.size();
  Tensor resid = c;
  for (int i = 0; i < books.nq(); ++i) {
    Tensor& book = books.books[static_cast<std::size_t>(i)];
    std::vector<int> order(static_cast<std::size_t>(T));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (int k = 0; k < K; ++k) {
      const int src = k < T ? order[static_cast<std::size_t>(k)] : rng.below(T);
      for (int d = 0; d < D; ++d) book.at(k, d) = resid.at(src, d) + (k < T ? 0.0f : static_cast<float>(1e-3 * rng.normal()));
    }
    books.ema_sum[static_cast<std::size_t>(i)] = book;
    books.ema_count[static_cast<std::size_t>(i)].fill(1.0f);
    const auto idx = nearest_codes(resid, book);
    for (int t = 0; t < T; ++t)
      for (int d = 0; d < D; ++d) resid.at(t, d) -= book.at(idx[static_cast<std::size_t>(t)], d);
  }
  books.initialized = true;
}

/// EMA codebook update toward the mean of assigned residuals, then reseeding of
/// codes whose EMA count stayed below `dead_threshold` for `dead_after` steps.
/// Returns the fraction of codes used in this batch, averaged over stages.
inline double rvq_ema_update(RVQCodebooks& books, const Quantized& q, float decay, int dead_after, float dead_threshold,
                             Rng& rng) {
  const int K = books.size(), D = books.dim(), T = q.grid.frames;
  double used_frac = 0.0;
  for (int i = 0; i < books.nq(); ++i) {
    const Tensor& resid = q.residuals[static_cast<std::size_t>(i)];
    std::vector<double> n(static_cast<std::size_t>(K), 0.0);
    std::vector<double> s(static_cast<std::size_t>(K) * D, 0.0);
    for (int t = 0; t < T; ++t) {
      const int k = q.grid.at(t, i);
      n[static_cast<std::size_t>(k)] += 1.0;
      for (int d = 0; d < D; ++d) s[static_cast<std::size_t>(k) * D + d] += resid.at(t, d);
    }
    Tensor& cnt = books.ema_count[static_cast<std::size_t>(i)];
    Tensor& sum = books.ema_sum[static_cast<std::size_t>(i)];
    Tensor& book = books.books[static_cast<std::size_t>(i)];
    int used = 0;
    double total = 0.0;
    for (int k = 0; k < K; ++k) {
      used += n[static_cast<std::size_t>(k)] > 0;
      cnt[k] = static_cast<float>(decay * cnt[k] + (1.0 - decay) * n[static_cast<std::size_t>(k)]);
      total += cnt[k];
      for (int d = 0; d < D; ++d)
        sum.at(k, d) = static_cast<float>(decay * sum.at(k, d) + (1.0 - decay) * s[static_cast<std::size_t>(k) * D + d]);
    }
    used_frac += static_cast<double>(used) / K;
    constexpr double eps = 1e-5;
    for (int k = 0; k < K; ++k) {
      const double smoothed = (cnt[k] + eps) / (total + K * eps) * total;
      for (int d = 0; d < D; ++d) book.at(k, d) = static_cast<float>(sum.at(k, d) / smoothed);
    }
    auto& low = books.low_steps[static_cast<std::size_t>(i)];
    for (int k = 0; k < K; ++k) {
      if (cnt[k] >= dead_threshold) {
        low[static_cast<std::size_t>(k)] = 0;
        continue;
      }
      if (++low[static_cast<std::size_t>(k)] < dead_after || T == 0) continue;
      const int src = rng.below(T);
      for (int d = 0; d < D; ++d) {
        book.at(k, d) = resid.at(src, d);
        sum.at(k, d) = resid.at(src, d) * dead_threshold;
      }
      cnt[k] = dead_threshold;
      low[static_cast<std::size_t>(k)] = 0;
    }
  }
  return used_frac / books.nq();
}

// ---------------------------------------------------------------------------
// Model

struct CodecConfig {
  encoder::EncoderConfig encoder;
  int d_spk = 16;
  int spk_layers = 2;
  int spk_heads = 2;
  int spk_ff = 64;
  int dec_hidden = 64;
  int nq = 4;
  int codebook_size = 512;
  float ema_decay = 0.99f;
  int dead_after = 100;
  float dead_threshold = 1.0f;
  LossWeights weights;
  ad::AdamWConfig adam{1e-3f, 0.8f, 0.99f, 0.01f, 1e-8f};
  float mix_lr_scale = 10.0f;  // learning-rate multiplier for the layer-weight logits W_s
  int batch = 16;
  int chunk = 8;
  int steps = 1500;
  float temperature_init = 0.07f;
  float temperature_min = 1e-3f;
  float temperature_max = 1.0f;
  int log_every = 50;
  std::uint64_t seed = 7;
};

/// Per-layer hidden states of several utterances packed along the time axis.
struct PackedStack {
  std::vector<Tensor> layers;
  std::vector<int> segments;
};

class Codec {
 public:
  explicit Codec(CodecConfig cfg) : cfg_(std::move(cfg)), enc_(cfg_.encoder), books_(cfg_.nq, cfg_.codebook_size, cfg_.encoder.dim) {
    Rng rng(derive_seed(cfg_.seed, 0xC0DEC));
    const int D = cfg_.encoder.dim, L = cfg_.encoder.layers;
    ps_.add("mix.ws", Tensor({L}));
    ps_.add("spk.cls", nn::init_normal(rng, {1, D}, 0.5));
    for (int l = 0; l < cfg_.spk_layers; ++l)
      nn::add_block(ps_, rng, cat("spk.block", l), {D, cfg_.spk_ff, cfg_.spk_heads}, cfg_.spk_layers);
    nn::add_layer_norm(ps_, "spk.ln", D);
    nn::add_linear(ps_, rng, "spk.proj", D, cfg_.d_spk);
    ps_.add("log_tau", Tensor::scalar(std::log(cfg_.temperature_init)));
    const int H = cfg_.dec_hidden, in = D + cfg_.d_spk;
    nn::add_linear(ps_, rng, "dec.l0", 3 * in, H);
    nn::add_linear(ps_, rng, "dec.l1", 3 * H, H);
    nn::add_linear(ps_, rng, "dec.l2", 3 * H, H);
    nn::add_linear(ps_, rng, "dec.l3", H, cfg_.encoder.input_dim);
    // Untrained codebooks: small random codes so quantization is defined.
    for (auto& b : books_.books)
      for (float& v : b.values()) v = static_cast<float>(0.1 * rng.normal());
    for (int i = 0; i < books_.nq(); ++i) books_.ema_sum[static_cast<std::size_t>(i)] = books_.books[static_cast<std::size_t>(i)];
  }

  [[nodiscard]] const CodecConfig& config() const { return cfg_; }
  [[nodiscard]] const encoder::FrozenEncoder& frozen_encoder() const { return enc_; }
  nn::ParameterSet& params() { return ps_; }
  [[nodiscard]] const nn::ParameterSet& params() const { return ps_; }
  RVQCodebooks& codebooks() { return books_; }
  [[nodiscard]] const RVQCodebooks& codebooks() const { return books_; }
  [[nodiscard]] bool trained() const { return trained_; }
  void set_trained(bool t) { trained_ = t; }

  [[nodiscard]] std::span<const float> layer_logits() const { return ps_.get("mix.ws").value.values(); }
  [[nodiscard]] float temperature() const { return std::exp(ps_.get("log_tau").value[0]); }

  [[nodiscard]] PackedStack encode(const std::vector<const Tensor*>& utts) const {
    PackedStack p;
    p.layers.resize(static_cast<std::size_t>(cfg_.encoder.layers));
    std::vector<encoder::LayerStack> stacks;
    int total = 0;
    for (const Tensor* u : utts) {
      stacks.push_back(enc_.encode_layers(*u));
      p.segments.push_back(u->rows());
      total += u->rows();
    }
    const int D = cfg_.encoder.dim;
    for (int l = 0; l < cfg_.encoder.layers; ++l) {
      Tensor t = Tensor::matrix(total, D);
      float* dst = t.data();
      for (const auto& s : stacks) {
        const Tensor& h = s.hidden[static_cast<std::size_t>(l)];
        dst = std::copy(h.data(), h.data() + h.size(), dst);
      }
      p.layers[static_cast<std::size_t>(l)] = std::move(t);
    }
    return p;
  }

  static std::vector<Var> layer_nodes(Graph& g, const PackedStack& p) {
    std::vector<Var> out;
    for (const Tensor& t : p.layers) out.push_back(g.constant(t));
    return out;
  }

  /// CLS transformer over packed segments: returns one unit-norm row per segment.
  Var speaker_embed(const Ctx& c, const Var& x, const std::vector<int>& segments) {
    std::vector<Var> parts;
    std::vector<int> seg_cls, cls_rows;
    Var cls = c.p("spk.cls");
    int off = 0, row = 0;
    for (int len : segments) {
      SSVC_CHECK(len >= 1, "speaker_embed needs at least one frame");
      parts.push_back(cls);
      parts.push_back(ad::slice_rows(x, off, len));
      cls_rows.push_back(row);
      seg_cls.push_back(len + 1);
      off += len;
      row += len + 1;
    }
    Var h = ad::concat_rows(parts);
    for (int l = 0; l < cfg_.spk_layers; ++l) h = nn::block(c, cat("spk.block", l), h, cfg_.spk_heads, seg_cls, false);
    h = nn::layer_norm(c, "spk.ln", ad::gather_rows(h, cls_rows));
    return ad::l2_normalize_rows(nn::linear(c, "spk.proj", h));
  }

  /// Decoder: broadcast s over the frames of each segment, concatenate, then
  /// three width-3 temporal convolutions and a linear output layer.
  Var decode(const Ctx& c, const Var& chat, const Var& s, const std::vector<int>& segments) {
    std::vector<int> owner;
    for (std::size_t i = 0; i < segments.size(); ++i) owner.insert(owner.end(), static_cast<std::size_t>(segments[i]), static_cast<int>(i));
    Var x = ad::concat_cols({chat, ad::gather_rows(s, owner)});
    x = ad::gelu(nn::linear(c, "dec.l0", ad::temporal_context(x, 3, segments)));
    x = ad::gelu(nn::linear(c, "dec.l1", ad::temporal_context(x, 3, segments)));
    x = ad::gelu(nn::linear(c, "dec.l2", ad::temporal_context(x, 3, segments)));
    return nn::linear(c, "dec.l3", x);
  }

  // -- inference helpers (no gradient tracking) -------------------------------

  /// Speaker embedding of each utterance (rows of the result).
  Tensor speaker_embeddings(const std::vector<const Tensor*>& utts) {
    Graph g;
    Ctx c{g, ps_, false};
    const PackedStack p = encode(utts);
    Var ws = c.p("mix.ws");
    return speaker_embed(c, layer_mix(layer_nodes(g, p), ws, Branch::Speaker), p.segments).value();
  }

  /// Pre-quantization content features C (values only).
  [[nodiscard]] Tensor content_features(const Tensor& frames) const {
    return layer_mix(enc_.encode_layers(frames), layer_logits(), Branch::NonSpeaker);
  }

  [[nodiscard]] Quantized quantize(const Tensor& frames) const { return rvq_quantize(content_features(frames), books_); }

  Tensor decode_values(const Tensor& chat, std::span<const float> s) {
    Graph g;
    Ctx c{g, ps_, false};
    Tensor srow({1, static_cast<int>(s.size())}, std::vector<float>(s.begin(), s.end()));
    return decode(c, g.constant_ref(chat), g.constant(std::move(srow)), {chat.rows()}).value();
  }

  Tensor decode_grid(const CodeGrid& grid, std::span<const float> s) { return decode_values(rvq_dequantize(grid, books_), s); }

  Tensor reconstruct(const Tensor& frames) { return convert_voice(frames, frames); }

  /// Source content codes decoded with the target's speaker embedding.
  Tensor convert_voice(const Tensor& source, const Tensor& target) {
    if (!trained_) throw DataError("convert_voice: codec has no trained parameters");
    const Quantized q = quantize(source);
    const Tensor s = speaker_embeddings({&target});
    return decode_values(q.chat, s.values());
  }

  // -- checkpoint ------------------------------------------------------------

  [[nodiscard]] TensorTable to_table() const {
    TensorTable t;
    for (const auto* p : ps_.all()) t.emplace_back("param/" + p->name, p->value);
    for (int i = 0; i < books_.nq(); ++i) {
      t.emplace_back(cat("rvq/", i, "/codes"), books_.books[static_cast<std::size_t>(i)]);
      t.emplace_back(cat("rvq/", i, "/ema_count"), books_.ema_count[static_cast<std::size_t>(i)]);
      t.emplace_back(cat("rvq/", i, "/ema_sum"), books_.ema_sum[static_cast<std::size_t>(i)]);
    }
    return t;
  }

  void load_table(const TensorTable& t) {
    for (auto* p : ps_.all()) {
      const Tensor& v = find_tensor(t, "param/" + p->name);
      if (v.shape() != p->value.shape())
        throw DataError(cat("checkpoint tensor ", p->name, " has shape ", shape_str(v.shape()), ", model expects ",
                            shape_str(p->value.shape())));
      p->value = v;
    }
    for (int i = 0; i < books_.nq(); ++i) {
      auto load = [&](const std::string& n, Tensor& dst) {
        const Tensor& v = find_tensor(t, n);
        if (v.shape() != dst.shape()) throw DataError(cat("checkpoint tensor ", n, " has shape ", shape_str(v.shape())));
        dst = v;
      };
      load(cat("rvq/", i, "/codes"), books_.books[static_cast<std::size_t>(i)]);
      load(cat("rvq/", i, "/ema_count"), books_.ema_count[static_cast<std::size_t>(i)]);
      load(cat("rvq/", i, "/ema_sum"), books_.ema_sum[static_cast<std::size_t>(i)]);
    }
    books_.initialized = true;
    trained_ = true;
  }

 private:
  CodecConfig cfg_;
  encoder::FrozenEncoder enc_;
  nn::ParameterSet ps_;
  RVQCodebooks books_;
  bool trained_ = false;
};

// ---------------------------------------------------------------------------
// Composite loss and training

struct CodecBatch {
  std::vector<Tensor> full;
  std::vector<Tensor> chunk_a;
  std::vector<Tensor> chunk_b;
};

struct LossGraph {
  LossBreakdown parts;
  Var objective;  // backpropagated: l0 recon + l1 contr + l2 d(GRL path) + l3 commit
  Quantized quantized;
  double retrieval = 0.0;  // fraction of rows of A whose best match in B is the positive
};

/// Forward value `chat`, identity gradient to `c`.
inline Var straight_through(const Var& c, const Tensor& chat) {
  Tensor shift = chat;
  for (std::int64_t i = 0; i < shift.size(); ++i) shift[i] -= c.value()[i];
  return ad::add(c, c.graph()->constant(std::move(shift)));
}

inline double retrieval_accuracy(const Tensor& a, const Tensor& b) {
  const int N = a.rows(), D = a.cols();
  int ok = 0;
  for (int i = 0; i < N; ++i) {
    int best = 0;
    double bs = -1e30;
    for (int j = 0; j < N; ++j) {
      double s = 0.0;
      for (int d = 0; d < D; ++d) s += static_cast<double>(a.at(i, d)) * b.at(j, d);
      if (s > bs) bs = s, best = j;
    }
    ok += best == i;
  }
  return N ? static_cast<double>(ok) / N : 0.0;
}

inline std::vector<const Tensor*> ptrs(const std::vector<Tensor>& v) {
  std::vector<const Tensor*> out;
  for (const Tensor& t : v) out.push_back(&t);
  return out;
}

/// Builds the training graph for one batch. The disentangle term reaches only
/// W_s: s_s is detached, and s_ns is the frozen extractor applied to
/// gradient_reversal(C), so W_s moves to lower |cos(s_s, s_ns)|.
inline LossGraph total_loss(Codec& m, const CodecBatch& batch, Graph& g, const LossWeights& w) {
  if (batch.full.size() < 2) throw std::invalid_argument("total_loss needs a batch of at least 2 utterances");
  Ctx c{g, m.params(), true};
  LossGraph out;
  const PackedStack full = m.encode(ptrs(batch.full));
  const PackedStack ca = m.encode(ptrs(batch.chunk_a));
  const PackedStack cb = m.encode(ptrs(batch.chunk_b));
  Var ws = c.p("mix.ws");

  const auto full_nodes = Codec::layer_nodes(g, full);
  Var s = m.speaker_embed(c, layer_mix(full_nodes, ws, Branch::Speaker), full.segments);
  Var ea = m.speaker_embed(c, layer_mix(Codec::layer_nodes(g, ca), ws, Branch::Speaker), ca.segments);
  Var eb = m.speaker_embed(c, layer_mix(Codec::layer_nodes(g, cb), ws, Branch::Speaker), cb.segments);
  Var inv_tau = ad::exp(ad::scale(c.p("log_tau"), -1.0f));
  Var contr = contrastive_loss(ea, eb, inv_tau);
  out.retrieval = retrieval_accuracy(ea.value(), eb.value());

  Var cfeat = layer_mix(full_nodes, ws, Branch::NonSpeaker);
  out.quantized = rvq_quantize(cfeat.value(), m.codebooks());
  Var chat_st = straight_through(cfeat, out.quantized.chat);
  Var commit = ad::mse(cfeat, g.constant(out.quantized.chat));

  Tensor target = Tensor::matrix(chat_st.value().rows(), m.config().encoder.input_dim);
  {
    float* dst = target.data();
    for (const Tensor& f : batch.full) dst = std::copy(f.data(), f.data() + f.size(), dst);
  }
  Var recon = ad::mse(m.decode(c, chat_st, s, full.segments), g.constant(std::move(target)));

  Var s_ns = m.speaker_embed(c.frozen(), ad::gradient_reversal(cfeat, 1.0f), full.segments);
  Var d = disentangle_term(ad::stop_gradient(s), s_ns);

  out.parts.recon = recon.item();
  out.parts.contrastive = contr.item();
  out.parts.disentangle = d.item();
  out.parts.commitment = commit.item();
  out.parts.total = LossBreakdown::compose(w, out.parts.recon, out.parts.contrastive, out.parts.disentangle, out.parts.commitment);
  out.objective = ad::add(ad::add(ad::scale(recon, static_cast<float>(w.recon)), ad::scale(contr, static_cast<float>(w.contrastive))),
                          ad::add(ad::scale(d, static_cast<float>(w.disentangle)), ad::scale(commit, static_cast<float>(w.commitment))));
  return out;
}

struct CodecLogRecord {
  int step = 0;
  LossBreakdown parts;
  double temperature = 0;
  double utilization = 0;
  double retrieval = 0;
  std::vector<double> speaker_weights;
};

/// Samples one utterance from each of `n` distinct training speakers.
inline std::vector<int> sample_distinct_speakers(const corpus::Corpus& cp, const std::vector<std::vector<int>>& by_speaker,
                                                 int n, Rng& rng) {
  std::vector<int> spk;
  for (std::size_t s = 0; s < by_speaker.size(); ++s)
    if (!by_speaker[s].empty()) spk.push_back(static_cast<int>(s));
  if (static_cast<int>(spk.size()) < n)
    throw DataError(cat("corpus has ", spk.size(), " training speakers, fewer than the batch size ", n));
  rng.shuffle(spk);
  std::vector<int> out;
  for (int i = 0; i < n; ++i) {
    const auto& u = by_speaker[static_cast<std::size_t>(spk[static_cast<std::size_t>(i)])];
    out.push_back(u[static_cast<std::size_t>(rng.below(static_cast<int>(u.size())))]);
  }
  (void)cp;
  return out;
}

inline CodecBatch make_batch(const corpus::Corpus& cp, const std::vector<int>& utts, int chunk, Rng& rng) {
  CodecBatch b;
  for (int u : utts) {
    const auto& f = cp.features(u);
    auto [x, y] = synth::chunk_pair(f, std::min(chunk, f.length()), rng.next());
    b.full.push_back(f.frames);
    b.chunk_a.push_back(std::move(x.frames));
    b.chunk_b.push_back(std::move(y.frames));
  }
  return b;
}

inline std::vector<std::vector<int>> train_utterances_by_speaker(const corpus::Corpus& cp) {
  std::vector<std::vector<int>> by(cp.speakers.size());
  for (const auto& r : cp.records)
    if (r.train) by[static_cast<std::size_t>(r.speaker_id)].push_back(r.utt_id);
  return by;
}

/// Trains with AdamW at a constant learning rate; `log` receives a record every
/// config.log_every steps and after the last step.
inline Codec train_codec(const corpus::Corpus& cp, const CodecConfig& cfg,
                         const std::function<void(const CodecLogRecord&)>& log = {}) {
  if (cp.records.empty()) throw DataError("train_codec: empty corpus");
  const LossWeights w = cfg.weights.normalized();
  Codec m(cfg);
  const auto by_speaker = train_utterances_by_speaker(cp);
  Rng rng(derive_seed(cfg.seed, 0x7EA1));
  std::vector<ad::Parameter*> rest;
  for (auto* p : m.params().all())
    if (p->name != "mix.ws") rest.push_back(p);
  ad::AdamW opt(rest, cfg.adam);
  ad::AdamWConfig mix_cfg = cfg.adam;
  mix_cfg.lr *= cfg.mix_lr_scale;
  mix_cfg.weight_decay = 0.0f;
  ad::AdamW mix_opt({&m.params().get("mix.ws")}, mix_cfg);
  const float lo = std::log(cfg.temperature_min), hi = std::log(cfg.temperature_max);
  for (int step = 0; step < cfg.steps; ++step) {
    const auto utts = sample_distinct_speakers(cp, by_speaker, cfg.batch, rng);
    const CodecBatch batch = make_batch(cp, utts, cfg.chunk, rng);
    if (!m.codebooks().initialized) {
      std::vector<float> all;
      for (const Tensor& f : batch.full) {
        const Tensor cf = m.content_features(f);
        all.insert(all.end(), cf.values().begin(), cf.values().end());
      }
      const int rows = static_cast<int>(all.size()) / cfg.encoder.dim;
      const Tensor c0({rows, cfg.encoder.dim}, std::move(all));
      rvq_init_from_batch(m.codebooks(), c0, rng);
    }
    Graph g;
    opt.zero_grad();
    mix_opt.zero_grad();
    LossGraph lg = total_loss(m, batch, g, w);
    g.backward(lg.objective);
    opt.step();
    mix_opt.step();
    float& lt = m.params().get("log_tau").value[0];
    lt = std::clamp(lt, lo, hi);
    const double util = rvq_ema_update(m.codebooks(), lg.quantized, cfg.ema_decay, cfg.dead_after, cfg.dead_threshold, rng);
    if (log && (step % std::max(1, cfg.log_every) == 0 || step + 1 == cfg.steps)) {
      CodecLogRecord r;
      r.step = step;
      r.parts = lg.parts;
      r.temperature = m.temperature();
      r.utilization = util;
      r.retrieval = lg.retrieval;
      r.speaker_weights = branch_weights(m.layer_logits(), Branch::Speaker);
      log(r);
    }
  }
  m.set_trained(true);
  return m;
}

}  // namespace ssvc::codec
