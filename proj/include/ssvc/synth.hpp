#pragma once

// Synthetic "speech" with white-box ground truth.
//
// Each frame mixes a stationary speaker part and transitory content/prosody:
//
//   frame_t = E[c_t] * (1 + 0.5 tanh(M p)) + B p + prosody_t * g + noise_t
//
// E, M, B and g are fixed tables derived from one world seed. The oracles below
// invert this model using the same tables; they stand in for external ASR,
// speaker-verification and pitch trackers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "ssvc/rng.hpp"
#include "ssvc/tensor.hpp"

namespace ssvc::synth {

struct SynthConfig {
  int speaker_dim = 8;
  int alphabet = 16;
  int feature_dim = 24;
  int frames_per_symbol = 4;
  std::uint64_t world_seed = 0x55C0DEC;
};

struct SpeakerParams {
  std::vector<float> p;
  int speaker_id = 0;
  std::uint64_t seed = 0;
};

struct UtteranceSpec {
  SpeakerParams speaker;
  std::vector<int> content;
  std::uint64_t prosody_seed = 0;
  int frames_per_symbol = 4;
  float noise_sigma = 0.0f;
};

/// T x D_in frame matrix.
struct FeatureSequence {
  Tensor frames;

  [[nodiscard]] int length() const { return frames.rows(); }
  [[nodiscard]] int dim() const { return frames.cols(); }
};

using ProsodyContour = std::vector<float>;

struct Utterance {
  FeatureSequence features;
  ProsodyContour prosody;
};

namespace detail {

inline double dot(const float* a, const float* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

/// Solves the small symmetric positive definite system A x = b in place (Cholesky).
inline bool solve_spd(std::vector<double> a, std::vector<double>& b, int n) {
  for (int j = 0; j < n; ++j) {
    double d = a[static_cast<std::size_t>(j * n + j)];
    for (int k = 0; k < j; ++k) d -= a[static_cast<std::size_t>(j * n + k)] * a[static_cast<std::size_t>(j * n + k)];
    if (d <= 0.0) return false;
    d = std::sqrt(d);
    a[static_cast<std::size_t>(j * n + j)] = d;
    for (int i = j + 1; i < n; ++i) {
      double s = a[static_cast<std::size_t>(i * n + j)];
      for (int k = 0; k < j; ++k) s -= a[static_cast<std::size_t>(i * n + k)] * a[static_cast<std::size_t>(j * n + k)];
      a[static_cast<std::size_t>(i * n + j)] = s / d;
    }
  }
  for (int i = 0; i < n; ++i) {
    double s = b[static_cast<std::size_t>(i)];
    for (int k = 0; k < i; ++k) s -= a[static_cast<std::size_t>(i * n + k)] * b[static_cast<std::size_t>(k)];
    b[static_cast<std::size_t>(i)] = s / a[static_cast<std::size_t>(i * n + i)];
  }
  for (int i = n - 1; i >= 0; --i) {
    double s = b[static_cast<std::size_t>(i)];
    for (int k = i + 1; k < n; ++k) s -= a[static_cast<std::size_t>(k * n + i)] * b[static_cast<std::size_t>(k)];
    b[static_cast<std::size_t>(i)] = s / a[static_cast<std::size_t>(i * n + i)];
  }
  return true;
}

}  // namespace detail

/// Unit-norm speaker vector drawn from a seeded standard normal.
inline SpeakerParams make_speaker(std::uint64_t seed, int speaker_id = 0, int dim = 8) {
  Rng rng(seed);
  SpeakerParams s;
  s.seed = seed;
  s.speaker_id = speaker_id;
  s.p = rng.normal_vector(dim);
  double n = std::sqrt(detail::dot(s.p.data(), s.p.data(), dim));
  while (n < 1e-6) {  // practically unreachable; keeps the unit-norm invariant total
    s.p = rng.normal_vector(dim);
    n = std::sqrt(detail::dot(s.p.data(), s.p.data(), dim));
  }
  for (float& v : s.p) v = static_cast<float>(v / n);
  return s;
}

inline double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  const int n = static_cast<int>(a.size());
  const double na = std::sqrt(detail::dot(a.data(), a.data(), n));
  const double nb = std::sqrt(detail::dot(b.data(), b.data(), n));
  if (na < 1e-12 || nb < 1e-12) throw DataError("cosine of a zero vector");
  return detail::dot(a.data(), b.data(), n) / (na * nb);
}

/// Draws speaker seeds from a base seed, rejecting any candidate whose |cosine|
/// with an already accepted speaker reaches `max_abs_cos`.
inline std::vector<std::uint64_t> select_speaker_seeds(std::uint64_t base, int count, double max_abs_cos, int dim = 8) {
  std::vector<std::uint64_t> seeds;
  std::vector<SpeakerParams> accepted;
  for (std::uint64_t i = 0; static_cast<int>(seeds.size()) < count; ++i) {
    SSVC_CHECK(i < 1000000, "select_speaker_seeds: cannot place ", count, " speakers under |cos| < ", max_abs_cos);
    const std::uint64_t s = derive_seed(base, 0x5EED, i);
    SpeakerParams cand = make_speaker(s, 0, dim);
    bool ok = true;
    for (const auto& a : accepted)
      if (std::fabs(cosine(cand.p, a.p)) >= max_abs_cos) {
        ok = false;
        break;
      }
    if (!ok) continue;
    seeds.push_back(s);
    accepted.push_back(std::move(cand));
  }
  return seeds;
}

/// The fixed generator tables plus the model-inverting oracles.
class World {
 public:
  explicit World(SynthConfig cfg = {}) : cfg_(cfg) {
    SSVC_CHECK(cfg.alphabet >= 2 && cfg.feature_dim >= 2 && cfg.speaker_dim >= 1 && cfg.frames_per_symbol >= 1,
               "invalid synth config");
    Rng rng(derive_seed(cfg.world_seed, 0xE7AB1E));
    embed_ = Tensor({cfg.alphabet, cfg.feature_dim}, rng.normal_vector(cfg.alphabet * cfg.feature_dim));
    timbre_ = Tensor({cfg.feature_dim, cfg.speaker_dim}, rng.normal_vector(cfg.feature_dim * cfg.speaker_dim));
    offset_ = Tensor({cfg.feature_dim, cfg.speaker_dim}, rng.normal_vector(cfg.feature_dim * cfg.speaker_dim));
    auto g = rng.normal_vector(cfg.feature_dim);
    const double n = std::sqrt(detail::dot(g.data(), g.data(), cfg.feature_dim));
    for (float& v : g) v = static_cast<float>(v / n);
    direction_ = std::move(g);
  }

  [[nodiscard]] const SynthConfig& config() const { return cfg_; }
  [[nodiscard]] const Tensor& symbol_table() const { return embed_; }
  [[nodiscard]] const std::vector<float>& prosody_direction() const { return direction_; }

  /// Per-dimension multiplicative factor 1 + 0.5 tanh(M p).
  [[nodiscard]] std::vector<double> timbre(std::span<const float> p) const {
    std::vector<double> a(static_cast<std::size_t>(dim()));
    for (int d = 0; d < dim(); ++d) a[static_cast<std::size_t>(d)] = 1.0 + 0.5 * std::tanh(row_dot(timbre_, d, p));
    return a;
  }

  /// Additive speaker offset B p.
  [[nodiscard]] std::vector<double> offset(std::span<const float> p) const {
    std::vector<double> b(static_cast<std::size_t>(dim()));
    for (int d = 0; d < dim(); ++d) b[static_cast<std::size_t>(d)] = row_dot(offset_, d, p);
    return b;
  }

  [[nodiscard]] Utterance make_utterance(const UtteranceSpec& spec) const {
    SSVC_CHECK(!spec.content.empty(), "utterance content must be nonempty");
    SSVC_CHECK(spec.frames_per_symbol >= 1, "frames_per_symbol must be positive");
    SSVC_CHECK(spec.noise_sigma >= 0.0f, "noise_sigma must be nonnegative");
    SSVC_CHECK(static_cast<int>(spec.speaker.p.size()) == cfg_.speaker_dim, "speaker dimension mismatch");
    for (int c : spec.content) SSVC_CHECK(c >= 0 && c < cfg_.alphabet, "symbol ", c, " outside alphabet");
    const int T = spec.frames_per_symbol * static_cast<int>(spec.content.size());
    Utterance u;
    u.prosody = prosody_contour(spec.prosody_seed, T);
    Rng noise(derive_seed(spec.prosody_seed, 0x401CE));
    const auto a = timbre(spec.speaker.p);
    const auto b = offset(spec.speaker.p);
    u.features.frames = Tensor::matrix(T, dim());
    for (int t = 0; t < T; ++t) {
      const int c = spec.content[static_cast<std::size_t>(t / spec.frames_per_symbol)];
      float* row = u.features.frames.row(t);
      for (int d = 0; d < dim(); ++d) {
        const double v = embed_.at(c, d) * a[static_cast<std::size_t>(d)] + b[static_cast<std::size_t>(d)] +
                         u.prosody[static_cast<std::size_t>(t)] * direction_[static_cast<std::size_t>(d)];
        row[d] = static_cast<float>(v);
      }
    }
    if (spec.noise_sigma > 0.0f)
      for (float& v : u.features.frames.values()) v += static_cast<float>(noise.normal() * spec.noise_sigma);
    return u;
  }

  /// Bounded smooth random walk in [-1, 1].
  [[nodiscard]] static ProsodyContour prosody_contour(std::uint64_t seed, int T) {
    Rng rng(derive_seed(seed, 0xF0));
    ProsodyContour c(static_cast<std::size_t>(T));
    double x = rng.uniform(-0.5, 0.5), vel = 0.0;
    for (int t = 0; t < T; ++t) {
      vel = 0.7 * vel + 0.15 * rng.normal();
      x += vel;
      if (x > 1.0) x = 2.0 - x, vel = -vel;
      if (x < -1.0) x = -2.0 - x, vel = -vel;
      x = std::clamp(x, -1.0, 1.0);
      c[static_cast<std::size_t>(t)] = static_cast<float>(x);
    }
    return c;
  }

  /// Nearest-symbol decoding per r-frame block after removing the speaker's
  /// offset, timbre and the prosody direction. Requires T % r == 0.
  [[nodiscard]] std::vector<int> decode_content(const FeatureSequence& f, const SpeakerParams& s) const {
    const int r = cfg_.frames_per_symbol;
    if (f.length() % r != 0)
      throw DataError(cat("oracle_decode_content: ", f.length(), " frames not divisible by ", r));
    check_dim(f);
    return decode_blocks(f, s.p);
  }

  /// Per-frame prosody: projection on g of the frame minus speaker and decoded content terms.
  [[nodiscard]] ProsodyContour extract_prosody(const FeatureSequence& f, const SpeakerParams& s) const {
    check_dim(f);
    const int r = cfg_.frames_per_symbol;
    const auto content = decode_blocks(f, s.p);
    const auto a = timbre(s.p);
    const auto b = offset(s.p);
    ProsodyContour out(static_cast<std::size_t>(f.length()));
    for (int t = 0; t < f.length(); ++t) {
      const int c = content[static_cast<std::size_t>(t / r)];
      double acc = 0.0;
      for (int d = 0; d < dim(); ++d) {
        const double resid = f.frames.at(t, d) - b[static_cast<std::size_t>(d)] - embed_.at(c, d) * a[static_cast<std::size_t>(d)];
        acc += resid * direction_[static_cast<std::size_t>(d)];
      }
      out[static_cast<std::size_t>(t)] = static_cast<float>(acc);
    }
    return out;
  }

  /// Least-squares estimate of p from the frames alone, alternating content
  /// decoding and Gauss-Newton refinement of p. Requires T >= 2r.
  [[nodiscard]] std::vector<float> estimate_speaker(const FeatureSequence& f) const {
    check_dim(f);
    const int r = cfg_.frames_per_symbol, D = dim(), S = cfg_.speaker_dim;
    if (f.length() < 2 * r) throw DataError(cat("oracle_speaker_estimate needs at least ", 2 * r, " frames"));
    double spread = 0.0;
    for (int d = 0; d < D; ++d) {
      double lo = f.frames.at(0, d), hi = lo;
      for (int t = 1; t < f.length(); ++t) lo = std::min(lo, static_cast<double>(f.frames.at(t, d))), hi = std::max(hi, static_cast<double>(f.frames.at(t, d)));
      spread = std::max(spread, hi - lo);
    }
    if (!(spread > 1e-9)) throw DataError("oracle_speaker_estimate: degenerate (constant) features");
    for (float v : f.frames.values())
      if (!std::isfinite(v)) throw DataError("oracle_speaker_estimate: non-finite features");

    const auto blocks = block_means(f);
    const int nb = static_cast<int>(blocks.size() / static_cast<std::size_t>(D));

    // Initial guess: treat content as the average symbol with unit timbre.
    std::vector<double> mean(static_cast<std::size_t>(D), 0.0), ebar(static_cast<std::size_t>(D), 0.0);
    for (int i = 0; i < nb; ++i)
      for (int d = 0; d < D; ++d) mean[static_cast<std::size_t>(d)] += blocks[static_cast<std::size_t>(i * D + d)] / nb;
    for (int c = 0; c < cfg_.alphabet; ++c)
      for (int d = 0; d < D; ++d) ebar[static_cast<std::size_t>(d)] += embed_.at(c, d) / cfg_.alphabet;
    std::vector<double> target(static_cast<std::size_t>(D));
    for (int d = 0; d < D; ++d) target[static_cast<std::size_t>(d)] = mean[static_cast<std::size_t>(d)] - ebar[static_cast<std::size_t>(d)];
    project(target);
    std::vector<double> ata(static_cast<std::size_t>(S * S), 0.0), atb(static_cast<std::size_t>(S), 0.0);
    std::vector<double> col(static_cast<std::size_t>(D));
    std::vector<std::vector<double>> pb(static_cast<std::size_t>(S));
    for (int j = 0; j < S; ++j) {
      for (int d = 0; d < D; ++d) col[static_cast<std::size_t>(d)] = offset_.at(d, j);
      project(col);
      pb[static_cast<std::size_t>(j)] = col;
    }
    for (int i = 0; i < S; ++i) {
      for (int j = 0; j < S; ++j) {
        double s = 0.0;
        for (int d = 0; d < D; ++d) s += pb[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)] * pb[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)];
        ata[static_cast<std::size_t>(i * S + j)] = s + (i == j ? 1e-9 : 0.0);
      }
      double s = 0.0;
      for (int d = 0; d < D; ++d) s += pb[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)] * target[static_cast<std::size_t>(d)];
      atb[static_cast<std::size_t>(i)] = s;
    }
    std::vector<double> p = atb;
    if (!detail::solve_spd(ata, p, S)) p.assign(static_cast<std::size_t>(S), 0.0);

    std::vector<int> content(static_cast<std::size_t>(nb), -1);
    for (int outer = 0; outer < 40; ++outer) {
      std::vector<float> pf(p.begin(), p.end());
      const auto next = assign_blocks(blocks, nb, pf);
      const bool same = next == content;
      content = next;
      double step = gauss_newton(blocks, content, p, 4);
      if (same && step < 1e-7) break;
    }
    return {p.begin(), p.end()};
  }

  [[nodiscard]] int dim() const { return cfg_.feature_dim; }

 private:
  static double row_dot(const Tensor& m, int row, std::span<const float> p) {
    double s = 0.0;
    for (int j = 0; j < m.cols(); ++j) s += static_cast<double>(m.at(row, j)) * p[static_cast<std::size_t>(j)];
    return s;
  }

  void check_dim(const FeatureSequence& f) const {
    if (f.frames.rank() != 2 || f.dim() != dim())
      throw DataError(cat("feature dimension ", f.dim(), " does not match generator dimension ", dim()));
  }

  /// Removes the component along the prosody direction.
  void project(std::vector<double>& v) const {
    double s = 0.0;
    for (int d = 0; d < dim(); ++d) s += v[static_cast<std::size_t>(d)] * direction_[static_cast<std::size_t>(d)];
    for (int d = 0; d < dim(); ++d) v[static_cast<std::size_t>(d)] -= s * direction_[static_cast<std::size_t>(d)];
  }

  /// Means of consecutive r-frame blocks; a trailing partial block averages what is there.
  [[nodiscard]] std::vector<double> block_means(const FeatureSequence& f) const {
    const int r = cfg_.frames_per_symbol, D = dim();
    const int nb = (f.length() + r - 1) / r;
    std::vector<double> out(static_cast<std::size_t>(nb * D), 0.0);
    for (int i = 0; i < nb; ++i) {
      const int t0 = i * r, t1 = std::min(f.length(), t0 + r);
      for (int t = t0; t < t1; ++t)
        for (int d = 0; d < D; ++d) out[static_cast<std::size_t>(i * D + d)] += f.frames.at(t, d);
      for (int d = 0; d < D; ++d) out[static_cast<std::size_t>(i * D + d)] /= (t1 - t0);
    }
    return out;
  }

  [[nodiscard]] std::vector<int> assign_blocks(const std::vector<double>& blocks, int nb, std::span<const float> p) const {
    const int D = dim();
    const auto a = timbre(p);
    const auto b = offset(p);
    std::vector<int> out(static_cast<std::size_t>(nb));
    std::vector<double> res(static_cast<std::size_t>(D));
    for (int i = 0; i < nb; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int arg = 0;
      for (int c = 0; c < cfg_.alphabet; ++c) {
        for (int d = 0; d < D; ++d)
          res[static_cast<std::size_t>(d)] = blocks[static_cast<std::size_t>(i * D + d)] - b[static_cast<std::size_t>(d)] -
                                             embed_.at(c, d) * a[static_cast<std::size_t>(d)];
        project(res);
        double n2 = 0.0;
        for (double v : res) n2 += v * v;
        if (n2 < best) best = n2, arg = c;
      }
      out[static_cast<std::size_t>(i)] = arg;
    }
    return out;
  }

  [[nodiscard]] std::vector<int> decode_blocks(const FeatureSequence& f, std::span<const float> p) const {
    const auto blocks = block_means(f);
    return assign_blocks(blocks, static_cast<int>(blocks.size()) / dim(), p);
  }

  /// Refines p for fixed block contents; returns the last step norm.
  double gauss_newton(const std::vector<double>& blocks, const std::vector<int>& content, std::vector<double>& p,
                      int iters) const {
    const int D = dim(), S = cfg_.speaker_dim;
    const int nb = static_cast<int>(content.size());
    double last = 0.0;
    std::vector<double> res(static_cast<std::size_t>(D)), jcol(static_cast<std::size_t>(D));
    for (int it = 0; it < iters; ++it) {
      std::vector<double> mp(static_cast<std::size_t>(D)), sech2(static_cast<std::size_t>(D));
      for (int d = 0; d < D; ++d) {
        double s = 0.0;
        for (int j = 0; j < S; ++j) s += timbre_.at(d, j) * p[static_cast<std::size_t>(j)];
        const double th = std::tanh(s);
        mp[static_cast<std::size_t>(d)] = 1.0 + 0.5 * th;
        sech2[static_cast<std::size_t>(d)] = 1.0 - th * th;
      }
      std::vector<double> jtj(static_cast<std::size_t>(S * S), 0.0), jtr(static_cast<std::size_t>(S), 0.0);
      std::vector<std::vector<double>> jac(static_cast<std::size_t>(S), std::vector<double>(static_cast<std::size_t>(D)));
      for (int i = 0; i < nb; ++i) {
        const int c = content[static_cast<std::size_t>(i)];
        for (int d = 0; d < D; ++d) {
          double bp = 0.0;
          for (int j = 0; j < S; ++j) bp += offset_.at(d, j) * p[static_cast<std::size_t>(j)];
          res[static_cast<std::size_t>(d)] = blocks[static_cast<std::size_t>(i * D + d)] - embed_.at(c, d) * mp[static_cast<std::size_t>(d)] - bp;
        }
        project(res);
        for (int j = 0; j < S; ++j) {
          for (int d = 0; d < D; ++d)
            jcol[static_cast<std::size_t>(d)] = embed_.at(c, d) * 0.5 * sech2[static_cast<std::size_t>(d)] * timbre_.at(d, j) + offset_.at(d, j);
          project(jcol);
          jac[static_cast<std::size_t>(j)] = jcol;
        }
        for (int a = 0; a < S; ++a) {
          for (int b = 0; b < S; ++b) {
            double s = 0.0;
            for (int d = 0; d < D; ++d) s += jac[static_cast<std::size_t>(a)][static_cast<std::size_t>(d)] * jac[static_cast<std::size_t>(b)][static_cast<std::size_t>(d)];
            jtj[static_cast<std::size_t>(a * S + b)] += s;
          }
          double s = 0.0;
          for (int d = 0; d < D; ++d) s += jac[static_cast<std::size_t>(a)][static_cast<std::size_t>(d)] * res[static_cast<std::size_t>(d)];
          jtr[static_cast<std::size_t>(a)] += s;
        }
      }
      for (int a = 0; a < S; ++a) jtj[static_cast<std::size_t>(a * S + a)] += 1e-6;
      if (!detail::solve_spd(jtj, jtr, S)) break;
      last = 0.0;
      for (int j = 0; j < S; ++j) {
        p[static_cast<std::size_t>(j)] += jtr[static_cast<std::size_t>(j)];
        last += jtr[static_cast<std::size_t>(j)] * jtr[static_cast<std::size_t>(j)];
      }
      last = std::sqrt(last);
      if (last < 1e-9) break;
    }
    return last;
  }

  SynthConfig cfg_;
  Tensor embed_;
  Tensor timbre_;
  Tensor offset_;
  std::vector<float> direction_;
};

// Free-function surface mirroring the operations of this module.

inline Utterance make_utterance(const World& w, const UtteranceSpec& spec) { return w.make_utterance(spec); }

inline std::vector<int> oracle_decode_content(const World& w, const FeatureSequence& f, const SpeakerParams& s) {
  return w.decode_content(f, s);
}

inline std::vector<float> oracle_speaker_estimate(const World& w, const FeatureSequence& f) { return w.estimate_speaker(f); }

inline ProsodyContour oracle_extract_prosody(const World& w, const FeatureSequence& f, const SpeakerParams& s) {
  return w.extract_prosody(f, s);
}

/// Two independent uniform crops of exactly chunk_len frames.
inline std::pair<FeatureSequence, FeatureSequence> chunk_pair(const FeatureSequence& f, int chunk_len, std::uint64_t seed) {
  if (chunk_len < 1 || chunk_len > f.length())
    throw DataError(cat("chunk_pair: chunk length ", chunk_len, " exceeds ", f.length(), " frames"));
  Rng rng(seed);
  const int span = f.length() - chunk_len + 1;
  auto crop = [&](int start) {
    FeatureSequence c;
    c.frames = Tensor::matrix(chunk_len, f.dim());
    std::copy(f.frames.row(start), f.frames.row(start) + static_cast<std::size_t>(chunk_len) * f.dim(), c.frames.data());
    return c;
  };
  const int s1 = rng.below(span);
  const int s2 = rng.below(span);
  return {crop(s1), crop(s2)};
}

}  // namespace ssvc::synth
