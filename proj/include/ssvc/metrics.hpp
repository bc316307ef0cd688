#pragma once

// Evaluation metrics in the synthetic domain: symbol error rate, speaker
// similarity and prosody correlation through the white-box oracles, and a
// linear speaker probe.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "ssvc/autodiff.hpp"
#include "ssvc/optim.hpp"
#include "ssvc/rng.hpp"
#include "ssvc/synth.hpp"

namespace ssvc::metrics {

inline int levenshtein(std::span<const int> a, std::span<const int> b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Levenshtein distance divided by len(ref).
inline double edit_distance_rate(std::span<const int> hyp, std::span<const int> ref) {
  if (ref.empty()) {
    if (hyp.empty()) return 0.0;
    throw DataError("edit_distance_rate: empty reference with nonempty hypothesis");
  }
  return static_cast<double>(levenshtein(hyp, ref)) / static_cast<double>(ref.size());
}

/// Symbol error rate of the oracle transcription. Frames beyond the last whole
/// symbol block are dropped before decoding.
inline double wer_analog(const synth::World& w, const Tensor& output, std::span<const int> target,
                         const synth::SpeakerParams& speaker) {
  const int r = w.config().frames_per_symbol;
  const int keep = output.rows() - output.rows() % r;
  synth::FeatureSequence f;
  f.frames = Tensor({keep, output.cols()}, std::vector<float>(output.data(), output.data() + static_cast<std::size_t>(keep) * output.cols()));
  const auto hyp = keep > 0 ? w.decode_content(f, speaker) : std::vector<int>{};
  return edit_distance_rate(hyp, target);
}

inline double secs(const synth::World& w, const Tensor& a, const Tensor& b) {
  const auto ea = w.estimate_speaker(synth::FeatureSequence{a});
  const auto eb = w.estimate_speaker(synth::FeatureSequence{b});
  return synth::cosine(ea, eb);
}

/// Sample Pearson correlation.
inline double f0_correlation(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DataError(cat("f0_correlation: lengths ", a.size(), " and ", b.size(), " differ"));
  if (a.size() < 2) throw DataError("f0_correlation needs at least 2 frames");
  const auto n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= n, mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0 || sbb <= 0) throw DataError("f0_correlation: constant contour");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Pearson correlation after truncating both contours to the shorter length.
inline double f0_correlation_truncated(std::span<const float> a, std::span<const float> b) {
  const std::size_t n = std::min(a.size(), b.size());
  return f0_correlation(a.first(n), b.first(n));
}

// ---------------------------------------------------------------------------
// Linear speaker probe

struct ProbeConfig {
  int steps = 500;
  float lr = 0.05f;
  float weight_decay = 1e-3f;
  std::uint64_t seed = 17;
};

/// Trains multinomial logistic regression on standardized inputs (rows of
/// `train_x`) and returns accuracy on `eval_x`.
inline double speaker_probe(const Tensor& train_x, const std::vector<int>& train_y, const Tensor& eval_x,
                            const std::vector<int>& eval_y, const ProbeConfig& cfg = {}) {
  SSVC_CHECK(train_x.rows() == static_cast<int>(train_y.size()) && eval_x.rows() == static_cast<int>(eval_y.size()),
             "speaker_probe: label count mismatch");
  SSVC_CHECK(train_x.cols() == eval_x.cols(), "speaker_probe: feature width mismatch");
  std::map<int, int> classes;
  for (int y : train_y) classes.emplace(y, 0);
  if (classes.size() < 2) throw DataError("speaker_probe needs at least 2 classes");
  int next = 0;
  for (auto& [k, v] : classes) v = next++;
  const int C = next, D = train_x.cols(), N = train_x.rows();

  std::vector<double> mu(static_cast<std::size_t>(D), 0.0), sd(static_cast<std::size_t>(D), 0.0);
  for (int r = 0; r < N; ++r)
    for (int d = 0; d < D; ++d) mu[static_cast<std::size_t>(d)] += train_x.at(r, d) / static_cast<double>(N);
  for (int r = 0; r < N; ++r)
    for (int d = 0; d < D; ++d) {
      const double z = train_x.at(r, d) - mu[static_cast<std::size_t>(d)];
      sd[static_cast<std::size_t>(d)] += z * z / N;
    }
  for (double& s : sd) s = std::sqrt(s) + 1e-6;
  auto standardize = [&](const Tensor& x) {
    Tensor out(x.shape());
    for (int r = 0; r < x.rows(); ++r)
      for (int d = 0; d < D; ++d)
        out.at(r, d) = static_cast<float>((x.at(r, d) - mu[static_cast<std::size_t>(d)]) / sd[static_cast<std::size_t>(d)]);
    return out;
  };
  const Tensor xs = standardize(train_x);
  std::vector<int> ys;
  for (int y : train_y) ys.push_back(classes.at(y));

  ad::Parameter w("probe.w", Tensor({D, C}));
  ad::Parameter b("probe.b", Tensor({C}));
  ad::AdamWConfig ac;
  ac.lr = cfg.lr;
  ac.beta1 = 0.9f;
  ac.beta2 = 0.999f;
  ac.weight_decay = cfg.weight_decay;
  ad::AdamW opt({&w, &b}, ac);
  for (int step = 0; step < cfg.steps; ++step) {
    ad::Graph g;
    opt.zero_grad();
    ad::Var logits = ad::add_row(ad::matmul(g.constant_ref(xs), g.param(w)), g.param(b));
    g.backward(ad::cross_entropy_logits(logits, ys));
    opt.step();
  }

  const Tensor xe = standardize(eval_x);
  int ok = 0;
  for (int r = 0; r < xe.rows(); ++r) {
    int best = 0;
    double bs = -1e300;
    for (int c = 0; c < C; ++c) {
      double s = b.value[c];
      for (int d = 0; d < D; ++d) s += static_cast<double>(xe.at(r, d)) * w.value.at(d, c);
      if (s > bs) bs = s, best = c;
    }
    auto it = classes.find(eval_y[static_cast<std::size_t>(r)]);
    ok += it != classes.end() && it->second == best;
  }
  return xe.rows() ? static_cast<double>(ok) / xe.rows() : 0.0;
}

/// Time average of a T x D matrix as a 1 x D row.
inline std::vector<float> time_average(const Tensor& x) {
  std::vector<float> out(static_cast<std::size_t>(x.cols()), 0.0f);
  for (int d = 0; d < x.cols(); ++d) {
    double s = 0.0;
    for (int t = 0; t < x.rows(); ++t) s += x.at(t, d);
    out[static_cast<std::size_t>(d)] = static_cast<float>(s / std::max(1, x.rows()));
  }
  return out;
}

inline Tensor stack_rows(const std::vector<std::vector<float>>& rows) {
  SSVC_CHECK(!rows.empty(), "stack_rows: no rows");
  const int D = static_cast<int>(rows[0].size());
  Tensor out = Tensor::matrix(static_cast<int>(rows.size()), D);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    SSVC_CHECK(static_cast<int>(rows[r].size()) == D, "stack_rows: ragged rows");
    std::copy(rows[r].begin(), rows[r].end(), out.row(static_cast<int>(r)));
  }
  return out;
}

}  // namespace ssvc::metrics
