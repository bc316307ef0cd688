#pragma once

// Decoder-only transformer over flattened RVQ codes with text and speech
// prompts, an optional reference-encoder prefix, the warmup + cosine learning
// rate schedule and a KV-cached sampler.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "ssvc/autodiff.hpp"
#include "ssvc/checkpoint.hpp"
#include "ssvc/codec.hpp"
#include "ssvc/nn.hpp"
#include "ssvc/optim.hpp"
#include "ssvc/rng.hpp"

namespace ssvc::lm {

using ad::Graph;
using ad::Var;
using codec::CodeGrid;
using nn::Ctx;

// ---------------------------------------------------------------------------
// Vocabulary

/// Code tokens [0, nq*k), then BOS, EOS, SEP, SEP2, PAD, then text symbols.
struct Vocab {
  int nq = 4;
  int k = 512;
  int alphabet = 16;

  [[nodiscard]] int codes() const { return nq * k; }
  [[nodiscard]] int bos() const { return codes(); }
  [[nodiscard]] int eos() const { return codes() + 1; }
  [[nodiscard]] int sep() const { return codes() + 2; }
  [[nodiscard]] int sep2() const { return codes() + 3; }
  [[nodiscard]] int pad() const { return codes() + 4; }
  [[nodiscard]] int text(int a) const { return codes() + 5 + a; }
  [[nodiscard]] int size() const { return codes() + 5 + alphabet; }
  [[nodiscard]] bool is_code(int t) const { return t >= 0 && t < codes(); }
  [[nodiscard]] bool is_text(int t) const { return t >= codes() + 5 && t < size(); }
};

using TokenSequence = std::vector<int>;

/// Time-major, codebook-interleaved: token i*K + grid[t][i] for t, then i.
inline TokenSequence flatten_codes(const CodeGrid& grid, int k) {
  TokenSequence out;
  out.reserve(grid.idx.size());
  for (int t = 0; t < grid.frames; ++t)
    for (int i = 0; i < grid.nq; ++i) {
      const int c = grid.at(t, i);
      SSVC_CHECK(c >= 0 && c < k, "code ", c, " outside [0,", k, ")");
      out.push_back(i * k + c);
    }
  return out;
}

/// Inverse of flatten_codes. A token from the wrong codebook throws; a partial
/// trailing frame is dropped and reported through `warn`.
inline CodeGrid unflatten_tokens(const TokenSequence& tokens, int nq, int k,
                                 const std::function<void(const std::string&)>& warn = {}) {
  const int whole = static_cast<int>(tokens.size()) / nq;
  if (static_cast<int>(tokens.size()) % nq != 0 && warn)
    warn(cat("dropping ", tokens.size() % static_cast<std::size_t>(nq), " tokens of a partial trailing frame"));
  CodeGrid g(whole, nq);
  for (int j = 0; j < whole * nq; ++j) {
    const int tok = tokens[static_cast<std::size_t>(j)];
    const int want = j % nq;
    if (tok < want * k || tok >= (want + 1) * k)
      throw DataError(cat("codebook misalignment at position ", j, ": token ", tok, " is not in codebook ", want));
    g.at(j / nq, want) = tok - want * k;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Prompts

enum class Mode { Text, Speech, TextRef };

inline Mode parse_mode(const std::string& s) {
  if (s == "text") return Mode::Text;
  if (s == "speech") return Mode::Speech;
  if (s == "text-ref") return Mode::TextRef;
  throw UsageError(cat("unknown mode '", s, "' (expected text, speech or text-ref)"));
}

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::Text: return "text";
    case Mode::Speech: return "speech";
    case Mode::TextRef: return "text-ref";
  }
  return "?";
}

struct PromptSequence {
  Mode mode = Mode::Text;
  std::vector<int> text;
  std::vector<int> ref_text;
  std::optional<CodeGrid> ref_codes;
  const Tensor* ref_features = nullptr;
};

/// text:     [BOS] text [SEP]
/// speech:   [BOS] ref_text text [SEP] flatten(ref_codes)
/// text-ref: [BOS] [SEP2] text [SEP], SEP2 being the reference-embedding slot
inline TokenSequence build_prompt(const PromptSequence& p, const Vocab& v) {
  for (int a : p.text) SSVC_CHECK(a >= 0 && a < v.alphabet, "text symbol ", a, " outside alphabet");
  TokenSequence out{v.bos()};
  switch (p.mode) {
    case Mode::Text: break;
    case Mode::Speech:
      if (p.ref_text.empty() || !p.ref_codes) throw DataError("speech prompting needs a reference transcript and reference codes");
      for (int a : p.ref_text) {
        SSVC_CHECK(a >= 0 && a < v.alphabet, "text symbol ", a, " outside alphabet");
        out.push_back(v.text(a));
      }
      break;
    case Mode::TextRef:
      if (!p.ref_features) throw DataError("text-ref prompting needs reference features");
      out.push_back(v.sep2());
      break;
  }
  for (int a : p.text) out.push_back(v.text(a));
  out.push_back(v.sep());
  if (p.mode == Mode::Speech) {
    const auto codes = flatten_codes(*p.ref_codes, v.k);
    out.insert(out.end(), codes.begin(), codes.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Learning rate schedule

struct ScheduleConfig {
  int warmup_steps = 10000;
  double peak_lr = 5e-4;
  int total_steps = 120000;
  double floor_fraction = 0.10;
};

/// Linear 0 -> peak over warmup, cosine peak -> floor at total_steps, then floor.
inline double lr_schedule(std::int64_t step, const ScheduleConfig& c) {
  SSVC_CHECK(step >= 0, "lr_schedule: negative step");
  SSVC_CHECK(c.warmup_steps >= 0 && c.warmup_steps < c.total_steps, "lr_schedule: warmup must be below total steps");
  const double floor = c.floor_fraction * c.peak_lr;
  if (step < c.warmup_steps) return c.peak_lr * static_cast<double>(step) / c.warmup_steps;
  if (step >= c.total_steps) return floor;
  const double frac = static_cast<double>(step - c.warmup_steps) / (c.total_steps - c.warmup_steps);
  return floor + (c.peak_lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

// ---------------------------------------------------------------------------
// Model

struct LMConfig {
  int layers = 4;
  int dim = 128;
  int ff = 512;
  int heads = 4;
  int max_len = 512;
  int max_text = 64;
  int max_frames = 256;
  bool reference = false;  // LSSL-R when true
  int feature_dim = 24;
  Vocab vocab;
  std::uint64_t seed = 11;
};

/// Per-position embedding indices derived from a token sequence. Text tokens
/// are numbered within the text segment; code tokens carry their frame index
/// (counted over all code tokens of the sequence) and codebook.
struct Positions {
  std::vector<int> text;   // -1 when absent
  std::vector<int> frame;  // -1 when absent
  std::vector<int> book;   // -1 when absent
};

inline Positions positions_of(const TokenSequence& toks, const Vocab& v) {
  Positions p;
  int ntext = 0, ncode = 0;
  for (int t : toks) {
    if (v.is_text(t)) {
      p.text.push_back(ntext++);
      p.frame.push_back(-1);
      p.book.push_back(-1);
    } else if (v.is_code(t)) {
      p.text.push_back(-1);
      p.frame.push_back(ncode / v.nq);
      p.book.push_back(t / v.k);
      ++ncode;
    } else {
      p.text.push_back(-1);
      p.frame.push_back(-1);
      p.book.push_back(-1);
    }
  }
  return p;
}

class TokenLM {
 public:
  explicit TokenLM(LMConfig cfg) : cfg_(cfg) {
    SSVC_CHECK(cfg.dim % cfg.heads == 0, "lm dim ", cfg.dim, " not divisible by heads ", cfg.heads);
    Rng rng(derive_seed(cfg.seed, 0x1A4));
    const int V = cfg.vocab.size(), D = cfg.dim;
    ps_.add("tok", nn::init_normal(rng, {V, D}, 0.5));
    text_pos_ = sinusoids(cfg.max_text, D);
    frame_pos_ = sinusoids(cfg.max_frames, D);
    ps_.add("pos.book", nn::init_normal(rng, {cfg.vocab.nq, D}, 0.5));
    for (int l = 0; l < cfg.layers; ++l) nn::add_block(ps_, rng, cat("block", l), {D, cfg.ff, cfg.heads}, cfg.layers);
    nn::add_layer_norm(ps_, "ln_f", D);
    nn::add_linear(ps_, rng, "head", D, V);
    if (cfg.reference) {
      nn::add_linear(ps_, rng, "ref.conv1", 3 * cfg.feature_dim, D);
      nn::add_linear(ps_, rng, "ref.conv2", 3 * D, D);
      nn::add_linear(ps_, rng, "ref.q", D, D, false);
      nn::add_linear(ps_, rng, "ref.k", D, D, false);
      nn::add_linear(ps_, rng, "ref.v", D, D, false);
      nn::add_linear(ps_, rng, "ref.o", D, D);
    }
  }

  [[nodiscard]] const LMConfig& config() const { return cfg_; }
  [[nodiscard]] const Vocab& vocab() const { return cfg_.vocab; }
  /// Fixed sinusoidal tables with a trailing zero row for "no position".
  [[nodiscard]] const Tensor& text_positions() const { return text_pos_; }
  [[nodiscard]] const Tensor& frame_positions() const { return frame_pos_; }
  nn::ParameterSet& params() { return ps_; }
  [[nodiscard]] const nn::ParameterSet& params() const { return ps_; }

  /// Two width-3 convolutions, one self-attention layer, then a mean over time.
  /// Returns one model_dim row per reference.
  Var reference_encode(const Ctx& c, const std::vector<const Tensor*>& refs) {
    if (!cfg_.reference) throw DataError("this language model has no reference encoder");
    std::vector<int> segs;
    int total = 0;
    for (const Tensor* r : refs) {
      if (r->rank() != 2 || r->cols() != cfg_.feature_dim || r->rows() < 1)
        throw DataError(cat("reference features must be T x ", cfg_.feature_dim, ", got ", shape_str(r->shape())));
      segs.push_back(r->rows());
      total += r->rows();
    }
    Tensor packed = Tensor::matrix(total, cfg_.feature_dim);
    float* dst = packed.data();
    for (const Tensor* r : refs) dst = std::copy(r->data(), r->data() + r->size(), dst);
    Var x = c.g.constant(std::move(packed));
    x = ad::gelu(nn::linear(c, "ref.conv1", ad::temporal_context(x, 3, segs)));
    x = ad::gelu(nn::linear(c, "ref.conv2", ad::temporal_context(x, 3, segs)));
    Var a = ad::attention(nn::linear(c, "ref.q", x), nn::linear(c, "ref.k", x), nn::linear(c, "ref.v", x), 1, segs, false);
    x = ad::add(x, nn::linear(c, "ref.o", a));
    Tensor pool = Tensor::matrix(static_cast<int>(segs.size()), total);
    int off = 0;
    for (std::size_t i = 0; i < segs.size(); ++i) {
      for (int t = 0; t < segs[i]; ++t) pool.at(static_cast<int>(i), off + t) = 1.0f / static_cast<float>(segs[i]);
      off += segs[i];
    }
    return ad::matmul(c.g.constant(std::move(pool)), x);
  }

  Tensor reference_embedding(const Tensor& features) {
    Graph g;
    Ctx c{g, ps_, false};
    return reference_encode(c, {&features}).value();
  }

  /// Logits for every position of every packed sequence; row j of a segment
  /// predicts token j+1. `refs` supplies one feature matrix per SEP2 slot, in
  /// order of appearance.
  Var forward(const Ctx& c, const std::vector<TokenSequence>& seqs, const std::vector<const Tensor*>& refs = {}) {
    const Vocab& v = cfg_.vocab;
    const int V = v.size(), D = cfg_.dim;
    std::vector<int> ids, tp, fp, bp, segs;
    int slot = 0;
    for (const auto& s : seqs) {
      if (static_cast<int>(s.size()) > cfg_.max_len)
        throw DataError(cat("sequence of ", s.size(), " tokens exceeds max_len ", cfg_.max_len));
      SSVC_CHECK(!s.empty(), "empty token sequence");
      const Positions p = positions_of(s, v);
      for (std::size_t j = 0; j < s.size(); ++j) {
        const int t = s[j];
        SSVC_CHECK(t >= 0 && t < V, "token ", t, " outside vocabulary of ", V);
        if (p.text[j] >= cfg_.max_text) throw DataError(cat("sequence spans more than max_text ", cfg_.max_text, " symbols"));
        if (p.frame[j] >= cfg_.max_frames) throw DataError(cat("code stream longer than max_frames ", cfg_.max_frames));
        ids.push_back(t == v.sep2() && cfg_.reference ? V + slot++ : t);
        tp.push_back(p.text[j] < 0 ? cfg_.max_text : p.text[j]);
        fp.push_back(p.frame[j] < 0 ? cfg_.max_frames : p.frame[j]);
        bp.push_back(p.book[j] < 0 ? v.nq : p.book[j]);
      }
      segs.push_back(static_cast<int>(s.size()));
    }
    if (slot != static_cast<int>(refs.size()) && cfg_.reference)
      throw DataError(cat(slot, " reference slots but ", refs.size(), " reference utterances"));
    Var zero = c.g.constant(Tensor::matrix(1, D));
    std::vector<Var> tok_parts{c.p("tok")};
    if (slot > 0) tok_parts.push_back(reference_encode(c, refs));
    Var x = ad::embedding(ad::concat_rows(tok_parts), ids);
    x = ad::add(x, ad::embedding(c.g.constant_ref(text_pos_), tp));
    x = ad::add(x, ad::embedding(c.g.constant_ref(frame_pos_), fp));
    x = ad::add(x, ad::embedding(ad::concat_rows({c.p("pos.book"), zero}), bp));
    for (int l = 0; l < cfg_.layers; ++l) x = nn::block(c, cat("block", l), x, cfg_.heads, segs, true);
    return nn::linear(c, "head", nn::layer_norm(c, "ln_f", x));
  }

  /// Logits of a single sequence without gradient tracking.
  Tensor logits(const TokenSequence& s, const Tensor* ref = nullptr) {
    Graph g;
    Ctx c{g, ps_, false};
    std::vector<const Tensor*> refs;
    if (ref) refs.push_back(ref);
    return forward(c, {s}, refs).value();
  }

  [[nodiscard]] TensorTable to_table() const {
    TensorTable t;
    for (const auto* p : ps_.all()) t.emplace_back("param/" + p->name, p->value);
    return t;
  }

  void load_table(const TensorTable& t) {
    for (auto* p : ps_.all()) {
      const Tensor& val = find_tensor(t, "param/" + p->name);
      if (val.shape() != p->value.shape())
        throw DataError(cat("checkpoint tensor ", p->name, " has shape ", shape_str(val.shape()), ", model expects ",
                            shape_str(p->value.shape())));
      p->value = val;
    }
  }

 private:
  /// rows x dim sinusoids (sin on even, cos on odd columns) plus a zero row.
  static Tensor sinusoids(int rows, int dim) {
    Tensor t = Tensor::matrix(rows + 1, dim);
    for (int p = 0; p < rows; ++p)
      for (int i = 0; i < dim; i += 2) {
        const double a = p / std::pow(10000.0, static_cast<double>(i) / dim);
        t.at(p, i) = static_cast<float>(std::sin(a));
        if (i + 1 < dim) t.at(p, i + 1) = static_cast<float>(std::cos(a));
      }
    return t;
  }

  LMConfig cfg_;
  nn::ParameterSet ps_;
  Tensor text_pos_, frame_pos_;
};

// ---------------------------------------------------------------------------
// KV-cached incremental inference

class Generator {
 public:
  explicit Generator(const TokenLM& m) : m_(m), cfg_(m.config()) {
    cache_k_.resize(static_cast<std::size_t>(cfg_.layers));
    cache_v_.resize(static_cast<std::size_t>(cfg_.layers));
  }

  /// Feeds one position and returns the logits predicting the next token.
  /// `embedding_override` replaces the token embedding (reference slot).
  std::vector<float> push(int token, const std::vector<float>* embedding_override = nullptr) {
    const Vocab& v = cfg_.vocab;
    const int D = cfg_.dim;
    if (len_ >= cfg_.max_len) throw DataError(cat("generation exceeds max_len ", cfg_.max_len));
    std::vector<float> x(static_cast<std::size_t>(D));
    if (embedding_override) {
      x = *embedding_override;
    } else {
      const Tensor& tok = P("tok");
      std::copy(tok.row(token), tok.row(token) + D, x.begin());
    }
    if (v.is_text(token)) {
      if (ntext_ >= cfg_.max_text) throw DataError(cat("text longer than max_text ", cfg_.max_text));
      add_row(x, m_.text_positions(), ntext_++);
    } else if (v.is_code(token)) {
      const int frame = ncode_ / v.nq;
      if (frame >= cfg_.max_frames) throw DataError(cat("code stream longer than max_frames ", cfg_.max_frames));
      add_row(x, m_.frame_positions(), frame);
      add_row(x, P("pos.book"), token / v.k);
      ++ncode_;
    }
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string b = cat("block", l);
      auto h = layer_norm(x, P(b + ".ln1.g"), P(b + ".ln1.b"));
      auto q = matvec(h, P(b + ".q.w"));
      auto k = matvec(h, P(b + ".k.w"));
      auto val = matvec(h, P(b + ".v.w"));
      auto& ck = cache_k_[static_cast<std::size_t>(l)];
      auto& cv = cache_v_[static_cast<std::size_t>(l)];
      ck.insert(ck.end(), k.begin(), k.end());
      cv.insert(cv.end(), val.begin(), val.end());
      const int n = len_ + 1, H = cfg_.heads, dh = D / H;
      const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
      std::vector<float> att(static_cast<std::size_t>(D), 0.0f), s(static_cast<std::size_t>(n));
      for (int hh = 0; hh < H; ++hh) {
        float mx = -std::numeric_limits<float>::infinity();
        for (int j = 0; j < n; ++j) {
          float d = 0.0f;
          for (int c = 0; c < dh; ++c) d += q[static_cast<std::size_t>(hh * dh + c)] * ck[static_cast<std::size_t>(j) * D + hh * dh + c];
          s[static_cast<std::size_t>(j)] = d * sc;
          mx = std::max(mx, s[static_cast<std::size_t>(j)]);
        }
        double z = 0.0;
        for (int j = 0; j < n; ++j) z += (s[static_cast<std::size_t>(j)] = std::exp(s[static_cast<std::size_t>(j)] - mx));
        for (int j = 0; j < n; ++j) {
          const auto p = static_cast<float>(s[static_cast<std::size_t>(j)] / z);
          for (int c = 0; c < dh; ++c) att[static_cast<std::size_t>(hh * dh + c)] += p * cv[static_cast<std::size_t>(j) * D + hh * dh + c];
        }
      }
      auto o = matvec(att, P(b + ".o.w"), &P(b + ".o.b"));
      for (int d = 0; d < D; ++d) x[static_cast<std::size_t>(d)] += o[static_cast<std::size_t>(d)];
      auto h2 = layer_norm(x, P(b + ".ln2.g"), P(b + ".ln2.b"));
      auto f = matvec(h2, P(b + ".ff1.w"), &P(b + ".ff1.b"));
      for (float& u : f) u = gelu(u);
      auto f2 = matvec(f, P(b + ".ff2.w"), &P(b + ".ff2.b"));
      for (int d = 0; d < D; ++d) x[static_cast<std::size_t>(d)] += f2[static_cast<std::size_t>(d)];
    }
    ++len_;
    return matvec(layer_norm(x, P("ln_f.g"), P("ln_f.b")), P("head.w"), &P("head.b"));
  }

  [[nodiscard]] int length() const { return len_; }
  [[nodiscard]] int code_tokens() const { return ncode_; }

 private:
  [[nodiscard]] const Tensor& P(const std::string& n) const { return m_.params().get(n).value; }

  static void add_row(std::vector<float>& x, const Tensor& table, int r) {
    for (std::size_t d = 0; d < x.size(); ++d) x[d] += table.at(r, static_cast<int>(d));
  }

  static std::vector<float> matvec(const std::vector<float>& x, const Tensor& w, const Tensor* b = nullptr) {
    const int in = w.rows(), out = w.cols();
    const fvec xa(x.begin(), x.end());
    fvec ya(static_cast<std::size_t>(out), 0.0f);
    kernel::gemm_nn(xa.data(), w.data(), ya.data(), 1, out, in, false);
    std::vector<float> y(ya.begin(), ya.end());
    if (b)
      for (int j = 0; j < out; ++j) y[static_cast<std::size_t>(j)] += (*b)[j];
    return y;
  }

  static std::vector<float> layer_norm(const std::vector<float>& x, const Tensor& g, const Tensor& b) {
    const auto n = static_cast<double>(x.size());
    double mu = 0.0;
    for (float v : x) mu += v;
    mu /= n;
    double var = 0.0;
    for (float v : x) var += (v - mu) * (v - mu);
    var /= n;
    const double rs = 1.0 / std::sqrt(var + 1e-5);
    std::vector<float> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
      out[i] = static_cast<float>((x[i] - mu) * rs) * g[static_cast<std::int64_t>(i)] + b[static_cast<std::int64_t>(i)];
    return out;
  }

  static float gelu(float v) {
    const float c = 0.7978845608f;
    return 0.5f * v * (1.0f + std::tanh(c * (v + 0.044715f * v * v * v)));
  }

  const TokenLM& m_;
  LMConfig cfg_;
  std::vector<std::vector<float>> cache_k_, cache_v_;
  int len_ = 0, ntext_ = 0, ncode_ = 0;
};

struct SampleConfig {
  float temperature = 0.7f;
  int top_k = 32;
  std::uint64_t seed = 1;
  int max_new = 512;
};

/// Next-token choice restricted to `allowed` (ascending token ids). Greedy when
/// temperature <= 0 or top_k == 1.
inline int choose_token(const std::vector<float>& logits, const std::vector<int>& allowed, const SampleConfig& sc, Rng& rng) {
  if (sc.temperature <= 0.0f || sc.top_k == 1) {
    int best = allowed[0];
    for (int t : allowed)
      if (logits[static_cast<std::size_t>(t)] > logits[static_cast<std::size_t>(best)]) best = t;
    return best;
  }
  std::vector<int> cand = allowed;
  const int k = sc.top_k > 0 ? std::min<int>(sc.top_k, static_cast<int>(cand.size())) : static_cast<int>(cand.size());
  std::partial_sort(cand.begin(), cand.begin() + k, cand.end(), [&](int a, int b) {
    const float la = logits[static_cast<std::size_t>(a)], lb = logits[static_cast<std::size_t>(b)];
    return la > lb || (la == lb && a < b);
  });
  cand.resize(static_cast<std::size_t>(k));
  const float mx = logits[static_cast<std::size_t>(cand[0])];
  std::vector<double> p(cand.size());
  double z = 0.0;
  for (std::size_t i = 0; i < cand.size(); ++i)
    z += (p[i] = std::exp((logits[static_cast<std::size_t>(cand[i])] - mx) / sc.temperature));
  double u = rng.uniform() * z;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    u -= p[i];
    if (u <= 0.0) return cand[i];
  }
  return cand.back();
}

/// Autoregressive continuation of `prefix`. Each step may only produce a token
/// of the codebook due at that position, or EOS. Returns the generated tokens
/// without the prefix and without EOS.
inline TokenSequence sample(TokenLM& m, const TokenSequence& prefix, const SampleConfig& sc,
                            const Tensor* ref_features = nullptr) {
  const Vocab& v = m.vocab();
  SSVC_CHECK(!prefix.empty(), "sample: empty prefix");
  Generator gen(m);
  std::vector<float> logits;
  std::vector<float> ref_row;
  for (int t : prefix) {
    if (t == v.sep2() && m.config().reference) {
      if (!ref_features) throw DataError("prompt has a reference slot but no reference features were given");
      const Tensor e = m.reference_embedding(*ref_features);
      ref_row.assign(e.data(), e.data() + e.size());
      logits = gen.push(t, &ref_row);
    } else {
      logits = gen.push(t);
    }
  }
  Rng rng(sc.seed);
  TokenSequence out;
  std::vector<int> allowed;
  for (int step = 0; step < sc.max_new; ++step) {
    const int book = gen.code_tokens() % v.nq;
    if (gen.code_tokens() / v.nq >= m.config().max_frames || gen.length() >= m.config().max_len) break;
    allowed.clear();
    for (int t = book * v.k; t < (book + 1) * v.k; ++t) allowed.push_back(t);
    allowed.push_back(v.eos());
    const int tok = choose_token(logits, allowed, sc, rng);
    if (tok == v.eos()) break;
    out.push_back(tok);
    if (step + 1 < sc.max_new) logits = gen.push(tok);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct CodeUtterance {
  int utt_id = 0;
  int speaker_id = 0;
  std::vector<int> content;
  CodeGrid codes;
  Tensor features;  // needed for the reference encoder only
};

struct LMTrainConfig {
  ScheduleConfig schedule{200, 2e-3, 3000, 0.10};
  ad::AdamWConfig adam{5e-4f, 0.9f, 0.95f, 0.01f, 1e-8f};
  int steps = 3000;
  int batch_tokens = 4096;
  double speech_fraction = 0.0;  // share of concatenated reference+target examples
  int log_every = 100;
  std::uint64_t seed = 21;
};

struct TrainExample {
  TokenSequence tokens;
  std::vector<int> targets;  // per input position; -1 = no loss
  const Tensor* ref = nullptr;
};

/// Single-utterance example: [BOS] ([SEP2]) text [SEP] codes [EOS], loss on
/// codes and EOS.
inline TrainExample text_example(const CodeUtterance& u, const Vocab& v, bool reference) {
  TrainExample ex;
  PromptSequence p;
  p.mode = reference ? Mode::TextRef : Mode::Text;
  p.text = u.content;
  p.ref_features = &u.features;
  ex.tokens = build_prompt(p, v);
  const std::size_t prompt = ex.tokens.size();
  const auto codes = flatten_codes(u.codes, v.k);
  ex.tokens.insert(ex.tokens.end(), codes.begin(), codes.end());
  ex.tokens.push_back(v.eos());
  ex.targets.assign(ex.tokens.size(), -1);
  for (std::size_t j = prompt; j < ex.tokens.size(); ++j) ex.targets[j - 1] = ex.tokens[j];
  ex.tokens.pop_back();
  ex.targets.pop_back();
  if (reference) ex.ref = &u.features;
  return ex;
}

/// Speech-prompt example: [BOS] ref_text text [SEP] ref_codes codes [EOS]; the
/// reference codes are conditioning and carry no loss.
inline TrainExample speech_example(const CodeUtterance& ref, const CodeUtterance& u, const Vocab& v) {
  TrainExample ex;
  PromptSequence p;
  p.mode = Mode::Speech;
  p.text = u.content;
  p.ref_text = ref.content;
  p.ref_codes = ref.codes;
  ex.tokens = build_prompt(p, v);
  const std::size_t prompt = ex.tokens.size();
  const auto codes = flatten_codes(u.codes, v.k);
  ex.tokens.insert(ex.tokens.end(), codes.begin(), codes.end());
  ex.tokens.push_back(v.eos());
  ex.targets.assign(ex.tokens.size(), -1);
  for (std::size_t j = prompt; j < ex.tokens.size(); ++j) ex.targets[j - 1] = ex.tokens[j];
  ex.tokens.pop_back();
  ex.targets.pop_back();
  return ex;
}

struct LMLogRecord {
  int step = 0;
  double loss = 0;  // nats per target token
  double lr = 0;
  int tokens = 0;
};

/// Loss of a batch of examples (mean over target tokens).
inline Var batch_loss(TokenLM& m, const Ctx& c, const std::vector<TrainExample>& batch) {
  std::vector<TokenSequence> seqs;
  std::vector<const Tensor*> refs;
  std::vector<int> targets;
  for (const auto& ex : batch) {
    seqs.push_back(ex.tokens);
    if (ex.ref) refs.push_back(ex.ref);
    targets.insert(targets.end(), ex.targets.begin(), ex.targets.end());
  }
  return ad::cross_entropy_logits(m.forward(c, seqs, refs), targets);
}

inline TokenLM train_lm(const std::vector<CodeUtterance>& corpus, const LMConfig& cfg, const LMTrainConfig& tc,
                        const std::function<void(const LMLogRecord&)>& log = {}) {
  if (corpus.empty()) throw DataError("train_lm: empty code corpus");
  TokenLM m(cfg);
  const Vocab& v = cfg.vocab;
  std::vector<std::vector<int>> by_speaker;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& u = corpus[i];
    if (u.codes.nq != v.nq) throw DataError(cat("code corpus has ", u.codes.nq, " codebooks, lm expects ", v.nq));
    if (static_cast<int>(by_speaker.size()) <= u.speaker_id) by_speaker.resize(static_cast<std::size_t>(u.speaker_id + 1));
    by_speaker[static_cast<std::size_t>(u.speaker_id)].push_back(static_cast<int>(i));
  }
  ad::AdamW opt(m.params().all(), tc.adam);
  Rng rng(derive_seed(tc.seed, 0x7A1));
  std::vector<int> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::size_t cursor = 0;
  for (int step = 0; step < tc.steps; ++step) {
    std::vector<TrainExample> batch;
    int tokens = 0;
    while (tokens < tc.batch_tokens) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      const auto& u = corpus[static_cast<std::size_t>(order[cursor++])];
      const auto& peers = by_speaker[static_cast<std::size_t>(u.speaker_id)];
      TrainExample ex;
      if (rng.uniform() < tc.speech_fraction && peers.size() > 1) {
        int r;
        do r = peers[static_cast<std::size_t>(rng.below(static_cast<int>(peers.size())))];
        while (&corpus[static_cast<std::size_t>(r)] == &u);
        ex = speech_example(corpus[static_cast<std::size_t>(r)], u, v);
      } else {
        ex = text_example(u, v, cfg.reference);
      }
      tokens += static_cast<int>(ex.tokens.size());
      batch.push_back(std::move(ex));
    }
    const double lr = lr_schedule(step, tc.schedule);
    Graph g;
    Ctx c{g, m.params(), true};
    opt.zero_grad();
    Var loss = batch_loss(m, c, batch);
    g.backward(loss);
    opt.step(static_cast<float>(lr));
    if (log && (step % std::max(1, tc.log_every) == 0 || step + 1 == tc.steps)) log({step, loss.item(), lr, tokens});
  }
  return m;
}

}  // namespace ssvc::lm
