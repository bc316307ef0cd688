#pragma once

// Experiment-level evaluation: disentanglement probes, voice-conversion
// metrics, TTS generations per prompting mode, and the EvalReport that renders
// them as text tables and JSON lines.

#include <cstdio>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ssvc/codec.hpp"
#include "ssvc/corpus.hpp"
#include "ssvc/metrics.hpp"
#include "ssvc/stats.hpp"
#include "ssvc/token_lm.hpp"

namespace ssvc::eval {

struct EvalSettings {
  int conversion_pairs = 200;
  int tts_generations = 200;
  int probe_utterances_per_speaker = 100;
  int retrieval_batches = 20;
  int retrieval_batch = 16;
  int chunk = 8;
  float temperature = 0.7f;
  int top_k = 32;
  std::uint64_t seed = 99;
};

// ---------------------------------------------------------------------------
// Report

struct MetricRow {
  std::string table;
  std::string system;
  std::vector<std::pair<std::string, double>> values;
};

struct TestRow {
  std::string table;
  std::string a, b, metric;
  int n = 0;
  std::optional<stats::TTest> result;  // empty when undefined
  std::string note;
};

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

struct EvalReport {
  std::vector<MetricRow> rows;
  std::vector<TestRow> tests;

  [[nodiscard]] std::optional<double> get(const std::string& system, const std::string& metric) const {
    for (const auto& r : rows)
      if (r.system == system)
        for (const auto& [k, v] : r.values)
          if (k == metric) return v;
    return std::nullopt;
  }

  /// One table per group, in first-appearance order.
  [[nodiscard]] std::string text() const {
    std::vector<std::string> tables;
    for (const auto& r : rows)
      if (std::find(tables.begin(), tables.end(), r.table) == tables.end()) tables.push_back(r.table);
    std::string out;
    for (const auto& t : tables) {
      out += "== " + t + " ==\n";
      std::vector<std::string> cols;
      for (const auto& r : rows)
        if (r.table == t)
          for (const auto& [k, v] : r.values)
            if (std::find(cols.begin(), cols.end(), k) == cols.end()) cols.push_back(k);
      std::size_t w0 = 6;
      for (const auto& r : rows)
        if (r.table == t) w0 = std::max(w0, r.system.size());
      auto pad = [](std::string s, std::size_t w) {
        if (s.size() < w) s.append(w - s.size(), ' ');
        return s;
      };
      out += pad("system", w0);
      for (const auto& c : cols) out += "  " + pad(c, std::max<std::size_t>(c.size(), 9));
      out += "\n";
      for (const auto& r : rows) {
        if (r.table != t) continue;
        out += pad(r.system, w0);
        for (const auto& c : cols) {
          std::string cell = "-";
          for (const auto& [k, v] : r.values)
            if (k == c) cell = fmt(v);
          out += "  " + pad(cell, std::max<std::size_t>(c.size(), 9));
        }
        out += "\n";
      }
      out += "\n";
    }
    if (!tests.empty()) {
      out += "== paired t-tests ==\n";
      for (const auto& s : tests) {
        out += s.a + " vs " + s.b + " [" + s.metric + ", n=" + std::to_string(s.n) + "]: ";
        if (s.result)
          out += "t=" + fmt(s.result->t) + " p=" + fmt(s.result->p) + " mean_diff=" + fmt(s.result->mean_difference);
        else
          out += s.note;
        out += "\n";
      }
    }
    return out;
  }

  [[nodiscard]] std::string jsonl() const {
    std::string out;
    for (const auto& r : rows) {
      nlohmann::ordered_json j;
      j["kind"] = "metric";
      j["table"] = r.table;
      j["system"] = r.system;
      for (const auto& [k, v] : r.values) j[k] = v;
      out += j.dump() + "\n";
    }
    for (const auto& s : tests) {
      nlohmann::ordered_json j;
      j["kind"] = "ttest";
      j["table"] = s.table;
      j["a"] = s.a;
      j["b"] = s.b;
      j["metric"] = s.metric;
      j["n"] = s.n;
      if (s.result) {
        j["t"] = s.result->t;
        j["p"] = s.result->p;
        j["mean_difference"] = s.result->mean_difference;
      } else {
        j["note"] = s.note;
      }
      out += j.dump() + "\n";
    }
    return out;
  }
};

inline TestRow compare(const std::string& table, const std::string& a, const std::string& b, const std::string& metric,
                       const std::vector<double>& xa, const std::vector<double>& xb) {
  TestRow r{table, a, b, metric, static_cast<int>(xa.size()), std::nullopt, ""};
  try {
    r.result = stats::paired_ttest(xa, xb);
    if (r.result->t == 0.0 && r.result->mean_difference == 0.0) r.note = "no difference";
  } catch (const stats::ZeroVarianceError& e) {
    r.note = cat("undefined: constant difference ", fmt(e.mean_difference));
  } catch (const DataError& e) {
    r.note = e.what();
  }
  return r;
}

// ---------------------------------------------------------------------------
// Codec evaluation

struct CodecResult {
  double probe_codes = 0, probe_speaker = 0, chance = 0, retrieval = 0;
  double secs_target = 0, secs_source = 0, f0_source = 0, f0_other = 0;
  double wer_converted = 0, wer_reconstruction = 0;
  int pairs = 0;
};

inline std::vector<std::vector<int>> heldout_by_speaker(const corpus::Corpus& cp) {
  std::vector<std::vector<int>> by(cp.speakers.size());
  for (const auto& r : cp.records)
    if (!r.train) by[static_cast<std::size_t>(r.speaker_id)].push_back(r.utt_id);
  return by;
}

/// Linear probes on held-out speakers: time-averaged quantized non-speaker
/// features vs speaker embeddings, utterances alternating between the probe's
/// train and eval halves.
inline void probe_eval(codec::Codec& m, const corpus::Corpus& cp, const EvalSettings& s, CodecResult& r) {
  std::vector<std::vector<float>> xc_tr, xc_ev, xs_tr, xs_ev;
  std::vector<int> y_tr, y_ev;
  int speakers = 0;
  for (const auto& utts : heldout_by_speaker(cp)) {
    if (utts.empty()) continue;
    ++speakers;
    const int n = std::min<int>(s.probe_utterances_per_speaker, static_cast<int>(utts.size()));
    for (int i = 0; i < n; ++i) {
      const int u = utts[static_cast<std::size_t>(i)];
      const Tensor& f = cp.features(u).frames;
      const auto q = m.quantize(f);
      const Tensor e = m.speaker_embeddings({&f});
      const bool tr = i % 2 == 0;
      (tr ? xc_tr : xc_ev).push_back(metrics::time_average(q.chat));
      (tr ? xs_tr : xs_ev).push_back(std::vector<float>(e.values().begin(), e.values().end()));
      (tr ? y_tr : y_ev).push_back(cp.records[static_cast<std::size_t>(u)].speaker_id);
    }
  }
  if (speakers < 2 || xc_ev.empty()) throw DataError("probe evaluation needs at least 2 held-out speakers with 2 utterances");
  r.chance = 1.0 / speakers;
  r.probe_codes = metrics::speaker_probe(metrics::stack_rows(xc_tr), y_tr, metrics::stack_rows(xc_ev), y_ev);
  r.probe_speaker = metrics::speaker_probe(metrics::stack_rows(xs_tr), y_tr, metrics::stack_rows(xs_ev), y_ev);
}

/// Positive-pair identification among chunk pairs of distinct held-out
/// speakers.
inline double retrieval_eval(codec::Codec& m, const corpus::Corpus& cp, const EvalSettings& s) {
  std::vector<int> spk;
  const auto by = heldout_by_speaker(cp);
  for (std::size_t i = 0; i < by.size(); ++i)
    if (!by[i].empty()) spk.push_back(static_cast<int>(i));
  const int batch = std::min<int>(s.retrieval_batch, static_cast<int>(spk.size()));
  if (batch < 2 || s.retrieval_batches < 1) return 0.0;
  Rng rng(derive_seed(s.seed, 0x2E7));
  double total = 0.0;
  for (int b = 0; b < s.retrieval_batches; ++b) {
    rng.shuffle(spk);
    std::vector<Tensor> A, B;
    for (int i = 0; i < batch; ++i) {
      const auto& utts = by[static_cast<std::size_t>(spk[static_cast<std::size_t>(i)])];
      const auto& f = cp.features(utts[static_cast<std::size_t>(rng.below(static_cast<int>(utts.size())))]);
      auto [x, y] = synth::chunk_pair(f, std::min(s.chunk, f.length()), rng.next());
      A.push_back(std::move(x.frames));
      B.push_back(std::move(y.frames));
    }
    total += codec::retrieval_accuracy(m.speaker_embeddings(codec::ptrs(A)), m.speaker_embeddings(codec::ptrs(B)));
  }
  return total / s.retrieval_batches;
}

/// Held-out conversion pairs (source and target from different speakers).
inline void conversion_eval(const synth::World& w, codec::Codec& m, const corpus::Corpus& cp, const EvalSettings& s,
                            CodecResult& r) {
  const auto ho = cp.ids(false);
  if (ho.size() < 2) throw DataError("conversion evaluation needs held-out utterances");
  Rng rng(derive_seed(s.seed, 0xC047));
  const int n = s.conversion_pairs;
  double st = 0, ss = 0, fs = 0, fo = 0, wc = 0, wr = 0;
  for (int i = 0; i < n; ++i) {
    const int a = ho[static_cast<std::size_t>(rng.below(static_cast<int>(ho.size())))];
    int b, tries = 0;
    do {
      b = ho[static_cast<std::size_t>(rng.below(static_cast<int>(ho.size())))];
      if (++tries > 10000) throw DataError("conversion evaluation needs at least 2 held-out speakers");
    } while (cp.records[static_cast<std::size_t>(b)].speaker_id == cp.records[static_cast<std::size_t>(a)].speaker_id);
    int o;
    do o = ho[static_cast<std::size_t>(rng.below(static_cast<int>(ho.size())))];
    while (o == a);
    const Tensor& src = cp.features(a).frames;
    const Tensor& tgt = cp.features(b).frames;
    const Tensor conv = m.convert_voice(src, tgt);
    const Tensor rec = m.reconstruct(src);
    st += metrics::secs(w, conv, tgt);
    ss += metrics::secs(w, conv, src);
    const auto pc = w.extract_prosody(synth::FeatureSequence{conv}, cp.speaker_of(b));
    fs += metrics::f0_correlation(pc, cp.utterances[static_cast<std::size_t>(a)].prosody);
    fo += metrics::f0_correlation_truncated(pc, cp.utterances[static_cast<std::size_t>(o)].prosody);
    const auto& content = cp.records[static_cast<std::size_t>(a)].content;
    wc += metrics::wer_analog(w, conv, content, cp.speaker_of(b));
    wr += metrics::wer_analog(w, rec, content, cp.speaker_of(a));
  }
  r.pairs = n;
  if (n > 0) {
    r.secs_target = st / n;
    r.secs_source = ss / n;
    r.f0_source = fs / n;
    r.f0_other = fo / n;
    r.wer_converted = wc / n;
    r.wer_reconstruction = wr / n;
  }
}

inline CodecResult codec_eval(const synth::World& w, codec::Codec& m, const corpus::Corpus& cp, const EvalSettings& s,
                              bool probes = true, bool conversion = true) {
  CodecResult r;
  if (probes) {
    probe_eval(m, cp, s, r);
    r.retrieval = retrieval_eval(m, cp, s);
  }
  if (conversion) conversion_eval(w, m, cp, s, r);
  return r;
}

// ---------------------------------------------------------------------------
// TTS evaluation

struct TtsItem {
  int target = 0;     // utterance whose content is synthesized
  int reference = 0;  // same-speaker utterance used as prompt / speaker source
  std::uint64_t seed = 0;
};

/// Held-out (target, reference) pairs of distinct utterances by one speaker.
inline std::vector<TtsItem> tts_items(const corpus::Corpus& cp, int n, std::uint64_t seed) {
  const auto by = heldout_by_speaker(cp);
  std::vector<int> ho;
  for (int u : cp.ids(false))
    if (by[static_cast<std::size_t>(cp.records[static_cast<std::size_t>(u)].speaker_id)].size() >= 2) ho.push_back(u);
  if (ho.empty()) throw DataError("tts evaluation needs a held-out speaker with 2 utterances");
  Rng rng(derive_seed(seed, 0x775));
  std::vector<TtsItem> out;
  for (int i = 0; i < n; ++i) {
    TtsItem it;
    it.target = ho[static_cast<std::size_t>(rng.below(static_cast<int>(ho.size())))];
    const auto& peers = by[static_cast<std::size_t>(cp.records[static_cast<std::size_t>(it.target)].speaker_id)];
    do it.reference = peers[static_cast<std::size_t>(rng.below(static_cast<int>(peers.size())))];
    while (it.reference == it.target);
    it.seed = derive_seed(seed, 0x5A3, static_cast<std::uint64_t>(i));
    out.push_back(it);
  }
  return out;
}

struct Generation {
  lm::TokenSequence tokens;
  codec::CodeGrid grid;
  Tensor features;
};

/// Prompts the LM for the target content, then decodes the codes with the
/// reference's speaker embedding.
inline Generation synthesize(codec::Codec& m, lm::TokenLM& model, lm::Mode mode, const std::vector<int>& text,
                             const corpus::Corpus& cp, int reference, const lm::SampleConfig& sc,
                             const std::function<void(const std::string&)>& warn = {}) {
  const auto& v = model.vocab();
  const Tensor& ref = cp.features(reference).frames;
  lm::PromptSequence p;
  p.mode = mode;
  p.text = text;
  if (mode == lm::Mode::Speech) {
    p.ref_text = cp.records[static_cast<std::size_t>(reference)].content;
    p.ref_codes = m.quantize(ref).grid;
  }
  if (mode == lm::Mode::TextRef) p.ref_features = &ref;
  Generation g;
  g.tokens = lm::sample(model, lm::build_prompt(p, v), sc, mode == lm::Mode::TextRef ? &ref : nullptr);
  g.grid = lm::unflatten_tokens(g.tokens, v.nq, v.k, warn);
  const Tensor s = m.speaker_embeddings({&ref});
  g.features = g.grid.frames > 0 ? m.decode_grid(g.grid, s.values()) : Tensor::matrix(0, cp.config.synth.feature_dim);
  return g;
}

struct TtsResult {
  std::vector<double> wer;   // per item
  std::vector<double> secs;  // per item with at least two symbols of output, else NaN
  double mean_wer = 0;
  double mean_secs = 0;
  int empty = 0;
};

inline TtsResult tts_eval(const synth::World& w, codec::Codec& m, lm::TokenLM& model, lm::Mode mode,
                          const corpus::Corpus& cp, const std::vector<TtsItem>& items, const EvalSettings& s) {
  TtsResult r;
  const int r_sym = cp.config.synth.frames_per_symbol;
  int nsecs = 0;
  for (const auto& it : items) {
    lm::SampleConfig sc;
    sc.temperature = s.temperature;
    sc.top_k = s.top_k;
    sc.seed = it.seed;
    sc.max_new = model.config().max_len;
    const auto& content = cp.records[static_cast<std::size_t>(it.target)].content;
    const Generation g = synthesize(m, model, mode, content, cp, it.reference, sc);
    const auto& spk = cp.speaker_of(it.target);
    const double wer = g.features.rows() > 0 ? metrics::wer_analog(w, g.features, content, spk) : 1.0;
    r.wer.push_back(wer);
    r.mean_wer += wer;
    if (g.features.rows() >= 2 * r_sym) {
      const double v = metrics::secs(w, g.features, cp.features(it.reference).frames);
      r.secs.push_back(v);
      r.mean_secs += v;
      ++nsecs;
    } else {
      r.secs.push_back(std::numeric_limits<double>::quiet_NaN());
      ++r.empty;
    }
  }
  if (!items.empty()) r.mean_wer /= static_cast<double>(items.size());
  if (nsecs > 0) r.mean_secs /= nsecs;
  return r;
}

// ---------------------------------------------------------------------------
// Report assembly

inline void add_codec_rows(EvalReport& rep, const CodecResult& r, bool probes, bool conversion, bool wer, bool secs, bool f0) {
  if (probes) {
    rep.rows.push_back({"disentanglement (added probe check)", "quantized non-speaker codes",
                        {{"probe_accuracy", r.probe_codes}, {"chance", r.chance}}});
    rep.rows.push_back({"disentanglement (added probe check)", "speaker embedding",
                        {{"probe_accuracy", r.probe_speaker}, {"chance", r.chance}, {"retrieval", r.retrieval}}});
  }
  if (conversion) {
    std::vector<std::pair<std::string, double>> conv, rec;
    if (wer) conv.emplace_back("wer_analog", r.wer_converted), rec.emplace_back("wer_analog", r.wer_reconstruction);
    if (secs) conv.emplace_back("secs_target", r.secs_target), conv.emplace_back("secs_source", r.secs_source);
    if (f0) conv.emplace_back("f0_corr_source", r.f0_source), conv.emplace_back("f0_corr_other", r.f0_other);
    conv.emplace_back("pairs", r.pairs);
    rep.rows.push_back({"voice conversion", "converted", conv});
    if (!rec.empty()) rep.rows.push_back({"voice conversion", "reconstruction", rec});
  }
}

inline void add_tts_row(EvalReport& rep, const std::string& system, const TtsResult& r, bool wer, bool secs) {
  std::vector<std::pair<std::string, double>> v;
  if (wer) v.emplace_back("wer_analog", r.mean_wer);
  if (secs) v.emplace_back("secs_ref", r.mean_secs);
  v.emplace_back("generations", static_cast<double>(r.wer.size()));
  v.emplace_back("short_outputs", r.empty);
  rep.rows.push_back({"tts", system, v});
}

}  // namespace ssvc::eval
