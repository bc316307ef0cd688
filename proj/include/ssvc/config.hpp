#pragma once

// Experiment configuration: a JSON document with corpus, codec, lm and eval
// sections. Unknown keys are rejected; the resolved configuration (every
// default filled in) is what gets archived next to outputs.

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>

#include <json.hpp>

#include "ssvc/codec.hpp"
#include "ssvc/corpus.hpp"
#include "ssvc/token_lm.hpp"

namespace ssvc::config {

struct LMSection {
  std::string variant = "nr";  // "nr" text-only, "r" with reference encoder
  int layers = 4;
  int dim = 128;
  int ff = 512;
  int heads = 4;
  int max_len = 512;
  int max_text = 64;
  int max_frames = 256;
  int steps = 120000;
  int warmup_steps = 10000;
  double peak_lr = 5e-4;
  int total_steps = 120000;
  double floor_fraction = 0.10;
  int batch_tokens = 4096;
  double speech_fraction = 0.0;
  float beta1 = 0.9f;
  float beta2 = 0.95f;
  float weight_decay = 0.01f;
  int log_every = 100;
  std::uint64_t seed = 21;
};

struct EvalSection {
  int conversion_pairs = 200;
  int tts_generations = 200;
  int probe_utterances_per_speaker = 100;
  int retrieval_batches = 20;
  float temperature = 0.7f;
  int top_k = 32;
  bool wer = true;
  bool secs = true;
  bool f0 = true;
  bool probe = true;
  std::uint64_t seed = 99;
};

struct ExperimentConfig {
  corpus::CorpusConfig corpus;
  codec::CodecConfig codec;
  LMSection lm;
  EvalSection eval;
};

/// Calls f(section, key, field) for every configurable field.
template <typename C, typename F>
void visit_fields(C& c, F&& f) {
  f("corpus", "speakers", c.corpus.speakers);
  f("corpus", "utterances_per_speaker", c.corpus.utterances_per_speaker);
  f("corpus", "min_symbols", c.corpus.min_symbols);
  f("corpus", "max_symbols", c.corpus.max_symbols);
  f("corpus", "noise_sigma", c.corpus.noise_sigma);
  f("corpus", "train_speakers", c.corpus.train_speakers);
  f("corpus", "max_speaker_cos", c.corpus.max_speaker_cos);
  f("corpus", "seed", c.corpus.seed);
  f("corpus", "world_seed", c.corpus.synth.world_seed);

  f("codec", "layers", c.codec.encoder.layers);
  f("codec", "dim", c.codec.encoder.dim);
  f("codec", "norm_from", c.codec.encoder.norm_from);
  f("codec", "encoder_gain", c.codec.encoder.gain);
  f("codec", "encoder_seed", c.codec.encoder.seed);
  f("codec", "d_spk", c.codec.d_spk);
  f("codec", "spk_layers", c.codec.spk_layers);
  f("codec", "spk_heads", c.codec.spk_heads);
  f("codec", "spk_ff", c.codec.spk_ff);
  f("codec", "dec_hidden", c.codec.dec_hidden);
  f("codec", "nq", c.codec.nq);
  f("codec", "codebook_size", c.codec.codebook_size);
  f("codec", "ema_decay", c.codec.ema_decay);
  f("codec", "dead_after", c.codec.dead_after);
  f("codec", "lambda_recon", c.codec.weights.recon);
  f("codec", "lambda_contrastive", c.codec.weights.contrastive);
  f("codec", "lambda_disentangle", c.codec.weights.disentangle);
  f("codec", "lambda_commitment", c.codec.weights.commitment);
  f("codec", "lr", c.codec.adam.lr);
  f("codec", "beta1", c.codec.adam.beta1);
  f("codec", "beta2", c.codec.adam.beta2);
  f("codec", "weight_decay", c.codec.adam.weight_decay);
  f("codec", "mix_lr_scale", c.codec.mix_lr_scale);
  f("codec", "batch", c.codec.batch);
  f("codec", "chunk", c.codec.chunk);
  f("codec", "steps", c.codec.steps);
  f("codec", "temperature_init", c.codec.temperature_init);
  f("codec", "log_every", c.codec.log_every);
  f("codec", "seed", c.codec.seed);

  f("lm", "variant", c.lm.variant);
  f("lm", "layers", c.lm.layers);
  f("lm", "dim", c.lm.dim);
  f("lm", "ff", c.lm.ff);
  f("lm", "heads", c.lm.heads);
  f("lm", "max_len", c.lm.max_len);
  f("lm", "max_text", c.lm.max_text);
  f("lm", "max_frames", c.lm.max_frames);
  f("lm", "steps", c.lm.steps);
  f("lm", "warmup_steps", c.lm.warmup_steps);
  f("lm", "peak_lr", c.lm.peak_lr);
  f("lm", "total_steps", c.lm.total_steps);
  f("lm", "floor_fraction", c.lm.floor_fraction);
  f("lm", "batch_tokens", c.lm.batch_tokens);
  f("lm", "speech_fraction", c.lm.speech_fraction);
  f("lm", "beta1", c.lm.beta1);
  f("lm", "beta2", c.lm.beta2);
  f("lm", "weight_decay", c.lm.weight_decay);
  f("lm", "log_every", c.lm.log_every);
  f("lm", "seed", c.lm.seed);

  f("eval", "conversion_pairs", c.eval.conversion_pairs);
  f("eval", "tts_generations", c.eval.tts_generations);
  f("eval", "probe_utterances_per_speaker", c.eval.probe_utterances_per_speaker);
  f("eval", "retrieval_batches", c.eval.retrieval_batches);
  f("eval", "temperature", c.eval.temperature);
  f("eval", "top_k", c.eval.top_k);
  f("eval", "wer", c.eval.wer);
  f("eval", "secs", c.eval.secs);
  f("eval", "f0", c.eval.f0);
  f("eval", "probe", c.eval.probe);
  f("eval", "seed", c.eval.seed);
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  visit_fields(c, [&](const char* sec, const char* key, const auto& v) { j[sec][key] = v; });
  return j;
}

/// Cross-field checks; throws UsageError.
inline void validate(const ExperimentConfig& c) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw UsageError("config: " + msg);
  };
  need(c.corpus.speakers >= 2, "corpus.speakers must be at least 2");
  need(c.corpus.utterances_per_speaker >= 2, "corpus.utterances_per_speaker must be at least 2");
  need(c.corpus.train_speakers >= 1 && c.corpus.train_speakers < c.corpus.speakers,
       "corpus.train_speakers must leave at least one held-out speaker");
  need(c.corpus.min_symbols >= 2 && c.corpus.max_symbols >= c.corpus.min_symbols, "corpus symbol range invalid");
  need(c.codec.nq >= 1 && c.codec.codebook_size >= 2, "codec.nq and codec.codebook_size must be positive");
  need(c.codec.batch >= 2 && c.codec.batch <= c.corpus.train_speakers, "codec.batch must be in [2, train_speakers]");
  need(c.codec.chunk >= 1 && c.codec.chunk <= c.corpus.min_symbols * c.corpus.synth.frames_per_symbol,
       "codec.chunk exceeds the shortest utterance");
  need(c.codec.encoder.norm_from >= 1 && c.codec.encoder.norm_from <= c.codec.encoder.layers, "codec.norm_from out of range");
  need(c.codec.steps >= 0 && c.lm.steps >= 0, "step counts must be nonnegative");
  need(c.lm.variant == "nr" || c.lm.variant == "r", "lm.variant must be \"nr\" or \"r\"");
  need(c.lm.dim % c.lm.heads == 0, "lm.dim must be divisible by lm.heads");
  need(c.lm.warmup_steps < c.lm.total_steps, "lm.warmup_steps must be below lm.total_steps");
  need(c.lm.speech_fraction >= 0 && c.lm.speech_fraction <= 1, "lm.speech_fraction must be in [0,1]");
  need(c.eval.top_k >= 0, "eval.top_k must be nonnegative");
  (void)c.codec.weights.normalized();
}

/// Overlays `j` onto the defaults. Unknown sections or keys throw UsageError.
inline ExperimentConfig from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw UsageError("config: top level must be an object");
  ExperimentConfig c;
  std::set<std::string> sections, keys;
  visit_fields(c, [&](const char* sec, const char* key, const auto&) {
    sections.insert(sec);
    keys.insert(std::string(sec) + "." + key);
  });
  for (const auto& [sec, body] : j.items()) {
    if (!sections.count(sec)) throw UsageError(cat("config: unknown section '", sec, "'"));
    if (!body.is_object()) throw UsageError(cat("config: section '", sec, "' must be an object"));
    for (const auto& [key, v] : body.items())
      if (!keys.count(sec + "." + key)) throw UsageError(cat("config: unknown key '", sec, ".", key, "'"));
  }
  visit_fields(c, [&](const char* sec, const char* key, auto& field) {
    if (!j.contains(sec) || !j[sec].contains(key)) return;
    try {
      j[sec][key].get_to(field);
    } catch (const nlohmann::json::exception&) {
      throw UsageError(cat("config: bad value for '", sec, ".", key, "': ", j[sec][key].dump()));
    }
  });
  validate(c);
  return c;
}

inline ExperimentConfig load(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError(cat("config ", path.string(), ": ", e.what()));
  }
  return from_json(j);
}

inline std::string dump(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

inline lm::LMConfig lm_config(const ExperimentConfig& c) {
  lm::LMConfig m;
  m.layers = c.lm.layers;
  m.dim = c.lm.dim;
  m.ff = c.lm.ff;
  m.heads = c.lm.heads;
  m.max_len = c.lm.max_len;
  m.max_text = c.lm.max_text;
  m.max_frames = c.lm.max_frames;
  m.reference = c.lm.variant == "r";
  m.feature_dim = c.corpus.synth.feature_dim;
  m.vocab = {c.codec.nq, c.codec.codebook_size, c.corpus.synth.alphabet};
  m.seed = c.lm.seed;
  return m;
}

inline lm::LMTrainConfig lm_train_config(const ExperimentConfig& c) {
  lm::LMTrainConfig t;
  t.schedule = {c.lm.warmup_steps, c.lm.peak_lr, c.lm.total_steps, c.lm.floor_fraction};
  t.adam.beta1 = c.lm.beta1;
  t.adam.beta2 = c.lm.beta2;
  t.adam.weight_decay = c.lm.weight_decay;
  t.steps = c.lm.steps;
  t.batch_tokens = c.lm.batch_tokens;
  t.speech_fraction = c.lm.speech_fraction;
  t.log_every = c.lm.log_every;
  t.seed = c.lm.seed;
  return t;
}

}  // namespace ssvc::config
