#pragma once

// Synthetic corpus: speakers, utterance records, manifest and feature storage.

#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssvc/checkpoint.hpp"
#include "ssvc/synth.hpp"

namespace ssvc::corpus {

struct CorpusConfig {
  int speakers = 64;
  int utterances_per_speaker = 200;
  int min_symbols = 5;
  int max_symbols = 12;
  float noise_sigma = 0.02f;
  int train_speakers = 48;
  std::uint64_t seed = 1234;
  double max_speaker_cos = 0.9;
  synth::SynthConfig synth;
};

struct UtteranceRecord {
  int utt_id = 0;
  int speaker_id = 0;
  std::uint64_t speaker_seed = 0;
  std::uint64_t prosody_seed = 0;
  std::vector<int> content;
  float noise_sigma = 0.0f;
  bool train = true;
};

struct Corpus {
  CorpusConfig config;
  std::vector<synth::SpeakerParams> speakers;
  std::vector<UtteranceRecord> records;
  std::vector<synth::Utterance> utterances;  // parallel to records

  [[nodiscard]] std::vector<int> ids(bool train) const {
    std::vector<int> out;
    for (const auto& r : records)
      if (r.train == train) out.push_back(r.utt_id);
    return out;
  }
  [[nodiscard]] const synth::FeatureSequence& features(int utt) const {
    return utterances.at(static_cast<std::size_t>(utt)).features;
  }
  [[nodiscard]] const synth::SpeakerParams& speaker_of(int utt) const {
    return speakers.at(static_cast<std::size_t>(records.at(static_cast<std::size_t>(utt)).speaker_id));
  }
};

inline synth::UtteranceSpec spec_of(const Corpus& c, const UtteranceRecord& r) {
  synth::UtteranceSpec s;
  s.speaker = c.speakers.at(static_cast<std::size_t>(r.speaker_id));
  s.content = r.content;
  s.prosody_seed = r.prosody_seed;
  s.frames_per_symbol = c.config.synth.frames_per_symbol;
  s.noise_sigma = r.noise_sigma;
  return s;
}

inline Corpus generate(const CorpusConfig& cfg, const synth::World& world) {
  SSVC_CHECK(cfg.speakers >= 2 && cfg.utterances_per_speaker >= 1, "corpus needs at least 2 speakers");
  SSVC_CHECK(cfg.train_speakers >= 1 && cfg.train_speakers <= cfg.speakers, "train_speakers out of range");
  SSVC_CHECK(cfg.min_symbols >= 1 && cfg.max_symbols >= cfg.min_symbols, "invalid content length range");
  Corpus c;
  c.config = cfg;
  const auto seeds = synth::select_speaker_seeds(cfg.seed, cfg.speakers, cfg.max_speaker_cos, cfg.synth.speaker_dim);
  for (int s = 0; s < cfg.speakers; ++s)
    c.speakers.push_back(synth::make_speaker(seeds[static_cast<std::size_t>(s)], s, cfg.synth.speaker_dim));
  for (int s = 0; s < cfg.speakers; ++s) {
    for (int u = 0; u < cfg.utterances_per_speaker; ++u) {
      Rng rng(derive_seed(cfg.seed, 0xC0A7E47, static_cast<std::uint64_t>(s * cfg.utterances_per_speaker + u)));
      UtteranceRecord r;
      r.utt_id = static_cast<int>(c.records.size());
      r.speaker_id = s;
      r.speaker_seed = seeds[static_cast<std::size_t>(s)];
      r.prosody_seed = rng.next();
      const int len = cfg.min_symbols + rng.below(cfg.max_symbols - cfg.min_symbols + 1);
      for (int i = 0; i < len; ++i) r.content.push_back(rng.below(cfg.synth.alphabet));
      r.noise_sigma = cfg.noise_sigma;
      r.train = s < cfg.train_speakers;
      c.records.push_back(std::move(r));
    }
  }
  for (const auto& r : c.records) c.utterances.push_back(world.make_utterance(spec_of(c, r)));
  return c;
}

inline nlohmann::json record_json(const UtteranceRecord& r) {
  return {{"utt_id", r.utt_id},   {"speaker_id", r.speaker_id}, {"seed", r.speaker_seed},
          {"prosody_seed", r.prosody_seed}, {"content", r.content}, {"noise_sigma", r.noise_sigma},
          {"split", r.train ? "train" : "heldout"}};
}

inline std::string manifest_jsonl(const Corpus& c) {
  std::string out;
  for (const auto& r : c.records) out += record_json(r).dump() + "\n";
  return out;
}

inline std::vector<UtteranceRecord> parse_manifest(const std::string& text) {
  std::vector<UtteranceRecord> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      UtteranceRecord r;
      r.utt_id = j.at("utt_id").get<int>();
      r.speaker_id = j.at("speaker_id").get<int>();
      r.speaker_seed = j.at("seed").get<std::uint64_t>();
      r.prosody_seed = j.at("prosody_seed").get<std::uint64_t>();
      r.content = j.at("content").get<std::vector<int>>();
      r.noise_sigma = j.at("noise_sigma").get<float>();
      const auto split = j.at("split").get<std::string>();
      if (split != "train" && split != "heldout") throw DataError(cat("unknown split '", split, "'"));
      r.train = split == "train";
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(cat("manifest line ", lineno, ": ", e.what()));
    }
  }
  return out;
}

inline TensorTable features_table(const Corpus& c) {
  TensorTable t;
  for (const auto& r : c.records)
    t.emplace_back(cat("utt/", r.utt_id), c.utterances[static_cast<std::size_t>(r.utt_id)].features.frames);
  return t;
}

inline void save(const Corpus& c, const std::filesystem::path& dir) {
  write_file_atomic(dir / "manifest.jsonl", manifest_jsonl(c));
  save_checkpoint(features_table(c), dir / "features.bin");
}

/// Rebuilds a corpus from a manifest plus the feature table. Prosody contours
/// are regenerated from their seeds; speakers from their seeds.
inline Corpus load(const std::filesystem::path& dir, const CorpusConfig& cfg) {
  Corpus c;
  c.config = cfg;
  c.records = parse_manifest(read_file(dir / "manifest.jsonl"));
  const auto feats = load_checkpoint(dir / "features.bin");
  if (feats.size() != c.records.size())
    throw DataError(cat("features.bin holds ", feats.size(), " utterances but manifest lists ", c.records.size()));
  int max_spk = -1;
  for (std::size_t i = 0; i < c.records.size(); ++i) {
    const auto& r = c.records[i];
    if (r.utt_id != static_cast<int>(i)) throw DataError(cat("manifest utt_id ", r.utt_id, " out of order at line ", i + 1));
    max_spk = std::max(max_spk, r.speaker_id);
  }
  c.speakers.resize(static_cast<std::size_t>(max_spk + 1));
  for (const auto& r : c.records)
    c.speakers[static_cast<std::size_t>(r.speaker_id)] = synth::make_speaker(r.speaker_seed, r.speaker_id, cfg.synth.speaker_dim);
  for (std::size_t i = 0; i < c.records.size(); ++i) {
    const auto& r = c.records[i];
    synth::Utterance u;
    u.features.frames = feats[i].second;
    if (feats[i].first != cat("utt/", r.utt_id)) throw DataError(cat("features.bin entry ", feats[i].first, " out of order"));
    const int T = static_cast<int>(r.content.size()) * cfg.synth.frames_per_symbol;
    if (u.features.frames.rank() != 2 || u.features.length() != T || u.features.dim() != cfg.synth.feature_dim)
      throw DataError(cat("features for utterance ", r.utt_id, " have shape ", shape_str(u.features.frames.shape())));
    u.prosody = synth::World::prosody_contour(r.prosody_seed, T);
    c.utterances.push_back(std::move(u));
  }
  return c;
}

}  // namespace ssvc::corpus
