#pragma once

// Command-line surface: gen-data, train-codec, encode, train-lm, decode,
// convert, tts, eval and stats over one experiment directory.
//
// Layout of an experiment directory:
//   corpus/manifest.jsonl, corpus/features.bin   gen-data
//   codec.ckpt, train-codec.log.jsonl            train-codec
//   codes.bin                                    encode
//   lm-nr.ckpt / lm-r.ckpt, train-lm-*.log.jsonl train-lm
//   report.txt, report.jsonl                     eval
//   <command>.config.json                        every command

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ssvc/checkpoint.hpp"
#include "ssvc/codec.hpp"
#include "ssvc/config.hpp"
#include "ssvc/corpus.hpp"
#include "ssvc/evaluate.hpp"
#include "ssvc/stats.hpp"
#include "ssvc/token_lm.hpp"

namespace ssvc::pipeline {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Code corpus file

inline TensorTable code_corpus_table(const std::vector<lm::CodeUtterance>& utts, int nq, int k) {
  TensorTable t;
  t.emplace_back("meta/nq_k", Tensor({2}, std::vector<float>{static_cast<float>(nq), static_cast<float>(k)}));
  for (const auto& u : utts) {
    const std::string base = cat("code/", u.utt_id);
    t.emplace_back(base + "/speaker", Tensor({1}, std::vector<float>{static_cast<float>(u.speaker_id)}));
    const int len = static_cast<int>(u.content.size());
    t.emplace_back(base + "/content", Tensor({len}, std::vector<float>(u.content.begin(), u.content.end())));
    t.emplace_back(base + "/grid", u.codes.to_tensor());
  }
  return t;
}

struct CodeCorpus {
  int nq = 0, k = 0;
  std::vector<lm::CodeUtterance> utts;
};

inline CodeCorpus parse_code_corpus(const TensorTable& t) {
  CodeCorpus c;
  if (t.empty() || t[0].first != "meta/nq_k" || t[0].second.size() != 2) throw DataError("code corpus: missing meta/nq_k");
  c.nq = static_cast<int>(t[0].second[0]);
  c.k = static_cast<int>(t[0].second[1]);
  if ((t.size() - 1) % 3 != 0) throw DataError("code corpus: entries are not speaker/content/grid triples");
  for (std::size_t i = 1; i < t.size(); i += 3) {
    const auto& [ns, spk] = t[i];
    const auto& [nc, content] = t[i + 1];
    const auto& [ng, grid] = t[i + 2];
    const auto slash = ns.rfind('/');
    if (ns.rfind("code/", 0) != 0 || slash == std::string::npos || ns.substr(slash) != "/speaker" ||
        nc != ns.substr(0, slash) + "/content" || ng != ns.substr(0, slash) + "/grid")
      throw DataError(cat("code corpus: unexpected entry '", ns, "'"));
    lm::CodeUtterance u;
    try {
      u.utt_id = std::stoi(ns.substr(5, slash - 5));
    } catch (const std::exception&) {
      throw DataError(cat("code corpus: bad utterance id in '", ns, "'"));
    }
    if (spk.size() != 1) throw DataError(cat("code corpus: bad speaker entry for utterance ", u.utt_id));
    u.speaker_id = static_cast<int>(spk[0]);
    for (float v : content.values()) u.content.push_back(static_cast<int>(v));
    if (grid.rank() != 2 || grid.cols() != c.nq) throw DataError(cat("code corpus: grid of utterance ", u.utt_id, " is not T x ", c.nq));
    u.codes = codec::CodeGrid::from_tensor(grid);
    for (int v : u.codes.idx)
      if (v < 0 || v >= c.k) throw DataError(cat("code corpus: code ", v, " of utterance ", u.utt_id, " outside [0,", c.k, ")"));
    c.utts.push_back(std::move(u));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Command context

struct Options {
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string data;
  std::string variant;
  std::string input;
  std::string mode = "text";
  std::string text;
  int utt = -1;
  int ref = -1;
  int source = -1;
  std::optional<float> temperature;
  std::optional<int> top_k;
};

/// --seed replaces every seed that drives sampling or training.
inline void apply_seed(config::ExperimentConfig& c, std::uint64_t seed) {
  c.corpus.seed = seed;
  c.codec.seed = derive_seed(seed, 1);
  c.lm.seed = derive_seed(seed, 2);
  c.eval.seed = derive_seed(seed, 3);
}

inline eval::EvalSettings eval_settings(const config::ExperimentConfig& c) {
  eval::EvalSettings s;
  s.conversion_pairs = c.eval.conversion_pairs;
  s.tts_generations = c.eval.tts_generations;
  s.probe_utterances_per_speaker = c.eval.probe_utterances_per_speaker;
  s.retrieval_batches = c.eval.retrieval_batches;
  s.retrieval_batch = c.codec.batch;
  s.chunk = c.codec.chunk;
  s.temperature = c.eval.temperature;
  s.top_k = c.eval.top_k;
  s.seed = c.eval.seed;
  return s;
}

class Session {
 public:
  Session(Options o, std::ostream& out) : o_(std::move(o)), out_(out) {
    cfg_ = o_.config_path.empty() ? config::ExperimentConfig{} : config::load(o_.config_path);
    if (o_.seed) apply_seed(cfg_, *o_.seed);
    if (!o_.variant.empty()) {
      if (o_.variant != "nr" && o_.variant != "r") throw UsageError("--variant must be nr or r");
      cfg_.lm.variant = o_.variant;
    }
    out_dir_ = o_.out;
    data_dir_ = o_.data.empty() ? out_dir_ : fs::path(o_.data);
    fs::create_directories(out_dir_);
    write_file_atomic(out_dir_ / (o_.command + ".config.json"), config::dump(cfg_));
    world_.emplace(cfg_.corpus.synth);
  }

  int run() {
    const std::string& c = o_.command;
    if (c == "gen-data") return gen_data();
    if (c == "train-codec") return train_codec();
    if (c == "encode") return encode();
    if (c == "train-lm") return train_lm();
    if (c == "decode") return decode();
    if (c == "convert") return convert();
    if (c == "tts") return tts();
    if (c == "eval") return evaluate();
    if (c == "stats") return stats_cmd();
    throw UsageError(cat("unknown command '", c, "'"));
  }

 private:
  corpus::Corpus load_corpus() const { return corpus::load(data_dir_ / "corpus", cfg_.corpus); }

  codec::Codec load_codec() const {
    codec::Codec m(cfg_.codec);
    m.load_table(load_checkpoint(data_dir_ / "codec.ckpt"));
    return m;
  }

  lm::TokenLM load_lm(const std::string& variant) const {
    auto c = cfg_;
    c.lm.variant = variant;
    lm::TokenLM m(config::lm_config(c));
    m.load_table(load_checkpoint(data_dir_ / ("lm-" + variant + ".ckpt")));
    return m;
  }

  const corpus::UtteranceRecord& record(const corpus::Corpus& cp, int id, const char* flag) const {
    if (id < 0 || id >= static_cast<int>(cp.records.size()))
      throw UsageError(cat(flag, " ", id, " is not an utterance id (0..", cp.records.size() - 1, ")"));
    return cp.records[static_cast<std::size_t>(id)];
  }

  int gen_data() {
    const auto cp = corpus::generate(cfg_.corpus, *world_);
    corpus::save(cp, out_dir_ / "corpus");
    out_ << "gen-data: " << cp.records.size() << " utterances from " << cp.speakers.size() << " speakers ("
         << cfg_.corpus.train_speakers << " train) -> " << (out_dir_ / "corpus").string() << "\n";
    return 0;
  }

  int train_codec() {
    const auto cp = load_corpus();
    std::string log;
    auto m = codec::train_codec(cp, cfg_.codec, [&](const codec::CodecLogRecord& r) {
      nlohmann::ordered_json j;
      j["step"] = r.step;
      j["recon"] = r.parts.recon;
      j["contrastive"] = r.parts.contrastive;
      j["disentangle"] = r.parts.disentangle;
      j["commitment"] = r.parts.commitment;
      j["total"] = r.parts.total;
      j["temperature"] = r.temperature;
      j["codebook_utilization"] = r.utilization;
      j["retrieval"] = r.retrieval;
      j["speaker_layer_weights"] = r.speaker_weights;
      log += j.dump() + "\n";
      out_ << "train-codec step " << r.step << " total " << eval::fmt(r.parts.total) << " recon " << eval::fmt(r.parts.recon)
           << " retrieval " << eval::fmt(r.retrieval) << "\n";
    });
    save_checkpoint(m.to_table(), out_dir_ / "codec.ckpt");
    write_file_atomic(out_dir_ / "train-codec.log.jsonl", log);
    return 0;
  }

  int encode() {
    const auto cp = load_corpus();
    auto m = load_codec();
    std::vector<lm::CodeUtterance> utts;
    for (const auto& r : cp.records) {
      lm::CodeUtterance u;
      u.utt_id = r.utt_id;
      u.speaker_id = r.speaker_id;
      u.content = r.content;
      u.codes = m.quantize(cp.features(r.utt_id).frames).grid;
      utts.push_back(std::move(u));
    }
    save_checkpoint(code_corpus_table(utts, cfg_.codec.nq, cfg_.codec.codebook_size), out_dir_ / "codes.bin");
    out_ << "encode: " << utts.size() << " utterances -> " << (out_dir_ / "codes.bin").string() << "\n";
    return 0;
  }

  CodeCorpus load_codes(const fs::path& p) const {
    auto cc = parse_code_corpus(load_checkpoint(p));
    if (cc.nq != cfg_.codec.nq || cc.k != cfg_.codec.codebook_size)
      throw DataError(cat("code corpus has Nq=", cc.nq, " K=", cc.k, " but config says Nq=", cfg_.codec.nq,
                          " K=", cfg_.codec.codebook_size));
    return cc;
  }

  int train_lm() {
    const auto cp = load_corpus();
    auto cc = load_codes(o_.input.empty() ? data_dir_ / "codes.bin" : fs::path(o_.input));
    std::vector<lm::CodeUtterance> train;
    for (auto& u : cc.utts) {
      const auto& r = record(cp, u.utt_id, "code corpus utterance");
      if (!r.train) continue;
      if (cfg_.lm.variant == "r") u.features = cp.features(u.utt_id).frames;
      train.push_back(std::move(u));
    }
    std::string log;
    const std::string v = cfg_.lm.variant;
    auto m = lm::train_lm(train, config::lm_config(cfg_), config::lm_train_config(cfg_), [&](const lm::LMLogRecord& r) {
      nlohmann::ordered_json j;
      j["step"] = r.step;
      j["loss"] = r.loss;
      j["lr"] = r.lr;
      j["tokens"] = r.tokens;
      log += j.dump() + "\n";
      out_ << "train-lm[" << v << "] step " << r.step << " loss " << eval::fmt(r.loss) << " lr " << r.lr << "\n";
    });
    save_checkpoint(m.to_table(), out_dir_ / ("lm-" + v + ".ckpt"));
    write_file_atomic(out_dir_ / ("train-lm-" + v + ".log.jsonl"), log);
    return 0;
  }

  int decode() {
    const auto cp = load_corpus();
    auto m = load_codec();
    const auto cc = load_codes(o_.input.empty() ? data_dir_ / "codes.bin" : fs::path(o_.input));
    TensorTable t;
    for (const auto& u : cc.utts) {
      if (o_.utt >= 0 && u.utt_id != o_.utt) continue;
      const int spk_utt = o_.ref >= 0 ? o_.ref : u.utt_id;
      record(cp, spk_utt, "--ref");
      const Tensor s = m.speaker_embeddings({&cp.features(spk_utt).frames});
      t.emplace_back(cat("utt/", u.utt_id), m.decode_grid(u.codes, s.values()));
    }
    if (t.empty()) throw DataError(cat("no code entry for utterance ", o_.utt));
    save_checkpoint(t, out_dir_ / "decoded.bin");
    out_ << "decode: " << t.size() << " utterances -> " << (out_dir_ / "decoded.bin").string() << "\n";
    return 0;
  }

  int convert() {
    if (o_.source < 0 || o_.ref < 0) throw UsageError("convert needs --source and --ref utterance ids");
    const auto cp = load_corpus();
    auto m = load_codec();
    const auto& rs = record(cp, o_.source, "--source");
    const auto& rt = record(cp, o_.ref, "--ref");
    const Tensor& src = cp.features(rs.utt_id).frames;
    const Tensor& tgt = cp.features(rt.utt_id).frames;
    const Tensor conv = m.convert_voice(src, tgt);
    save_checkpoint({{"converted", conv}}, out_dir_ / "converted.bin");
    const auto& w = *world_;
    const auto pc = w.extract_prosody(synth::FeatureSequence{conv}, cp.speaker_of(rt.utt_id));
    out_ << "convert " << rs.utt_id << " -> speaker of " << rt.utt_id << ": secs_target " << eval::fmt(metrics::secs(w, conv, tgt))
         << " secs_source " << eval::fmt(metrics::secs(w, conv, src)) << " f0_corr_source "
         << eval::fmt(metrics::f0_correlation(pc, cp.utterances[static_cast<std::size_t>(rs.utt_id)].prosody))
         << " wer_analog " << eval::fmt(metrics::wer_analog(w, conv, rs.content, cp.speaker_of(rt.utt_id))) << "\n";
    return 0;
  }

  static std::vector<int> parse_symbols(const std::string& s, int alphabet) {
    std::vector<int> out;
    std::stringstream in(s);
    std::string tok;
    while (std::getline(in, tok, ',')) {
      try {
        std::size_t used = 0;
        const int v = std::stoi(tok, &used);
        if (used != tok.size() || v < 0 || v >= alphabet) throw std::out_of_range("symbol");
        out.push_back(v);
      } catch (const std::exception&) {
        throw UsageError(cat("--text: '", tok, "' is not a symbol in [0,", alphabet, ")"));
      }
    }
    if (out.empty()) throw UsageError("--text is empty");
    return out;
  }

  int tts() {
    const auto mode = lm::parse_mode(o_.mode);
    if (o_.ref < 0) throw UsageError("tts needs --ref (speaker reference utterance id)");
    if (o_.utt < 0 && o_.text.empty()) throw UsageError("tts needs --text or --utt");
    const auto cp = load_corpus();
    auto m = load_codec();
    const std::string variant = o_.variant.empty() ? (mode == lm::Mode::TextRef ? "r" : "nr") : o_.variant;
    if ((mode == lm::Mode::TextRef) != (variant == "r"))
      throw UsageError("text-ref prompting needs the r variant; text and speech prompting need nr");
    auto model = load_lm(variant);
    record(cp, o_.ref, "--ref");
    const std::vector<int> text = o_.utt >= 0 ? record(cp, o_.utt, "--utt").content : parse_symbols(o_.text, cfg_.corpus.synth.alphabet);
    lm::SampleConfig sc;
    sc.temperature = o_.temperature.value_or(cfg_.eval.temperature);
    sc.top_k = o_.top_k.value_or(cfg_.eval.top_k);
    sc.seed = o_.seed.value_or(cfg_.eval.seed);
    sc.max_new = model.config().max_len;
    const auto g = eval::synthesize(m, model, mode, text, cp, o_.ref, sc, [&](const std::string& w) { out_ << "warning: " << w << "\n"; });
    save_checkpoint({{"features", g.features}, {"codes", g.grid.to_tensor()}}, out_dir_ / "tts.bin");
    out_ << "tts[" << lm::mode_name(mode) << "]: " << g.tokens.size() << " tokens, " << g.grid.frames << " frames";
    if (g.features.rows() > 0) {
      const auto& spk = cp.speaker_of(o_.ref);
      out_ << ", wer_analog " << eval::fmt(metrics::wer_analog(*world_, g.features, text, spk));
    }
    out_ << " -> " << (out_dir_ / "tts.bin").string() << "\n";
    return 0;
  }

  int evaluate() {
    const auto cp = load_corpus();
    auto m = load_codec();
    const auto s = eval_settings(cfg_);
    const auto& e = cfg_.eval;
    eval::EvalReport rep;
    const auto cr = eval::codec_eval(*world_, m, cp, s, e.probe, e.wer || e.secs || e.f0);
    eval::add_codec_rows(rep, cr, e.probe, e.wer || e.secs || e.f0, e.wer, e.secs, e.f0);
    const auto items = eval::tts_items(cp, s.tts_generations, s.seed);
    std::vector<std::pair<std::string, eval::TtsResult>> systems;
    if (fs::exists(data_dir_ / "lm-nr.ckpt")) {
      auto nr = load_lm("nr");
      systems.emplace_back("LSSL-NR text-prompting", eval::tts_eval(*world_, m, nr, lm::Mode::Text, cp, items, s));
      systems.emplace_back("LSSL-NR speech-prompting", eval::tts_eval(*world_, m, nr, lm::Mode::Speech, cp, items, s));
    }
    if (fs::exists(data_dir_ / "lm-r.ckpt")) {
      auto r = load_lm("r");
      systems.emplace_back("LSSL-R text-prompting", eval::tts_eval(*world_, m, r, lm::Mode::TextRef, cp, items, s));
    }
    for (const auto& [name, r] : systems) eval::add_tts_row(rep, name, r, e.wer, e.secs);
    if (e.wer)
      for (std::size_t i = 1; i < systems.size(); ++i)
        rep.tests.push_back(eval::compare("tts", systems[0].first, systems[i].first, "wer_analog", systems[0].second.wer,
                                          systems[i].second.wer));
    write_file_atomic(out_dir_ / "report.txt", rep.text());
    write_file_atomic(out_dir_ / "report.jsonl", rep.jsonl());
    out_ << rep.text();
    return 0;
  }

  int stats_cmd() {
    if (o_.input.empty()) throw UsageError("stats needs --input <mushra.csv>");
    const auto t = stats::mushra_ingest(o_.input);
    eval::EvalReport rep;
    for (const auto& sys : t.systems) {
      const auto& v = t.of(sys);
      double mean = 0.0;
      for (double x : v) mean += x;
      rep.rows.push_back({"MUSHRA", sys, {{"mean_score", mean / static_cast<double>(v.size())}, {"ratings", static_cast<double>(v.size())}}});
    }
    for (std::size_t i = 0; i < t.systems.size(); ++i)
      for (std::size_t j = i + 1; j < t.systems.size(); ++j)
        rep.tests.push_back(eval::compare("MUSHRA", t.systems[i], t.systems[j], "score", t.of(t.systems[i]), t.of(t.systems[j])));
    write_file_atomic(out_dir_ / "stats.txt", rep.text());
    write_file_atomic(out_dir_ / "stats.jsonl", rep.jsonl());
    out_ << rep.text();
    return 0;
  }

  Options o_;
  std::ostream& out_;
  config::ExperimentConfig cfg_;
  fs::path out_dir_, data_dir_;
  std::optional<synth::World> world_;
};

inline const char* usage_text() {
  return "usage: ssvc <command> [--config FILE] [--seed N] [--out DIR] [options]\n"
         "commands:\n"
         "  gen-data      generate the synthetic corpus into DIR/corpus\n"
         "  train-codec   train the disentangling codec -> DIR/codec.ckpt\n"
         "  encode        quantize every utterance -> DIR/codes.bin\n"
         "  train-lm      train the token LM (--variant nr|r) -> DIR/lm-<variant>.ckpt\n"
         "  decode        decode codes with a speaker reference (--utt, --ref, --input)\n"
         "  convert       voice conversion (--source ID --ref ID)\n"
         "  tts           synthesis (--mode text|speech|text-ref --ref ID --text 1,2,3 | --utt ID\n"
         "                --temperature T --top-k K)\n"
         "  eval          metrics report -> DIR/report.txt, DIR/report.jsonl\n"
         "  stats         MUSHRA csv ingestion and paired t-tests (--input FILE)\n"
         "  --data DIR reads inputs from DIR instead of --out\n";
}

/// Runs one command; returns 0 on success, 1 on usage errors, 2 on data or
/// model errors.
inline int run_command(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  static const std::vector<std::string> commands{"gen-data", "train-codec", "encode", "train-lm", "decode",
                                                 "convert",  "tts",         "eval",   "stats"};
  if (args.empty() || args[0] == "-h" || args[0] == "--help") {
    (args.empty() ? err : out) << usage_text();
    return args.empty() ? 1 : 0;
  }
  if (std::find(commands.begin(), commands.end(), args[0]) == commands.end()) {
    err << "error: unknown command '" << args[0] << "'\n" << usage_text();
    return 1;
  }
  Options o;
  o.command = args[0];
  CLI::App app("ssvc " + o.command);
  std::uint64_t seed = 0;
  float temperature = 0;
  int top_k = 0;
  app.add_option("--config", o.config_path)->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed);
  app.add_option("--out", o.out);
  app.add_option("--data", o.data);
  app.add_option("--variant", o.variant);
  app.add_option("--input", o.input);
  app.add_option("--mode", o.mode);
  app.add_option("--text", o.text);
  app.add_option("--utt", o.utt);
  app.add_option("--ref", o.ref);
  app.add_option("--source", o.source);
  auto* temp_opt = app.add_option("--temperature", temperature);
  auto* topk_opt = app.add_option("--top-k", top_k);
  std::vector<std::string> rest(args.rbegin(), args.rend() - 1);
  try {
    app.parse(rest);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help() << usage_text();
      return 0;
    }
    err << "error: " << o.command << ": " << e.what() << "\n" << usage_text();
    return 1;
  }
  if (*seed_opt) o.seed = seed;
  if (*temp_opt) o.temperature = temperature;
  if (*topk_opt) o.top_k = top_k;
  try {
    Session s(o, out);
    return s.run();
  } catch (const UsageError& e) {
    err << "error: " << o.command << ": " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    err << "error: " << o.command << ": " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << o.command << ": " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    err << "error: " << o.command << ": " << e.what() << "\n";
    return 2;
  }
}

}  // namespace ssvc::pipeline
