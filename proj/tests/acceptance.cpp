// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lm_overfit.hpp"
#include "ssvc/codec.hpp"
#include "ssvc/config.hpp"
#include "ssvc/corpus.hpp"
#include "ssvc/gradcheck.hpp"
#include "ssvc/pipeline.hpp"
#include "ssvc/stats.hpp"
#include "ssvc/token_lm.hpp"

using namespace ssvc;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back((ok ? "" : "FAILED ") + what);
  }
};

std::string num(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

Tensor randn(Shape s, Rng& rng) {
  const auto n = static_cast<int>(shape_size(s));
  return Tensor(std::move(s), rng.normal_vector(n));
}

double sq_dist(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) s += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
  return s;
}

std::string fixture(const std::string& name) { return std::string(SSVC_FIXTURE_DIR) + "/" + name; }
std::string config_file(const std::string& name) { return std::string(SSVC_CONFIG_DIR) + "/" + name; }

/// Runs CLI commands in a fresh directory, logging their output.
class Run {
 public:
  Run(const fs::path& root, const std::string& name, std::string config) : dir_(root / name), config_(std::move(config)) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    log_.open(dir_ / "log.txt");
  }

  /// Returns seconds taken; throws on a nonzero exit status.
  double operator()(std::vector<std::string> args) {
    const std::string cmd = args[0];
    args.insert(args.end(), {"--out", dir_.string()});
    if (!config_.empty()) args.insert(args.end(), {"--config", config_});
    const auto t0 = std::chrono::steady_clock::now();
    const int rc = pipeline::run_command(args, log_, log_);
    log_.flush();
    if (rc != 0) throw std::runtime_error(cat(cmd, " exited with ", rc, ", see ", (dir_ / "log.txt").string()));
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  [[nodiscard]] const fs::path& dir() const { return dir_; }

  [[nodiscard]] nlohmann::json metric(const std::string& system) const {
    std::istringstream in(read_file(dir_ / "report.jsonl"));
    for (std::string line; std::getline(in, line);) {
      const auto j = nlohmann::json::parse(line);
      if (j.value("kind", "") == "metric" && j.value("system", "") == system) return j;
    }
    throw std::runtime_error("report has no row for " + system);
  }

 private:
  fs::path dir_;
  std::string config_;
  std::ofstream log_;
};

// ---------------------------------------------------------------------------

Outcome autodiff_integrity() {
  Outcome o;
  double worst = 0;
  std::string worst_op;
  int ops = 0;
  for (const auto& op : ad::op_catalog()) {
    Rng rng(derive_seed(100, std::hash<std::string>{}(op.name)));
    for (int trial = 0; trial < 20; ++trial) {
      const double e = ad::check_gradients(op.fn, op.inputs(rng), 1e-3, static_cast<std::uint64_t>(trial)).max_rel_error;
      if (e > worst) worst = e, worst_op = op.name;
    }
    ++ops;
  }
  o.require(worst < 1e-3, cat(ops, " ops x 20 trials, max rel err ", num(worst), " (", worst_op, ") < 1e-3"));

  Rng rng(1);
  const Tensor x0 = randn({6}, rng);
  auto grad = [&](bool reversal) {
    ad::Graph g;
    ad::Var x = g.variable(x0);
    ad::Var out = ad::variance(reversal ? ad::gradient_reversal(x) : x);
    return g.gradients(out, std::vector<ad::Var>{x})[0];
  };
  const Tensor plain = grad(false), reversed = grad(true);
  bool exact = true, nonzero = false;
  for (std::int64_t i = 0; i < plain.size(); ++i) exact &= reversed[i] == -plain[i], nonzero |= plain[i] != 0.0f;
  o.require(exact && nonzero, "gradient_reversal negates exactly on x -> grl -> variance");
  return o;
}

Outcome rvq_properties(Run& def) {
  Outcome o;
  const auto cfg = config::ExperimentConfig{};
  codec::Codec m(cfg.codec);
  m.load_table(load_checkpoint(def.dir() / "codec.ckpt"));
  const auto cp = corpus::load(def.dir() / "corpus", cfg.corpus);
  const auto& books = m.codebooks();
  Rng rng(2);
  int violations = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int utt = rng.below(static_cast<int>(cp.records.size()));
    const Tensor c = m.content_features(cp.features(utt).frames);
    const codec::Quantized q = codec::rvq_quantize(c, books);
    Tensor partial = Tensor::matrix(c.rows(), c.cols());
    double prev = sq_dist(c, partial);
    for (int i = 0; i < books.nq(); ++i) {
      for (int t = 0; t < c.rows(); ++t)
        for (int d = 0; d < c.cols(); ++d) partial.at(t, d) += books.books[static_cast<std::size_t>(i)].at(q.grid.at(t, i), d);
      const double cur = sq_dist(c, partial);
      violations += cur > prev + 1e-9;
      prev = cur;
    }
  }
  o.require(violations == 0, cat("residual norm nonincreasing per stage on 100 utterances with trained codebooks (",
                                 violations, " violations)"));

  codec::RVQCodebooks exact(3, 8, 4);
  for (int i = 0; i < 3; ++i) {
    exact.books[static_cast<std::size_t>(i)] = randn({8, 4}, rng);
    if (i > 0)
      for (int d = 0; d < 4; ++d) exact.books[static_cast<std::size_t>(i)].at(5, d) = 0.0f;
  }
  Tensor c = Tensor::matrix(3, 4);
  for (int t = 0; t < 3; ++t)
    for (int d = 0; d < 4; ++d) c.at(t, d) = exact.books[0].at(2 * t + 1, d);
  o.require(codec::rvq_quantize(c, exact).commitment == 0.0, "exact-match input gives zero commitment");

  int mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    const int nq = 1 + rng.below(6), k = 1 + rng.below(600), frames = rng.below(30);
    codec::CodeGrid g(frames, nq);
    for (int& v : g.idx) v = rng.below(k);
    mismatches += lm::unflatten_tokens(lm::flatten_codes(g, k), nq, k) != g;
  }
  o.require(mismatches == 0, cat("flatten/unflatten round trip on 1000 random grids (", mismatches, " mismatches)"));
  return o;
}

Outcome loss_composition() {
  Outcome o;
  corpus::CorpusConfig cc;
  cc.speakers = 10;
  cc.utterances_per_speaker = 6;
  cc.train_speakers = 8;
  const synth::World world;
  const corpus::Corpus cp = corpus::generate(cc, world);
  codec::CodecConfig kc;
  kc.codebook_size = 32;
  kc.batch = 4;
  codec::Codec m(kc);
  Rng rng(3);
  const codec::CodecBatch batch = codec::make_batch(cp, {0, 7, 13, 20}, kc.chunk, rng);
  const int dim = m.codebooks().dim();
  {
    std::vector<float> all;
    for (const Tensor& f : batch.full) {
      const Tensor cf = m.content_features(f);
      all.insert(all.end(), cf.values().begin(), cf.values().end());
    }
    const int rows = static_cast<int>(all.size()) / dim;
    codec::rvq_init_from_batch(m.codebooks(), Tensor({rows, dim}, std::move(all)), rng);
  }
  ad::Graph g;
  const codec::LossWeights w;
  const codec::LossGraph lg = codec::total_loss(m, batch, g, w);

  const Tensor s = m.speaker_embeddings(codec::ptrs(batch.full));
  double recon_se = 0, commit_se = 0, d_sum = 0;
  long recon_n = 0, commit_n = 0;
  for (std::size_t i = 0; i < batch.full.size(); ++i) {
    const Tensor cf = m.content_features(batch.full[i]);
    const codec::Quantized q = codec::rvq_quantize(cf, m.codebooks());
    commit_se += sq_dist(cf, q.chat);
    commit_n += cf.size();
    const float* row = s.row(static_cast<int>(i));
    const std::vector<float> srow(row, row + s.cols());
    const Tensor out = m.decode_values(q.chat, srow);
    recon_se += sq_dist(out, batch.full[i]);
    recon_n += out.size();
    ad::Graph g2;
    nn::Ctx c2{g2, m.params(), false};
    const Tensor sns = m.speaker_embed(c2, g2.constant(cf), {cf.rows()}).value();
    d_sum += 1.0 - std::fabs(synth::cosine(srow, std::vector<float>(sns.values().begin(), sns.values().end())));
  }
  const double recon = recon_se / static_cast<double>(recon_n), commit = commit_se / static_cast<double>(commit_n);
  const double d = d_sum / static_cast<double>(batch.full.size());
  const double contr = codec::contrastive_loss(m.speaker_embeddings(codec::ptrs(batch.chunk_a)),
                                               m.speaker_embeddings(codec::ptrs(batch.chunk_b)), m.temperature());
  const double total = recon / 301.0 + 100.0 / 301.0 * contr - 100.0 / 301.0 * d + 100.0 / 301.0 * commit;
  const double err = std::fabs(lg.parts.total - total);
  o.require(err <= 1e-6, cat("total ", num(lg.parts.total), " vs recomputed ", num(total), ", |diff| ", num(err), " <= 1e-6"));
  o.require(w.recon == 1.0 / 301.0 && w.contrastive == 100.0 / 301.0 && w.disentangle == 100.0 / 301.0 &&
                w.commitment == 100.0 / 301.0 && 1 + 3 * 100 == 301 && std::fabs(w.sum() - 1.0) <= 1e-15,
            cat("default weights 1/301 + 3*100/301 sum to ", num(w.sum())));
  return o;
}

Outcome disentanglement(Run& def, double codec_seconds) {
  Outcome o;
  const auto codes = def.metric("quantized non-speaker codes");
  const auto spk = def.metric("speaker embedding");
  const double chance = codes["chance"];
  const double pc = codes["probe_accuracy"], ps = spk["probe_accuracy"], rt = spk["retrieval"];
  o.require(codec_seconds <= 600.0, cat("train-codec took ", num(codec_seconds), " s <= 600 s"));
  o.require(pc <= chance + 0.10, cat("code probe ", num(pc), " <= chance ", num(chance), " + 0.10"));
  o.require(ps >= 0.90, cat("speaker probe on held-out speakers ", num(ps), " >= 0.90"));
  o.require(rt >= 0.90, cat("retrieval in batches of 16 ", num(rt), " >= 0.90"));
  return o;
}

Outcome conversion(Run& def) {
  Outcome o;
  const auto conv = def.metric("converted");
  const auto rec = def.metric("reconstruction");
  const double pairs = conv["pairs"], st = conv["secs_target"], ss = conv["secs_source"];
  const double fs_ = conv["f0_corr_source"], fo = conv["f0_corr_other"];
  const double wc = conv["wer_analog"], wr = rec["wer_analog"];
  o.require(pairs >= 200, cat(num(pairs), " held-out pairs"));
  o.require(st - ss >= 0.2, cat("secs target ", num(st), " - source ", num(ss), " >= 0.2"));
  o.require(fs_ > fo, cat("f0 corr source ", num(fs_), " > other ", num(fo)));
  o.require(wc - wr <= 0.05, cat("wer converted ", num(wc), " - reconstruction ", num(wr), " <= 0.05"));
  return o;
}

Outcome lm_sanity() {
  Outcome o;
  const lm::Vocab v{4, 64, 16};
  const auto corpus = fixture::random_code_corpus(10, v, 5);
  const auto s = fixture::overfit_setup(v);
  auto m = lm::train_lm(corpus, s.model, s.train);
  const double loss = fixture::corpus_loss(m, corpus), acc = fixture::greedy_token_accuracy(m, corpus);
  o.require(loss < 0.1, cat("10-utterance loss ", num(loss), " nats/token < 0.1"));
  o.require(acc >= 0.95, cat("greedy token accuracy ", num(acc), " >= 0.95"));

  Rng rng(6);
  bool exact = true;
  for (int trial = 0; trial < 20 && exact; ++trial) {
    lm::PromptSequence p;
    p.text = corpus[static_cast<std::size_t>(trial % 10)].content;
    lm::TokenSequence a = lm::build_prompt(p, v);
    codec::CodeGrid g(3 + rng.below(8), v.nq);
    for (int& c : g.idx) c = rng.below(v.k);
    const auto codes = lm::flatten_codes(g, v.k);
    a.insert(a.end(), codes.begin(), codes.end());
    const int j = rng.below(static_cast<int>(a.size()) - 1);
    lm::TokenSequence b = a;
    for (std::size_t q = static_cast<std::size_t>(j) + 1; q < b.size(); ++q)
      if (v.is_code(b[q])) b[q] = (b[q] / v.k) * v.k + rng.below(v.k);
    const Tensor la = m.logits(a), lb = m.logits(b);
    for (int r = 0; r <= j; ++r)
      for (int c = 0; c < la.cols(); ++c) exact &= la.at(r, c) == lb.at(r, c);
  }
  o.require(exact, "causality: logits up to position j unchanged by edits after j (20 trials, exact)");
  return o;
}

Outcome prompting(Run& desk) {
  Outcome o;
  const auto text = desk.metric("LSSL-NR text-prompting");
  const auto speech = desk.metric("LSSL-NR speech-prompting");
  const auto ref = desk.metric("LSSL-R text-prompting");
  const double gens = std::min({text["generations"].get<double>(), speech["generations"].get<double>(),
                                ref["generations"].get<double>()});
  const double wt = text["wer_analog"], ws = speech["wer_analog"], wr = ref["wer_analog"];
  o.require(gens >= 200, cat(num(gens), " generations per system at temperature 0.7, top-k 32"));
  o.require(wt <= ws, cat("text-prompting wer ", num(wt), " <= speech-prompting ", num(ws)));
  o.require(wt < wr, cat("LSSL-NR text-prompting wer ", num(wt), " < LSSL-R ", num(wr)));
  return o;
}

Outcome scheduler() {
  Outcome o;
  const lm::ScheduleConfig c;
  const double peak = c.peak_lr;
  o.require(lm::lr_schedule(0, c) == 0.0, "lr(0) = 0");
  o.require(std::fabs(lm::lr_schedule(c.warmup_steps, c) - peak) <= 1e-9, cat("lr(warmup) = ", num(lm::lr_schedule(c.warmup_steps, c))));
  o.require(std::fabs(lm::lr_schedule(c.total_steps, c) - 0.1 * peak) <= 1e-9, cat("lr(total) = ", num(lm::lr_schedule(c.total_steps, c))));
  const double step = peak / c.warmup_steps;
  const double below = std::fabs(lm::lr_schedule(c.warmup_steps - 1, c) - lm::lr_schedule(c.warmup_steps, c));
  const double above = std::fabs(lm::lr_schedule(c.warmup_steps + 1, c) - lm::lr_schedule(c.warmup_steps, c));
  o.require(below <= step + 1e-15 && above <= step + 1e-15, "continuous at the warmup boundary");
  return o;
}

Outcome statistics() {
  Outcome o;
  const std::vector<double> a{72.5, 81.0, 64.25, 90.0, 55.5, 77.0, 69.75, 84.5, 60.0, 73.25};
  const std::vector<double> b{70.0, 76.5, 66.0, 82.25, 51.0, 74.5, 63.0, 80.0, 61.5, 68.75};
  const auto r = stats::paired_ttest(a, b);
  o.require(std::fabs(r.t - 3.480926540502461) <= 1e-6 && std::fabs(r.p - 0.0069284382414268935) <= 1e-4,
            cat("fixture t ", num(r.t), " p ", num(r.p)));
  const auto same = stats::paired_ttest(a, a);
  o.require(same.t == 0.0 && same.p == 1.0, "identical scores give t = 0, p = 1");
  for (const char* name : {"mushra_out_of_range.csv", "mushra_duplicate.csv", "mushra_ragged.csv"}) {
    bool rejected = false;
    try {
      static_cast<void>(stats::mushra_ingest(fixture(name)));
    } catch (const DataError&) {
      rejected = true;
    }
    o.require(rejected, cat(name, " rejected"));
  }
  return o;
}

Outcome determinism(const fs::path& root) {
  Outcome o;
  auto pipeline_once = [&](const std::string& name) {
    Run run(root, name, config_file("smoke.json"));
    run({"gen-data", "--seed", "17"});
    run({"train-codec", "--seed", "17"});
    run({"encode", "--seed", "17"});
    run({"train-lm", "--seed", "17", "--variant", "nr"});
    run({"train-lm", "--seed", "17", "--variant", "r"});
    run({"tts", "--seed", "17", "--ref", "3", "--text", "1,2,3"});
    run({"eval", "--seed", "17"});
    return run.dir();
  };
  const fs::path a = pipeline_once("smoke_a"), b = pipeline_once("smoke_b");
  for (const char* file : {"report.txt", "report.jsonl", "tts.bin"})
    o.require(read_file(a / file) == read_file(b / file), cat(file, " byte-identical"));
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("ssvc acceptance");
  std::string workdir = "acceptance_runs";
  std::vector<int> only;
  app.add_option("--workdir", workdir, "directory for pipeline runs");
  app.add_option("--only", only, "run only these criteria")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  const fs::path root = fs::absolute(workdir);
  fs::create_directories(root);
  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](std::initializer_list<int> ids) {
    if (selected.empty()) return true;
    for (int i : ids)
      if (selected.count(i)) return true;
    return false;
  };

  // Shared pipeline runs, built on first use.
  std::unique_ptr<Run> def, desk;
  double codec_seconds = 0;
  auto default_run = [&]() -> Run& {
    if (!def) {
      def = std::make_unique<Run>(root, "default", "");
      (*def)({"gen-data"});
      codec_seconds = (*def)({"train-codec"});
      (*def)({"eval"});
    }
    return *def;
  };
  auto desk_run = [&]() -> Run& {
    if (!desk) {
      desk = std::make_unique<Run>(root, "desk", config_file("desk.json"));
      for (auto args : std::vector<std::vector<std::string>>{{"gen-data"},
                                                             {"train-codec"},
                                                             {"encode"},
                                                             {"train-lm", "--variant", "nr"},
                                                             {"train-lm", "--variant", "r"},
                                                             {"eval"}})
        (*desk)(args);
    }
    return *desk;
  };

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"autodiff integrity", autodiff_integrity},
      {"RVQ properties", [&] { return rvq_properties(default_run()); }},
      {"loss composition", loss_composition},
      {"disentanglement", [&] { return disentanglement(default_run(), codec_seconds); }},
      {"voice conversion ordering", [&] { return conversion(default_run()); }},
      {"LM sanity", lm_sanity},
      {"prompting stability ordering", [&] { return prompting(desk_run()); }},
      {"scheduler", scheduler},
      {"statistics", statistics},
      {"end-to-end determinism", [&] { return determinism(root); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted({id})) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.require(false, cat("error: ", e.what()));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::string detail;
    for (const auto& n : o.notes) detail += (detail.empty() ? "" : "; ") + n;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << ". " << criteria[i].first << " [" << num(secs) << " s]: " << detail
              << std::endl;
  }
  std::cout << (failed ? cat(failed, " criteria failed") : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
