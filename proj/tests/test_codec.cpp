#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "ssvc/codec.hpp"
#include "ssvc/corpus.hpp"

using namespace ssvc;
using namespace ssvc::codec;

namespace {

Tensor randn(Shape s, Rng& rng, double sd = 1.0) {
  const auto n = static_cast<int>(shape_size(s));
  return Tensor(std::move(s), rng.normal_vector(n, sd));
}

double sq_dist(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) s += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
  return s;
}

corpus::CorpusConfig small_corpus() {
  corpus::CorpusConfig c;
  c.speakers = 10;
  c.utterances_per_speaker = 6;
  c.train_speakers = 8;
  return c;
}

CodecConfig small_codec() {
  CodecConfig c;
  c.codebook_size = 32;
  c.batch = 4;
  c.steps = 2;
  return c;
}

const synth::World& world() {
  static const synth::World w;
  return w;
}

}  // namespace

// -- loss weights -------------------------------------------------------------

TEST(LossWeights, DefaultsSumToOne) {
  const LossWeights w;
  EXPECT_DOUBLE_EQ(w.recon, 1.0 / 301.0);
  EXPECT_DOUBLE_EQ(w.contrastive, 100.0 / 301.0);
  EXPECT_DOUBLE_EQ(w.sum(), 1.0);
  EXPECT_EQ(1 + 3 * 100, 301);
}

TEST(LossWeights, OverridesAreRenormalized) {
  LossWeights w{1.0, 1.0, 1.0, 1.0};
  const auto n = w.normalized();
  EXPECT_DOUBLE_EQ(n.recon, 0.25);
  EXPECT_DOUBLE_EQ(n.sum(), 1.0);
  EXPECT_THROW(static_cast<void>(LossWeights{-1, 1, 1, 1}.normalized()), UsageError);
  EXPECT_THROW(static_cast<void>(LossWeights{0, 0, 0, 0}.normalized()), UsageError);
}

TEST(LossWeights, ZeroComponentsGiveZeroTotal) { EXPECT_EQ(LossBreakdown::compose(LossWeights{}, 0, 0, 0, 0), 0.0); }

TEST(LossWeights, DisentangleEntersWithMinusSign) {
  const LossWeights w;
  EXPECT_DOUBLE_EQ(LossBreakdown::compose(w, 0, 0, 1, 0), -100.0 / 301.0);
}

// -- layer weights ------------------------------------------------------------

TEST(LayerWeights, TwoLayersZeroLogitsGiveHalves) {
  const std::vector<float> ws{0, 0};
  EXPECT_EQ(branch_weights(ws, Branch::Speaker), (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(branch_weights(ws, Branch::NonSpeaker), (std::vector<double>{0.5, 0.5}));
}

TEST(LayerWeights, BranchesSumToOnePerLayer) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto ws = rng.normal_vector(6, 3.0);
    const auto s = branch_weights(ws, Branch::Speaker);
    const auto n = branch_weights(ws, Branch::NonSpeaker);
    for (std::size_t l = 0; l < s.size(); ++l) {
      EXPECT_GT(s[l], 0.0);
      EXPECT_LT(s[l], 1.0);
      EXPECT_EQ(s[l] + n[l], 1.0);
    }
  }
}

TEST(LayerWeights, SaturatedLogitSelectsOneLayer) {
  encoder::LayerStack st;
  Rng rng(2);
  for (int l = 0; l < 3; ++l) st.hidden.push_back(randn({5, 4}, rng));
  const std::vector<float> ws{-100.0f, 100.0f, -100.0f};
  const Tensor spk = layer_mix(st, ws, Branch::Speaker);
  const Tensor non = layer_mix(st, ws, Branch::NonSpeaker);
  for (int i = 0; i < spk.size(); ++i) {
    EXPECT_NEAR(spk[i], st.hidden[1][i], 1e-5);
    EXPECT_NEAR(non[i], st.hidden[0][i] + st.hidden[2][i], 1e-5);
  }
}

TEST(LayerWeights, GraphMixMatchesValueMix) {
  encoder::LayerStack st;
  Rng rng(3);
  for (int l = 0; l < 4; ++l) st.hidden.push_back(randn({6, 3}, rng));
  const auto ws = rng.normal_vector(4);
  ad::Graph g;
  std::vector<Var> nodes;
  for (const auto& h : st.hidden) nodes.push_back(g.constant(h));
  Var w = g.constant(Tensor::vector(ws));
  for (Branch b : {Branch::Speaker, Branch::NonSpeaker}) {
    const Tensor a = layer_mix(nodes, w, b).value();
    const Tensor v = layer_mix(st, ws, b);
    for (int i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], v[i], 1e-5);
  }
}

TEST(LayerWeights, LayerCountMismatchThrows) {
  encoder::LayerStack st;
  st.hidden.push_back(Tensor::matrix(2, 2));
  const std::vector<float> ws{0, 0};
  EXPECT_THROW(layer_mix(st, ws, Branch::Speaker), std::exception);
}

// -- speaker extractor --------------------------------------------------------

TEST(SpeakerEmbed, UnitNormAndDimension) {
  Codec m(small_codec());
  Rng rng(4);
  const Tensor x = randn({9, 24}, rng);
  const Tensor s = m.speaker_embeddings({&x});
  ASSERT_EQ(s.rows(), 1);
  ASSERT_EQ(s.cols(), 16);
  double n = 0;
  for (float v : s.values()) n += static_cast<double>(v) * v;
  EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
}

TEST(SpeakerEmbed, FramePermutationInvariant) {
  Codec m(small_codec());
  Rng rng(5);
  const Tensor x = randn({10, 32}, rng);
  std::vector<int> perm(10);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  Tensor y = Tensor::matrix(10, 32);
  for (int t = 0; t < 10; ++t)
    for (int d = 0; d < 32; ++d) y.at(t, d) = x.at(perm[static_cast<std::size_t>(t)], d);
  ad::Graph g;
  Ctx c{g, m.params(), false};
  const Tensor a = m.speaker_embed(c, g.constant(x), {10}).value();
  const Tensor b = m.speaker_embed(c, g.constant(y), {10}).value();
  for (int i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5);
}

TEST(SpeakerEmbed, SingleFrameIsDefined) {
  Codec m(small_codec());
  Rng rng(6);
  const Tensor x = randn({1, 24}, rng);
  const Tensor s = m.speaker_embeddings({&x});
  for (float v : s.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(SpeakerEmbed, PackedSegmentsAreIndependent) {
  Codec m(small_codec());
  Rng rng(7);
  const Tensor a = randn({6, 24}, rng), b = randn({11, 24}, rng);
  const Tensor both = m.speaker_embeddings({&a, &b});
  const Tensor only_b = m.speaker_embeddings({&b});
  for (int d = 0; d < 16; ++d) EXPECT_NEAR(both.at(1, d), only_b.at(0, d), 1e-5);
}

// -- contrastive loss ---------------------------------------------------------

TEST(Contrastive, OrthonormalRowsLowTemperatureNearZero) {
  Tensor e = Tensor::matrix(4, 4);
  for (int i = 0; i < 4; ++i) e.at(i, i) = 1.0f;
  EXPECT_LT(contrastive_loss(e, e, 1e-3), 1e-6);
}

TEST(Contrastive, IdenticalRowsGiveLogN) {
  Tensor e = Tensor::matrix(5, 3);
  for (int i = 0; i < 5; ++i) e.at(i, 0) = 1.0f;
  EXPECT_NEAR(contrastive_loss(e, e, 0.07), std::log(5.0), 1e-6);
}

TEST(Contrastive, Symmetric) {
  Rng rng(8);
  const Tensor a = randn({6, 4}, rng), b = randn({6, 4}, rng);
  EXPECT_NEAR(contrastive_loss(a, b, 0.5), contrastive_loss(b, a, 0.5), 1e-6);
}

TEST(Contrastive, MatchesHandComputedCrossEntropy) {
  Rng rng(9);
  const Tensor a = randn({3, 2}, rng), b = randn({3, 2}, rng);
  const double tau = 0.3;
  double s[3][3];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) s[i][j] = (a.at(i, 0) * b.at(j, 0) + a.at(i, 1) * b.at(j, 1)) / tau;
  double rows = 0, cols = 0;
  for (int i = 0; i < 3; ++i) {
    double zr = 0, zc = 0;
    for (int j = 0; j < 3; ++j) zr += std::exp(s[i][j]), zc += std::exp(s[j][i]);
    rows += std::log(zr) - s[i][i];
    cols += std::log(zc) - s[i][i];
  }
  EXPECT_NEAR(contrastive_loss(a, b, tau), 0.5 * (rows / 3 + cols / 3), 1e-5);
}

TEST(Contrastive, SinglePairThrows) {
  const Tensor e = Tensor::matrix(1, 3, 1.0f);
  EXPECT_THROW(contrastive_loss(e, e, 0.1), std::invalid_argument);
}

// -- disentangle term ---------------------------------------------------------

TEST(Disentangle, Identities) {
  const std::vector<float> a{0.6f, 0.8f, 0.0f}, b{0.0f, 0.0f, 1.0f}, na{-0.6f, -0.8f, 0.0f};
  EXPECT_NEAR(disentangle_term(a, a), 0.0, 1e-6);
  EXPECT_NEAR(disentangle_term(a, b), 1.0, 1e-6);
  EXPECT_NEAR(disentangle_term(a, na), 0.0, 1e-6);
}

TEST(Disentangle, ZeroEmbeddingThrows) {
  const std::vector<float> a{1, 0}, z{0, 0};
  EXPECT_THROW(disentangle_term(a, z), DataError);
}

// -- residual vector quantization ----------------------------------------------

TEST(RVQ, ExactMatchGivesZeroCommitment) {
  Rng rng(10);
  RVQCodebooks books(3, 8, 4);
  books.books[0] = randn({8, 4}, rng);
  for (int i = 1; i < 3; ++i) {
    books.books[static_cast<std::size_t>(i)] = randn({8, 4}, rng);
    for (int d = 0; d < 4; ++d) books.books[static_cast<std::size_t>(i)].at(5, d) = 0.0f;
  }
  Tensor c = Tensor::matrix(3, 4);
  for (int t = 0; t < 3; ++t)
    for (int d = 0; d < 4; ++d) c.at(t, d) = books.books[0].at(2 * t + 1, d);
  const Quantized q = rvq_quantize(c, books);
  EXPECT_EQ(q.commitment, 0.0);
  for (int t = 0; t < 3; ++t) {
    EXPECT_EQ(q.grid.at(t, 0), 2 * t + 1);
    EXPECT_EQ(q.grid.at(t, 1), 5);
    EXPECT_EQ(q.grid.at(t, 2), 5);
  }
}

TEST(RVQ, ResidualNormNonincreasingAcrossStages) {
  // Codebooks built the way training builds them: data-dependent init from
  // inputs of the same distribution. The norm is over the whole matrix; a single
  // frame can still move away when no code of a stage is nearer than zero.
  Rng rng(11);
  RVQCodebooks books(4, 512, 6);
  rvq_init_from_batch(books, randn({2048, 6}, rng), rng);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor c = randn({7, 6}, rng);
    Tensor partial = Tensor::matrix(7, 6);
    double prev = sq_dist(c, partial);
    const Quantized q = rvq_quantize(c, books);
    for (int i = 0; i < 4; ++i) {
      for (int t = 0; t < 7; ++t)
        for (int d = 0; d < 6; ++d) partial.at(t, d) += books.books[static_cast<std::size_t>(i)].at(q.grid.at(t, i), d);
      const double cur = sq_dist(c, partial);
      EXPECT_LE(cur, prev + 1e-9) << "trial " << trial << " stage " << i;
      prev = cur;
    }
  }
}

TEST(RVQ, StageResidualsAreSequential) {
  Rng rng(12);
  RVQCodebooks books(3, 8, 4);
  for (auto& b : books.books) b = randn({8, 4}, rng);
  const Tensor c = randn({5, 4}, rng);
  const Quantized q = rvq_quantize(c, books);
  ASSERT_EQ(q.residuals.size(), 3u);
  for (int i = 0; i < c.size(); ++i) EXPECT_EQ(q.residuals[0][i], c[i]);
  for (int t = 0; t < 5; ++t)
    for (int d = 0; d < 4; ++d)
      EXPECT_NEAR(q.residuals[1].at(t, d), c.at(t, d) - books.books[0].at(q.grid.at(t, 0), d), 1e-6);
}

TEST(RVQ, IndicesInRangeAndDequantizeIsExact) {
  Rng rng(12);
  RVQCodebooks books(4, 32, 5);
  for (auto& b : books.books) b = randn({32, 5}, rng);
  const Tensor c = randn({20, 5}, rng);
  const Quantized q = rvq_quantize(c, books);
  for (int v : q.grid.idx) {
    EXPECT_GE(v, 0);
    EXPECT_LT(v, 32);
  }
  const Tensor back = rvq_dequantize(q.grid, books);
  for (int i = 0; i < back.size(); ++i) EXPECT_EQ(back[i], q.chat[i]);
}

TEST(RVQ, ZeroCodebooksDequantizeToZero) {
  RVQCodebooks books(2, 4, 3);
  CodeGrid g(3, 2);
  g.at(1, 0) = 3;
  const Tensor out = rvq_dequantize(g, books);
  for (float v : out.values()) EXPECT_EQ(v, 0.0f);
}

TEST(RVQ, SingleFrameSingleBookReturnsRow) {
  Rng rng(13);
  RVQCodebooks books(1, 4, 3);
  books.books[0] = randn({4, 3}, rng);
  CodeGrid g(1, 1);
  g.at(0, 0) = 2;
  const Tensor out = rvq_dequantize(g, books);
  for (int d = 0; d < 3; ++d) EXPECT_EQ(out.at(0, d), books.books[0].at(2, d));
}

TEST(RVQ, ErrorsOnBadInputs) {
  RVQCodebooks books(2, 4, 3);
  EXPECT_THROW(rvq_quantize(Tensor::matrix(2, 4), books), std::exception);
  CodeGrid g(1, 2);
  g.at(0, 1) = 4;
  EXPECT_THROW(rvq_dequantize(g, books), DataError);
  EXPECT_THROW(rvq_dequantize(CodeGrid(1, 3), books), DataError);
}

TEST(RVQ, EmaMovesCodesToAssignedMeans) {
  Rng rng(14);
  RVQCodebooks books(1, 2, 2);
  books.books[0] = Tensor({2, 2}, std::vector<float>{0, 0, 10, 10});
  books.ema_sum[0] = books.books[0];
  books.ema_count[0].fill(1.0f);
  const Tensor c({4, 2}, std::vector<float>{1, 1, -1, 1, 9, 11, 11, 11});
  const Quantized q = rvq_quantize(c, books);
  rvq_ema_update(books, q, 0.0f, 100, 1.0f, rng);
  EXPECT_NEAR(books.books[0].at(0, 0), 0.0f, 1e-3);
  EXPECT_NEAR(books.books[0].at(0, 1), 1.0f, 1e-3);
  EXPECT_NEAR(books.books[0].at(1, 0), 10.0f, 1e-3);
  EXPECT_NEAR(books.books[0].at(1, 1), 11.0f, 1e-3);
  for (float v : books.ema_count[0].values()) EXPECT_GE(v, 0.0f);
}

TEST(RVQ, DeadCodeIsReseededFromResiduals) {
  Rng rng(15);
  RVQCodebooks books(1, 2, 2);
  books.books[0] = Tensor({2, 2}, std::vector<float>{0, 0, 100, 100});
  books.ema_sum[0] = books.books[0];
  books.ema_count[0].fill(0.5f);
  const Tensor c({3, 2}, std::vector<float>{1, 2, 3, 4, 5, 6});
  const Quantized q = rvq_quantize(c, books);
  rvq_ema_update(books, q, 0.99f, 1, 1.0f, rng);
  const float x = books.books[0].at(1, 0), y = books.books[0].at(1, 1);
  EXPECT_TRUE((x == 1 && y == 2) || (x == 3 && y == 4) || (x == 5 && y == 6)) << x << "," << y;
}

// -- decoder, gradient routing, composite loss -----------------------------------

TEST(Decoder, ShapeAndDeterminism) {
  Codec m(small_codec());
  Rng rng(16);
  const Tensor chat = randn({13, 32}, rng);
  const auto s = rng.normal_vector(16);
  const Tensor a = m.decode_values(chat, s), b = m.decode_values(chat, s);
  EXPECT_EQ(a.rows(), 13);
  EXPECT_EQ(a.cols(), 24);
  for (int i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Quantizer, StraightThroughPassesGradientUnchanged) {
  Codec m(small_codec());
  Rng rng(17);
  const Tensor c = randn({6, 32}, rng), chat = randn({6, 32}, rng), target = randn({6, 24}, rng);
  Tensor s({1, 16}, rng.normal_vector(16));
  auto grad_through = [&](bool st) {
    ad::Graph g;
    Ctx ctx{g, m.params(), false};
    Var x = g.variable(st ? c : chat);
    Var in = st ? straight_through(x, chat) : x;
    Var loss = ad::mse(m.decode(ctx, in, g.constant(s), {6}), g.constant(target));
    return g.gradients(loss, std::vector<Var>{x})[0];
  };
  // Equal up to the rounding of c + (chat - c) in the forward value.
  const Tensor a = grad_through(true), b = grad_through(false);
  for (int i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6 * (1.0 + std::fabs(b[i])));
}

TEST(GradientRouting, DisentangleTermOnlyReachesLayerWeights) {
  Codec m(small_codec());
  Rng rng(18);
  const Tensor u1 = randn({8, 24}, rng), u2 = randn({10, 24}, rng);
  const PackedStack p = m.encode({&u1, &u2});
  auto run = [&](bool reversal) {
    ad::Graph g;
    Ctx c{g, m.params(), true};
    m.params().zero_grad();
    Var ws = c.p("mix.ws");
    const auto nodes = Codec::layer_nodes(g, p);
    Var s = m.speaker_embed(c, layer_mix(nodes, ws, Branch::Speaker), p.segments);
    Var cf = layer_mix(nodes, ws, Branch::NonSpeaker);
    Var s_ns = m.speaker_embed(c.frozen(), reversal ? ad::gradient_reversal(cf, 1.0f) : cf, p.segments);
    g.backward(disentangle_term(ad::stop_gradient(s), s_ns));
    return m.params().get("mix.ws").grad;
  };
  const Tensor without = run(false);
  const Tensor with = run(true);
  double mag = 0;
  for (int i = 0; i < with.size(); ++i) {
    EXPECT_EQ(with[i], -without[i]);
    mag += std::fabs(with[i]);
  }
  EXPECT_GT(mag, 0.0);
  for (const auto* prm : m.params().all()) {
    if (prm->name == "mix.ws") continue;
    for (float v : prm->grad.values()) ASSERT_EQ(v, 0.0f) << prm->name;
  }
}

TEST(CompositeLoss, TotalEqualsIndependentlyRecomputedSum) {
  const corpus::Corpus cp = corpus::generate(small_corpus(), world());
  Codec m(small_codec());
  Rng rng(19);
  const std::vector<int> utts{0, 7, 13, 20};
  const CodecBatch batch = make_batch(cp, utts, 8, rng);
  {
    std::vector<float> all;
    for (const Tensor& f : batch.full) {
      const Tensor cf = m.content_features(f);
      all.insert(all.end(), cf.values().begin(), cf.values().end());
    }
    const int rows = static_cast<int>(all.size()) / 32;
    rvq_init_from_batch(m.codebooks(), Tensor({rows, 32}, std::move(all)), rng);
  }
  ad::Graph g;
  const LossWeights w;
  const LossGraph lg = total_loss(m, batch, g, w);

  // Recompute each component per utterance without the packed graph.
  const Tensor s = m.speaker_embeddings(ptrs(batch.full));
  double recon_se = 0, commit_se = 0, d_sum = 0;
  long recon_n = 0, commit_n = 0;
  for (std::size_t i = 0; i < batch.full.size(); ++i) {
    const Tensor cf = m.content_features(batch.full[i]);
    const Quantized q = rvq_quantize(cf, m.codebooks());
    commit_se += sq_dist(cf, q.chat);
    commit_n += cf.size();
    const std::vector<float> srow(s.row(static_cast<int>(i)), s.row(static_cast<int>(i)) + 16);
    const Tensor out = m.decode_values(q.chat, srow);
    recon_se += sq_dist(out, batch.full[i]);
    recon_n += out.size();
    ad::Graph g2;
    Ctx c2{g2, m.params(), false};
    const Tensor sns = m.speaker_embed(c2, g2.constant(cf), {cf.rows()}).value();
    const std::vector<float> nrow(sns.values().begin(), sns.values().end());
    d_sum += 1.0 - std::fabs(synth::cosine(srow, nrow));
  }
  const double recon = recon_se / recon_n, commit = commit_se / commit_n;
  const double d = d_sum / static_cast<double>(batch.full.size());
  const double contr = contrastive_loss(m.speaker_embeddings(ptrs(batch.chunk_a)), m.speaker_embeddings(ptrs(batch.chunk_b)),
                                        m.temperature());
  EXPECT_NEAR(lg.parts.recon, recon, 1e-6);
  EXPECT_NEAR(lg.parts.commitment, commit, 1e-6);
  EXPECT_NEAR(lg.parts.disentangle, d, 1e-6);
  EXPECT_NEAR(lg.parts.contrastive, contr, 1e-6);
  const double total = recon / 301.0 + 100.0 / 301.0 * contr - 100.0 / 301.0 * d + 100.0 / 301.0 * commit;
  EXPECT_NEAR(lg.parts.total, total, 1e-6);
}

TEST(CompositeLoss, SingleUtteranceBatchThrows) {
  const corpus::Corpus cp = corpus::generate(small_corpus(), world());
  Codec m(small_codec());
  Rng rng(20);
  const CodecBatch batch = make_batch(cp, {0}, 8, rng);
  ad::Graph g;
  EXPECT_THROW(total_loss(m, batch, g, LossWeights{}), std::invalid_argument);
}

// -- training and conversion ------------------------------------------------------

TEST(Training, BatchesUseDistinctSpeakers) {
  const corpus::Corpus cp = corpus::generate(small_corpus(), world());
  const auto by = train_utterances_by_speaker(cp);
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const auto utts = sample_distinct_speakers(cp, by, 8, rng);
    std::set<int> spk;
    for (int u : utts) {
      spk.insert(cp.records[static_cast<std::size_t>(u)].speaker_id);
      EXPECT_TRUE(cp.records[static_cast<std::size_t>(u)].train);
    }
    EXPECT_EQ(spk.size(), 8u);
  }
  EXPECT_THROW(sample_distinct_speakers(cp, by, 9, rng), DataError);
}

TEST(Training, SameSeedSameParameters) {
  const corpus::Corpus cp = corpus::generate(small_corpus(), world());
  const Codec a = train_codec(cp, small_codec());
  const Codec b = train_codec(cp, small_codec());
  for (const auto* p : a.params().all()) {
    const auto va = p->value.values();
    const auto vb = b.params().get(p->name).value.values();
    ASSERT_TRUE(std::equal(va.begin(), va.end(), vb.begin(), vb.end())) << p->name;
  }
  for (int i = 0; i < a.codebooks().nq(); ++i) {
    const auto va = a.codebooks().books[static_cast<std::size_t>(i)].values();
    const auto vb = b.codebooks().books[static_cast<std::size_t>(i)].values();
    ASSERT_TRUE(std::equal(va.begin(), va.end(), vb.begin(), vb.end()));
  }
}

TEST(Training, EmptyCorpusAndOversizedBatchThrow) {
  EXPECT_THROW(train_codec(corpus::Corpus{}, small_codec()), DataError);
  const corpus::Corpus cp = corpus::generate(small_corpus(), world());
  CodecConfig c = small_codec();
  c.batch = 9;
  EXPECT_THROW(train_codec(cp, c), DataError);
}

TEST(Training, ContrastiveLossFallsOverFirst200Steps) {
  const corpus::Corpus cp = corpus::generate({}, world());
  CodecConfig c;
  c.steps = 200;
  c.log_every = 1;
  std::vector<double> contr;
  train_codec(cp, c, [&](const CodecLogRecord& r) { contr.push_back(r.parts.contrastive); });
  ASSERT_EQ(contr.size(), 200u);
  auto window = [&](int from) { return std::accumulate(contr.begin() + from, contr.begin() + from + 50, 0.0) / 50; };
  EXPECT_LT(window(50), window(0));
  EXPECT_LT(window(100), window(50));
  EXPECT_LT(window(150), window(100));
}

TEST(Conversion, UntrainedModelThrows) {
  Codec m(small_codec());
  const Tensor x = Tensor::matrix(8, 24, 0.1f);
  EXPECT_THROW(m.convert_voice(x, x), DataError);
}

TEST(Conversion, SelfConversionEqualsReconstruction) {
  const corpus::Corpus cp = corpus::generate(small_corpus(), world());
  Codec m = train_codec(cp, small_codec());
  const Tensor& x = cp.features(3).frames;
  const Tensor a = m.convert_voice(x, x), b = m.reconstruct(x);
  for (int i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], b[i]);
}

TEST(Conversion, CheckpointTableRoundTrip) {
  const corpus::Corpus cp = corpus::generate(small_corpus(), world());
  Codec m = train_codec(cp, small_codec());
  Codec r(small_codec());
  r.load_table(m.to_table());
  const Tensor& x = cp.features(5).frames;
  const Tensor& y = cp.features(40).frames;
  const Tensor a = m.convert_voice(x, y), b = r.convert_voice(x, y);
  for (int i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], b[i]);
}
