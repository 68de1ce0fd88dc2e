#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "mixlab/gradcheck.hpp"
#include "mixlab/retrieval.hpp"
#include "support.hpp"

using namespace mixlab;
using namespace mixlab::testing;

namespace {

Tensor<double> gaussian(std::size_t r, std::size_t c, Rng& rng) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = rng.normal();
  return Tensor<double>::matrix(r, c, std::move(v));
}

EmbeddingStore<double> store_of(Tensor<double> x, Tensor<double> y) {
  EmbeddingStore<double> s;
  s.x = std::move(x);
  s.y = std::move(y);
  return s;
}

// Targets are the queries plus a little noise: a learnable matching task.
EmbeddingStore<double> matched_store(std::size_t n, std::size_t d, double noise, Rng& rng) {
  const Tensor<double> x = gaussian(n, d, rng);
  std::vector<double> y(x.data().begin(), x.data().end());
  for (auto& v : y) v += rng.normal(0.0, noise);
  return store_of(x, Tensor<double>::matrix(n, d, y));
}

double naive_cosine(const Tensor<double>& a, std::size_t i, const Tensor<double>& b, std::size_t j) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t k = 0; k < a.cols(); ++k) {
    dot += a(i, k) * b(j, k);
    na += a(i, k) * a(i, k);
    nb += b(j, k) * b(j, k);
  }
  return dot / std::sqrt(na * nb);
}

}  // namespace

// ---------------------------------------------------------------------------
// Candidate sampling

TEST(Sampling, TwoSlotsForceTheMatchIntoSlotOne) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(draw_candidates(3, 10, 2, rng).m, 1u);
}

TEST(Sampling, MatchNeverAppearsAmongNegatives) {
  Rng rng(2);
  for (int i = 0; i < 10000; ++i) {
    const std::size_t n = rng.uniform_index(0, 40);
    const CandidateDraw d = draw_candidates(n, 40, 8, rng);
    ASSERT_GE(d.m, 1u);
    ASSERT_LT(d.m, 8u);
    ASSERT_EQ(d.candidates[d.m], n);
    std::set<std::size_t> seen;
    for (std::size_t j = 1; j < 8; ++j) {
      if (j != d.m) ASSERT_NE(d.candidates[j], n);
      seen.insert(d.candidates[j]);
    }
    ASSERT_EQ(seen.size(), 7u);
  }
}

TEST(Sampling, MatchSlotIsUniform) {
  // Chi-square over 7 slots, 6 degrees of freedom; 22.46 is the p = 0.001 quantile.
  Rng rng(3);
  std::vector<double> counts(8, 0);
  const int draws = 20000;
  for (int i = 0; i < draws; ++i) counts[draw_candidates(0, 20, 8, rng).m] += 1;
  double chi2 = 0;
  for (std::size_t j = 1; j < 8; ++j) chi2 += (counts[j] - draws / 7.0) * (counts[j] - draws / 7.0) / (draws / 7.0);
  EXPECT_EQ(counts[0], 0);
  EXPECT_LT(chi2, 22.46);
}

TEST(Sampling, ContextLargerThanPoolRejected) {
  Rng rng(4);
  EXPECT_THROW(draw_candidates(0, 5, 6, rng), InputError);
  EXPECT_NO_THROW(draw_candidates(0, 5, 5, rng));
  EXPECT_THROW(draw_candidates(0, 5, 1, rng), ConfigError);
}

TEST(Sampling, BatchRowsFollowTheDraw) {
  Rng rng(5);
  const auto store = matched_store(12, 4, 0.1, rng);
  const auto b = sample_retrieval_batch(store, 7, 5, rng);
  EXPECT_EQ(b.a.rows(), 5u);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(b.a(0, k), store.x(7, k));
    EXPECT_EQ(b.a(b.m, k), store.y(7, k));
  }
  for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(b.q[j], j == b.m ? 1 : 0);
}

// ---------------------------------------------------------------------------
// InfoNCE

TEST(InfoNCE, EqualSimilaritiesGiveLogOfCandidateCount) {
  const std::vector<double> q{1, 0, 0};
  const std::vector<double> same{0, 1, 0};
  const std::vector<std::vector<double>> negs(31, same);
  EXPECT_NEAR(infonce_loss(q, same, negs, 0.02), std::log(32.0), 1e-9);
  EXPECT_NEAR(std::log(32.0), 3.4657, 1e-4);
}

TEST(InfoNCE, PerfectSeparationLimit) {
  const std::vector<double> q{1, 0}, pos{2, 0};
  const std::vector<std::vector<double>> negs(31, std::vector<double>{-1, 0});
  const double loss = infonce_loss(q, pos, negs, 0.02);
  EXPECT_GE(loss, 0.0);
  EXPECT_LT(loss, 1e-40);
}

TEST(InfoNCE, MatchesDirectFormulaAtUnitTemperature) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    auto vec = [&] {
      std::vector<double> v(5);
      for (auto& x : v) x = rng.normal();
      return v;
    };
    const auto q = vec(), pos = vec();
    std::vector<std::vector<double>> negs;
    for (int i = 0; i < 6; ++i) negs.push_back(vec());
    auto cos = [](const std::vector<double>& a, const std::vector<double>& b) {
      double d = 0, na = 0, nb = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        d += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
      }
      return d / std::sqrt(na * nb);
    };
    const double fp = std::exp(cos(q, pos));
    double denom = fp;
    for (const auto& n : negs) denom += std::exp(cos(q, n));
    EXPECT_NEAR(infonce_loss(q, pos, negs, 1.0), -std::log(fp / denom), 1e-10);
  }
}

TEST(InfoNCE, DecreasesAsThePositiveAligns) {
  const std::vector<double> q{1, 0};
  const std::vector<std::vector<double>> negs{{0, 1}, {-1, 1}, {1, -2}};
  double previous = 1e300;
  for (double angle = 3.0; angle >= 0.0; angle -= 0.25) {
    const std::vector<double> pos{std::cos(angle), std::sin(angle)};
    const double loss = infonce_loss(q, pos, negs, 0.1);
    EXPECT_LT(loss, previous);
    EXPECT_GE(loss, 0.0);
    previous = loss;
  }
}

TEST(InfoNCE, ZeroVectorRejected) {
  const std::vector<double> zero{0, 0}, v{1, 0};
  EXPECT_THROW(infonce_loss(zero, v, {v}, 0.02), InputError);
  EXPECT_THROW(infonce_loss(v, v, {v}, 0.0), ConfigError);
}

TEST(InfoNCE, TensorFormAgreesAndDifferentiates) {
  Rng rng(7);
  const Tensor<double> q = gaussian(3, 6, rng), cand = gaussian(3 * 5, 6, rng);
  double expected = 0;
  for (std::size_t b = 0; b < 3; ++b) {
    std::vector<double> qv, pos;
    std::vector<std::vector<double>> negs;
    for (std::size_t k = 0; k < 6; ++k) {
      qv.push_back(q(b, k));
      pos.push_back(cand(b * 5, k));
    }
    for (std::size_t j = 1; j < 5; ++j) {
      negs.emplace_back();
      for (std::size_t k = 0; k < 6; ++k) negs.back().push_back(cand(b * 5 + j, k));
    }
    expected += infonce_loss(qv, pos, negs, 0.5) / 3;
  }
  EXPECT_NEAR(infonce_loss(q, cand, 0.5).item(), expected, 1e-12);
  EXPECT_LE(grad_check([&](const Tensor<double>& x) { return infonce_loss(x, cand, 0.5); }, q), 1e-6);
  EXPECT_LE(grad_check([&](const Tensor<double>& x) { return infonce_loss(q, x, 0.5); }, cand), 1e-6);
}

// ---------------------------------------------------------------------------
// Batched cosine retrieval

TEST(Retrieve, SelfMatchRanksFirst) {
  Rng rng(8);
  const Tensor<double> y = gaussian(10, 4, rng);
  std::vector<double> row;
  for (std::size_t k = 0; k < 4; ++k) row.push_back(3.0 * y(6, k));
  const auto r = retrieve_topk(Tensor<double>::matrix(1, 4, row), y, 3);
  EXPECT_EQ(r[0].index[0], 6u);
  EXPECT_NEAR(r[0].score[0], 1.0, 1e-15);
}

TEST(Retrieve, OrthogonalDistractorsScoreZeroAndTiesGoToLowerIndex) {
  const Tensor<double> y = Tensor<double>::matrix(4, 3, {0, 1, 0, 1, 0, 0, 0, 0, 1, 0, 2, 0});
  const auto r = retrieve_topk(Tensor<double>::matrix(1, 3, {1, 0, 0}), y, 4);
  EXPECT_EQ(r[0].index, (std::vector<std::size_t>{1, 0, 2, 3}));
  EXPECT_EQ(r[0].score[1], 0.0);
  EXPECT_THROW(retrieve_topk(Tensor<double>::matrix(1, 3, {0, 0, 0}), y, 1), InputError);
}

TEST(Retrieve, BatchedEqualsPairwiseOracle) {
  Rng rng(9);
  const Tensor<double> x = gaussian(64, 16, rng), y = gaussian(64, 16, rng);
  const auto ranked = retrieve_topk(x, y, 64);
  for (std::size_t i = 0; i < 64; ++i) {
    std::vector<std::pair<double, std::size_t>> naive;
    for (std::size_t j = 0; j < 64; ++j) naive.emplace_back(naive_cosine(x, i, y, j), j);
    std::stable_sort(naive.begin(), naive.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; r < 64; ++r) {
      ASSERT_EQ(ranked[i].index[r], naive[r].second);
      ASSERT_NEAR(ranked[i].score[r], naive[r].first, 1e-14);
    }
  }
}

TEST(Retrieve, InvariantToRowPermutationAndRescaling) {
  Rng rng(10);
  const Tensor<double> x = gaussian(5, 8, rng), y = gaussian(20, 8, rng);
  std::vector<std::size_t> perm(20);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm.begin(), perm.end());
  const Tensor<double> yp = gather_rows(y, perm);
  const auto a = retrieve_topk(x, y, 5);
  const auto b = retrieve_topk(scale(x, 7.5), yp, 5);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t r = 0; r < 5; ++r) {
      EXPECT_EQ(a[i].index[r], perm[b[i].index[r]]);
      EXPECT_NEAR(a[i].score[r], b[i].score[r], 1e-14);
    }
}

TEST(TopKAccuracy, PerfectEmbedderAlwaysHits) {
  const std::size_t n = 40;
  std::vector<double> eye(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
  const Tensor<double> id = Tensor<double>::matrix(n, n, eye);
  std::ostringstream log;
  const auto rows = eval_topk_accuracy(id, id, {8, 32, 1000}, 200, 1, &log);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) EXPECT_EQ(r.top1_accuracy, 1.0);
  EXPECT_NE(log.str().find("skipping n=1000"), std::string::npos);
}

TEST(TopKAccuracy, RandomEmbedderSitsAtChance) {
  Rng rng(11);
  const Tensor<double> x = gaussian(300, 16, rng), y = gaussian(300, 16, rng);
  const std::size_t trials = 4000;
  for (const auto& r : eval_topk_accuracy(x, y, {8, 32}, trials, 2, nullptr)) {
    const double p = 1.0 / static_cast<double>(r.n - 1);
    EXPECT_NEAR(r.top1_accuracy, p, 3 * std::sqrt(p * (1 - p) / trials)) << r.n;
  }
}

TEST(TopKAccuracy, SmallerCandidateSetsAreEasier) {
  Rng rng(12);
  const auto store = matched_store(300, 16, 1.0, rng);
  const auto rows = eval_topk_accuracy(store.x, store.y, {8, 256}, 2000, 3, nullptr);
  EXPECT_GT(rows[0].top1_accuracy, rows[1].top1_accuracy);
  EXPECT_EQ(accuracy_csv(rows).substr(0, 22), "n,trials,top1_accuracy");
}

// ---------------------------------------------------------------------------
// Embedding extraction

TEST(Embedding, IdenticalSequencesGiveIdenticalRowsAndShortOnesAreSkipped) {
  ModelConfig c = small_config(Family::masked_mixer);
  c.padding_side = PadSide::left;
  const auto m = make_model<double>(c, 1);
  const std::vector<TextPair> pairs{{"alpha", "beta gamma"}, {"alpha", "beta gamma"}, {"x", "long enough"}, {"query", "target"}};
  const auto store = embed_corpus(m, pairs, "test");
  EXPECT_EQ(store.size(), 3u);
  EXPECT_EQ(store.skipped.size(), 1u);
  for (std::size_t k = 0; k < c.d_model; ++k) {
    EXPECT_EQ(store.x(0, k), store.x(1, k));
    EXPECT_EQ(store.y(0, k), store.y(1, k));
  }
}

TEST(Embedding, RowsFollowTheWeights) {
  const ModelConfig c = small_config(Family::masked_mixer);
  auto m = make_model<double>(c, 1);
  const std::vector<TextPair> pairs{{"some query", "some target"}};
  const auto before = embed_corpus(m, pairs);
  m.params.at("blocks.1.ff.b2").mutable_data()[0] += 0.5;
  const auto after = embed_corpus(m, pairs);
  EXPECT_NE(before.x(0, 0), after.x(0, 0));
}

TEST(Embedding, SecondToLastPositionOfTheLastLayer) {
  const ModelConfig c = small_config(Family::masked_mixer);
  const auto m = make_model<double>(c, 2);
  Rng rng(3);
  const TokenSequence s = random_tokens(c.n_ctx, rng);
  const auto e = extract_embeddings(m, make_batch(s, c));
  const auto h = forward(m, make_batch(s, c)).hidden.back();
  for (std::size_t k = 0; k < c.d_model; ++k) EXPECT_EQ(e(0, k), h(c.n_ctx - 2, k));
}

// ---------------------------------------------------------------------------
// Indirect training

TEST(Indirect, FreshModelLossNearLogC) {
  Rng rng(13);
  const auto store = matched_store(100, 16, 0.1, rng);
  const auto m = make_model<double>(small_config(Family::retrieval_mixer, 16, 8), 1);
  IndirectConfig ic;
  ic.c = 8;
  ic.batch_size = 16;
  EXPECT_NEAR(indirect_eval_loss(m, store, ic), std::log(8.0), 0.1);
}

TEST(Indirect, LearnsMatchedEmbeddingsButNotRandomOnes) {
  Rng rng(14);
  const ModelConfig c = small_config(Family::retrieval_mixer, 16, 8);
  IndirectConfig ic;
  ic.c = 8;
  ic.batch_size = 16;
  ic.eval_batches = 32;
  ic.steps = 1000;
  ic.lr = 3e-3;
  const auto train_pos = matched_store(200, 16, 0.1, rng), eval_pos = matched_store(100, 16, 0.1, rng);
  auto pos = make_model<float>(c, 2);
  auto to_float = [](const EmbeddingStore<double>& s) {
    EmbeddingStore<float> f;
    f.x = s.x.cast<float>();
    f.y = s.y.cast<float>();
    return f;
  };
  const auto rp = train_indirect(pos, to_float(train_pos), to_float(eval_pos), ic);
  EXPECT_LT(rp.final_eval_loss(), std::log(8.0) - 0.5);

  const auto train_neg = store_of(gaussian(200, 16, rng), gaussian(200, 16, rng));
  const auto eval_neg = store_of(gaussian(100, 16, rng), gaussian(100, 16, rng));
  auto neg = make_model<float>(c, 2);
  const auto rn = train_indirect(neg, to_float(train_neg), to_float(eval_neg), ic);
  // Slot 0 holds the query and is never the answer, so an uninformed model
  // can reach ln(c-1) but not below.
  EXPECT_GT(rn.final_eval_loss(), 0.98 * std::log(7.0));
}

TEST(Indirect, GeneratorIsNeverModified) {
  const ModelConfig gc = small_config(Family::masked_mixer);
  const auto generator = make_model<float>(gc, 3);
  const auto snapshot = clone(generator);
  Rng rng(15);
  std::vector<TextPair> pairs = synthetic_pairs(40, rng);
  const auto store = embed_corpus(generator, pairs);
  auto m = make_model<float>(small_config(Family::retrieval_mixer, gc.d_model, 8), 4);
  IndirectConfig ic;
  ic.c = 8;
  ic.batch_size = 4;
  ic.steps = 3;
  train_indirect(m, store, store, ic);
  for (const auto& [name, t] : generator.params)
    for (std::size_t i = 0; i < t.numel(); ++i) ASSERT_EQ(t[i], snapshot[name][i]) << name;
}

TEST(Indirect, ContextMustMatchModel) {
  Rng rng(16);
  const auto store = matched_store(50, 16, 0.1, rng);
  auto m = make_model<double>(small_config(Family::retrieval_mixer, 16, 8), 1);
  IndirectConfig ic;
  ic.c = 16;
  EXPECT_THROW(train_indirect(m, store, store, ic), ConfigError);
}

// ---------------------------------------------------------------------------
// InfoNCE training

TEST(InfoNCETraining, RejectsNonEmbeddingFamiliesAndSmallCorpora) {
  Rng rng(17);
  const auto pairs = synthetic_pairs(10, rng);
  auto r = make_model<float>(small_config(Family::retrieval_mixer, 16, 8), 0);
  const auto seqs = encode_pairs<float>(pairs, r.config);
  InfoNCEConfig cfg;
  cfg.negatives = 3;
  EXPECT_THROW(train_infonce(r, seqs, seqs, cfg), ConfigError);
  auto m = make_model<float>(small_config(Family::masked_mixer, 16, 32), 0);
  const auto ms = encode_pairs<float>(pairs, m.config);
  cfg.negatives = 30;
  EXPECT_THROW(train_infonce(m, ms, ms, cfg), InputError);
}

TEST(InfoNCETraining, ShortRunIsDeterministic) {
  Rng rng(18);
  ModelConfig c = small_config(Family::masked_mixer, 16, 32);
  c.padding_side = PadSide::left;
  const auto pairs = encode_pairs<double>(synthetic_pairs(12, rng), c);
  InfoNCEConfig cfg;
  cfg.negatives = 4;
  cfg.steps = 2;
  cfg.accumulate = 2;
  cfg.eval_queries = 4;
  auto a = make_model<double>(c, 5), b = make_model<double>(c, 5);
  EXPECT_EQ(metrics_csv(train_infonce(a, pairs, pairs, cfg).metrics), metrics_csv(train_infonce(b, pairs, pairs, cfg).metrics));
}
