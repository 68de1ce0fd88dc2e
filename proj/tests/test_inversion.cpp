#include <gtest/gtest.h>

#include <Eigen/QR>

#include "mixlab/inversion.hpp"
#include "support.hpp"

using namespace mixlab;
using namespace mixlab::testing;

namespace {

TokenSequence seq(std::vector<int> ids) { return TokenSequence{std::move(ids), PadSide::right}; }

Tensor<double> random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = rng.normal();
  return Tensor<double>::matrix(r, c, std::move(v));
}

// Rows of E are the columns of W picked by the tokens: e = W onehot(x).
Tensor<double> encode(const Tensor<double>& w, const std::vector<int>& tokens) {
  std::vector<double> e;
  for (int t : tokens)
    for (std::size_t r = 0; r < w.rows(); ++r) e.push_back(w(r, static_cast<std::size_t>(t)));
  return Tensor<double>::matrix(tokens.size(), w.rows(), std::move(e));
}

ModelConfig tiny_lm(Family f) {
  ModelConfig c = small_config(f, 16, 6, 2);
  if (f == Family::transformer) c.n_heads = 2;
  return c;
}

}  // namespace

TEST(Hamming, Examples) {
  EXPECT_EQ(normalized_hamming(seq({1, 2, 3}), seq({1, 2, 3})), 0.0);
  EXPECT_DOUBLE_EQ(normalized_hamming(seq({1, 2, 3}), seq({1, 5, 3})), 1.0 / 3.0);
  EXPECT_EQ(normalized_hamming(seq({1, 2, kPadId, kPadId}), seq({1, 2, 9, 9})), 0.0);
  EXPECT_EQ(normalized_hamming(seq({kPadId, kPadId}), seq({1, 2})), 0.0);
  EXPECT_THROW(normalized_hamming(seq({1, 2}), seq({1, 2, 3})), InputError);
}

TEST(Hamming, PseudometricOnRandomTriples) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    auto draw = [&] {
      std::vector<int> ids(10);
      for (auto& t : ids) t = static_cast<int>(rng.uniform_index(0, 4));
      return seq(ids);
    };
    // Shared pad pattern on all three sides.
    TokenSequence x = draw(), y = draw(), z = draw();
    for (std::size_t i = 7; i < 10; ++i) x.ids[i] = y.ids[i] = z.ids[i] = kPadId;
    const double xy = normalized_hamming(x, y), yx = normalized_hamming(y, x);
    EXPECT_EQ(xy, yx);
    EXPECT_GE(xy, 0.0);
    EXPECT_LE(xy, 1.0);
    EXPECT_LE(normalized_hamming(x, z), xy + normalized_hamming(y, z) + 1e-15);
  }
}

TEST(Decode, EncodeThenDecodeIsIdentityForFullColumnRank) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor<double> w = random_matrix(16, 12, rng);  // d x vocab, rank 12
    std::vector<int> tokens(9);
    for (auto& t : tokens) t = static_cast<int>(rng.uniform_index(0, 12));
    const TokenSequence decoded = decode_embedding(w, encode(w, tokens));
    EXPECT_EQ(normalized_hamming(seq(tokens), decoded), 0.0);
  }
}

TEST(Decode, TinyNoiseDoesNotChangeTokens) {
  Rng rng(6);
  const Tensor<double> w = random_matrix(16, 12, rng);
  const std::vector<int> tokens{3, 1, 4, 1, 5, 9, 2, 6};
  const Tensor<double> e = encode(w, tokens);
  std::vector<double> noisy(e.data().begin(), e.data().end());
  for (auto& v : noisy) v += rng.normal(0.0, 1e-6);
  EXPECT_EQ(decode_embedding(w, Tensor<double>(e.shape(), noisy)).ids, tokens);
}

TEST(Decode, RankDeficientMatchesLeastSquaresOracle) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    // d = 6 < vocab = 10: W has rank 6 and W+ gives the minimum-norm
    // least-squares coefficients.
    const Tensor<double> w = random_matrix(6, 10, rng);
    const Tensor<double> e = random_matrix(5, 6, rng);
    const TokenSequence decoded = decode_embedding(w, e);
    Eigen::MatrixXd wm(6, 10);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 10; ++j) wm(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = w(i, j);
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(wm);
    for (std::size_t p = 0; p < 5; ++p) {
      Eigen::VectorXd rhs(6);
      for (std::size_t j = 0; j < 6; ++j) rhs(static_cast<Eigen::Index>(j)) = e(p, j);
      const Eigen::VectorXd a = cod.solve(rhs);
      Eigen::Index best = 0;
      a.maxCoeff(&best);
      EXPECT_EQ(decoded.ids[p], static_cast<int>(best));
    }
  }
}

TEST(InversionConfig, ScheduleEndpoints) {
  InversionConfig c;
  c.eta = 0.3;
  c.n_iters = 500;
  EXPECT_DOUBLE_EQ(c.eta_at(0), 0.3);
  EXPECT_DOUBLE_EQ(c.eta_at(499), 0.03);
  EXPECT_GT(c.eta_at(200), c.eta_at(201));
  c.n_iters = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.n_iters = 5;
  c.eta = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Inversion, OracleStartIsAFixedPoint) {
  for (Family f : {Family::masked_mixer, Family::transformer}) {
    const ModelConfig c = tiny_lm(f);
    const auto m = make_model<double>(c, 1);
    Rng rng(2);
    const TokenSequence x = random_tokens(c.n_ctx, rng);
    InversionConfig ic;
    ic.n_iters = 3;
    ic.eta = 0.1;
    const auto e = embedding(x.ids, m["wte"]).detach();
    const InversionReport r = invert_from(m, x, e, ic, 1.0);
    ASSERT_EQ(r.history.size(), 4u);
    EXPECT_EQ(r.history[0], 0.0);
    EXPECT_EQ(r.best_iteration, 0u);
    EXPECT_EQ(r.final_distance, 0.0);
    EXPECT_TRUE(r.converged);
    EXPECT_EQ(r.hamming, 0.0);
  }
}

TEST(Inversion, BestSoFarNeverIncreasesAndFlagIsExact) {
  for (Family f : {Family::masked_mixer, Family::transformer}) {
    const ModelConfig c = tiny_lm(f);
    const auto m = make_model<double>(c, 3);
    Rng rng(4);
    const TokenSequence x = random_tokens(c.n_ctx, rng, 4);
    InversionConfig ic;
    ic.n_iters = 40;
    ic.eta = 0.05;
    const InversionReport r = invert_input(m, x, ic, 9);
    ASSERT_EQ(r.history.size(), 41u);
    EXPECT_LE(r.final_distance, r.history.front());
    EXPECT_EQ(r.final_distance, *std::min_element(r.history.begin(), r.history.end()));
    EXPECT_EQ(r.history[r.best_iteration], r.final_distance);
    EXPECT_EQ(r.converged, r.final_distance < r.epsilon);
    EXPECT_GE(r.hamming, 0.0);
    EXPECT_LE(r.hamming, 1.0);
    EXPECT_EQ(r.decoded.size(), c.n_ctx);
  }
}

TEST(Inversion, SmallMixerRecoversItsInput) {
  const ModelConfig c = tiny_lm(Family::masked_mixer);
  const auto m = make_model<double>(c, 5);
  Rng rng(6);
  const TokenSequence x = random_tokens(c.n_ctx, rng);
  InversionConfig ic;
  ic.n_iters = 300;
  ic.eta = 0.1;
  const InversionReport r = invert_input(m, x, ic, 10);
  EXPECT_LT(r.final_distance, 0.01 * r.history.front());
  EXPECT_EQ(r.hamming, 0.0);
}

TEST(Inversion, LastTokenOnlyMatchesOneRow) {
  const ModelConfig c = tiny_lm(Family::masked_mixer);
  const auto m = make_model<double>(c, 5);
  Rng rng(6);
  const TokenSequence x = random_tokens(c.n_ctx, rng);
  InversionConfig full, last;
  full.n_iters = last.n_iters = 1;
  last.last_token_only = true;
  Rng r1(1), r2(1);
  const double eps_full = calibrate_epsilon(m, x, full, r1);
  const double eps_last = calibrate_epsilon(m, x, last, r2);
  EXPECT_GT(eps_full, eps_last);
  EXPECT_GT(eps_last, 0.0);
}

TEST(Inversion, LayerOutOfRangeAndWrongFamilyRejected) {
  const ModelConfig c = tiny_lm(Family::masked_mixer);
  const auto m = make_model<double>(c, 0);
  Rng rng(0);
  const TokenSequence x = random_tokens(c.n_ctx, rng);
  InversionConfig ic;
  ic.layer = 2;
  EXPECT_THROW(invert_input(m, x, ic, 0), ConfigError);
  ic.layer = 0;
  EXPECT_NO_THROW(calibrate_epsilon(m, x, ic, rng));
  const auto ae = make_model<double>(small_config(Family::mixer_autoencoder, 16, 6), 0);
  EXPECT_THROW(invert_input(ae, x, InversionConfig{}, 0), ConfigError);
}

TEST(Calibration, ZeroNoiseGivesZeroEpsilon) {
  const ModelConfig c = tiny_lm(Family::masked_mixer);
  const auto m = make_model<double>(c, 0);
  Rng rng(0);
  const TokenSequence x = random_tokens(c.n_ctx, rng);
  InversionConfig ic;
  ic.calib_noise_std = 0.0;
  EXPECT_EQ(calibrate_epsilon(m, x, ic, rng), 0.0);
}

TEST(Calibration, EpsilonGrowsWithNoiseOnAverage) {
  const ModelConfig c = tiny_lm(Family::masked_mixer);
  const auto m = make_model<double>(c, 0);
  Rng data(1);
  const TokenSequence x = random_tokens(c.n_ctx, data);
  std::vector<double> means;
  for (double s : {0.01, 0.05, 0.1}) {
    InversionConfig ic;
    ic.calib_noise_std = s;
    double total = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      total += calibrate_epsilon(m, x, ic, rng);
    }
    means.push_back(total / 20);
  }
  EXPECT_LT(means[0], means[1]);
  EXPECT_LT(means[1], means[2]);
}

TEST(Calibration, MixerDecodingSurvivesCalibrationNoise) {
  // Unit-variance mixer embeddings sit far apart relative to 0.05 noise.
  const ModelConfig c = tiny_lm(Family::masked_mixer);
  const auto m = make_model<double>(c, 0);
  Rng rng(2);
  const TokenSequence x = random_tokens(c.n_ctx, rng);
  std::string warning;
  calibrate_epsilon(m, x, InversionConfig{}, rng, &warning);
  EXPECT_TRUE(warning.empty()) << warning;
}

TEST(Inversion, CsvRowHasEveryColumn) {
  InversionReport r;
  r.final_distance = 1.5;
  r.epsilon = 2.0;
  r.converged = true;
  r.hamming = 0.25;
  const std::string row = inversion_csv_row(7, "mixer", -1, 32, r);
  EXPECT_EQ(row, "7,mixer,-1,32,1.5,2,1,0.25");
  const std::string header = inversion_csv_header();
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), 7);
}
