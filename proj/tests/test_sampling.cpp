#include <cmath>
#include <map>
#include <sstream>

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include "common.hpp"
#include "sundae/sampling.hpp"

using namespace sundae;
using test_util::random_model;
using test_util::tiny_config;

namespace {

DenoiserModel<double> uniform_model(std::size_t v, std::size_t n) {
  Rng r(1);
  return DenoiserModel<double>::init(tiny_config(ModelMode::Unconditional, v, n), r);
}

TokenSeq argmax_of(const Tensor<double>& logits) {
  TokenSeq y(logits.rows());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<TokenId>(argmax<double>(logits.row(i)));
  return y;
}

std::size_t non_pad_repeats(const TokenSeq& x) {
  std::size_t c = 0;
  for (std::size_t i = 1; i < x.size(); ++i) c += x[i] != kPad && x[i] == x[i - 1];
  return c;
}

}  // namespace

TEST(TriangularCount, Examples) {
  EXPECT_EQ(triangular_count(5, 10, 256), 256u);
  EXPECT_EQ(triangular_count(1, 10, 256), 51u);
  EXPECT_EQ(triangular_count(0, 10, 256), 0u);
  EXPECT_EQ(triangular_count(0, 3, 7), 0u);
  EXPECT_EQ(triangular_count(10, 10, 256), 0u);
  EXPECT_THROW(triangular_count(11, 10, 4), ArgumentError);
  EXPECT_THROW(triangular_count(0, 0, 4), ArgumentError);
}

TEST(TriangularCount, MatchesFormula) {
  for (std::size_t T = 1; T <= 17; ++T)
    for (std::size_t t = 0; t <= T; ++t) {
      const double f = std::min(double(t) / T, 1.0 - double(t) / T);
      EXPECT_EQ(triangular_count(t, T, 64), static_cast<std::size_t>(std::floor(128 * f + 1e-9)))
          << t << "/" << T;
    }
}

TEST(LowTempStep, ZeroCountIsNoOp) {
  const auto m = random_model<double>(tiny_config(), 2);
  Rng r(1);
  const TokenSeq y{1, 2, 3, 4, 5, 6, 7, 0};
  EXPECT_EQ(sample_step_low_temp<double>(m, y, 0.5, 0, {}, nullptr, r), y);
}

TEST(LowTempStep, TinyTemperatureIsArgmax) {
  const auto m = random_model<double>(tiny_config(), 3);
  Rng r(2);
  for (int k = 0; k < 20; ++k) {
    TokenSeq y(8);
    for (auto& t : y) t = static_cast<TokenId>(r.uniform_int(8));
    const auto want = argmax_of(denoise_logits<double>(m, y));
    EXPECT_EQ(sample_step_low_temp<double>(m, y, 1e-6, 8, {}, nullptr, r), want);
  }
}

TEST(LowTempStep, UniformModelDrawsUniformTokens) {
  const std::size_t v = 5, n = 4;
  const auto m = uniform_model(v, n);
  Rng r(3);
  std::vector<double> counts(v, 0.0);
  const TokenSeq y(n, 0);
  const std::size_t calls = 25000;
  for (std::size_t c = 0; c < calls; ++c)
    for (auto t : sample_step_low_temp<double>(m, y, 1.0, n, {}, nullptr, r)) ++counts[t];
  const double expect = double(calls * n) / v;
  double chi2 = 0;
  for (double o : counts) chi2 += (o - expect) * (o - expect) / expect;
  const boost::math::chi_squared dist(double(v - 1));
  EXPECT_GT(1.0 - boost::math::cdf(dist, chi2), 0.001) << "chi2 " << chi2;
}

TEST(LowTempStep, CountIsClippedToFreePositions) {
  const auto m = random_model<double>(tiny_config(), 4);
  Rng r(5);
  const TokenSeq y{7, 7, 7, 7, 7, 7, 7, 7};
  const std::vector<std::uint8_t> clamp{1, 1, 1, 0, 1, 1, 0, 1};
  for (int k = 0; k < 50; ++k) {
    const auto out = sample_step_low_temp<double>(m, y, 1.0, 8, clamp, nullptr, r);
    for (std::size_t i = 0; i < 8; ++i)
      if (clamp[i]) EXPECT_EQ(out[i], y[i]);
  }
  EXPECT_THROW(sample_step_low_temp<double>(m, y, 0.0, 1, {}, nullptr, r), ArgumentError);
  EXPECT_THROW(sample_step_low_temp<double>(m, y, 1.0, 9, {}, nullptr, r), ArgumentError);
}

TEST(LowTempStep, UpdatesExactlyCountPositionsAtMost) {
  const auto m = random_model<double>(tiny_config(), 6);
  Rng r(7);
  const TokenSeq y{1, 2, 3, 4, 5, 6, 7, 0};
  for (std::size_t k = 0; k <= 8; ++k)
    for (int rep = 0; rep < 10; ++rep) {
      const auto out = sample_step_low_temp<double>(m, y, 1.0, k, {}, nullptr, r);
      std::size_t changed = 0;
      for (std::size_t i = 0; i < 8; ++i) changed += out[i] != y[i];
      EXPECT_LE(changed, k);
    }
}

TEST(ArgmaxUnrolled, ZeroShareIsPlainArgmax) {
  const auto m = random_model<double>(tiny_config(), 8);
  const TokenSeq y{3, 1, 4, 1, 5, 2, 6, 5};
  const auto lam = denoise_logits<double>(m, {0, 0, 0, 0, 0, 0, 0, 0});
  const auto r = argmax_unrolled_step<double>(m, y, &lam, 0.0, {}, nullptr);
  EXPECT_EQ(r.y, argmax_of(denoise_logits<double>(m, y)));
  EXPECT_EQ(r.forward_passes, 1u);
  // First step without carried logits is the plain argmax too.
  EXPECT_EQ(argmax_unrolled_step<double>(m, y, nullptr, 0.7, {}, nullptr, 1).y, r.y);
}

TEST(ArgmaxUnrolled, FullShareTakesUnrolledTokens) {
  const auto m = random_model<double>(tiny_config(), 9);
  const TokenSeq y{3, 1, 4, 1, 5, 2, 6, 5};
  const auto lam = denoise_logits<double>(m, y);
  const auto r = argmax_unrolled_step<double>(m, y, &lam, 1.0, {}, nullptr);
  const auto predicted = argmax_of(denoise_logits<double>(m, y));
  EXPECT_EQ(r.y, argmax_of(denoise_logits<double>(m, predicted)));
  EXPECT_EQ(r.forward_passes, 2u);
}

TEST(ArgmaxUnrolled, MissingCarryThrows) {
  const auto m = random_model<double>(tiny_config(), 9);
  const TokenSeq y(8, 2);
  EXPECT_THROW(argmax_unrolled_step<double>(m, y, nullptr, 0.5, {}, nullptr, 2), ArgumentError);
  const auto lam = denoise_logits<double>(m, y);
  EXPECT_THROW(argmax_unrolled_step<double>(m, y, &lam, 1.5, {}, nullptr), ArgumentError);
}

TEST(ArgmaxUnrolled, MatchesStepByStepReference) {
  // N = 2, v = 3. The reference recomputes every quantity position by position.
  const auto m = random_model<double>(tiny_config(ModelMode::Unconditional, 3, 2), 10, 3.0);
  for (std::size_t i0 = 0; i0 < 9; ++i0)
    for (std::size_t ip = 0; ip < 9; ++ip)
      for (double rho : {0.0, 0.3, 0.5, 1.0}) {
        const TokenSeq y = sequence_at(i0, 3, 2), prev = sequence_at(ip, 3, 2);
        const auto lam_prev = denoise_logits<double>(m, prev);
        const auto got = argmax_unrolled_step<double>(m, y, &lam_prev, rho, {}, nullptr);

        const std::size_t k = static_cast<std::size_t>(std::ceil(rho * 2 - 1e-12));
        std::vector<double> ls(3);
        double cert[2];
        for (std::size_t i = 0; i < 2; ++i) {
          log_softmax_row<double>(lam_prev.row(i), ls);
          cert[i] = *std::max_element(ls.begin(), ls.end());
        }
        std::vector<std::size_t> order{0, 1};
        if (cert[1] < cert[0]) std::swap(order[0], order[1]);
        const auto lam = denoise_logits<double>(m, y);
        TokenSeq want = argmax_of(lam), mid = y;
        for (std::size_t j = 0; j < k; ++j) mid[order[j]] = want[order[j]];
        const auto unrolled = denoise_logits<double>(m, mid);
        for (std::size_t j = 0; j < k; ++j)
          want[order[j]] = static_cast<TokenId>(argmax<double>(unrolled.row(order[j])));
        ASSERT_EQ(got.y, want) << i0 << " " << ip << " rho " << rho;
        ASSERT_EQ(got.lambda.values().size(), lam.values().size());
        ASSERT_TRUE(std::equal(lam.values().begin(), lam.values().end(), got.lambda.values().begin()));
      }
}

TEST(SampleChain, ZeroStepsReturnsInitialState) {
  const auto m = random_model<double>(tiny_config(), 11);
  SamplerConfig c;
  c.steps = 0;
  const auto tr = sample_chain<double>(m, c);
  EXPECT_EQ(tr.states.size(), 1u);
  EXPECT_TRUE(tr.changed.empty());
}

TEST(SampleChain, FullyClampedTemplateNeverMoves) {
  const auto m = random_model<double>(tiny_config(), 12);
  Template tpl{{2, 3, 4, 5, 6, 7, 0, 0}, std::vector<std::uint8_t>(8, 1)};
  for (auto strategy : {Strategy::LowTemp, Strategy::ArgmaxUnrolled}) {
    SamplerConfig c;
    c.steps = 6;
    c.strategy = strategy;
    c.uncertain_share = 0.5;
    const auto tr = sample_chain<double>(m, c, &tpl);
    for (const auto& s : tr.states) EXPECT_EQ(s, tpl.tokens);
  }
}

TEST(SampleChain, ClampedPositionsAreStableAndTraceIsConsistent) {
  const auto m = random_model<double>(tiny_config(), 13, 2.0);
  Template tpl{{2, 0, 4, 0, 0, 7, 0, 3}, {1, 0, 1, 0, 0, 1, 0, 1}};
  for (auto strategy : {Strategy::LowTemp, Strategy::ArgmaxUnrolled})
    for (auto schedule : {Schedule::Constant, Schedule::Triangular})
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        SamplerConfig c;
        c.steps = 7;
        c.strategy = strategy;
        c.schedule = schedule;
        c.update_fraction = 0.5;
        c.uncertain_share = 0.4;
        c.temperature = 1.0;
        c.seed = seed;
        const auto tr = sample_chain<double>(m, c, &tpl);
        ASSERT_LE(tr.states.size(), c.steps + 1);
        ASSERT_EQ(tr.changed.size() + 1, tr.states.size());
        for (std::size_t s = 0; s < tr.states.size(); ++s) {
          for (std::size_t i = 0; i < 8; ++i)
            if (tpl.clamp[i]) ASSERT_EQ(tr.states[s][i], tpl.tokens[i]);
          if (s == 0) continue;
          std::size_t diff = 0;
          for (std::size_t i = 0; i < 8; ++i) diff += tr.states[s][i] != tr.states[s - 1][i];
          ASSERT_EQ(diff, tr.changed[s - 1]);
          if (strategy == Strategy::LowTemp) {
            const std::size_t cap = schedule == Schedule::Triangular ? triangular_count(s, 7, 8) : 2;
            ASSERT_LE(diff, cap);
          }
        }
      }
}

TEST(SampleChain, SameSeedSameTrace) {
  const auto m = random_model<double>(tiny_config(), 14);
  SamplerConfig c;
  c.steps = 5;
  c.seed = 77;
  c.temperature = 1.0;
  const auto a = sample_chain<double>(m, c), b = sample_chain<double>(m, c);
  EXPECT_EQ(a.states, b.states);
  EXPECT_EQ(a.score, b.score);
  c.seed = 78;
  EXPECT_NE(sample_chain<double>(m, c).states, a.states);
}

TEST(SampleChain, EarlyStopEndsWhenNothingChanges) {
  // An untrained model predicts token 0 everywhere: one step, then a fixed point.
  const auto m = uniform_model(8, 8);
  SamplerConfig c;
  c.steps = 10;
  c.strategy = Strategy::ArgmaxUnrolled;
  c.early_stop = true;
  c.seed = 3;
  const auto tr = sample_chain<double>(m, c);
  ASSERT_EQ(tr.states.size(), 3u);
  EXPECT_EQ(tr.changed.back(), 0u);
  EXPECT_EQ(tr.states.back(), TokenSeq(8, 0));
  c.early_stop = false;
  EXPECT_EQ(sample_chain<double>(m, c).states.size(), 11u);
}

TEST(SampleChain, EncoderDecoderNeedsConditioning) {
  const auto m = random_model<double>(tiny_config(ModelMode::EncoderDecoder), 15);
  SamplerConfig c;
  EXPECT_THROW(sample_chain<double>(m, c), ArgumentError);
}

TEST(SampleChain, TraceFormat) {
  const auto vocab = Vocab::from_tokens({"<pad>", "<unk>", "a", "b"}, VocabKind::Word);
  ChainTrace tr;
  tr.states = {{2, 3, 0}, {2, 2, 0}};
  tr.changed = {1};
  EXPECT_EQ(format_trace(tr, vocab), "step=0 changed=0 a b <pad>\nstep=1 changed=1 a a <pad>\n");
}

TEST(ModelScore, UniformModelScoresLogV) {
  const auto m = uniform_model(6, 5);
  for (const TokenSeq& y : {TokenSeq{0, 0, 0, 0, 0}, TokenSeq{5, 4, 3, 2, 1}})
    EXPECT_NEAR(model_score<double>(m, y), std::log(6.0), 1e-12);
}

TEST(ModelScore, DeterministicAndMatchesBatchedScores) {
  const auto m = random_model<double>(tiny_config(), 16);
  const std::vector<TokenSeq> ys{{1, 2, 3, 4, 5, 6, 7, 0}, {7, 7, 7, 7, 0, 0, 0, 0}};
  const auto batched = model_scores<double>(m, ys);
  for (std::size_t i = 0; i < ys.size(); ++i) {
    EXPECT_EQ(model_score<double>(m, ys[i]), model_score<double>(m, ys[i]));
    EXPECT_NEAR(model_score<double>(m, ys[i]), batched[i], 1e-12);
  }
}

TEST(Rerank, TieBreakAndSingle) {
  const auto m = random_model<double>(tiny_config(), 17);
  const std::vector<TokenSeq> one{{1, 2, 3, 4, 5, 6, 7, 0}};
  EXPECT_EQ(rerank<double>(one, m).best, 0u);
  const std::vector<TokenSeq> dup{{1, 2, 3, 4, 5, 6, 7, 0}, {1, 2, 3, 4, 5, 6, 7, 0}};
  EXPECT_EQ(rerank<double>(dup, m).best, 0u);
  EXPECT_THROW(rerank<double>(std::span<const TokenSeq>{}, m), ArgumentError);
}

TEST(Rerank, WiderNeverScoresWorse) {
  const auto m = random_model<double>(tiny_config(), 18, 2.0);
  SamplerConfig c;
  c.steps = 4;
  c.temperature = 1.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::vector<ChainSpec<double>> chains;
    for (std::uint64_t j = 0; j < 16; ++j) chains.push_back({nullptr, nullptr, Rng(seed).fork(j)});
    const auto traces = run_chains(m, c, chains);
    std::vector<TokenSeq> finals;
    for (const auto& t : traces) finals.push_back(t.states.back());
    const auto wide = rerank<double>(finals, m);
    const auto narrow = rerank<double>(std::span<const TokenSeq>(finals).first(1), m);
    EXPECT_LE(wide.scores[wide.best], narrow.scores[narrow.best]);
    EXPECT_DOUBLE_EQ(traces[wide.best].score, wide.scores[wide.best]);
  }
}

TEST(ExactChainProb, UniformModelIsUniform) {
  const auto m = uniform_model(3, 2);
  for (std::size_t t : {1u, 2u, 3u})
    EXPECT_NEAR(exact_chain_prob<double>(m, {0, 1}, {2, 2}, t), 1.0 / 9.0, 1e-12);
}

TEST(ExactChainProb, OneStepIsPositionProduct) {
  const auto m = random_model<double>(tiny_config(ModelMode::Unconditional, 3, 2), 19, 2.0);
  const TokenSeq x0{1, 2}, x{2, 0};
  const auto logits = denoise_logits<double>(m, x0);
  std::vector<double> p(3);
  double want = 1;
  for (std::size_t i = 0; i < 2; ++i) {
    softmax_row<double>(logits.row(i), 1.0, p);
    want *= p[x[i]];
  }
  EXPECT_NEAR(exact_chain_prob<double>(m, x0, x, 1), want, 1e-14);
}

TEST(ExactChainProb, NormalizedForTinyInstances) {
  const auto m = random_model<double>(tiny_config(ModelMode::Unconditional, 3, 2), 20, 2.0);
  for (std::size_t t : {1u, 2u, 3u})
    for (std::size_t i0 = 0; i0 < 9; ++i0) {
      double total = 0;
      for (std::size_t i = 0; i < 9; ++i)
        total += exact_chain_prob<double>(m, sequence_at(i0, 3, 2), sequence_at(i, 3, 2), t);
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
}

TEST(ExactChainProb, AgreesWithMonteCarlo) {
  const auto m = random_model<double>(tiny_config(ModelMode::Unconditional, 3, 2), 21, 2.0);
  std::vector<std::vector<double>> probs(9);
  for (std::size_t s = 0; s < 9; ++s) {
    const auto logits = denoise_logits<double>(m, sequence_at(s, 3, 2));
    probs[s].resize(6);
    for (std::size_t i = 0; i < 2; ++i)
      softmax_row<double>(logits.row(i), 1.0, std::span<double>(probs[s]).subspan(i * 3, 3));
  }
  const TokenSeq x0{2, 1};
  Rng r(22);
  std::vector<double> counts(9, 0.0);
  const std::size_t draws = 1000000;
  for (std::size_t d = 0; d < draws; ++d) {
    TokenSeq x = x0;
    for (int step = 0; step < 2; ++step) {
      const auto& p = probs[sequence_index(x, 3)];
      TokenSeq y(2);
      for (std::size_t i = 0; i < 2; ++i)
        y[i] = static_cast<TokenId>(sample_categorical(std::span<const double>(p).subspan(i * 3, 3), r));
      x = y;
    }
    ++counts[sequence_index(x, 3)];
  }
  for (std::size_t s = 0; s < 9; ++s) {
    const double exact = exact_chain_prob<double>(m, x0, sequence_at(s, 3, 2), 2);
    const double se = std::sqrt(exact * (1 - exact) / draws);
    EXPECT_NEAR(counts[s] / draws, exact, 3 * se) << s;
  }
}

TEST(ExactChainProb, JensenBoundHolds) {
  const auto m = random_model<double>(tiny_config(ModelMode::Unconditional, 3, 2), 23, 3.0);
  const auto k = transition_matrix<double>(m);
  for (std::size_t a = 0; a < 9; ++a)
    for (std::size_t b = 0; b < 9; ++b) {
      double expected_nll = 0;
      for (std::size_t z = 0; z < 9; ++z) expected_nll += k[a * 9 + z] * -std::log(k[z * 9 + b]);
      const double p2 = exact_chain_prob<double>(m, sequence_at(a, 3, 2), sequence_at(b, 3, 2), 2);
      EXPECT_LE(-std::log(p2), expected_nll + 1e-9);
    }
}

TEST(ExactChainProb, RefusesLargeInstances) {
  const auto m = random_model<double>(tiny_config(), 24);
  const TokenSeq x(8, 0);
  EXPECT_THROW(exact_chain_prob<double>(m, x, x, 2), SizeError);
  EXPECT_THROW(exact_chain_prob<double>(m, x, x, 0), ArgumentError);
}

TEST(TrainedCopyModel, ChainsRecoverTargetsAndScoreThemLower) {
  const auto t = test_util::train_task_model(TaskKind::Copy, 500, 2, 14);
  SamplerConfig c;
  c.steps = 10;
  c.temperature = 0.3;
  c.seed = 5;
  std::size_t exact = 0, lower = 0;
  Rng r(6);
  for (std::size_t i = 0; i < t.held_out.size(); ++i) {
    const auto& p = t.held_out[i];
    const auto ctx = t.model.prepare(pad_to(p.source, 16));
    c.seed = 5 + i;
    exact += sample_chain<float>(t.model, c, nullptr, &ctx).states.back() == pad_to(p.target, 16);
    TokenSeq noise(16);
    for (auto& x : noise) x = static_cast<TokenId>(r.uniform_int(16));
    lower += model_score<float>(t.model, pad_to(p.target, 16), &ctx) <
             model_score<float>(t.model, noise, &ctx);
  }
  const double n = static_cast<double>(t.held_out.size());
  EXPECT_GE(exact / n, 0.95);
  EXPECT_GE(lower / n, 0.99);
}

TEST(TrainedCipherModel, AdjacentRepeatsDoNotGrow) {
  const auto t = test_util::train_task_model(TaskKind::ReverseCipher, 700, 4, 12);
  SamplerConfig c;
  c.steps = 10;
  c.temperature = 0.3;
  std::size_t fewer = 0, more = 0;
  std::vector<double> mean(c.steps + 1, 0.0);
  const std::size_t chains = 200;
  for (std::size_t i = 0; i < chains; ++i) {
    const auto& p = t.held_out[i % t.held_out.size()];
    const auto ctx = t.model.prepare(pad_to(p.source, 16));
    c.seed = 100 + i;
    const auto tr = sample_chain<float>(t.model, c, nullptr, &ctx);
    for (std::size_t s = 0; s < tr.states.size(); ++s) mean[s] += non_pad_repeats(tr.states[s]);
    const auto a = non_pad_repeats(tr.states.front()), b = non_pad_repeats(tr.states.back());
    fewer += b < a;
    more += b > a;
  }
  std::ostringstream report;
  for (double m : mean) report << m / chains << ' ';
  // One-sided sign test: P(at least `fewer` of fewer+more | p = 1/2).
  const std::size_t trials = fewer + more;
  ASSERT_GT(trials, 0u) << report.str();
  const double p = 1.0 - boost::math::cdf(boost::math::binomial(double(trials), 0.5), double(fewer) - 1);
  EXPECT_LT(p, 0.05) << "fewer " << fewer << " more " << more << " means " << report.str();
  EXPECT_LE(mean.back(), mean.front()) << report.str();
}
