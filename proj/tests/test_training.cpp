#include <cmath>
#include <regex>
#include <sstream>

#include <gtest/gtest.h>

#include "common.hpp"
#include "sundae/corruption.hpp"
#include "sundae/training.hpp"

using namespace sundae;
using test_util::random_model;
using test_util::tiny_config;

namespace {

PairBatch fixed_batch(std::size_t v, std::size_t n, std::uint64_t seed, std::size_t bsz = 3) {
  Rng r(seed);
  std::vector<TokenSeq> xs;
  for (std::size_t b = 0; b < bsz; ++b) {
    const std::size_t len = 1 + r.uniform_int(n);
    std::vector<TokenId> content;
    for (std::size_t i = 0; i < len; ++i) content.push_back(static_cast<TokenId>(2 + r.uniform_int(v - 2)));
    xs.push_back(pad_to(content, n));
  }
  return unconditional_batch(std::move(xs));
}

// Mean cross entropy of per-sequence logits against targets, computed by hand.
double hand_ce(const std::vector<Tensor<double>>& logits, const std::vector<TokenSeq>& targets) {
  double total = 0;
  std::size_t rows = 0;
  for (std::size_t b = 0; b < targets.size(); ++b)
    for (std::size_t i = 0; i < targets[b].size(); ++i) {
      const auto row = logits[b].row(i);
      double mx = -1e300;
      for (double z : row) mx = std::max(mx, z);
      double se = 0;
      for (double z : row) se += std::exp(z - mx);
      total += -(row[static_cast<std::size_t>(targets[b][i])] - mx - std::log(se));
      ++rows;
    }
  return total / static_cast<double>(rows);
}

TrainConfig small_train(std::size_t steps) {
  TrainConfig c;
  c.total_steps = steps;
  c.warmup_steps = std::min<std::size_t>(steps, 5);
  c.batch_size = 4;
  c.lr_peak = 1e-3;
  c.lr_min = 1e-4;
  c.snapshot_interval = 2;
  c.average_window = 3;
  c.seed = 11;
  return c;
}

}  // namespace

TEST(LrSchedule, WarmupPeakAndEnd) {
  TrainConfig c;
  c.total_steps = 1000;
  c.warmup_steps = 100;
  EXPECT_DOUBLE_EQ(lr_schedule(0, c), 1e-7);
  EXPECT_DOUBLE_EQ(lr_schedule(100, c), 1e-4);
  EXPECT_NEAR(lr_schedule(1000, c), 1e-5, 1e-18);
  EXPECT_NEAR(lr_schedule(550, c), 0.5 * (1e-4 + 1e-5), 1e-15);
  EXPECT_NEAR(lr_schedule(50, c), 1e-7 + 0.5 * (1e-4 - 1e-7), 1e-18);
  EXPECT_THROW(lr_schedule(1001, c), ArgumentError);
}

TEST(LrSchedule, MonotoneDecayAfterWarmup) {
  TrainConfig c;
  double prev = lr_schedule(c.warmup_steps, c);
  for (std::size_t s = c.warmup_steps + 1; s <= c.total_steps; ++s) {
    const double lr = lr_schedule(s, c);
    ASSERT_LE(lr, prev);
    ASSERT_GE(lr, c.lr_min - 1e-18);
    prev = lr;
  }
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.unroll_terms = 0;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = {};
  c.warmup_steps = c.total_steps + 1;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = {};
  c.label_smoothing = 1.0;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = {};
  c.lr_peak = -1;
  EXPECT_THROW(c.validate(), ArgumentError);
}

TEST(UnrolledLoss, UniformModelGivesLogV) {
  Rng init(1);
  const auto model = DenoiserModel<double>::init(tiny_config(ModelMode::Unconditional, 4, 6), init);
  const auto batch = fixed_batch(4, 6, 2);
  for (std::size_t s : {1u, 2u, 3u}) {
    Graph<double> g(false);
    Rng r(3);
    const auto res = loss_unrolled(g, model, batch, s, r, false, 0.0);
    ASSERT_EQ(res.terms.size(), s);
    for (double t : res.terms) EXPECT_NEAR(t, std::log(4.0), 1e-12);
    EXPECT_NEAR((*res.loss)[0], std::log(4.0), 1e-12);
  }
}

TEST(UnrolledLoss, RejectsZeroTerms) {
  const auto model = random_model<double>(tiny_config(), 1);
  Graph<double> g(false);
  Rng r(1);
  EXPECT_THROW(loss_unrolled(g, model, fixed_batch(8, 8, 1), 0, r, false), ArgumentError);
}

TEST(UnrolledLoss, SingleTermIsPlainReconstruction) {
  const auto cfg = tiny_config(ModelMode::Unconditional, 6, 5);
  const auto model = random_model<double>(cfg, 4);
  const auto batch = fixed_batch(6, 5, 5, 4);
  Graph<double> g(false);
  Rng r(6);
  const auto res = loss_unrolled(g, model, batch, 1, r, false, 0.0);

  Rng ref(6);
  std::vector<Tensor<double>> logits;
  for (const auto& t : batch.targets)
    logits.push_back(denoise_logits<double>(model, corrupt(t, 6, ref).corrupted));
  EXPECT_NEAR((*res.loss)[0], hand_ce(logits, batch.targets), 1e-12);
}

TEST(UnrolledLoss, TwoStepHandOracle) {
  // v = 3, N = 2: every quantity is small enough to recompute directly.
  const auto cfg = tiny_config(ModelMode::Unconditional, 3, 2);
  const auto model = random_model<double>(cfg, 8);
  const auto batch = unconditional_batch({{2, 2}, {2, 0}, {0, 0}});
  Graph<double> g(false);
  Rng r(9);
  const auto res = loss_unrolled(g, model, batch, 2, r, false, 0.0);

  Rng ref(9);
  std::vector<TokenSeq> x0;
  for (const auto& t : batch.targets) x0.push_back(corrupt(t, 3, ref).corrupted);
  std::vector<Tensor<double>> l1;
  for (const auto& x : x0) l1.push_back(denoise_logits<double>(model, x));
  std::vector<TokenSeq> x1(3, TokenSeq(2));
  std::vector<double> probs(3);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t i = 0; i < 2; ++i) {
      softmax_row<double>(l1[b].row(i), 1.0, probs);
      x1[b][i] = static_cast<TokenId>(sample_categorical(probs, ref));
    }
  std::vector<Tensor<double>> l2;
  for (const auto& x : x1) l2.push_back(denoise_logits<double>(model, x));
  const double t1 = hand_ce(l1, batch.targets), t2 = hand_ce(l2, batch.targets);

  ASSERT_EQ(res.intermediates.size(), 1u);
  EXPECT_EQ(res.intermediates[0], x1);
  EXPECT_NEAR(res.terms[0], t1, 1e-6);
  EXPECT_NEAR(res.terms[1], t2, 1e-6);
  EXPECT_NEAR((*res.loss)[0], 0.5 * (t1 + t2), 1e-6);
}

TEST(UnrolledLoss, LossIsMeanOfTerms) {
  const auto model = random_model<double>(tiny_config(), 3);
  const auto batch = fixed_batch(8, 8, 4);
  for (std::size_t s : {2u, 3u, 4u}) {
    Graph<double> g(false);
    Rng r(5);
    const auto res = loss_unrolled(g, model, batch, s, r, false, 0.1);
    double mean = 0;
    for (double t : res.terms) mean += t / static_cast<double>(s);
    EXPECT_NEAR((*res.loss)[0], mean, 1e-12);
  }
}

TEST(UnrolledLoss, IntermediatesCarryNoGradient) {
  // Replacing sampled tokens by constants with the same values changes nothing.
  auto model = random_model<double>(tiny_config(), 12);
  const auto batch = fixed_batch(8, 8, 13);
  auto grads = [&](const std::vector<std::vector<TokenSeq>>* replay,
                   std::vector<std::vector<TokenSeq>>* record) {
    model.params().zero_grad();
    Graph<double> g(true);
    Rng r(14);
    auto res = loss_unrolled(g, model, batch, 3, r, false, 0.1, replay);
    g.backward(res.loss);
    if (record) *record = res.intermediates;
    std::vector<double> out;
    for (const auto& e : model.params())
      out.insert(out.end(), e.tensor->grad().begin(), e.tensor->grad().end());
    return out;
  };
  std::vector<std::vector<TokenSeq>> drawn;
  const auto a = grads(nullptr, &drawn);
  const auto b = grads(&drawn, nullptr);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], b[i]) << i;
}

TEST(UnrolledLoss, ReplayShapeIsChecked) {
  const auto model = random_model<double>(tiny_config(), 1);
  Graph<double> g(false);
  Rng r(1);
  std::vector<std::vector<TokenSeq>> wrong(2);
  const auto batch = fixed_batch(8, 8, 1);
  EXPECT_THROW(loss_unrolled(g, model, batch, 2, r, false, 0.0, &wrong), ArgumentError);
}

TEST(TrainStep, ZeroLearningRateLeavesParameters) {
  auto cfg = small_train(3);
  cfg.lr_start = cfg.lr_peak = cfg.lr_min = 0.0;
  TrainState<float> st(random_model<float>(tiny_config(), 2), cfg);
  const auto before = st.model.params().clone();
  train_step(st, fixed_batch(8, 8, 3));
  for (std::size_t p = 0; p < before.size(); ++p)
    for (std::size_t i = 0; i < before[p].tensor->size(); ++i)
      ASSERT_EQ((*before[p].tensor)[i], (*st.model.params()[p].tensor)[i]);
  EXPECT_EQ(st.step, 1u);
}

TEST(TrainStep, MomentsMatchParameterShapes) {
  TrainState<float> st(random_model<float>(tiny_config(), 2), small_train(3));
  ASSERT_EQ(st.m.size(), st.model.params().size());
  for (std::size_t p = 0; p < st.m.size(); ++p) {
    EXPECT_EQ(st.m[p].size(), st.model.params()[p].tensor->size());
    EXPECT_EQ(st.v[p].size(), st.model.params()[p].tensor->size());
  }
}

TEST(TrainStep, NonFiniteLossNamesTheBatch) {
  auto model = random_model<float>(tiny_config(), 2);
  (*model.params()[0].tensor)[0] = NAN;
  TrainState<float> st(model, small_train(3));
  try {
    train_step(st, fixed_batch(8, 8, 3));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("batch id 0"), std::string::npos) << e.what();
  }
}

TEST(Train, SameSeedIsBitIdentical) {
  const auto corpus = std::vector<std::vector<TokenId>>{{2, 3, 4, 5, 6, 7, 2, 3, 4}, {5, 5, 6}};
  auto run = [&](std::string& log) {
    TrainState<float> st(random_model<float>(tiny_config(), 5), small_train(10));
    std::ostringstream os;
    train(st, corpus_batches(corpus, 4, 8), &os);
    log = os.str();
    return st;
  };
  std::string la, lb;
  const auto a = run(la), b = run(lb);
  EXPECT_EQ(la, lb);
  for (std::size_t p = 0; p < a.model.params().size(); ++p) {
    const auto va = a.model.params()[p].tensor->values(), vb = b.model.params()[p].tensor->values();
    ASSERT_TRUE(std::equal(va.begin(), va.end(), vb.begin())) << a.model.params()[p].name;
    ASSERT_EQ(a.m[p], b.m[p]);
    ASSERT_EQ(a.v[p], b.v[p]);
  }
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const auto corpus = std::vector<std::vector<TokenId>>{{2, 3, 4, 5, 6, 7, 2, 3, 4}};
  const auto batches = corpus_batches(corpus, 4, 8);
  TrainState<float> full(random_model<float>(tiny_config(), 5), small_train(8));
  train(full, batches);
  // Interrupt after four steps by failing the fifth batch draw.
  TrainState<float> part(random_model<float>(tiny_config(), 5), small_train(8));
  std::size_t draws = 0;
  const BatchFn failing = [&](Rng& r) {
    if (++draws == 5) throw std::runtime_error("interrupted");
    return batches(r);
  };
  EXPECT_THROW(train(part, failing), std::runtime_error);
  ASSERT_EQ(part.step, 4u);
  train(part, batches);
  for (std::size_t p = 0; p < full.model.params().size(); ++p) {
    const auto a = full.model.params()[p].tensor->values(), b = part.model.params()[p].tensor->values();
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << full.model.params()[p].name;
  }
}

TEST(Train, RingBufferHoldsAtMostK) {
  TrainState<float> st(random_model<float>(tiny_config(), 5), small_train(12));
  std::size_t calls = 0;
  train(st, corpus_batches({{2, 3, 4}}, 2, 8), nullptr, [&](const StepResult& r) {
    ++calls;
    EXPECT_LE(st.snapshots.size(), st.cfg.average_window);
    EXPECT_EQ(r.step, calls);
  });
  EXPECT_EQ(calls, 12u);
  EXPECT_EQ(st.snapshots.size(), 3u);
  // The last snapshot is the final parameters.
  const auto a = st.snapshots.back()[0].tensor->values(), b = st.model.params()[0].tensor->values();
  EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
}

TEST(Train, MetricsLineFormat) {
  TrainState<float> st(random_model<float>(tiny_config(), 5), small_train(2));
  std::ostringstream os;
  train(st, corpus_batches({{2, 3, 4}}, 2, 8), &os);
  const std::regex line(R"(step=\d+ loss=\S+ lr=\S+ term1=\S+ term2=\S+)");
  std::istringstream in(os.str());
  std::string l;
  std::size_t n = 0;
  while (std::getline(in, l)) {
    EXPECT_TRUE(std::regex_match(l, line)) << l;
    ++n;
  }
  EXPECT_EQ(n, 2u);
}

TEST(Train, CopyTaskLossHalvesWithin500Steps) {
  ModelConfig mc;  // desk-scale defaults
  mc.mode = ModelMode::EncoderDecoder;
  mc.vocab_size = 16;
  mc.seq_len = 16;
  mc.source_len = 16;
  SynthTask task;
  task.kind = TaskKind::Copy;
  task.min_len = 2;
  task.max_len = 14;
  task.v_task = 14;
  const auto pairs = synth_task_gen(1, 2000, task, 16, 16);
  TrainConfig tc;
  tc.total_steps = 500;
  tc.warmup_steps = 50;
  tc.lr_peak = 1e-3;
  tc.lr_min = 1e-4;
  tc.seed = 3;
  Rng init(3);
  TrainState<float> st(DenoiserModel<float>::init(mc, init), tc);
  std::vector<double> losses;
  train(st, pair_batches(pairs, tc.batch_size, 16, 16), nullptr,
        [&](const StepResult& r) { losses.push_back(r.loss); });
  auto mean = [&](std::size_t from, std::size_t to) {
    double s = 0;
    for (std::size_t i = from; i < to; ++i) s += losses[i];
    return s / static_cast<double>(to - from);
  };
  const double first = mean(0, 10), last = mean(490, 500);
  EXPECT_LE(last, 0.5 * first) << "first " << first << " last " << last;
}

TEST(AverageCheckpoints, IdenticalSnapshotsAreIdentity) {
  const auto m = random_model<float>(tiny_config(), 21);
  std::vector<ParamSet<float>> snaps{m.params().clone(), m.params().clone(), m.params().clone()};
  const auto avg = average_checkpoints<float>(snaps);
  for (std::size_t p = 0; p < avg.size(); ++p) {
    EXPECT_EQ(avg[p].tensor->shape(), m.params()[p].tensor->shape());
    const auto a = avg[p].tensor->values(), b = m.params()[p].tensor->values();
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST(AverageCheckpoints, MidpointAndMismatch) {
  ParamSet<double> a, b, c;
  a.add("w", Tensor<double>({1}, {0.0}));
  b.add("w", Tensor<double>({1}, {2.0}));
  c.add("w", Tensor<double>({2}, {0.0, 0.0}));
  std::vector<ParamSet<double>> ab{a.clone(), b.clone()};
  EXPECT_DOUBLE_EQ((*average_checkpoints<double>(ab)[0].tensor)[0], 1.0);
  std::vector<ParamSet<double>> ac{a.clone(), c.clone()};
  EXPECT_THROW(average_checkpoints<double>(ac), ArgumentError);
  EXPECT_THROW(average_checkpoints<double>(std::span<const ParamSet<double>>{}), ArgumentError);
}
