#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "sundae/data.hpp"
#include "sundae/model.hpp"
#include "sundae/rng.hpp"
#include "sundae/training.hpp"

namespace sundae::test_util {

/// Small model for fast tests.
inline ModelConfig tiny_config(ModelMode mode = ModelMode::Unconditional, std::size_t v = 8,
                               std::size_t n = 8) {
  ModelConfig c;
  c.vocab_size = v;
  c.seq_len = n;
  c.layers = 2;
  c.d_model = 16;
  c.heads = 2;
  c.d_ff = 32;
  c.dropout = 0.0;
  c.mode = mode;
  c.source_len = n;
  c.d_lp = 16;
  c.lp_blocks = 2;
  return c;
}

/// Every parameter uniform in [-scale/2, scale/2], so zero-initialized
/// heads do not hide gradients or make outputs uniform.
template <class T>
void randomize(ParamSet<T>& ps, Rng& rng, double scale = 1.0) {
  for (const auto& e : ps)
    for (auto& x : e.tensor->values()) x = static_cast<T>(scale * (rng.uniform() - 0.5));
}

template <class T>
DenoiserModel<T> random_model(const ModelConfig& c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  auto m = DenoiserModel<T>::init(c, rng);
  randomize(m.params(), rng, scale);
  return m;
}

/// Fresh per-test scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sundae_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

struct TaskModel {
  SynthTask task;
  DenoiserModel<float> model;
  std::vector<SeqPair> train_pairs;
  std::vector<SeqPair> held_out;
};

/// Encoder-decoder model trained on a synthetic task, v = N = 16, s = 2.
inline TaskModel train_task_model(TaskKind kind, std::size_t steps, std::size_t min_len,
                                  std::size_t max_len, std::uint64_t seed = 3) {
  ModelConfig c;
  c.mode = ModelMode::EncoderDecoder;
  c.vocab_size = 16;
  c.seq_len = 16;
  c.source_len = 16;
  SynthTask task{kind, min_len, max_len, 14};
  auto pairs = synth_task_gen(1, 20000, task, 16, 16);
  TrainConfig tc;
  tc.total_steps = steps;
  tc.warmup_steps = steps / 10;
  tc.lr_peak = 1e-3;
  tc.lr_min = 1e-4;
  tc.seed = seed;
  Rng r(seed);
  TrainState<float> st(DenoiserModel<float>::init(c, r), tc);
  train(st, pair_batches(pairs, tc.batch_size, 16, 16));
  auto held = held_out_pairs(2, 200, task, 16, 16, pairs);
  return TaskModel{task, st.averaged_model(), std::move(pairs), std::move(held)};
}

}  // namespace sundae::test_util
