#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "sundae/autodiff.hpp"
#include "sundae/corruption.hpp"
#include "sundae/data.hpp"
#include "sundae/errors.hpp"
#include "sundae/model.hpp"
#include "sundae/numerics.hpp"
#include "sundae/rng.hpp"
#include "sundae/tensor.hpp"

namespace sundae {

struct TrainConfig {
  std::size_t unroll_terms = 2;  // s
  std::size_t batch_size = 32;
  std::size_t total_steps = 1000;
  std::size_t warmup_steps = 100;
  double lr_start = 1e-7;
  double lr_peak = 1e-4;
  double lr_min = 1e-5;
  double label_smoothing = 0.1;
  double weight_decay = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-6;
  std::size_t average_window = 10;  // k
  /// Steps between ring-buffer snapshots; 0 means total_steps / 20.
  std::size_t snapshot_interval = 0;
  std::uint64_t seed = 0;

  std::size_t effective_snapshot_interval() const {
    if (snapshot_interval > 0) return snapshot_interval;
    return std::max<std::size_t>(1, total_steps / 20);
  }

  void validate() const {
    if (unroll_terms < 1) throw ArgumentError("train config: unroll_terms must be >= 1");
    if (batch_size < 1) throw ArgumentError("train config: batch_size must be >= 1");
    if (warmup_steps > total_steps)
      throw ArgumentError("train config: warmup_steps exceeds total_steps");
    if (!(lr_start >= 0 && lr_peak >= 0 && lr_min >= 0))
      throw ArgumentError("train config: learning rates must be non-negative");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
      throw ArgumentError("train config: label_smoothing must be in [0,1)");
    if (weight_decay < 0.0) throw ArgumentError("train config: weight_decay must be >= 0");
    if (average_window < 1) throw ArgumentError("train config: average_window must be >= 1");
  }

  bool operator==(const TrainConfig&) const = default;
};

/// Linear warmup lr_start -> lr_peak, then cosine decay to lr_min.
inline double lr_schedule(std::size_t step, const TrainConfig& cfg) {
  if (step > cfg.total_steps) throw ArgumentError("lr_schedule: step beyond total_steps");
  if (step <= cfg.warmup_steps) {
    if (cfg.warmup_steps == 0) return cfg.lr_peak;
    const double f = static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    return cfg.lr_start + f * (cfg.lr_peak - cfg.lr_start);
  }
  const double progress = static_cast<double>(step - cfg.warmup_steps) /
                          static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.lr_min +
         0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <class T>
struct UnrolledLoss {
  Var<T> loss;                     // scalar: mean of terms (+ length loss)
  std::vector<double> terms;       // L^(1) .. L^(s)
  std::optional<double> length_loss;
  /// Sampled chain inputs x_1 .. x_{s-1}, one batch per unrolled term.
  std::vector<std::vector<TokenSeq>> intermediates;
};

/// Draws one token per row of `logits` [rows, v] at temperature 1.
template <class T>
std::vector<TokenId> sample_rows(const Tensor<T>& logits, Rng& rng, double temperature = 1.0) {
  std::vector<TokenId> out(logits.rows());
  std::vector<double> probs(logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    softmax_row<T>(logits.row(r), temperature, probs);
    out[r] = static_cast<TokenId>(sample_categorical(probs, rng));
  }
  return out;
}

/// Unrolled denoising loss L^(1:s).
///
/// Term 1 reconstructs the targets from corrupt(x). Term t >= 2 feeds tokens
/// sampled from the previous term's logits back into the model. Tokens are
/// integers, so no gradient reaches the sampling. `replay`, when given,
/// supplies those intermediate tokens instead of drawing them.
template <class T>
UnrolledLoss<T> loss_unrolled(Graph<T>& g, const DenoiserModel<T>& model, const PairBatch& batch,
                              std::size_t s, Rng& rng, bool train_mode,
                              double label_smoothing = 0.0,
                              const std::vector<std::vector<TokenSeq>>* replay = nullptr) {
  if (s < 1) throw ArgumentError("loss_unrolled: unroll terms must be >= 1");
  const auto& cfg = model.config();
  const std::size_t bsz = batch.targets.size();
  if (bsz == 0) throw ArgumentError("loss_unrolled: empty batch");
  if (replay && replay->size() != s - 1)
    throw ArgumentError("loss_unrolled: replay must hold s-1 intermediate batches");

  UnrolledLoss<T> out;
  std::vector<std::int32_t> flat_targets;
  flat_targets.reserve(bsz * cfg.seq_len);
  for (const auto& t : batch.targets) {
    if (t.size() != cfg.seq_len) throw ArgumentError("loss_unrolled: target length mismatch");
    flat_targets.insert(flat_targets.end(), t.begin(), t.end());
  }

  std::optional<Memory<T>> mem;
  Var<T> length_term;
  if (cfg.conditional()) {
    if (batch.sources.size() != bsz)
      throw ArgumentError("loss_unrolled: encoder-decoder batch needs sources");
    auto enc = model.encode(g, batch.sources, train_mode, &rng);
    Var<T> len_emb;
    if (cfg.length_prediction) {
      std::vector<std::size_t> classes;
      std::vector<std::int32_t> labels;
      for (auto l : batch.target_lengths) {
        const auto c = length_label(l, cfg.length_downsample);
        classes.push_back(c);
        labels.push_back(static_cast<std::int32_t>(c));
      }
      auto len_logits = model.length_logits(g, enc, batch.sources);
      length_term = ops::cross_entropy(g, len_logits, std::move(labels), label_smoothing);
      out.length_loss = static_cast<double>((*length_term)[0]);
      // Teacher forcing: the decoder sees the ground-truth length class.
      len_emb = model.length_embeddings(g, classes);
    }
    mem = model.memory(g, enc, len_emb, batch.sources);
  }

  std::vector<TokenSeq> inputs;
  inputs.reserve(bsz);
  for (const auto& t : batch.targets) inputs.push_back(corrupt(t, cfg.vocab_size, rng).corrupted);

  std::vector<Var<T>> terms;
  for (std::size_t t = 0; t < s; ++t) {
    auto logits = model.decode(g, inputs, mem ? &*mem : nullptr, train_mode, &rng);
    auto term = ops::cross_entropy(g, logits, flat_targets, label_smoothing);
    out.terms.push_back(static_cast<double>((*term)[0]));
    terms.push_back(term);
    if (t + 1 == s) break;
    std::vector<TokenSeq> next;
    if (replay) {
      next = (*replay)[t];
      for (const auto& x : next)
        if (x.size() != cfg.seq_len) throw ArgumentError("loss_unrolled: replay length mismatch");
      if (next.size() != bsz) throw ArgumentError("loss_unrolled: replay batch mismatch");
    } else {
      const auto drawn = sample_rows(*logits, rng);
      next.assign(bsz, TokenSeq(cfg.seq_len));
      for (std::size_t b = 0; b < bsz; ++b)
        std::copy_n(drawn.begin() + static_cast<std::ptrdiff_t>(b * cfg.seq_len), cfg.seq_len,
                    next[b].begin());
    }
    out.intermediates.push_back(next);
    inputs = std::move(next);
  }

  std::vector<T> weights(terms.size(), static_cast<T>(1.0 / static_cast<double>(s)));
  if (length_term) {
    terms.push_back(length_term);
    weights.push_back(T(1));
  }
  out.loss = ops::weighted_sum(g, terms, weights);
  return out;
}

/// Model, AdamW moments, step counter and the averaging ring buffer.
template <class T>
struct TrainState {
  DenoiserModel<T> model;
  TrainConfig cfg;
  std::vector<std::vector<T>> m, v;
  std::size_t step = 0;
  std::deque<ParamSet<T>> snapshots;

  TrainState(DenoiserModel<T> mdl, TrainConfig c) : model(std::move(mdl)), cfg(std::move(c)) {
    cfg.validate();
    for (const auto& e : model.params()) {
      m.emplace_back(e.tensor->size(), T(0));
      v.emplace_back(e.tensor->size(), T(0));
    }
  }

  /// Mean of the ring buffer, or the live parameters when it is empty.
  DenoiserModel<T> averaged_model() const;
};

template <class T>
ParamSet<T> average_checkpoints(std::span<const ParamSet<T>> snapshots) {
  if (snapshots.empty()) throw ArgumentError("average_checkpoints: no snapshots");
  for (const auto& s : snapshots)
    if (!s.same_layout(snapshots[0]))
      throw ArgumentError("average_checkpoints: snapshot layouts differ");
  ParamSet<T> out = snapshots[0].clone();
  const double inv = 1.0 / static_cast<double>(snapshots.size());
  for (std::size_t p = 0; p < out.size(); ++p) {
    auto& dst = *out[p].tensor;
    for (std::size_t i = 0; i < dst.size(); ++i) {
      double acc = 0.0;
      for (const auto& s : snapshots) acc += static_cast<double>((*s[p].tensor)[i]);
      dst[i] = static_cast<T>(acc * inv);
    }
  }
  return out;
}

template <class T>
DenoiserModel<T> TrainState<T>::averaged_model() const {
  if (snapshots.empty()) return model;
  std::vector<ParamSet<T>> list(snapshots.begin(), snapshots.end());
  return DenoiserModel<T>(model.config(), average_checkpoints<T>(list));
}

struct StepResult {
  std::size_t step = 0;  // counter after the update
  double loss = 0.0;
  double lr = 0.0;
  std::vector<double> terms;
  std::optional<double> length_loss;
};

/// One AdamW update on loss_unrolled. Rank-1 tensors (biases, norm gains) are
/// not decayed.
template <class T>
StepResult train_step(TrainState<T>& state, const PairBatch& batch) {
  const auto& cfg = state.cfg;
  const double lr = lr_schedule(std::min(state.step, cfg.total_steps), cfg);
  Rng rng = Rng(cfg.seed).fork(0x7472000000000000ULL + state.step);
  auto& params = state.model.params();
  params.zero_grad();
  Graph<T> g(true);
  std::optional<UnrolledLoss<T>> maybe;
  try {
    maybe = loss_unrolled(g, state.model, batch, cfg.unroll_terms, rng, true,
                          cfg.label_smoothing);
  } catch (const NumericError& e) {
    throw NumericError("train_step: batch id " + std::to_string(state.step) + ": " + e.what());
  }
  auto& res = *maybe;
  const double loss = static_cast<double>((*res.loss)[0]);
  if (!std::isfinite(loss))
    throw NumericError("train_step: non-finite loss at batch id " + std::to_string(state.step));
  g.backward(res.loss);

  const std::size_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
  const T b1 = static_cast<T>(cfg.adam_beta1), b2 = static_cast<T>(cfg.adam_beta2);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& tensor = *params[p].tensor;
    auto grad = tensor.grad();
    auto& m = state.m[p];
    auto& v = state.v[p];
    const bool decay = tensor.rank() > 1;
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
      v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
      const double mhat = static_cast<double>(m[i]) / bc1;
      const double vhat = static_cast<double>(v[i]) / bc2;
      double upd = mhat / (std::sqrt(vhat) + cfg.adam_eps);
      if (decay) upd += cfg.weight_decay * static_cast<double>(tensor[i]);
      tensor[i] = static_cast<T>(static_cast<double>(tensor[i]) - lr * upd);
    }
  }
  params.zero_grad();

  state.step = t;
  if (t % cfg.effective_snapshot_interval() == 0) {
    state.snapshots.push_back(params.clone());
    while (state.snapshots.size() > cfg.average_window) state.snapshots.pop_front();
  }
  StepResult out;
  out.step = t;
  out.loss = loss;
  out.lr = lr;
  out.terms = std::move(res.terms);
  out.length_loss = res.length_loss;
  return out;
}

/// Shortest round-trip decimal form.
inline std::string format_double(double x) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

/// `step=<int> loss=<float> lr=<float> term1=<float> ...`
inline std::string format_metrics(const StepResult& r) {
  std::string line = "step=" + std::to_string(r.step) + " loss=" + format_double(r.loss) +
                     " lr=" + format_double(r.lr);
  for (std::size_t i = 0; i < r.terms.size(); ++i)
    line += " term" + std::to_string(i + 1) + "=" + format_double(r.terms[i]);
  if (r.length_loss) line += " length=" + format_double(*r.length_loss);
  return line;
}

using BatchFn = std::function<PairBatch(Rng&)>;

/// Batch sampler over a conditional pair set or an unconditional corpus.
inline BatchFn pair_batches(std::vector<SeqPair> pairs, std::size_t batch_size,
                            std::size_t n_source, std::size_t n) {
  return [pairs = std::move(pairs), batch_size, n_source, n](Rng& rng) {
    return make_pair_batch(pairs, static_cast<int>(batch_size), n_source, n, rng);
  };
}

inline BatchFn corpus_batches(std::vector<std::vector<TokenId>> corpus, std::size_t batch_size,
                              std::size_t n) {
  return [corpus = std::move(corpus), batch_size, n](Rng& rng) {
    return unconditional_batch(make_batch(corpus, static_cast<int>(batch_size), n, rng));
  };
}

/// Runs train_step until `state.step` reaches total_steps. Batches come from
/// a dedicated data stream so that a fixed seed gives a fixed batch sequence.
template <class T>
void train(TrainState<T>& state, const BatchFn& batches, std::ostream* log = nullptr,
           const std::function<void(const StepResult&)>& on_step = {}) {
  Rng data = Rng(state.cfg.seed).fork(0x64617461ULL);
  // Skip the draws already consumed when resuming.
  for (std::size_t i = 0; i < state.step; ++i) (void)batches(data);
  while (state.step < state.cfg.total_steps) {
    const auto batch = batches(data);
    const auto r = train_step(state, batch);
    if (log) *log << format_metrics(r) << '\n';
    if (on_step) on_step(r);
  }
}

}  // namespace sundae
