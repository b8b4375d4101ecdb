#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sundae/autodiff.hpp"
#include "sundae/data.hpp"
#include "sundae/errors.hpp"
#include "sundae/model.hpp"
#include "sundae/numerics.hpp"
#include "sundae/rng.hpp"
#include "sundae/tensor.hpp"

namespace sundae {

enum class Strategy { LowTemp, ArgmaxUnrolled };
enum class Schedule { Constant, Triangular };

inline std::string to_string(Strategy s) {
  return s == Strategy::LowTemp ? "low_temp" : "argmax_unrolled";
}
inline Strategy parse_strategy(std::string_view s) {
  if (s == "low_temp") return Strategy::LowTemp;
  if (s == "argmax_unrolled") return Strategy::ArgmaxUnrolled;
  throw ArgumentError("unknown strategy: " + std::string(s));
}
inline std::string to_string(Schedule s) {
  return s == Schedule::Constant ? "constant" : "triangular";
}
inline Schedule parse_schedule(std::string_view s) {
  if (s == "constant") return Schedule::Constant;
  if (s == "triangular") return Schedule::Triangular;
  throw ArgumentError("unknown schedule: " + std::string(s));
}

struct SamplerConfig {
  std::size_t steps = 10;  // T
  double temperature = 0.8;
  Strategy strategy = Strategy::LowTemp;
  /// Constant uses update_fraction; triangular uses triangular_count.
  Schedule schedule = Schedule::Constant;
  double update_fraction = 1.0;
  std::size_t rerank = 1;        // n
  double uncertain_share = 0.0;  // rho
  bool early_stop = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(temperature > 0.0)) throw ArgumentError("sampler: temperature must be positive");
    if (!(update_fraction > 0.0 && update_fraction <= 1.0))
      throw ArgumentError("sampler: update_fraction must be in (0,1]");
    if (rerank < 1) throw ArgumentError("sampler: rerank must be >= 1");
    if (!(uncertain_share >= 0.0 && uncertain_share <= 1.0))
      throw ArgumentError("sampler: uncertain_share must be in [0,1]");
  }

  bool operator==(const SamplerConfig&) const = default;
};

struct Template {
  TokenSeq tokens;
  std::vector<std::uint8_t> clamp;  // 1 = fixed context token
};

struct ChainTrace {
  std::vector<TokenSeq> states;      // x_0 .. x_t
  std::vector<std::size_t> changed;  // per step
  double score = 0.0;                // model score of the final state
  std::size_t forward_passes = 0;    // denoiser calls made by the chain
};

/// floor(2N min(t/T, 1 - t/T)).
inline std::size_t triangular_count(std::size_t t, std::size_t T, std::size_t n) {
  if (T < 1 || t > T) throw ArgumentError("triangular_count: need 0 <= t <= T, T >= 1");
  // Integer form of the same expression avoids rounding at the peak.
  const std::size_t m = std::min(t, T - t);
  return (2 * n * m) / T;
}

/// Logits [xs.size() * N, v] for a batch; `ctxs` holds one context per row
/// in encoder-decoder mode and is ignored otherwise.
template <class T>
Tensor<T> batch_logits(const DenoiserModel<T>& model, std::span<const TokenSeq> xs,
                       std::span<const SourceContext<T>* const> ctxs = {}) {
  const auto& cfg = model.config();
  if (cfg.conditional() && ctxs.size() != xs.size())
    throw ArgumentError("sampling: encoder-decoder model needs a context per chain");
  constexpr std::size_t kChunk = 256;
  Tensor<T> out({xs.size() * cfg.seq_len, cfg.vocab_size});
  for (std::size_t lo = 0; lo < xs.size(); lo += kChunk) {
    const std::size_t hi = std::min(xs.size(), lo + kChunk);
    Graph<T> g(false);
    std::optional<Memory<T>> mem;
    if (cfg.conditional()) {
      for (std::size_t i = lo; i < hi; ++i)
        if (!ctxs[i]) throw ArgumentError("sampling: missing conditioning");
      mem = DenoiserModel<T>::stack(ctxs.subspan(lo, hi - lo));
    }
    auto l = model.decode(g, xs.subspan(lo, hi - lo), mem ? &*mem : nullptr, false, nullptr);
    std::copy(l->values().begin(), l->values().end(),
              out.data() + lo * cfg.seq_len * cfg.vocab_size);
  }
  return out;
}

namespace detail {

inline std::vector<std::size_t> free_positions(std::span<const std::uint8_t> clamp,
                                               std::size_t n) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; ++i)
    if (clamp.empty() || !clamp[i]) out.push_back(i);
  return out;
}

/// Low-temperature update of one sequence given its logits rows.
template <class T>
TokenSeq low_temp_update(const TokenSeq& y_prev, const Tensor<T>& logits, std::size_t row0,
                         double tau, std::size_t update_count,
                         std::span<const std::uint8_t> clamp, Rng& rng) {
  const std::size_t n = y_prev.size(), v = logits.cols();
  auto free = free_positions(clamp, n);
  const std::size_t k = std::min(update_count, free.size());
  // Partial Fisher-Yates picks k free positions uniformly.
  for (std::size_t i = 0; i < k; ++i) std::swap(free[i], free[i + rng.uniform_int(free.size() - i)]);
  std::vector<std::size_t> chosen(free.begin(), free.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(chosen.begin(), chosen.end());
  TokenSeq y = y_prev;
  std::vector<double> probs(v);
  for (auto pos : chosen) {
    softmax_row<T>(logits.row(row0 + pos), tau, probs);
    y[pos] = static_cast<TokenId>(sample_categorical(probs, rng));
  }
  return y;
}

template <class T>
double row_certainty(std::span<const T> row) {
  std::vector<double> ls(row.size());
  log_softmax_row<T>(row, ls);
  return *std::max_element(ls.begin(), ls.end());
}

/// ceil(rho * N) least-certain free positions under `lambda_prev`, lowest
/// index first among equal scores.
template <class T>
std::vector<std::size_t> uncertain_positions(const Tensor<T>& lambda_prev, std::size_t row0,
                                             std::size_t n, double rho,
                                             std::span<const std::uint8_t> clamp) {
  auto free = free_positions(clamp, n);
  const auto want = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(n) - 1e-12));
  const std::size_t k = std::min(want, free.size());
  std::vector<std::pair<double, std::size_t>> scored;
  for (auto pos : free) scored.emplace_back(row_certainty<T>(lambda_prev.row(row0 + pos)), pos);
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(scored[i].second);
  std::sort(out.begin(), out.end());
  return out;
}

template <class T>
TokenSeq argmax_tokens(const TokenSeq& y_prev, const Tensor<T>& logits, std::size_t row0,
                       std::span<const std::uint8_t> clamp) {
  TokenSeq y = y_prev;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (clamp.empty() || !clamp[i])
      y[i] = static_cast<TokenId>(argmax<T>(logits.row(row0 + i)));
  return y;
}

inline std::size_t count_changes(const TokenSeq& a, const TokenSeq& b) {
  std::size_t c = 0;
  for (std::size_t i = 0; i < a.size(); ++i) c += a[i] != b[i];
  return c;
}

template <class T>
std::span<const SourceContext<T>* const> one_ctx(const SourceContext<T>* const& cond) {
  return cond ? std::span<const SourceContext<T>* const>(&cond, 1)
              : std::span<const SourceContext<T>* const>();
}

}  // namespace detail

/// One low-temperature step: resample `update_count` random free positions
/// from softmax(logits / tau); the rest are copied.
template <class T>
TokenSeq sample_step_low_temp(const DenoiserModel<T>& model, const TokenSeq& y_prev, double tau,
                              std::size_t update_count, std::span<const std::uint8_t> clamp,
                              const SourceContext<T>* cond, Rng& rng) {
  if (!(tau > 0.0)) throw ArgumentError("sample_step_low_temp: temperature must be positive");
  if (update_count > y_prev.size())
    throw ArgumentError("sample_step_low_temp: update_count exceeds N");
  std::vector<TokenSeq> xs{y_prev};
  auto logits = batch_logits<T>(model, xs, detail::one_ctx(cond));
  return detail::low_temp_update(y_prev, logits, 0, tau, update_count, clamp, rng);
}

template <class T>
struct ArgmaxStep {
  TokenSeq y;
  Tensor<T> lambda;  // logits of y_prev, carried to the next step
  std::size_t forward_passes = 0;
};

/// One argmax-unrolled step. At step 1 (`lambda_prev` null) the result is the
/// plain argmax. Later steps rank free positions by max log-probability under
/// `lambda_prev`; the ceil(rho N) least certain take the argmax of the logits
/// of a second pass whose input is y_prev with those positions replaced by
/// their predicted tokens.
template <class T>
ArgmaxStep<T> argmax_unrolled_step(const DenoiserModel<T>& model, const TokenSeq& y_prev,
                                   const Tensor<T>* lambda_prev, double rho,
                                   std::span<const std::uint8_t> clamp,
                                   const SourceContext<T>* cond, std::size_t step = 2) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ArgumentError("argmax_unrolled_step: rho outside [0,1]");
  if (!lambda_prev && step >= 2)
    throw ArgumentError("argmax_unrolled_step: missing previous logits at step >= 2");
  const std::size_t n = y_prev.size();
  std::vector<TokenSeq> xs{y_prev};
  ArgmaxStep<T> out;
  out.lambda = batch_logits<T>(model, xs, detail::one_ctx(cond));
  out.forward_passes = 1;
  const TokenSeq predicted = detail::argmax_tokens(y_prev, out.lambda, 0, clamp);
  out.y = predicted;
  if (!lambda_prev) return out;
  const auto unsure = detail::uncertain_positions(*lambda_prev, 0, n, rho, clamp);
  if (unsure.empty()) return out;
  std::vector<TokenSeq> mid{y_prev};
  for (auto pos : unsure) mid[0][pos] = predicted[pos];
  const auto unrolled = batch_logits<T>(model, mid, detail::one_ctx(cond));
  ++out.forward_passes;
  for (auto pos : unsure) out.y[pos] = static_cast<TokenId>(argmax<T>(unrolled.row(pos)));
  return out;
}

/// Self-reconstruction cross-entropy of y; lower is better.
template <class T>
double model_score(const DenoiserModel<T>& model, const TokenSeq& y,
                   const SourceContext<T>* cond = nullptr) {
  std::vector<TokenSeq> xs{y};
  const auto logits = batch_logits<T>(model, xs, detail::one_ctx(cond));
  return cross_entropy<T>(logits, y, 0.0);
}

/// Scores for many sequences in batched passes.
template <class T>
std::vector<double> model_scores(const DenoiserModel<T>& model, std::span<const TokenSeq> ys,
                                 std::span<const SourceContext<T>* const> ctxs = {}) {
  const auto logits = batch_logits<T>(model, ys, ctxs);
  const std::size_t n = model.config().seq_len;
  std::vector<double> out;
  std::vector<double> ls(logits.cols());
  for (std::size_t b = 0; b < ys.size(); ++b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      log_softmax_row<T>(logits.row(b * n + i), ls);
      acc -= ls[static_cast<std::size_t>(ys[b][i])];
    }
    out.push_back(acc / static_cast<double>(n));
  }
  return out;
}

struct RerankResult {
  std::size_t best = 0;
  std::vector<double> scores;
};

/// Candidate with the lowest model score; the lowest index wins ties.
template <class T>
RerankResult rerank(std::span<const TokenSeq> candidates, const DenoiserModel<T>& model,
                    const SourceContext<T>* cond = nullptr) {
  if (candidates.empty()) throw ArgumentError("rerank: no candidates");
  std::vector<const SourceContext<T>*> ctxs(model.config().conditional() ? candidates.size() : 0,
                                            cond);
  RerankResult r;
  r.scores = model_scores<T>(model, candidates, ctxs);
  for (std::size_t i = 1; i < r.scores.size(); ++i)
    if (r.scores[i] < r.scores[r.best]) r.best = i;
  return r;
}

/// One chain to run: optional template, optional source context, own rng.
template <class T>
struct ChainSpec {
  const Template* init = nullptr;
  const SourceContext<T>* ctx = nullptr;
  Rng rng{0};
};

/// Runs independent chains in lockstep, batching their denoiser calls.
template <class T>
std::vector<ChainTrace> run_chains(const DenoiserModel<T>& model, const SamplerConfig& cfg,
                                   std::vector<ChainSpec<T>>& chains, bool score = true) {
  cfg.validate();
  const auto& mc = model.config();
  const std::size_t n = mc.seq_len, v = mc.vocab_size;
  const std::size_t count = chains.size();
  std::vector<ChainTrace> traces(count);
  std::vector<TokenSeq> cur(count);
  std::vector<std::vector<std::uint8_t>> clamps(count);
  for (std::size_t c = 0; c < count; ++c) {
    auto& spec = chains[c];
    if (mc.conditional() && !spec.ctx)
      throw ArgumentError("sample_chain: encoder-decoder model needs conditioning");
    TokenSeq x0(n);
    if (spec.init) {
      if (spec.init->tokens.size() != n || spec.init->clamp.size() != n)
        throw ArgumentError("sample_chain: template length must equal N");
      clamps[c] = spec.init->clamp;
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (spec.init && spec.init->clamp[i])
        x0[i] = spec.init->tokens[i];
      else
        x0[i] = static_cast<TokenId>(spec.rng.uniform_int(v));
    }
    cur[c] = x0;
    traces[c].states.push_back(std::move(x0));
  }

  std::vector<Tensor<T>> lambda(count);  // argmax-unrolled carry, per chain
  std::vector<std::size_t> active(count);
  std::iota(active.begin(), active.end(), 0);
  for (std::size_t t = 1; t <= cfg.steps && !active.empty(); ++t) {
    std::vector<TokenSeq> xs;
    std::vector<const SourceContext<T>*> ctxs;
    for (auto c : active) {
      xs.push_back(cur[c]);
      if (mc.conditional()) ctxs.push_back(chains[c].ctx);
    }
    const auto logits = batch_logits<T>(model, xs, ctxs);
    std::vector<TokenSeq> next(active.size());
    if (cfg.strategy == Strategy::LowTemp) {
      for (std::size_t a = 0; a < active.size(); ++a) {
        const auto c = active[a];
        const std::size_t free = detail::free_positions(clamps[c], n).size();
        std::size_t k;
        if (cfg.schedule == Schedule::Triangular)
          k = triangular_count(t, cfg.steps, n);
        else
          k = static_cast<std::size_t>(
              std::ceil(cfg.update_fraction * static_cast<double>(free) - 1e-12));
        next[a] = detail::low_temp_update(cur[c], logits, a * n, cfg.temperature, k, clamps[c],
                                          chains[c].rng);
        ++traces[c].forward_passes;
      }
    } else {
      std::vector<std::size_t> unroll_idx;
      std::vector<TokenSeq> mids;
      std::vector<const SourceContext<T>*> mid_ctxs;
      std::vector<std::vector<std::size_t>> unsure(active.size());
      for (std::size_t a = 0; a < active.size(); ++a) {
        const auto c = active[a];
        next[a] = detail::argmax_tokens(cur[c], logits, a * n, clamps[c]);
        ++traces[c].forward_passes;
        if (t >= 2) {
          unsure[a] = detail::uncertain_positions(lambda[c], 0, n, cfg.uncertain_share, clamps[c]);
          if (!unsure[a].empty()) {
            TokenSeq mid = cur[c];
            for (auto pos : unsure[a]) mid[pos] = next[a][pos];
            unroll_idx.push_back(a);
            mids.push_back(std::move(mid));
            if (mc.conditional()) mid_ctxs.push_back(chains[c].ctx);
          }
        }
        Tensor<T> lam({n, v});
        std::copy_n(logits.data() + a * n * v, n * v, lam.data());
        lambda[c] = std::move(lam);
      }
      if (!mids.empty()) {
        const auto unrolled = batch_logits<T>(model, mids, mid_ctxs);
        for (std::size_t u = 0; u < unroll_idx.size(); ++u) {
          const auto a = unroll_idx[u];
          ++traces[active[a]].forward_passes;
          for (auto pos : unsure[a])
            next[a][pos] = static_cast<TokenId>(argmax<T>(unrolled.row(u * n + pos)));
        }
      }
    }
    std::vector<std::size_t> still;
    for (std::size_t a = 0; a < active.size(); ++a) {
      const auto c = active[a];
      const std::size_t changed = detail::count_changes(cur[c], next[a]);
      cur[c] = next[a];
      traces[c].states.push_back(next[a]);
      traces[c].changed.push_back(changed);
      if (!(cfg.early_stop && changed == 0)) still.push_back(c);
    }
    active = std::move(still);
  }

  if (score && count > 0) {
    std::vector<const SourceContext<T>*> ctxs;
    if (mc.conditional())
      for (const auto& s : chains) ctxs.push_back(s.ctx);
    const auto scores = model_scores<T>(model, cur, ctxs);
    for (std::size_t c = 0; c < count; ++c) traces[c].score = scores[c];
  }
  return traces;
}

/// A single chain seeded from cfg.seed.
template <class T>
ChainTrace sample_chain(const DenoiserModel<T>& model, const SamplerConfig& cfg,
                        const Template* init = nullptr, const SourceContext<T>* cond = nullptr) {
  std::vector<ChainSpec<T>> chains{{init, cond, Rng(cfg.seed)}};
  return run_chains(model, cfg, chains).front();
}

struct GenerationResult {
  TokenSeq best;
  std::vector<ChainTrace> candidates;
  std::size_t best_index = 0;
};

/// For each source (or each requested sample when unconditional), runs
/// cfg.rerank chains and keeps the lowest-scoring final state. Chain j of item
/// i uses Rng(cfg.seed).fork(i * rerank + j).
template <class T>
std::vector<GenerationResult> generate(const DenoiserModel<T>& model, const SamplerConfig& cfg,
                                       std::span<const SourceContext<T>> ctxs,
                                       std::size_t items, const Template* init = nullptr) {
  const bool cond = model.config().conditional();
  if (cond && ctxs.size() != items)
    throw ArgumentError("generate: need one context per source");
  const Rng base(cfg.seed);
  std::vector<ChainSpec<T>> chains;
  for (std::size_t i = 0; i < items; ++i)
    for (std::size_t j = 0; j < cfg.rerank; ++j)
      chains.push_back({init, cond ? &ctxs[i] : nullptr, base.fork(i * cfg.rerank + j)});
  auto traces = run_chains(model, cfg, chains);
  std::vector<GenerationResult> out(items);
  for (std::size_t i = 0; i < items; ++i) {
    auto& r = out[i];
    for (std::size_t j = 0; j < cfg.rerank; ++j)
      r.candidates.push_back(std::move(traces[i * cfg.rerank + j]));
    for (std::size_t j = 1; j < r.candidates.size(); ++j)
      if (r.candidates[j].score < r.candidates[r.best_index].score) r.best_index = j;
    r.best = r.candidates[r.best_index].states.back();
  }
  return out;
}

/// `step=<int> changed=<int> tok tok ...` per state; x_0 has changed=0.
inline std::string format_trace(const ChainTrace& trace, const Vocab& vocab) {
  std::string out;
  for (std::size_t s = 0; s < trace.states.size(); ++s) {
    out += "step=" + std::to_string(s) +
           " changed=" + std::to_string(s == 0 ? 0 : trace.changed[s - 1]);
    const auto toks = token_strings(trace.states[s], vocab);
    if (!toks.empty()) out += " " + toks;
    out += '\n';
  }
  return out;
}

/// Sequence <-> index in [0, v^N), position 0 most significant.
inline std::size_t sequence_index(std::span<const TokenId> x, std::size_t v) {
  std::size_t idx = 0;
  for (auto t : x) idx = idx * v + static_cast<std::size_t>(t);
  return idx;
}

inline TokenSeq sequence_at(std::size_t idx, std::size_t v, std::size_t n) {
  TokenSeq x(n);
  for (std::size_t i = n; i-- > 0;) {
    x[i] = static_cast<TokenId>(idx % v);
    idx /= v;
  }
  return x;
}

/// Full one-step transition matrix K[z][y] = prod_i f(y_i | z) over all v^N
/// sequences, row-major. Intended for tiny instances only.
template <class T>
std::vector<double> transition_matrix(const DenoiserModel<T>& model,
                                      const SourceContext<T>* cond = nullptr) {
  const std::size_t n = model.config().seq_len, v = model.config().vocab_size;
  const double states_d = std::pow(static_cast<double>(v), static_cast<double>(n));
  if (states_d > 4096.0) throw SizeError("transition_matrix: v^N exceeds 4096");
  const auto states = static_cast<std::size_t>(states_d);
  std::vector<TokenSeq> all;
  for (std::size_t s = 0; s < states; ++s) all.push_back(sequence_at(s, v, n));
  std::vector<const SourceContext<T>*> ctxs(cond ? states : 0, cond);
  const auto logits = batch_logits<T>(model, all, ctxs);
  std::vector<double> logp(n * v), k(states * states);
  for (std::size_t z = 0; z < states; ++z) {
    for (std::size_t i = 0; i < n; ++i)
      log_softmax_row<T>(logits.row(z * n + i), std::span<double>(logp).subspan(i * v, v));
    for (std::size_t y = 0; y < states; ++y) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        acc += logp[i * v + static_cast<std::size_t>(all[y][i])];
      k[z * states + y] = std::exp(acc);
    }
  }
  return k;
}

/// p_t(x | x0): the chain's t-step transition probability by exact
/// enumeration over intermediates. Refuses when v^(N(t-1)) > 10^6.
template <class T>
double exact_chain_prob(const DenoiserModel<T>& model, const TokenSeq& x0, const TokenSeq& x,
                        std::size_t t, const SourceContext<T>* cond = nullptr) {
  const std::size_t n = model.config().seq_len, v = model.config().vocab_size;
  if (t < 1) throw ArgumentError("exact_chain_prob: t must be >= 1");
  if (x0.size() != n || x.size() != n) throw ArgumentError("exact_chain_prob: length mismatch");
  const double work = std::pow(static_cast<double>(v), static_cast<double>(n * (t - 1)));
  if (work > 1e6) throw SizeError("exact_chain_prob: v^(N(t-1)) exceeds 10^6");
  const auto k = transition_matrix<T>(model, cond);
  const std::size_t states = static_cast<std::size_t>(std::llround(
      std::pow(static_cast<double>(v), static_cast<double>(n))));
  // Forward recursion over the distribution of x_s is the same sum as the
  // nested enumeration over x_1 .. x_{t-1}.
  std::vector<double> dist(states, 0.0), next(states);
  dist[sequence_index(x0, v)] = 1.0;
  for (std::size_t s = 0; s < t; ++s) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t z = 0; z < states; ++z) {
      if (dist[z] == 0.0) continue;
      for (std::size_t y = 0; y < states; ++y) next[y] += dist[z] * k[z * states + y];
    }
    dist.swap(next);
  }
  return dist[sequence_index(x, v)];
}

}  // namespace sundae
