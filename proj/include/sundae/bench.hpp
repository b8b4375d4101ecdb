#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sundae/autodiff.hpp"
#include "sundae/model.hpp"
#include "sundae/sampling.hpp"
#include "sundae/training.hpp"

namespace sundae {

/// Relative speed gains over an AR baseline reported for T = 4, 8, 10, 16.
inline std::optional<double> paper_speed_gain(std::size_t t) {
  static const std::map<std::size_t, double> kGain{{4, 4.7}, {8, 2.6}, {10, 2.2}, {16, 1.4}};
  const auto it = kGain.find(t);
  if (it == kGain.end()) return std::nullopt;
  return it->second;
}

struct BenchRow {
  std::size_t length = 0;  // N
  std::size_t steps = 0;   // T
  std::size_t sundae_passes = 0;
  std::size_t ar_passes = 0;
  double pass_ratio = 0.0;  // ar_passes / sundae_passes
  double sundae_ms = 0.0;   // per batch, min over repeats
  double ar_ms = 0.0;
  double wall_gain = 0.0;   // ar_ms / sundae_ms
  std::optional<double> paper_gain;
};

struct BenchConfig {
  std::vector<std::size_t> lengths{64};
  std::vector<std::size_t> steps{4, 8, 10, 16};
  std::size_t batch = 32;
  std::size_t repeats = 3;
  Strategy strategy = Strategy::LowTemp;
  double uncertain_share = 0.0;
  std::uint64_t seed = 0;
};

namespace detail {

template <class F>
double min_time_ms(std::size_t repeats, F&& f) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < std::max<std::size_t>(1, repeats); ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

/// Greedy left-to-right decoding with the denoiser run under a causal mask,
/// one new position per pass. Returns the number of passes.
template <class T>
std::size_t ar_decode(const DenoiserModel<T>& model, std::size_t batch, std::size_t length,
                      const Memory<T>* mem) {
  const std::size_t v = model.config().vocab_size;
  std::vector<TokenSeq> prefix(batch, TokenSeq{kUnk});
  std::size_t passes = 0;
  for (std::size_t k = 1; k <= length; ++k) {
    Graph<T> g(false);
    auto logits = model.decode(g, prefix, mem, false, nullptr, /*causal=*/true);
    ++passes;
    if (k == length) break;
    for (std::size_t b = 0; b < batch; ++b) {
      auto row = std::span<const T>(logits->data() + ((b + 1) * k - 1) * v, v);
      prefix[b].push_back(static_cast<TokenId>(argmax<T>(row)));
    }
  }
  return passes;
}

}  // namespace detail

/// Compares T-step chain decoding against the AR loop for each (N, T).
/// Models whose N is below a requested length are re-instantiated with the
/// same widths and fresh weights at that length; only mechanics are timed.
template <class T>
std::vector<BenchRow> bench(const DenoiserModel<T>& model, const BenchConfig& cfg) {
  std::vector<BenchRow> rows;
  for (auto length : cfg.lengths) {
    if (length < 1) throw ArgumentError("bench: lengths must be >= 1");
    std::optional<DenoiserModel<T>> resized;
    const DenoiserModel<T>* m = &model;
    if (model.config().seq_len != length) {
      ModelConfig mc = model.config();
      mc.seq_len = length;
      Rng rng(cfg.seed);
      resized.emplace(DenoiserModel<T>::init(mc, rng));
      m = &*resized;
    }
    std::vector<SourceContext<T>> ctxs;
    std::optional<Memory<T>> mem;
    if (m->config().conditional()) {
      TokenSeq src(m->config().source_len, kUnk);
      const auto ctx = m->prepare(src);
      ctxs.assign(cfg.batch, ctx);
      std::vector<const SourceContext<T>*> ptrs;
      for (const auto& c : ctxs) ptrs.push_back(&c);
      mem = DenoiserModel<T>::stack(ptrs);
    }
    std::size_t ar_passes = 0;
    const double ar_ms = detail::min_time_ms(cfg.repeats, [&] {
      ar_passes = detail::ar_decode(*m, cfg.batch, length, mem ? &*mem : nullptr);
    });
    for (auto steps : cfg.steps) {
      if (steps < 1) throw ArgumentError("bench: steps must be >= 1");
      SamplerConfig sc;
      sc.steps = steps;
      sc.temperature = 1.0;
      sc.strategy = cfg.strategy;
      sc.uncertain_share = cfg.uncertain_share;
      sc.seed = cfg.seed;
      std::size_t passes = 0;
      const double ms = detail::min_time_ms(cfg.repeats, [&] {
        std::vector<ChainSpec<T>> chains;
        const Rng base(cfg.seed);
        for (std::size_t b = 0; b < cfg.batch; ++b)
          chains.push_back({nullptr, ctxs.empty() ? nullptr : &ctxs[b], base.fork(b)});
        const auto traces = run_chains(*m, sc, chains, /*score=*/false);
        // Chains advance in lockstep, so one chain's count is the batch's.
        passes = traces.front().forward_passes;
      });
      BenchRow r;
      r.length = length;
      r.steps = steps;
      r.sundae_passes = passes;
      r.ar_passes = ar_passes;
      r.pass_ratio = static_cast<double>(ar_passes) / static_cast<double>(passes);
      r.sundae_ms = ms;
      r.ar_ms = ar_ms;
      r.wall_gain = ar_ms / ms;
      r.paper_gain = paper_speed_gain(steps);
      rows.push_back(r);
    }
  }
  return rows;
}

inline std::string format_bench(std::span<const BenchRow> rows) {
  std::ostringstream out;
  out << "N\tT\tsundae_passes\tar_passes\tpass_ratio\tsundae_ms\tar_ms\twall_gain\tpaper_gain\n";
  for (const auto& r : rows) {
    out << r.length << '\t' << r.steps << '\t' << r.sundae_passes << '\t' << r.ar_passes << '\t'
        << format_double(r.pass_ratio) << '\t' << r.sundae_ms << '\t' << r.ar_ms << '\t'
        << r.wall_gain << '\t';
    if (r.paper_gain)
      out << *r.paper_gain << 'x';
    else
      out << '-';
    out << '\n';
  }
  return out.str();
}

}  // namespace sundae
