#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "sundae/data.hpp"
#include "sundae/errors.hpp"
#include "sundae/model.hpp"
#include "sundae/sampling.hpp"
#include "sundae/training.hpp"

namespace sundae {

using Words = std::vector<std::string>;

struct BleuConfig {
  std::size_t max_order = 4;
};

namespace detail {

using NgramCounts = std::unordered_map<std::string, std::size_t>;

inline NgramCounts ngram_counts(const Words& s, std::size_t order) {
  NgramCounts out;
  if (s.size() < order) return out;
  for (std::size_t i = 0; i + order <= s.size(); ++i) {
    std::string key;
    for (std::size_t k = 0; k < order; ++k) {
      key += s[i + k];
      key += '\x1f';
    }
    ++out[key];
  }
  return out;
}

/// Per-order clipped matches and totals accumulated over a corpus.
struct BleuStats {
  std::vector<double> matches, totals;
  double hyp_len = 0.0, ref_len = 0.0;
  explicit BleuStats(std::size_t order) : matches(order, 0.0), totals(order, 0.0) {}

  double score() const {
    double log_sum = 0.0;
    std::size_t used = 0;
    for (std::size_t n = 0; n < matches.size(); ++n) {
      // Orders longer than every hypothesis carry no evidence and are skipped.
      if (totals[n] == 0.0) continue;
      if (matches[n] == 0.0) return 0.0;
      log_sum += std::log(matches[n] / totals[n]);
      ++used;
    }
    if (used == 0 || hyp_len == 0.0) return 0.0;
    const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
    return 100.0 * bp * std::exp(log_sum / static_cast<double>(used));
  }
};

/// Max count of each n-gram over a reference set, per order.
struct RefTable {
  std::vector<NgramCounts> max_counts;
  std::vector<std::size_t> lengths;

  RefTable(std::span<const Words> refs, std::size_t order) : max_counts(order) {
    for (const auto& r : refs) add(r);
  }
  void add(const Words& r) {
    lengths.push_back(r.size());
    for (std::size_t n = 0; n < max_counts.size(); ++n)
      for (const auto& [k, c] : ngram_counts(r, n + 1)) {
        auto& slot = max_counts[n][k];
        slot = std::max(slot, c);
      }
  }
  /// Closest reference length; the shorter one on ties.
  std::size_t closest(std::size_t hyp) const {
    std::size_t best = lengths.front();
    for (auto l : lengths) {
      const auto d = l > hyp ? l - hyp : hyp - l;
      const auto db = best > hyp ? best - hyp : hyp - best;
      if (d < db || (d == db && l < best)) best = l;
    }
    return best;
  }
};

inline void accumulate(BleuStats& st, const Words& hyp, const RefTable& refs) {
  for (std::size_t n = 0; n < st.matches.size(); ++n) {
    for (const auto& [k, c] : ngram_counts(hyp, n + 1)) {
      const auto it = refs.max_counts[n].find(k);
      st.matches[n] += static_cast<double>(std::min(c, it == refs.max_counts[n].end() ? 0 : it->second));
      st.totals[n] += static_cast<double>(c);
    }
  }
  st.hyp_len += static_cast<double>(hyp.size());
  st.ref_len += static_cast<double>(refs.closest(hyp.size()));
}

inline void check_order(const BleuConfig& cfg) {
  if (cfg.max_order < 1) throw ArgumentError("bleu: max_order must be >= 1");
}

}  // namespace detail

/// Corpus BLEU with one reference per hypothesis, in [0, 100]. No smoothing.
inline double bleu(std::span<const Words> hyps, std::span<const Words> refs,
                   const BleuConfig& cfg = {}) {
  detail::check_order(cfg);
  if (hyps.empty() || hyps.size() != refs.size())
    throw ArgumentError("bleu: need equal, nonzero hypothesis and reference counts");
  detail::BleuStats st(cfg.max_order);
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    detail::RefTable table(refs.subspan(i, 1), cfg.max_order);
    detail::accumulate(st, hyps[i], table);
  }
  return st.score();
}

/// Corpus BLEU where every hypothesis is scored against the same reference set.
inline double bleu_shared_refs(std::span<const Words> hyps, std::span<const Words> refs,
                               const BleuConfig& cfg = {}) {
  detail::check_order(cfg);
  if (hyps.empty() || refs.empty()) throw ArgumentError("bleu: empty hypotheses or references");
  const detail::RefTable table(refs, cfg.max_order);
  detail::BleuStats st(cfg.max_order);
  for (const auto& h : hyps) detail::accumulate(st, h, table);
  return st.score();
}

/// Mean over samples of BLEU(sample, all other samples).
inline double self_bleu(std::span<const Words> samples, const BleuConfig& cfg = {}) {
  detail::check_order(cfg);
  if (samples.size() < 2) throw ArgumentError("self_bleu: need at least two samples");
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::vector<Words> rest;
    rest.reserve(samples.size() - 1);
    for (std::size_t j = 0; j < samples.size(); ++j)
      if (j != i) rest.push_back(samples[j]);
    const detail::RefTable table(rest, cfg.max_order);
    detail::BleuStats st(cfg.max_order);
    detail::accumulate(st, samples[i], table);
    total += st.score();
  }
  return total / static_cast<double>(samples.size());
}

/// Content tokens (up to the first PAD) as strings.
inline Words content_words(const TokenSeq& seq, const Vocab* vocab = nullptr) {
  Words out;
  const std::size_t n = content_length(seq);
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(vocab ? vocab->token(seq[i]) : std::to_string(seq[i]));
  return out;
}

struct QDPoint {
  double temperature = 0.0;
  double quality = 0.0;    // BLEU of samples against the references
  double diversity = 0.0;  // self-BLEU, higher = less diverse
};

using WordsFn = std::function<Words(const TokenSeq&)>;

/// For each temperature draws two disjoint sample sets of `samples_per_temp`
/// unconditional chains: one scored against `references`, one by self-BLEU.
template <class T>
std::vector<QDPoint> quality_diversity_curve(const DenoiserModel<T>& model,
                                             std::span<const double> temperatures,
                                             std::size_t samples_per_temp,
                                             std::span<const Words> references,
                                             const SamplerConfig& base, const WordsFn& to_words,
                                             const BleuConfig& bleu_cfg = {}) {
  if (temperatures.empty()) throw ArgumentError("quality_diversity_curve: no temperatures");
  for (std::size_t i = 1; i < temperatures.size(); ++i)
    if (temperatures[i] < temperatures[i - 1])
      throw ArgumentError("quality_diversity_curve: temperatures must be ascending");
  std::vector<QDPoint> out;
  for (std::size_t ti = 0; ti < temperatures.size(); ++ti) {
    std::vector<Words> sets[2];
    for (int half = 0; half < 2; ++half) {
      SamplerConfig cfg = base;
      cfg.temperature = temperatures[ti];
      cfg.seed = Rng(base.seed).fork(ti * 2 + static_cast<std::size_t>(half)).next_u64();
      const auto gen = generate<T>(model, cfg, {}, samples_per_temp);
      for (const auto& g : gen) sets[half].push_back(to_words(g.best));
    }
    QDPoint p;
    p.temperature = temperatures[ti];
    p.quality = bleu_shared_refs(sets[0], references, bleu_cfg);
    p.diversity = self_bleu(sets[1], bleu_cfg);
    out.push_back(p);
  }
  return out;
}

/// Sources to predicted target sequences, one per source.
using TranslateFn = std::function<std::vector<TokenSeq>(std::span<const TokenSeq>)>;

/// Fraction of pairs whose prediction matches the target content exactly.
inline double exact_match(const TranslateFn& translate, std::span<const SeqPair> pairs,
                          std::size_t n_source) {
  if (pairs.empty()) return 0.0;
  std::vector<TokenSeq> sources;
  for (const auto& p : pairs) sources.push_back(pad_to(p.source, n_source));
  const auto preds = translate(sources);
  if (preds.size() != pairs.size()) throw ArgumentError("exact_match: prediction count mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& pred = preds[i];
    const std::size_t n = content_length(pred);
    hits += n == pairs[i].target.size() &&
            std::equal(pairs[i].target.begin(), pairs[i].target.end(), pred.begin());
  }
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

/// Reranked chain decoding for a batch of padded sources.
template <class T>
std::vector<TokenSeq> translate(const DenoiserModel<T>& model, const SamplerConfig& cfg,
                                std::span<const TokenSeq> sources) {
  std::vector<SourceContext<T>> ctxs;
  ctxs.reserve(sources.size());
  for (const auto& s : sources) ctxs.push_back(model.prepare(s));
  const auto gen = generate<T>(model, cfg, ctxs, sources.size());
  std::vector<TokenSeq> out;
  for (const auto& g : gen) out.push_back(g.best);
  return out;
}

template <class T>
double exact_match(const DenoiserModel<T>& model, std::span<const SeqPair> pairs,
                   const SamplerConfig& cfg) {
  if (!model.config().conditional())
    throw UnsupportedModeError("exact_match: requires an encoder-decoder model");
  return exact_match(
      [&](std::span<const TokenSeq> srcs) { return translate<T>(model, cfg, srcs); }, pairs,
      model.config().source_len);
}

/// Fraction of pairs whose predicted length class equals the true class.
template <class T>
double length_accuracy(const DenoiserModel<T>& model, std::span<const SeqPair> pairs) {
  const auto& c = model.config();
  if (pairs.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& p : pairs) {
    const auto ctx = model.prepare(pad_to(p.source, c.source_len));
    hits += ctx.length_class == length_label(p.target.size(), c.length_downsample);
  }
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

struct AblationVariant {
  std::size_t unroll_terms = 2;
  bool length_prediction = true;

  std::string name() const {
    return "s=" + std::to_string(unroll_terms) + ",len=" + (length_prediction ? "on" : "off");
  }
};

/// A synthetic-task experiment shared by all variants.
struct AblationSetup {
  SynthTask task;
  ModelConfig model;
  TrainConfig train;
  SamplerConfig sampler;
  std::size_t train_pairs = 20000;
  std::size_t eval_pairs = 200;
  std::uint64_t data_seed = 1;
};

struct AblationRow {
  std::string variant;
  double exact_match = 0.0;
  double final_loss = 0.0;
};

/// Trains a variant of `setup` from scratch and evaluates the averaged model.
inline AblationRow run_ablation_variant(const AblationSetup& setup, const AblationVariant& var,
                                        std::ostream* log = nullptr) {
  ModelConfig mc = setup.model;
  mc.mode = ModelMode::EncoderDecoder;
  mc.length_prediction = var.length_prediction;
  TrainConfig tc = setup.train;
  tc.unroll_terms = var.unroll_terms;
  const auto train_set =
      synth_task_gen(setup.data_seed, setup.train_pairs, setup.task, mc.vocab_size, mc.seq_len);
  const auto held_out = held_out_pairs(setup.data_seed + 1, setup.eval_pairs, setup.task,
                                       mc.vocab_size, mc.seq_len, train_set);
  Rng init_rng(tc.seed);
  TrainState<float> state(DenoiserModel<float>::init(mc, init_rng), tc);
  AblationRow row;
  row.variant = var.name();
  train(state, pair_batches(train_set, tc.batch_size, mc.source_len, mc.seq_len), log,
        [&](const StepResult& r) { row.final_loss = r.loss; });
  const auto model = state.averaged_model();
  row.exact_match = exact_match<float>(model, held_out, setup.sampler);
  return row;
}

inline std::vector<AblationRow> ablation_report(const AblationSetup& setup,
                                                std::span<const AblationVariant> variants) {
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    if (v.unroll_terms < 1 || v.unroll_terms > 3)
      throw ArgumentError("ablation_report: unroll terms must be 1, 2 or 3");
    rows.push_back(run_ablation_variant(setup, v));
  }
  return rows;
}

/// Plain-text table.
inline std::string format_ablation_table(std::span<const AblationRow> rows) {
  std::ostringstream out;
  out << std::left << std::setw(16) << "variant" << std::setw(14) << "exact_match"
      << "final_loss\n";
  for (const auto& r : rows)
    out << std::left << std::setw(16) << r.variant << std::setw(14) << std::fixed
        << std::setprecision(4) << r.exact_match << std::setprecision(4) << r.final_loss
        << '\n';
  return out.str();
}

/// `variant=<str> metric=<str> value=<float>` lines.
inline std::string format_ablation_records(std::span<const AblationRow> rows) {
  std::string out;
  for (const auto& r : rows) {
    out += "variant=" + r.variant + " metric=exact_match value=" + format_double(r.exact_match) + "\n";
    out += "variant=" + r.variant + " metric=final_loss value=" + format_double(r.final_loss) + "\n";
  }
  return out;
}

}  // namespace sundae
