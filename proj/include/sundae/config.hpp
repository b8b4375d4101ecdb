#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "sundae/data.hpp"
#include "sundae/errors.hpp"
#include "sundae/model.hpp"
#include "sundae/sampling.hpp"
#include "sundae/training.hpp"

namespace sundae {

enum class TemplateMode { Auto, Word, Char };

inline std::string to_string(TemplateMode m) {
  switch (m) {
    case TemplateMode::Word: return "word";
    case TemplateMode::Char: return "char";
    default: return "auto";
  }
}
inline TemplateMode parse_template_mode(std::string_view s) {
  if (s == "auto") return TemplateMode::Auto;
  if (s == "word") return TemplateMode::Word;
  if (s == "char") return TemplateMode::Char;
  throw ArgumentError("unknown template mode: " + std::string(s));
}

struct DataConfig {
  /// Synthetic conditional task; "none" trains an unconditional model on `corpus`.
  std::string task = "none";
  std::size_t task_min_len = 4;
  std::size_t task_max_len = 12;
  std::size_t task_vocab = 14;
  std::uint64_t cipher_seed = 7;
  std::size_t train_pairs = 20000;
  std::size_t eval_pairs = 500;
  std::string corpus;
  std::string vocab;
  VocabKind vocab_kind = VocabKind::Char;

  bool operator==(const DataConfig&) const = default;
};

struct PathConfig {
  std::string checkpoint;
  std::string out;
  std::string metrics_log;
  std::string trace;
  std::string input;

  bool operator==(const PathConfig&) const = default;
};

struct EvalConfig {
  std::vector<double> temps{0.2, 1.5};
  std::size_t samples_per_temp = 200;
  std::size_t count = 1;
  std::string template_text;
  TemplateMode template_mode = TemplateMode::Auto;
  /// Ablation variants as `s:len` items, e.g. "1:on,2:on".
  std::string variants = "1:on,2:on";

  bool operator==(const EvalConfig&) const = default;
};

struct BenchSettings {
  std::vector<std::size_t> lengths{64};
  std::vector<std::size_t> steps{4, 8, 10, 16};
  std::size_t batch = 32;
  std::size_t repeats = 3;

  bool operator==(const BenchSettings&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  PathConfig paths;
  ModelConfig model;
  TrainConfig train;
  SamplerConfig sampler;
  EvalConfig eval;
  BenchSettings bench;

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

template <class E>
struct EnumIo;
template <>
struct EnumIo<ModelMode> {
  static ModelMode parse(std::string_view s) { return parse_model_mode(s); }
};
template <>
struct EnumIo<Strategy> {
  static Strategy parse(std::string_view s) { return parse_strategy(s); }
};
template <>
struct EnumIo<Schedule> {
  static Schedule parse(std::string_view s) { return parse_schedule(s); }
};
template <>
struct EnumIo<VocabKind> {
  static VocabKind parse(std::string_view s) { return parse_vocab_kind(s); }
};
template <>
struct EnumIo<TemplateMode> {
  static TemplateMode parse(std::string_view s) { return parse_template_mode(s); }
};

template <class N>
N parse_number(std::string_view s, std::string_view key) {
  N value{};
  const auto* end = s.data() + s.size();
  auto r = std::from_chars(s.data(), end, value);
  if (r.ec != std::errc() || r.ptr != end)
    throw ConfigError("config: bad value for " + std::string(key) + ": '" + std::string(s) + "'");
  return value;
}

template <class V>
std::string format_value(const V& v) {
  if constexpr (std::is_same_v<V, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<V, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<V, double>) {
    return format_double(v);
  } else if constexpr (std::is_enum_v<V>) {
    return to_string(v);
  } else if constexpr (std::is_integral_v<V>) {
    return std::to_string(v);
  } else {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) out += ',';
      out += format_value(v[i]);
    }
    return out;
  }
}

template <class V>
void parse_value(V& dst, std::string_view s, std::string_view key) {
  if constexpr (std::is_same_v<V, bool>) {
    if (s == "true" || s == "1") dst = true;
    else if (s == "false" || s == "0") dst = false;
    else throw ConfigError("config: bad boolean for " + std::string(key));
  } else if constexpr (std::is_same_v<V, std::string>) {
    dst = std::string(s);
  } else if constexpr (std::is_enum_v<V>) {
    try {
      dst = EnumIo<V>::parse(s);
    } catch (const ArgumentError& e) {
      throw ConfigError("config: " + std::string(key) + ": " + e.what());
    }
  } else if constexpr (std::is_arithmetic_v<V>) {
    if constexpr (std::is_unsigned_v<V>)
      if (!s.empty() && s.front() == '-')
        throw ConfigError("config: " + std::string(key) + " must be non-negative");
    dst = parse_number<V>(s, key);
  } else {
    V out;
    std::size_t start = 0;
    while (start <= s.size() && !s.empty()) {
      const auto comma = s.find(',', start);
      const auto item = s.substr(start, comma == std::string_view::npos ? s.npos : comma - start);
      typename V::value_type x{};
      parse_value(x, item, key);
      out.push_back(x);
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    dst = std::move(out);
  }
}

}  // namespace detail

/// Calls f(key, member) for every configurable field, in dump order.
template <class C, class F>
void visit_fields(C& c, F&& f) {
  f("seed", c.seed);
  f("data.task", c.data.task);
  f("data.task_min_len", c.data.task_min_len);
  f("data.task_max_len", c.data.task_max_len);
  f("data.task_vocab", c.data.task_vocab);
  f("data.cipher_seed", c.data.cipher_seed);
  f("data.train_pairs", c.data.train_pairs);
  f("data.eval_pairs", c.data.eval_pairs);
  f("data.corpus", c.data.corpus);
  f("data.vocab", c.data.vocab);
  f("data.vocab_kind", c.data.vocab_kind);
  f("paths.checkpoint", c.paths.checkpoint);
  f("paths.out", c.paths.out);
  f("paths.metrics_log", c.paths.metrics_log);
  f("paths.trace", c.paths.trace);
  f("paths.input", c.paths.input);
  f("model.vocab_size", c.model.vocab_size);
  f("model.seq_len", c.model.seq_len);
  f("model.layers", c.model.layers);
  f("model.d_model", c.model.d_model);
  f("model.heads", c.model.heads);
  f("model.d_ff", c.model.d_ff);
  f("model.dropout", c.model.dropout);
  f("model.mode", c.model.mode);
  f("model.source_len", c.model.source_len);
  f("model.d_lp", c.model.d_lp);
  f("model.lp_blocks", c.model.lp_blocks);
  f("model.length_downsample", c.model.length_downsample);
  f("model.length_prediction", c.model.length_prediction);
  f("train.unroll_terms", c.train.unroll_terms);
  f("train.batch_size", c.train.batch_size);
  f("train.total_steps", c.train.total_steps);
  f("train.warmup_steps", c.train.warmup_steps);
  f("train.lr_start", c.train.lr_start);
  f("train.lr_peak", c.train.lr_peak);
  f("train.lr_min", c.train.lr_min);
  f("train.label_smoothing", c.train.label_smoothing);
  f("train.weight_decay", c.train.weight_decay);
  f("train.adam_beta1", c.train.adam_beta1);
  f("train.adam_beta2", c.train.adam_beta2);
  f("train.adam_eps", c.train.adam_eps);
  f("train.average_window", c.train.average_window);
  f("train.snapshot_interval", c.train.snapshot_interval);
  f("sampler.steps", c.sampler.steps);
  f("sampler.temperature", c.sampler.temperature);
  f("sampler.strategy", c.sampler.strategy);
  f("sampler.schedule", c.sampler.schedule);
  f("sampler.update_fraction", c.sampler.update_fraction);
  f("sampler.rerank", c.sampler.rerank);
  f("sampler.uncertain_share", c.sampler.uncertain_share);
  f("sampler.early_stop", c.sampler.early_stop);
  f("eval.temps", c.eval.temps);
  f("eval.samples_per_temp", c.eval.samples_per_temp);
  f("eval.count", c.eval.count);
  f("eval.template", c.eval.template_text);
  f("eval.template_mode", c.eval.template_mode);
  f("eval.variants", c.eval.variants);
  f("bench.lengths", c.bench.lengths);
  f("bench.steps", c.bench.steps);
  f("bench.batch", c.bench.batch);
  f("bench.repeats", c.bench.repeats);
}

/// Sets one dotted key; unknown keys are a ConfigError.
inline void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value) {
  bool found = false;
  visit_fields(cfg, [&](std::string_view k, auto& member) {
    if (k != key) return;
    detail::parse_value(member, value, key);
    found = true;
  });
  if (!found) throw ConfigError("config: unknown key '" + std::string(key) + "'");
}

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Applies `key = value` lines; `#` starts a comment on lines that begin
/// with it or after whitespace.
inline void apply_config_text(RunConfig& cfg, std::string_view text) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const auto hash = line.find(" #");
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config: line " + std::to_string(line_no) + ": expected key = value");
    set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

inline RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  apply_config_text(cfg, text);
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Every field as `key = value`; parse_config(dump_config(c)) == c.
inline std::string dump_config(const RunConfig& cfg) {
  std::string out;
  RunConfig copy = cfg;
  visit_fields(copy, [&](std::string_view k, auto& member) {
    out += std::string(k) + " = " + detail::format_value(member) + "\n";
  });
  return out;
}

}  // namespace sundae
