#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sundae/bench.hpp"
#include "sundae/checkpoint.hpp"
#include "sundae/config.hpp"
#include "sundae/data.hpp"
#include "sundae/errors.hpp"
#include "sundae/eval.hpp"
#include "sundae/model.hpp"
#include "sundae/sampling.hpp"
#include "sundae/training.hpp"

namespace sundae::cli {

inline constexpr const char* kUsage =
    "usage: sundae <command> [--config PATH] [--key value ...]\n"
    "\n"
    "commands:\n"
    "  train      train a model and write a checkpoint (--out)\n"
    "  sample     unconditional samples from a checkpoint (--count)\n"
    "  translate  decode each line of --input with a conditional checkpoint\n"
    "  inpaint    fill '*' positions of --template\n"
    "  eval       exact match (task models) or quality/diversity over --temps\n"
    "  bench      decoding speed against a causal left-to-right baseline\n"
    "  ablate     train and score unroll / length-prediction variants\n"
    "\n"
    "flags:\n"
    "  --config PATH  base config of `key = value` lines\n"
    "  --seed INT  --checkpoint PATH  --out PATH  --count INT  --input PATH\n"
    "  --template STR  --temps CSV  --steps INT  --strategy low_temp|argmax_unrolled\n"
    "  --dump-config  print the effective config and exit\n"
    "  --<dotted.key> VALUE  override any config key (see --dump-config)\n";

struct Invocation {
  std::string command;
  RunConfig cfg;
  bool dump = false;
};

/// Usage errors (exit code 1).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Invocation parse_args(const std::vector<std::string>& args) {
  static const std::vector<std::string> kCommands{"train",  "sample", "translate", "inpaint",
                                                  "eval",   "bench",  "ablate"};
  if (args.empty()) throw UsageError("missing command");
  Invocation inv;
  inv.command = args[0];
  if (std::find(kCommands.begin(), kCommands.end(), inv.command) == kCommands.end())
    throw UsageError("unknown command '" + inv.command + "'");
  std::vector<std::pair<std::string, std::string>> overrides;
  std::optional<std::string> config_path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "--dump-config") {
      inv.dump = true;
      continue;
    }
    if (a.rfind("--", 0) != 0 || a.size() < 3) throw UsageError("unexpected argument '" + a + "'");
    if (i + 1 >= args.size()) throw UsageError("flag " + a + " needs a value");
    const std::string key = a.substr(2), value = args[++i];
    if (key == "config") {
      config_path = value;
      continue;
    }
    static const std::vector<std::pair<std::string, std::string>> kAliases{
        {"checkpoint", "paths.checkpoint"}, {"out", "paths.out"},
        {"count", "eval.count"},            {"template", "eval.template"},
        {"temps", "eval.temps"},            {"steps", "sampler.steps"},
        {"strategy", "sampler.strategy"},   {"input", "paths.input"}};
    std::string full = key;
    for (const auto& [alias, target] : kAliases)
      if (alias == key) full = target;
    overrides.emplace_back(full, value);
  }
  try {
    if (config_path) inv.cfg = load_config(*config_path);
    for (const auto& [k, v] : overrides) set_config_value(inv.cfg, k, v);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  inv.cfg.train.seed = inv.cfg.seed;
  inv.cfg.sampler.seed = inv.cfg.seed;
  try {
    inv.cfg.model.validate();
    inv.cfg.train.validate();
    inv.cfg.sampler.validate();
  } catch (const ArgumentError& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  return inv;
}

namespace detail {

inline void require_path(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing ") + what);
}
inline void require_file(const std::string& path, const char* what) {
  require_path(path, what);
  if (!std::filesystem::exists(path)) throw UsageError(std::string(what) + " not found: " + path);
}

/// Vocab "<pad> <unk> 2 3 ..." for synthetic task ids.
inline Vocab task_vocab(std::size_t v) {
  std::vector<std::string> toks{Vocab::kPadToken, Vocab::kUnkToken};
  for (std::size_t i = 2; i < v; ++i) toks.push_back(std::to_string(i));
  return Vocab::from_tokens(toks, VocabKind::Word);
}

inline SynthTask task_from(const DataConfig& d) {
  SynthTask t;
  t.kind = parse_task_kind(d.task);
  t.min_len = d.task_min_len;
  t.max_len = d.task_max_len;
  t.v_task = d.task_vocab;
  t.cipher_seed = d.cipher_seed;
  return t;
}

inline nlohmann::json task_json(const RunConfig& c) {
  return {{"task", c.data.task},
          {"min_len", c.data.task_min_len},
          {"max_len", c.data.task_max_len},
          {"task_vocab", c.data.task_vocab},
          {"cipher_seed", c.data.cipher_seed},
          {"train_pairs", c.data.train_pairs},
          {"data_seed", c.seed}};
}

/// Training pairs and held-out pairs of a task checkpoint.
inline std::pair<std::vector<SeqPair>, std::vector<SeqPair>> task_data(const nlohmann::json& t,
                                                                       const ModelConfig& mc,
                                                                       std::size_t eval_pairs) {
  SynthTask task;
  task.kind = parse_task_kind(t.at("task").get<std::string>());
  task.min_len = t.at("min_len").get<std::size_t>();
  task.max_len = t.at("max_len").get<std::size_t>();
  task.v_task = t.at("task_vocab").get<std::size_t>();
  task.cipher_seed = t.at("cipher_seed").get<std::uint64_t>();
  const auto seed = t.at("data_seed").get<std::uint64_t>();
  auto train = synth_task_gen(seed, t.at("train_pairs").get<std::size_t>(), task, mc.vocab_size,
                              mc.seq_len);
  auto held = held_out_pairs(seed + 1, eval_pairs, task, mc.vocab_size, mc.seq_len, train);
  return {std::move(train), std::move(held)};
}

inline std::ostream& open_or(std::ofstream& file, const std::string& path, std::ostream& dflt) {
  if (path.empty()) return dflt;
  file.open(path, std::ios::binary | std::ios::trunc);
  if (!file) throw FormatError("cannot write " + path);
  return file;
}

inline Words text_words(const TokenSeq& seq, const Vocab& vocab) {
  return split_whitespace(decode(seq, vocab));
}

}  // namespace detail

inline int cmd_train(const RunConfig& cfg, std::ostream& out) {
  detail::require_path(cfg.paths.out, "--out checkpoint path");
  ModelConfig mc = cfg.model;
  std::optional<Vocab> vocab;
  BatchFn batches;
  nlohmann::json extra = nlohmann::json::object();
  if (cfg.data.task != "none") {
    const auto task = detail::task_from(cfg.data);
    mc.mode = ModelMode::EncoderDecoder;
    mc.vocab_size = task.v_task + 2;
    vocab = detail::task_vocab(mc.vocab_size);
    auto pairs = synth_task_gen(cfg.seed, cfg.data.train_pairs, task, mc.vocab_size, mc.seq_len);
    batches = pair_batches(std::move(pairs), cfg.train.batch_size, mc.source_len, mc.seq_len);
    extra["task"] = detail::task_json(cfg);
  } else {
    detail::require_file(cfg.data.corpus, "data.corpus");
    const auto lines = read_lines(cfg.data.corpus);
    if (lines.empty()) throw ArgumentError("train: corpus is empty");
    vocab = cfg.data.vocab.empty() ? Vocab::build(lines, cfg.data.vocab_kind)
                                   : Vocab::load(cfg.data.vocab, cfg.data.vocab_kind);
    mc.mode = ModelMode::Unconditional;
    mc.vocab_size = vocab->size();
    std::vector<std::vector<TokenId>> corpus;
    for (const auto& l : lines) corpus.push_back(tokenize(l, *vocab));
    batches = corpus_batches(std::move(corpus), cfg.train.batch_size, mc.seq_len);
  }
  Rng init_rng(cfg.seed);
  TrainState<float> state(DenoiserModel<float>::init(mc, init_rng), cfg.train);
  std::ofstream log_file;
  const std::string log_path =
      cfg.paths.metrics_log.empty() ? cfg.paths.out + ".metrics" : cfg.paths.metrics_log;
  std::ostream& log = detail::open_or(log_file, log_path, out);
  StepResult last;
  train(state, batches, &log, [&](const StepResult& r) { last = r; });
  save_checkpoint(checkpoint_from_state(state, vocab, extra), cfg.paths.out);
  out << "trained " << state.step << " steps, final loss " << format_double(last.loss)
      << ", checkpoint " << cfg.paths.out << "\n";
  return 0;
}

inline Checkpoint load_for(const RunConfig& cfg) {
  detail::require_file(cfg.paths.checkpoint, "--checkpoint");
  return load_checkpoint(cfg.paths.checkpoint);
}

inline int cmd_sample(const RunConfig& cfg, std::ostream& out) {
  const auto ck = load_for(cfg);
  const auto model = ck.eval_model();
  if (model.config().conditional())
    throw UnsupportedModeError("sample: checkpoint is conditional; use translate");
  if (!ck.vocab) throw FormatError("sample: checkpoint has no vocabulary");
  const auto gen = generate<float>(model, cfg.sampler, {}, cfg.eval.count);
  std::ofstream trace;
  if (!cfg.paths.trace.empty()) detail::open_or(trace, cfg.paths.trace, out);
  for (const auto& g : gen) {
    out << decode(g.best, *ck.vocab) << "\n";
    if (trace.is_open()) trace << format_trace(g.candidates[g.best_index], *ck.vocab);
  }
  return 0;
}

inline int cmd_translate(const RunConfig& cfg, std::ostream& out) {
  const auto ck = load_for(cfg);
  const auto model = ck.eval_model();
  if (!model.config().conditional())
    throw UnsupportedModeError("translate: checkpoint is unconditional");
  if (!ck.vocab) throw FormatError("translate: checkpoint has no vocabulary");
  detail::require_file(cfg.paths.input, "--input");
  std::vector<TokenSeq> sources;
  for (const auto& line : read_lines(cfg.paths.input))
    sources.push_back(encode(line, *ck.vocab, model.config().source_len));
  std::vector<SourceContext<float>> ctxs;
  for (const auto& s : sources) ctxs.push_back(model.prepare(s));
  const auto gen = generate<float>(model, cfg.sampler, ctxs, sources.size());
  std::ofstream trace;
  if (!cfg.paths.trace.empty()) detail::open_or(trace, cfg.paths.trace, out);
  for (const auto& g : gen) {
    out << decode(g.best, *ck.vocab) << "\n";
    if (trace.is_open()) trace << format_trace(g.candidates[g.best_index], *ck.vocab);
  }
  return 0;
}

/// Template pieces: the string per position and whether it is free.
inline std::vector<std::pair<std::string, bool>> parse_template(const std::string& text,
                                                                VocabKind kind) {
  std::vector<std::pair<std::string, bool>> out;
  const auto pieces = kind == VocabKind::Char ? utf8_chars(text) : split_whitespace(text);
  for (const auto& p : pieces) out.emplace_back(p, p == "*");
  return out;
}

inline int cmd_inpaint(const RunConfig& cfg, std::ostream& out) {
  const auto ck = load_for(cfg);
  const auto model = ck.eval_model();
  if (model.config().conditional())
    throw UnsupportedModeError("inpaint: needs an unconditional checkpoint");
  if (!ck.vocab) throw FormatError("inpaint: checkpoint has no vocabulary");
  if (cfg.eval.template_text.empty()) throw UsageError("missing --template");
  VocabKind kind = ck.vocab->kind();
  if (cfg.eval.template_mode == TemplateMode::Word) kind = VocabKind::Word;
  if (cfg.eval.template_mode == TemplateMode::Char) kind = VocabKind::Char;
  const auto pieces = parse_template(cfg.eval.template_text, kind);
  const std::size_t n = model.config().seq_len;
  if (pieces.size() > n) throw ArgumentError("inpaint: template longer than the model length");
  Template tpl;
  tpl.tokens.assign(n, kPad);
  tpl.clamp.assign(n, 1);
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    if (pieces[i].second) {
      tpl.clamp[i] = 0;
    } else {
      tpl.tokens[i] = ck.vocab->id(pieces[i].first);
    }
  }
  const auto gen = generate<float>(model, cfg.sampler, {}, cfg.eval.count, &tpl);
  const std::string sep = kind == VocabKind::Char ? "" : " ";
  for (const auto& g : gen) {
    std::string line;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
      if (i) line += sep;
      // Context tokens are echoed verbatim, even when the vocab lacks them.
      line += pieces[i].second ? ck.vocab->token(g.best[i]) : pieces[i].first;
    }
    out << line << "\n";
  }
  return 0;
}

inline int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const auto ck = load_for(cfg);
  const auto model = ck.eval_model();
  std::ofstream file;
  std::ostream& rep = detail::open_or(file, cfg.paths.out, out);
  const std::string name = std::filesystem::path(cfg.paths.checkpoint).filename().string();
  if (model.config().conditional()) {
    if (!ck.extra.contains("task"))
      throw FormatError("eval: conditional checkpoint carries no task definition");
    const auto [train_set, held] =
        detail::task_data(ck.extra["task"], model.config(), cfg.data.eval_pairs);
    const double em = exact_match<float>(model, held, cfg.sampler);
    rep << "variant=" << name << " metric=exact_match value=" << format_double(em) << "\n";
    if (model.config().length_prediction) {
      const double la = length_accuracy<float>(model, held);
      rep << "variant=" << name << " metric=length_accuracy value=" << format_double(la) << "\n";
    }
    return 0;
  }
  detail::require_file(cfg.data.corpus, "data.corpus (reference corpus)");
  if (!ck.vocab) throw FormatError("eval: checkpoint has no vocabulary");
  std::vector<Words> refs;
  for (const auto& l : read_lines(cfg.data.corpus)) refs.push_back(split_whitespace(l));
  const Vocab& vocab = *ck.vocab;
  const auto points = quality_diversity_curve<float>(
      model, cfg.eval.temps, cfg.eval.samples_per_temp, refs, cfg.sampler,
      [&](const TokenSeq& s) { return detail::text_words(s, vocab); });
  for (const auto& p : points) {
    const std::string v = "tau=" + format_double(p.temperature);
    rep << "variant=" << v << " metric=quality_bleu value=" << format_double(p.quality) << "\n";
    rep << "variant=" << v << " metric=self_bleu value=" << format_double(p.diversity) << "\n";
  }
  return 0;
}

inline int cmd_bench(const RunConfig& cfg, std::ostream& out) {
  std::optional<DenoiserModel<float>> model;
  if (!cfg.paths.checkpoint.empty()) {
    model.emplace(load_for(cfg).eval_model());
  } else {
    Rng rng(cfg.seed);
    model.emplace(DenoiserModel<float>::init(cfg.model, rng));
  }
  BenchConfig bc;
  bc.lengths = cfg.bench.lengths;
  bc.steps = cfg.bench.steps;
  bc.batch = cfg.bench.batch;
  bc.repeats = cfg.bench.repeats;
  bc.strategy = cfg.sampler.strategy;
  bc.uncertain_share = cfg.sampler.uncertain_share;
  bc.seed = cfg.seed;
  const auto rows = bench<float>(*model, bc);
  std::ofstream file;
  detail::open_or(file, cfg.paths.out, out) << format_bench(rows);
  return 0;
}

inline std::vector<AblationVariant> parse_variants(const std::string& spec) {
  std::vector<AblationVariant> out;
  for (const auto& item : split_whitespace([&] {
         std::string s = spec;
         std::replace(s.begin(), s.end(), ',', ' ');
         return s;
       }())) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw UsageError("bad variant '" + item + "', want s:on|off");
    AblationVariant v;
    try {
      v.unroll_terms = std::stoul(item.substr(0, colon));
    } catch (const std::exception&) {
      throw UsageError("bad variant '" + item + "'");
    }
    const auto flag = item.substr(colon + 1);
    if (flag != "on" && flag != "off") throw UsageError("bad variant '" + item + "'");
    v.length_prediction = flag == "on";
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("no ablation variants");
  return out;
}

inline int cmd_ablate(const RunConfig& cfg, std::ostream& out) {
  if (cfg.data.task == "none") throw UsageError("ablate: set data.task");
  const auto variants = parse_variants(cfg.eval.variants);
  AblationSetup setup;
  setup.task = detail::task_from(cfg.data);
  setup.model = cfg.model;
  setup.model.vocab_size = setup.task.v_task + 2;
  setup.train = cfg.train;
  setup.sampler = cfg.sampler;
  setup.train_pairs = cfg.data.train_pairs;
  setup.eval_pairs = cfg.data.eval_pairs;
  setup.data_seed = cfg.seed;
  const auto rows = ablation_report(setup, variants);
  out << format_ablation_table(rows);
  std::ofstream file;
  if (!cfg.paths.out.empty()) detail::open_or(file, cfg.paths.out, out) << format_ablation_records(rows);
  else out << format_ablation_records(rows);
  return 0;
}

/// Entry point: 0 success, 1 usage/config error, 2 runtime or numeric error.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Invocation inv;
  try {
    if (!args.empty() && (args[0] == "--help" || args[0] == "-h")) {
      out << kUsage;
      return 0;
    }
    inv = parse_args(args);
    if (inv.dump) {
      out << dump_config(inv.cfg);
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n\n" << kUsage;
    return 1;
  }
  try {
    const auto& c = inv.cfg;
    if (inv.command == "train") return cmd_train(c, out);
    if (inv.command == "sample") return cmd_sample(c, out);
    if (inv.command == "translate") return cmd_translate(c, out);
    if (inv.command == "inpaint") return cmd_inpaint(c, out);
    if (inv.command == "eval") return cmd_eval(c, out);
    if (inv.command == "bench") return cmd_bench(c, out);
    return cmd_ablate(c, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << kUsage;
    return 1;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace sundae::cli
