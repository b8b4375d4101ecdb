#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "sundae/errors.hpp"
#include "sundae/rng.hpp"

namespace sundae {

using TokenId = std::int32_t;

/// Fixed-length token array. Data sequences hold content followed by PAD.
using TokenSeq = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;

/// Length of the non-PAD prefix.
inline std::size_t content_length(std::span<const TokenId> seq) {
  auto it = std::find(seq.begin(), seq.end(), kPad);
  return static_cast<std::size_t>(it - seq.begin());
}

/// True when no PAD appears before content_length and only PAD after it.
inline bool is_well_formed(std::span<const TokenId> seq) {
  const std::size_t n = content_length(seq);
  return std::all_of(seq.begin() + static_cast<std::ptrdiff_t>(n), seq.end(),
                     [](TokenId t) { return t == kPad; });
}

/// Content tokens cropped to `n` and PAD-filled up to `n`.
inline TokenSeq pad_to(std::span<const TokenId> content, std::size_t n) {
  TokenSeq out(n, kPad);
  std::copy_n(content.begin(), std::min(n, content.size()), out.begin());
  return out;
}

enum class VocabKind { Char, Word };

inline std::string to_string(VocabKind k) { return k == VocabKind::Char ? "char" : "word"; }

inline VocabKind parse_vocab_kind(std::string_view s) {
  if (s == "char") return VocabKind::Char;
  if (s == "word") return VocabKind::Word;
  throw ArgumentError("unknown tokenizer kind: " + std::string(s));
}

/// Splits UTF-8 text into code points.
inline std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < text.size();) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (lead >= 0xF0) len = 4;
    else if (lead >= 0xE0) len = 3;
    else if (lead >= 0xC0) len = 2;
    len = std::min(len, text.size() - i);
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

/// Token string <-> id bijection with PAD=0 and UNK=1 reserved.
class Vocab {
 public:
  static constexpr const char* kPadToken = "<pad>";
  static constexpr const char* kUnkToken = "<unk>";

  explicit Vocab(VocabKind kind = VocabKind::Char) : kind_(kind) {
    push(kPadToken);
    push(kUnkToken);
  }

  /// Tokens listed in id order; the first two must be `<pad>` and `<unk>`.
  static Vocab from_tokens(const std::vector<std::string>& tokens, VocabKind kind) {
    if (tokens.size() < 2 || tokens[0] != kPadToken || tokens[1] != kUnkToken)
      throw FormatError("vocab: ids 0 and 1 must be <pad> and <unk>");
    Vocab v(kind);
    for (std::size_t i = 2; i < tokens.size(); ++i) {
      if (v.index_.count(tokens[i]))
        throw FormatError("vocab: duplicate token '" + tokens[i] + "'");
      v.push(tokens[i]);
    }
    return v;
  }

  /// Vocabulary of all symbols seen in `lines`, in first-seen order.
  static Vocab build(std::span<const std::string> lines, VocabKind kind) {
    Vocab v(kind);
    for (const auto& line : lines)
      for (const auto& tok : v.split(line))
        if (!v.index_.count(tok)) v.push(tok);
    return v;
  }

  static Vocab load(const std::string& path, VocabKind kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("vocab: cannot open " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    return from_tokens(tokens, kind);
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("vocab: cannot write " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  VocabKind kind() const { return kind_; }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw ArgumentError("vocab: id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::vector<std::string> split(std::string_view text) const {
    return kind_ == VocabKind::Char ? utf8_chars(text) : split_whitespace(text);
  }

 private:
  void push(const std::string& t) {
    index_.emplace(t, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(t);
  }

  VocabKind kind_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Unpadded token ids of `text`; unknown symbols map to UNK.
inline std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids;
  for (const auto& t : vocab.split(text)) ids.push_back(vocab.id(t));
  return ids;
}

/// Tokens cropped to n and PAD-filled.
inline TokenSeq encode(std::string_view text, const Vocab& vocab, std::size_t n) {
  if (n < 1) throw ArgumentError("encode: N must be >= 1");
  if (vocab.size() <= 2) throw ArgumentError("encode: empty vocabulary");
  return pad_to(tokenize(text, vocab), n);
}

/// Text of the content prefix (up to the first PAD).
inline std::string decode(std::span<const TokenId> seq, const Vocab& vocab) {
  std::string out;
  const std::size_t n = content_length(seq);
  for (std::size_t i = 0; i < n; ++i) {
    if (vocab.kind() == VocabKind::Word && i) out += ' ';
    out += vocab.token(seq[i]);
  }
  return out;
}

/// Every token, PAD included, joined by single spaces.
inline std::string token_strings(std::span<const TokenId> seq, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(seq[i]);
  }
  return out;
}

/// Non-empty lines of a UTF-8 text file.
inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

/// `batch_size` rows drawn uniformly with replacement from `corpus`.
/// Documents longer than n are cropped at a uniform offset; shorter ones are
/// PAD-filled.
inline std::vector<TokenSeq> make_batch(std::span<const std::vector<TokenId>> corpus,
                                        int batch_size, std::size_t n, Rng& rng) {
  if (batch_size <= 0) throw ArgumentError("make_batch: batch_size must be positive");
  if (corpus.empty()) throw ArgumentError("make_batch: empty corpus");
  std::vector<TokenSeq> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  for (int b = 0; b < batch_size; ++b) {
    const auto& doc = corpus[rng.uniform_int(corpus.size())];
    std::size_t offset = 0;
    if (doc.size() > n) offset = rng.uniform_int(doc.size() - n + 1);
    out.push_back(pad_to(std::span(doc).subspan(offset), n));
  }
  return out;
}

/// Source/target content without padding.
struct SeqPair {
  std::vector<TokenId> source;
  std::vector<TokenId> target;
};

struct PairBatch {
  std::vector<TokenSeq> sources;  // empty for unconditional batches
  std::vector<TokenSeq> targets;
  std::vector<std::size_t> target_lengths;

  std::size_t size() const { return targets.size(); }
  bool conditional() const { return !sources.empty(); }
};

inline PairBatch unconditional_batch(std::vector<TokenSeq> targets) {
  PairBatch b;
  for (const auto& t : targets) b.target_lengths.push_back(content_length(t));
  b.targets = std::move(targets);
  return b;
}

inline PairBatch make_pair_batch(std::span<const SeqPair> pairs, int batch_size,
                                 std::size_t n_source, std::size_t n, Rng& rng) {
  if (batch_size <= 0) throw ArgumentError("make_pair_batch: batch_size must be positive");
  if (pairs.empty()) throw ArgumentError("make_pair_batch: no pairs");
  PairBatch b;
  for (int i = 0; i < batch_size; ++i) {
    const auto& p = pairs[rng.uniform_int(pairs.size())];
    b.sources.push_back(pad_to(p.source, n_source));
    b.targets.push_back(pad_to(p.target, n));
    b.target_lengths.push_back(content_length(b.targets.back()));
  }
  return b;
}

enum class TaskKind { Copy, ReverseCipher };

inline std::string to_string(TaskKind k) { return k == TaskKind::Copy ? "copy" : "reverse_cipher"; }

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "copy") return TaskKind::Copy;
  if (s == "reverse_cipher") return TaskKind::ReverseCipher;
  throw ArgumentError("unknown task kind: " + std::string(s));
}

/// Deterministic sequence-to-sequence task over ids [2, 2 + v_task).
struct SynthTask {
  TaskKind kind = TaskKind::Copy;
  std::size_t min_len = 1;
  std::size_t max_len = 8;
  std::size_t v_task = 8;
  /// Seeds the substitution cipher, shared by training and held-out data.
  std::uint64_t cipher_seed = 7;
  /// Forces the identity substitution (pure reversal).
  bool identity_cipher = false;

  void validate(std::size_t v, std::size_t n) const {
    if (v_task < 1 || v_task + 2 > v)
      throw ArgumentError("synth task: v_task must be in [1, v-2]");
    if (min_len < 1 || min_len > max_len || max_len > n)
      throw ArgumentError("synth task: length range must lie within [1, N]");
  }

  /// Substitution table indexed by token id (identity outside task ids).
  std::vector<TokenId> cipher(std::size_t v) const {
    std::vector<TokenId> table(v);
    std::iota(table.begin(), table.end(), 0);
    if (identity_cipher) return table;
    Rng rng(cipher_seed);
    for (std::size_t i = v_task; i > 1; --i)
      std::swap(table[2 + i - 1], table[2 + rng.uniform_int(i)]);
    return table;
  }

  std::vector<TokenId> apply(std::span<const TokenId> source, std::size_t v) const {
    std::vector<TokenId> target(source.begin(), source.end());
    if (kind == TaskKind::ReverseCipher) {
      const auto table = cipher(v);
      std::reverse(target.begin(), target.end());
      for (auto& t : target) t = table[static_cast<std::size_t>(t)];
    }
    return target;
  }
};

/// `count` pairs with source lengths uniform in [min_len, max_len].
inline std::vector<SeqPair> synth_task_gen(std::uint64_t seed, std::size_t count,
                                           const SynthTask& task, std::size_t v,
                                           std::size_t n) {
  task.validate(v, n);
  Rng rng(seed);
  std::vector<SeqPair> out;
  out.reserve(count);
  const auto table = task.cipher(v);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t len = task.min_len + rng.uniform_int(task.max_len - task.min_len + 1);
    SeqPair p;
    for (std::size_t k = 0; k < len; ++k)
      p.source.push_back(static_cast<TokenId>(2 + rng.uniform_int(task.v_task)));
    p.target = p.source;
    if (task.kind == TaskKind::ReverseCipher) {
      std::reverse(p.target.begin(), p.target.end());
      for (auto& t : p.target) t = table[static_cast<std::size_t>(t)];
    }
    out.push_back(std::move(p));
  }
  return out;
}

/// Pairs from `seed` whose source does not occur in `exclude`.
inline std::vector<SeqPair> held_out_pairs(std::uint64_t seed, std::size_t count,
                                           const SynthTask& task, std::size_t v,
                                           std::size_t n, std::span<const SeqPair> exclude) {
  std::unordered_set<std::string> seen;
  auto key = [](const std::vector<TokenId>& s) {
    return std::string(reinterpret_cast<const char*>(s.data()), s.size() * sizeof(TokenId));
  };
  for (const auto& p : exclude) seen.insert(key(p.source));
  std::vector<SeqPair> out;
  std::uint64_t round = 0;
  while (out.size() < count) {
    for (auto& p : synth_task_gen(Rng(seed).fork(round++).next_u64(), count, task, v, n)) {
      if (out.size() == count) break;
      if (seen.insert(key(p.source)).second) out.push_back(std::move(p));
    }
    if (round > 1000) throw ArgumentError("held_out_pairs: task space exhausted");
  }
  return out;
}

/// Sentences from a small fixed grammar, used as a toy language-model corpus.
inline std::vector<std::string> toy_text_corpus(std::uint64_t seed, std::size_t count) {
  static const std::vector<std::string> dets = {"the", "a", "my", "one"};
  static const std::vector<std::string> adjs = {"red", "big", "old", "shy", "wet"};
  static const std::vector<std::string> nouns = {"cat", "dog", "fox", "owl", "hen", "pig"};
  static const std::vector<std::string> verbs = {"sees", "hugs", "eats", "likes"};
  Rng rng(seed);
  auto pick = [&](const std::vector<std::string>& w) -> const std::string& {
    return w[rng.uniform_int(w.size())];
  };
  std::vector<std::string> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::string s = pick(dets) + " " + pick(adjs) + " " + pick(nouns) + " " + pick(verbs) +
                    " " + pick(dets) + " " + pick(nouns);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace sundae
