#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sundae/autodiff.hpp"
#include "sundae/data.hpp"
#include "sundae/errors.hpp"
#include "sundae/numerics.hpp"
#include "sundae/rng.hpp"
#include "sundae/tensor.hpp"

namespace sundae {

enum class ModelMode { Unconditional, EncoderDecoder };

inline std::string to_string(ModelMode m) {
  return m == ModelMode::Unconditional ? "unconditional" : "encoder_decoder";
}

inline ModelMode parse_model_mode(std::string_view s) {
  if (s == "unconditional") return ModelMode::Unconditional;
  if (s == "encoder_decoder") return ModelMode::EncoderDecoder;
  throw ArgumentError("unknown model mode: " + std::string(s));
}

struct ModelConfig {
  std::size_t vocab_size = 16;  // v
  std::size_t seq_len = 16;     // N, decoder length
  std::size_t layers = 2;       // per stack
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t d_ff = 256;
  double dropout = 0.1;
  ModelMode mode = ModelMode::Unconditional;
  std::size_t source_len = 16;  // N_source
  std::size_t d_lp = 128;       // length predictor width
  std::size_t lp_blocks = 6;
  std::size_t length_downsample = 2;
  /// Predict the target length and prepend its embedding to the memory.
  bool length_prediction = true;

  bool conditional() const { return mode == ModelMode::EncoderDecoder; }
  bool uses_length() const { return conditional() && length_prediction; }

  /// Downsampled length classes N_d = ceil(N / downsample).
  std::size_t downsampled_len() const {
    return (seq_len + length_downsample - 1) / length_downsample;
  }
  /// Labels 0..N_d, where 0 is the empty target.
  std::size_t length_classes() const { return downsampled_len() + 1; }

  void validate() const {
    auto positive = [](std::size_t x, const char* name) {
      if (x < 1) throw ArgumentError(std::string("model config: ") + name + " must be >= 1");
    };
    positive(vocab_size, "vocab_size");
    positive(seq_len, "seq_len");
    positive(layers, "layers");
    positive(d_model, "d_model");
    positive(heads, "heads");
    positive(d_ff, "d_ff");
    positive(source_len, "source_len");
    positive(d_lp, "d_lp");
    positive(length_downsample, "length_downsample");
    if (vocab_size < 3) throw ArgumentError("model config: vocab_size must exceed the reserved ids");
    if (d_model % heads != 0)
      throw ArgumentError("model config: d_model must be divisible by heads");
    if (!(dropout >= 0.0 && dropout < 1.0))
      throw ArgumentError("model config: dropout must be in [0,1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Downsampled training label ceil(len / downsample).
inline std::size_t length_label(std::size_t target_len, std::size_t downsample) {
  if (downsample < 1) throw ArgumentError("length_label: downsample must be >= 1");
  return (target_len + downsample - 1) / downsample;
}

enum class InitKind { Uniform, Zero, One };

struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind init;
  std::size_t fan_in;
};

/// Parameter names, shapes and initializers in ParamSet order.
inline std::vector<ParamSpec> param_layout(const ModelConfig& c) {
  c.validate();
  std::vector<ParamSpec> out;
  const std::size_t d = c.d_model;
  auto lin = [&](const std::string& p, std::size_t in, std::size_t outd, bool zero = false) {
    out.push_back({p + ".w", {in, outd}, zero ? InitKind::Zero : InitKind::Uniform, in});
    out.push_back({p + ".b", {outd}, InitKind::Zero, in});
  };
  auto ln = [&](const std::string& p) {
    out.push_back({p + ".g", {d}, InitKind::One, d});
    out.push_back({p + ".b", {d}, InitKind::Zero, d});
  };
  auto attn = [&](const std::string& p) {
    for (const char* m : {".q", ".k", ".v", ".o"}) lin(p + m, d, d);
  };
  auto stack = [&](const std::string& p, std::size_t len, bool cross) {
    out.push_back({p + ".tok_emb", {c.vocab_size, d}, InitKind::Uniform, 1});
    out.push_back({p + ".pos_emb", {len, d}, InitKind::Uniform, 1});
    for (std::size_t l = 0; l < c.layers; ++l) {
      const std::string b = p + ".layer" + std::to_string(l);
      ln(b + ".ln_self");
      attn(b + ".self");
      if (cross) {
        ln(b + ".ln_cross");
        attn(b + ".cross");
      }
      ln(b + ".ln_ffn");
      lin(b + ".ffn1", d, c.d_ff);
      lin(b + ".ffn2", c.d_ff, d);
    }
    ln(p + ".ln_final");
  };
  stack("dec", c.seq_len, c.conditional());
  lin("dec.out", d, c.vocab_size, /*zero=*/true);
  if (c.conditional()) {
    stack("enc", c.source_len, false);
    if (c.length_prediction) {
      lin("len.proj", d, c.d_lp);
      out.push_back({"len.src_len_emb", {c.source_len, c.d_lp}, InitKind::Uniform, 1});
      for (std::size_t i = 0; i < c.lp_blocks; ++i) {
        const std::string b = "len.block" + std::to_string(i);
        lin(b + ".fc1", c.d_lp, c.d_lp);
        lin(b + ".fc2", c.d_lp, c.d_lp);
      }
      lin("len.out", c.d_lp, c.length_classes(), /*zero=*/true);
      out.push_back({"len.tgt_len_emb", {c.length_classes(), d}, InitKind::Uniform, 1});
    }
  }
  return out;
}

/// Cross-attention memory for a batch: [batch * len, d] with a key mask.
template <class T>
struct Memory {
  Var<T> states;
  std::vector<std::uint8_t> mask;
  std::size_t batch = 0;
};

/// Per-source conditioning prepared once and reused across chain steps.
template <class T>
struct SourceContext {
  Tensor<T> memory;                 // [len, d]
  std::vector<std::uint8_t> mask;   // [len]
  std::size_t length_class = 0;     // argmax of the length distribution
  std::vector<double> length_probs;
};

/// The denoiser f_theta: a transformer without causal masking producing one
/// logit row per position, plus source encoder and length predictor in
/// encoder-decoder mode.
///
/// Copies are deep.
template <class T>
class DenoiserModel {
 public:
  DenoiserModel(ModelConfig cfg, ParamSet<T> params)
      : cfg_(std::move(cfg)), params_(std::move(params)) {
    const auto layout = param_layout(cfg_);
    if (layout.size() != params_.size())
      throw ArgumentError("model: parameter count does not match config");
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (params_[i].name != layout[i].name || params_[i].tensor->shape() != layout[i].shape)
        throw ArgumentError("model: parameter " + layout[i].name + " missing or misshaped");
    }
    bind();
  }

  DenoiserModel(const DenoiserModel& o) : cfg_(o.cfg_), params_(o.params_.clone()) { bind(); }
  DenoiserModel& operator=(const DenoiserModel& o) {
    if (this != &o) {
      cfg_ = o.cfg_;
      params_ = o.params_.clone();
      bind();
    }
    return *this;
  }
  DenoiserModel(DenoiserModel&&) noexcept = default;
  DenoiserModel& operator=(DenoiserModel&&) noexcept = default;

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero output heads.
  static DenoiserModel init(const ModelConfig& cfg, Rng& rng) {
    ParamSet<T> ps;
    for (const auto& spec : param_layout(cfg)) {
      Tensor<T> t(spec.shape);
      if (spec.init == InitKind::One) {
        std::fill(t.values().begin(), t.values().end(), T(1));
      } else if (spec.init == InitKind::Uniform) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
        for (auto& x : t.values()) x = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
      }
      ps.add(spec.name, std::move(t));
    }
    return DenoiserModel(cfg, std::move(ps));
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamSet<T>& params() const { return params_; }
  ParamSet<T>& params() { return params_; }

  template <class U>
  DenoiserModel<U> cast() const {
    return DenoiserModel<U>(cfg_, params_.template cast<U>());
  }

  /// Source encodings [batch * N_source, d].
  Var<T> encode(Graph<T>& g, std::span<const TokenSeq> sources, bool train, Rng* rng) const {
    require_conditional("encode");
    for (const auto& s : sources)
      if (s.size() != cfg_.source_len) throw ArgumentError("encode: source length mismatch");
    auto mask = source_mask(sources);
    return run_stack(g, enc_, sources, nullptr, &mask, train, rng, false);
  }

  /// Length-class logits [batch, classes]. Encodings are detached so the
  /// length loss never reaches the encoder.
  Var<T> length_logits(Graph<T>& g, const Var<T>& encodings,
                       std::span<const TokenSeq> sources) const {
    require_length("length_logits");
    const std::size_t batch = sources.size();
    auto mask = source_mask(sources);
    std::vector<std::int32_t> lens;
    for (const auto& s : sources) {
      const std::size_t n = content_length(s);
      if (n < 1 || n > cfg_.source_len)
        throw ArgumentError("predict_length: source length out of range");
      lens.push_back(static_cast<std::int32_t>(n - 1));
    }
    auto pooled = ops::masked_mean_rows(g, ops::detach(encodings), batch, mask);
    auto h = ops::linear(g, pooled, len_proj_.w, len_proj_.b);
    h = ops::add(g, h, ops::embedding(g, len_src_emb_, std::move(lens)));
    for (const auto& blk : len_blocks_) {
      auto r = ops::linear(g, ops::gelu(g, ops::linear(g, h, blk.fc1.w, blk.fc1.b)),
                           blk.fc2.w, blk.fc2.b);
      h = ops::add(g, h, r);
    }
    return ops::linear(g, h, len_out_.w, len_out_.b);
  }

  /// Rows of the target-length embedding table [batch, d].
  Var<T> length_embeddings(Graph<T>& g, std::span<const std::size_t> classes) const {
    require_length("length_embedding");
    std::vector<std::int32_t> ids;
    for (auto c : classes) {
      if (c >= cfg_.length_classes()) throw ArgumentError("length_embedding: class out of range");
      ids.push_back(static_cast<std::int32_t>(c));
    }
    return ops::embedding(g, len_tgt_emb_, std::move(ids));
  }

  /// Decoder memory: [length embedding; encodings] when length prediction is
  /// on, the encodings alone otherwise.
  Memory<T> memory(Graph<T>& g, const Var<T>& encodings, const Var<T>& length_emb,
                   std::span<const TokenSeq> sources) const {
    Memory<T> m;
    m.batch = sources.size();
    auto smask = source_mask(sources);
    if (cfg_.length_prediction) {
      m.states = ops::prepend_rows(g, length_emb, encodings, m.batch);
      for (std::size_t b = 0; b < m.batch; ++b) {
        m.mask.push_back(1);
        m.mask.insert(m.mask.end(), smask.begin() + static_cast<std::ptrdiff_t>(b * cfg_.source_len),
                      smask.begin() + static_cast<std::ptrdiff_t>((b + 1) * cfg_.source_len));
      }
    } else {
      m.states = encodings;
      m.mask = std::move(smask);
    }
    return m;
  }

  /// Logits [batch * L, v] for inputs of equal length L <= N.
  Var<T> decode(Graph<T>& g, std::span<const TokenSeq> xs, const Memory<T>* mem, bool train,
                Rng* rng, bool causal = false) const {
    if (xs.empty()) throw ArgumentError("decode: empty batch");
    const std::size_t len = xs[0].size();
    for (const auto& x : xs) {
      if (x.size() != len || len == 0 || len > cfg_.seq_len)
        throw ArgumentError("decode: input length does not match the model");
      for (auto t : x)
        if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab_size)
          throw ArgumentError("decode: token id out of range");
    }
    if (cfg_.conditional() && !mem)
      throw ArgumentError("decode: encoder-decoder model needs conditioning");
    if (mem && mem->batch != xs.size())
      throw ArgumentError("decode: conditioning batch mismatch");
    auto h = run_stack(g, dec_, xs, cfg_.conditional() ? mem : nullptr, nullptr, train, rng,
                       causal);
    return ops::linear(g, h, dec_out_.w, dec_out_.b);
  }

  /// Encodes one source, predicts its length class and builds its memory.
  SourceContext<T> prepare(const TokenSeq& source) const {
    require_conditional("prepare");
    Graph<T> g(false);
    std::vector<TokenSeq> srcs{source};
    auto enc = encode(g, srcs, false, nullptr);
    SourceContext<T> ctx;
    Var<T> len_emb;
    if (cfg_.length_prediction) {
      auto logits = length_logits(g, enc, srcs);
      ctx.length_probs.resize(cfg_.length_classes());
      softmax_row<T>(logits->row(0), 1.0, ctx.length_probs);
      ctx.length_class = static_cast<std::size_t>(
          std::max_element(ctx.length_probs.begin(), ctx.length_probs.end()) -
          ctx.length_probs.begin());
      std::vector<std::size_t> cls{ctx.length_class};
      len_emb = length_embeddings(g, cls);
    }
    auto mem = memory(g, enc, len_emb, srcs);
    ctx.memory = mem.states->detached_copy();
    ctx.mask = mem.mask;
    return ctx;
  }

  /// Stacks per-example contexts into a constant batch memory.
  static Memory<T> stack(std::span<const SourceContext<T>* const> ctxs) {
    Memory<T> m;
    m.batch = ctxs.size();
    if (ctxs.empty()) return m;
    const std::size_t rows = ctxs[0]->memory.rows(), d = ctxs[0]->memory.cols();
    Tensor<T> states({m.batch * rows, d});
    for (std::size_t b = 0; b < m.batch; ++b) {
      std::copy(ctxs[b]->memory.values().begin(), ctxs[b]->memory.values().end(),
                states.data() + b * rows * d);
      m.mask.insert(m.mask.end(), ctxs[b]->mask.begin(), ctxs[b]->mask.end());
    }
    m.states = ops::constant(std::move(states));
    return m;
  }

 private:
  struct Lin {
    Var<T> w, b;
  };
  struct Norm {
    Var<T> g, b;
  };
  struct Attn {
    Lin q, k, v, o;
  };
  struct Layer {
    Norm ln_self;
    Attn self;
    bool has_cross = false;
    Norm ln_cross;
    Attn cross;
    Norm ln_ffn;
    Lin ffn1, ffn2;
  };
  struct Stack {
    Var<T> tok_emb, pos_emb;
    std::vector<Layer> layers;
    Norm ln_final;
  };
  struct Block {
    Lin fc1, fc2;
  };

  void require_conditional(const char* what) const {
    if (!cfg_.conditional())
      throw UnsupportedModeError(std::string(what) + ": requires encoder_decoder mode");
  }
  void require_length(const char* what) const {
    require_conditional(what);
    if (!cfg_.length_prediction)
      throw UnsupportedModeError(std::string(what) + ": length prediction is disabled");
  }

  Lin lin(const std::string& p) const { return {params_.get(p + ".w"), params_.get(p + ".b")}; }
  Norm norm(const std::string& p) const { return {params_.get(p + ".g"), params_.get(p + ".b")}; }
  Attn attn(const std::string& p) const {
    return {lin(p + ".q"), lin(p + ".k"), lin(p + ".v"), lin(p + ".o")};
  }
  Stack stack_params(const std::string& p, bool cross) const {
    Stack s;
    s.tok_emb = params_.get(p + ".tok_emb");
    s.pos_emb = params_.get(p + ".pos_emb");
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string b = p + ".layer" + std::to_string(l);
      Layer layer;
      layer.ln_self = norm(b + ".ln_self");
      layer.self = attn(b + ".self");
      layer.has_cross = cross;
      if (cross) {
        layer.ln_cross = norm(b + ".ln_cross");
        layer.cross = attn(b + ".cross");
      }
      layer.ln_ffn = norm(b + ".ln_ffn");
      layer.ffn1 = lin(b + ".ffn1");
      layer.ffn2 = lin(b + ".ffn2");
      s.layers.push_back(std::move(layer));
    }
    s.ln_final = norm(p + ".ln_final");
    return s;
  }

  void bind() {
    dec_ = stack_params("dec", cfg_.conditional());
    dec_out_ = lin("dec.out");
    if (cfg_.conditional()) {
      enc_ = stack_params("enc", false);
      if (cfg_.length_prediction) {
        len_proj_ = lin("len.proj");
        len_src_emb_ = params_.get("len.src_len_emb");
        len_blocks_.clear();
        for (std::size_t i = 0; i < cfg_.lp_blocks; ++i) {
          const std::string b = "len.block" + std::to_string(i);
          len_blocks_.push_back({lin(b + ".fc1"), lin(b + ".fc2")});
        }
        len_out_ = lin("len.out");
        len_tgt_emb_ = params_.get("len.tgt_len_emb");
      }
    }
  }

  std::vector<std::uint8_t> source_mask(std::span<const TokenSeq> sources) const {
    std::vector<std::uint8_t> mask;
    mask.reserve(sources.size() * cfg_.source_len);
    for (const auto& s : sources) {
      const std::size_t n = content_length(s);
      for (std::size_t i = 0; i < s.size(); ++i) mask.push_back(i < n ? 1 : 0);
    }
    return mask;
  }

  Var<T> maybe_dropout(Graph<T>& g, const Var<T>& x, bool train, Rng* rng) const {
    if (!train || cfg_.dropout <= 0.0) return x;
    if (!rng) throw ArgumentError("dropout needs an rng in train mode");
    return ops::dropout(g, x, cfg_.dropout, *rng);
  }

  Var<T> self_or_cross(Graph<T>& g, const Attn& a, const Var<T>& x, const Var<T>& kv,
                       std::size_t batch, const std::vector<std::uint8_t>& mask,
                       bool causal) const {
    auto q = ops::linear(g, x, a.q.w, a.q.b);
    auto k = ops::linear(g, kv, a.k.w, a.k.b);
    auto v = ops::linear(g, kv, a.v.w, a.v.b);
    auto y = ops::attention(g, q, k, v, batch, cfg_.heads, mask, causal);
    return ops::linear(g, y, a.o.w, a.o.b);
  }

  /// Pre-norm transformer stack; returns final-normalized states.
  Var<T> run_stack(Graph<T>& g, const Stack& s, std::span<const TokenSeq> xs,
                   const Memory<T>* mem, const std::vector<std::uint8_t>* self_mask,
                   bool train, Rng* rng, bool causal) const {
    const std::size_t batch = xs.size(), len = xs[0].size();
    std::vector<std::int32_t> ids, pos;
    ids.reserve(batch * len);
    pos.reserve(batch * len);
    for (const auto& x : xs)
      for (std::size_t i = 0; i < len; ++i) {
        ids.push_back(x[i]);
        pos.push_back(static_cast<std::int32_t>(i));
      }
    auto h = ops::add(g, ops::embedding(g, s.tok_emb, std::move(ids)),
                      ops::embedding(g, s.pos_emb, std::move(pos)));
    h = maybe_dropout(g, h, train, rng);
    static const std::vector<std::uint8_t> kNoMask;
    for (const auto& layer : s.layers) {
      auto a = ops::layer_norm(g, h, layer.ln_self.g, layer.ln_self.b);
      auto sa = self_or_cross(g, layer.self, a, a, batch, self_mask ? *self_mask : kNoMask,
                              causal);
      h = ops::add(g, h, maybe_dropout(g, sa, train, rng));
      if (layer.has_cross && mem) {
        auto c = ops::layer_norm(g, h, layer.ln_cross.g, layer.ln_cross.b);
        auto ca = self_or_cross(g, layer.cross, c, mem->states, batch, mem->mask, false);
        h = ops::add(g, h, maybe_dropout(g, ca, train, rng));
      }
      auto f = ops::layer_norm(g, h, layer.ln_ffn.g, layer.ln_ffn.b);
      f = ops::linear(g, ops::gelu(g, ops::linear(g, f, layer.ffn1.w, layer.ffn1.b)),
                      layer.ffn2.w, layer.ffn2.b);
      h = ops::add(g, h, maybe_dropout(g, f, train, rng));
    }
    return ops::layer_norm(g, h, s.ln_final.g, s.ln_final.b);
  }

  ModelConfig cfg_;
  ParamSet<T> params_;
  Stack dec_, enc_;
  Lin dec_out_;
  Lin len_proj_, len_out_;
  Var<T> len_src_emb_, len_tgt_emb_;
  std::vector<Block> len_blocks_;
};

/// Distribution over downsampled target-length classes.
struct LengthPrediction {
  std::vector<double> probs;
  std::size_t predicted_class = 0;
};

/// Logits [N, v] for one input sequence.
template <class T>
Tensor<T> denoise_logits(const DenoiserModel<T>& model, const TokenSeq& x,
                         const SourceContext<T>* cond = nullptr, bool train_mode = false,
                         Rng* rng = nullptr) {
  if (x.size() != model.config().seq_len)
    throw ArgumentError("denoise_logits: input length does not match N");
  Graph<T> g(false);
  std::vector<TokenSeq> xs{x};
  std::optional<Memory<T>> mem;
  if (cond) {
    const SourceContext<T>* ctxs[] = {cond};
    mem = DenoiserModel<T>::stack(ctxs);
  }
  auto logits = model.decode(g, xs, mem ? &*mem : nullptr, train_mode, rng);
  return logits->detached_copy();
}

/// Encoder output [N_source, d] for one source.
template <class T>
Tensor<T> encode_source(const DenoiserModel<T>& model, const TokenSeq& source) {
  Graph<T> g(false);
  std::vector<TokenSeq> srcs{source};
  return model.encode(g, srcs, false, nullptr)->detached_copy();
}

/// Length distribution from encodings of a source with `source_len` tokens.
template <class T>
LengthPrediction predict_length(const DenoiserModel<T>& model, const Tensor<T>& encodings,
                                std::size_t source_len) {
  const auto& c = model.config();
  if (source_len < 1 || source_len > c.source_len)
    throw ArgumentError("predict_length: source length out of range");
  if (encodings.rows() != c.source_len || encodings.cols() != c.d_model)
    throw ArgumentError("predict_length: encodings shape mismatch");
  // Only the content length matters for pooling and the length embedding.
  std::vector<TokenSeq> srcs{pad_to(std::vector<TokenId>(source_len, kUnk), c.source_len)};
  Graph<T> g(false);
  auto logits = model.length_logits(g, make_var<T>(encodings.detached_copy()), srcs);
  LengthPrediction out;
  out.probs.resize(c.length_classes());
  softmax_row<T>(logits->row(0), 1.0, out.probs);
  out.predicted_class = static_cast<std::size_t>(
      std::max_element(out.probs.begin(), out.probs.end()) - out.probs.begin());
  return out;
}

/// Embedding row for a downsampled length class, shape [d].
template <class T>
Tensor<T> length_embedding(const DenoiserModel<T>& model, std::size_t length_class) {
  Graph<T> g(false);
  std::vector<std::size_t> cls{length_class};
  auto e = model.length_embeddings(g, cls);
  return Tensor<T>({model.config().d_model}, e->storage());
}

}  // namespace sundae
