#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sundae/data.hpp"
#include "sundae/errors.hpp"
#include "sundae/model.hpp"
#include "sundae/tensor.hpp"
#include "sundae/training.hpp"

namespace sundae {

inline constexpr char kCheckpointMagic[4] = {'S', 'N', 'D', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"seq_len", c.seq_len},
          {"layers", c.layers},
          {"d_model", c.d_model},
          {"heads", c.heads},
          {"d_ff", c.d_ff},
          {"dropout", c.dropout},
          {"mode", to_string(c.mode)},
          {"source_len", c.source_len},
          {"d_lp", c.d_lp},
          {"lp_blocks", c.lp_blocks},
          {"length_downsample", c.length_downsample},
          {"length_prediction", c.length_prediction}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.seq_len = j.at("seq_len").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.mode = parse_model_mode(j.at("mode").get<std::string>());
  c.source_len = j.at("source_len").get<std::size_t>();
  c.d_lp = j.at("d_lp").get<std::size_t>();
  c.lp_blocks = j.at("lp_blocks").get<std::size_t>();
  c.length_downsample = j.at("length_downsample").get<std::size_t>();
  c.length_prediction = j.at("length_prediction").get<bool>();
  c.validate();
  return c;
}

/// Everything a checkpoint carries beyond the model parameters.
struct Checkpoint {
  DenoiserModel<float> model;
  std::size_t step = 0;
  std::uint64_t seed = 0;
  std::optional<Vocab> vocab;
  /// Free-form JSON stored alongside, e.g. the task definition.
  nlohmann::json extra = nlohmann::json::object();
  /// AdamW moments, one vector per parameter; empty when not saved.
  std::vector<std::vector<float>> adam_m, adam_v;
  std::vector<ParamSet<float>> snapshots;

  /// Averaged snapshots when present, else the stored parameters.
  DenoiserModel<float> eval_model() const {
    if (snapshots.empty()) return model;
    return DenoiserModel<float>(model.config(), average_checkpoints<float>(snapshots));
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

inline void put_record(std::string& out, const std::string& name, const Shape& shape,
                       std::span<const float> values) {
  put_u64(out, name.size());
  out += name;
  put_u64(out, shape.size());
  for (auto d : shape) put_u64(out, d);
  for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  void need(std::size_t n, const std::string& what) const {
    if (data_.size() - pos_ < n) throw FormatError("checkpoint: truncated " + what);
  }
  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i)
      x |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return x;
  }
  std::uint64_t u64(const std::string& what) {
    need(8, what);
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i)
      x |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return x;
  }
  std::string bytes(std::uint64_t n, const std::string& what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

  /// Reads one record and checks it against the expected name and shape.
  std::vector<float> record(const std::string& name, const Shape& shape) {
    const std::string where = "record '" + name + "'";
    const auto len = u64(where);
    if (len > 4096) throw FormatError("checkpoint: bad name length in " + where);
    const auto got = bytes(len, where);
    if (got != name)
      throw FormatError("checkpoint: expected " + where + ", found '" + got + "'");
    const auto rank = u64(where);
    if (rank != shape.size()) throw FormatError("checkpoint: rank mismatch in " + where);
    for (auto d : shape)
      if (u64(where) != d) throw FormatError("checkpoint: shape mismatch in " + where);
    const std::size_t n = shape_size(shape);
    need(4 * n, where);
    std::vector<float> values(n);
    for (auto& v : values) v = std::bit_cast<float>(u32(where));
    return values;
  }

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Serializes to the SNDA byte format. Identical inputs give identical bytes.
inline std::string serialize_checkpoint(const Checkpoint& ck) {
  const auto& params = ck.model.params();
  const bool with_opt = !ck.adam_m.empty();
  nlohmann::json meta;
  meta["model"] = model_config_json(ck.model.config());
  meta["step"] = ck.step;
  meta["seed"] = ck.seed;
  meta["optimizer"] = with_opt;
  meta["snapshots"] = ck.snapshots.size();
  meta["extra"] = ck.extra;
  if (ck.vocab) {
    meta["vocab"] = {{"kind", to_string(ck.vocab->kind())}, {"tokens", ck.vocab->tokens()}};
  } else {
    meta["vocab"] = nullptr;
  }
  const std::string js = meta.dump();
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, js.size());
  out += js;
  for (const auto& e : params) detail::put_record(out, e.name, e.tensor->shape(), e.tensor->values());
  if (with_opt) {
    for (std::size_t p = 0; p < params.size(); ++p)
      detail::put_record(out, "opt.m." + params[p].name, params[p].tensor->shape(), ck.adam_m[p]);
    for (std::size_t p = 0; p < params.size(); ++p)
      detail::put_record(out, "opt.v." + params[p].name, params[p].tensor->shape(), ck.adam_v[p]);
  }
  for (std::size_t s = 0; s < ck.snapshots.size(); ++s)
    for (const auto& e : ck.snapshots[s])
      detail::put_record(out, "snap" + std::to_string(s) + "." + e.name, e.tensor->shape(),
                         e.tensor->values());
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string data) {
  detail::Reader rd(std::move(data));
  if (rd.bytes(4, "magic") != std::string(kCheckpointMagic, 4))
    throw FormatError("checkpoint: bad magic");
  const auto version = rd.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto meta_len = rd.u64("metadata length");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(rd.bytes(meta_len, "metadata"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  ModelConfig mc;
  std::size_t step = 0, snaps = 0;
  std::uint64_t seed = 0;
  bool with_opt = false;
  std::optional<Vocab> vocab;
  nlohmann::json extra;
  try {
    mc = model_config_from_json(meta.at("model"));
    step = meta.at("step").get<std::size_t>();
    seed = meta.at("seed").get<std::uint64_t>();
    with_opt = meta.at("optimizer").get<bool>();
    snaps = meta.at("snapshots").get<std::size_t>();
    extra = meta.value("extra", nlohmann::json::object());
    if (!meta.at("vocab").is_null())
      vocab = Vocab::from_tokens(meta["vocab"].at("tokens").get<std::vector<std::string>>(),
                                 parse_vocab_kind(meta["vocab"].at("kind").get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad metadata: ") + e.what());
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  const auto layout = param_layout(mc);
  ParamSet<float> params;
  for (const auto& spec : layout)
    params.add(spec.name, Tensor<float>(spec.shape, rd.record(spec.name, spec.shape)));
  std::vector<std::vector<float>> m, v;
  if (with_opt) {
    for (const auto& spec : layout) m.push_back(rd.record("opt.m." + spec.name, spec.shape));
    for (const auto& spec : layout) v.push_back(rd.record("opt.v." + spec.name, spec.shape));
  }
  std::vector<ParamSet<float>> snapshots;
  for (std::size_t s = 0; s < snaps; ++s) {
    ParamSet<float> ps;
    for (const auto& spec : layout)
      ps.add(spec.name, Tensor<float>(spec.shape, rd.record("snap" + std::to_string(s) + "." +
                                                                  spec.name,
                                                              spec.shape)));
    snapshots.push_back(std::move(ps));
  }
  if (!rd.done()) throw FormatError("checkpoint: trailing bytes after last record");
  Checkpoint ck{DenoiserModel<float>(mc, std::move(params)), step, seed, std::move(vocab),
                std::move(extra), std::move(m), std::move(v), std::move(snapshots)};
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const auto bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("checkpoint: cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

/// Packs a training state (parameters, moments, snapshots) into a checkpoint.
inline Checkpoint checkpoint_from_state(const TrainState<float>& st, std::optional<Vocab> vocab,
                                        nlohmann::json extra = nlohmann::json::object()) {
  Checkpoint ck{st.model, st.step, st.cfg.seed, std::move(vocab), std::move(extra),
                st.m, st.v, {}};
  for (const auto& s : st.snapshots) ck.snapshots.push_back(s.clone());
  return ck;
}

}  // namespace sundae
