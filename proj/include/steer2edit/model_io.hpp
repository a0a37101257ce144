#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "steer2edit/model.hpp"

namespace s2e {

inline const char kWeightMagic[4] = {'S', '2', 'E', '1'};

inline std::string to_string(NormKind k) { return k == NormKind::rms ? "rms" : "layernorm"; }
inline std::string to_string(MlpKind k) { return k == MlpKind::gated_silu ? "gated_silu" : "gelu"; }
inline std::string to_string(PosKind k) { return k == PosKind::rotary ? "rotary" : "none"; }

inline NormKind norm_kind_from_string(const std::string& s) {
  if (s == "rms") return NormKind::rms;
  if (s == "layernorm") return NormKind::layernorm;
  throw std::runtime_error("unknown norm_kind: " + s);
}
inline MlpKind mlp_kind_from_string(const std::string& s) {
  if (s == "gated_silu") return MlpKind::gated_silu;
  if (s == "gelu") return MlpKind::gelu;
  throw std::runtime_error("unknown mlp_kind: " + s);
}
inline PosKind pos_kind_from_string(const std::string& s) {
  if (s == "rotary") return PosKind::rotary;
  if (s == "none") return PosKind::none;
  throw std::runtime_error("unknown pos_kind: " + s);
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"d_model", c.d_model},       {"n_layers", c.n_layers},
                        {"n_heads", c.n_heads},       {"d_head", c.d_head},
                        {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size},
                        {"max_seq_len", c.max_seq_len}, {"norm_kind", to_string(c.norm_kind)},
                        {"mlp_kind", to_string(c.mlp_kind)}, {"pos_kind", to_string(c.pos_kind)}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_head = j.at("d_head").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.norm_kind = norm_kind_from_string(j.at("norm_kind").get<std::string>());
  c.mlp_kind = mlp_kind_from_string(j.at("mlp_kind").get<std::string>());
  c.pos_kind = pos_kind_from_string(j.at("pos_kind").get<std::string>());
  c.validate();
  return c;
}

namespace detail {

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32_block(std::ostream& os, const std::vector<double>& vals) {
  std::vector<float> f(vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i) f[i] = static_cast<float>(vals[i]);
  // little-endian assumed; asserted at build time
  static_assert(sizeof(float) == 4);
  os.write(reinterpret_cast<const char*>(f.data()),
           static_cast<std::streamsize>(f.size() * sizeof(float)));
}

inline std::vector<double> read_f32_block(std::istream& is, std::size_t count,
                                          const std::string& tensor_name) {
  std::vector<float> f(count);
  is.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (!is || static_cast<std::size_t>(is.gcount()) != count * sizeof(float)) {
    throw std::runtime_error("truncated tensor: " + tensor_name);
  }
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<double>(f[i]);
  return out;
}

// Tensors in canonical file order, as (name, pointer, element count).
struct TensorRef {
  std::string name;
  std::vector<double>* data;
  std::size_t count;
};

inline std::vector<TensorRef> tensor_list(ModelWeights& w) {
  const ModelConfig& c = w.config;
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto inner = static_cast<std::size_t>(c.attn_inner());
  const auto ff = static_cast<std::size_t>(c.d_ff);
  const auto vocab = static_cast<std::size_t>(c.vocab_size);
  std::vector<TensorRef> ts;
  ts.push_back({"token_embedding", &w.token_embedding.data, vocab * d});
  for (int l = 0; l < c.n_layers; ++l) {
    LayerWeights& lw = w.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    ts.push_back({p + "attn_norm_gain", &lw.attn_norm_gain, d});
    ts.push_back({p + "wq", &lw.wq.data, inner * d});
    ts.push_back({p + "wk", &lw.wk.data, inner * d});
    ts.push_back({p + "wv", &lw.wv.data, inner * d});
    ts.push_back({p + "wo", &lw.wo.data, d * inner});
    ts.push_back({p + "mlp_norm_gain", &lw.mlp_norm_gain, d});
    ts.push_back({p + "w_gate", &lw.w_gate.data, ff * d});
    ts.push_back({p + "w_up", &lw.w_up.data, ff * d});
    ts.push_back({p + "w_down", &lw.w_down.data, d * ff});
  }
  ts.push_back({"final_norm_gain", &w.final_norm_gain, d});
  ts.push_back({"unembedding", &w.unembedding.data, vocab * d});
  return ts;
}

inline void allocate_weights(ModelWeights& w) {
  const ModelConfig& c = w.config;
  w.token_embedding = Matrix(c.vocab_size, c.d_model);
  w.layers.assign(c.n_layers, LayerWeights{});
  for (auto& lw : w.layers) {
    lw.attn_norm_gain.assign(c.d_model, 0.0);
    lw.wq = Matrix(c.attn_inner(), c.d_model);
    lw.wk = Matrix(c.attn_inner(), c.d_model);
    lw.wv = Matrix(c.attn_inner(), c.d_model);
    lw.wo = Matrix(c.d_model, c.attn_inner());
    lw.mlp_norm_gain.assign(c.d_model, 0.0);
    lw.w_gate = Matrix(c.d_ff, c.d_model);
    lw.w_up = Matrix(c.d_ff, c.d_model);
    lw.w_down = Matrix(c.d_model, c.d_ff);
  }
  w.final_norm_gain.assign(c.d_model, 0.0);
  w.unembedding = Matrix(c.vocab_size, c.d_model);
}

}  // namespace detail

inline void save_weights(const ModelWeights& w, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write(kWeightMagic, 4);
  const std::string cfg = config_to_json(w.config).dump();
  detail::write_u32_le(os, static_cast<std::uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  auto& mut = const_cast<ModelWeights&>(w);  // read-only traversal
  for (const auto& t : detail::tensor_list(mut)) detail::write_f32_block(os, *t.data);
  if (!os) throw std::runtime_error("write failure: " + path);
}

inline ModelWeights load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kWeightMagic, 4) != 0) {
    throw std::runtime_error("bad magic in " + path);
  }
  const std::uint32_t json_len = detail::read_u32_le(is);
  std::string cfg_str(json_len, '\0');
  is.read(cfg_str.data(), json_len);
  if (!is) throw std::runtime_error("truncated config header in " + path);
  ModelWeights w;
  try {
    w.config = config_from_json(nlohmann::json::parse(cfg_str));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("invalid config JSON in " + path + ": " + e.what());
  }
  detail::allocate_weights(w);
  for (const auto& t : detail::tensor_list(w)) {
    *t.data = detail::read_f32_block(is, t.count, t.name);
  }
  // trailing bytes mean the file disagrees with the embedded config
  is.peek();
  if (!is.eof()) throw std::runtime_error("shape mismatch: trailing bytes after unembedding");
  return w;
}

// Activation trace export: JSON index + raw little-endian f32 blocks.
inline void save_trace(const ActivationTrace& trace, const std::string& json_path,
                       const std::string& bin_path) {
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot open for writing: " + bin_path);
  std::uint64_t offset = 0;
  nlohmann::json seqs = nlohmann::json::array();
  auto emit = [&](const Vec& v) {
    detail::write_f32_block(bin, v);
    nlohmann::json e{{"offset", offset}, {"len", v.size()}};
    offset += v.size() * sizeof(float);
    return e;
  };
  for (const SeqTrace& s : trace.seqs) {
    nlohmann::json js{{"len", s.len}, {"response_mask", s.response_mask}};
    nlohmann::json blocks = nlohmann::json::array();
    for (std::size_t l = 0; l < s.attn_out.size(); ++l) {
      for (int p = 0; p < s.len; ++p) {
        nlohmann::json e = emit(s.attn_out[l][p]);
        e["layer"] = l;
        e["block"] = "attn";
        e["pos"] = p;
        blocks.push_back(e);
        e = emit(s.mlp_out[l][p]);
        e["layer"] = l;
        e["block"] = "mlp";
        e["pos"] = p;
        blocks.push_back(e);
      }
    }
    js["block_outputs"] = blocks;
    seqs.push_back(js);
  }
  nlohmann::json index{{"config", config_to_json(trace.config)},
                       {"data_file", bin_path.substr(bin_path.find_last_of('/') + 1)},
                       {"seqs", seqs}};
  std::ofstream os(json_path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + json_path);
  os << index.dump(2) << "\n";
}

}  // namespace s2e
