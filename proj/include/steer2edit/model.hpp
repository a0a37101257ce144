#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "steer2edit/linalg.hpp"

namespace s2e {

enum class NormKind { rms, layernorm };
enum class MlpKind { gated_silu, gelu };
enum class PosKind { rotary, none };
enum class BlockKind { attn, mlp };

inline const char* to_string(BlockKind b) { return b == BlockKind::attn ? "attn" : "mlp"; }

constexpr int kPadToken = 0;
constexpr int kEndToken = 1;
constexpr double kNormEps = 1e-6;

struct ModelConfig {
  int d_model = 0;
  int n_layers = 0;
  int n_heads = 0;
  int d_head = 0;
  int d_ff = 0;
  int vocab_size = 0;
  int max_seq_len = 0;
  NormKind norm_kind = NormKind::rms;
  MlpKind mlp_kind = MlpKind::gated_silu;
  PosKind pos_kind = PosKind::rotary;

  int attn_inner() const { return n_heads * d_head; }

  bool operator==(const ModelConfig&) const = default;

  void validate() const {
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_head < 1 || d_ff < 1 ||
        vocab_size < 1 || max_seq_len < 1) {
      throw std::invalid_argument("ModelConfig: all dimensions must be >= 1");
    }
  }
};

struct LayerWeights {
  Vec attn_norm_gain;  // d_model
  Matrix wq, wk, wv;   // attn_inner x d_model
  Matrix wo;           // d_model x attn_inner
  Vec mlp_norm_gain;   // d_model
  Matrix w_gate, w_up; // d_ff x d_model
  Matrix w_down;       // d_model x d_ff
};

struct ModelWeights {
  ModelConfig config;
  Matrix token_embedding;  // vocab_size x d_model
  std::vector<LayerWeights> layers;
  Vec final_norm_gain;     // d_model
  Matrix unembedding;      // vocab_size x d_model
};

struct ComponentId {
  int layer = 0;
  BlockKind block = BlockKind::attn;
  int index = 0;

  auto operator<=>(const ComponentId&) const = default;
};

inline void check_component_id(const ModelConfig& cfg, const ComponentId& id) {
  if (id.layer < 0 || id.layer >= cfg.n_layers) {
    throw std::invalid_argument("ComponentId: layer " + std::to_string(id.layer) + " out of range");
  }
  const int bound = id.block == BlockKind::attn ? cfg.n_heads : cfg.d_ff;
  if (id.index < 0 || id.index >= bound) {
    throw std::invalid_argument("ComponentId: index " + std::to_string(id.index) +
                                " out of range for block " + to_string(id.block));
  }
}

// Per-sequence captured activations. Block outputs are the delta values before
// the residual write; head inputs are the post-mixing per-head vectors fed to
// the o_proj slab; neuron activations are the post-activation scalars fed to
// the down_proj columns.
struct SeqTrace {
  int len = 0;
  std::vector<std::uint8_t> response_mask;              // len
  std::vector<std::vector<Vec>> attn_out;               // [layer][pos] -> d_model
  std::vector<std::vector<Vec>> mlp_out;                // [layer][pos] -> d_model
  std::vector<std::vector<std::vector<Vec>>> head_in;   // [layer][pos][head] -> d_head
  std::vector<std::vector<Vec>> neuron_act;             // [layer][pos] -> d_ff
  std::vector<std::vector<Vec>> resid_pre_attn;         // [layer][pos] -> d_model
  std::vector<std::vector<Vec>> resid_post_attn;        // [layer][pos] -> d_model
  std::vector<Vec> final_resid;                         // [pos] -> d_model
};

struct ActivationTrace {
  ModelConfig config;
  std::vector<SeqTrace> seqs;
};

struct CaptureSpec {
  bool block_outputs = false;
  bool head_inputs = false;
  bool neuron_activations = false;
  bool residuals = false;

  bool any() const { return block_outputs || head_inputs || neuron_activations || residuals; }
  static CaptureSpec all() { return {true, true, true, true}; }
};

class SteeringVectorSet;  // defined in steering.hpp

// Inference-time block-output intervention: delta <- delta + gamma * v.
struct BlockHook {
  // Called with (layer, block, position); returns the additive shift, or an
  // empty vector for no shift.
  std::function<Vec(int, BlockKind, int)> shift;
};

namespace detail {

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline double gelu(double x) {
  // tanh approximation
  return 0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
}

inline Vec apply_norm(const ModelConfig& cfg, const Vec& x, const Vec& gain) {
  return cfg.norm_kind == NormKind::rms ? rms_norm(x, gain, kNormEps)
                                        : layer_norm(x, gain, kNormEps);
}

inline void apply_rotary(Vec& qk, int d_head, int pos) {
  for (int i = 0; i + 1 < d_head; i += 2) {
    const double theta = static_cast<double>(pos) *
                         std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d_head));
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    const double a = qk[i];
    const double b = qk[i + 1];
    qk[i] = a * c - b * s;
    qk[i + 1] = a * s + b * c;
  }
}

}  // namespace detail

struct ForwardResult {
  std::vector<Vec> logits;  // [pos] -> vocab_size
  std::optional<SeqTrace> trace;
};

inline ForwardResult forward(const ModelWeights& w, const std::vector<int>& tokens,
                             const CaptureSpec& capture = {}, const BlockHook* hook = nullptr) {
  const ModelConfig& cfg = w.config;
  const int len = static_cast<int>(tokens.size());
  if (len > cfg.max_seq_len) {
    throw std::invalid_argument("sequence length " + std::to_string(len) +
                                " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(t) + " out of range");
    }
  }

  std::optional<SeqTrace> trace;
  if (capture.any()) {
    trace.emplace();
    trace->len = len;
    trace->response_mask.assign(static_cast<std::size_t>(len), 0);
    if (capture.block_outputs) {
      trace->attn_out.assign(cfg.n_layers, std::vector<Vec>(len));
      trace->mlp_out.assign(cfg.n_layers, std::vector<Vec>(len));
    }
    if (capture.head_inputs)
      trace->head_in.assign(cfg.n_layers,
                            std::vector<std::vector<Vec>>(len, std::vector<Vec>(cfg.n_heads)));
    if (capture.neuron_activations) trace->neuron_act.assign(cfg.n_layers, std::vector<Vec>(len));
    if (capture.residuals) {
      trace->resid_pre_attn.assign(cfg.n_layers, std::vector<Vec>(len));
      trace->resid_post_attn.assign(cfg.n_layers, std::vector<Vec>(len));
      trace->final_resid.assign(len, Vec());
    }
  }

  // residual stream, one vector per position
  std::vector<Vec> resid(len);
  for (int p = 0; p < len; ++p) {
    resid[p].assign(cfg.d_model, 0.0);
    for (int j = 0; j < cfg.d_model; ++j) resid[p][j] = w.token_embedding.at(tokens[p], j);
  }

  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = w.layers[l];

    if (trace && capture.residuals)
      for (int p = 0; p < len; ++p) trace->resid_pre_attn[l][p] = resid[p];

    // --- attention block ---
    std::vector<Vec> q(len), k(len), v(len);
    for (int p = 0; p < len; ++p) {
      Vec x = detail::apply_norm(cfg, resid[p], lw.attn_norm_gain);
      q[p] = matvec(lw.wq, x);
      k[p] = matvec(lw.wk, x);
      v[p] = matvec(lw.wv, x);
      if (cfg.pos_kind == PosKind::rotary) {
        for (int h = 0; h < cfg.n_heads; ++h) {
          Vec qh(q[p].begin() + h * cfg.d_head, q[p].begin() + (h + 1) * cfg.d_head);
          Vec kh(k[p].begin() + h * cfg.d_head, k[p].begin() + (h + 1) * cfg.d_head);
          detail::apply_rotary(qh, cfg.d_head, p);
          detail::apply_rotary(kh, cfg.d_head, p);
          std::copy(qh.begin(), qh.end(), q[p].begin() + h * cfg.d_head);
          std::copy(kh.begin(), kh.end(), k[p].begin() + h * cfg.d_head);
        }
      }
    }

    std::vector<Vec> attn_delta(len);
    for (int p = 0; p < len; ++p) {
      // mixed per-head inputs to the o_proj
      Vec mixed(cfg.attn_inner(), 0.0);
      for (int h = 0; h < cfg.n_heads; ++h) {
        const int off = h * cfg.d_head;
        // causal scores over positions 0..p
        std::vector<double> scores(p + 1);
        double max_s = -1e300;
        for (int s = 0; s <= p; ++s) {
          double acc = 0.0;
          for (int j = 0; j < cfg.d_head; ++j) acc += q[p][off + j] * k[s][off + j];
          scores[s] = acc * attn_scale;
          max_s = std::max(max_s, scores[s]);
        }
        double z = 0.0;
        for (int s = 0; s <= p; ++s) {
          scores[s] = std::exp(scores[s] - max_s);
          z += scores[s];
        }
        for (int s = 0; s <= p; ++s) {
          const double a = scores[s] / z;
          for (int j = 0; j < cfg.d_head; ++j) mixed[off + j] += a * v[s][off + j];
        }
        if (trace && capture.head_inputs) {
          trace->head_in[l][p][h] = Vec(mixed.begin() + off, mixed.begin() + off + cfg.d_head);
        }
      }
      attn_delta[p] = matvec(lw.wo, mixed);
      if (hook && hook->shift) {
        Vec sft = hook->shift(l, BlockKind::attn, p);
        if (!sft.empty()) add_inplace(attn_delta[p], sft);
      }
      if (trace && capture.block_outputs) trace->attn_out[l][p] = attn_delta[p];
    }
    for (int p = 0; p < len; ++p) add_inplace(resid[p], attn_delta[p]);

    if (trace && capture.residuals)
      for (int p = 0; p < len; ++p) trace->resid_post_attn[l][p] = resid[p];

    // --- MLP block ---
    for (int p = 0; p < len; ++p) {
      Vec x = detail::apply_norm(cfg, resid[p], lw.mlp_norm_gain);
      Vec act(cfg.d_ff);
      if (cfg.mlp_kind == MlpKind::gated_silu) {
        Vec gate = matvec(lw.w_gate, x);
        Vec up = matvec(lw.w_up, x);
        for (int j = 0; j < cfg.d_ff; ++j) act[j] = detail::silu(gate[j]) * up[j];
      } else {
        Vec up = matvec(lw.w_up, x);
        for (int j = 0; j < cfg.d_ff; ++j) act[j] = detail::gelu(up[j]);
      }
      if (trace && capture.neuron_activations) trace->neuron_act[l][p] = act;
      Vec delta = matvec(lw.w_down, act);
      if (hook && hook->shift) {
        Vec sft = hook->shift(l, BlockKind::mlp, p);
        if (!sft.empty()) add_inplace(delta, sft);
      }
      if (trace && capture.block_outputs) trace->mlp_out[l][p] = delta;
      add_inplace(resid[p], delta);
    }
  }

  if (trace && capture.residuals)
    for (int p = 0; p < len; ++p) trace->final_resid[p] = resid[p];

  ForwardResult out;
  out.logits.resize(len);
  for (int p = 0; p < len; ++p) {
    Vec x = detail::apply_norm(cfg, resid[p], w.final_norm_gain);
    out.logits[p] = matvec(w.unembedding, x);
  }
  out.trace = std::move(trace);
  return out;
}

inline int argmax_token(const Vec& logits) {
  int best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = static_cast<int>(i);
  }
  return best;  // ties resolve to the lowest id
}

inline std::vector<int> generate(const ModelWeights& w, const std::vector<int>& prompt,
                                 int max_new, const BlockHook* hook = nullptr) {
  if (prompt.empty()) throw std::invalid_argument("generate: prompt must be nonempty");
  std::vector<int> tokens = prompt;
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(tokens.size()) >= w.config.max_seq_len) break;
    ForwardResult fr = forward(w, tokens, {}, hook);
    const int next = argmax_token(fr.logits.back());
    if (next == kEndToken) break;
    tokens.push_back(next);
  }
  return tokens;
}

inline Matrix component_weight(const ModelWeights& w, const ComponentId& id) {
  check_component_id(w.config, id);
  const ModelConfig& cfg = w.config;
  const LayerWeights& lw = w.layers[id.layer];
  if (id.block == BlockKind::attn) {
    Matrix m(cfg.d_model, cfg.d_head);
    const int off = id.index * cfg.d_head;
    for (int r = 0; r < cfg.d_model; ++r)
      for (int c = 0; c < cfg.d_head; ++c) m.at(r, c) = lw.wo.at(r, off + c);
    return m;
  }
  Matrix m(cfg.d_model, 1);
  for (int r = 0; r < cfg.d_model; ++r) m.at(r, 0) = lw.w_down.at(r, id.index);
  return m;
}

inline ModelWeights set_component_weight(const ModelWeights& w, const ComponentId& id,
                                         const Matrix& m) {
  check_component_id(w.config, id);
  const ModelConfig& cfg = w.config;
  const std::size_t want_cols = id.block == BlockKind::attn ? cfg.d_head : 1;
  if (m.rows != static_cast<std::size_t>(cfg.d_model) || m.cols != want_cols) {
    throw std::invalid_argument("set_component_weight: shape " + shape_str(m) +
                                " does not match component");
  }
  ModelWeights out = w;
  LayerWeights& lw = out.layers[id.layer];
  if (id.block == BlockKind::attn) {
    const int off = id.index * cfg.d_head;
    for (int r = 0; r < cfg.d_model; ++r)
      for (int c = 0; c < cfg.d_head; ++c) lw.wo.at(r, off + c) = m.at(r, c);
  } else {
    for (int r = 0; r < cfg.d_model; ++r) lw.w_down.at(r, id.index) = m.at(r, 0);
  }
  return out;
}

// All editable components in canonical (layer, block, index) order.
inline std::vector<ComponentId> editable_components(const ModelConfig& cfg) {
  std::vector<ComponentId> ids;
  ids.reserve(static_cast<std::size_t>(cfg.n_layers) * (cfg.n_heads + cfg.d_ff));
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) ids.push_back({l, BlockKind::attn, h});
    for (int j = 0; j < cfg.d_ff; ++j) ids.push_back({l, BlockKind::mlp, j});
  }
  return ids;
}

}  // namespace s2e
