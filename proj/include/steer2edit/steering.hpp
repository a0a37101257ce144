#pragma once

#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "steer2edit/model.hpp"
#include "steer2edit/model_io.hpp"

namespace s2e {

struct ProbePair {
  std::vector<int> prompt;
  std::vector<int> response;
};

struct ProbeDataset {
  std::vector<ProbePair> positive;
  std::vector<ProbePair> negative;

  void validate() const {
    if (positive.empty()) throw std::runtime_error("ProbeDataset: empty positive class");
    if (negative.empty()) throw std::runtime_error("ProbeDataset: empty negative class");
    for (const auto* cls : {&positive, &negative}) {
      for (const ProbePair& p : *cls) {
        if (p.response.empty()) throw std::runtime_error("ProbeDataset: zero-length response");
      }
    }
  }
};

class SteeringVectorSet {
 public:
  SteeringVectorSet() = default;
  SteeringVectorSet(int n_layers, int d_model)
      : n_layers_(n_layers),
        d_model_(d_model),
        attn_(n_layers, Vec(d_model, 0.0)),
        mlp_(n_layers, Vec(d_model, 0.0)) {}

  int n_layers() const { return n_layers_; }
  int d_model() const { return d_model_; }

  const Vec& get(int layer, BlockKind b) const {
    return b == BlockKind::attn ? attn_.at(layer) : mlp_.at(layer);
  }
  Vec& get(int layer, BlockKind b) {
    return b == BlockKind::attn ? attn_.at(layer) : mlp_.at(layer);
  }

 private:
  int n_layers_ = 0;
  int d_model_ = 0;
  std::vector<Vec> attn_;
  std::vector<Vec> mlp_;
};

// Per-response token means of the block outputs delta, one entry per
// response: [response][layer] -> d_model. Exposed separately so tests can
// drive the mean-difference arithmetic with planted values.
struct BlockOutputMeans {
  std::vector<std::vector<Vec>> attn;  // [response][layer]
  std::vector<std::vector<Vec>> mlp;
};

// Nested averaging: token mean within each response first, then a uniform
// mean over responses, then pos minus neg. The two orderings differ when
// response lengths vary.
inline SteeringVectorSet steering_vectors_from_means(const BlockOutputMeans& pos,
                                                     const BlockOutputMeans& neg, int n_layers,
                                                     int d_model) {
  if (pos.attn.empty() || neg.attn.empty()) {
    throw std::runtime_error("steering extraction: empty class");
  }
  SteeringVectorSet out(n_layers, d_model);
  auto class_mean = [&](const std::vector<std::vector<Vec>>& per_resp, int layer) {
    Vec m(d_model, 0.0);
    for (const auto& resp : per_resp) add_inplace(m, resp[layer]);
    const double inv = 1.0 / static_cast<double>(per_resp.size());
    for (double& x : m) x *= inv;
    return m;
  };
  for (int l = 0; l < n_layers; ++l) {
    out.get(l, BlockKind::attn) = sub(class_mean(pos.attn, l), class_mean(neg.attn, l));
    out.get(l, BlockKind::mlp) = sub(class_mean(pos.mlp, l), class_mean(neg.mlp, l));
  }
  return out;
}


// Per-response token means over masked positions of a captured trace.
inline BlockOutputMeans block_means_from_trace(const ActivationTrace& t) {
  const int n_layers = t.config.n_layers;
  const int d_model = t.config.d_model;
  BlockOutputMeans out;
  for (const SeqTrace& seq : t.seqs) {
    int n_resp = 0;
    for (int p = 0; p < seq.len; ++p) n_resp += seq.response_mask[p] ? 1 : 0;
    if (n_resp < 1) throw std::runtime_error("steering extraction: zero-length response");
    std::vector<Vec> am(n_layers, Vec(d_model, 0.0));
    std::vector<Vec> mm(n_layers, Vec(d_model, 0.0));
    const double inv = 1.0 / static_cast<double>(n_resp);
    for (int l = 0; l < n_layers; ++l) {
      for (int p = 0; p < seq.len; ++p) {
        if (!seq.response_mask[p]) continue;
        add_scaled_inplace(am[l], seq.attn_out[l][p], inv);
        add_scaled_inplace(mm[l], seq.mlp_out[l][p], inv);
      }
    }
    out.attn.push_back(std::move(am));
    out.mlp.push_back(std::move(mm));
  }
  return out;
}

// Eq.-order extraction from captured (or hand-planted) traces: token mean
// within each response, class mean, then pos minus neg.
inline SteeringVectorSet steering_vectors_from_traces(const ActivationTrace& pos,
                                                      const ActivationTrace& neg) {
  if (!(pos.config == neg.config)) {
    throw std::runtime_error("steering extraction: mismatched trace configs");
  }
  return steering_vectors_from_means(block_means_from_trace(pos), block_means_from_trace(neg),
                                     pos.config.n_layers, pos.config.d_model);
}

inline ActivationTrace collect_class_trace(const ModelWeights& w,
                                           const std::vector<ProbePair>& cls,
                                           const CaptureSpec& cap) {
  ActivationTrace trace;
  trace.config = w.config;
  for (const ProbePair& pair : cls) {
    std::vector<int> tokens = pair.prompt;
    tokens.insert(tokens.end(), pair.response.begin(), pair.response.end());
    ForwardResult fr = forward(w, tokens, cap);
    SeqTrace st = std::move(*fr.trace);
    for (std::size_t p = pair.prompt.size(); p < tokens.size(); ++p) st.response_mask[p] = 1;
    trace.seqs.push_back(std::move(st));
  }
  return trace;
}

inline SteeringVectorSet extract_steering_vectors(const ModelWeights& w,
                                                  const ProbeDataset& data) {
  data.validate();
  CaptureSpec cap;
  cap.block_outputs = true;
  return steering_vectors_from_traces(collect_class_trace(w, data.positive, cap),
                                      collect_class_trace(w, data.negative, cap));
}

// Combined trace over both classes with response positions masked, used for
// the mean component inputs of the editor.
inline ActivationTrace collect_probe_trace(const ModelWeights& w, const ProbeDataset& data,
                                           const CaptureSpec& cap = CaptureSpec::all()) {
  data.validate();
  ActivationTrace trace = collect_class_trace(w, data.positive, cap);
  ActivationTrace neg = collect_class_trace(w, data.negative, cap);
  for (SeqTrace& st : neg.seqs) trace.seqs.push_back(std::move(st));
  return trace;
}

struct SteeringHook {
  double gamma = 0.0;
  const SteeringVectorSet* vectors = nullptr;
  std::set<BlockKind> blocks = {BlockKind::attn, BlockKind::mlp};
  // Optional position gate; applies at all positions when empty.
  std::vector<std::uint8_t> position_mask;

  void validate() const {
    if (gamma < 0.0) throw std::invalid_argument("SteeringHook: gamma must be >= 0");
    if (!vectors) throw std::invalid_argument("SteeringHook: missing vectors");
  }

  BlockHook to_block_hook() const {
    validate();
    // gamma == 0 must be bitwise identical to the plain forward pass, so the
    // hook contributes nothing at all in that case.
    if (gamma == 0.0) return BlockHook{};
    BlockHook hook;
    // capture by value so the hook stays valid if this SteeringHook was a
    // temporary; the vector set itself must still outlive the forward pass
    hook.shift = [vectors = vectors, gamma = gamma, blocks = blocks,
                  position_mask = position_mask](int layer, BlockKind b, int pos) -> Vec {
      if (!blocks.contains(b)) return {};
      if (!position_mask.empty() &&
          (pos >= static_cast<int>(position_mask.size()) || !position_mask[pos])) {
        return {};
      }
      return scaled(vectors->get(layer, b), gamma);
    };
    return hook;
  }
};

inline std::vector<Vec> steered_forward(const ModelWeights& w, const std::vector<int>& tokens,
                                        const SteeringHook& hook) {
  BlockHook bh = hook.to_block_hook();
  return forward(w, tokens, {}, &bh).logits;
}

// --- file formats ---

// JSON lines: {"label": "pos"|"neg", "prompt": [ids], "response": [ids]}
inline ProbeDataset load_probe_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path);
  ProbeDataset data;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    ProbePair pair;
    pair.prompt = j.at("prompt").get<std::vector<int>>();
    pair.response = j.at("response").get<std::vector<int>>();
    const std::string label = j.at("label").get<std::string>();
    if (label == "pos") {
      data.positive.push_back(std::move(pair));
    } else if (label == "neg") {
      data.negative.push_back(std::move(pair));
    } else {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": unknown label " + label);
    }
  }
  data.validate();
  return data;
}

inline void save_probe_dataset(const ProbeDataset& data, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  auto emit = [&](const std::vector<ProbePair>& cls, const char* label) {
    for (const ProbePair& p : cls) {
      os << nlohmann::json{{"label", label}, {"prompt", p.prompt}, {"response", p.response}}.dump()
         << "\n";
    }
  };
  emit(data.positive, "pos");
  emit(data.negative, "neg");
}

// JSON index {layer, block, offset, len} entries plus a raw f32 block file.
inline void save_steering_vectors(const SteeringVectorSet& vecs, const std::string& json_path,
                                  const std::string& bin_path) {
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot open for writing: " + bin_path);
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (int l = 0; l < vecs.n_layers(); ++l) {
    for (BlockKind b : {BlockKind::attn, BlockKind::mlp}) {
      const Vec& v = vecs.get(l, b);
      detail::write_f32_block(bin, v);
      entries.push_back({{"layer", l},
                         {"block", to_string(b)},
                         {"offset", offset},
                         {"len", v.size()}});
      offset += v.size() * sizeof(float);
    }
  }
  nlohmann::json index{{"n_layers", vecs.n_layers()},
                       {"d_model", vecs.d_model()},
                       {"data_file", bin_path.substr(bin_path.find_last_of('/') + 1)},
                       {"entries", entries}};
  std::ofstream os(json_path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + json_path);
  os << index.dump(2) << "\n";
}

inline SteeringVectorSet load_steering_vectors(const std::string& json_path,
                                               const std::string& bin_path) {
  std::ifstream is(json_path);
  if (!is) throw std::runtime_error("cannot open: " + json_path);
  nlohmann::json index = nlohmann::json::parse(is);
  SteeringVectorSet vecs(index.at("n_layers").get<int>(), index.at("d_model").get<int>());
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open: " + bin_path);
  for (const auto& e : index.at("entries")) {
    const int layer = e.at("layer").get<int>();
    const BlockKind b = e.at("block").get<std::string>() == "attn" ? BlockKind::attn
                                                                   : BlockKind::mlp;
    const std::size_t len = e.at("len").get<std::size_t>();
    bin.seekg(static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
    vecs.get(layer, b) = detail::read_f32_block(
        bin, len, "steering vector (" + std::to_string(layer) + "," + to_string(b) + ")");
  }
  return vecs;
}

}  // namespace s2e
