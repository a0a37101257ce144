#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "steer2edit/editor.hpp"
#include "steer2edit/model.hpp"
#include "steer2edit/model_io.hpp"
#include "steer2edit/oracles.hpp"
#include "steer2edit/rng.hpp"
#include "steer2edit/steering.hpp"

namespace s2e {

// Deterministic regardless of thread count: results land in index order and
// are reduced serially afterwards.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const int nt = std::min<int>(threads, static_cast<int>(n));
  std::vector<std::thread> pool;
  pool.reserve(nt);
  for (int t = 0; t < nt; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = static_cast<std::size_t>(t); i < n; i += nt) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

inline std::string fmt17(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

// ---------------------------------------------------------------------------
// Toy model construction
// ---------------------------------------------------------------------------

constexpr double kToyWeightScale = 0.02;  // Gaussian scale for the base tensors
// Embeddings are O(1) so the residual stream dominates the block outputs and a
// bounded weight edit perturbs the normalized stream only mildly.
constexpr double kEmbedScale = 1.0;
constexpr double kUnembedScale = 0.2;
constexpr double kPlantValueGain = 0.3;   // planted head value-pathway strength
constexpr double kPlantOutputGain = 1.0;  // planted head o_proj strength

inline ModelWeights build_toy_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelWeights w;
  w.config = cfg;
  detail::allocate_weights(w);
  Rng rng(seed);
  auto fill = [&](std::vector<double>& data) {
    for (double& x : data) x = rng.next_gaussian() * kToyWeightScale;
  };
  for (double& x : w.token_embedding.data) x = rng.next_gaussian() * kEmbedScale;
  for (auto& lw : w.layers) {
    lw.attn_norm_gain.assign(cfg.d_model, 1.0);
    fill(lw.wq.data);
    fill(lw.wk.data);
    fill(lw.wv.data);
    fill(lw.wo.data);
    lw.mlp_norm_gain.assign(cfg.d_model, 1.0);
    fill(lw.w_gate.data);
    fill(lw.w_up.data);
    fill(lw.w_down.data);
  }
  w.final_norm_gain.assign(cfg.d_model, 1.0);
  for (double& x : w.unembedding.data) x = rng.next_gaussian() * kUnembedScale;
  // Pad and end rows read out zero, so greedy decoding never stops spuriously
  // and an empty generation really does signal a degenerate edit.
  for (int t : {kPadToken, kEndToken}) {
    for (int j = 0; j < cfg.d_model; ++j) w.unembedding.at(t, j) = 0.0;
  }
  return w;
}

struct SyntheticBenchSpec {
  ComponentId planted{1, BlockKind::attn, 2};
  int trigger_token = 7;
  int n_trigger = 8;
  int n_neutral = 8;
  int prompt_len = 8;
  int max_new = 4;

  void validate(const ModelConfig& cfg) const {
    check_component_id(cfg, planted);
    if (planted.block != BlockKind::attn) {
      throw std::invalid_argument("SyntheticBenchSpec: planted component must be an attention head");
    }
    if (trigger_token < 2 || trigger_token >= cfg.vocab_size) {
      throw std::invalid_argument("SyntheticBenchSpec: trigger token out of range");
    }
    if (n_trigger < 1 || n_neutral < 1 || prompt_len < 2 || max_new < 1) {
      throw std::invalid_argument("SyntheticBenchSpec: invalid sizes");
    }
  }
};

// Deterministic unit behavior direction derived from the seed.
inline Vec behavior_direction(int d_model, std::uint64_t seed) {
  Rng rng(seed ^ 0xBE4A11CEull);
  Vec d(d_model);
  for (double& x : d) x = rng.next_gaussian();
  return normalized(d);
}

// Base toy model plus a planted head whose value pathway fires on the trigger
// token and whose o_proj writes along d_beh.
inline ModelWeights build_planted_model(const ModelConfig& cfg, const SyntheticBenchSpec& spec,
                                        const Vec& d_beh, std::uint64_t seed) {
  spec.validate(cfg);
  ModelWeights w = build_toy_model(cfg, seed);
  Rng rng(seed ^ 0x9A4Dull);
  Vec p(cfg.d_head);
  for (double& x : p) x = rng.next_gaussian();
  p = normalized(p);

  Vec emb(cfg.d_model);
  for (int j = 0; j < cfg.d_model; ++j) emb[j] = w.token_embedding.at(spec.trigger_token, j);
  const Vec u_tau = normalized(emb);

  LayerWeights& lw = w.layers[spec.planted.layer];
  const int off = spec.planted.index * cfg.d_head;
  for (int r = 0; r < cfg.d_head; ++r)
    for (int c = 0; c < cfg.d_model; ++c)
      lw.wv.at(off + r, c) = kPlantValueGain * p[r] * u_tau[c];
  for (int r = 0; r < cfg.d_model; ++r)
    for (int c = 0; c < cfg.d_head; ++c)
      lw.wo.at(r, off + c) = kPlantOutputGain * d_beh[r] * p[c];

  // The behavior lives purely in the residual stream: every weight that reads
  // the residual downstream of the planted block is projected orthogonal to
  // d_beh, so movement along d_beh only rescales activations through the RMS
  // norm and leaves next-token argmaxes essentially unchanged.
  auto project_rows = [&](Matrix& m) {
    for (std::size_t r = 0; r < m.rows; ++r) {
      double proj = 0.0;
      for (int j = 0; j < cfg.d_model; ++j) proj += m.at(r, j) * d_beh[j];
      for (int j = 0; j < cfg.d_model; ++j) m.at(r, j) -= proj * d_beh[j];
    }
  };
  project_rows(w.layers[spec.planted.layer].w_gate);
  project_rows(w.layers[spec.planted.layer].w_up);
  for (int l = spec.planted.layer + 1; l < cfg.n_layers; ++l) {
    project_rows(w.layers[l].wq);
    project_rows(w.layers[l].wk);
    project_rows(w.layers[l].wv);
    project_rows(w.layers[l].w_gate);
    project_rows(w.layers[l].w_up);
  }
  project_rows(w.unembedding);
  return w;
}

// ---------------------------------------------------------------------------
// Pipeline configuration
// ---------------------------------------------------------------------------

struct VetoConfig {
  int ngram = 4;
  int max_consecutive_repeats = 5;   // veto at >= this many consecutive repeats
  double min_mean_entropy = 0.05;    // nats
  int max_empty_generations = 0;
  int n_prompts = 20;
  int prompt_len = 5;
  int max_new = 24;
};

struct PipelineConfig {
  std::string model_path;    // empty -> build the planted toy model
  std::string dataset_path;  // empty -> generate from the bench spec
  std::string variant = "steer2edit";
  std::vector<double> rho_attn_grid = {1.0};
  std::vector<double> rho_mlp_grid = {kInfBudget};
  std::vector<double> alpha_grid = {0.6};
  std::vector<double> gamma_grid = {0.0, 0.5, 1.0};
  std::string attribute_metric = "beh_projection_drop";
  std::string utility_metric = "neutral_agreement";
  std::string out_dir = "out";
  std::uint64_t seed = 1;
  int threads = 1;
  ModelConfig model_cfg{32, 2, 4, 8, 64, 64, 64, NormKind::rms, MlpKind::gated_silu,
                        PosKind::rotary};
  SyntheticBenchSpec bench;
  VetoConfig veto;
  int refine_top = 1;
  int top_k = 10;

  void validate() const {
    if (rho_attn_grid.empty() || rho_mlp_grid.empty() || alpha_grid.empty()) {
      throw std::runtime_error("PipelineConfig: hyper grids must be nonempty");
    }
  }
};

namespace detail {

inline std::vector<double> rho_grid_from_json(const nlohmann::json& arr) {
  std::vector<double> out;
  for (const auto& v : arr) {
    if (v.is_string() && v.get<std::string>() == "inf") {
      out.push_back(kInfBudget);
    } else {
      out.push_back(v.get<double>());
    }
  }
  return out;
}

}  // namespace detail

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  if (j.contains("model")) c.model_path = j.at("model").get<std::string>();
  if (j.contains("dataset")) c.dataset_path = j.at("dataset").get<std::string>();
  if (j.contains("variant")) c.variant = j.at("variant").get<std::string>();
  if (j.contains("rho_attn_grid")) c.rho_attn_grid = detail::rho_grid_from_json(j.at("rho_attn_grid"));
  if (j.contains("rho_mlp_grid")) c.rho_mlp_grid = detail::rho_grid_from_json(j.at("rho_mlp_grid"));
  if (j.contains("alpha_grid")) c.alpha_grid = j.at("alpha_grid").get<std::vector<double>>();
  if (j.contains("gamma_grid")) c.gamma_grid = j.at("gamma_grid").get<std::vector<double>>();
  if (j.contains("attribute_metric")) c.attribute_metric = j.at("attribute_metric").get<std::string>();
  if (j.contains("utility_metric")) c.utility_metric = j.at("utility_metric").get<std::string>();
  if (j.contains("out")) c.out_dir = j.at("out").get<std::string>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("threads")) c.threads = j.at("threads").get<int>();
  if (j.contains("model_config")) c.model_cfg = config_from_json(j.at("model_config"));
  if (j.contains("bench")) {
    const auto& b = j.at("bench");
    if (b.contains("layer")) c.bench.planted.layer = b.at("layer").get<int>();
    if (b.contains("head")) c.bench.planted.index = b.at("head").get<int>();
    if (b.contains("trigger")) c.bench.trigger_token = b.at("trigger").get<int>();
    if (b.contains("n_trigger")) c.bench.n_trigger = b.at("n_trigger").get<int>();
    if (b.contains("n_neutral")) c.bench.n_neutral = b.at("n_neutral").get<int>();
    if (b.contains("prompt_len")) c.bench.prompt_len = b.at("prompt_len").get<int>();
    if (b.contains("max_new")) c.bench.max_new = b.at("max_new").get<int>();
  }
  if (j.contains("veto")) {
    const auto& v = j.at("veto");
    if (v.contains("ngram")) c.veto.ngram = v.at("ngram").get<int>();
    if (v.contains("max_consecutive_repeats"))
      c.veto.max_consecutive_repeats = v.at("max_consecutive_repeats").get<int>();
    if (v.contains("min_mean_entropy")) c.veto.min_mean_entropy = v.at("min_mean_entropy").get<double>();
    if (v.contains("max_empty_generations"))
      c.veto.max_empty_generations = v.at("max_empty_generations").get<int>();
  }
  if (j.contains("refine_top")) c.refine_top = j.at("refine_top").get<int>();
  if (j.contains("top_k")) c.top_k = j.at("top_k").get<int>();
  c.validate();
  return c;
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config: " + path);
  return pipeline_config_from_json(nlohmann::json::parse(is));
}

// ---------------------------------------------------------------------------
// Synthetic benchmark context and metrics
// ---------------------------------------------------------------------------

struct BenchContext {
  ModelWeights model;  // planted model
  SyntheticBenchSpec spec;
  Vec d_beh;
  ProbeDataset data;
  SteeringVectorSet vecs;
  ActivationTrace trace;
  std::vector<std::vector<int>> trigger_prompts;
  std::vector<std::vector<int>> neutral_prompts;
  std::vector<std::vector<int>> sanity_prompts;
  double base_attribute = 0.0;
  std::vector<int> base_next;  // unedited argmax next token per neutral prompt
};

namespace detail {

inline std::vector<int> random_prompt(Rng& rng, const ModelConfig& cfg, int len,
                                      int avoid_token) {
  std::vector<int> p(len);
  for (int i = 0; i < len; ++i) {
    int t;
    do {
      t = 2 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(cfg.vocab_size - 2)));
    } while (t == avoid_token);
    p[i] = t;
  }
  return p;
}

// Greedy continuation that never emits pad/end, so probe responses are always
// nonempty and of fixed length.
inline std::vector<int> forced_response(const ModelWeights& w, const std::vector<int>& prompt,
                                        int max_new) {
  std::vector<int> tokens = prompt;
  std::vector<int> response;
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(tokens.size()) >= w.config.max_seq_len) break;
    const Vec logits = forward(w, tokens).logits.back();
    int best = 2;
    for (std::size_t i = 3; i < logits.size(); ++i)
      if (logits[i] > logits[best]) best = static_cast<int>(i);
    tokens.push_back(best);
    response.push_back(best);
  }
  return response;
}

inline double softmax_entropy(const Vec& logits) {
  double max_l = logits[0];
  for (double l : logits) max_l = std::max(max_l, l);
  double z = 0.0;
  for (double l : logits) z += std::exp(l - max_l);
  double h = 0.0;
  for (double l : logits) {
    const double p = std::exp(l - max_l) / z;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

}  // namespace detail

inline double attribute_projection(const ModelWeights& w,
                                   const std::vector<std::vector<int>>& trigger_prompts,
                                   const Vec& d_beh) {
  double acc = 0.0;
  CaptureSpec cap;
  cap.residuals = true;
  for (const auto& prompt : trigger_prompts) {
    ForwardResult fr = forward(w, prompt, cap);
    acc += dot(fr.trace->final_resid.back(), d_beh);
  }
  return acc / static_cast<double>(trigger_prompts.size());
}

inline std::vector<int> next_tokens(const ModelWeights& w,
                                    const std::vector<std::vector<int>>& prompts) {
  std::vector<int> out(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    out[i] = argmax_token(forward(w, prompts[i]).logits.back());
  }
  return out;
}

inline double agreement(const std::vector<int>& a, const std::vector<int>& b) {
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += (a[i] == b[i]);
  return static_cast<double>(same) / static_cast<double>(a.size());
}

inline BenchContext make_bench_context(const PipelineConfig& cfg) {
  BenchContext ctx;
  ctx.spec = cfg.bench;
  ctx.d_beh = behavior_direction(cfg.model_cfg.d_model, cfg.seed);
  if (!cfg.model_path.empty()) {
    ctx.model = load_weights(cfg.model_path);
  } else {
    ctx.model = build_planted_model(cfg.model_cfg, ctx.spec, ctx.d_beh, cfg.seed);
  }
  ctx.spec.validate(ctx.model.config);

  Rng rng(cfg.seed ^ 0x6E9C45ull);
  const int mid = ctx.spec.prompt_len / 2;
  for (int i = 0; i < ctx.spec.n_trigger; ++i) {
    auto p = detail::random_prompt(rng, ctx.model.config, ctx.spec.prompt_len,
                                   ctx.spec.trigger_token);
    p[mid] = ctx.spec.trigger_token;
    ctx.trigger_prompts.push_back(std::move(p));
  }
  for (int i = 0; i < ctx.spec.n_neutral; ++i) {
    ctx.neutral_prompts.push_back(
        detail::random_prompt(rng, ctx.model.config, ctx.spec.prompt_len, ctx.spec.trigger_token));
  }
  Rng sanity_rng(cfg.seed ^ 0x5A717Full);
  for (int i = 0; i < cfg.veto.n_prompts; ++i) {
    ctx.sanity_prompts.push_back(
        detail::random_prompt(sanity_rng, ctx.model.config, cfg.veto.prompt_len, -1));
  }

  if (!cfg.dataset_path.empty()) {
    ctx.data = load_probe_dataset(cfg.dataset_path);
  } else {
    for (const auto& p : ctx.trigger_prompts) {
      ctx.data.positive.push_back({p, detail::forced_response(ctx.model, p, ctx.spec.max_new)});
    }
    for (const auto& p : ctx.neutral_prompts) {
      ctx.data.negative.push_back({p, detail::forced_response(ctx.model, p, ctx.spec.max_new)});
    }
  }
  ctx.data.validate();
  ctx.vecs = extract_steering_vectors(ctx.model, ctx.data);
  ctx.trace = collect_probe_trace(ctx.model, ctx.data);
  ctx.base_attribute = attribute_projection(ctx.model, ctx.trigger_prompts, ctx.d_beh);
  ctx.base_next = next_tokens(ctx.model, ctx.neutral_prompts);
  return ctx;
}

struct VetoResult {
  bool vetoed = false;
  std::string reason;
};

inline VetoResult sanity_veto(const ModelWeights& w,
                              const std::vector<std::vector<int>>& prompts,
                              const VetoConfig& cfg) {
  int empties = 0;
  double entropy_sum = 0.0;
  int entropy_count = 0;
  for (const auto& prompt : prompts) {
    std::vector<int> tokens = prompt;
    std::vector<int> gen;
    for (int step = 0; step < cfg.max_new; ++step) {
      if (static_cast<int>(tokens.size()) >= w.config.max_seq_len) break;
      const Vec logits = forward(w, tokens).logits.back();
      entropy_sum += detail::softmax_entropy(logits);
      ++entropy_count;
      const int next = argmax_token(logits);
      if (next == kEndToken) break;
      tokens.push_back(next);
      gen.push_back(next);
    }
    if (gen.empty()) ++empties;
    // consecutive n-gram repetition
    const int n = cfg.ngram;
    for (std::size_t start = 0; start + n <= gen.size(); ++start) {
      int repeats = 1;
      while (start + static_cast<std::size_t>(repeats + 1) * n <= gen.size() &&
             std::equal(gen.begin() + start, gen.begin() + start + n,
                        gen.begin() + start + repeats * n)) {
        ++repeats;
      }
      if (repeats >= cfg.max_consecutive_repeats) {
        return {true, "repetitive_output"};
      }
    }
  }
  if (empties > cfg.max_empty_generations) return {true, "failure_to_respond"};
  if (entropy_count > 0 && entropy_sum / entropy_count < cfg.min_mean_entropy) {
    return {true, "low_entropy"};
  }
  return {false, ""};
}

// One grid-point evaluation: build a plan, apply it in suppression orientation
// (negative scale), measure the attribute drop and neutral-prompt agreement.
struct EvalPoint {
  EditHyperparams hyper;
  double attribute = 0.0;  // base minus edited behavior projection
  double utility = 0.0;    // top-1 agreement on neutral prompts
  int nonzero = 0;
  bool vetoed = false;
  std::string veto_reason;
  std::string stage = "coarse";
};

inline EvalPoint evaluate_hyper(const BenchContext& ctx, const PipelineConfig& cfg,
                                const EditHyperparams& hyper) {
  auto [variant, topk] = variant_from_string(cfg.variant);
  EvalPoint pt;
  pt.hyper = hyper;
  EditPlan plan = build_edit_plan(ctx.model, ctx.vecs, ctx.trace, hyper, variant, topk);
  pt.nonzero = static_cast<int>(plan.entries.size());
  ModelWeights edited = apply_edit_plan(ctx.model, plan, -1.0);
  pt.attribute = ctx.base_attribute - attribute_projection(edited, ctx.trigger_prompts, ctx.d_beh);
  pt.utility = agreement(next_tokens(edited, ctx.neutral_prompts), ctx.base_next);
  VetoResult veto = sanity_veto(edited, ctx.sanity_prompts, cfg.veto);
  pt.vetoed = veto.vetoed;
  pt.veto_reason = veto.reason;
  return pt;
}

// ---------------------------------------------------------------------------
// Trade-off points and CSV export
// ---------------------------------------------------------------------------

struct TradeoffPoint {
  std::string method;  // "steering" or "edit"
  std::string params;  // deterministic parameter string
  double attribute = 0.0;
  double utility = 0.0;
};

inline void emit_tradeoff_csv(std::vector<TradeoffPoint> points, const std::string& path) {
  if (points.empty()) throw std::invalid_argument("emit_tradeoff_csv: no points");
  std::sort(points.begin(), points.end(), [](const TradeoffPoint& a, const TradeoffPoint& b) {
    return std::tie(a.method, a.params) < std::tie(b.method, b.params);
  });
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << "method,params,attribute,utility\n";
  for (const auto& p : points) {
    os << p.method << "," << p.params << "," << fmt17(p.attribute) << "," << fmt17(p.utility)
       << "\n";
  }
}

inline std::string hyper_param_string(const EditHyperparams& h, const std::string& variant) {
  auto rho_str = [](double r) { return std::isinf(r) ? std::string("inf") : fmt17(r); };
  return "rho_attn=" + rho_str(h.rho_attn) + ";rho_mlp=" + rho_str(h.rho_mlp) +
         ";alpha=" + fmt17(h.alpha) + ";variant=" + variant;
}

// ---------------------------------------------------------------------------
// Pipeline operations
// ---------------------------------------------------------------------------

inline void ensure_out_dir(const std::string& dir) {
  std::filesystem::create_directories(dir);
}

inline void run_extract(const PipelineConfig& cfg) {
  ensure_out_dir(cfg.out_dir);
  BenchContext ctx = make_bench_context(cfg);
  const std::string vj = cfg.out_dir + "/vectors.json";
  const std::string vb = cfg.out_dir + "/vectors.bin";
  save_steering_vectors(ctx.vecs, vj, vb);
  save_probe_dataset(ctx.data, cfg.out_dir + "/probe_dataset.jsonl");
  nlohmann::json norms = nlohmann::json::array();
  for (int l = 0; l < ctx.vecs.n_layers(); ++l) {
    for (BlockKind b : {BlockKind::attn, BlockKind::mlp}) {
      norms.push_back({{"layer", l}, {"block", to_string(b)},
                       {"norm", norm2(ctx.vecs.get(l, b))}});
    }
  }
  std::ofstream os(cfg.out_dir + "/extract_summary.json", std::ios::trunc);
  os << nlohmann::json{{"seed", cfg.seed}, {"block_norms", norms}}.dump(2) << "\n";
}

inline EditPlan run_edit(const PipelineConfig& cfg, const EditHyperparams& hyper,
                         const std::string& variant_str) {
  ensure_out_dir(cfg.out_dir);
  BenchContext ctx = make_bench_context(cfg);
  auto [variant, topk] = variant_from_string(variant_str);
  EditPlan plan = build_edit_plan(ctx.model, ctx.vecs, ctx.trace, hyper, variant, topk);
  ModelWeights edited = apply_edit_plan(ctx.model, plan);
  save_weights(edited, cfg.out_dir + "/edited.s2e1");
  save_edit_plan(plan, cfg.out_dir + "/plan.json", cfg.out_dir + "/plan.bin");
  save_heatmap_csv(plan, cfg.out_dir + "/heatmap.csv");
  return plan;
}

struct SearchReport {
  std::vector<EvalPoint> points;
  std::vector<std::size_t> ranking;  // indices into points, best first
  bool no_viable = false;

  nlohmann::json to_json(const PipelineConfig& cfg) const {
    nlohmann::json pts = nlohmann::json::array();
    auto rho_json = [](double r) -> nlohmann::json {
      if (std::isinf(r)) return "inf";
      return r;
    };
    for (const auto& p : points) {
      pts.push_back({{"rho_attn", rho_json(p.hyper.rho_attn)},
                     {"rho_mlp", rho_json(p.hyper.rho_mlp)},
                     {"alpha", p.hyper.alpha},
                     {"stage", p.stage},
                     {"attribute", p.attribute},
                     {"utility", p.utility},
                     {"nonzero", p.nonzero},
                     {"vetoed", p.vetoed},
                     {"veto_reason", p.veto_reason}});
    }
    nlohmann::json rank = nlohmann::json::array();
    for (std::size_t i : ranking) rank.push_back(i);
    return {{"variant", cfg.variant},
            {"seed", cfg.seed},
            {"points", pts},
            {"ranking", rank},
            {"no_viable_configuration", no_viable}};
  }
};

namespace detail {

// attribute desc, tie -> utility desc, tie -> lexicographic hyperparams asc
inline bool rank_less(const EvalPoint& a, const EvalPoint& b) {
  if (a.attribute != b.attribute) return a.attribute > b.attribute;
  if (a.utility != b.utility) return a.utility > b.utility;
  return std::tie(a.hyper.rho_attn, a.hyper.rho_mlp, a.hyper.alpha) <
         std::tie(b.hyper.rho_attn, b.hyper.rho_mlp, b.hyper.alpha);
}

// +-1 coarse step around v with 5 uniform sub-steps, clamped to the valid
// domain. A single-point coarse grid has no step and is left unrefined.
inline std::vector<double> refine_axis(double v, const std::vector<double>& coarse, bool is_alpha) {
  if (coarse.size() < 2) return {v};
  std::vector<double> sorted = coarse;
  std::sort(sorted.begin(), sorted.end());
  double step = sorted[1] - sorted[0];
  for (std::size_t i = 2; i < sorted.size(); ++i) step = std::min(step, sorted[i] - sorted[i - 1]);
  if (std::isinf(v) || std::isinf(step)) return {v};
  std::vector<double> out;
  for (int i = 0; i < 5; ++i) {
    double x = v - step + 2.0 * step * static_cast<double>(i) / 4.0;
    if (is_alpha) {
      x = std::clamp(x, 0.0, 0.99);
    } else if (x <= 0.0) {
      continue;
    }
    out.push_back(x);
  }
  return out;
}

}  // namespace detail

inline SearchReport run_search(const PipelineConfig& cfg) {
  ensure_out_dir(cfg.out_dir);
  BenchContext ctx = make_bench_context(cfg);

  std::vector<EditHyperparams> coarse;
  for (double ra : cfg.rho_attn_grid)
    for (double rm : cfg.rho_mlp_grid)
      for (double a : cfg.alpha_grid) coarse.push_back({ra, rm, a});

  SearchReport report;
  report.points.resize(coarse.size());
  parallel_for(coarse.size(), cfg.threads, [&](std::size_t i) {
    report.points[i] = evaluate_hyper(ctx, cfg, coarse[i]);
    report.points[i].stage = "coarse";
  });

  // survivors ranked by the attribute metric
  std::vector<std::size_t> survivors;
  for (std::size_t i = 0; i < report.points.size(); ++i) {
    if (!report.points[i].vetoed) survivors.push_back(i);
  }
  std::stable_sort(survivors.begin(), survivors.end(), [&](std::size_t a, std::size_t b) {
    return detail::rank_less(report.points[a], report.points[b]);
  });

  // stage 2: refined grid around the top survivors
  std::set<std::tuple<double, double, double>> seen;
  for (const auto& h : coarse) seen.insert({h.rho_attn, h.rho_mlp, h.alpha});
  std::vector<EditHyperparams> refined;
  const std::size_t n_refine = std::min<std::size_t>(static_cast<std::size_t>(cfg.refine_top),
                                                     survivors.size());
  for (std::size_t s = 0; s < n_refine; ++s) {
    const EditHyperparams& h = report.points[survivors[s]].hyper;
    for (double ra : detail::refine_axis(h.rho_attn, cfg.rho_attn_grid, false))
      for (double rm : detail::refine_axis(h.rho_mlp, cfg.rho_mlp_grid, false))
        for (double a : detail::refine_axis(h.alpha, cfg.alpha_grid, true)) {
          if (seen.insert({ra, rm, a}).second) refined.push_back({ra, rm, a});
        }
  }
  const std::size_t base = report.points.size();
  report.points.resize(base + refined.size());
  parallel_for(refined.size(), cfg.threads, [&](std::size_t i) {
    report.points[base + i] = evaluate_hyper(ctx, cfg, refined[i]);
    report.points[base + i].stage = "refined";
  });

  std::vector<std::size_t> all_ok;
  for (std::size_t i = 0; i < report.points.size(); ++i) {
    if (!report.points[i].vetoed) all_ok.push_back(i);
  }
  std::stable_sort(all_ok.begin(), all_ok.end(), [&](std::size_t a, std::size_t b) {
    return detail::rank_less(report.points[a], report.points[b]);
  });
  if (all_ok.empty()) {
    report.no_viable = true;
  } else {
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(cfg.top_k),
                                                all_ok.size());
    report.ranking.assign(all_ok.begin(), all_ok.begin() + k);
  }

  std::ofstream os(cfg.out_dir + "/search_report.json", std::ios::trunc);
  os << report.to_json(cfg).dump(2) << "\n";
  return report;
}

inline std::vector<TradeoffPoint> run_budget_sweep(const PipelineConfig& cfg, BlockKind varied) {
  ensure_out_dir(cfg.out_dir);
  BenchContext ctx = make_bench_context(cfg);
  const std::vector<double>& grid =
      varied == BlockKind::attn ? cfg.rho_attn_grid : cfg.rho_mlp_grid;
  const double alpha = cfg.alpha_grid.front();

  std::vector<EvalPoint> evals(grid.size());
  parallel_for(grid.size(), cfg.threads, [&](std::size_t i) {
    EditHyperparams h;
    h.alpha = alpha;
    if (varied == BlockKind::attn) {
      h.rho_attn = grid[i];
      h.rho_mlp = kInfBudget;
    } else {
      h.rho_mlp = grid[i];
      h.rho_attn = kInfBudget;
    }
    evals[i] = evaluate_hyper(ctx, cfg, h);
  });

  std::vector<TradeoffPoint> points;
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    points.push_back({"edit", hyper_param_string(evals[i].hyper, cfg.variant),
                      evals[i].attribute, evals[i].utility});
    rows.push_back({{"rho", std::isinf(grid[i]) ? nlohmann::json("inf") : nlohmann::json(grid[i])},
                    {"attribute", evals[i].attribute},
                    {"utility", evals[i].utility},
                    {"nonzero", evals[i].nonzero}});
  }
  emit_tradeoff_csv(points, cfg.out_dir + "/sweep_tradeoff.csv");
  std::ofstream os(cfg.out_dir + "/sweep_report.json", std::ios::trunc);
  os << nlohmann::json{{"varied", to_string(varied)}, {"alpha", alpha}, {"points", rows}}.dump(2)
     << "\n";
  return points;
}

struct BenchReport {
  double cos_planted = 0.0;       // cos(v_attn at planted layer, d_beh)
  int rank_by_g = 0;              // planted head's rank among attn heads by |g| (1 = top)
  int rank_by_lambda = 0;         // planted head's rank among attn heads by |lambda|
  double base_attribute = 0.0;
  double edited_attribute = 0.0;  // after the suppression-oriented edit
  double utility = 0.0;
  std::vector<TradeoffPoint> points;
};

inline BenchReport run_synthetic_bench(const PipelineConfig& cfg) {
  ensure_out_dir(cfg.out_dir);
  BenchContext ctx = make_bench_context(cfg);
  BenchReport rep;
  rep.cos_planted = cosine(ctx.vecs.get(ctx.spec.planted.layer, BlockKind::attn), ctx.d_beh);

  auto [variant, topk] = variant_from_string(cfg.variant);
  EditHyperparams hyper{cfg.rho_attn_grid.front(), cfg.rho_mlp_grid.front(),
                        cfg.alpha_grid.front()};
  EditPlan plan = build_edit_plan(ctx.model, ctx.vecs, ctx.trace, hyper, variant, topk);

  // planted head's rank among attention heads by |g| and |lambda|
  std::vector<const EditPlan::Diagnostic*> heads;
  for (const auto& d : plan.diagnostics) {
    if (d.id.block == BlockKind::attn) heads.push_back(&d);
  }
  auto rank_of = [&](auto key) {
    int rank = 1;
    double planted_val = 0.0;
    for (const auto* d : heads) {
      if (d->id == ctx.spec.planted) planted_val = key(*d);
    }
    for (const auto* d : heads) {
      if (!(d->id == ctx.spec.planted) && key(*d) > planted_val) ++rank;
    }
    return rank;
  };
  rep.rank_by_g = rank_of([](const EditPlan::Diagnostic& d) { return std::abs(d.g); });
  rep.rank_by_lambda = rank_of([](const EditPlan::Diagnostic& d) { return std::abs(d.lambda); });

  ModelWeights suppressed = apply_edit_plan(ctx.model, plan, -1.0);
  rep.base_attribute = ctx.base_attribute;
  rep.edited_attribute = attribute_projection(suppressed, ctx.trigger_prompts, ctx.d_beh);
  rep.utility = agreement(next_tokens(suppressed, ctx.neutral_prompts), ctx.base_next);

  // steering points (gamma grid) and edit points (hyper grid), both measured
  // as raw behavior projection vs. agreement with the unedited model
  for (double gamma : cfg.gamma_grid) {
    SteeringHook hook;
    hook.gamma = gamma;
    hook.vectors = &ctx.vecs;
    BlockHook bh = hook.to_block_hook();
    double attr;
    {
      double acc = 0.0;
      CaptureSpec cap;
      cap.residuals = true;
      for (const auto& prompt : ctx.trigger_prompts) {
        ForwardResult fr = forward(ctx.model, prompt, cap, &bh);
        acc += dot(fr.trace->final_resid.back(), ctx.d_beh);
      }
      attr = acc / static_cast<double>(ctx.trigger_prompts.size());
    }
    std::vector<int> steered(ctx.neutral_prompts.size());
    for (std::size_t i = 0; i < ctx.neutral_prompts.size(); ++i) {
      steered[i] = argmax_token(forward(ctx.model, ctx.neutral_prompts[i], {}, &bh).logits.back());
    }
    rep.points.push_back({"steering", "gamma=" + fmt17(gamma), attr,
                          agreement(steered, ctx.base_next)});
  }
  std::vector<EditHyperparams> grid;
  for (double ra : cfg.rho_attn_grid)
    for (double rm : cfg.rho_mlp_grid)
      for (double a : cfg.alpha_grid) grid.push_back({ra, rm, a});
  std::vector<EvalPoint> evals(grid.size());
  parallel_for(grid.size(), cfg.threads, [&](std::size_t i) {
    evals[i] = evaluate_hyper(ctx, cfg, grid[i]);
  });
  for (const auto& e : evals) {
    rep.points.push_back({"edit", hyper_param_string(e.hyper, cfg.variant),
                          rep.base_attribute - e.attribute, e.utility});
  }

  emit_tradeoff_csv(rep.points, cfg.out_dir + "/bench_tradeoff.csv");
  nlohmann::json jrep{{"construction",
                       {{"weight_scale", kToyWeightScale},
                        {"value_gain", kPlantValueGain},
                        {"output_gain", kPlantOutputGain},
                        {"planted_layer", ctx.spec.planted.layer},
                        {"planted_head", ctx.spec.planted.index},
                        {"trigger_token", ctx.spec.trigger_token},
                        {"seed", cfg.seed}}},
                      {"cos_planted", rep.cos_planted},
                      {"rank_by_g", rep.rank_by_g},
                      {"rank_by_lambda", rep.rank_by_lambda},
                      {"base_attribute", rep.base_attribute},
                      {"edited_attribute", rep.edited_attribute},
                      {"utility", rep.utility}};
  std::ofstream os(cfg.out_dir + "/bench_report.json", std::ios::trunc);
  os << jrep.dump(2) << "\n";
  return rep;
}

}  // namespace s2e
