#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "steer2edit/linalg.hpp"
#include "steer2edit/model.hpp"
#include "steer2edit/model_io.hpp"
#include "steer2edit/steering.hpp"

namespace s2e {

constexpr double kInfBudget = std::numeric_limits<double>::infinity();

struct EditHyperparams {
  double rho_attn = 1.0;  // +inf disables attention edits
  double rho_mlp = 1.0;   // +inf disables MLP edits
  double alpha = 0.0;

  void validate() const {
    if (!(rho_attn > 0.0) || !(rho_mlp > 0.0)) {
      throw std::invalid_argument("EditHyperparams: rho must be > 0 (or inf)");
    }
    if (!(alpha >= 0.0 && alpha < 1.0)) {
      throw std::invalid_argument("EditHyperparams: alpha must lie in [0, 1)");
    }
  }

  double rho(BlockKind b) const { return b == BlockKind::attn ? rho_attn : rho_mlp; }
};

enum class EditVariant { steer2edit, k_mean, k_svd, g_dot, l0_topk, l2_dense };

inline std::string to_string(EditVariant v, int topk = 0) {
  switch (v) {
    case EditVariant::steer2edit: return "steer2edit";
    case EditVariant::k_mean: return "k_mean";
    case EditVariant::k_svd: return "k_svd";
    case EditVariant::g_dot: return "g_dot";
    case EditVariant::l0_topk: return "l0:" + std::to_string(topk);
    case EditVariant::l2_dense: return "l2";
  }
  return "?";
}

// Accepts "steer2edit", "k_mean", "k_svd", "g_dot", "l0:<K>", "l2".
inline std::pair<EditVariant, int> variant_from_string(const std::string& s) {
  if (s == "steer2edit") return {EditVariant::steer2edit, 0};
  if (s == "k_mean") return {EditVariant::k_mean, 0};
  if (s == "k_svd") return {EditVariant::k_svd, 0};
  if (s == "g_dot") return {EditVariant::g_dot, 0};
  if (s == "l2") return {EditVariant::l2_dense, 0};
  if (s.rfind("l0:", 0) == 0) {
    const int k = std::stoi(s.substr(3));
    if (k < 0) throw std::invalid_argument("l0 top-K must be >= 0");
    return {EditVariant::l0_topk, k};
  }
  throw std::invalid_argument("unknown edit variant: " + s);
}

struct ComponentStats {
  ComponentId id;
  Vec mu;                        // mean component input over probe activations
  Vec v;                         // block-level steering vector for this component
  Vec wt_v;                      // W^T v
  double g = 0.0;                // importance score
  std::vector<double> s_samples; // semantic alignment scores per sampled input
};

struct EditEntry {
  double lambda = 0.0;
  Vec u_hat;  // d_model
  Vec k_hat;  // d_in of the component
};

struct EditPlan {
  EditHyperparams hyper;
  EditVariant variant = EditVariant::steer2edit;
  int topk = 0;
  std::map<ComponentId, EditEntry> entries;  // nonzero-lambda entries only

  struct Diagnostic {
    ComponentId id;
    double g = 0.0;
    double lambda = 0.0;
  };
  std::vector<Diagnostic> diagnostics;  // every editable component, canonical order
};

inline Vec component_mean_input(const ActivationTrace& trace, const ComponentId& id) {
  check_component_id(trace.config, id);
  const int d_in = id.block == BlockKind::attn ? trace.config.d_head : 1;
  Vec mean(d_in, 0.0);
  std::size_t n = 0;
  for (const SeqTrace& s : trace.seqs) {
    if ((id.block == BlockKind::attn && s.head_in.empty()) ||
        (id.block == BlockKind::mlp && s.neuron_act.empty())) {
      throw std::runtime_error("component_mean_input: trace lacks component inputs for block " +
                               std::string(to_string(id.block)));
    }
    for (int p = 0; p < s.len; ++p) {
      if (!s.response_mask[p]) continue;
      if (id.block == BlockKind::attn) {
        add_inplace(mean, s.head_in[id.layer][p][id.index]);
      } else {
        mean[0] += s.neuron_act[id.layer][p][id.index];
      }
      ++n;
    }
  }
  if (n == 0) throw std::runtime_error("component_mean_input: no masked positions in trace");
  for (double& x : mean) x /= static_cast<double>(n);
  return mean;
}

inline Vec output_direction(const Vec& v) {
  if (norm2(v) == 0.0) throw std::runtime_error("degenerate steering vector");
  return normalized(v);
}

// Unit vector along W^T v; nullopt signals a component insensitive to the
// direction (caller sets lambda = 0 and skips).
inline std::optional<Vec> input_direction(const Matrix& w, const Vec& v) {
  Vec wtv = matvec_t(w, v);
  if (norm2(wtv) == 0.0) return std::nullopt;
  return normalized(wtv);
}

inline double importance_score(const Matrix& w, const Vec& mu, const Vec& v) {
  return cosine(v, matvec(w, mu));
}

inline double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// Soft-threshold maximizer of g*l - rho*(alpha*|l| + (1-alpha)/2 * l^2).
inline double edit_magnitude(double g, double rho, double alpha) {
  if (std::isinf(rho)) return 0.0;
  if (!(rho > 0.0)) throw std::invalid_argument("edit_magnitude: rho must be > 0");
  if (!(alpha >= 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("edit_magnitude: alpha must lie in [0, 1)");
  }
  const double excess = std::abs(g) - rho * alpha;
  if (excess <= 0.0) return 0.0;
  return sign_of(g) * excess / (rho * (1.0 - alpha));
}

// Power iteration on W^T W with a fixed deterministic start (normalized ones
// vector). A flat spectrum keeps the start direction, which is the documented
// convention for c*I inputs.
inline Vec top_right_singular_vector(const Matrix& w, int iters = 200, double tol = 1e-12) {
  if (frobenius_norm(w) == 0.0) {
    throw std::invalid_argument("top_right_singular_vector: zero matrix");
  }
  Vec x(w.cols, 1.0 / std::sqrt(static_cast<double>(w.cols)));
  double prev_sigma2 = -1.0;
  for (int it = 0; it < iters; ++it) {
    Vec y = matvec_t(w, matvec(w, x));
    const double sigma2 = dot(x, y);
    const double ny = norm2(y);
    if (ny == 0.0) {
      // start vector lies in the null space; restart off-axis
      x.assign(w.cols, 0.0);
      x[it % w.cols] = 1.0;
      prev_sigma2 = -1.0;
      continue;
    }
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = y[i] / ny;
    if (prev_sigma2 >= 0.0 && std::abs(sigma2 - prev_sigma2) <= tol * std::max(1.0, sigma2)) {
      return x;
    }
    prev_sigma2 = sigma2;
  }
  const Vec y = matvec_t(w, matvec(w, x));
  const double resid = norm2(sub(y, scaled(x, dot(x, y))));
  throw std::runtime_error("top_right_singular_vector: no convergence, residual " +
                           std::to_string(resid));
}

inline ComponentStats compute_component_stats(const ModelWeights& w, const SteeringVectorSet& vecs,
                                              const ActivationTrace& trace,
                                              const ComponentId& id) {
  ComponentStats st;
  st.id = id;
  st.v = vecs.get(id.layer, id.block);
  const Matrix W = component_weight(w, id);
  st.mu = component_mean_input(trace, id);
  st.wt_v = matvec_t(W, st.v);
  st.g = importance_score(W, st.mu, st.v);
  for (const SeqTrace& s : trace.seqs) {
    for (int p = 0; p < s.len; ++p) {
      if (!s.response_mask[p]) continue;
      const Vec h = id.block == BlockKind::attn ? s.head_in[id.layer][p][id.index]
                                                : Vec{s.neuron_act[id.layer][p][id.index]};
      st.s_samples.push_back(dot(st.v, matvec(W, h)));
    }
  }
  return st;
}

inline EditPlan build_edit_plan(const ModelWeights& w, const SteeringVectorSet& vecs,
                                const ActivationTrace& trace, const EditHyperparams& hyper,
                                EditVariant variant, int topk = 0) {
  hyper.validate();
  if (vecs.n_layers() != w.config.n_layers || vecs.d_model() != w.config.d_model) {
    throw std::invalid_argument("build_edit_plan: steering vectors do not match model config");
  }
  EditPlan plan;
  plan.hyper = hyper;
  plan.variant = variant;
  plan.topk = topk;

  struct Candidate {
    ComponentId id;
    double g = 0.0;
    Vec u_hat;
    Vec k_hat;
    bool eligible = false;
  };
  std::vector<Candidate> cands;

  for (const ComponentId& id : editable_components(w.config)) {
    Candidate c;
    c.id = id;
    const double rho = hyper.rho(id.block);
    if (std::isinf(rho)) {
      cands.push_back(std::move(c));
      continue;
    }
    const Vec& v = vecs.get(id.layer, id.block);
    if (norm2(v) == 0.0) {
      throw std::runtime_error("degenerate steering vector at layer " + std::to_string(id.layer) +
                               " block " + to_string(id.block) + " with finite budget");
    }
    const Matrix W = component_weight(w, id);
    const Vec mu = component_mean_input(trace, id);
    const Vec wmu = matvec(W, mu);

    // importance score: cosine by default, unnormalized dot for g_dot
    if (variant == EditVariant::g_dot) {
      c.g = dot(normalized(v), wmu);
    } else {
      c.g = cosine(v, wmu);
    }

    c.u_hat = normalized(v);

    // input direction per variant; degenerate components are skipped
    switch (variant) {
      case EditVariant::k_mean: {
        if (norm2(mu) == 0.0) break;
        c.k_hat = normalized(mu);
        c.eligible = true;
        break;
      }
      case EditVariant::k_svd: {
        if (frobenius_norm(W) == 0.0) break;
        c.k_hat = top_right_singular_vector(W);
        c.eligible = true;
        break;
      }
      default: {
        std::optional<Vec> k = input_direction(W, v);
        if (!k) break;
        c.k_hat = std::move(*k);
        c.eligible = true;
        break;
      }
    }
    cands.push_back(std::move(c));
  }

  // magnitude allocation
  std::vector<double> lambda(cands.size(), 0.0);
  if (variant == EditVariant::l0_topk) {
    // hard selection: per component class, keep the top-K |g| among eligible
    // candidates; kept entries use the unshrunk magnitude sign(g)|g|/(rho(1-a)).
    for (BlockKind b : {BlockKind::attn, BlockKind::mlp}) {
      const double rho = hyper.rho(b);
      if (std::isinf(rho)) continue;
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < cands.size(); ++i) {
        if (cands[i].id.block == b && cands[i].eligible && cands[i].g != 0.0) idx.push_back(i);
      }
      // ties at equal |g|: lower ComponentId wins (idx is already canonical)
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t c) {
        return std::abs(cands[a].g) > std::abs(cands[c].g);
      });
      const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(topk), idx.size());
      for (std::size_t r = 0; r < keep; ++r) {
        const Candidate& c = cands[idx[r]];
        lambda[idx[r]] = sign_of(c.g) * std::abs(c.g) / (rho * (1.0 - hyper.alpha));
      }
    }
  } else {
    const double alpha = variant == EditVariant::l2_dense ? 0.0 : hyper.alpha;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      if (!cands[i].eligible) continue;
      lambda[i] = edit_magnitude(cands[i].g, hyper.rho(cands[i].id.block), alpha);
    }
  }

  for (std::size_t i = 0; i < cands.size(); ++i) {
    plan.diagnostics.push_back({cands[i].id, cands[i].g, lambda[i]});
    if (lambda[i] != 0.0) {
      plan.entries[cands[i].id] = EditEntry{lambda[i], cands[i].u_hat, cands[i].k_hat};
    }
  }
  return plan;
}

inline ModelWeights apply_edit_plan(const ModelWeights& w, const EditPlan& plan,
                                    double scale = 1.0) {
  ModelWeights out = w;
  for (const auto& [id, entry] : plan.entries) {
    check_component_id(w.config, id);
    Matrix cw = component_weight(out, id);
    if (entry.u_hat.size() != cw.rows || entry.k_hat.size() != cw.cols) {
      throw std::invalid_argument("apply_edit_plan: entry shape mismatch for layer " +
                                  std::to_string(id.layer));
    }
    for (std::size_t r = 0; r < cw.rows; ++r)
      for (std::size_t c = 0; c < cw.cols; ++c)
        cw.at(r, c) += scale * entry.lambda * entry.u_hat[r] * entry.k_hat[c];
    out = set_component_weight(out, id, cw);
  }
  return out;
}

// --- file formats ---

namespace detail {

inline nlohmann::json hyper_to_json(const EditHyperparams& h) {
  auto enc = [](double rho) -> nlohmann::json {
    if (std::isinf(rho)) return "inf";
    return rho;
  };
  return {{"rho_attn", enc(h.rho_attn)}, {"rho_mlp", enc(h.rho_mlp)}, {"alpha", h.alpha}};
}

inline EditHyperparams hyper_from_json(const nlohmann::json& j) {
  auto dec = [](const nlohmann::json& v) -> double {
    if (v.is_string()) {
      if (v.get<std::string>() == "inf") return kInfBudget;
      throw std::runtime_error("invalid rho value: " + v.get<std::string>());
    }
    return v.get<double>();
  };
  EditHyperparams h;
  h.rho_attn = dec(j.at("rho_attn"));
  h.rho_mlp = dec(j.at("rho_mlp"));
  h.alpha = j.at("alpha").get<double>();
  h.validate();
  return h;
}

}  // namespace detail

inline void save_edit_plan(const EditPlan& plan, const std::string& json_path,
                           const std::string& bin_path) {
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot open for writing: " + bin_path);
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  auto emit = [&](const Vec& v) {
    detail::write_f32_block(bin, v);
    const std::uint64_t at = offset;
    offset += v.size() * sizeof(float);
    return at;
  };
  for (const auto& [id, e] : plan.entries) {
    double g = 0.0;
    for (const auto& d : plan.diagnostics) {
      if (d.id == id) g = d.g;
    }
    nlohmann::json je{{"layer", id.layer},
                      {"block", to_string(id.block)},
                      {"index", id.index},
                      {"g", g},
                      {"lambda", e.lambda},
                      {"u_offset", emit(e.u_hat)},
                      {"u_len", e.u_hat.size()},
                      {"k_offset", emit(e.k_hat)},
                      {"k_len", e.k_hat.size()}};
    entries.push_back(je);
  }
  nlohmann::json diags = nlohmann::json::array();
  for (const auto& d : plan.diagnostics) {
    diags.push_back({{"layer", d.id.layer},
                     {"block", to_string(d.id.block)},
                     {"index", d.id.index},
                     {"g", d.g},
                     {"lambda", d.lambda}});
  }
  nlohmann::json index{{"hyper", detail::hyper_to_json(plan.hyper)},
                       {"variant", to_string(plan.variant, plan.topk)},
                       {"data_file", bin_path.substr(bin_path.find_last_of('/') + 1)},
                       {"entries", entries},
                       {"diagnostics", diags}};
  std::ofstream os(json_path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + json_path);
  os << index.dump(2) << "\n";
}

inline EditPlan load_edit_plan(const std::string& json_path, const std::string& bin_path) {
  std::ifstream is(json_path);
  if (!is) throw std::runtime_error("cannot open: " + json_path);
  nlohmann::json index = nlohmann::json::parse(is);
  EditPlan plan;
  plan.hyper = detail::hyper_from_json(index.at("hyper"));
  auto [variant, topk] = variant_from_string(index.at("variant").get<std::string>());
  plan.variant = variant;
  plan.topk = topk;
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open: " + bin_path);
  auto read_at = [&](std::uint64_t off, std::size_t len, const std::string& name) {
    bin.seekg(static_cast<std::streamoff>(off));
    return detail::read_f32_block(bin, len, name);
  };
  for (const auto& e : index.at("entries")) {
    ComponentId id{e.at("layer").get<int>(),
                   e.at("block").get<std::string>() == "attn" ? BlockKind::attn : BlockKind::mlp,
                   e.at("index").get<int>()};
    EditEntry entry;
    entry.lambda = e.at("lambda").get<double>();
    entry.u_hat = read_at(e.at("u_offset").get<std::uint64_t>(), e.at("u_len").get<std::size_t>(),
                          "u_hat");
    entry.k_hat = read_at(e.at("k_offset").get<std::uint64_t>(), e.at("k_len").get<std::size_t>(),
                          "k_hat");
    plan.entries[id] = std::move(entry);
  }
  for (const auto& d : index.at("diagnostics")) {
    plan.diagnostics.push_back(
        {ComponentId{d.at("layer").get<int>(),
                     d.at("block").get<std::string>() == "attn" ? BlockKind::attn : BlockKind::mlp,
                     d.at("index").get<int>()},
         d.at("g").get<double>(), d.at("lambda").get<double>()});
  }
  return plan;
}

// CSV rows (layer, block, index, g, lambda) in canonical order; the data
// behind the signed-coefficient heatmaps.
inline void save_heatmap_csv(const EditPlan& plan, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << "layer,block,index,g,lambda\n";
  char buf[64];
  for (const auto& d : plan.diagnostics) {
    os << d.id.layer << "," << to_string(d.id.block) << "," << d.id.index << ",";
    std::snprintf(buf, sizeof(buf), "%.17g", d.g);
    os << buf << ",";
    std::snprintf(buf, sizeof(buf), "%.17g", d.lambda);
    os << buf << "\n";
  }
}

}  // namespace s2e
