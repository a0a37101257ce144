#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "steer2edit/editor.hpp"
#include "steer2edit/linalg.hpp"
#include "steer2edit/model.hpp"
#include "steer2edit/rng.hpp"

// Brute-force verifiers, independent of the editor's code paths for the
// quantities under test. They draw from their own seeded random stream.

namespace s2e {

constexpr std::uint64_t kOracleSeed = 0x5EED0AC1Eull;

struct OracleReport {
  std::string name;
  int trials = 0;
  double max_violation = 0.0;
  double tolerance = 0.0;
  bool pass = false;

  nlohmann::json to_json() const {
    return {{"name", name},
            {"trials", trials},
            {"max_violation", max_violation},
            {"tolerance", tolerance},
            {"pass", pass}};
  }
};

// Samples random h and random z projected orthogonal to v; reports the max of
// |z^T dW h| / (|z| |dW|_F |h|). A rank-1 edit along v must score ~0.
inline OracleReport verify_semantic_invariance(const Matrix& delta_w, const Vec& v, int n_trials,
                                               double tol, std::uint64_t seed = kOracleSeed) {
  if (delta_w.rows != v.size()) {
    throw std::invalid_argument("verify_semantic_invariance: deltaW rows must match v length");
  }
  OracleReport rep;
  rep.name = "semantic_invariance";
  rep.trials = n_trials;
  rep.tolerance = tol;
  const double fro = frobenius_norm(delta_w);
  if (fro == 0.0) {
    rep.max_violation = 0.0;
    rep.pass = true;
    return rep;
  }
  Rng rng(seed);
  const Vec v_hat = normalized(v);
  double worst = 0.0;
  for (int t = 0; t < n_trials; ++t) {
    Vec h(delta_w.cols);
    for (double& x : h) x = rng.next_gaussian();
    Vec z(delta_w.rows);
    for (double& x : z) x = rng.next_gaussian();
    add_scaled_inplace(z, v_hat, -dot(z, v_hat));  // project out v
    const double nz = norm2(z);
    const double nh = norm2(h);
    if (nz == 0.0 || nh == 0.0) continue;
    const double viol = std::abs(dot(z, matvec(delta_w, h))) / (nz * fro * nh);
    worst = std::max(worst, viol);
  }
  rep.max_violation = worst;
  rep.pass = worst <= tol;
  return rep;
}

// |Pearson(Delta s, s)| must hit 1 for k = normalized(W^T v) and dominate
// every random unit-k probe. Delta s(h) = k^T h up to a positive factor.
inline OracleReport pearson_optimality_oracle(const Matrix& w, const Vec& v,
                                              const std::vector<Vec>& h_samples, int n_probes,
                                              std::uint64_t seed = kOracleSeed) {
  OracleReport rep;
  rep.name = "pearson_optimality";
  rep.trials = n_probes;
  rep.tolerance = 1e-9;
  if (h_samples.size() < 2) throw std::invalid_argument("pearson oracle: degenerate sample");

  std::vector<double> s(h_samples.size());
  for (std::size_t i = 0; i < h_samples.size(); ++i) s[i] = dot(v, matvec(w, h_samples[i]));

  auto abs_pearson_for = [&](const Vec& k) {
    std::vector<double> ds(h_samples.size());
    for (std::size_t i = 0; i < h_samples.size(); ++i) ds[i] = dot(k, h_samples[i]);
    return std::abs(pearson(ds, s));  // throws on degenerate variance
  };

  std::optional<Vec> k_hat = input_direction(w, v);
  if (!k_hat) throw std::invalid_argument("pearson oracle: W^T v = 0");
  const double best = abs_pearson_for(*k_hat);

  Rng rng(seed);
  double probe_max = 0.0;
  for (int t = 0; t < n_probes; ++t) {
    Vec k(w.cols);
    for (double& x : k) x = rng.next_gaussian();
    if (norm2(k) == 0.0) continue;
    double p;
    try {
      p = abs_pearson_for(normalized(k));
    } catch (const std::invalid_argument&) {
      continue;  // probe with zero variance carries no information
    }
    probe_max = std::max(probe_max, p);
  }
  rep.max_violation = std::max(1.0 - best, probe_max - best);
  rep.pass = (std::abs(best - 1.0) <= 1e-9) && (best >= probe_max - 1e-9);
  return rep;
}

// Default bracket guaranteed to contain the closed-form optimum.
inline double default_grid_halfwidth(double g, double rho, double alpha) {
  return 2.0 * (std::abs(g) / (rho * (1.0 - alpha)) + 1.0);
}

// Grid argmax of J(l) = g*l - rho*(alpha*|l| + (1-alpha)/2 * l^2) over a
// uniform grid centered at 0.
inline double elastic_net_scalar_oracle(double g, double rho, double alpha, double grid_halfwidth,
                                        int grid_points) {
  if (!(rho > 0.0)) throw std::invalid_argument("elastic_net_scalar_oracle: rho must be > 0");
  if (!(alpha >= 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("elastic_net_scalar_oracle: alpha must lie in [0, 1)");
  }
  if (grid_points < 1000) {
    throw std::invalid_argument("elastic_net_scalar_oracle: need at least 10^3 grid points");
  }
  double best_l = 0.0;
  double best_j = -1e300;
  for (int i = 0; i < grid_points; ++i) {
    const double l = -grid_halfwidth +
                     2.0 * grid_halfwidth * static_cast<double>(i) /
                         static_cast<double>(grid_points - 1);
    const double j = g * l - rho * (alpha * std::abs(l) + 0.5 * (1.0 - alpha) * l * l);
    if (j > best_j) {
      best_j = j;
      best_l = l;
    }
  }
  return best_l;
}

// Runs the original and edited model with capture and checks that the edited
// block output shifts by exactly lambda * (k^T h) * u at every position, with
// upstream activations bitwise unchanged.
inline OracleReport component_shift_oracle(const ModelWeights& w, const EditPlan& plan,
                                           const std::vector<int>& probe_tokens,
                                           double tol = 1e-9) {
  if (plan.entries.size() != 1) {
    throw std::invalid_argument("component_shift_oracle: plan must hold exactly one entry");
  }
  OracleReport rep;
  rep.name = "component_shift";
  rep.tolerance = tol;
  const auto& [id, entry] = *plan.entries.begin();

  CaptureSpec cap = CaptureSpec::all();
  ForwardResult base = forward(w, probe_tokens, cap);
  ModelWeights edited = apply_edit_plan(w, plan);
  ForwardResult mod = forward(edited, probe_tokens, cap);

  const int len = static_cast<int>(probe_tokens.size());
  double worst = 0.0;

  // upstream layers must be bitwise unchanged
  for (int l = 0; l < id.layer; ++l) {
    for (int p = 0; p < len; ++p) {
      for (std::size_t j = 0; j < base.trace->attn_out[l][p].size(); ++j) {
        if (base.trace->attn_out[l][p][j] != mod.trace->attn_out[l][p][j] ||
            base.trace->mlp_out[l][p][j] != mod.trace->mlp_out[l][p][j]) {
          rep.max_violation = 1.0;
          return rep;
        }
      }
    }
  }

  for (int p = 0; p < len; ++p) {
    const Vec h = id.block == BlockKind::attn
                      ? base.trace->head_in[id.layer][p][id.index]
                      : Vec{base.trace->neuron_act[id.layer][p][id.index]};
    const double coef = entry.lambda * dot(entry.k_hat, h);
    const Vec& before = id.block == BlockKind::attn ? base.trace->attn_out[id.layer][p]
                                                    : base.trace->mlp_out[id.layer][p];
    const Vec& after = id.block == BlockKind::attn ? mod.trace->attn_out[id.layer][p]
                                                   : mod.trace->mlp_out[id.layer][p];
    for (std::size_t j = 0; j < before.size(); ++j) {
      const double expected = coef * entry.u_hat[j];
      worst = std::max(worst, std::abs((after[j] - before[j]) - expected));
    }
    rep.trials += 1;
  }
  rep.max_violation = worst;
  rep.pass = worst <= tol;
  return rep;
}

}  // namespace s2e
