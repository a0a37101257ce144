// Command-line front end: steering-vector extraction, rank-1 weight edits,
// activation steering, hyperparameter search, budget sweeps, the synthetic
// benchmark, report aggregation, and the numeric oracle suite.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "steer2edit/harness.hpp"

namespace {

struct GlobalOpts {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  int threads = 0;
  bool seed_set = false;
  bool out_set = false;
  bool threads_set = false;
};

s2e::PipelineConfig make_config(const GlobalOpts& g) {
  s2e::PipelineConfig cfg;
  if (!g.config_path.empty()) cfg = s2e::load_pipeline_config(g.config_path);
  if (g.seed_set) cfg.seed = g.seed;
  if (g.out_set) cfg.out_dir = g.out_dir;
  if (g.threads_set) cfg.threads = g.threads;
  return cfg;
}

double parse_rho(const std::string& s) {
  if (s == "inf") return s2e::kInfBudget;
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw CLI::ValidationError("rho", "expected a number or 'inf': " + s);
  return v;
}

void read_if_present(nlohmann::json& out, const std::string& dir, const std::string& name) {
  std::ifstream is(dir + "/" + name);
  if (!is) return;
  out[name.substr(0, name.find('.'))] = nlohmann::json::parse(is);
}

int run_verify(const s2e::PipelineConfig& user_cfg) {
  using namespace s2e;
  PipelineConfig cfg = user_cfg;
  if (cfg.model_path.empty()) {
    cfg.model_cfg = ModelConfig{16, 2, 2, 4, 24, 32, 32,
                                NormKind::rms, MlpKind::gated_silu, PosKind::rotary};
    cfg.bench.planted = {1, BlockKind::attn, 1};
    cfg.bench.prompt_len = 6;
  }
  BenchContext ctx = make_bench_context(cfg);
  EditHyperparams hyper{cfg.rho_attn_grid.front(), cfg.rho_mlp_grid.front(),
                        cfg.alpha_grid.front()};
  EditPlan plan = build_edit_plan(ctx.model, ctx.vecs, ctx.trace, hyper,
                                  EditVariant::steer2edit, 0);
  if (plan.entries.empty()) throw std::runtime_error("verify: edit plan is empty");

  bool all_pass = true;
  auto emit = [&](const OracleReport& rep) {
    std::cout << rep.to_json().dump() << "\n";
    all_pass = all_pass && rep.pass;
  };

  const auto& [id, entry] = *plan.entries.begin();
  const Vec& v = ctx.vecs.get(id.layer, id.block);

  // 1. rank-1 edits never move activity orthogonal to the steering direction
  const Matrix delta_w = outer(entry.u_hat, entry.k_hat, entry.lambda);
  emit(verify_semantic_invariance(delta_w, v, 1000, 1e-9));

  // 2. the chosen input direction maximizes |Pearson(delta s, s)|
  {
    const ComponentId planted = ctx.spec.planted;
    Matrix w_slab = component_weight(ctx.model, planted);
    std::vector<Vec> h_samples;
    for (const auto& seq : ctx.trace.seqs) {
      for (int p = 0; p < seq.len; ++p) {
        if (seq.response_mask[p]) {
          h_samples.push_back(seq.head_in[planted.layer][p][planted.index]);
        }
      }
    }
    emit(pearson_optimality_oracle(w_slab, ctx.vecs.get(planted.layer, BlockKind::attn),
                                   h_samples, 200));
  }

  // 3. closed-form magnitude matches a dense grid argmax of the penalized gain
  {
    OracleReport rep;
    rep.name = "elastic_net_magnitude";
    const double triples[][3] = {{0.8, 0.5, 0.5}, {-0.3, 0.4, 0.5}, {0.05, 0.5, 0.5},
                                 {0.9, 0.2, 0.0}, {-0.7, 1.0, 0.9}, {0.0, 0.5, 0.3}};
    const int points = 200001;
    double worst = 0.0;
    double tol = 0.0;
    for (const auto& t : triples) {
      const double halfwidth = default_grid_halfwidth(t[0], t[1], t[2]);
      const double grid = elastic_net_scalar_oracle(t[0], t[1], t[2], halfwidth, points);
      const double closed = edit_magnitude(t[0], t[1], t[2]);
      worst = std::max(worst, std::abs(grid - closed));
      tol = std::max(tol, 2.0 * halfwidth / (points - 1));
      rep.trials += 1;
    }
    rep.max_violation = worst;
    rep.tolerance = tol;
    rep.pass = worst <= tol;
    emit(rep);
  }

  // 4. a single-component edit shifts exactly its own block output
  {
    EditPlan single = plan;
    single.entries = {{id, entry}};
    emit(component_shift_oracle(ctx.model, single, ctx.trigger_prompts.front()));
  }

  return all_pass ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"steering vectors and closed-form rank-1 weight edits"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOpts g;
  auto* opt_config = app.add_option("--config", g.config_path, "pipeline config JSON");
  auto* opt_seed = app.add_option("--seed", g.seed, "random seed");
  auto* opt_out = app.add_option("--out", g.out_dir, "output directory");
  auto* opt_threads = app.add_option("--threads", g.threads, "worker threads");

  auto* c_extract = app.add_subcommand("extract", "extract steering vectors");
  auto* c_edit = app.add_subcommand("edit", "build and apply a rank-1 edit plan");
  auto* c_steer = app.add_subcommand("steer", "activation-steering baseline");
  auto* c_search = app.add_subcommand("search", "two-stage hyperparameter grid search");
  auto* c_sweep = app.add_subcommand("sweep", "budget sweep over one component class");
  auto* c_bench = app.add_subcommand("bench", "synthetic planted-behavior benchmark");
  auto* c_report = app.add_subcommand("report", "aggregate reports from the output directory");
  auto* c_verify = app.add_subcommand("verify", "run the numeric oracle suite");

  std::string rho_attn = "1", rho_mlp = "1", alpha_str = "0.5";
  std::string variant = "steer2edit";
  c_edit->add_option("--rho-attn", rho_attn, "attention budget (number or 'inf')");
  c_edit->add_option("--rho-mlp", rho_mlp, "MLP budget (number or 'inf')");
  c_edit->add_option("--alpha", alpha_str, "elastic-net mixing in [0,1)");
  c_edit->add_option("--variant", variant,
                     "steer2edit | k_mean | k_svd | g_dot | l0:<K> | l2");

  double gamma = 1.0;
  std::string blocks = "both";
  c_steer->add_option("--gamma", gamma, "steering strength (>= 0)");
  c_steer->add_option("--blocks", blocks, "attn | mlp | both")
      ->check(CLI::IsMember({"attn", "mlp", "both"}));

  std::string vary = "attn";
  c_sweep->add_option("--vary", vary, "which budget to sweep: attn | mlp")
      ->check(CLI::IsMember({"attn", "mlp"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    g.seed_set = opt_seed->count() > 0;
    g.out_set = opt_out->count() > 0;
    g.threads_set = opt_threads->count() > 0;
    s2e::PipelineConfig cfg = make_config(g);

    if (c_extract->parsed()) {
      s2e::run_extract(cfg);
      std::cout << "wrote vectors to " << cfg.out_dir << "\n";
    } else if (c_edit->parsed()) {
      s2e::EditHyperparams hyper{parse_rho(rho_attn), parse_rho(rho_mlp),
                                 std::stod(alpha_str)};
      hyper.validate();
      s2e::EditPlan plan = s2e::run_edit(cfg, hyper, variant);
      std::cout << "plan entries: " << plan.entries.size() << ", wrote " << cfg.out_dir << "\n";
    } else if (c_steer->parsed()) {
      s2e::BenchContext ctx = s2e::make_bench_context(cfg);
      s2e::SteeringHook hook;
      hook.gamma = gamma;
      hook.vectors = &ctx.vecs;
      if (blocks == "attn") hook.blocks = {s2e::BlockKind::attn};
      if (blocks == "mlp") hook.blocks = {s2e::BlockKind::mlp};
      hook.validate();
      s2e::BlockHook bh = hook.to_block_hook();
      double acc = 0.0;
      nlohmann::json gens = nlohmann::json::array();
      s2e::CaptureSpec cap;
      cap.residuals = true;
      for (const auto& prompt : ctx.trigger_prompts) {
        s2e::ForwardResult fr = s2e::forward(ctx.model, prompt, cap, &bh);
        acc += s2e::dot(fr.trace->final_resid.back(), ctx.d_beh);
        gens.push_back({{"prompt", prompt},
                        {"generated", s2e::generate(ctx.model, prompt, ctx.spec.max_new, &bh)}});
      }
      std::vector<int> steered(ctx.neutral_prompts.size());
      for (std::size_t i = 0; i < ctx.neutral_prompts.size(); ++i) {
        steered[i] = s2e::argmax_token(
            s2e::forward(ctx.model, ctx.neutral_prompts[i], {}, &bh).logits.back());
      }
      s2e::ensure_out_dir(cfg.out_dir);
      nlohmann::json rep{{"gamma", gamma},
                         {"blocks", blocks},
                         {"attribute", acc / static_cast<double>(ctx.trigger_prompts.size())},
                         {"utility", s2e::agreement(steered, ctx.base_next)},
                         {"generations", gens}};
      std::ofstream os(cfg.out_dir + "/steer_report.json", std::ios::trunc);
      os << rep.dump(2) << "\n";
      std::cout << rep.dump(2) << "\n";
    } else if (c_search->parsed()) {
      s2e::SearchReport rep = s2e::run_search(cfg);
      if (rep.no_viable) {
        std::cout << "no viable configuration\n";
      } else {
        std::cout << "evaluated " << rep.points.size() << " points, best index "
                  << rep.ranking.front() << "\n";
      }
    } else if (c_sweep->parsed()) {
      const s2e::BlockKind b = vary == "attn" ? s2e::BlockKind::attn : s2e::BlockKind::mlp;
      auto points = s2e::run_budget_sweep(cfg, b);
      std::cout << "swept " << points.size() << " budgets, wrote " << cfg.out_dir << "\n";
    } else if (c_bench->parsed()) {
      s2e::BenchReport rep = s2e::run_synthetic_bench(cfg);
      std::cout << "cos_planted=" << s2e::fmt17(rep.cos_planted)
                << " rank_by_g=" << rep.rank_by_g
                << " attribute_drop=" << s2e::fmt17(rep.base_attribute - rep.edited_attribute)
                << " utility=" << s2e::fmt17(rep.utility) << "\n";
    } else if (c_report->parsed()) {
      nlohmann::json combined;
      for (const char* name : {"extract_summary.json", "search_report.json",
                               "sweep_report.json", "bench_report.json", "steer_report.json"}) {
        read_if_present(combined, cfg.out_dir, name);
      }
      if (combined.empty()) throw std::runtime_error("no reports found in " + cfg.out_dir);
      std::ofstream os(cfg.out_dir + "/report.json", std::ios::trunc);
      os << combined.dump(2) << "\n";
      std::cout << combined.dump(2) << "\n";
    } else if (c_verify->parsed()) {
      return run_verify(cfg);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
