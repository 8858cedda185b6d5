// demandlab: configure a demand DGP, run the identification pipeline or any
// stage of it, audit instrument exclusion on causal graphs, emit reports.
#include <CLI11.hpp>
#include <fstream>
#include <iostream>

#include "demandlab/experiment.hpp"

namespace {

using namespace dlab;

void print_stage_summary(const Json& report) {
  if (!report.contains("stages")) return;
  for (const auto& [name, stage] : report["stages"].items()) {
    bool pass = stage.value("pass", false);
    std::cout << "  [" << (pass ? "ok" : "FAIL") << "] " << name;
    if (name == "simulate") {
      std::cout << ": markets=" << stage.value("markets", 0)
                << " tie_groups=" << stage.value("price_tie_groups", 0)
                << " corr(p,xi)=" << stage.value("corr_price_shock", 0.0);
    } else if (name == "recover_index" && stage.contains("cells")) {
      for (const auto& cell : stage["cells"]) {
        std::cout << "\n        cell " << cell.value("cell", -1);
        if (cell.contains("error")) {
          std::cout << " error: " << cell["error"].get<std::string>();
        } else {
          std::cout << " coverage=" << cell.value("coverage", 0.0)
                    << " ghat_err=" << cell.value("ghat_sup_error", 0.0)
                    << " ccp_holds=" << cell["ccp_certificate"].value("holds", false);
        }
      }
    } else if (name == "recover_shocks" && stage.contains("cells")) {
      for (const auto& cell : stage["cells"]) {
        std::cout << "\n        cell " << cell.value("cell", -1);
        if (cell.contains("error")) {
          std::cout << " error: " << cell["error"].get<std::string>();
        } else if (cell.contains("skipped")) {
          std::cout << " skipped: " << cell["skipped"].get<std::string>();
        } else {
          std::cout << " h_rmse=" << cell.value("h_rmse", 0.0)
                    << " h_corr=" << cell.value("h_corr", 0.0);
          if (cell.contains("xi_rmse")) std::cout << " xi_rmse=" << cell.value("xi_rmse", 0.0);
        }
      }
    } else if (name == "nested_logit") {
      if (stage.contains("error")) {
        std::cout << ": error: " << stage["error"].get<std::string>();
      } else {
        std::cout << ": theta_hat=" << stage.value("theta_hat", 0.0)
                  << " alpha_hat=" << stage.value("alpha_hat", 0.0)
                  << " plugback=" << stage.value("plugback_sup_error", 0.0);
      }
    }
    std::cout << "\n";
  }
}

int run_pipeline(const std::string& config_path, const std::vector<Stage>& forced_stages,
                 bool seed_set, std::uint64_t seed, const std::string& out_dir,
                 const std::string& mode, long n_consumers) {
  ExperimentConfig config = load_config(config_path);
  if (!forced_stages.empty()) config.stages = forced_stages;
  if (seed_set) config.dgp.seed = seed;
  if (!out_dir.empty()) config.out_dir = out_dir;
  if (!mode.empty()) config.sample_mode = (mode == "sample");
  if (n_consumers >= 0) config.n_consumers = n_consumers;
  config.validate();
  ExperimentReport report = run_experiment(config);
  std::cout << (report.pass ? "PASS" : "FAIL") << " (" << report.wall_clock_seconds << " s)\n";
  print_stage_summary(report.data);
  if (!config.out_dir.empty()) {
    std::cout << "report written to " << config.out_dir << "/report.json\n";
  }
  return report.pass ? 0 : 1;
}

int run_dsep(const std::string& graph_path, const std::string& query, bool figures) {
  if (figures) {
    auto figs = builtin_figures();
    int matched = 0;
    for (const auto& fig : figs) {
      ExclusionVerdict v = audit_instrument(fig.dag);
      bool match = v.holds == fig.expect_holds;
      matched += match;
      std::cout << (match ? "  ok   " : "  MISS ") << fig.name << ": "
                << (v.holds ? "holds" : "fails");
      if (!v.holds) std::cout << "  witness: " << v.witness_string();
      std::cout << "\n";
    }
    std::cout << matched << "/" << figs.size() << " figures match the published verdicts\n";
    return matched == static_cast<int>(figs.size()) ? 0 : 1;
  }
  std::ifstream in(graph_path);
  if (!in) {
    std::cerr << "cannot open graph file " << graph_path << "\n";
    return 2;
  }
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CausalDag dag = parse_dag(text);
  ExclusionVerdict verdict;
  if (query.empty()) {
    verdict = audit_instrument(dag);
  } else {
    std::vector<std::string> a, b, c;
    parse_independence_query(query, a, b, c);
    verdict = d_separated(dag, a, b, c);
  }
  std::cout << verdict.query << ": " << (verdict.holds ? "holds" : "fails") << "\n";
  if (!verdict.holds) std::cout << "witness: " << verdict.witness_string() << "\n";
  return 0;
}

int run_report(const std::string& report_path) {
  std::ifstream in(report_path);
  if (!in) {
    std::cerr << "cannot open report " << report_path << "\n";
    return 2;
  }
  Json j;
  in >> j;
  std::cout << (j.value("pass", false) ? "PASS" : "FAIL") << " ("
            << j.value("wall_clock_seconds", 0.0) << " s)\n";
  print_stage_summary(j);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"demandlab: simulate, recover, and verify demand identification from micro data"};
  app.require_subcommand(1);

  std::string config_path, out_dir, mode, graph_path, query, report_path;
  long n_consumers = -1;
  std::uint64_t seed = 0;
  bool figures = false;

  auto add_run_options = [&](CLI::App* cmd) -> CLI::Option* {
    cmd->add_option("--config", config_path, "experiment configuration (JSON)")->required();
    CLI::Option* seed_opt = cmd->add_option("--seed", seed, "master seed override");
    cmd->add_option("--out", out_dir, "output directory for report and tables");
    cmd->add_option("--mode", mode, "population|sample")
        ->check(CLI::IsMember({"population", "sample"}));
    cmd->add_option("--n-consumers", n_consumers, "consumers per grid node in sample mode");
    return seed_opt;
  };

  auto* sim = app.add_subcommand("simulate", "generate markets and CCP surfaces");
  auto* sim_seed = add_run_options(sim);
  auto* ridx = app.add_subcommand("recover-index", "matched pairs, Jacobian chaining, ghat");
  auto* ridx_seed = add_run_options(ridx);
  auto* rshk = app.add_subcommand("recover-shocks", "common CCP, sieve IV, demand shocks");
  auto* rshk_seed = add_run_options(rshk);
  auto* nst = app.add_subcommand("nested-logit", "semiparametric nested-logit estimator");
  auto* nst_seed = add_run_options(nst);
  auto* full = app.add_subcommand("full", "all stages listed in the config");
  auto* full_seed = add_run_options(full);

  auto* dsep = app.add_subcommand("dsep", "d-separation audits on causal graphs");
  dsep->add_option("--graph", graph_path, "edge-list graph file");
  dsep->add_option("--query", query, "independence query, e.g. 'W _||_ Xi | X'");
  dsep->add_flag("--figures", figures, "run the built-in figure gallery");

  auto* rep = app.add_subcommand("report", "summarize an existing report.json");
  rep->add_option("--report", report_path, "path to report.json")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed()) {
      return run_pipeline(config_path, {dlab::Stage::Simulate}, sim_seed->count() > 0, seed,
                          out_dir, mode, n_consumers);
    }
    if (ridx->parsed()) {
      return run_pipeline(config_path, {dlab::Stage::Simulate, dlab::Stage::RecoverIndex},
                          ridx_seed->count() > 0, seed, out_dir, mode, n_consumers);
    }
    if (rshk->parsed()) {
      return run_pipeline(
          config_path,
          {dlab::Stage::Simulate, dlab::Stage::RecoverIndex, dlab::Stage::RecoverShocks},
          rshk_seed->count() > 0, seed, out_dir, mode, n_consumers);
    }
    if (nst->parsed()) {
      return run_pipeline(config_path, {dlab::Stage::Simulate, dlab::Stage::NestedLogit},
                          nst_seed->count() > 0, seed, out_dir, mode, n_consumers);
    }
    if (full->parsed()) {
      return run_pipeline(config_path, {}, full_seed->count() > 0, seed, out_dir, mode,
                          n_consumers);
    }
    if (dsep->parsed()) {
      if (!figures && graph_path.empty()) {
        std::cerr << "dsep needs --graph or --figures\n";
        return 2;
      }
      return run_dsep(graph_path, query, figures);
    }
    if (rep->parsed()) return run_report(report_path);
  } catch (const dlab::ConfigInvalidError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const dlab::GraphParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
