// SPDX-License-Identifier: Apache-2.0
//
// lpsac: train, ablate, bitsweep, gradhist, divergence.

#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lpsac/experiments.hpp"

namespace {

using namespace lpsac;
using exp::RunSpec;

/// Flags shared by every training command, applied over --config.
struct CommonFlags {
  std::string config;
  std::vector<std::pair<std::string, std::string>> overrides;
  std::map<std::string, std::string> toggles;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", config, "key=value config file");
    add_value(cmd, "--mode", "mode", "fp64|emulated|fp16-naive|coerce|loss-scale|mixed-precision|fp16-stable");
    add_value(cmd, "--format", "format", "emulated format, e.g. e5m10");
    add_value(cmd, "--seeds", "seeds", "seed list, e.g. 0,1,2 or 0-4");
    add_value(cmd, "--steps", "steps", "environment steps per run");
    add_value(cmd, "--out", "out", "output directory");
    add_value(cmd, "--jobs", "jobs", "seeds trained in parallel");
    add_value(cmd, "--set", "", "any config key, as key=value (repeatable)");
    for (sac::Method m : sac::kMethodOrder) {
      const std::string name(sac::method_name(m));
      cmd->add_option("--toggle-" + name, toggles["toggle-" + name], "on|off");
    }
  }

  void add_value(CLI::App* cmd, const std::string& flag, const std::string& key, const std::string& help) {
    cmd->add_option_function<std::vector<std::string>>(
           flag,
           [this, key](const std::vector<std::string>& vs) {
             for (const auto& v : vs) {
               if (!key.empty()) {
                 overrides.emplace_back(key, v);
                 continue;
               }
               const auto eq = v.find('=');
               if (eq == std::string::npos) throw exp::ConfigError("--set expects key=value, got '" + v + "'");
               overrides.emplace_back(v.substr(0, eq), v.substr(eq + 1));
             }
           },
           help)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  }

  RunSpec resolve() const {
    RunSpec spec = config.empty() ? RunSpec{} : exp::load_config(config);
    for (const auto& [k, v] : overrides)
      if (k == "mode") exp::apply_setting(spec, k, v);
    for (const auto& [k, v] : overrides)
      if (k != "mode") exp::apply_setting(spec, k, v);
    for (const auto& [k, v] : toggles)
      if (!v.empty()) exp::apply_setting(spec, k, v);
    return spec;
  }
};

void print_table(const std::string& title, const std::vector<exp::TableRow>& rows) {
  std::printf("%s\n", title.c_str());
  for (const auto& r : rows) {
    std::printf("  %-28s score %9.1f +- %7.1f  return %9.1f +- %7.1f  crashes %zu/%zu\n", r.label.c_str(),
                r.score.mean, r.score.stddev, r.final_return.mean, r.final_return.stddev, r.crashes, r.score.n);
  }
}

void print_progress(std::uint64_t seed, const EvalPoint& p) {
  std::printf("  seed %llu step %lld return %.1f alpha %.4f scale %g nan %lld\n",
              static_cast<unsigned long long>(seed), static_cast<long long>(p.step), p.eval_return, p.alpha,
              p.gamma_scale, static_cast<long long>(p.nan_events));
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Soft actor-critic under emulated low-precision arithmetic"};
  app.require_subcommand(1);

  CommonFlags train_flags, ablate_flags, sweep_flags, div_flags;
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "only print summaries");

  auto* train_cmd = app.add_subcommand("train", "train one configuration over its seeds");
  train_flags.add_to(train_cmd);

  auto* ablate_cmd = app.add_subcommand("ablate", "method ablation ladder");
  ablate_flags.add_to(ablate_cmd);
  std::string direction = "leave-one-out";
  ablate_cmd->add_option("--direction", direction, "cumulative|leave-one-out")
      ->check(CLI::IsMember({"cumulative", "leave-one-out"}));

  auto* sweep_cmd = app.add_subcommand("bitsweep", "fp16-stable under e5mN formats");
  sweep_flags.add_to(sweep_cmd);
  std::vector<int> bits{10, 8, 6, 5};
  sweep_cmd->add_option("--bits", bits, "significand bits to sweep")->delimiter(',');

  auto* hist_cmd = app.add_subcommand("gradhist", "gradient histograms from a checkpoint");
  std::string checkpoint, hist_out;
  hist_cmd->add_option("checkpoint", checkpoint, "checkpoint written by train --set checkpoint=on")->required();
  hist_cmd->add_option("-o,--output", hist_out, "CSV path (default: stdout)");

  auto* div_cmd = app.add_subcommand("divergence", "paired-seed fp64 vs fp16-stable distances");
  div_flags.add_to(div_cmd);
  std::int64_t snapshot_interval = 1000;
  div_cmd->add_option("--snapshot-interval", snapshot_interval, "steps between snapshots")
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const exp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  const auto progress = quiet ? std::function<void(std::uint64_t, const EvalPoint&)>{} : print_progress;
  try {
    if (*train_cmd) {
      const RunSpec spec = train_flags.resolve();
      exp::validate(spec);
      std::printf("%s -> %s\n", exp::run_label(spec).c_str(), exp::run_dir(spec).string().c_str());
      const auto rep = exp::run(spec, true, progress);
      for (const auto& r : rep.runs) {
        std::printf("seed %llu: %s final return %.1f random %.1f score %.1f\n",
                    static_cast<unsigned long long>(r.seed), r.log.crashed ? "CRASHED" : "ok", r.log.final_return,
                    r.log.random_return, r.log.score());
      }
      std::printf("mean score %.1f +- %.1f over %zu seeds, %zu crashed\n", rep.score.mean, rep.score.stddev,
                  rep.score.n, rep.crashes);
    } else if (*ablate_cmd) {
      const RunSpec spec = ablate_flags.resolve();
      const auto d =
          direction == "cumulative" ? exp::AblationDirection::Cumulative : exp::AblationDirection::LeaveOneOut;
      exp::validate(exp::with_methods(spec, sac::Methods::all()));
      print_table("ablation (" + direction + ")", exp::ablate(spec, d));
    } else if (*sweep_cmd) {
      const RunSpec spec = sweep_flags.resolve();
      exp::validate(exp::with_methods(spec, sac::Methods::all()));
      print_table("bit sweep (significand bits)", exp::bitsweep(spec, bits));
    } else if (*hist_cmd) {
      const auto ckpt = exp::load_checkpoint(checkpoint);
      const auto h = exp::gradhist(ckpt);
      std::ofstream file;
      if (!hist_out.empty()) {
        const std::filesystem::path p(hist_out);
        if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
        file.open(p);
      }
      std::ostream& o = hist_out.empty() ? std::cout : file;
      o << "network,bin,lower,upper,count\n";
      exp::write_histogram_csv(o, "actor", h.actor);
      exp::write_histogram_csv(o, "critics", h.critic);
    } else if (*div_cmd) {
      const RunSpec spec = div_flags.resolve();
      exp::validate(exp::with_methods(spec, sac::Methods::all()));
      const auto rep = exp::divergence(spec, snapshot_interval);
      std::printf("step,weight_l1,q_abs\n");
      for (const auto& p : rep.points) {
        std::printf("%lld,%.6g,%.6g\n", static_cast<long long>(p.step), p.weight_l1.mean, p.q_abs.mean);
      }
    }
  } catch (const exp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const exp::MissingCheckpoint& e) {
    std::cerr << e.what() << "\n";
    return 3;
  }
  return 0;
}
