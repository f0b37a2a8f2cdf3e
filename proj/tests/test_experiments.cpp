#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "lpsac/experiments.hpp"

using namespace lpsac;
using namespace lpsac::exp;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("lpsac_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunSpec tiny(Mode m, const fs::path& out) {
  RunSpec s;
  set_mode(s, m);
  s.out_dir = out.string();
  s.train.sac.hidden_dim = 8;
  s.train.sac.batch_size = 8;
  s.train.sac.seed_steps = 50;
  s.train.total_steps = 200;
  s.train.eval_interval = 100;
  s.train.eval_episodes = 1;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Config, RoundTrip) {
  RunSpec s;
  set_mode(s, Mode::Emulated);
  s.methods = sac::Methods::first(3);
  s.seeds = {3, 5, 8};
  s.out_dir = "elsewhere";
  s.jobs = 2;
  s.save_checkpoint = true;
  s.train.total_steps = 12345;
  s.train.eval_seed = 99;
  s.train.sac.adam.lr = 3e-4;
  s.train.sac.adam.eps = 1.25e-7;
  s.train.sac.tau = 0.01;
  s.train.sac.hidden_dim = 32;
  s.train.sac.twin_critics = false;
  s.train.sac.format = FloatFormat{5, 7, false, Rounding::NearestEven};
  s.train.sac.softplus_K = 12.5;
  EXPECT_EQ(parse_config(to_config(s)), s);
  const RunSpec d;
  EXPECT_EQ(parse_config(to_config(d)), d);
}

TEST(Config, ParsesCommentsRangesAndToggles) {
  const RunSpec s = parse_config(
      "# desk run\n"
      "seeds = 0-2\n"
      "toggle-hadam = off\n"
      "mode = emulated\n"
      "lr = 3e-4  \n"
      "\n");
  EXPECT_EQ(s.mode, Mode::Emulated);
  EXPECT_EQ(s.seeds, (std::vector<std::uint64_t>{0, 1, 2}));
  EXPECT_FALSE(s.methods.get(sac::Method::HAdam));
  EXPECT_TRUE(s.methods.get(sac::Method::SoftplusFix));
  EXPECT_EQ(s.train.sac.adam.lr, 3e-4);
  EXPECT_EQ(parse_seeds("4,1,7"), (std::vector<std::uint64_t>{4, 1, 7}));
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("mode = fp8"), ConfigError);
  EXPECT_THROW(parse_config("no_such_key = 1"), ConfigError);
  EXPECT_THROW(parse_config("lr = fast"), ConfigError);
  EXPECT_THROW(parse_config("steps"), ConfigError);
  EXPECT_THROW(parse_config("seeds = 5-2"), ConfigError);
  EXPECT_THROW(parse_config("toggle-bogus = on"), ConfigError);
  EXPECT_THROW(parse_config("checkpoint = maybe"), ConfigError);

  RunSpec s;
  EXPECT_NO_THROW(validate(s));
  s.methods.set(sac::Method::HAdam, false);
  EXPECT_THROW(validate(s), ConfigError);  // fp16-stable needs every method
  set_mode(s, Mode::Fp16Naive);
  EXPECT_NO_THROW(validate(s));
  s.methods.set(sac::Method::HAdam, true);
  EXPECT_THROW(validate(s), ConfigError);
  set_mode(s, Mode::Fp64);
  s.train.sac.discount = 1.5;
  EXPECT_THROW(validate(s), ConfigError);
}

TEST(Modes, ResolveAndLabels) {
  for (Mode m : kModes) EXPECT_EQ(parse_mode(mode_name(m)), m);
  RunSpec s;
  set_mode(s, Mode::MixedPrecision);
  EXPECT_EQ(resolve(s).sac.precision, sac::Precision::MixedPrecision);
  EXPECT_TRUE(resolve(s).sac.methods.all_off());
  set_mode(s, Mode::Fp16Stable);
  EXPECT_EQ(resolve(s).sac.precision, sac::Precision::Emulated);
  EXPECT_TRUE(resolve(s).sac.methods.all_on());
  EXPECT_EQ(run_label(s), "fp16-stable");
  set_mode(s, Mode::Emulated);
  s.methods = sac::Methods::first(2);
  s.train.sac.format = FloatFormat{5, 6, true, Rounding::NearestEven};
  EXPECT_EQ(run_label(s), "emulated-e5m6-110000");
}

TEST(Stats, SampleStatistics) {
  const Stats s = stats({1.0, 2.0, 3.0, 4.0});
  EXPECT_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.stddev, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_EQ(stats({7.0}).stddev, 0.0);
  EXPECT_NEAR(pooled_std({0, 3, 2}, {0, 4, 2}), std::sqrt(12.5), 1e-15);
}

TEST(Ablation, Variants) {
  const auto cum = ablation_variants(AblationDirection::Cumulative);
  ASSERT_EQ(cum.size(), 7u);
  EXPECT_EQ(cum.front().methods, sac::Methods::none());
  EXPECT_EQ(cum.back().methods, sac::Methods::all());
  for (std::size_t k = 0; k < cum.size(); ++k) EXPECT_EQ(cum[k].methods, sac::Methods::first(k));
  const auto loo = ablation_variants(AblationDirection::LeaveOneOut);
  ASSERT_EQ(loo.size(), 6u);
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_EQ(loo[k].methods, sac::Methods::all().without(sac::kMethodOrder[k]));
    EXPECT_EQ(loo[k].label, "no-" + std::string(sac::method_name(sac::kMethodOrder[k])));
  }
  EXPECT_EQ(with_methods(RunSpec{}, sac::Methods::none()).mode, Mode::Fp16Naive);
  EXPECT_EQ(with_methods(RunSpec{}, sac::Methods::first(4)).mode, Mode::Emulated);
}

TEST(Bitsweep, RejectsTooFewBits) {
  EXPECT_THROW(bitsweep(RunSpec{}, {10, 2}, false), ConfigError);
}

TEST(Divergence, IdenticalRunsHaveZeroDistance) {
  SeedResult r;
  r.log.snapshots = {{0, {1.0, 2.0}, {0.5}}, {100, {1.5, -2.0}, {0.25}}};
  const auto pts = divergence_table({r, r}, {r, r});
  ASSERT_EQ(pts.size(), 2u);
  for (const auto& p : pts) {
    EXPECT_EQ(p.weight_l1.mean, 0.0);
    EXPECT_EQ(p.q_abs.mean, 0.0);
    EXPECT_EQ(p.weight_l1.n, 2u);
  }
  SeedResult other = r;
  other.log.snapshots[1].params = {2.0, -1.0};
  EXPECT_EQ(divergence_table({r}, {other})[1].weight_l1.mean, 0.75);
  EXPECT_THROW(divergence_table({r}, {}), std::invalid_argument);
  EXPECT_THROW(mean_abs_diff({1.0}, {1.0, 2.0}), ShapeMismatch);
}

TEST(Run, WritesOutputsAndIsReproducible) {
  const fs::path out = scratch("run");
  RunSpec s = tiny(Mode::Fp64, out);
  s.seeds = {0, 1};
  s.save_checkpoint = true;
  const TrainReport a = run(s);
  const fs::path dir = run_dir(s);
  for (const char* f : {"seed0.csv", "seed1.csv", "seed0.json", "summary.json", "seed0_mid.ckpt.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_TRUE(slurp(dir / "seed0.csv").starts_with("step,eval_return,alpha,gamma_scale,nan_events\n"));
  const auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
  EXPECT_EQ(summary.at("runs").size(), 2u);
  EXPECT_EQ(summary.at("mean_score").get<double>(), a.score.mean);

  const TrainReport b = run(s, false);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a.runs[i].log.final_return, b.runs[i].log.final_return);
  }
  s.jobs = 2;
  const TrainReport c = run(s, false);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(a.runs[i].log.final_return, c.runs[i].log.final_return);
}

TEST(Checkpoint, RoundTripAndGradhist) {
  const fs::path out = scratch("ckpt");
  RunSpec s = tiny(Mode::Fp16Stable, out);
  s.save_checkpoint = true;
  run(s);
  const fs::path path = run_dir(s) / "seed0_mid.ckpt.json";
  const Checkpoint c = load_checkpoint(path);
  EXPECT_EQ(c.spec, s);
  EXPECT_EQ(c.step, 100);
  EXPECT_EQ(c.batch.obs.rows(), 8u);
  const sac::SacAgent agent = restore_agent(c);
  EXPECT_EQ(agent.log_alpha(), c.log_alpha);

  const GradhistReport h = gradhist(c);
  EXPECT_GT(h.actor.nonzero_bins(), 0u);
  EXPECT_GT(h.critic.nonzero_bins(), 0u);
  std::ostringstream csv;
  write_histogram_csv(csv, "critics", h.critic);
  EXPECT_TRUE(csv.str().starts_with("critics,zero,0,0,"));

  EXPECT_THROW(load_checkpoint(out / "missing.json"), MissingCheckpoint);
  std::ofstream(out / "bad.json") << "{\"seed\": 1}";
  EXPECT_THROW(load_checkpoint(out / "bad.json"), MissingCheckpoint);
}

TEST(Tables, CsvLayout) {
  const fs::path out = scratch("table");
  write_table_csv(out / "t.csv", {{"full", stats({1.0, 3.0}), stats({-2.0}), 1}});
  EXPECT_EQ(slurp(out / "t.csv"),
            "config,mean_score,std_score,mean_return,std_return,crashes,n\n"
            "full,2,1.4142135623730951,-2,0,1,2\n");
}
