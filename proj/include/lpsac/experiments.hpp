// SPDX-License-Identifier: Apache-2.0
//
// Experiment drivers shared by the command-line tool and the acceptance
// suite: run specifications and their key=value config format, multi-seed
// training, ablation ladders, significand sweeps, paired-seed divergence and
// gradient histograms from checkpoints. Output is CSV plus JSON summaries.

#pragma once

#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <functional>
#include <array>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "json.hpp"
#include "lpsac/sac.hpp"
#include "lpsac/train.hpp"

namespace lpsac::exp {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class MissingCheckpoint : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Mode { Fp64, Emulated, Fp16Naive, Coerce, LossScale, MixedPrecision, Fp16Stable };

inline constexpr std::array<Mode, 7> kModes = {Mode::Fp64,      Mode::Emulated,       Mode::Fp16Naive,
                                               Mode::Coerce,    Mode::LossScale,      Mode::MixedPrecision,
                                               Mode::Fp16Stable};

inline constexpr std::string_view mode_name(Mode m) {
  switch (m) {
    case Mode::Fp64: return "fp64";
    case Mode::Emulated: return "emulated";
    case Mode::Fp16Naive: return "fp16-naive";
    case Mode::Coerce: return "coerce";
    case Mode::LossScale: return "loss-scale";
    case Mode::MixedPrecision: return "mixed-precision";
    case Mode::Fp16Stable: return "fp16-stable";
  }
  return "?";
}

inline Mode parse_mode(std::string_view s) {
  for (Mode m : kModes)
    if (mode_name(m) == s) return m;
  throw ConfigError("unknown mode '" + std::string(s) + "'");
}

struct RunSpec {
  Mode mode = Mode::Fp16Stable;
  sac::Methods methods = sac::Methods::all();
  std::vector<std::uint64_t> seeds{0};
  std::string out_dir = "runs";
  TrainConfig train;
  int jobs = 1;
  bool save_checkpoint = false;

  /// The emulated format (the compute format in mixed precision).
  const FloatFormat& format() const { return train.sac.format; }

  friend bool operator==(const RunSpec&, const RunSpec&) = default;
};

/// Mode-implied toggles: fp16-naive has none, fp16-stable has all.
inline void set_mode(RunSpec& spec, Mode m) {
  spec.mode = m;
  if (m == Mode::Fp16Stable) spec.methods = sac::Methods::all();
  if (m == Mode::Fp16Naive || m == Mode::Coerce || m == Mode::LossScale || m == Mode::MixedPrecision ||
      m == Mode::Fp64) {
    spec.methods = sac::Methods::none();
  }
}

inline void validate(const RunSpec& spec) {
  if (spec.mode == Mode::Fp16Stable && !spec.methods.all_on()) {
    throw ConfigError("fp16-stable requires all six methods; use --mode emulated for other toggles");
  }
  if (spec.mode == Mode::Fp16Naive && !spec.methods.all_off()) {
    throw ConfigError("fp16-naive requires every method off; use --mode emulated for other toggles");
  }
  if (spec.seeds.empty()) throw ConfigError("at least one seed is required");
  if (spec.jobs < 1) throw ConfigError("jobs must be >= 1");
  if (spec.train.total_steps < 1 || spec.train.eval_interval < 1 || spec.train.eval_episodes < 1) {
    throw ConfigError("steps, eval_interval and eval_episodes must be positive");
  }
  try {
    spec.train.sac.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

/// Training configuration with precision fields filled in from the mode.
inline TrainConfig resolve(const RunSpec& spec) {
  TrainConfig t = spec.train;
  t.sac.methods = spec.methods;
  switch (spec.mode) {
    case Mode::Fp64: t.sac.precision = sac::Precision::Fp64; break;
    case Mode::Emulated:
    case Mode::Fp16Naive:
    case Mode::Fp16Stable: t.sac.precision = sac::Precision::Emulated; break;
    case Mode::Coerce: t.sac.precision = sac::Precision::Coerce; break;
    case Mode::LossScale: t.sac.precision = sac::Precision::LossScale; break;
    case Mode::MixedPrecision: t.sac.precision = sac::Precision::MixedPrecision; break;
  }
  return t;
}

/// Short identifier used for output directories.
inline std::string run_label(const RunSpec& spec) {
  std::string s(mode_name(spec.mode));
  if (spec.mode != Mode::Fp64 && !(spec.format() == FloatFormat::fp16())) s += "-" + spec.format().spec();
  if (spec.mode == Mode::Emulated) {
    s += "-";
    for (sac::Method m : sac::kMethodOrder) s += spec.methods.get(m) ? '1' : '0';
  }
  return s;
}

// ---------------------------------------------------------------------------
// key=value configuration

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

inline std::int64_t to_int(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
  }
  return out;
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
  const std::int64_t x = to_int(key, v);
  if (x < 0) throw ConfigError("'" + key + "' must be non-negative");
  return static_cast<std::size_t>(x);
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ConfigError("'" + key + "' expects on/off, got '" + v + "'");
}

inline std::string fmt_double(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline FloatFormat to_format(const std::string& key, const std::string& v) {
  try {
    return FloatFormat::parse(v);
  } catch (const FormatError& e) {
    throw ConfigError("'" + key + "': " + e.what());
  }
}

}  // namespace detail

inline std::vector<std::uint64_t> parse_seeds(const std::string& v) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (item.empty()) continue;
    const auto dash = item.find('-');
    if (dash != std::string::npos && dash > 0) {
      const auto lo = detail::to_size("seeds", item.substr(0, dash));
      const auto hi = detail::to_size("seeds", item.substr(dash + 1));
      if (hi < lo) throw ConfigError("seed range '" + item + "' is empty");
      for (auto s = lo; s <= hi; ++s) out.push_back(s);
    } else {
      out.push_back(detail::to_size("seeds", item));
    }
  }
  if (out.empty()) throw ConfigError("empty seed list");
  return out;
}

/// Applies one setting. Keys match the CLI flags without the leading
/// dashes; method toggles are "toggle-<method>".
inline void apply_setting(RunSpec& spec, const std::string& key, const std::string& value) {
  using namespace detail;
  auto& t = spec.train;
  auto& c = spec.train.sac;
  if (key == "mode") {
    set_mode(spec, parse_mode(value));
  } else if (key == "format") {
    c.format = to_format(key, value);
  } else if (key == "master_format") {
    c.master_format = to_format(key, value);
  } else if (key == "seeds") {
    spec.seeds = parse_seeds(value);
  } else if (key == "out") {
    spec.out_dir = value;
  } else if (key == "jobs") {
    spec.jobs = static_cast<int>(to_int(key, value));
  } else if (key == "checkpoint") {
    spec.save_checkpoint = to_bool(key, value);
  } else if (key == "steps") {
    t.total_steps = to_int(key, value);
  } else if (key == "eval_interval") {
    t.eval_interval = to_int(key, value);
  } else if (key == "eval_episodes") {
    t.eval_episodes = static_cast<int>(to_int(key, value));
  } else if (key == "eval_seed") {
    t.eval_seed = to_size(key, value);
  } else if (key == "snapshot_interval") {
    t.snapshot_interval = to_int(key, value);
  } else if (key == "gradhist_step") {
    t.gradhist_step = to_int(key, value);
  } else if (key == "discount") {
    c.discount = to_double(key, value);
  } else if (key == "init_temperature") {
    c.init_temperature = to_double(key, value);
  } else if (key == "tau") {
    c.tau = to_double(key, value);
  } else if (key == "batch_size") {
    c.batch_size = to_size(key, value);
  } else if (key == "target_update_freq") {
    c.target_update_freq = static_cast<int>(to_int(key, value));
  } else if (key == "actor_update_freq") {
    c.actor_update_freq = static_cast<int>(to_int(key, value));
  } else if (key == "seed_steps") {
    c.seed_steps = to_size(key, value);
  } else if (key == "log_std_min") {
    c.log_std_min = to_double(key, value);
  } else if (key == "log_std_max") {
    c.log_std_max = to_double(key, value);
  } else if (key == "hidden_dim") {
    c.hidden_dim = to_size(key, value);
  } else if (key == "hidden_depth") {
    c.hidden_depth = to_size(key, value);
  } else if (key == "twin_critics") {
    c.twin_critics = to_bool(key, value);
  } else if (key == "replay_capacity") {
    c.replay_capacity = to_size(key, value);
  } else if (key == "lr") {
    c.adam.lr = to_double(key, value);
  } else if (key == "beta1") {
    c.adam.beta1 = to_double(key, value);
  } else if (key == "beta2") {
    c.adam.beta2 = to_double(key, value);
  } else if (key == "adam_eps") {
    c.adam.eps = to_double(key, value);
  } else if (key == "init_grad_scale") {
    c.init_grad_scale = to_double(key, value);
  } else if (key == "inc_grad_scale_freq") {
    c.inc_grad_scale_freq = to_int(key, value);
  } else if (key == "softplus_K") {
    c.softplus_K = to_double(key, value);
  } else if (key == "kahan_momentum_scale") {
    c.kahan_momentum_scale = to_double(key, value);
  } else if (key.starts_with("toggle-")) {
    const auto m = sac::parse_method(key.substr(7));
    if (!m) throw ConfigError("unknown method in '" + key + "'");
    spec.methods.set(*m, to_bool(key, value));
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

/// Parses key=value lines ('#' starts a comment) on top of `base`. "mode"
/// is applied first so that explicit toggles override its defaults.
inline RunSpec parse_config(std::string_view text, RunSpec base = {}) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::stringstream ss{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    }
    kv.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  for (const auto& [k, v] : kv)
    if (k == "mode") apply_setting(base, k, v);
  for (const auto& [k, v] : kv)
    if (k != "mode") apply_setting(base, k, v);
  return base;
}

inline RunSpec load_config(const std::filesystem::path& path, RunSpec base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

inline std::string to_config(const RunSpec& spec) {
  using detail::fmt_double;
  const auto& t = spec.train;
  const auto& c = spec.train.sac;
  std::ostringstream o;
  o << "mode=" << mode_name(spec.mode) << "\n";
  o << "format=" << c.format.spec() << "\n";
  o << "master_format=" << c.master_format.spec() << "\n";
  o << "seeds=";
  for (std::size_t i = 0; i < spec.seeds.size(); ++i) o << (i ? "," : "") << spec.seeds[i];
  o << "\n";
  o << "out=" << spec.out_dir << "\n";
  o << "jobs=" << spec.jobs << "\n";
  o << "checkpoint=" << (spec.save_checkpoint ? "on" : "off") << "\n";
  o << "steps=" << t.total_steps << "\n";
  o << "eval_interval=" << t.eval_interval << "\n";
  o << "eval_episodes=" << t.eval_episodes << "\n";
  o << "eval_seed=" << t.eval_seed << "\n";
  o << "snapshot_interval=" << t.snapshot_interval << "\n";
  o << "gradhist_step=" << t.gradhist_step << "\n";
  o << "discount=" << fmt_double(c.discount) << "\n";
  o << "init_temperature=" << fmt_double(c.init_temperature) << "\n";
  o << "tau=" << fmt_double(c.tau) << "\n";
  o << "batch_size=" << c.batch_size << "\n";
  o << "target_update_freq=" << c.target_update_freq << "\n";
  o << "actor_update_freq=" << c.actor_update_freq << "\n";
  o << "seed_steps=" << c.seed_steps << "\n";
  o << "log_std_min=" << fmt_double(c.log_std_min) << "\n";
  o << "log_std_max=" << fmt_double(c.log_std_max) << "\n";
  o << "hidden_dim=" << c.hidden_dim << "\n";
  o << "hidden_depth=" << c.hidden_depth << "\n";
  o << "twin_critics=" << (c.twin_critics ? "on" : "off") << "\n";
  o << "replay_capacity=" << c.replay_capacity << "\n";
  o << "lr=" << fmt_double(c.adam.lr) << "\n";
  o << "beta1=" << fmt_double(c.adam.beta1) << "\n";
  o << "beta2=" << fmt_double(c.adam.beta2) << "\n";
  o << "adam_eps=" << fmt_double(c.adam.eps) << "\n";
  o << "init_grad_scale=" << fmt_double(c.init_grad_scale) << "\n";
  o << "inc_grad_scale_freq=" << c.inc_grad_scale_freq << "\n";
  o << "softplus_K=" << fmt_double(c.softplus_K) << "\n";
  o << "kahan_momentum_scale=" << fmt_double(c.kahan_momentum_scale) << "\n";
  for (sac::Method m : sac::kMethodOrder) {
    o << "toggle-" << sac::method_name(m) << "=" << (spec.methods.get(m) ? "on" : "off") << "\n";
  }
  return o.str();
}

// ---------------------------------------------------------------------------
// Statistics

struct Stats {
  double mean = 0.0;
  double stddev = 0.0;  ///< sample standard deviation (0 for n < 2)
  std::size_t n = 0;
};

inline Stats stats(const std::vector<double>& xs) {
  Stats s;
  s.n = xs.size();
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

/// sqrt of the mean of the two variances.
inline double pooled_std(const Stats& a, const Stats& b) {
  return std::sqrt(0.5 * (a.stddev * a.stddev + b.stddev * b.stddev));
}

// ---------------------------------------------------------------------------
// Output

inline void write_metrics_csv(const std::filesystem::path& path, const MetricsLog& log) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream o(path);
  o << "step,eval_return,alpha,gamma_scale,nan_events\n";
  for (const EvalPoint& p : log.evals) {
    o << p.step << "," << detail::fmt_double(p.eval_return) << "," << detail::fmt_double(p.alpha) << ","
      << detail::fmt_double(p.gamma_scale) << "," << p.nan_events << "\n";
  }
}

inline nlohmann::json histogram_json(const nn::GradHistogram& h) {
  nlohmann::json bins = nlohmann::json::array();
  for (const auto& [d, c] : h.decades) bins.push_back({{"decade", d}, {"count", c}});
  return {{"zeros", h.zeros}, {"non_finite", h.non_finite}, {"decades", bins}};
}

inline nlohmann::json run_summary(const RunSpec& spec, std::uint64_t seed, const MetricsLog& log) {
  nlohmann::json j;
  j["mode"] = mode_name(spec.mode);
  j["format"] = spec.format().spec();
  j["label"] = run_label(spec);
  j["seed"] = seed;
  nlohmann::json toggles;
  for (sac::Method m : sac::kMethodOrder) toggles[std::string(sac::method_name(m))] = spec.methods.get(m);
  j["methods"] = toggles;
  j["steps"] = spec.train.total_steps;
  j["crashed"] = log.crashed;
  j["crash_step"] = log.crash_step;
  j["crash_reason"] = log.crash_reason;
  j["final_return"] = log.final_return;
  j["random_return"] = log.random_return;
  j["score"] = log.score();
  j["nan_events"] = log.evals.empty() ? 0 : log.evals.back().nan_events;
  j["gradhist_step"] = log.gradhist_step;
  j["critic_grad_histogram"] = histogram_json(log.critic_grad_hist);
  return j;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream o(path);
  o << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace detail {

inline nlohmann::json tensor_json(const Tensor& t) {
  return {{"rows", t.rows()}, {"cols", t.cols()}, {"data", std::vector<double>(t.values().begin(), t.values().end())}};
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                j.at("data").get<std::vector<double>>());
}

inline nlohmann::json mlp_json(const nn::Mlp& m) {
  nlohmann::json a = nlohmann::json::array();
  for (const Tensor* p : m.parameters()) a.push_back(tensor_json(*p));
  return a;
}

inline void mlp_from_json(nn::Mlp& m, const nlohmann::json& j) {
  const auto params = m.parameters();
  if (j.size() != params.size()) throw MissingCheckpoint("checkpoint network shape mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = tensor_from_json(j[i]);
    if (!t.same_shape(*params[i])) throw MissingCheckpoint("checkpoint tensor shape mismatch");
    *params[i] = std::move(t);
  }
}

}  // namespace detail

/// A mid-training agent together with the batch and noise used to measure
/// its gradients.
struct Checkpoint {
  RunSpec spec;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  double actor_scale = 1.0;
  double critic_scale = 1.0;
  double log_alpha = 0.0;
  nlohmann::json networks;
  Batch batch;
  Tensor eps;
  Tensor eps_next;
};

inline void save_checkpoint(const std::filesystem::path& path, const RunSpec& spec, std::uint64_t seed,
                            const sac::SacAgent& agent, const ReplayBuffer& replay, std::int64_t step) {
  std::mt19937_64 rng(seed + 0xc0ffee);
  const Batch b = replay.sample(agent.config().batch_size, rng);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor eps(b.obs.rows(), agent.act_dim()), eps_next(b.obs.rows(), agent.act_dim());
  for (double& v : eps.values()) v = n(rng);
  for (double& v : eps_next.values()) v = n(rng);

  nlohmann::json j;
  j["config"] = to_config(spec);
  j["seed"] = seed;
  j["step"] = step;
  j["actor_scale"] = agent.actor_optimizer().loss_scale();
  j["critic_scale"] = agent.critic_optimizer().loss_scale();
  j["log_alpha"] = agent.log_alpha();
  j["actor"] = detail::mlp_json(agent.actor());
  nlohmann::json critics = nlohmann::json::array(), targets = nlohmann::json::array();
  for (const auto& c : agent.critics()) critics.push_back(detail::mlp_json(c));
  for (const auto& c : agent.target_critics()) targets.push_back(detail::mlp_json(c));
  j["critics"] = critics;
  j["targets"] = targets;
  j["batch"] = {{"obs", detail::tensor_json(b.obs)},           {"action", detail::tensor_json(b.action)},
                {"reward", detail::tensor_json(b.reward)},     {"next_obs", detail::tensor_json(b.next_obs)},
                {"not_done", detail::tensor_json(b.not_done)}, {"eps", detail::tensor_json(eps)},
                {"eps_next", detail::tensor_json(eps_next)}};
  write_json(path, j);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingCheckpoint("checkpoint not found: " + path.string());
  Checkpoint c;
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    c.spec = parse_config(j.at("config").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
    c.step = j.at("step").get<std::int64_t>();
    c.actor_scale = j.at("actor_scale").get<double>();
    c.critic_scale = j.at("critic_scale").get<double>();
    c.log_alpha = j.at("log_alpha").get<double>();
    c.networks = {{"actor", j.at("actor")}, {"critics", j.at("critics")}, {"targets", j.at("targets")}};
    const auto& b = j.at("batch");
    c.batch = {detail::tensor_from_json(b.at("obs")), detail::tensor_from_json(b.at("action")),
               detail::tensor_from_json(b.at("reward")), detail::tensor_from_json(b.at("next_obs")),
               detail::tensor_from_json(b.at("not_done"))};
    c.eps = detail::tensor_from_json(b.at("eps"));
    c.eps_next = detail::tensor_from_json(b.at("eps_next"));
  } catch (const nlohmann::json::exception& e) {
    throw MissingCheckpoint("malformed checkpoint " + path.string() + ": " + e.what());
  }
  return c;
}

inline sac::SacAgent restore_agent(const Checkpoint& c) {
  sac::SacAgent agent(resolve(c.spec).sac, PendulumEnv::kObsDim, PendulumEnv::kActDim, c.seed);
  detail::mlp_from_json(agent.actor(), c.networks.at("actor"));
  for (std::size_t i = 0; i < agent.critics().size(); ++i) {
    detail::mlp_from_json(agent.critics()[i], c.networks.at("critics").at(i));
    detail::mlp_from_json(agent.target_critics()[i], c.networks.at("targets").at(i));
  }
  agent.set_log_alpha(c.log_alpha);
  return agent;
}

struct GradhistReport {
  nn::GradHistogram actor;
  nn::GradHistogram critic;
};

/// Gradient magnitudes (divided by the loss scale) of the checkpointed agent
/// on its stored batch.
inline GradhistReport gradhist(const Checkpoint& c) {
  const sac::SacAgent agent = restore_agent(c);
  GradhistReport r;
  auto unscaled = [](std::vector<Tensor> gs, double scale) {
    for (Tensor& g : gs)
      for (double& x : g.values()) x /= scale;
    return gs;
  };
  const auto cg = agent.critic_gradients(c.batch, c.eps_next, c.critic_scale);
  const auto ag = agent.actor_gradients(c.batch, c.eps, c.actor_scale);
  const auto cgu = unscaled(cg.grads, c.critic_scale);
  const auto agu = unscaled(ag.grads, c.actor_scale);
  r.critic = nn::grad_histogram(std::span<const Tensor>(cgu));
  r.actor = nn::grad_histogram(std::span<const Tensor>(agu));
  return r;
}

inline void write_histogram_csv(std::ostream& o, const std::string& network, const nn::GradHistogram& h) {
  o << network << ",zero,0,0," << h.zeros << "\n";
  for (const auto& [d, c] : h.decades) {
    o << network << "," << d << "," << detail::fmt_double(std::pow(10.0, d)) << ","
      << detail::fmt_double(std::pow(10.0, d + 1)) << "," << c << "\n";
  }
  if (h.non_finite > 0) o << network << ",non-finite,,," << h.non_finite << "\n";
}

// ---------------------------------------------------------------------------
// Runs

struct SeedResult {
  std::uint64_t seed = 0;
  MetricsLog log;
};

struct TrainReport {
  RunSpec spec;
  std::vector<SeedResult> runs;
  Stats score;
  Stats final_return;
  std::size_t crashes = 0;
};

inline std::filesystem::path run_dir(const RunSpec& spec) {
  return std::filesystem::path(spec.out_dir) / run_label(spec);
}

/// Trains every seed of `spec` (up to `jobs` at a time) and aggregates.
/// With `write`, per-seed CSV/JSON and a summary land in run_dir(spec).
inline TrainReport run(const RunSpec& spec, bool write = true,
                       const std::function<void(std::uint64_t, const EvalPoint&)>& progress = {}) {
  validate(spec);
  const TrainConfig cfg = resolve(spec);
  TrainReport rep;
  rep.spec = spec;
  rep.runs.resize(spec.seeds.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < spec.seeds.size();) {
      const std::uint64_t seed = spec.seeds[i];
      TrainHooks hooks;
      if (progress) {
        hooks.on_eval = [&, seed](const EvalPoint& p) {
          std::lock_guard lock(mu);
          progress(seed, p);
        };
      }
      if (write && spec.save_checkpoint) {
        hooks.on_midpoint = [&, seed](const sac::SacAgent& a, const ReplayBuffer& rb, std::int64_t step) {
          save_checkpoint(run_dir(spec) / ("seed" + std::to_string(seed) + "_mid.ckpt.json"), spec, seed, a,
                          rb, step);
        };
      }
      rep.runs[i] = {seed, train(cfg, seed, hooks)};
    }
  };
  const int jobs = std::min<int>(spec.jobs, static_cast<int>(spec.seeds.size()));
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }

  std::vector<double> scores, returns;
  for (const SeedResult& r : rep.runs) {
    scores.push_back(r.log.score());
    returns.push_back(r.log.final_return);
    rep.crashes += r.log.crashed;
  }
  rep.score = stats(scores);
  rep.final_return = stats(returns);

  if (write) {
    const auto dir = run_dir(spec);
    nlohmann::json all = nlohmann::json::array();
    for (const SeedResult& r : rep.runs) {
      const std::string stem = "seed" + std::to_string(r.seed);
      write_metrics_csv(dir / (stem + ".csv"), r.log);
      const auto js = run_summary(spec, r.seed, r.log);
      write_json(dir / (stem + ".json"), js);
      all.push_back(js);
    }
    write_json(dir / "summary.json", {{"label", run_label(spec)},
                                      {"config", to_config(spec)},
                                      {"mean_score", rep.score.mean},
                                      {"std_score", rep.score.stddev},
                                      {"mean_final_return", rep.final_return.mean},
                                      {"std_final_return", rep.final_return.stddev},
                                      {"crashes", rep.crashes},
                                      {"runs", all}});
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Ablations and sweeps

enum class AblationDirection { Cumulative, LeaveOneOut };

struct AblationVariant {
  std::string label;
  sac::Methods methods;
};

/// Cumulative: 7 rungs from no methods to all six, adding them in ladder
/// order. Leave-one-out: the 6 configurations missing exactly one method.
inline std::vector<AblationVariant> ablation_variants(AblationDirection d) {
  std::vector<AblationVariant> out;
  if (d == AblationDirection::Cumulative) {
    out.push_back({"step0-none", sac::Methods::none()});
    for (std::size_t k = 1; k <= sac::kMethodOrder.size(); ++k) {
      out.push_back({"step" + std::to_string(k) + "+" + std::string(sac::method_name(sac::kMethodOrder[k - 1])),
                     sac::Methods::first(k)});
    }
  } else {
    for (sac::Method m : sac::kMethodOrder) {
      out.push_back({"no-" + std::string(sac::method_name(m)), sac::Methods::all().without(m)});
    }
  }
  return out;
}

struct TableRow {
  std::string label;
  Stats score;
  Stats final_return;
  std::size_t crashes = 0;
};

inline TableRow table_row(std::string label, const TrainReport& r) {
  return {std::move(label), r.score, r.final_return, r.crashes};
}

inline void write_table_csv(const std::filesystem::path& path, const std::vector<TableRow>& rows,
                            const std::string& key_header = "config") {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream o(path);
  o << key_header << ",mean_score,std_score,mean_return,std_return,crashes,n\n";
  for (const TableRow& r : rows) {
    o << r.label << "," << detail::fmt_double(r.score.mean) << "," << detail::fmt_double(r.score.stddev) << ","
      << detail::fmt_double(r.final_return.mean) << "," << detail::fmt_double(r.final_return.stddev) << ","
      << r.crashes << "," << r.score.n << "\n";
  }
}

/// Emulated run of `base` with the given toggles.
inline RunSpec with_methods(const RunSpec& base, const sac::Methods& m) {
  RunSpec s = base;
  s.mode = m.all_on() ? Mode::Fp16Stable : m.all_off() ? Mode::Fp16Naive : Mode::Emulated;
  s.methods = m;
  return s;
}

/// Runs every variant. Leave-one-out also runs the full configuration first,
/// as the reference row.
inline std::vector<TableRow> ablate(const RunSpec& base, AblationDirection d, bool write = true) {
  std::vector<TableRow> rows;
  if (d == AblationDirection::LeaveOneOut) {
    rows.push_back(table_row("full", run(with_methods(base, sac::Methods::all()), write)));
  }
  for (const AblationVariant& v : ablation_variants(d)) {
    rows.push_back(table_row(v.label, run(with_methods(base, v.methods), write)));
  }
  if (write) {
    write_table_csv(std::filesystem::path(base.out_dir) /
                        (d == AblationDirection::Cumulative ? "ablation_cumulative.csv" : "ablation_leave_one_out.csv"),
                    rows);
  }
  return rows;
}

/// fp16-stable under e5mN for each N.
inline std::vector<TableRow> bitsweep(const RunSpec& base, const std::vector<int>& sig_bits, bool write = true) {
  for (int n : sig_bits)
    if (n < 3) throw ConfigError("bit sweep needs significand bits >= 3");
  std::vector<TableRow> rows;
  for (int n : sig_bits) {
    RunSpec s = with_methods(base, sac::Methods::all());
    s.train.sac.format = FloatFormat{5, n, base.format().subnormals, Rounding::NearestEven};
    rows.push_back(table_row(std::to_string(n), run(s, write)));
  }
  if (write) write_table_csv(std::filesystem::path(base.out_dir) / "bitsweep.csv", rows, "significand_bits");
  return rows;
}

// ---------------------------------------------------------------------------
// Paired-seed divergence

/// Mean absolute difference.
inline double mean_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw ShapeMismatch("mean_abs_diff: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

struct DivergencePoint {
  std::int64_t step = 0;
  Stats weight_l1;  ///< over seeds, of the per-parameter mean |w_a - w_b|
  Stats q_abs;      ///< over seeds, of the mean |Q_a - Q_b| on probe states
};

/// Distances between the snapshots of two runs trained from the same seeds.
inline std::vector<DivergencePoint> divergence_table(const std::vector<SeedResult>& a,
                                                     const std::vector<SeedResult>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("divergence: unpaired run lists");
  std::map<std::int64_t, std::pair<std::vector<double>, std::vector<double>>> by_step;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& sa = a[i].log.snapshots;
    const auto& sb = b[i].log.snapshots;
    for (std::size_t k = 0; k < std::min(sa.size(), sb.size()); ++k) {
      if (sa[k].step != sb[k].step) continue;
      by_step[sa[k].step].first.push_back(mean_abs_diff(sa[k].params, sb[k].params));
      by_step[sa[k].step].second.push_back(mean_abs_diff(sa[k].q_probe, sb[k].q_probe));
    }
  }
  std::vector<DivergencePoint> out;
  for (const auto& [step, v] : by_step) out.push_back({step, stats(v.first), stats(v.second)});
  return out;
}

struct DivergenceReport {
  TrainReport reference;  ///< fp64
  TrainReport emulated;   ///< fp16-stable
  std::vector<DivergencePoint> points;
};

inline DivergenceReport divergence(const RunSpec& base, std::int64_t snapshot_interval, bool write = true) {
  RunSpec ref = base;
  set_mode(ref, Mode::Fp64);
  ref.train.snapshot_interval = snapshot_interval;
  RunSpec emu = with_methods(base, sac::Methods::all());
  emu.train.snapshot_interval = snapshot_interval;
  DivergenceReport r{run(ref, write), run(emu, write), {}};
  r.points = divergence_table(r.reference.runs, r.emulated.runs);
  if (write) {
    const auto path = std::filesystem::path(base.out_dir) / "divergence.csv";
    std::filesystem::create_directories(path.parent_path());
    std::ofstream o(path);
    o << "step,weight_l1_mean,weight_l1_std,q_abs_mean,q_abs_std\n";
    for (const auto& p : r.points) {
      o << p.step << "," << detail::fmt_double(p.weight_l1.mean) << "," << detail::fmt_double(p.weight_l1.stddev)
        << "," << detail::fmt_double(p.q_abs.mean) << "," << detail::fmt_double(p.q_abs.stddev) << "\n";
    }
  }
  return r;
}

}  // namespace lpsac::exp
