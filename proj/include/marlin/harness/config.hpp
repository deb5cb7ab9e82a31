#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "marlin/common.hpp"
#include "marlin/env/congestion_env.hpp"
#include "marlin/sac/agent.hpp"
#include "marlin/sac/train_loop.hpp"

namespace marlin::harness {

struct EvalConfig {
  int runs = 20;
  double file_kb = 3072;
  double abort_s = 80;
  std::uint64_t seed = 1000;  // run r uses seed + r
};

/// Everything an experiment needs. Reward shape and slot permutation are
/// not settable on their own: they follow from the scenario.
struct ExperimentConfig {
  char scenario = 'A';
  env::EnvConfig env{};
  sac::SacConfig agent{};
  sac::TrainConfig training{};
  EvalConfig eval{};

  /// Scenario A: basic reward. B: penalized reward. C: basic reward,
  /// slot order reshuffled every cycle.
  void apply_scenario() {
    env.reward = scenario == 'B' ? env::RewardKind::penalized : env::RewardKind::basic;
    env.traffic.permute = scenario == 'C';
    agent.obs_dim = env.history * env::kSummaryDim;
    env.seed = training.seed;
  }

  void validate() const {
    if (scenario != 'A' && scenario != 'B' && scenario != 'C') throw ConfigError("training.scenario must be A, B or C");
    env.validate();
    agent.validate();
    training.validate();
    if (eval.runs <= 0) throw ConfigError("eval.runs must be > 0");
    if (!(eval.file_kb > 0)) throw ConfigError("eval.file_kb must be > 0");
    if (!(eval.abort_s > 0)) throw ConfigError("eval.abort_s must be > 0");
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(trim(cur));
  return out;
}

inline double to_real(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  double x = 0;
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), x);
  if (ec != std::errc() || p != t.data() + t.size() || t.empty())
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return x;
}

template <class I>
I to_int(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  I x{};
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), x);
  if (ec != std::errc() || p != t.data() + t.size() || t.empty()) {
    // Accept integral values written as reals, e.g. 1e5.
    const double d = to_real(key, v);
    if (std::is_unsigned_v<I> && d < 0) throw ConfigError(key + ": must not be negative, got '" + v + "'");
    if (!(std::abs(d) < 9.2e18) || d != static_cast<double>(static_cast<I>(d))) throw ConfigError(key + ": expected an integer, got '" + v + "'");
    return static_cast<I>(d);
  }
  return x;
}

template <class I>
std::string int_str(I v) {
  return std::to_string(v);
}

}  // namespace detail

/// One configurable key: where it lives and how to read and write it.
struct ConfigField {
  std::string section;
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
  std::string name() const { return section + "." + key; }
};

inline const std::vector<ConfigField>& config_fields() {
  using detail::to_int;
  using detail::to_real;
  using C = ExperimentConfig;
  auto real = [](std::string sec, std::string key, auto member, double scale = 1.0) {
    const std::string name = sec + "." + key;
    return ConfigField{sec, key, [=](C& c, const std::string& v) { member(c) = to_real(name, v) * scale; },
                       [=](const C& c) {
                         const double v = member(const_cast<C&>(c));
                         return format_double(scale >= 1 ? v / scale : v * (1 / scale));
                       }};
  };
  auto integer = [](std::string sec, std::string key, auto member) {
    const std::string name = sec + "." + key;
    using I = std::remove_reference_t<decltype(member(std::declval<C&>()))>;
    return ConfigField{sec, key, [=](C& c, const std::string& v) { member(c) = to_int<I>(name, v); },
                       [=](const C& c) { return detail::int_str(member(const_cast<C&>(c))); }};
  };
  auto time_ms = [](std::string sec, std::string key, auto member, double unit_us) {
    const std::string name = sec + "." + key;
    return ConfigField{sec, key,
                       [=](C& c, const std::string& v) {
                         const double x = to_real(name, v) * unit_us;
                         member(c) = static_cast<TimeUs>(x + (x >= 0 ? 0.5 : -0.5));
                       },
                       [=](const C& c) { return format_double(static_cast<double>(member(const_cast<C&>(c))) / unit_us); }};
  };

  static const std::vector<ConfigField> fields = [&] {
    std::vector<ConfigField> f;
    // [network]
    f.push_back(real("network", "shaper_rate_kbps", [](C& c) -> double& { return c.env.link.shaper_rate; }, kBytesPerKB));
    f.push_back(real("network", "efficiency", [](C& c) -> double& { return c.env.link.shaper_efficiency; }));
    f.push_back(time_ms("network", "one_way_delay_ms", [](C& c) -> TimeUs& { return c.env.link.one_way_delay; }, 1e3));
    f.push_back(time_ms("network", "reverse_delay_ms", [](C& c) -> TimeUs& { return c.env.link.reverse_delay; }, 1e3));
    f.push_back(real("network", "loss_pct", [](C& c) -> double& { return c.env.link.loss_prob; }, 0.01));
    f.push_back(ConfigField{
        "network", "queue_kb",
        [](C& c, const std::string& v) {
          const double x = to_real("network.queue_kb", v) * kBytesPerKB;
          if (!(x >= 1)) throw ConfigError("network.queue_kb must be > 0");
          c.env.link.queue_capacity = static_cast<std::uint32_t>(x + 0.5);
        },
        [](const C& c) { return format_double(c.env.link.queue_capacity / kBytesPerKB); }});
    f.push_back(time_ms("network", "ack_processing_us", [](C& c) -> TimeUs& { return c.env.connection.processing_time; }, 1.0));

    // [traffic]
    f.push_back(ConfigField{
        "traffic", "elephants",
        [](C& c, const std::string& v) {
          std::vector<sim::ElephantSlot> slots;
          for (const auto& item : detail::split(v, ',')) {
            if (item.empty()) continue;
            auto parts = detail::split(item, ' ');
            parts.erase(std::remove(parts.begin(), parts.end(), std::string()), parts.end());
            if (parts.empty() || parts.size() > 2)
              throw ConfigError("traffic.elephants: expected '<kbps> [rate|window]' entries, got '" + item + "'");
            sim::ElephantSlot s;
            s.rate = to_real("traffic.elephants", parts[0]) * kBytesPerKB;
            if (parts.size() == 2) {
              if (parts[1] == "window") s.kind = sim::ElephantKind::window_driven;
              else if (parts[1] != "rate")
                throw ConfigError("traffic.elephants: unknown elephant kind '" + parts[1] + "' (rate or window)");
            }
            slots.push_back(s);
          }
          c.env.traffic.elephant_slots = std::move(slots);
        },
        [](const C& c) {
          std::string out;
          for (const auto& s : c.env.traffic.elephant_slots) {
            if (!out.empty()) out += ", ";
            out += format_double(s.rate / kBytesPerKB);
            out += s.kind == sim::ElephantKind::window_driven ? " window" : " rate";
          }
          return out;
        }});
    f.push_back(time_ms("traffic", "slot_s", [](C& c) -> TimeUs& { return c.env.traffic.slot_duration; }, 1e6));
    f.push_back(real("traffic", "mice_kbps", [](C& c) -> double& { return c.env.traffic.mice_mean_rate; }, kBytesPerKB));
    f.push_back(integer("traffic", "mice_flows", [](C& c) -> int& { return c.env.traffic.mice_flows; }));
    f.push_back(integer("traffic", "mice_min_b", [](C& c) -> std::uint32_t& { return c.env.traffic.mice_min_bytes; }));
    f.push_back(integer("traffic", "mice_max_b", [](C& c) -> std::uint32_t& { return c.env.traffic.mice_max_bytes; }));
    f.push_back(integer("traffic", "elephant_packet_b", [](C& c) -> std::uint32_t& { return c.env.traffic.elephant_packet; }));

    // [agent]
    f.push_back(integer("agent", "payload_b", [](C& c) -> std::uint32_t& { return c.env.connection.payload; }));
    f.push_back(integer("agent", "initial_cwnd_b", [](C& c) -> std::uint32_t& { return c.env.connection.initial_cwnd; }));
    f.push_back(integer("agent", "cwnd_floor_b", [](C& c) -> std::uint32_t& { return c.env.connection.cwnd_floor; }));
    f.push_back(integer("agent", "cwnd_cap_b", [](C& c) -> std::uint32_t& { return c.env.connection.cwnd_cap; }));
    f.push_back(real("agent", "target_rate_kbps", [](C& c) -> double& { return c.env.target_rate; }, kBytesPerKB));
    f.push_back(integer("agent", "history", [](C& c) -> std::size_t& { return c.env.history; }));
    f.push_back(real("agent", "ema_alpha", [](C& c) -> double& { return c.env.ema_alpha; }));
    f.push_back(real("agent", "norm_decay", [](C& c) -> double& { return c.env.norm_decay; }));
    f.push_back(time_ms("agent", "inference_delay_ms", [](C& c) -> TimeUs& { return c.env.inference_delay; }, 1e3));
    f.push_back(time_ms("agent", "stall_timeout_ms", [](C& c) -> TimeUs& { return c.env.stall_timeout; }, 1e3));
    f.push_back(ConfigField{
        "agent", "hidden",
        [](C& c, const std::string& v) {
          std::vector<std::size_t> h;
          for (const auto& item : detail::split(v, ','))
            if (!item.empty()) h.push_back(to_int<std::size_t>("agent.hidden", item));
          c.agent.hidden = std::move(h);
        },
        [](const C& c) {
          std::string out;
          for (auto h : c.agent.hidden) out += (out.empty() ? "" : ", ") + std::to_string(h);
          return out;
        }});
    f.push_back(real("agent", "learning_rate", [](C& c) -> double& { return c.agent.learning_rate; }));
    f.push_back(real("agent", "gamma", [](C& c) -> double& { return c.agent.gamma; }));
    f.push_back(real("agent", "tau", [](C& c) -> double& { return c.agent.tau; }));
    f.push_back(integer("agent", "batch_size", [](C& c) -> std::size_t& { return c.agent.batch_size; }));
    f.push_back(real("agent", "initial_log_alpha", [](C& c) -> double& { return c.agent.initial_log_alpha; }));
    f.push_back(real("agent", "target_entropy", [](C& c) -> double& { return c.agent.target_entropy; }));

    // [training]
    f.push_back(ConfigField{
        "training", "scenario",
        [](C& c, const std::string& v) {
          const std::string t = detail::trim(v);
          if (t.size() != 1 || (t != "A" && t != "B" && t != "C" && t != "a" && t != "b" && t != "c"))
            throw ConfigError("training.scenario must be A, B or C, got '" + v + "'");
          c.scenario = static_cast<char>(std::toupper(static_cast<unsigned char>(t[0])));
        },
        [](const C& c) { return std::string(1, c.scenario); }});
    f.push_back(integer("training", "steps", [](C& c) -> std::int64_t& { return c.training.total_steps; }));
    f.push_back(integer("training", "learning_starts", [](C& c) -> std::int64_t& { return c.training.learning_starts; }));
    f.push_back(integer("training", "gradient_steps", [](C& c) -> std::int64_t& { return c.training.gradient_steps; }));
    f.push_back(integer("training", "buffer_size", [](C& c) -> std::size_t& { return c.training.buffer_size; }));
    f.push_back(integer("training", "episode_steps", [](C& c) -> std::size_t& { return c.env.episode_steps; }));
    f.push_back(integer("training", "max_failures", [](C& c) -> int& { return c.training.max_consecutive_failures; }));
    f.push_back(ConfigField{
        "training", "freeze_norm",
        [](C& c, const std::string& v) {
          const std::string t = detail::trim(v);
          if (t == "true" || t == "1") c.training.freeze_norm_after_warmup = true;
          else if (t == "false" || t == "0") c.training.freeze_norm_after_warmup = false;
          else throw ConfigError("training.freeze_norm must be true or false, got '" + v + "'");
        },
        [](const C& c) { return std::string(c.training.freeze_norm_after_warmup ? "true" : "false"); }});
    f.push_back(integer("training", "seed", [](C& c) -> std::uint64_t& { return c.training.seed; }));

    // [eval]
    f.push_back(integer("eval", "runs", [](C& c) -> int& { return c.eval.runs; }));
    f.push_back(real("eval", "file_kb", [](C& c) -> double& { return c.eval.file_kb; }));
    f.push_back(real("eval", "abort_s", [](C& c) -> double& { return c.eval.abort_s; }));
    f.push_back(integer("eval", "seed", [](C& c) -> std::uint64_t& { return c.eval.seed; }));
    return f;
  }();
  return fields;
}

inline const ConfigField& find_field(const std::string& section, const std::string& key) {
  for (const auto& f : config_fields())
    if (f.section == section && f.key == key) return f;
  throw ConfigError("unknown config key '" + section + "." + key + "'");
}

/// "section.key" -> value, in application order.
using Overrides = std::vector<std::pair<std::string, std::string>>;

inline void set_value(ExperimentConfig& c, const std::string& dotted, const std::string& value) {
  const auto dot = dotted.find('.');
  if (dot == std::string::npos) throw ConfigError("override '" + dotted + "' must be section.key");
  find_field(dotted.substr(0, dot), dotted.substr(dot + 1)).set(c, value);
}

/// Parses "section.key=value".
inline std::pair<std::string, std::string> parse_assignment(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + s + "' must look like section.key=value");
  return {detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1))};
}

inline void apply_ini(ExperimentConfig& c, std::istream& is, const std::string& origin) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ConfigError(origin + ": key '" + section + "' is outside any section");
    for (const auto& [key, value] : body) {
      const auto& f = find_field(section, key);
      f.set(c, value.data());
    }
  }
}

inline void apply_ini_file(ExperimentConfig& c, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  apply_ini(c, is, path.string());
}

/// Name of the environment variable overriding a key, e.g.
/// MARLIN_NETWORK_LOSS_PCT.
inline std::string env_var_name(const ConfigField& f) {
  std::string s = "MARLIN_" + f.section + "_" + f.key;
  for (auto& ch : s) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return s;
}

using EnvLookup = std::function<const char*(const char*)>;

inline void apply_environment(ExperimentConfig& c, const EnvLookup& lookup) {
  for (const auto& f : config_fields()) {
    const std::string name = env_var_name(f);
    if (const char* v = lookup(name.c_str())) {
      try {
        f.set(c, v);
      } catch (const ConfigError& e) {
        throw ConfigError(std::string(e.what()) + " (from " + name + ")");
      }
    }
  }
}

/// Defaults, then the file, then MARLIN_* variables, then explicit overrides.
inline ExperimentConfig load_config(const std::optional<std::filesystem::path>& file, const Overrides& overrides = {},
                                    const EnvLookup& lookup = [](const char* n) { return std::getenv(n); }) {
  ExperimentConfig c;
  if (file) apply_ini_file(c, *file);
  if (lookup) apply_environment(c, lookup);
  for (const auto& [k, v] : overrides) set_value(c, k, v);
  c.apply_scenario();
  c.validate();
  return c;
}

/// Every resolved value, INI syntax, fixed order. Loading it back yields
/// the same configuration.
inline std::string config_echo(const ExperimentConfig& c) {
  std::string out, section;
  for (const auto& f : config_fields()) {
    if (f.section != section) {
      if (!section.empty()) out += '\n';
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(c) + "\n";
  }
  return out;
}

inline std::uint64_t config_hash(const ExperimentConfig& c) { return fnv1a64(config_echo(c)); }

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace marlin::harness
