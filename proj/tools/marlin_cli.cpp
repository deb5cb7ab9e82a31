// marlin: train, evaluate and inspect congestion-control agents on the
// simulated dumbbell.
//
// Exit codes: 0 ok, 2 usage or configuration error, 3 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "marlin/common.hpp"
#include "marlin/harness/config.hpp"
#include "marlin/harness/experiment.hpp"
#include "marlin/sac/checkpoint.hpp"
#include "marlin/sim/traffic.hpp"

#ifndef MARLIN_VERSION
#define MARLIN_VERSION "0.0.0-unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace marlin;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kRuntime = 3;

/// Errors the user can fix by changing arguments or inputs.
struct UsageError : Error {
  using Error::Error;
};

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

struct ConfigArgs {
  std::optional<std::string> file;
  std::vector<std::string> set;
  std::optional<std::string> scenario;
  std::optional<std::int64_t> steps;
  std::optional<std::uint64_t> seed;
  std::optional<int> runs;

  void add_to(CLI::App* cmd, bool training) {
    cmd->add_option("-c,--config", file, "INI configuration file");
    cmd->add_option("--set", set, "Override a value, e.g. --set network.loss_pct=5 (repeatable)");
    cmd->add_option("--scenario", scenario, "Training scenario A, B or C");
    cmd->add_option("--seed", seed, training ? "Training seed" : "Seed of the first evaluation run");
    if (training) cmd->add_option("--steps", steps, "Environment steps");
    else cmd->add_option("--runs", runs, "Number of transfers");
  }

  harness::ExperimentConfig load(bool training) const {
    harness::Overrides o;
    for (const auto& s : set) o.push_back(harness::parse_assignment(s));
    if (scenario) o.emplace_back("training.scenario", *scenario);
    if (steps) o.emplace_back("training.steps", std::to_string(*steps));
    if (seed) o.emplace_back(training ? "training.seed" : "eval.seed", std::to_string(*seed));
    if (runs) o.emplace_back("eval.runs", std::to_string(*runs));
    std::optional<fs::path> path;
    if (file) path = *file;
    return harness::load_config(path, o);
  }
};

/// Output directory plus the manifest that records everything written to it.
class RunDir {
 public:
  RunDir(fs::path dir, std::string command, const harness::ExperimentConfig& cfg, std::uint64_t seed)
      : dir_(std::move(dir)) {
    fs::create_directories(dir_);
    manifest_["command"] = std::move(command);
    manifest_["code_version"] = MARLIN_VERSION;
    manifest_["config_hash"] = harness::hex64(harness::config_hash(cfg));
    manifest_["seed"] = seed;
    manifest_["started_at"] = utc_now();
    manifest_["outputs"] = json::array();
    write_file("config.ini", harness::config_echo(cfg));
  }

  fs::path path(const std::string& rel) const { return dir_ / rel; }

  void record(const std::string& rel) { manifest_["outputs"].push_back(rel); }

  void write_file(const std::string& rel, const std::string& content) {
    const fs::path p = path(rel);
    fs::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    os << content;
    if (!os) throw Error("cannot write " + p.string());
    record(rel);
  }

  void set(const std::string& key, json v) { manifest_[key] = std::move(v); }

  void finish() {
    manifest_["finished_at"] = utc_now();
    std::ofstream os(path("manifest.json"), std::ios::trunc);
    os << manifest_.dump(2) << '\n';
    if (!os) throw Error("cannot write manifest");
  }

 private:
  fs::path dir_;
  json manifest_;
};

json summary_json(const harness::EvalSummary& s) {
  json j;
  j["runs"] = s.runs;
  j["completed"] = s.completed;
  j["aborted"] = s.aborted;
  j["mean_s"] = number_or_null(s.mean_s);
  j["best_s"] = number_or_null(s.best_s);
  j["worst_s"] = number_or_null(s.worst_s);
  j["mean_with_aborts_s"] = number_or_null(s.mean_capped_s);
  j["reference_s"] = number_or_null(s.reference_s);
  j["fraction_at_or_below_reference"] = number_or_null(s.beat_reference);
  return j;
}

void print_summary(const std::string& label, const harness::EvalSummary& s) {
  std::cout << label << ": " << s.completed << "/" << s.runs << " completed";
  if (s.completed > 0)
    std::cout << ", mean " << format_double(s.mean_s) << " s, best " << format_double(s.best_s) << " s, worst "
              << format_double(s.worst_s) << " s";
  if (std::isfinite(s.beat_reference))
    std::cout << ", " << format_double(100 * s.beat_reference) << "% at or below cubic mean "
              << format_double(s.reference_s) << " s";
  std::cout << '\n';
}

// ---- train -------------------------------------------------------------------

int cmd_train(const ConfigArgs& args, const std::string& out_dir, bool quiet) {
  const auto cfg = args.load(true);  // config errors surface before anything is written
  RunDir run(out_dir, "train", cfg, cfg.training.seed);

  const fs::path metrics_path = run.path("metrics.csv");
  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
  if (!metrics) throw Error("cannot write " + metrics_path.string());
  run.record("metrics.csv");
  const auto t0 = std::chrono::steady_clock::now();
  auto outcome = harness::run_training(cfg, &metrics, [&](const sac::MetricsRow& row) {
    metrics.flush();
    if (quiet || row.episode % 25 != 0) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "episode " << row.episode << "  steps " << row.env_steps << "  mean_return_100 "
              << std::setprecision(5) << row.mean_return_100 << "  alpha " << row.entropy_coeff << "  ("
              << std::setprecision(3) << secs << " s)\n";
  });
  metrics.close();

  sac::save_checkpoint(run.path("checkpoint.bin"), *outcome.agent, outcome.normalizer, harness::config_hash(cfg));
  run.record("checkpoint.bin");
  const auto& r = outcome.result;
  run.set("env_steps", r.env_steps);
  run.set("gradient_steps", r.gradient_steps);
  run.set("episodes", r.episode_returns.size());
  run.set("discarded_episodes", r.discarded_episodes);
  run.set("final_mean_return_100", r.metrics.empty() ? json(nullptr) : json(r.metrics.back().mean_return_100));
  run.finish();
  std::cout << "trained " << r.env_steps << " steps, " << r.episode_returns.size() << " episodes";
  if (!r.metrics.empty()) std::cout << ", mean_return_100 " << format_double(r.metrics.back().mean_return_100);
  std::cout << "\ncheckpoint: " << run.path("checkpoint.bin").string() << '\n';
  return kOk;
}

// ---- eval --------------------------------------------------------------------

int cmd_eval(const ConfigArgs& args, const std::optional<std::string>& checkpoint,
             const std::optional<std::string>& baseline, const std::string& out_dir, bool no_reference) {
  if (checkpoint.has_value() == baseline.has_value()) throw UsageError("eval needs exactly one of --checkpoint or --baseline");
  auto cfg = args.load(false);

  std::optional<sac::LoadedPolicy> loaded;
  harness::EvalPolicy policy;
  if (checkpoint) {
    if (!fs::exists(*checkpoint)) throw UsageError("checkpoint not found: " + *checkpoint);
    loaded = sac::load_checkpoint(*checkpoint, cfg.agent);
    if (loaded->normalizer.dim() != cfg.env.history * env::kSummaryDim)
      throw UsageError("checkpoint expects " + std::to_string(loaded->normalizer.dim()) +
                       " observation components but agent.history gives " +
                       std::to_string(cfg.env.history * env::kSummaryDim));
    if (loaded->config_hash != harness::config_hash(cfg))
      std::cerr << "note: checkpoint was trained under config " << harness::hex64(loaded->config_hash)
                << ", evaluating under " << harness::hex64(harness::config_hash(cfg)) << '\n';
    policy = harness::EvalPolicy::of(*loaded->agent, loaded->normalizer);
  } else {
    policy = harness::EvalPolicy::baseline(harness::parse_baseline(*baseline));
  }

  RunDir run(out_dir, "eval", cfg, cfg.eval.seed);
  run.set("policy", checkpoint ? "checkpoint:" + *checkpoint : "baseline:" + *baseline);
  const auto results = harness::run_eval(cfg, policy);

  std::optional<double> reference;
  if (!no_reference && policy.kind != harness::PolicyKind::cubic) {
    const auto cubic = harness::summarize(harness::run_eval(cfg, harness::EvalPolicy::baseline(harness::PolicyKind::cubic)));
    if (cubic.completed > 0) reference = cubic.mean_s;
  }
  const auto summary = harness::summarize(results, reference);

  std::ostringstream csv;
  harness::write_results_csv(csv, cfg.scenario, results);
  run.write_file("results.csv", csv.str());
  for (const auto& r : results) {
    std::ostringstream t;
    harness::write_trajectory_csv(t, r);
    char name[64];
    std::snprintf(name, sizeof name, "trajectories/run_%03d.csv", r.run_id);
    run.write_file(name, t.str());
  }
  run.write_file("summary.json", summary_json(summary).dump(2) + "\n");
  run.set("summary", summary_json(summary));
  run.finish();
  print_summary(checkpoint ? "agent" : *baseline, summary);
  return kOk;
}

// ---- inspect -------------------------------------------------------------------

bool has_checkpoint_magic(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  char magic[8] = {};
  return is.read(magic, 8) && std::equal(magic, magic + 8, sac::kCheckpointMagic);
}

void inspect_checkpoint(const fs::path& p) {
  const auto f = sac::read_checkpoint_file(p);
  const auto shape = sac::stored_actor_shape(f);
  std::cout << "checkpoint " << p.string() << "\n";
  std::cout << "  format_version: " << f.version << "\n";
  std::cout << "  config_hash: " << harness::hex64(f.config_hash) << "\n";
  std::cout << "  obs_dim=" << shape.front() << "\n";
  std::cout << "  hidden:";
  for (std::size_t i = 1; i + 1 < shape.size(); ++i) std::cout << ' ' << shape[i];
  std::cout << "\n";
  const double log_alpha = f.at("log_alpha").data[0];
  std::cout << "  entropy_coeff: " << format_double(std::exp(log_alpha)) << " (log " << format_double(log_alpha) << ")\n";
  std::cout << "  gradient_steps: " << static_cast<std::int64_t>(f.at("grad_steps").data[0]) << "\n";
  const auto& mean = f.at("norm.mean").data;
  const auto& var = f.at("norm.var").data;
  auto stats = [](const std::vector<double>& v) {
    double lo = v.front(), hi = v.front(), sum = 0;
    for (double x : v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
      sum += x;
    }
    return "min " + format_double(lo) + ", mean " + format_double(sum / v.size()) + ", max " + format_double(hi);
  };
  std::cout << "  normalizer: count " << static_cast<std::uint64_t>(f.at("norm.count").data[0]) << ", decay "
            << format_double(f.at("norm.decay").data[0]) << "\n";
  std::cout << "    mean: " << stats(mean) << "\n";
  std::cout << "    var:  " << stats(var) << "\n";
  std::cout << "  tensors: " << f.tensors.size() << "\n";
}

void inspect_csv(const fs::path& p) {
  std::ifstream is(p);
  std::string header, line;
  if (!std::getline(is, header)) throw UsageError(p.string() + " is empty");
  std::size_t rows = 0;
  while (std::getline(is, line))
    if (!line.empty()) ++rows;
  std::cout << "csv " << p.string() << "\n  rows: " << rows << "\n  columns:";
  std::istringstream cols(header);
  std::string c;
  while (std::getline(cols, c, ',')) std::cout << ' ' << c;
  std::cout << "\n";
}

int cmd_inspect(const std::string& target) {
  const fs::path p(target);
  if (!fs::exists(p)) throw UsageError("no such file: " + target);
  if (has_checkpoint_magic(p)) {
    inspect_checkpoint(p);
  } else if (p.extension() == ".ini") {
    std::cout << harness::config_echo(harness::load_config(p, {}, [](const char*) -> const char* { return nullptr; }));
  } else if (p.extension() == ".csv") {
    inspect_csv(p);
  } else {
    throw UsageError("unrecognised file format: " + target + " (expected a checkpoint, .ini or .csv)");
  }
  return kOk;
}

// ---- oracle --------------------------------------------------------------------

int cmd_oracle(const ConfigArgs& args, std::optional<double> file_kb) {
  const auto cfg = args.load(false);
  const double kb = file_kb.value_or(cfg.eval.file_kb);
  const auto& t = cfg.env.traffic;
  const auto& link = cfg.env.link;
  const double secs = sim::ideal_transfer_seconds(t, link, kb * kBytesPerKB);
  std::cout << "effective link rate: " << format_double(link.effective_rate() / kBytesPerKB) << " KB/s\n";
  if (!t.elephant_slots.empty()) {
    const TimeUs cycle = t.cycle_duration();
    std::cout << "residual capacity per " << format_double(to_seconds(cycle))
              << " s cycle: " << format_double(sim::residual_capacity(t, link, cycle) / kBytesPerKB) << " KB\n";
  }
  std::cout << "ideal transfer time for " << format_double(kb) << " KB: " << format_double(secs) << " s\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Soft actor-critic congestion control on a simulated dumbbell"};
  app.set_version_flag("--version", std::string(MARLIN_VERSION));
  app.require_subcommand(1);

  ConfigArgs train_args, eval_args, oracle_args;
  std::string train_out = "runs/train", eval_out = "runs/eval";
  bool quiet = false, no_reference = false;
  std::optional<std::string> checkpoint, baseline;
  std::string inspect_target;
  std::optional<double> oracle_kb;

  auto* train = app.add_subcommand("train", "Train an agent; writes checkpoint, metrics and manifest");
  train_args.add_to(train, true);
  train->add_option("-o,--out", train_out, "Output directory")->capture_default_str();
  train->add_flag("-q,--quiet", quiet, "No progress lines");

  auto* eval = app.add_subcommand("eval", "Repeated file transfers with a trained agent or a baseline");
  eval_args.add_to(eval, false);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint written by train");
  eval->add_option("--baseline", baseline, "cubic, fixed or random");
  eval->add_option("-o,--out", eval_out, "Output directory")->capture_default_str();
  eval->add_flag("--no-reference", no_reference, "Skip the cubic reference runs");

  auto* inspect = app.add_subcommand("inspect", "Describe a checkpoint, config or CSV file");
  inspect->add_option("path", inspect_target, "File to inspect")->required();

  auto* oracle = app.add_subcommand("oracle", "Ideal transfer time from the residual bottleneck capacity");
  oracle_args.add_to(oracle, false);
  oracle->add_option("--file-kb", oracle_kb, "Transfer size in KB");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*train) return cmd_train(train_args, train_out, quiet);
    if (*eval) return cmd_eval(eval_args, checkpoint, baseline, eval_out, no_reference);
    if (*inspect) return cmd_inspect(inspect_target);
    if (*oracle) return cmd_oracle(oracle_args, oracle_kb);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const sac::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
