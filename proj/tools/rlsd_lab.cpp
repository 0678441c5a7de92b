#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "rlsd_lab/report.hpp"
#include "rlsd_lab/theory.hpp"

namespace fs = std::filesystem;
using namespace rlsd;

namespace {

enum Exit { kOk = 0, kUsage = 1, kCheckFailed = 2, kIo = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// --seed beats RLSD_LAB_SEED, which beats the config file.
std::optional<std::uint64_t> seed_override(const std::optional<std::uint64_t>& seed_flag) {
  if (seed_flag) return seed_flag;
  const char* env = std::getenv("RLSD_LAB_SEED");
  if (!env || !*env) return std::nullopt;
  try {
    std::size_t used = 0;
    std::uint64_t v = std::stoull(env, &used);
    if (env[used] != '\0') throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw UsageError(std::string("RLSD_LAB_SEED is not an unsigned integer: '") + env + "'");
  }
}

TrainerConfig resolve_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
  TrainerConfig cfg = path.empty() ? TrainerConfig{} : load_config(path);
  if (seed) cfg.seed = *seed;
  return cfg;
}

int cmd_train(const TrainerConfig& cfg, const fs::path& out) {
  auto suite = load_suite(cfg);
  RunLog log;
  log.config = to_json(cfg);
  Trainer tr(cfg, suite);
  log.records.push_back(tr.initial_record());
  for (int s = 1; s <= cfg.steps; ++s) {
    try {
      log.records.push_back(tr.train_step(s));
    } catch (const TrainAbort& e) {
      log.records.push_back(e.record);
      log.aborted = true;
      log.abort_reason = e.what();
      break;
    }
  }
  log.final_params = tr.params();
  persist(log, out);
  export_all_series(log.records, out);
  if (cfg.method == Method::rlsd && !tr.last_credit().empty()) {
    {
      auto f = open_output(out / "credit.csv");
      write_credit_csv(tr.last_credit(), f);
    }
    bool pos = false, neg = false;
    for (const auto& trace : tr.last_credit()) {
      if (trace.advantage > 0.0 && !pos) {
        auto f = open_output(out / "heatmap_correct.csv");
        export_credit_heatmap(trace, f);
        pos = true;
      } else if (trace.advantage < 0.0 && !neg) {
        auto f = open_output(out / "heatmap_incorrect.csv");
        export_credit_heatmap(trace, f);
        neg = true;
      }
    }
  }
  const auto& last = log.records.back();
  std::cout << "train: " << to_string(cfg.method) << " seed=" << cfg.seed << " steps=" << last.step;
  if (last.train_accuracy) std::cout << " train_acc=" << format_g12(*last.train_accuracy);
  if (last.heldout_accuracy) std::cout << " heldout_acc=" << format_g12(*last.heldout_accuracy);
  std::cout << " -> " << out.string() << '\n';
  if (log.aborted) {
    std::cerr << "train: aborted: " << log.abort_reason << '\n';
    return kCheckFailed;
  }
  return kOk;
}

int cmd_theory(const TrainerConfig& cfg, const fs::path& out) {
  auto results = run_theory_suite(cfg.seed, cfg, {cfg.seed, cfg.seed + 1});
  nlohmann::json report;
  report["seed"] = cfg.seed;
  bool ok = true;
  for (const auto& r : results) {
    report["checks"][r.name] = {{"pass", r.pass}, {"detail", r.detail}};
    ok = ok && r.pass;
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << '\n';
  }
  report["pass"] = ok;
  if (!out.empty()) {
    auto f = open_output(out / "theory.json");
    f << report.dump(2) << '\n';
  }
  return ok ? kOk : kCheckFailed;
}

int cmd_ablate(const TrainerConfig& cfg, const fs::path& out) {
  auto rows = run_ablation(cfg, out, &std::cerr);
  for (const auto& s : rows)
    std::cout << s.name << ": kl " << format_g12(s.kl_first) << " -> " << format_g12(s.kl_last) << ", heldout peak "
              << format_g12(s.heldout_peak) << " @" << s.heldout_peak_step << ", final " << format_g12(s.heldout_last)
              << '\n';
  return kOk;
}

int cmd_report(const fs::path& runlog, const fs::path& out, const std::vector<std::string>& series) {
  std::ifstream in(runlog, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open runlog '" + runlog.string() + "'");
  auto records = read_runlog(in);
  std::vector<Series> which;
  for (const auto& s : series) {
    try {
      which.push_back(parse_series(s));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (which.empty()) which.assign(std::begin(kAllSeries), std::end(kAllSeries));
  for (Series s : which) {
    auto f = open_output(out / (std::string(to_string(s)) + ".csv"));
    export_series(records, s, f);
  }
  return kOk;
}

int cmd_gen_suite(const TrainerConfig& cfg, const std::optional<std::uint64_t>& seed, const fs::path& out) {
  SuiteConfig sc = cfg.suite;
  if (seed) sc.seed = *seed;
  auto suite = make_suite(sc);
  auto f = open_output(out);
  write_suite(suite, f);
  std::cout << "gen-suite: " << suite.size() << " instances -> " << out.string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rlsd-lab: toy-scale self-distillation and RLVR credit experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir, runlog_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> series;

  auto common = [&](CLI::App* sub, bool out_required) {
    sub->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    auto* o = sub->add_option("--out", out_dir, "output directory");
    if (out_required) o->required();
    sub->add_option("--seed", seed, "seed override (else RLSD_LAB_SEED, else config)");
  };
  auto* train = app.add_subcommand("train", "run one training configuration");
  common(train, true);
  auto* theory = app.add_subcommand("theory", "run the exact verification suite");
  common(theory, false);
  auto* ablate = app.add_subcommand("ablate", "distillation pilot and method comparison");
  common(ablate, true);
  auto* report = app.add_subcommand("report", "export CSV series from a runlog");
  report->add_option("--runlog", runlog_path, "runlog.jsonl")->required();
  report->add_option("--out", out_dir, "output directory")->required();
  report->add_option("--series", series, "reward|kl|entropy|clip|leakage|rho (default: all)");
  auto* gen = app.add_subcommand("gen-suite", "write the instance suite to a file");
  gen->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  gen->add_option("--out", out_dir, "suite file")->required();
  gen->add_option("--seed", seed, "suite seed override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kUsage;
  }

  try {
    if (report->parsed()) return cmd_report(runlog_path, out_dir, series);
    auto override_seed = seed_override(seed);
    if (gen->parsed()) return cmd_gen_suite(resolve_config(config_path, std::nullopt), override_seed, out_dir);
    TrainerConfig cfg = resolve_config(config_path, override_seed);
    if (train->parsed()) return cmd_train(cfg, out_dir);
    if (theory->parsed()) return cmd_theory(cfg, out_dir);
    if (ablate->parsed()) return cmd_ablate(cfg, out_dir);
  } catch (const std::ios_base::failure& e) {
    std::cerr << "rlsd-lab: " << e.what() << '\n';
    return kIo;
  } catch (const UsageError& e) {
    std::cerr << "rlsd-lab: " << e.what() << '\n';
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "rlsd-lab: " << e.what() << '\n';
    return kUsage;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "rlsd-lab: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "rlsd-lab: " << e.what() << '\n';
    return kCheckFailed;
  }
  return kUsage;
}
