#pragma once

// Plot-ready CSV export and the ablation driver behind the CLI.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "rlsd_lab/advantage.hpp"
#include "rlsd_lab/trainer.hpp"

namespace rlsd {

inline constexpr const char* kCsvSchema = "rlsd-lab-csv/1";

enum class Series { reward, kl, entropy, clip, leakage, rho };

inline constexpr Series kAllSeries[] = {Series::reward, Series::kl, Series::entropy,
                                        Series::clip, Series::leakage, Series::rho};

inline const char* to_string(Series s) {
  switch (s) {
    case Series::reward: return "reward";
    case Series::kl: return "kl";
    case Series::entropy: return "entropy";
    case Series::clip: return "clip";
    case Series::leakage: return "leakage";
    case Series::rho: return "rho";
  }
  return "?";
}

inline Series parse_series(const std::string& s) {
  for (Series x : kAllSeries)
    if (s == to_string(x)) return x;
  throw std::invalid_argument("unknown series '" + s + "' (expected reward|kl|entropy|clip|leakage|rho)");
}

inline double series_value(const MetricRecord& r, Series s) {
  switch (s) {
    case Series::reward: return r.mean_reward;
    case Series::kl: return r.kl;
    case Series::entropy: return r.entropy;
    case Series::clip: return r.clip_fraction;
    case Series::leakage: return r.leakage;
    case Series::rho: return r.rho;
  }
  return 0.0;
}

// Spearman rank correlation of y against its index 0..n-1; ties take the
// average rank. Zero when y is constant or shorter than two points.
inline double spearman_vs_index(std::span<const double> y) {
  const std::size_t n = y.size();
  if (n < 2) return 0.0;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return y[a] < y[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && y[idx[j + 1]] == y[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  const double mean = 0.5 * static_cast<double>(n - 1);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double dx = static_cast<double>(i) - mean, dy = rank[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  return syy > 0.0 ? sxy / std::sqrt(sxx * syy) : 0.0;
}

inline std::string format_g12(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", x);
  return buf;
}

inline void export_series(const std::vector<MetricRecord>& records, Series which, std::ostream& os) {
  os << "# schema=" << kCsvSchema << " series=" << to_string(which) << '\n';
  os << "step," << to_string(which) << '\n';
  for (const auto& r : records) os << r.step << ',' << format_g12(series_value(r, which)) << '\n';
}

// One row per generated token of a single rollout.
inline void export_credit_heatmap(const CreditTrace& trace, std::ostream& os) {
  os << "# schema=" << kCsvSchema << " heatmap rollout=" << trace.rollout
     << " advantage=" << format_g12(trace.advantage) << '\n';
  os << "position,token,adv\n";
  for (const auto& c : trace.tokens) os << c.t << ',' << c.token << ',' << format_g12(c.adv) << '\n';
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw std::ios_base::failure("cannot create '" + path.parent_path().string() + "': " + ec.message());
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::ios_base::failure("cannot write '" + path.string() + "'");
  return f;
}

// <dir>/<series>.csv for every series.
inline void export_all_series(const std::vector<MetricRecord>& records, const std::filesystem::path& dir) {
  for (Series s : kAllSeries) {
    auto f = open_output(dir / (std::string(to_string(s)) + ".csv"));
    export_series(records, s, f);
  }
}

// ---------------------------------------------------------------------------

struct AblationArm {
  std::string name;
  TrainerConfig config;
};

// Distillation pilot (OPSD full / Top-1 variants against OPD) followed by the
// method comparison, all from one base config.
inline std::vector<AblationArm> ablation_arms(const TrainerConfig& base) {
  std::vector<AblationArm> arms;
  auto arm = [&](std::string name, Method m, OpsdVariant v = OpsdVariant::full) {
    TrainerConfig c = base;
    c.method = m;
    c.opsd_variant = v;
    arms.push_back({std::move(name), c});
  };
  arm("opsd_full", Method::opsd);
  arm("opsd_teacher_top1", Method::opsd, OpsdVariant::teacher_top1);
  arm("opsd_student_top1", Method::opsd, OpsdVariant::student_top1);
  arm("opd", Method::opd);
  arm("grpo", Method::grpo);
  arm("combo", Method::combo);
  arm("sdpo", Method::sdpo);
  arm("rlsd", Method::rlsd);
  return arms;
}

struct AblationSummary {
  std::string name;
  double kl_first = 0.0;
  double kl_last = 0.0;
  double leakage_last = 0.0;
  double leakage_rho = 0.0;  // rank correlation of leakage with step, steps >= 1
  double heldout_peak = 0.0;
  int heldout_peak_step = 0;
  double heldout_last = 0.0;
};

inline AblationSummary summarize(const std::string& name, const std::vector<MetricRecord>& records) {
  AblationSummary s;
  s.name = name;
  if (records.size() > 1) s.kl_first = records[1].kl;
  if (!records.empty()) {
    s.kl_last = records.back().kl;
    s.leakage_last = records.back().leakage;
  }
  std::vector<double> leak;
  for (const auto& r : records)
    if (r.step >= 1) leak.push_back(r.leakage);
  s.leakage_rho = spearman_vs_index(leak);
  bool any = false;
  for (const auto& r : records) {
    if (!r.heldout_accuracy) continue;
    if (!any || *r.heldout_accuracy > s.heldout_peak) {
      s.heldout_peak = *r.heldout_accuracy;
      s.heldout_peak_step = r.step;
    }
    s.heldout_last = *r.heldout_accuracy;
    any = true;
  }
  return s;
}

inline std::vector<AblationSummary> run_ablation(const TrainerConfig& base, const std::filesystem::path& out,
                                                 std::ostream* progress = nullptr) {
  auto suite = load_suite(base);
  std::vector<AblationSummary> rows;
  for (const auto& arm : ablation_arms(base)) {
    if (progress) *progress << "ablate: " << arm.name << '\n' << std::flush;
    auto log = run(arm.config, suite);
    persist(log, out / arm.name);
    export_all_series(log.records, out / arm.name);
    rows.push_back(summarize(arm.name, log.records));
  }
  auto f = open_output(out / "summary.csv");
  f << "# schema=" << kCsvSchema << " ablation\n";
  f << "arm,kl_step1,kl_final,leakage_final,leakage_rho,heldout_peak,heldout_peak_step,heldout_final\n";
  for (const auto& s : rows)
    f << s.name << ',' << format_g12(s.kl_first) << ',' << format_g12(s.kl_last) << ','
      << format_g12(s.leakage_last) << ',' << format_g12(s.leakage_rho) << ','
      << format_g12(s.heldout_peak) << ',' << s.heldout_peak_step << ','
      << format_g12(s.heldout_last) << '\n';
  return rows;
}

}  // namespace rlsd
