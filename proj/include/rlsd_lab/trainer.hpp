#pragma once

// Training loop for every method, teacher management, exact per-step
// diagnostics, config parsing and RunLog persistence.

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "rlsd_lab/advantage.hpp"
#include "rlsd_lab/env.hpp"
#include "rlsd_lab/policy.hpp"

namespace rlsd {

enum class Method { grpo, opsd, opd, sdpo, combo, rlsd };
enum class TeacherStrategy { frozen, online, periodic };

inline constexpr int kConfigSchemaVersion = 1;

// Base-model initialization. The r-keyed features hold an in-context reading
// of each privileged sequence; shared features start from biases only.
struct InitConfig {
  double read_bigram = 3.0;
  double read_unigram = 0.0;
  double probe_bias = 0.0;  // shared bias on probe tokens, every position
  double end_bias = 0.0;    // shared bias on END at positions >= 1
  double step_prior = 0.0;  // shared bias on every transition seen in some derivation
  double opd_strength = 3.0;  // external OPD teacher: prompt -> gold -> END
};

struct TrainerConfig {
  int schema_version = kConfigSchemaVersion;
  Method method = Method::rlsd;
  int group_size = 8;
  int steps = 200;
  double learning_rate = 1.0;
  double lambda0 = 0.5;
  int lambda_horizon = 50;
  std::optional<double> lambda_override;
  double eps_w = 0.2;
  double eps_low = 0.2;
  double eps_high = 0.28;
  RlsdForm rlsd_form = RlsdForm::algorithm1;
  TeacherStrategy teacher = TeacherStrategy::periodic;
  int teacher_period = 10;
  std::uint64_t seed = 1;
  SuiteConfig suite;
  std::string suite_path;  // overrides `suite` when set
  int eval_every = 5;
  double combo_mix = 0.5;
  OpsdVariant opsd_variant = OpsdVariant::full;
  Divergence opsd_divergence = Divergence::forward_kl;
  int updates_per_batch = 1;
  int k = 2;
  int buckets = 8;
  double metric_min_mass = 0.0;  // expansion pruning for per-step metrics; 0 = exact
  InitConfig init;

  void validate() const {
    if (schema_version != kConfigSchemaVersion) throw std::invalid_argument("config: unsupported schema_version");
    if (group_size < 2) throw std::invalid_argument("config: group_size must be >= 2");
    if (steps < 0) throw std::invalid_argument("config: steps must be >= 0");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw std::invalid_argument("config: learning_rate must be finite and >= 0");
    if (!(lambda0 >= 0.0 && lambda0 <= 1.0)) throw std::invalid_argument("config: lambda0 outside [0,1]");
    if (lambda_horizon < 1) throw std::invalid_argument("config: lambda_horizon must be >= 1");
    if (lambda_override && !(*lambda_override >= 0.0 && *lambda_override <= 1.0))
      throw std::invalid_argument("config: lambda_override outside [0,1]");
    if (!(eps_w > 0.0 && eps_w < 1.0)) throw std::invalid_argument("config: eps_w outside (0,1)");
    if (!(eps_low > 0.0 && eps_low < 1.0) || !(eps_high > 0.0)) throw std::invalid_argument("config: bad ratio clip range");
    if (teacher_period < 1) throw std::invalid_argument("config: teacher period must be >= 1");
    if (eval_every < 1) throw std::invalid_argument("config: eval_every must be >= 1");
    if (!(combo_mix >= 0.0 && combo_mix <= 1.0)) throw std::invalid_argument("config: combo_mix outside [0,1]");
    if (updates_per_batch < 1) throw std::invalid_argument("config: updates_per_batch must be >= 1");
    if (!(metric_min_mass >= 0.0 && metric_min_mass < 1e-3))
      throw std::invalid_argument("config: metric_min_mass outside [0, 1e-3)");
    if (opsd_divergence == Divergence::reverse_kl && opsd_variant != OpsdVariant::full)
      throw std::invalid_argument("config: reverse_kl needs the full variant");
  }
};

inline double lambda_schedule(int step, double lambda0, int horizon) {
  if (horizon < 1) throw std::invalid_argument("lambda_schedule: horizon must be >= 1");
  return lambda0 * std::max(0.0, 1.0 - static_cast<double>(step) / static_cast<double>(horizon));
}

// Holds the frozen initial copy and the periodic snapshot.
class TeacherState {
 public:
  TeacherState() = default;
  TeacherState(TeacherStrategy s, int period, const PolicyParams& initial)
      : strategy_(s), period_(period), initial_(initial), snapshot_(initial) {}

  // Teacher for update index `step` (0-based).
  const PolicyParams& at(int step, const PolicyParams& current) {
    switch (strategy_) {
      case TeacherStrategy::frozen:
        return initial_;
      case TeacherStrategy::online:
        return current;
      case TeacherStrategy::periodic:
        if (step % period_ == 0) snapshot_ = current;
        return snapshot_;
    }
    return current;
  }

  // Applies f to every stored copy (used to place privileged context).
  template <class F>
  void for_each_copy(F&& f) {
    f(initial_);
    f(snapshot_);
  }

 private:
  TeacherStrategy strategy_ = TeacherStrategy::frozen;
  int period_ = 1;
  PolicyParams initial_;
  PolicyParams snapshot_;
};

inline const PolicyParams& teacher_snapshot(TeacherState& state, int step, const PolicyParams& current) {
  return state.at(step, current);
}

struct MetricRecord {
  int step = 0;
  std::uint64_t seed = 0;
  std::string lineage;
  double lambda = 0.0;
  double mean_reward = 0.0;
  double kl = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double leakage = 0.0;
  double sensitivity = 0.0;  // E_r KL(P_T(.|r) || marginal teacher), on-policy
  double gstar_norm = 0.0;
  double delta_norm = 0.0;
  double delta_s = 0.0;
  double delta_t = 0.0;
  double rho = 0.0;
  double grad_norm = 0.0;
  std::optional<double> train_accuracy;
  std::optional<double> heldout_accuracy;
  bool aborted = false;
};

struct RunLog {
  nlohmann::json config;
  std::vector<MetricRecord> records;
  PolicyParams final_params;
  bool aborted = false;
  std::string abort_reason;
};

struct TrainAbort : std::runtime_error {
  MetricRecord record;
  TrainAbort(const std::string& what, MetricRecord r) : std::runtime_error(what), record(std::move(r)) {}
};

// ---------------------------------------------------------------------------
// Config <-> JSON

inline const char* to_string(Method m) {
  switch (m) {
    case Method::grpo: return "grpo";
    case Method::opsd: return "opsd";
    case Method::opd: return "opd";
    case Method::sdpo: return "sdpo";
    case Method::combo: return "combo";
    case Method::rlsd: return "rlsd";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::grpo, Method::opsd, Method::opd, Method::sdpo, Method::combo, Method::rlsd})
    if (s == to_string(m)) return m;
  throw std::invalid_argument("config: unknown method '" + s + "'");
}

inline nlohmann::json to_json(const TrainerConfig& c) {
  using nlohmann::json;
  json j;
  j["schema_version"] = c.schema_version;
  j["method"] = to_string(c.method);
  j["group_size"] = c.group_size;
  j["steps"] = c.steps;
  j["learning_rate"] = c.learning_rate;
  j["lambda0"] = c.lambda0;
  j["lambda_horizon"] = c.lambda_horizon;
  j["lambda_override"] = c.lambda_override ? json(*c.lambda_override) : json(nullptr);
  j["eps_w"] = c.eps_w;
  j["eps_low"] = c.eps_low;
  j["eps_high"] = c.eps_high;
  j["rlsd_form"] = c.rlsd_form == RlsdForm::algorithm1 ? "algorithm1"
                   : c.rlsd_form == RlsdForm::clip_only ? "clip_only"
                                                         : "min_clip";
  j["teacher"] = {{"strategy", c.teacher == TeacherStrategy::frozen   ? "frozen"
                               : c.teacher == TeacherStrategy::online ? "online"
                                                                      : "periodic"},
                  {"period", c.teacher_period}};
  j["seed"] = c.seed;
  j["suite"] = {{"family", c.suite.family},
                {"count", c.suite.count},
                {"seed", c.suite.seed},
                {"vocab", c.suite.vocab},
                {"modulus", c.suite.modulus},
                {"n_probes", c.suite.n_probes},
                {"max_len", c.suite.max_len},
                {"privileged_per_instance", c.suite.privileged_per_instance},
                {"cited_weight", c.suite.cited_weight}};
  if (!c.suite_path.empty()) j["suite_path"] = c.suite_path;
  j["eval_every"] = c.eval_every;
  j["combo_mix"] = c.combo_mix;
  j["opsd_variant"] = c.opsd_variant == OpsdVariant::full           ? "full"
                      : c.opsd_variant == OpsdVariant::teacher_top1 ? "teacher_top1"
                                                                    : "student_top1";
  j["opsd_divergence"] = c.opsd_divergence == Divergence::forward_kl ? "forward_kl" : "reverse_kl";
  j["updates_per_batch"] = c.updates_per_batch;
  j["policy"] = {{"k", c.k}, {"buckets", c.buckets}};
  j["metric_min_mass"] = c.metric_min_mass;
  j["init"] = {{"read_bigram", c.init.read_bigram},
               {"read_unigram", c.init.read_unigram},
               {"probe_bias", c.init.probe_bias},
               {"end_bias", c.init.end_bias},
               {"step_prior", c.init.step_prior},
               {"opd_strength", c.init.opd_strength}};
  return j;
}

namespace detail {

template <class T>
void read_key(const nlohmann::json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config: bad value for '" + where + key + "': " + e.what());
  }
}

inline void reject_unknown(const nlohmann::json& obj, std::initializer_list<const char*> known, const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw std::invalid_argument("config: unknown key '" + where + it.key() + "'");
  }
}

}  // namespace detail

inline TrainerConfig config_from_json(const nlohmann::json& j) {
  using detail::read_key;
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  if (!j.contains("schema_version")) throw std::invalid_argument("config: missing schema_version");
  detail::reject_unknown(j,
                         {"schema_version", "method", "group_size", "steps", "learning_rate", "lambda0",
                          "lambda_horizon", "lambda_override", "eps_w", "eps_low", "eps_high", "rlsd_form",
                          "teacher", "seed", "suite", "suite_path", "eval_every", "combo_mix", "opsd_variant",
                          "opsd_divergence", "updates_per_batch", "policy", "metric_min_mass", "init"},
                         "");
  TrainerConfig c;
  read_key(j, "schema_version", c.schema_version, "");
  std::string s;
  if (j.contains("method")) {
    read_key(j, "method", s, "");
    c.method = parse_method(s);
  }
  read_key(j, "group_size", c.group_size, "");
  read_key(j, "steps", c.steps, "");
  read_key(j, "learning_rate", c.learning_rate, "");
  read_key(j, "lambda0", c.lambda0, "");
  read_key(j, "lambda_horizon", c.lambda_horizon, "");
  if (j.contains("lambda_override") && !j["lambda_override"].is_null()) {
    double v = 0.0;
    read_key(j, "lambda_override", v, "");
    c.lambda_override = v;
  }
  read_key(j, "eps_w", c.eps_w, "");
  read_key(j, "eps_low", c.eps_low, "");
  read_key(j, "eps_high", c.eps_high, "");
  if (j.contains("rlsd_form")) {
    read_key(j, "rlsd_form", s, "");
    if (s == "algorithm1") c.rlsd_form = RlsdForm::algorithm1;
    else if (s == "clip_only") c.rlsd_form = RlsdForm::clip_only;
    else if (s == "min_clip") c.rlsd_form = RlsdForm::min_clip;
    else throw std::invalid_argument("config: unknown rlsd_form '" + s + "'");
  }
  if (j.contains("teacher")) {
    const auto& t = j["teacher"];
    detail::reject_unknown(t, {"strategy", "period"}, "teacher.");
    read_key(t, "strategy", s, "teacher.");
    if (s == "frozen") c.teacher = TeacherStrategy::frozen;
    else if (s == "online") c.teacher = TeacherStrategy::online;
    else if (s == "periodic") c.teacher = TeacherStrategy::periodic;
    else throw std::invalid_argument("config: unknown teacher.strategy '" + s + "'");
    read_key(t, "period", c.teacher_period, "teacher.");
  }
  read_key(j, "seed", c.seed, "");
  if (j.contains("suite")) {
    const auto& su = j["suite"];
    detail::reject_unknown(su, {"family", "count", "seed", "vocab", "modulus", "n_probes", "max_len", "privileged_per_instance", "cited_weight"}, "suite.");
    read_key(su, "family", c.suite.family, "suite.");
    read_key(su, "count", c.suite.count, "suite.");
    read_key(su, "seed", c.suite.seed, "suite.");
    read_key(su, "vocab", c.suite.vocab, "suite.");
    read_key(su, "modulus", c.suite.modulus, "suite.");
    read_key(su, "n_probes", c.suite.n_probes, "suite.");
    read_key(su, "max_len", c.suite.max_len, "suite.");
    read_key(su, "privileged_per_instance", c.suite.privileged_per_instance, "suite.");
    read_key(su, "cited_weight", c.suite.cited_weight, "suite.");
  }
  read_key(j, "suite_path", c.suite_path, "");
  read_key(j, "eval_every", c.eval_every, "");
  read_key(j, "combo_mix", c.combo_mix, "");
  if (j.contains("opsd_variant")) {
    read_key(j, "opsd_variant", s, "");
    if (s == "full") c.opsd_variant = OpsdVariant::full;
    else if (s == "teacher_top1") c.opsd_variant = OpsdVariant::teacher_top1;
    else if (s == "student_top1") c.opsd_variant = OpsdVariant::student_top1;
    else throw std::invalid_argument("config: unknown opsd_variant '" + s + "'");
  }
  if (j.contains("opsd_divergence")) {
    read_key(j, "opsd_divergence", s, "");
    if (s == "forward_kl") c.opsd_divergence = Divergence::forward_kl;
    else if (s == "reverse_kl") c.opsd_divergence = Divergence::reverse_kl;
    else throw std::invalid_argument("config: unknown opsd_divergence '" + s + "'");
  }
  read_key(j, "updates_per_batch", c.updates_per_batch, "");
  read_key(j, "metric_min_mass", c.metric_min_mass, "");
  if (j.contains("policy")) {
    detail::reject_unknown(j["policy"], {"k", "buckets"}, "policy.");
    read_key(j["policy"], "k", c.k, "policy.");
    read_key(j["policy"], "buckets", c.buckets, "policy.");
  }
  if (j.contains("init")) {
    const auto& in = j["init"];
    detail::reject_unknown(in, {"read_bigram", "read_unigram", "probe_bias", "end_bias", "step_prior", "opd_strength"}, "init.");
    read_key(in, "read_bigram", c.init.read_bigram, "init.");
    read_key(in, "read_unigram", c.init.read_unigram, "init.");
    read_key(in, "probe_bias", c.init.probe_bias, "init.");
    read_key(in, "end_bias", c.init.end_bias, "init.");
    read_key(in, "step_prior", c.init.step_prior, "init.");
    read_key(in, "opd_strength", c.init.opd_strength, "init.");
  }
  c.validate();
  return c;
}

// Parse errors from the JSON reader carry line and column.
inline TrainerConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::ios_base::failure("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Exact diagnostics

struct StateMetrics {
  double kl = 0.0;
  double entropy = 0.0;
  double leakage = 0.0;
  double sensitivity = 0.0;
};

namespace detail {

// softmax into caller buffers; returns nothing, fills prob and logp.
inline void softmax_into(const double* s, std::size_t V, double* prob, double* logp) {
  double m = s[0];
  for (std::size_t v = 1; v < V; ++v) m = std::max(m, s[v]);
  double z = 0.0;
  for (std::size_t v = 0; v < V; ++v) z += (prob[v] = std::exp(s[v] - m));
  const double lse = m + std::log(z);
  for (std::size_t v = 0; v < V; ++v) {
    logp[v] = s[v] - lse;
    prob[v] /= z;
  }
}

// Teacher row at a student state. Featurized teacher logits are the teacher's
// student-mode log-probabilities (`base`) plus the two r-keyed blocks.
inline void teacher_row(const PolicyParams& teacher, const ExpandedState& st, const TokenDistribution& base, int r,
                        std::vector<double>& logits, double* prob, double* logp) {
  const std::size_t V = teacher.shape().V();
  if (teacher.backend() == Backend::featurized) {
    const auto& w = teacher.weights();
    const std::size_t i1 = teacher.r1_index(r, 0), i2 = teacher.r2_index(r, st.ctx.last(), 0);
    for (std::size_t v = 0; v < V; ++v) logits[v] = base.logp[v] + w[i1 + v] + w[i2 + v];
    softmax_into(logits.data(), V, prob, logp);
    return;
  }
  ContextKey tctx = st.ctx;
  tctx.privileged = r;
  auto d = teacher_dist(teacher, tctx);
  std::copy(d.prob.begin(), d.prob.end(), prob);
  std::copy(d.logp.begin(), d.logp.end(), logp);
}

}  // namespace detail

// Per-token averages over the student's exact state distribution. `kl`
// compares the teacher against the student: `teacher` in teacher mode under
// the instance prior, or in student mode when `symmetric`.
inline StateMetrics state_metrics(const PolicyParams& student, const PolicyParams& teacher, bool symmetric,
                                  const std::vector<Instance>& instances, double min_mass = 0.0) {
  StateMetrics out;
  if (instances.empty()) return out;
  const std::size_t V = student.shape().V();
  std::vector<double> logits(V), bar(V), barlog(V);
  std::vector<double> prob, logp;
  for (const auto& inst : instances) {
    auto ex = expand_student(student, inst, inst.max_len, min_mass);
    const std::size_t R = inst.privileged.size();
    prob.resize(R * V);
    logp.resize(R * V);
    double mass = 0.0, kl = 0.0, ent = 0.0, leak = 0.0, sens = 0.0;
    for (const auto& st : ex.states) {
      mass += st.mass;
      for (std::size_t v = 0; v < V; ++v)
        if (st.dist.prob[v] > 0.0) ent -= st.mass * st.dist.prob[v] * st.dist.logp[v];
      for (int p : inst.probes) leak += st.mass * st.dist.prob[static_cast<std::size_t>(p)];
      if (symmetric) {
        kl += st.mass * detail::kl(student_dist(teacher, st.ctx), st.dist);
        continue;
      }
      std::fill(bar.begin(), bar.end(), 0.0);
      TokenDistribution tbase;
      const bool featurized = teacher.backend() == Backend::featurized;
      if (featurized && &teacher != &student) tbase = student_dist(teacher, st.ctx);
      const TokenDistribution& base = featurized && &teacher == &student ? st.dist : tbase;
      for (std::size_t j = 0; j < R; ++j) {
        detail::teacher_row(teacher, st, base, inst.privileged[j].id, logits, &prob[j * V], &logp[j * V]);
        for (std::size_t v = 0; v < V; ++v) bar[v] += inst.privileged[j].weight * prob[j * V + v];
      }
      for (std::size_t v = 0; v < V; ++v) barlog[v] = std::log(bar[v]);
      for (std::size_t j = 0; j < R; ++j) {
        double k_s = 0.0, k_bar = 0.0;
        for (std::size_t v = 0; v < V; ++v) {
          double p = prob[j * V + v];
          if (p <= 0.0) continue;
          k_s += p * (logp[j * V + v] - st.dist.logp[v]);
          k_bar += p * (logp[j * V + v] - barlog[v]);
        }
        kl += st.mass * inst.privileged[j].weight * k_s;
        sens += st.mass * inst.privileged[j].weight * k_bar;
      }
    }
    out.kl += kl / mass;
    out.entropy += ent / mass;
    out.leakage += inst.probes.empty() ? 0.0 : leak / mass;
    out.sensitivity += sens / mass;
  }
  double n = static_cast<double>(instances.size());
  out.kl /= n;
  out.entropy /= n;
  out.leakage /= n;
  out.sensitivity /= n;
  return out;
}

struct Batch {
  std::vector<const Instance*> instances;
  std::vector<GroupBatch> groups;
};

// E_r KL(P_T^teacher(.|r) || P_S^student) averaged per token over the batch
// contexts, with r weighted by each instance's prior.
inline double batch_distill_loss(const PolicyParams& teacher, const PolicyParams& student, const Batch& batch) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t g = 0; g < batch.groups.size(); ++g) {
    const auto& inst = *batch.instances[g];
    for (const auto& ro : batch.groups[g].rollouts) {
      auto ctxs = rollout_contexts(student.shape(), inst, ro);
      double per = 0.0;
      for (const auto& ctx : ctxs) {
        auto ps = student_dist(student, ctx);
        for (const auto& r : inst.privileged) {
          ContextKey tctx = ctx;
          tctx.privileged = r.id;
          per += r.weight * detail::kl(teacher_dist(teacher, tctx), ps);
        }
      }
      total += per / static_cast<double>(ctxs.size());
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

struct DecompositionStats {
  double gstar_norm = 0.0;
  double delta_norm = 0.0;  // sqrt(E_r ||delta||^2), averaged over rollouts
  double rho = 0.0;         // E ||delta||^2 / E ||g||^2
};

// Per rollout, g(r) = 1/|y| sum_t sum_v P_T(v|r) dlog P_S(v) for every r of
// the instance; g* is its prior mean and delta(r) = g(r) - g*.
inline DecompositionStats decomposition_stats(const PolicyParams& params, const PolicyParams& teacher,
                                              const Batch& batch) {
  DecompositionStats out;
  const std::size_t V = params.shape().V();
  std::vector<double> gstar_total(params.dim(), 0.0);
  double e_delta = 0.0, e_g = 0.0;
  std::size_t n = 0;
  std::vector<std::size_t> blk, blocks;
  std::vector<double> acc;  // [r + 1][block][v]; slot 0 holds the prior mean
  for (std::size_t gi = 0; gi < batch.groups.size(); ++gi) {
    const auto& inst = *batch.instances[gi];
    const std::size_t R = inst.privileged.size();
    for (const auto& ro : batch.groups[gi].rollouts) {
      auto ctxs = rollout_contexts(params.shape(), inst, ro);
      const double L = static_cast<double>(ctxs.size());
      blocks.clear();
      for (const auto& ctx : ctxs) {
        params.blocks(ctx, blk);
        for (std::size_t b : blk)
          if (std::find(blocks.begin(), blocks.end(), b) == blocks.end()) blocks.push_back(b);
      }
      const std::size_t stride = blocks.size() * V;
      acc.assign((R + 1) * stride, 0.0);
      for (const auto& ctx : ctxs) {
        auto ps = student_dist(params, ctx);
        params.blocks(ctx, blk);
        std::vector<std::size_t> slots;
        for (std::size_t b : blk)
          slots.push_back(static_cast<std::size_t>(std::find(blocks.begin(), blocks.end(), b) - blocks.begin()));
        for (std::size_t j = 0; j < R; ++j) {
          ContextKey tctx = ctx;
          tctx.privileged = inst.privileged[j].id;
          auto pt = teacher_dist(teacher, tctx);
          const double w = inst.privileged[j].weight;
          for (std::size_t sl : slots)
            for (std::size_t v = 0; v < V; ++v) {
              double d = (pt.prob[v] - ps.prob[v]) / L;
              acc[(j + 1) * stride + sl * V + v] += d;
              acc[sl * V + v] += w * d;
            }
        }
      }
      for (std::size_t j = 0; j < R; ++j) {
        double g2 = 0.0, d2 = 0.0;
        for (std::size_t i = 0; i < stride; ++i) {
          double g = acc[(j + 1) * stride + i];
          g2 += g * g;
          d2 += (g - acc[i]) * (g - acc[i]);
        }
        e_g += inst.privileged[j].weight * g2;
        e_delta += inst.privileged[j].weight * d2;
      }
      for (std::size_t sl = 0; sl < blocks.size(); ++sl)
        for (std::size_t v = 0; v < V; ++v) gstar_total[blocks[sl] + v] += acc[sl * V + v];
      ++n;
    }
  }
  if (n == 0) return out;
  out.gstar_norm = norm(gstar_total) / static_cast<double>(n);
  out.delta_norm = std::sqrt(e_delta / static_cast<double>(n));
  out.rho = e_g > 0.0 ? e_delta / e_g : 0.0;
  return out;
}

// ---------------------------------------------------------------------------

// Base model for a suite. The SDPO slots (one per instance, after the suite's
// own privileged ids) start empty.
inline PolicyParams init_params(const TrainerConfig& cfg, const std::vector<Instance>& suite) {
  PolicyShape shape;
  shape.vocab = {cfg.suite.vocab, cfg.suite.vocab - 1};
  shape.k = cfg.k;
  shape.buckets = cfg.buckets;
  shape.n_privileged = privileged_count(suite) + static_cast<int>(suite.size());
  PolicyParams p(shape);
  for (const auto& inst : suite) {
    int last = inst.prompt.empty() ? shape.vocab.bos() : inst.prompt.back();
    for (const auto& r : inst.privileged)
      encode_privileged(p, r.id, last, r.tokens, cfg.init.read_bigram, cfg.init.read_unigram);
  }
  std::vector<int> probes;
  for (const auto& inst : suite)
    for (int q : inst.probes)
      if (std::find(probes.begin(), probes.end(), q) == probes.end()) probes.push_back(q);
  // Knowing which steps are plausible, not which one the reference takes.
  std::set<std::size_t> seen;
  for (const auto& inst : suite)
    for (const auto& r : inst.privileged) {
      ContextKey ctx = make_context(shape, inst, kAbsent, {});
      std::vector<int> seq = r.tokens;
      seq.push_back(shape.vocab.end);
      for (int tok : seq) {
        seen.insert(p.window_index(ctx.window, tok));
        ctx = advance(ctx, tok);
      }
    }
  for (std::size_t i : seen) p.weights()[i] += cfg.init.step_prior;
  for (int b = 0; b < shape.buckets; ++b) {
    for (int q : probes) p.weights()[p.position_index(b, q)] += cfg.init.probe_bias;
    if (b > 0) p.weights()[p.position_index(b, shape.vocab.end)] += cfg.init.end_bias;
  }
  return p;
}

// Information-symmetric teacher: student-mode features that map each prompt
// window to its gold answer and the answer to END.
inline PolicyParams make_opd_teacher(const PolicyParams& base, const std::vector<Instance>& suite, double strength) {
  PolicyParams t = base;
  const auto& shape = t.shape();
  for (const auto& inst : suite) {
    ContextKey c0 = make_context(shape, inst, kAbsent, {});
    t.weights()[t.window_index(c0.window, inst.gold)] += strength;
    ContextKey c1 = advance(c0, inst.gold);
    t.weights()[t.window_index(c1.window, shape.vocab.end)] += strength;
  }
  return t;
}

inline std::vector<Instance> load_suite(const TrainerConfig& cfg) {
  if (cfg.suite_path.empty()) return make_suite(cfg.suite);
  std::ifstream in(cfg.suite_path);
  if (!in) throw std::ios_base::failure("cannot open suite '" + cfg.suite_path + "'");
  return read_suite(in, Vocab{cfg.suite.vocab, cfg.suite.vocab - 1});
}

class Trainer {
 public:
  Trainer(TrainerConfig cfg, std::vector<Instance> suite) : cfg_(std::move(cfg)), suite_(std::move(suite)) {
    cfg_.validate();
    for (const auto& inst : suite_) validate_instance(inst, Vocab{cfg_.suite.vocab, cfg_.suite.vocab - 1});
    auto [train, heldout] = split_suite(suite_);
    train_ = std::move(train);
    heldout_ = std::move(heldout);
    params_ = init_params(cfg_, suite_);
    sdpo_base_ = privileged_count(suite_);
    for (std::size_t i = 0; i < suite_.size(); ++i) slot_of_[suite_[i].id] = sdpo_base_ + static_cast<int>(i);
    teacher_ = TeacherState(cfg_.teacher, cfg_.teacher_period, params_);
    if (cfg_.method == Method::opd) opd_teacher_ = make_opd_teacher(params_, suite_, cfg_.init.opd_strength);
  }

  const TrainerConfig& config() const { return cfg_; }
  const PolicyParams& params() const { return params_; }
  PolicyParams& mutable_params() { return params_; }
  const std::vector<Instance>& train_split() const { return train_; }
  const std::vector<Instance>& heldout_split() const { return heldout_; }
  const std::vector<CreditTrace>& last_credit() const { return credit_; }
  const Batch& last_batch() const { return batch_; }
  // Off: kl, entropy, leakage and sensitivity stay 0 in step records.
  void set_state_metrics(bool on) { state_metrics_on_ = on; }

  MetricRecord initial_record() const {
    MetricRecord rec;
    rec.step = 0;
    rec.seed = cfg_.seed;
    rec.lineage = lineage(0);
    fill_state_metrics(rec);
    rec.train_accuracy = expected_accuracy(params_, train_, cfg_.metric_min_mass);
    rec.heldout_accuracy = expected_accuracy(params_, heldout_, cfg_.metric_min_mass);
    return rec;
  }

  // One update; `step` is 1-based.
  MetricRecord train_step(int step) {
    const int idx = step - 1;
    MetricRecord rec;
    rec.step = step;
    rec.seed = cfg_.seed;
    rec.lineage = lineage(step);
    const double lambda = cfg_.lambda_override ? *cfg_.lambda_override
                                               : lambda_schedule(idx, cfg_.lambda0, cfg_.lambda_horizon);
    rec.lambda = lambda;
    if (!all_finite(params_.weights())) {
      rec.aborted = true;
      throw TrainAbort("non-finite parameters before step " + std::to_string(step), rec);
    }
    const PolicyParams& teacher = teacher_snapshot(teacher_, idx, params_);
    const PolicyParams teacher_k = teacher;  // teacher used during this step

    // Step 1-2: rollouts, rewards, group advantages.
    batch_ = Batch{};
    credit_.clear();
    double reward_sum = 0.0;
    std::size_t n_rollouts = 0;
    for (const auto& inst : train_) {
      std::vector<Rollout> rollouts;
      auto sdpo_ctx = cfg_.method == Method::sdpo ? sdpo_context(sdpo_, inst, params_.shape().vocab.end)
                                                  : std::nullopt;
      for (int g = 0; g < cfg_.group_size; ++g) {
        Rng rng = make_stream({cfg_.seed, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(inst.id),
                               static_cast<std::uint64_t>(g)});
        std::vector<double> prior;
        for (const auto& r : inst.privileged) prior.push_back(r.weight);
        int r_id = inst.privileged[static_cast<std::size_t>(sample_index(prior, rng))].id;
        if (sdpo_ctx) r_id = slot_of_.at(inst.id);
        Rollout ro = sample_rollout(params_, inst, kAbsent, SampleMode::student, rng, inst.max_len);
        ro.privileged = r_id;
        // Step 3: one teacher-mode pass over the sampled tokens.
        auto ctxs = rollout_contexts(params_.shape(), inst, ro, r_id);
        for (std::size_t t = 0; t < ro.tokens.size(); ++t)
          ro.teacher_lp[t] = teacher_dist(teacher_k, ctxs[t]).logp[static_cast<std::size_t>(ro.tokens[t])];
        ro.reward = verify(inst, ro.tokens, params_.shape().vocab.end).reward;
        reward_sum += ro.reward;
        ++n_rollouts;
        rollouts.push_back(std::move(ro));
      }
      batch_.instances.push_back(&inst);
      batch_.groups.push_back(make_group(inst.id, std::move(rollouts)));
    }
    rec.mean_reward = n_rollouts ? reward_sum / static_cast<double>(n_rollouts) : 0.0;

    auto decomp = decomposition_stats(params_, teacher_k, batch_);
    rec.gstar_norm = decomp.gstar_norm;
    rec.delta_norm = decomp.delta_norm;
    rec.rho = decomp.rho;
    const double loss_before = batch_distill_loss(teacher_k, params_, batch_);

    // Step 4: gradient ascent.
    const PolicyParams params_old = params_;
    sdpo_has_context_.clear();
    if (cfg_.method == Method::sdpo)
      for (const Instance* inst : batch_.instances)
        sdpo_has_context_.push_back(sdpo_context(sdpo_, *inst, params_.shape().vocab.end).has_value());
    double clip_sum = 0.0;
    std::size_t clip_n = 0;
    double grad_norm = 0.0;
    for (int u = 0; u < cfg_.updates_per_batch; ++u) {
      std::vector<double> grad(params_.dim(), 0.0);
      const double scale = 1.0 / static_cast<double>(std::max<std::size_t>(1, batch_.groups.size()));
      for (std::size_t gi = 0; gi < batch_.groups.size(); ++gi) {
        auto sg = method_grad(*batch_.instances[gi], batch_.groups[gi], params_old, teacher_k, lambda, u == 0);
        sg.grad.accumulate_into(grad, scale);
        if (uses_ratio_clip(gi)) {
          clip_sum += sg.clip_fraction;
          ++clip_n;
        }
      }
      if (!all_finite(grad)) {
        rec.aborted = true;
        throw TrainAbort("non-finite gradient at step " + std::to_string(step), rec);
      }
      if (u == 0) grad_norm = norm(grad);
      auto& w = params_.weights();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] += cfg_.learning_rate * grad[i];
      if (!all_finite(w)) {
        rec.aborted = true;
        throw TrainAbort("non-finite parameters after update at step " + std::to_string(step), rec);
      }
    }
    rec.grad_norm = grad_norm;
    rec.clip_fraction = clip_n ? clip_sum / static_cast<double>(clip_n) : 0.0;

    if (cfg_.method == Method::sdpo) update_sdpo_store();

    // Objective bookkeeping against the teacher of the next step.
    const double loss_student = batch_distill_loss(teacher_k, params_, batch_);
    TeacherState peek = teacher_;
    const PolicyParams& teacher_next = teacher_snapshot(peek, idx + 1, params_);
    const double loss_after = batch_distill_loss(teacher_next, params_, batch_);
    rec.delta_s = loss_student - loss_before;
    rec.delta_t = loss_after - loss_student;

    fill_state_metrics(rec);
    if (step % cfg_.eval_every == 0 || step == cfg_.steps) {
      rec.train_accuracy = expected_accuracy(params_, train_, cfg_.metric_min_mass);
      rec.heldout_accuracy = expected_accuracy(params_, heldout_, cfg_.metric_min_mass);
    }
    return rec;
  }

 private:
  std::string lineage(int step) const {
    return "seed=" + std::to_string(cfg_.seed) + "/step=" + std::to_string(step);
  }

  bool uses_ratio_clip(std::size_t gi) const {
    switch (cfg_.method) {
      case Method::grpo:
      case Method::rlsd:
      case Method::combo:
        return true;
      case Method::sdpo:
        return !sdpo_has_context_[gi];
      default:
        return false;
    }
  }

  void fill_state_metrics(MetricRecord& rec) const {
    if (!state_metrics_on_) return;
    const bool symmetric = cfg_.method == Method::opd;
    auto sm = state_metrics(params_, symmetric ? opd_teacher_ : params_, symmetric, train_, cfg_.metric_min_mass);
    rec.kl = sm.kl;
    rec.entropy = sm.entropy;
    rec.leakage = sm.leakage;
    rec.sensitivity = sm.sensitivity;
  }

  SurrogateGrad method_grad(const Instance& inst, const GroupBatch& group, const PolicyParams& params_old,
                            const PolicyParams& teacher, double lambda, bool first) {
    switch (cfg_.method) {
      case Method::grpo:
        return grpo_surrogate(params_, params_old, inst, group, uniform_token_advantages(group), cfg_.eps_low,
                              cfg_.eps_high);
      case Method::rlsd: {
        std::vector<std::vector<double>> adv;
        for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
          auto credit = token_credit(group.rollouts[i], group.advantages[i], cfg_.eps_w, lambda, cfg_.rlsd_form);
          std::vector<double> row;
          for (const auto& c : credit) row.push_back(c.adv);
          adv.push_back(std::move(row));
          if (first) credit_.push_back({static_cast<int>(credit_.size()), group.advantages[i], std::move(credit)});
        }
        return grpo_surrogate(params_, params_old, inst, group, adv, cfg_.eps_low, cfg_.eps_high);
      }
      case Method::opsd:
        return opsd_grad(params_, teacher, inst, group.rollouts, cfg_.opsd_variant, cfg_.opsd_divergence);
      case Method::opd:
        return opd_grad(params_, opd_teacher_, inst, group.rollouts);
      case Method::combo:
        return additive_combo_grad(params_, params_old, inst, group, teacher, cfg_.combo_mix, cfg_.eps_low,
                                   cfg_.eps_high);
      case Method::sdpo: {
        if (sdpo_context(sdpo_, inst, params_.shape().vocab.end).has_value()) return opsd_grad(params_, teacher, inst, group.rollouts);
        return grpo_surrogate(params_, params_old, inst, group, uniform_token_advantages(group), cfg_.eps_low,
                              cfg_.eps_high);
      }
    }
    throw std::logic_error("unknown method");
  }

  // Stores this step's most recent success per prompt and writes it into the
  // prompt's privileged slot for later steps.
  void update_sdpo_store() {
    const int end = params_.shape().vocab.end;
    for (std::size_t gi = 0; gi < batch_.groups.size(); ++gi) {
      const auto& inst = *batch_.instances[gi];
      const auto& ros = batch_.groups[gi].rollouts;
      for (auto it = ros.rbegin(); it != ros.rend(); ++it) {
        if (it->reward <= 0.0) continue;
        sdpo_.record(inst.id, it->tokens);
        auto ctx = *sdpo_context(sdpo_, inst, end);
        int slot = slot_of_.at(inst.id);
        int last = inst.prompt.empty() ? params_.shape().vocab.bos() : inst.prompt.back();
        auto place = [&](PolicyParams& p) {
          encode_privileged(p, slot, last, ctx, cfg_.init.read_bigram, cfg_.init.read_unigram);
        };
        place(params_);
        teacher_.for_each_copy(place);
        break;
      }
    }
  }

  TrainerConfig cfg_;
  std::vector<Instance> suite_, train_, heldout_;
  PolicyParams params_;
  PolicyParams opd_teacher_;
  TeacherState teacher_;
  SdpoStore sdpo_;
  int sdpo_base_ = 0;
  std::map<int, int> slot_of_;
  std::vector<bool> sdpo_has_context_;
  Batch batch_;
  std::vector<CreditTrace> credit_;
  bool state_metrics_on_ = true;
};

// Runs config.steps updates after the step-0 evaluation record. A non-finite
// gradient stops the run; the diagnostic record is kept and flagged.
inline RunLog run(const TrainerConfig& cfg, std::vector<Instance> suite) {
  RunLog log;
  log.config = to_json(cfg);
  Trainer tr(cfg, std::move(suite));
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
  return log;
}

inline RunLog run(const TrainerConfig& cfg) { return run(cfg, load_suite(cfg)); }

// ---------------------------------------------------------------------------
// RunLog persistence

inline nlohmann::json to_json(const MetricRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["seed"] = r.seed;
  j["lineage"] = r.lineage;
  j["lambda"] = r.lambda;
  j["mean_reward"] = r.mean_reward;
  j["kl"] = r.kl;
  j["entropy"] = r.entropy;
  j["clip_fraction"] = r.clip_fraction;
  j["leakage"] = r.leakage;
  j["sensitivity"] = r.sensitivity;
  j["gstar_norm"] = r.gstar_norm;
  j["delta_norm"] = r.delta_norm;
  j["delta_s"] = r.delta_s;
  j["delta_t"] = r.delta_t;
  j["rho"] = r.rho;
  j["grad_norm"] = r.grad_norm;
  if (r.train_accuracy) j["train_accuracy"] = *r.train_accuracy;
  if (r.heldout_accuracy) j["heldout_accuracy"] = *r.heldout_accuracy;
  if (r.aborted) j["aborted"] = true;
  return j;
}

inline MetricRecord record_from_json(const nlohmann::json& j) {
  MetricRecord r;
  r.step = j.at("step").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.lineage = j.at("lineage").get<std::string>();
  r.lambda = j.at("lambda").get<double>();
  r.mean_reward = j.at("mean_reward").get<double>();
  r.kl = j.at("kl").get<double>();
  r.entropy = j.at("entropy").get<double>();
  r.clip_fraction = j.at("clip_fraction").get<double>();
  r.leakage = j.at("leakage").get<double>();
  r.sensitivity = j.at("sensitivity").get<double>();
  r.gstar_norm = j.at("gstar_norm").get<double>();
  r.delta_norm = j.at("delta_norm").get<double>();
  r.delta_s = j.at("delta_s").get<double>();
  r.delta_t = j.at("delta_t").get<double>();
  r.rho = j.at("rho").get<double>();
  r.grad_norm = j.at("grad_norm").get<double>();
  if (j.contains("train_accuracy")) r.train_accuracy = j["train_accuracy"].get<double>();
  if (j.contains("heldout_accuracy")) r.heldout_accuracy = j["heldout_accuracy"].get<double>();
  r.aborted = j.value("aborted", false);
  return r;
}

inline void write_runlog(const std::vector<MetricRecord>& records, std::ostream& os) {
  for (const auto& r : records) os << to_json(r).dump() << '\n';
}

inline std::vector<MetricRecord> read_runlog(std::istream& is) {
  std::vector<MetricRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error("runlog line " + std::to_string(lineno) + ": " + e.what());
    }
    if (out.size() > 1 && out.back().step <= out[out.size() - 2].step)
      throw std::runtime_error("runlog line " + std::to_string(lineno) + ": step indices not increasing");
  }
  return out;
}

// Writes runlog.jsonl, config.json and checkpoint.txt under dir.
inline void persist(const RunLog& log, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::ios_base::failure("cannot create '" + dir.string() + "': " + ec.message());
  auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw std::ios_base::failure("cannot write '" + (dir / name).string() + "'");
    return f;
  };
  {
    auto f = open("runlog.jsonl");
    write_runlog(log.records, f);
  }
  {
    auto f = open("config.json");
    f << log.config.dump(2) << '\n';
  }
  {
    auto f = open("checkpoint.txt");
    save_checkpoint(log.final_params, f);
  }
}

}  // namespace rlsd
