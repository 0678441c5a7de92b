#pragma once

// Advantage and loss engines. Every SurrogateGrad holds the gradient of the
// objective being maximized; trainers step along it.

#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "rlsd_lab/core.hpp"
#include "rlsd_lab/env.hpp"
#include "rlsd_lab/policy.hpp"

namespace rlsd {

struct GroupBatch {
  int prompt = 0;
  std::vector<Rollout> rollouts;
  std::vector<double> rewards;
  std::vector<double> advantages;
  double mean = 0.0;
  double std = 0.0;
};

// (R_i - mean) / std with the population std; all zeros when std <= eps_std.
inline std::vector<double> group_advantages(std::span<const double> rewards, double eps_std = 1e-8) {
  if (rewards.size() < 2) throw std::invalid_argument("group_advantages: need at least 2 rewards");
  const double n = static_cast<double>(rewards.size());
  double mu = 0.0;
  for (double r : rewards) mu += r;
  mu /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mu) * (r - mu);
  double sd = std::sqrt(var / n);
  std::vector<double> adv(rewards.size(), 0.0);
  if (sd <= eps_std) return adv;
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mu) / sd;
  return adv;
}

inline GroupBatch make_group(int prompt, std::vector<Rollout> rollouts, double eps_std = 1e-8) {
  GroupBatch g;
  g.prompt = prompt;
  g.rollouts = std::move(rollouts);
  for (const auto& ro : g.rollouts) g.rewards.push_back(ro.reward);
  g.advantages = group_advantages(g.rewards, eps_std);
  double n = static_cast<double>(g.rewards.size());
  for (double r : g.rewards) g.mean += r / n;
  double var = 0.0;
  for (double r : g.rewards) var += (r - g.mean) * (r - g.mean);
  g.std = std::sqrt(var / n);
  return g;
}

// Delta_t = log P_T(y_t) - log P_S(y_t). Callers treat it as a constant.
inline double privileged_gain(double student_lp, double teacher_lp) {
  if (!std::isfinite(student_lp) || !std::isfinite(teacher_lp))
    throw std::domain_error("privileged_gain: non-finite log-probability");
  return teacher_lp - student_lp;
}

inline int sign_of(double a) { return (a > 0.0) - (a < 0.0); }

inline double evidence_weight(double delta, int adv_sign) {
  if (!std::isfinite(delta)) throw std::domain_error("evidence_weight: non-finite gain");
  if (adv_sign == 0) return 1.0;
  return std::exp(static_cast<double>(adv_sign > 0 ? 1 : -1) * delta);
}

enum class RlsdForm {
  algorithm1,  // A * ((1 - lambda) + lambda * clip(w))
  clip_only,   // A * clip(w)
  min_clip,    // min(w A, clip(w) A)
};

inline double clip_weight(double w, double eps_w) {
  return std::clamp(w, 1.0 - eps_w, 1.0 + eps_w);
}

inline double rlsd_token_advantage(double A, double w, double eps_w, double lambda,
                                   RlsdForm form = RlsdForm::algorithm1) {
  if (!(eps_w > 0.0 && eps_w < 1.0)) throw std::invalid_argument("rlsd_token_advantage: eps_w outside (0,1)");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("rlsd_token_advantage: lambda outside [0,1]");
  double c = clip_weight(w, eps_w);
  switch (form) {
    case RlsdForm::algorithm1:
      return A * ((1.0 - lambda) + lambda * c);
    case RlsdForm::clip_only:
      return A * c;
    case RlsdForm::min_clip:
      return std::min(w * A, c * A);
  }
  return A;
}

struct TokenCredit {
  int t = 0;
  int token = 0;
  double student_lp = 0.0;
  double teacher_lp = 0.0;
  double delta = 0.0;
  double w = 1.0;          // raw evidence weight
  double w_clipped = 1.0;  // after clipping to [1 - eps_w, 1 + eps_w]
  double adv = 0.0;        // token advantage
  bool clipped = false;    // clipping changed w
};

inline std::vector<TokenCredit> token_credit(const Rollout& ro, double A, double eps_w, double lambda,
                                             RlsdForm form = RlsdForm::algorithm1) {
  std::vector<TokenCredit> out;
  out.reserve(ro.tokens.size());
  for (std::size_t t = 0; t < ro.tokens.size(); ++t) {
    TokenCredit c;
    c.t = static_cast<int>(t);
    c.token = ro.tokens[t];
    c.student_lp = ro.student_lp[t];
    c.teacher_lp = ro.teacher_lp[t];
    c.delta = privileged_gain(c.student_lp, c.teacher_lp);
    c.w = evidence_weight(c.delta, sign_of(A));
    c.w_clipped = clip_weight(c.w, eps_w);
    c.clipped = c.w_clipped != c.w;
    c.adv = rlsd_token_advantage(A, c.w, eps_w, lambda, form);
    out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------

struct SurrogateGrad {
  SparseGrad grad;           // gradient of `objective`, compacted
  double objective = 0.0;
  double divergence = 0.0;   // token-mean teacher/student divergence (distillation only)
  double ratio_mean = 1.0;
  double clip_fraction = 0.0;
  std::size_t tokens = 0;
};

namespace detail {

// Adds scale * d log P(token)/dw, or scale * sum_v q(v) d log P(v)/dw when a
// target vector is given, for the blocks active at ctx.
inline void add_logprob_grad(const PolicyParams& params, const ContextKey& ctx,
                             const TokenDistribution& d, std::span<const double> q, double scale,
                             SparseGrad& out) {
  thread_local std::vector<std::size_t> blk;
  params.blocks(ctx, blk);
  const std::size_t V = params.shape().V();
  double qsum = 0.0;
  for (double x : q) qsum += x;
  for (std::size_t b : blk)
    for (std::size_t v = 0; v < V; ++v) out.add(b + v, scale * (q[v] - qsum * d.prob[v]));
}

inline std::vector<double> one_hot(std::size_t V, int token, double value = 1.0) {
  std::vector<double> q(V, 0.0);
  q[static_cast<std::size_t>(token)] = value;
  return q;
}

inline double kl(const TokenDistribution& p, const TokenDistribution& q) {
  double s = 0.0;
  for (std::size_t v = 0; v < p.prob.size(); ++v)
    if (p.prob[v] > 0.0) s += p.prob[v] * (p.logp[v] - q.logp[v]);
  return s;
}

}  // namespace detail

// Token-mean clipped surrogate over one group. token_adv[i][t] is the
// advantage of token t in rollout i (uniform A for GRPO).
inline SurrogateGrad grpo_surrogate(const PolicyParams& params, const PolicyParams& params_old,
                                    const Instance& inst, const GroupBatch& group,
                                    const std::vector<std::vector<double>>& token_adv, double eps_low,
                                    double eps_high) {
  if (group.rollouts.empty()) throw std::invalid_argument("grpo_surrogate: empty group");
  if (token_adv.size() != group.rollouts.size()) throw std::invalid_argument("grpo_surrogate: advantage rows differ from rollouts");
  const auto& shape = params.shape();
  const double G = static_cast<double>(group.rollouts.size());
  SurrogateGrad out;
  std::size_t clipped = 0;
  double ratio_sum = 0.0;
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    const auto& ro = group.rollouts[i];
    if (token_adv[i].size() != ro.tokens.size()) throw std::invalid_argument("grpo_surrogate: advantage length differs from rollout");
    const double L = static_cast<double>(ro.tokens.size());
    auto ctxs = rollout_contexts(shape, inst, ro);
    for (std::size_t t = 0; t < ro.tokens.size(); ++t) {
      const int y = ro.tokens[t];
      auto d = student_dist(params, ctxs[t]);
      double old_lp = student_dist(params_old, ctxs[t]).logp[static_cast<std::size_t>(y)];
      double ratio = std::exp(d.logp[static_cast<std::size_t>(y)] - old_lp);
      double A = token_adv[i][t];
      double plain = ratio * A;
      double clip = std::clamp(ratio, 1.0 - eps_low, 1.0 + eps_high) * A;
      bool clip_branch = clip < plain;
      out.objective += std::min(plain, clip) / (G * L);
      ratio_sum += ratio;
      ++out.tokens;
      if (clip_branch) {
        ++clipped;
        continue;
      }
      if (A == 0.0) continue;
      auto q = detail::one_hot(shape.V(), y);
      detail::add_logprob_grad(params, ctxs[t], d, q, A * ratio / (G * L), out.grad);
    }
  }
  out.grad.compact();
  out.ratio_mean = ratio_sum / static_cast<double>(out.tokens);
  out.clip_fraction = static_cast<double>(clipped) / static_cast<double>(out.tokens);
  return out;
}

inline std::vector<std::vector<double>> uniform_token_advantages(const GroupBatch& g) {
  std::vector<std::vector<double>> adv;
  for (std::size_t i = 0; i < g.rollouts.size(); ++i)
    adv.emplace_back(g.rollouts[i].tokens.size(), g.advantages[i]);
  return adv;
}

// ---------------------------------------------------------------------------
// Distillation. Each variant reduces to per-token target weights q_t(v),
// computed once with the teacher and student held fixed; the surrogate is
// mean_i 1/|y_i| sum_t sum_v q_t(v) log P_S(v | ctx_t).

enum class OpsdVariant { full, teacher_top1, student_top1 };
enum class Divergence { forward_kl, reverse_kl };

using TargetTable = std::vector<std::vector<std::vector<double>>>;  // [rollout][t][v]

// Teacher distribution at a rollout position: `teacher` in teacher mode with
// the rollout's privileged id, or in student mode when `symmetric` is set.
inline TokenDistribution teacher_at(const PolicyParams& teacher, const ContextKey& student_ctx,
                                    int privileged, bool symmetric) {
  if (symmetric) return student_dist(teacher, student_ctx);
  ContextKey tctx = student_ctx;
  tctx.privileged = privileged;
  return teacher_dist(teacher, tctx);
}

struct DistillTargets {
  TargetTable q;
  double divergence = 0.0;  // token-mean
};

inline DistillTargets distill_targets(const PolicyParams& params, const PolicyParams& teacher,
                                      const Instance& inst, const std::vector<Rollout>& rollouts,
                                      OpsdVariant variant, Divergence divergence, bool symmetric = false) {
  if (divergence == Divergence::reverse_kl && variant != OpsdVariant::full)
    throw std::invalid_argument("opsd: reverse_kl is defined only for the full variant");
  if (rollouts.empty()) throw std::invalid_argument("opsd: no rollouts");
  const auto& shape = params.shape();
  const std::size_t V = shape.V();
  DistillTargets out;
  double n = static_cast<double>(rollouts.size());
  for (const auto& ro : rollouts) {
    if (!symmetric && ro.privileged == kAbsent) throw std::invalid_argument("opsd: rollout has no privileged id");
    auto ctxs = rollout_contexts(shape, inst, ro);
    std::vector<std::vector<double>> rows;
    double L = static_cast<double>(ro.tokens.size());
    for (std::size_t t = 0; t < ro.tokens.size(); ++t) {
      auto ps = student_dist(params, ctxs[t]);
      auto pt = teacher_at(teacher, ctxs[t], ro.privileged, symmetric);
      const int y = ro.tokens[t];
      if (divergence == Divergence::reverse_kl) {
        double delta = pt.logp[static_cast<std::size_t>(y)] - ps.logp[static_cast<std::size_t>(y)];
        rows.push_back(detail::one_hot(V, y, delta));
        out.divergence += -delta / (n * L);
        continue;
      }
      out.divergence += detail::kl(pt, ps) / (n * L);
      switch (variant) {
        case OpsdVariant::full:
          rows.push_back(pt.prob);
          break;
        case OpsdVariant::teacher_top1:
          rows.push_back(detail::one_hot(V, pt.argmax()));
          break;
        case OpsdVariant::student_top1: {
          int vs = ps.argmax();
          auto s = static_cast<std::size_t>(vs);
          rows.push_back(detail::one_hot(V, vs, pt.prob[s] / ps.prob[s]));
          break;
        }
      }
    }
    out.q.push_back(std::move(rows));
  }
  return out;
}

// Value and gradient of mean_i 1/|y_i| sum_t sum_v q(v) log P_S(v).
inline SurrogateGrad weighted_loglik(const PolicyParams& params, const Instance& inst,
                                     const std::vector<Rollout>& rollouts, const TargetTable& q) {
  const auto& shape = params.shape();
  SurrogateGrad out;
  double n = static_cast<double>(rollouts.size());
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    const auto& ro = rollouts[i];
    auto ctxs = rollout_contexts(shape, inst, ro);
    double L = static_cast<double>(ro.tokens.size());
    for (std::size_t t = 0; t < ro.tokens.size(); ++t) {
      auto ps = student_dist(params, ctxs[t]);
      const auto& qt = q[i][t];
      for (std::size_t v = 0; v < qt.size(); ++v)
        if (qt[v] != 0.0) out.objective += qt[v] * ps.logp[v] / (n * L);
      detail::add_logprob_grad(params, ctxs[t], ps, qt, 1.0 / (n * L), out.grad);
      ++out.tokens;
    }
  }
  out.grad.compact();
  return out;
}

// Gradient flows only through the student: `teacher` is a separate snapshot.
// For the full forward-KL variant the objective is -KL(P_T || P_S).
inline SurrogateGrad opsd_grad(const PolicyParams& params, const PolicyParams& teacher, const Instance& inst,
                               const std::vector<Rollout>& rollouts, OpsdVariant variant = OpsdVariant::full,
                               Divergence divergence = Divergence::forward_kl) {
  auto targets = distill_targets(params, teacher, inst, rollouts, variant, divergence);
  auto out = weighted_loglik(params, inst, rollouts, targets.q);
  out.divergence = targets.divergence;
  if (variant == OpsdVariant::full && divergence == Divergence::forward_kl) out.objective = -targets.divergence;
  return out;
}

// Information-symmetric distillation from a separate frozen policy.
inline SurrogateGrad opd_grad(const PolicyParams& params, const PolicyParams& external_teacher,
                              const Instance& inst, const std::vector<Rollout>& rollouts) {
  auto targets = distill_targets(params, external_teacher, inst, rollouts, OpsdVariant::full,
                                 Divergence::forward_kl, /*symmetric=*/true);
  auto out = weighted_loglik(params, inst, rollouts, targets.q);
  out.divergence = targets.divergence;
  out.objective = -targets.divergence;
  return out;
}

inline SurrogateGrad combine(const SurrogateGrad& a, double wa, const SurrogateGrad& b, double wb) {
  SurrogateGrad out;
  out.grad.add_scaled(a.grad, wa);
  out.grad.add_scaled(b.grad, wb);
  out.grad.compact();
  out.objective = wa * a.objective + wb * b.objective;
  out.divergence = b.divergence;
  out.ratio_mean = a.ratio_mean;
  out.clip_fraction = a.clip_fraction;
  out.tokens = a.tokens;
  return out;
}

// (1 - mix) * GRPO + mix * OPSD(full, forward KL).
inline SurrogateGrad additive_combo_grad(const PolicyParams& params, const PolicyParams& params_old,
                                         const Instance& inst, const GroupBatch& group,
                                         const PolicyParams& teacher, double mix, double eps_low,
                                         double eps_high) {
  if (!(mix >= 0.0 && mix <= 1.0)) throw std::invalid_argument("additive_combo_grad: mix outside [0,1]");
  auto g = grpo_surrogate(params, params_old, inst, group, uniform_token_advantages(group), eps_low, eps_high);
  auto d = opsd_grad(params, teacher, inst, group.rollouts);
  return combine(g, 1.0 - mix, d, mix);
}

// ---------------------------------------------------------------------------
// Successful rollouts kept as privileged context, most recent per prompt.

class SdpoStore {
 public:
  void record(int prompt, const std::vector<int>& tokens) { latest_[prompt] = tokens; }
  std::optional<std::vector<int>> lookup(int prompt) const {
    auto it = latest_.find(prompt);
    if (it == latest_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t size() const { return latest_.size(); }

 private:
  std::map<int, std::vector<int>> latest_;
};

// The stored success without its END token, or nullopt (caller falls back
// to GRPO for this prompt).
inline std::optional<std::vector<int>> sdpo_context(const SdpoStore& store, const Instance& inst, int end_token) {
  auto y = store.lookup(inst.id);
  if (!y) return std::nullopt;
  if (!y->empty() && y->back() == end_token) y->pop_back();
  return y;
}

// ---------------------------------------------------------------------------

struct CreditTrace {
  int rollout = 0;
  double advantage = 0.0;
  std::vector<TokenCredit> tokens;
};

inline void write_credit_csv(const std::vector<CreditTrace>& traces, std::ostream& os) {
  os << "rollout_id,t,token,student_lp,teacher_lp,delta,w,adv,clipped\n";
  char buf[256];
  for (const auto& tr : traces)
    for (const auto& c : tr.tokens) {
      std::snprintf(buf, sizeof buf, "%d,%d,%d,%.12g,%.12g,%.12g,%.12g,%.12g,%d\n", tr.rollout, c.t, c.token,
                    c.student_lp, c.teacher_lp, c.delta, c.w, c.adv, c.clipped ? 1 : 0);
      os << buf;
    }
}

}  // namespace rlsd
