#pragma once

// Numerical verification of the decomposition, Bayesian and leakage
// identities by exact enumeration over small distributions.

#include <cmath>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "rlsd_lab/advantage.hpp"
#include "rlsd_lab/env.hpp"
#include "rlsd_lab/policy.hpp"
#include "rlsd_lab/trainer.hpp"

namespace rlsd {

using Matrix = std::vector<std::vector<double>>;

namespace detail {

inline void require_distribution(std::span<const double> p, const char* what) {
  double s = 0.0;
  for (double x : p) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw std::invalid_argument(std::string(what) + ": negative or non-finite entry");
    s += x;
  }
  if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument(std::string(what) + ": does not sum to 1");
}

// KL(p || q) in nats; +inf when q misses support of p.
inline double kl_rows(std::span<const double> p, std::span<const double> q) {
  double s = 0.0;
  for (std::size_t v = 0; v < p.size(); ++v) {
    if (p[v] == 0.0) continue;
    if (q[v] == 0.0) return std::numeric_limits<double>::infinity();
    s += p[v] * std::log(p[v] / q[v]);
  }
  return s;
}

inline std::vector<double> mixture(const Matrix& rows, std::span<const double> prior) {
  std::vector<double> bar(rows.front().size(), 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t v = 0; v < bar.size(); ++v) bar[v] += prior[r] * rows[r][v];
  return bar;
}

}  // namespace detail

// ---------------------------------------------------------------------------

struct DecompositionReport {
  double L_opsd = 0.0;
  double L_star = 0.0;
  double mutual_information = 0.0;
  double residual = 0.0;
};

// E_r KL(P_T(.|r) || P_S) against KL(marginal || P_S) and I(Y;R), each by
// its own summation.
inline DecompositionReport check_kl_decomposition(const Matrix& teacher_rows, std::span<const double> prior,
                                                  std::span<const double> student) {
  if (teacher_rows.empty() || teacher_rows.size() != prior.size())
    throw std::invalid_argument("check_kl_decomposition: teacher rows and prior differ in size");
  detail::require_distribution(prior, "prior");
  detail::require_distribution(student, "student row");
  for (const auto& row : teacher_rows) {
    if (row.size() != student.size()) throw std::invalid_argument("check_kl_decomposition: row width differs");
    detail::require_distribution(row, "teacher row");
  }
  auto bar = detail::mixture(teacher_rows, prior);
  DecompositionReport rep;
  for (std::size_t r = 0; r < teacher_rows.size(); ++r) {
    rep.L_opsd += prior[r] * detail::kl_rows(teacher_rows[r], student);
    rep.mutual_information += prior[r] * detail::kl_rows(teacher_rows[r], bar);
  }
  rep.L_star = detail::kl_rows(bar, student);
  if (!std::isfinite(rep.L_opsd)) throw std::invalid_argument("check_kl_decomposition: student misses teacher support");
  rep.residual = std::abs(rep.L_opsd - rep.L_star - rep.mutual_information);
  return rep;
}

// ---------------------------------------------------------------------------

struct GradDecompositionReport {
  std::vector<double> g_star;
  Matrix g;       // per-r gradient of KL(P_T(.|r) || P_S)
  Matrix delta;   // g[r] - g_star
  double reconstruction_error = 0.0;  // max_r ||g[r] - (g_star + delta[r])||_inf
  double mean_delta_norm = 0.0;       // ||E_r delta||
  double diagonal = 0.0;              // sum_v Var_r[P_T(v|r)] ||G_v||^2
  double measured = 0.0;              // E_r ||delta||^2
  bool orthogonal = false;
};

// G holds the per-token gradient vectors G_v = d log P_S(v) / d theta. The
// per-r loss gradient is g(r) = -sum_v P_T(v|r) G_v.
inline GradDecompositionReport check_gradient_decomposition(const Matrix& teacher_rows, std::span<const double> prior,
                                                            const Matrix& G, double orth_tol = 1e-12) {
  if (teacher_rows.empty() || teacher_rows.size() != prior.size())
    throw std::invalid_argument("check_gradient_decomposition: teacher rows and prior differ in size");
  detail::require_distribution(prior, "prior");
  const std::size_t V = G.size();
  const std::size_t D = G.empty() ? 0 : G.front().size();
  GradDecompositionReport rep;
  auto bar = detail::mixture(teacher_rows, prior);
  auto contract = [&](std::span<const double> w) {
    std::vector<double> out(D, 0.0);
    for (std::size_t v = 0; v < V; ++v)
      for (std::size_t d = 0; d < D; ++d) out[d] -= w[v] * G[v][d];
    return out;
  };
  rep.g_star = contract(bar);
  std::vector<double> mean_delta(D, 0.0);
  for (std::size_t r = 0; r < teacher_rows.size(); ++r) {
    rep.g.push_back(contract(teacher_rows[r]));
    std::vector<double> diff(V);
    for (std::size_t v = 0; v < V; ++v) diff[v] = teacher_rows[r][v] - bar[v];
    rep.delta.push_back(contract(diff));
    double sq = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      rep.reconstruction_error =
          std::max(rep.reconstruction_error, std::abs(rep.g[r][d] - rep.g_star[d] - rep.delta[r][d]));
      mean_delta[d] += prior[r] * rep.delta[r][d];
      sq += rep.delta[r][d] * rep.delta[r][d];
    }
    rep.measured += prior[r] * sq;
  }
  rep.mean_delta_norm = norm(mean_delta);
  rep.orthogonal = true;
  for (std::size_t v = 0; v < V; ++v) {
    double var = 0.0;
    for (std::size_t r = 0; r < teacher_rows.size(); ++r)
      var += prior[r] * (teacher_rows[r][v] - bar[v]) * (teacher_rows[r][v] - bar[v]);
    double g2 = 0.0;
    for (std::size_t d = 0; d < D; ++d) g2 += G[v][d] * G[v][d];
    rep.diagonal += var * g2;
    for (std::size_t u = v + 1; u < V; ++u) {
      double ip = 0.0;
      for (std::size_t d = 0; d < D; ++d) ip += G[v][d] * G[u][d];
      if (std::abs(ip) > orth_tol) rep.orthogonal = false;
    }
  }
  return rep;
}

// Same decomposition on a policy: G_v is the dense log-prob gradient at each
// student context, summed over the context family; teacher rows come from
// teacher mode with each listed r id.
inline GradDecompositionReport check_gradient_decomposition(const PolicyParams& params,
                                                            const std::vector<ContextKey>& contexts,
                                                            const std::vector<int>& r_ids,
                                                            std::span<const double> prior) {
  if (contexts.empty()) throw std::invalid_argument("check_gradient_decomposition: empty context family");
  GradDecompositionReport total;
  bool first = true;
  for (const auto& ctx : contexts) {
    const std::size_t V = params.shape().V();
    Matrix G(V);
    for (std::size_t v = 0; v < V; ++v) G[v] = logprob_grad(params, ctx, static_cast<int>(v)).to_dense(params.dim());
    Matrix rows;
    for (int r : r_ids) {
      ContextKey t = ctx;
      t.privileged = r;
      rows.push_back(teacher_dist(params, t).prob);
    }
    auto rep = check_gradient_decomposition(rows, prior, G);
    if (first) {
      total = std::move(rep);
      first = false;
      continue;
    }
    for (std::size_t d = 0; d < total.g_star.size(); ++d) total.g_star[d] += rep.g_star[d];
    for (std::size_t r = 0; r < total.g.size(); ++r)
      for (std::size_t d = 0; d < total.g_star.size(); ++d) {
        total.g[r][d] += rep.g[r][d];
        total.delta[r][d] += rep.delta[r][d];
      }
    total.diagonal += rep.diagonal;
    total.orthogonal = false;
  }
  if (contexts.size() > 1) {
    std::vector<double> mean_delta(total.g_star.size(), 0.0);
    total.measured = 0.0;
    total.reconstruction_error = 0.0;
    for (std::size_t r = 0; r < total.g.size(); ++r) {
      double sq = 0.0;
      for (std::size_t d = 0; d < total.g_star.size(); ++d) {
        total.reconstruction_error = std::max(
            total.reconstruction_error, std::abs(total.g[r][d] - total.g_star[d] - total.delta[r][d]));
        mean_delta[d] += prior[r] * total.delta[r][d];
        sq += total.delta[r][d] * total.delta[r][d];
      }
      total.measured += prior[r] * sq;
    }
    total.mean_delta_norm = norm(mean_delta);
  }
  return total;
}

// ---------------------------------------------------------------------------

struct BandwidthVariantResult {
  OpsdVariant variant = OpsdVariant::full;
  double max_fd_error = 0.0;  // ||analytic - central diff|| / max(1, ||central diff||), over r
  double min_r_spread = 0.0;      // min over r pairs of max over contexts of ||g(r) - g(r')||
  Matrix grads;                   // per-r analytic loss gradient at the last context checked
};

struct BandwidthReport {
  std::vector<BandwidthVariantResult> variants;
  double mutual_information = 0.0;
};

namespace detail {

// Per-variant loss at a student context with the targets held fixed.
inline double variant_loss(const PolicyParams& params, const ContextKey& ctx, std::span<const double> q) {
  auto ps = student_dist(params, ctx);
  double s = 0.0;
  for (std::size_t v = 0; v < q.size(); ++v)
    if (q[v] != 0.0) s -= q[v] * ps.logp[v];
  return s;
}

inline std::vector<double> variant_targets(const TokenDistribution& pt, const TokenDistribution& ps, OpsdVariant variant) {
  const std::size_t V = pt.prob.size();
  switch (variant) {
    case OpsdVariant::full:
      return pt.prob;
    case OpsdVariant::teacher_top1:
      return one_hot(V, pt.argmax());
    case OpsdVariant::student_top1: {
      int vs = ps.argmax();
      auto s = static_cast<std::size_t>(vs);
      return one_hot(V, vs, pt.prob[s] / ps.prob[s]);
    }
  }
  return pt.prob;
}

}  // namespace detail

// For each variant, the closed form -sum_v q_r(v) d log P_S(v) against
// central differences of -sum_v q_r(v) log P_S(v), and how far apart the
// per-r gradients are.
inline BandwidthReport check_bandwidth_variants(const PolicyParams& params, const ContextKey& ctx,
                                                const std::vector<int>& r_ids, std::span<const double> prior,
                                                double fd_step = 1e-5) {
  if (!ctx.student()) throw ModeMismatch("check_bandwidth_variants: needs a student context");
  BandwidthReport rep;
  auto ps = student_dist(params, ctx);
  Matrix rows;
  std::vector<TokenDistribution> pts;
  for (int r : r_ids) {
    ContextKey t = ctx;
    t.privileged = r;
    pts.push_back(teacher_dist(params, t));
    rows.push_back(pts.back().prob);
  }
  rep.mutual_information = check_kl_decomposition(rows, prior, ps.prob).mutual_information;
  std::vector<std::size_t> blk;
  params.blocks(ctx, blk);
  for (OpsdVariant variant : {OpsdVariant::full, OpsdVariant::teacher_top1, OpsdVariant::student_top1}) {
    BandwidthVariantResult res;
    res.variant = variant;
    for (const auto& pt : pts) {
      auto q = detail::variant_targets(pt, ps, variant);
      SparseGrad g;
      detail::add_logprob_grad(params, ctx, ps, q, -1.0, g);
      g.compact();
      auto dense = g.to_dense(params.dim());
      std::vector<double> a, b;
      PolicyParams probe = params;
      for (std::size_t base : blk)
        for (std::size_t v = 0; v < params.shape().V(); ++v) {
          std::size_t i = base + v;
          double w0 = probe.weights()[i];
          probe.weights()[i] = w0 + fd_step;
          double up = detail::variant_loss(probe, ctx, q);
          probe.weights()[i] = w0 - fd_step;
          double dn = detail::variant_loss(probe, ctx, q);
          probe.weights()[i] = w0;
          a.push_back(dense[i]);
          b.push_back((up - dn) / (2.0 * fd_step));
        }
      std::vector<double> diff(a.size());
      for (std::size_t k = 0; k < a.size(); ++k) diff[k] = a[k] - b[k];
      res.max_fd_error = std::max(res.max_fd_error, norm(diff) / std::max(1.0, norm(b)));
      res.grads.push_back(std::move(dense));
    }
    res.min_r_spread = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < res.grads.size(); ++i)
      for (std::size_t j = i + 1; j < res.grads.size(); ++j) {
        std::vector<double> d(res.grads[i].size());
        for (std::size_t k = 0; k < d.size(); ++k) d[k] = res.grads[i][k] - res.grads[j][k];
        res.min_r_spread = std::min(res.min_r_spread, norm(d));
      }
    if (res.grads.size() < 2) res.min_r_spread = 0.0;
    rep.variants.push_back(std::move(res));
  }
  return rep;
}

// Every student context along each derivation of the instance, spread taken
// per r pair over the whole family. Pairs sharing a derivation have the same
// teacher rows and are left out of the spread.
inline BandwidthReport check_bandwidth_variants(const PolicyParams& params, const Instance& inst,
                                                double fd_step = 1e-5) {
  std::vector<int> ids;
  std::vector<double> prior;
  for (const auto& r : inst.privileged) {
    ids.push_back(r.id);
    prior.push_back(r.weight);
  }
  std::set<std::vector<int>> prefixes;
  for (const auto& r : inst.privileged) {
    std::vector<int> pre;
    prefixes.insert(pre);
    for (int tok : r.tokens) {
      pre.push_back(tok);
      if (static_cast<int>(pre.size()) < inst.max_len) prefixes.insert(pre);
    }
  }
  BandwidthReport out;
  const std::size_t R = ids.size();
  std::vector<Matrix> pair_max(3, Matrix(R, std::vector<double>(R, 0.0)));
  for (const auto& pre : prefixes) {
    auto rep = check_bandwidth_variants(params, make_context(params.shape(), inst, kAbsent, pre), ids, prior, fd_step);
    out.mutual_information = std::max(out.mutual_information, rep.mutual_information);
    if (out.variants.empty()) out.variants = rep.variants;
    for (std::size_t k = 0; k < rep.variants.size(); ++k) {
      auto& agg = out.variants[k];
      const auto& cur = rep.variants[k];
      agg.max_fd_error = std::max(agg.max_fd_error, cur.max_fd_error);
      agg.grads = cur.grads;
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = i + 1; j < R; ++j) {
          std::vector<double> d(cur.grads[i].size());
          for (std::size_t m = 0; m < d.size(); ++m) d[m] = cur.grads[i][m] - cur.grads[j][m];
          pair_max[k][i][j] = std::max(pair_max[k][i][j], norm(d));
        }
    }
  }
  for (std::size_t k = 0; k < out.variants.size(); ++k) {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = i + 1; j < R; ++j)
        if (inst.privileged[i].tokens != inst.privileged[j].tokens) m = std::min(m, pair_max[k][i][j]);
    out.variants[k].min_r_spread = std::isfinite(m) ? m : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------

struct BayesReport {
  std::size_t checked_tokens = 0;
  std::size_t checked_trajectories = 0;
  std::size_t skipped = 0;             // zero-probability (r, y) pairs
  double max_step_violation = 0.0;     // |w_t - posterior ratio| / max(1, ratio)
  double max_product_violation = 0.0;  // |prod w_t - P(r|y)/P(r)| / max(1, ratio)
};

// w_t from the exact-tabular policy built on the joint, against posterior
// ratios read off the joint directly.
inline BayesReport check_bayesian_identity(const JointModel& joint) {
  const PolicyParams pol = tabular_policy_from_joint(joint);
  const auto& shape = pol.shape();
  BayesReport rep;
  for (const auto& e : joint.entries) {
    if (!(e.prob > 0.0)) {
      ++rep.skipped;
      continue;
    }
    ++rep.checked_trajectories;
    const std::size_t r = static_cast<std::size_t>(e.r);
    ContextKey sctx = make_context(shape, 0, {}, kAbsent, {});
    ContextKey tctx = make_context(shape, 0, {}, e.r, {});
    std::vector<int> prefix;
    double prod = 1.0;
    for (int tok : e.tokens) {
      auto before = privileged_posterior(joint, prefix);
      auto ps = student_dist(pol, sctx);
      auto pt = teacher_dist(pol, tctx);
      const auto v = static_cast<std::size_t>(tok);
      double w = std::exp(pt.logp[v] - ps.logp[v]);
      prefix.push_back(tok);
      auto after = privileged_posterior(joint, prefix);
      double ratio = after[r] / before[r];
      rep.max_step_violation = std::max(rep.max_step_violation, std::abs(w - ratio) / std::max(1.0, std::abs(ratio)));
      prod *= w;
      ++rep.checked_tokens;
      sctx = advance(sctx, tok);
      tctx = advance(tctx, tok);
    }
    double total = privileged_posterior(joint, prefix)[r] / joint.prior[r];
    rep.max_product_violation =
        std::max(rep.max_product_violation, std::abs(prod - total) / std::max(1.0, std::abs(total)));
  }
  return rep;
}

// ---------------------------------------------------------------------------

struct LeakageFreeReport {
  std::size_t tokens = 0;
  std::size_t sign_violations = 0;
  std::size_t bound_violations = 0;
  std::size_t support_violations = 0;
  std::size_t degradation_violations = 0;
  bool pass() const {
    return sign_violations == 0 && bound_violations == 0 && support_violations == 0 && degradation_violations == 0;
  }
};

// (i) sign(adv_t) = sign(A); (iii) stored clipped weight equals clamp(w)
// inside [1-eps, 1+eps]; (iv) |adv_t - A| <= lambda |A| |w_clipped - 1|, so
// w -> 1 forces adv_t -> A.
inline LeakageFreeReport check_leakage_free(const std::vector<CreditTrace>& traces, double eps_w, double lambda) {
  LeakageFreeReport rep;
  for (const auto& tr : traces)
    for (const auto& c : tr.tokens) {
      ++rep.tokens;
      if (sign_of(c.adv) != sign_of(tr.advantage)) ++rep.sign_violations;
      if (c.w_clipped < 1.0 - eps_w || c.w_clipped > 1.0 + eps_w || c.w_clipped != clip_weight(c.w, eps_w))
        ++rep.bound_violations;
      double bound = lambda * std::abs(tr.advantage) * std::abs(c.w_clipped - 1.0);
      if (std::abs(c.adv - tr.advantage) > bound * (1.0 + 1e-12) + 1e-15) ++rep.degradation_violations;
    }
  return rep;
}

// (ii) every nonzero gradient coordinate lies in a student block active at
// one of the sampled contexts; r-keyed features never move.
inline std::size_t support_violations(const PolicyParams& params, const std::vector<ContextKey>& sampled,
                                      const SparseGrad& grad) {
  std::vector<std::size_t> allowed, blk;
  for (const auto& ctx : sampled) {
    params.blocks(ctx, blk);
    allowed.insert(allowed.end(), blk.begin(), blk.end());
  }
  std::sort(allowed.begin(), allowed.end());
  const std::size_t V = params.shape().V();
  std::size_t bad = 0;
  for (const auto& [i, g] : grad.entries) {
    if (g == 0.0) continue;
    if (i >= params.shape().shared_dim()) {
      ++bad;
      continue;
    }
    auto it = std::upper_bound(allowed.begin(), allowed.end(), i);
    if (it == allowed.begin() || i >= *std::prev(it) + V) ++bad;
  }
  return bad;
}

inline LeakageFreeReport check_leakage_free(const std::vector<CreditTrace>& traces, double eps_w, double lambda,
                                            const PolicyParams& params, const std::vector<ContextKey>& sampled,
                                            const SparseGrad& grad) {
  auto rep = check_leakage_free(traces, eps_w, lambda);
  rep.support_violations = support_violations(params, sampled, grad);
  return rep;
}

// ---------------------------------------------------------------------------
// Capacity ceiling: on a short-horizon copy of an instance, a tabular student
// set to the prior-weighted marginal teacher has zero frozen-teacher
// distillation gradient while its accuracy stays below the best policy's.

struct CeilingReport {
  double grad_norm = 0.0;
  double student_accuracy = 0.0;
  double best_accuracy = 1.0;
  std::size_t contexts = 0;
};

inline CeilingReport check_capacity_ceiling(const PolicyParams& base, Instance inst, int horizon = 3) {
  if (horizon < 2) throw std::invalid_argument("check_capacity_ceiling: horizon must be >= 2");
  inst.max_len = horizon;
  std::vector<PrivilegedEntry> kept;
  for (const auto& r : inst.privileged)
    if (static_cast<int>(r.tokens.size()) + 1 <= horizon) kept.push_back(r);
  if (kept.empty()) throw std::invalid_argument("check_capacity_ceiling: no derivation fits the horizon");
  double z = 0.0;
  for (const auto& r : kept) z += r.weight;
  for (auto& r : kept) r.weight /= z;
  inst.privileged = kept;

  const PolicyShape& fs = base.shape();
  PolicyShape ts;
  ts.vocab = fs.vocab;
  ts.k = static_cast<int>(inst.prompt.size()) + horizon;
  ts.buckets = 1;
  ts.n_privileged = fs.n_privileged;
  const std::size_t V = fs.V();

  std::vector<std::pair<ContextKey, std::vector<double>>> rows;
  std::vector<std::pair<ContextKey, std::vector<double>>> marg_rows;
  std::vector<std::vector<int>> frontier{{}};
  for (int t = 0; t < horizon; ++t) {
    std::vector<std::vector<int>> next;
    for (const auto& prefix : frontier) {
      ContextKey fctx = make_context(fs, inst, kAbsent, prefix);
      ContextKey tctx = make_context(ts, inst, kAbsent, prefix);
      std::vector<double> bar(V, 0.0);
      for (const auto& r : inst.privileged) {
        ContextKey fr = fctx;
        fr.privileged = r.id;
        auto pt = teacher_dist(base, fr);
        ContextKey tr = tctx;
        tr.privileged = r.id;
        rows.emplace_back(tr, pt.prob);
        for (std::size_t v = 0; v < V; ++v) bar[v] += r.weight * pt.prob[v];
      }
      double s = 0.0;
      for (double x : bar) s += x;
      for (double& x : bar) x /= s;
      marg_rows.emplace_back(tctx, bar);
      for (int v = 0; v < static_cast<int>(V); ++v) {
        if (v == fs.vocab.end) continue;
        auto p = prefix;
        p.push_back(v);
        if (t + 1 < horizon) next.push_back(std::move(p));
      }
    }
    frontier = std::move(next);
  }
  rows.insert(rows.end(), marg_rows.begin(), marg_rows.end());
  PolicyParams tab = set_exact_tabular(ts, rows);

  CeilingReport rep;
  auto ex = expand_student(tab, inst, horizon);
  rep.student_accuracy = ex.correct_mass;
  rep.best_accuracy = 1.0;  // answering gold then END
  std::vector<double> grad(tab.dim(), 0.0);
  for (const auto& st : ex.states) {
    std::vector<double> q(V, 0.0);
    for (const auto& r : inst.privileged) {
      ContextKey tr = st.ctx;
      tr.privileged = r.id;
      auto pt = teacher_dist(tab, tr);
      for (std::size_t v = 0; v < V; ++v) q[v] += r.weight * pt.prob[v];
    }
    SparseGrad g;
    detail::add_logprob_grad(tab, st.ctx, st.dist, q, st.mass, g);
    g.accumulate_into(grad);
    ++rep.contexts;
  }
  rep.grad_norm = norm(grad);
  return rep;
}

// ---------------------------------------------------------------------------

struct StrategyVerdict {
  std::string name;
  bool stability = false;
  bool improvement = false;
  bool leakage_free = false;
  nlohmann::json evidence;
};

struct TrilemmaReport {
  std::vector<StrategyVerdict> rows;  // frozen, online, rlsd
  bool matches_expected() const {
    if (rows.size() != 3) return false;
    auto is = [](const StrategyVerdict& v, bool a, bool b, bool c) {
      return v.stability == a && v.improvement == b && v.leakage_free == c;
    };
    return is(rows[0], true, false, false) && is(rows[1], false, true, false) && is(rows[2], true, true, true);
  }
};

struct TrilemmaOptions {
  int opsd_steps = 30;
  int rlsd_steps = 60;
  double improvement_target = 0.95;
  double min_grad_norm = 1e-6;
};

namespace detail {

inline StrategyVerdict opsd_strategy(const TrainerConfig& base, TeacherStrategy strategy,
                                     const std::vector<std::uint64_t>& seeds, const std::vector<Instance>& suite,
                                     const TrilemmaOptions& opt) {
  StrategyVerdict v;
  v.name = strategy == TeacherStrategy::frozen ? "frozen" : "online";
  bool all_dt_zero = true;
  double min_grad = std::numeric_limits<double>::infinity();
  double max_rho = 0.0;
  int events = 0;
  nlohmann::json per_seed = nlohmann::json::array();
  for (auto seed : seeds) {
    TrainerConfig c = base;
    c.method = Method::opsd;
    c.teacher = strategy;
    c.seed = seed;
    c.steps = opt.opsd_steps;
    Trainer tr(c, suite);
    tr.set_state_metrics(false);
    nlohmann::json ev;
    std::vector<double> dt, ds, rho;
    int seed_events = 0;
    for (int s = 1; s <= c.steps; ++s) {
      auto rec = tr.train_step(s);
      dt.push_back(rec.delta_t);
      ds.push_back(rec.delta_s);
      rho.push_back(rec.rho);
      if (rec.delta_t != 0.0) all_dt_zero = false;
      if (rec.delta_t > std::abs(rec.delta_s)) ++seed_events;
      min_grad = std::min(min_grad, rec.grad_norm);
      max_rho = std::max(max_rho, rec.rho);
    }
    events += seed_events;
    ev["seed"] = seed;
    ev["delta_t"] = dt;
    ev["delta_s"] = ds;
    ev["rho"] = rho;
    ev["instability_events"] = seed_events;
    per_seed.push_back(ev);
  }
  v.evidence["runs"] = per_seed;
  v.evidence["instability_events"] = events;
  v.evidence["delta_t_identically_zero"] = all_dt_zero;
  v.evidence["min_grad_norm"] = min_grad;
  v.evidence["max_rho"] = max_rho;
  v.stability = all_dt_zero;
  v.leakage_free = max_rho == 0.0;
  if (strategy == TeacherStrategy::frozen) {
    auto ceiling = check_capacity_ceiling(init_params(base, suite), suite.front());
    v.evidence["ceiling_grad_norm"] = ceiling.grad_norm;
    v.evidence["ceiling_student_accuracy"] = ceiling.student_accuracy;
    v.evidence["ceiling_best_accuracy"] = ceiling.best_accuracy;
    // Stuck: no signal at the marginal optimum although accuracy is below the best.
    v.improvement = !(ceiling.grad_norm <= 1e-10 && ceiling.student_accuracy < ceiling.best_accuracy);
  } else {
    v.improvement = min_grad >= opt.min_grad_norm;
  }
  return v;
}

inline StrategyVerdict rlsd_strategy(const TrainerConfig& base, const std::vector<std::uint64_t>& seeds,
                                     const std::vector<Instance>& suite, const TrilemmaOptions& opt) {
  StrategyVerdict v;
  v.name = "rlsd";
  bool stable = true, improving = true, leak_free = true;
  nlohmann::json per_seed = nlohmann::json::array();
  for (auto seed : seeds) {
    TrainerConfig c = base;
    c.method = Method::rlsd;
    c.seed = seed;
    c.steps = opt.rlsd_steps;
    Trainer tr(c, suite);
    tr.set_state_metrics(false);
    std::vector<double> acc{*tr.initial_record().train_accuracy};
    std::vector<double> grads;
    LeakageFreeReport leak;
    bool seed_improving = true;
    for (int s = 1; s <= c.steps; ++s) {
      const double lambda = lambda_schedule(s - 1, c.lambda0, c.lambda_horizon);
      // Reward objective ignores r-keyed weights: perturb them and compare.
      PolicyParams probe = tr.params();
      for (std::size_t i = probe.shape().shared_dim(); i < probe.dim(); ++i) probe.weights()[i] += 0.5;
      if (expected_accuracy(probe, tr.train_split()) != expected_accuracy(tr.params(), tr.train_split()))
        stable = false;
      auto rec = tr.train_step(s);
      grads.push_back(rec.grad_norm);
      if (acc.back() < opt.improvement_target && rec.grad_norm < opt.min_grad_norm) seed_improving = false;
      if (rec.train_accuracy) {
        if (acc.back() < opt.improvement_target && !(*rec.train_accuracy > acc.back())) seed_improving = false;
        acc.push_back(*rec.train_accuracy);
      }
      const auto& batch = tr.last_batch();
      auto step_rep = check_leakage_free(tr.last_credit(), c.eps_w, lambda);
      // Support: recompute this step's surrogate gradient on its own batch.
      std::vector<ContextKey> sampled;
      SparseGrad grad;
      std::size_t ti = 0;
      for (std::size_t gi = 0; gi < batch.groups.size(); ++gi) {
        const auto& group = batch.groups[gi];
        std::vector<std::vector<double>> adv;
        for (std::size_t i = 0; i < group.rollouts.size(); ++i, ++ti) {
          std::vector<double> row;
          for (const auto& tc : tr.last_credit()[ti].tokens) row.push_back(tc.adv);
          adv.push_back(std::move(row));
          auto ctxs = rollout_contexts(tr.params().shape(), *batch.instances[gi], group.rollouts[i]);
          sampled.insert(sampled.end(), ctxs.begin(), ctxs.end());
        }
        auto sg = grpo_surrogate(tr.params(), tr.params(), *batch.instances[gi], group, adv, c.eps_low, c.eps_high);
        grad.add_scaled(sg.grad, 1.0);
      }
      grad.compact();
      step_rep.support_violations = support_violations(tr.params(), sampled, grad);
      leak.tokens += step_rep.tokens;
      leak.sign_violations += step_rep.sign_violations;
      leak.bound_violations += step_rep.bound_violations;
      leak.support_violations += step_rep.support_violations;
      leak.degradation_violations += step_rep.degradation_violations;
    }
    improving = improving && seed_improving;
    leak_free = leak_free && leak.pass();
    nlohmann::json ev;
    ev["seed"] = seed;
    ev["train_accuracy"] = acc;
    ev["grad_norm"] = grads;
    ev["tokens"] = leak.tokens;
    ev["sign_violations"] = leak.sign_violations;
    ev["bound_violations"] = leak.bound_violations;
    ev["support_violations"] = leak.support_violations;
    ev["degradation_violations"] = leak.degradation_violations;
    per_seed.push_back(ev);
  }
  v.evidence["runs"] = per_seed;
  v.stability = stable;
  v.improvement = improving;
  v.leakage_free = leak_free;
  return v;
}

}  // namespace detail

inline TrilemmaReport check_trilemma(const TrainerConfig& base, const std::vector<std::uint64_t>& seeds,
                                     const TrilemmaOptions& opt = {}) {
  if (seeds.empty()) throw std::invalid_argument("check_trilemma: no seeds");
  auto suite = load_suite(base);
  TrilemmaReport rep;
  rep.rows.push_back(detail::opsd_strategy(base, TeacherStrategy::frozen, seeds, suite, opt));
  rep.rows.push_back(detail::opsd_strategy(base, TeacherStrategy::online, seeds, suite, opt));
  rep.rows.push_back(detail::rlsd_strategy(base, seeds, suite, opt));
  return rep;
}

// ---------------------------------------------------------------------------
// Randomized draws shared by the CLI suite and the tests.

inline std::vector<double> random_distribution(Rng& rng, std::size_t n, double sparsity = 0.0) {
  std::vector<double> p(n);
  double s = 0.0;
  for (auto& x : p) {
    x = uniform01(rng) < sparsity ? 0.0 : -std::log(1.0 - uniform01(rng));
    s += x;
  }
  if (s == 0.0) {
    p[static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n))] = 1.0;
    return p;
  }
  for (auto& x : p) x /= s;
  return p;
}

struct TheoryResult {
  std::string name;
  bool pass = false;
  nlohmann::json detail;
};

// Full verification suite behind the `theory` subcommand.
inline std::vector<TheoryResult> run_theory_suite(std::uint64_t seed, const TrainerConfig& trilemma_config,
                                                  const std::vector<std::uint64_t>& trilemma_seeds) {
  std::vector<TheoryResult> out;
  Rng rng = make_stream({seed, 0x7e0});

  {
    double worst = 0.0;
    const int draws = 200;
    for (int i = 0; i < draws; ++i) {
      std::size_t V = 2 + static_cast<std::size_t>(uniform01(rng) * 11);
      std::size_t R = 1 + static_cast<std::size_t>(uniform01(rng) * 8);
      Matrix rows;
      for (std::size_t r = 0; r < R; ++r) rows.push_back(random_distribution(rng, V, 0.2));
      auto prior = random_distribution(rng, R);
      auto student = random_distribution(rng, V);
      worst = std::max(worst, check_kl_decomposition(rows, prior, student).residual);
    }
    out.push_back({"kl_decomposition", worst <= 1e-9, {{"draws", draws}, {"max_residual", worst}}});
  }
  {
    double worst_mean = 0.0, worst_recon = 0.0, worst_diag = 0.0;
    const int draws = 200;
    for (int i = 0; i < draws; ++i) {
      std::size_t V = 2 + static_cast<std::size_t>(uniform01(rng) * 11);
      std::size_t R = 1 + static_cast<std::size_t>(uniform01(rng) * 8);
      Matrix rows;
      for (std::size_t r = 0; r < R; ++r) rows.push_back(random_distribution(rng, V));
      auto prior = random_distribution(rng, R);
      Matrix G(V, std::vector<double>(V + 3, 0.0));
      for (std::size_t v = 0; v < V; ++v) G[v][v] = 2.0 * uniform01(rng) - 1.0;  // orthogonal
      auto rep = check_gradient_decomposition(rows, prior, G);
      worst_mean = std::max(worst_mean, rep.mean_delta_norm);
      worst_recon = std::max(worst_recon, rep.reconstruction_error);
      worst_diag = std::max(worst_diag, std::abs(rep.measured - rep.diagonal));
    }
    out.push_back({"gradient_decomposition",
                   worst_mean <= 1e-10 && worst_recon <= 1e-12 && worst_diag <= 1e-10,
                   {{"draws", draws}, {"max_mean_delta_norm", worst_mean}, {"max_reconstruction_error", worst_recon},
                    {"max_diagonal_gap", worst_diag}}});
  }
  {
    double worst_step = 0.0, worst_prod = 0.0;
    std::size_t tokens = 0, skipped = 0;
    for (int i = 0; i < 20; ++i) {
      int vocab = 2 + static_cast<int>(uniform01(rng) * 5);
      int len = 1 + static_cast<int>(uniform01(rng) * 5);
      int nr = 1 + static_cast<int>(uniform01(rng) * 4);
      auto joint = random_joint(rng, vocab, len, nr, 0.3);
      auto rep = check_bayesian_identity(joint);
      worst_step = std::max(worst_step, rep.max_step_violation);
      worst_prod = std::max(worst_prod, rep.max_product_violation);
      tokens += rep.checked_tokens;
      skipped += rep.skipped;
    }
    out.push_back({"bayesian_identity", worst_step <= 1e-9 && worst_prod <= 1e-9,
                   {{"tokens", tokens}, {"skipped", skipped}, {"max_step_violation", worst_step},
                    {"max_product_violation", worst_prod}}});
  }
  {
    auto suite = load_suite(trilemma_config);
    auto params = init_params(trilemma_config, suite);
    auto rep = check_bandwidth_variants(params, suite.front());
    bool ok = true;
    nlohmann::json d = nlohmann::json::array();
    for (const auto& vr : rep.variants) {
      ok = ok && vr.max_fd_error <= 1e-6 && (rep.mutual_information == 0.0 || vr.min_r_spread > 1e-9);
      d.push_back({{"max_fd_error", vr.max_fd_error}, {"min_r_spread", vr.min_r_spread}});
    }
    out.push_back({"bandwidth_variants", ok, {{"mutual_information", rep.mutual_information}, {"variants", d}}});
  }
  {
    auto tri = check_trilemma(trilemma_config, trilemma_seeds);
    nlohmann::json grid = nlohmann::json::array();
    for (const auto& row : tri.rows)
      grid.push_back({{"strategy", row.name},
                      {"stability", row.stability},
                      {"improvement", row.improvement},
                      {"leakage_free", row.leakage_free}});
    bool leak_ok = tri.rows[2].leakage_free;
    out.push_back({"leakage_free", leak_ok, tri.rows[2].evidence});
    out.push_back({"trilemma", tri.matches_expected(), {{"grid", grid}}});
  }
  return out;
}

}  // namespace rlsd
