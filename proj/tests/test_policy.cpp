#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "rlsd_lab/env.hpp"
#include "rlsd_lab/policy.hpp"

using namespace rlsd;

namespace {

PolicyShape two_token_shape() {
  PolicyShape s;
  s.vocab = {2, 1};
  s.k = 1;
  s.buckets = 1;
  s.n_privileged = 2;
  return s;
}

PolicyShape small_shape() {
  PolicyShape s;
  s.vocab = {5, 4};
  s.k = 2;
  s.buckets = 3;
  s.n_privileged = 3;
  return s;
}

PolicyParams random_params(const PolicyShape& s, Rng& rng, double scale = 1.0) {
  PolicyParams p(s);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& w : p.weights()) w = n(rng);
  return p;
}

ContextKey random_ctx(const PolicyShape& s, Rng& rng, bool teacher) {
  ContextKey c;
  c.prompt = 0;
  c.window.resize(static_cast<std::size_t>(s.k));
  for (auto& t : c.window) t = static_cast<int>(rng() % (s.V() + 1));
  c.position = static_cast<int>(rng() % 6);
  c.privileged = teacher ? static_cast<int>(rng() % static_cast<unsigned>(s.n_privileged)) : kAbsent;
  return c;
}

ContextKey root_ctx(const PolicyShape& s, int r = kAbsent) {
  return make_context(s, 0, std::vector<int>{}, r, std::vector<int>{});
}

Instance tiny_instance() {
  Instance inst;
  inst.id = 0;
  inst.prompt = {2, 3};
  inst.gold = 1;
  inst.privileged = {{0, {1}, 0.5}, {1, {0, 1}, 0.5}};
  inst.max_len = 4;
  return inst;
}

}  // namespace

TEST(StudentDist, ZeroWeightsGiveUniform) {
  PolicyParams p(small_shape());
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    auto d = student_dist(p, random_ctx(p.shape(), rng, false));
    for (double x : d.prob) EXPECT_DOUBLE_EQ(x, 0.2);
  }
}

TEST(StudentDist, LogTwoAdvantageGivesOneThirdTwoThirds) {
  PolicyParams p(two_token_shape());
  auto ctx = root_ctx(p.shape());
  p.weights()[p.window_index(ctx.window, 1)] = std::log(2.0);
  auto d = student_dist(p, ctx);
  EXPECT_NEAR(d.prob[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(d.prob[1], 2.0 / 3.0, 1e-15);
}

TEST(StudentDist, InactiveFeatureDoesNotMatter) {
  Rng rng(2);
  auto p = random_params(small_shape(), rng);
  auto ctx = random_ctx(p.shape(), rng, false);
  auto before = student_dist(p, ctx);
  ContextKey other = ctx;
  other.window[0] = (ctx.window[0] + 1) % static_cast<int>(p.shape().V() + 1);
  p.weights()[p.window_index(other.window, 0)] += 5.0;
  for (int r = 0; r < p.shape().n_privileged; ++r) p.weights()[p.r1_index(r, 2)] += 3.0;
  auto after = student_dist(p, ctx);
  EXPECT_EQ(before.prob, after.prob);
}

TEST(StudentDist, RejectsPrivilegedContext) {
  PolicyParams p(two_token_shape());
  EXPECT_THROW(student_dist(p, root_ctx(p.shape(), 0)), ModeMismatch);
}

TEST(TeacherDist, ZeroRWeightsMatchStudent) {
  Rng rng(3);
  auto p = random_params(small_shape(), rng);
  for (std::size_t i = p.shape().r1_offset(); i < p.dim(); ++i) p.weights()[i] = 0.0;
  for (int i = 0; i < 50; ++i) {
    auto t = random_ctx(p.shape(), rng, true);
    ContextKey s = t;
    s.privileged = kAbsent;
    EXPECT_EQ(teacher_dist(p, t).prob, student_dist(p, s).prob);
  }
}

TEST(TeacherDist, LogThreeRFeatureGivesQuarterThreeQuarters) {
  PolicyParams p(two_token_shape());
  p.weights()[p.r1_index(1, 1)] = std::log(3.0);
  auto d = teacher_dist(p, root_ctx(p.shape(), 1));
  EXPECT_NEAR(d.prob[0], 0.25, 1e-15);
  EXPECT_NEAR(d.prob[1], 0.75, 1e-15);
  auto s = student_dist(p, root_ctx(p.shape()));
  EXPECT_DOUBLE_EQ(s.prob[1], 0.5);
}

TEST(TeacherDist, RejectsStudentContext) {
  PolicyParams p(two_token_shape());
  EXPECT_THROW(teacher_dist(p, root_ctx(p.shape())), ModeMismatch);
}

TEST(TeacherDist, SharedUpdateShiftsBothModesEqually) {
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    auto p = random_params(small_shape(), rng);
    auto t = random_ctx(p.shape(), rng, true);
    ContextKey s = t;
    s.privileged = kAbsent;
    const int v = static_cast<int>(rng() % p.shape().V());
    auto s0 = scores(p, s), t0 = scores(p, t);
    p.weights()[p.window_index(s.window, v)] += 0.7;
    p.weights()[p.position_index(s.position, v)] -= 0.2;
    auto s1 = scores(p, s), t1 = scores(p, t);
    for (std::size_t u = 0; u < p.shape().V(); ++u) EXPECT_NEAR(s1[u] - s0[u], t1[u] - t0[u], 1e-14);
    // r-keyed updates leave student mode alone
    p.weights()[p.r2_index(t.privileged, t.last(), v)] += 1.3;
    EXPECT_EQ(scores(p, s), s1);
    EXPECT_NE(scores(p, t), t1);
  }
}

TEST(TeacherDist, StudentIgnoresRIdPermutation) {
  Rng rng(5);
  auto p = random_params(small_shape(), rng);
  PolicyParams q = p;
  const auto& s = p.shape();
  // swap the r-blocks of ids 0 and 2
  for (std::size_t v = 0; v < s.V(); ++v) std::swap(q.weights()[q.r1_index(0, v)], q.weights()[q.r1_index(2, v)]);
  for (int last = 0; last <= s.vocab.size; ++last)
    for (int v = 0; v < s.vocab.size; ++v)
      std::swap(q.weights()[q.r2_index(0, last, v)], q.weights()[q.r2_index(2, last, v)]);
  for (int i = 0; i < 50; ++i) {
    auto c = random_ctx(s, rng, false);
    EXPECT_EQ(student_dist(p, c).prob, student_dist(q, c).prob);
    ContextKey t0 = c, t2 = c;
    t0.privileged = 0;
    t2.privileged = 2;
    EXPECT_EQ(teacher_dist(p, t0).prob, teacher_dist(q, t2).prob);
  }
}

TEST(Normalization, EveryDistributionSumsToOne) {
  Rng rng(6);
  for (int i = 0; i < 500; ++i) {
    auto p = random_params(small_shape(), rng, 5.0);
    auto d = dist(p, random_ctx(p.shape(), rng, i % 2 == 0));
    EXPECT_NEAR(std::accumulate(d.prob.begin(), d.prob.end(), 0.0), 1.0, 1e-12);
    for (std::size_t v = 0; v < d.prob.size(); ++v) EXPECT_NEAR(std::exp(d.logp[v]), d.prob[v], 1e-13 * d.prob[v] + 1e-300);
  }
}

TEST(Softmax, HugeScoresStayFinite) {
  std::vector<double> s{1e6, 1e6 - 1.0, -1e6};
  auto d = softmax(s);
  EXPECT_TRUE(all_finite(d.prob));
  EXPECT_NEAR(d.prob[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_EQ(d.prob[2], 0.0);
}

TEST(MarginalTeacher, SingleRIsThatTeacher) {
  Rng rng(7);
  auto p = random_params(small_shape(), rng);
  auto c = random_ctx(p.shape(), rng, true);
  auto m = marginal_teacher_dist(p, c, {{c.privileged, 1.0}});
  auto t = teacher_dist(p, c);
  for (std::size_t v = 0; v < t.prob.size(); ++v) EXPECT_EQ(m.prob[v], t.prob[v]);
}

TEST(MarginalTeacher, ConvexCombinationOfOpposedRows) {
  PolicyParams p(two_token_shape());
  p.weights()[p.r1_index(0, 0)] = std::log(9.0);
  p.weights()[p.r1_index(1, 1)] = std::log(9.0);
  auto m = marginal_teacher_dist(p, root_ctx(p.shape()), {{0, 0.5}, {1, 0.5}});
  EXPECT_NEAR(m.prob[0], 0.5, 1e-15);
  EXPECT_NEAR(m.prob[1], 0.5, 1e-15);
}

TEST(MarginalTeacher, RejectsBadPosteriors) {
  PolicyParams p(two_token_shape());
  auto c = root_ctx(p.shape());
  EXPECT_THROW(marginal_teacher_dist(p, c, {}), std::invalid_argument);
  EXPECT_THROW(marginal_teacher_dist(p, c, {{0, 0.7}}), std::invalid_argument);
  EXPECT_THROW(marginal_teacher_dist(p, c, {{0, 1.5}, {1, -0.5}}), std::invalid_argument);
}

TEST(MarginalTeacher, ExactPosteriorRecoversStudentRow) {
  // Mixture identity: sum_r P(r | prefix) P_T(. | r, prefix) = P(. | prefix).
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    auto joint = random_joint(rng, 4, 3, 3, 0.25);
    auto tab = tabular_policy_from_joint(joint);
    for (const auto& [prefix, m] : joint.prefix_mass) {
      if (static_cast<int>(prefix.size()) >= joint.max_len) continue;
      if (!prefix.empty() && prefix.back() == joint.vocab.end) continue;
      auto post = privileged_posterior(joint, prefix);
      std::vector<std::pair<int, double>> pairs;
      for (int r = 0; r < joint.n_r(); ++r)
        if (post[static_cast<std::size_t>(r)] > 0.0) pairs.emplace_back(r, post[static_cast<std::size_t>(r)]);
      auto ctx = make_context(tab.shape(), 0, std::vector<int>{}, kAbsent, prefix);
      auto mix = marginal_teacher_dist(tab, ctx, pairs);
      auto st = student_dist(tab, ctx);
      for (std::size_t v = 0; v < st.prob.size(); ++v) EXPECT_NEAR(mix.prob[v], st.prob[v], 1e-12);
    }
  }
}

TEST(LogprobGrad, UniformTwoTokenHalf) {
  PolicyParams p(two_token_shape());
  auto ctx = root_ctx(p.shape());
  auto g = logprob_grad(p, ctx, 0);
  EXPECT_DOUBLE_EQ(g.at(p.window_index(ctx.window, 0)), 0.5);
  EXPECT_DOUBLE_EQ(g.at(p.window_index(ctx.window, 1)), -0.5);
}

TEST(LogprobGrad, ExpectedScoreIsZero) {
  Rng rng(9);
  for (int i = 0; i < 100; ++i) {
    auto p = random_params(small_shape(), rng, 2.0);
    auto c = random_ctx(p.shape(), rng, i % 2 == 1);
    auto d = dist(p, c);
    std::vector<double> acc(p.dim(), 0.0);
    for (int v = 0; v < p.shape().vocab.size; ++v) logprob_grad(p, c, v).accumulate_into(acc, d.prob[static_cast<std::size_t>(v)]);
    for (double x : acc) EXPECT_NEAR(x, 0.0, 1e-14);
  }
}

TEST(LogprobGrad, MatchesFiniteDifferencesOn1000Draws) {
  Rng rng(10);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    auto p = random_params(small_shape(), rng, 1.5);
    auto c = random_ctx(p.shape(), rng, i % 3 == 0);
    int tok = static_cast<int>(rng() % p.shape().V());
    auto a = logprob_grad(p, c, tok).to_dense(p.dim());
    auto f = finite_diff_grad(p, c, tok, 1e-6).to_dense(p.dim());
    worst = std::max(worst, relative_error(a, f));
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(LogprobGrad, InactiveFeaturesAreExactlyZero) {
  Rng rng(11);
  auto p = random_params(small_shape(), rng);
  auto c = random_ctx(p.shape(), rng, false);
  auto a = logprob_grad(p, c, 1).to_dense(p.dim());
  auto f = finite_diff_grad(p, c, 1, 1e-6).to_dense(p.dim());
  for (std::size_t i = p.shape().r1_offset(); i < p.dim(); ++i) {
    EXPECT_EQ(a[i], 0.0);
    EXPECT_EQ(f[i], 0.0);
  }
}

TEST(FiniteDiff, RejectsStepOutsideRange) {
  PolicyParams p(two_token_shape());
  auto c = root_ctx(p.shape());
  EXPECT_THROW(finite_diff_grad(p, c, 0, 0.0), std::invalid_argument);
  EXPECT_THROW(finite_diff_grad(p, c, 0, 1e-3), std::invalid_argument);
  EXPECT_THROW(logprob_grad(p, c, 7), std::invalid_argument);
}

TEST(SampleRollout, DeterministicPolicyRepeatsToken) {
  PolicyShape s = small_shape();
  PolicyParams p(s);
  for (int b = 0; b < s.buckets; ++b) p.weights()[p.position_index(b, 2)] = 60.0;
  Instance inst = tiny_instance();
  Rng rng(12);
  auto ro = sample_rollout(p, inst, kAbsent, SampleMode::student, rng, 5);
  EXPECT_EQ(ro.tokens, (std::vector<int>{2, 2, 2, 2, 2}));
  // END fires once it dominates
  for (int b = 1; b < s.buckets; ++b) p.weights()[p.position_index(b, s.vocab.end)] = 200.0;
  auto ro2 = sample_rollout(p, inst, kAbsent, SampleMode::student, rng, 5);
  EXPECT_EQ(ro2.tokens, (std::vector<int>{2, s.vocab.end}));
}

TEST(SampleRollout, SameStreamSameRollout) {
  Rng seed_rng(13);
  auto p = random_params(small_shape(), seed_rng);
  Instance inst = tiny_instance();
  for (std::uint64_t k = 0; k < 20; ++k) {
    Rng a = make_stream({1, k}), b = make_stream({1, k});
    auto ra = sample_rollout(p, inst, 1, SampleMode::student, a, 6);
    auto rb = sample_rollout(p, inst, 1, SampleMode::student, b, 6);
    EXPECT_EQ(ra.tokens, rb.tokens);
    EXPECT_EQ(ra.student_lp, rb.student_lp);
    EXPECT_EQ(ra.teacher_lp, rb.teacher_lp);
  }
}

TEST(SampleRollout, RecordedLogProbsReplayExactly) {
  Rng seed_rng(14);
  auto p = random_params(small_shape(), seed_rng);
  Instance inst = tiny_instance();
  for (std::uint64_t k = 0; k < 50; ++k) {
    Rng rng = make_stream({2, k});
    auto mode = k % 2 ? SampleMode::teacher : SampleMode::student;
    auto ro = sample_rollout(p, inst, 2, mode, rng, 6);
    auto sctx = rollout_contexts(p.shape(), inst, ro);
    auto tctx = rollout_contexts(p.shape(), inst, ro, 2);
    for (std::size_t t = 0; t < ro.tokens.size(); ++t) {
      auto v = static_cast<std::size_t>(ro.tokens[t]);
      EXPECT_EQ(ro.student_lp[t], student_dist(p, sctx[t]).logp[v]);
      EXPECT_EQ(ro.teacher_lp[t], teacher_dist(p, tctx[t]).logp[v]);
    }
  }
}

TEST(SampleRollout, Errors) {
  PolicyParams p(small_shape());
  Instance inst = tiny_instance();
  Rng rng(15);
  EXPECT_THROW(sample_rollout(p, inst, kAbsent, SampleMode::student, rng, 0), std::invalid_argument);
  EXPECT_THROW(sample_rollout(p, inst, kAbsent, SampleMode::teacher, rng, 3), ModeMismatch);
}

TEST(ExactTabular, StoresRowsVerbatim) {
  PolicyShape s = two_token_shape();
  auto ctx = root_ctx(s);
  auto p = set_exact_tabular(s, {{ctx, {0.25, 0.75}}});
  EXPECT_EQ(p.backend(), Backend::tabular);
  auto d = student_dist(p, ctx);
  EXPECT_NEAR(d.prob[0], 0.25, 1e-12);
  EXPECT_NEAR(d.prob[1], 0.75, 1e-12);
}

TEST(ExactTabular, MissingContextThrows) {
  PolicyShape s = two_token_shape();
  auto ctx = root_ctx(s);
  auto p = set_exact_tabular(s, {{ctx, {0.25, 0.75}}});
  EXPECT_THROW(student_dist(p, advance(ctx, 0)), std::out_of_range);
  EXPECT_THROW(teacher_dist(p, root_ctx(s, 0)), std::out_of_range);
}

TEST(ExactTabular, RejectsBadRows) {
  PolicyShape s = two_token_shape();
  auto ctx = root_ctx(s);
  EXPECT_THROW(set_exact_tabular(s, {{ctx, {0.3, 0.6}}}), std::invalid_argument);
  EXPECT_THROW(set_exact_tabular(s, {{ctx, {1.5, -0.5}}}), std::invalid_argument);
  EXPECT_THROW(set_exact_tabular(s, {{ctx, {0.5, 0.5}}, {ctx, {0.5, 0.5}}}), std::invalid_argument);
}

TEST(ExactTabular, JointTableReproducesConditionals) {
  // Oracle: sum the explicit trajectory list directly.
  Rng rng(16);
  auto joint = random_joint(rng, 3, 3, 2, 0.2);
  auto tab = tabular_policy_from_joint(joint);
  auto prefix_prob = [&](int r, const std::vector<int>& pre) {
    double s = 0.0;
    for (const auto& e : joint.entries)
      if (e.r == r && e.tokens.size() >= pre.size() && std::equal(pre.begin(), pre.end(), e.tokens.begin())) s += e.prob;
    return s;
  };
  int checked = 0;
  for (const auto& e : joint.entries) {
    if (e.prob == 0.0) continue;
    std::vector<int> pre;
    for (std::size_t t = 0; t < e.tokens.size(); ++t) {
      auto ctx = make_context(tab.shape(), 0, std::vector<int>{}, e.r, pre);
      auto d = teacher_dist(tab, ctx);
      auto ext = pre;
      ext.push_back(e.tokens[t]);
      double want = prefix_prob(e.r, ext) / prefix_prob(e.r, pre);
      EXPECT_NEAR(d.prob[static_cast<std::size_t>(e.tokens[t])], want, 1e-12);
      pre = ext;
      ++checked;
    }
  }
  EXPECT_GT(checked, 0);
}

TEST(Checkpoint, RoundTripIsExact) {
  Rng rng(17);
  auto p = random_params(small_shape(), rng);
  p.weights()[3] = 0.0;
  std::stringstream ss;
  save_checkpoint(p, ss);
  auto q = load_checkpoint(ss);
  EXPECT_EQ(q.shape().k, p.shape().k);
  EXPECT_EQ(q.shape().n_privileged, p.shape().n_privileged);
  EXPECT_EQ(q.weights(), p.weights());
}

TEST(Checkpoint, RejectsBadInput) {
  std::stringstream bad_magic("not-a-checkpoint 1\n");
  EXPECT_THROW(load_checkpoint(bad_magic), std::runtime_error);
  std::stringstream bad_version("rlsd-lab-checkpoint 99\n");
  EXPECT_THROW(load_checkpoint(bad_version), std::runtime_error);
  std::stringstream out_of_range("rlsd-lab-checkpoint 1\nvocab 2 end 1 k 1 buckets 1 privileged 0\n999 1.0\n");
  EXPECT_THROW(load_checkpoint(out_of_range), std::runtime_error);
  std::stringstream non_finite("rlsd-lab-checkpoint 1\nvocab 2 end 1 k 1 buckets 1 privileged 0\n0 inf\n");
  EXPECT_THROW(load_checkpoint(non_finite), std::runtime_error);
  auto tab = set_exact_tabular(two_token_shape(), {{root_ctx(two_token_shape()), {0.5, 0.5}}});
  std::stringstream sink;
  EXPECT_THROW(save_checkpoint(tab, sink), std::invalid_argument);
}

TEST(EncodePrivileged, WritesBigramChainAndClearsOldValues) {
  PolicyShape s = small_shape();
  PolicyParams p(s);
  encode_privileged(p, 1, 3, std::vector<int>{0, 2}, 5.0, 1.0);
  EXPECT_EQ(p.weights()[p.r2_index(1, 3, 0)], 5.0);
  EXPECT_EQ(p.weights()[p.r2_index(1, 0, 2)], 5.0);
  EXPECT_EQ(p.weights()[p.r2_index(1, 2, s.vocab.end)], 5.0);
  EXPECT_EQ(p.weights()[p.r1_index(1, 0)], 1.0);
  encode_privileged(p, 1, 3, std::vector<int>{1}, 2.0, 0.0);
  EXPECT_EQ(p.weights()[p.r2_index(1, 3, 0)], 0.0);
  EXPECT_EQ(p.weights()[p.r2_index(1, 3, 1)], 2.0);
  EXPECT_EQ(p.weights()[p.r1_index(1, 0)], 0.0);
  EXPECT_THROW(encode_privileged(p, 3, 0, std::vector<int>{}, 1.0, 1.0), std::invalid_argument);
}
