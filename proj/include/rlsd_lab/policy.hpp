#pragma once

// Autoregressive softmax policy over a small vocabulary. One weight vector
// scores both modes: student contexts (x, y_<t) activate the shared window
// and position features, teacher contexts (x, r, y_<t) add r-keyed features.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "rlsd_lab/core.hpp"

namespace rlsd {

inline constexpr int kFeatureMapVersion = 1;

struct PolicyShape {
  Vocab vocab;
  int k = 2;
  int buckets = 8;
  int n_privileged = 0;

  std::size_t V() const { return static_cast<std::size_t>(vocab.size); }
  std::size_t window_count() const {
    std::size_t n = 1;
    for (int i = 0; i < k; ++i) n *= V() + 1;
    return n;
  }
  std::size_t pos_offset() const { return window_count() * V(); }
  std::size_t r1_offset() const { return pos_offset() + static_cast<std::size_t>(buckets) * V(); }
  std::size_t r2_offset() const {
    return r1_offset() + static_cast<std::size_t>(n_privileged) * V();
  }
  std::size_t dim() const {
    return r2_offset() + static_cast<std::size_t>(n_privileged) * (V() + 1) * V();
  }
  // First index past the features that student mode can touch.
  std::size_t shared_dim() const { return r1_offset(); }

  void validate() const {
    if (vocab.size < 2 || vocab.size > 64) throw std::invalid_argument("vocab size must be in [2,64]");
    if (!vocab.valid(vocab.end)) throw std::invalid_argument("END must be a valid token id");
    if (k < 1) throw std::invalid_argument("context window k must be >= 1");
    if (buckets < 1) throw std::invalid_argument("position buckets must be >= 1");
    if (n_privileged < 0) throw std::invalid_argument("negative privileged count");
  }
};

struct ContextKey {
  int prompt = 0;
  int privileged = kAbsent;
  std::vector<int> window;  // last k tokens of prompt ++ y_<t, left-padded with BOS
  int position = 0;

  bool student() const { return privileged == kAbsent; }
  int last() const { return window.back(); }
};

struct TokenDistribution {
  std::vector<double> prob;
  std::vector<double> logp;

  int argmax() const {
    return static_cast<int>(std::max_element(prob.begin(), prob.end()) - prob.begin());
  }
};

enum class Backend { featurized, tabular };

// Context lookup for the exact-tabular backend.
using TabularKey = std::tuple<int, int, std::vector<int>, int>;

class PolicyParams;
inline PolicyParams set_exact_tabular(
    const PolicyShape& shape, const std::vector<std::pair<ContextKey, std::vector<double>>>& rows);

class PolicyParams {
 public:
  PolicyParams() = default;
  explicit PolicyParams(PolicyShape shape) : shape_(shape) {
    shape_.validate();
    w_.assign(shape_.dim(), 0.0);
  }

  const PolicyShape& shape() const { return shape_; }
  Backend backend() const { return table_ ? Backend::tabular : Backend::featurized; }
  std::vector<double>& weights() { return w_; }
  const std::vector<double>& weights() const { return w_; }
  std::size_t dim() const { return w_.size(); }

  // Offsets of the V-wide weight slices whose sum scores ctx.
  void blocks(const ContextKey& ctx, std::vector<std::size_t>& out) const {
    out.clear();
    const std::size_t V = shape_.V();
    if (static_cast<int>(ctx.window.size()) != shape_.k)
      throw std::invalid_argument("context window length differs from k");
    if (table_) {
      auto it = table_->find(TabularKey{ctx.prompt, ctx.privileged, ctx.window, ctx.position});
      if (it == table_->end()) throw std::out_of_range("tabular policy: no row for context");
      out.push_back(it->second * V);
      return;
    }
    std::size_t win = 0;
    for (int tok : ctx.window) {
      if (tok < 0 || tok > shape_.vocab.size) throw std::invalid_argument("window token out of range");
      win = win * (V + 1) + static_cast<std::size_t>(tok);
    }
    out.push_back(win * V);
    int bucket = std::min(ctx.position, shape_.buckets - 1);
    out.push_back(shape_.pos_offset() + static_cast<std::size_t>(bucket) * V);
    if (ctx.privileged != kAbsent) {
      if (ctx.privileged < 0 || ctx.privileged >= shape_.n_privileged)
        throw std::invalid_argument("privileged id out of range");
      std::size_t r = static_cast<std::size_t>(ctx.privileged);
      out.push_back(shape_.r1_offset() + r * V);
      out.push_back(shape_.r2_offset() +
                    (r * (V + 1) + static_cast<std::size_t>(ctx.last())) * V);
    }
  }

  std::size_t r1_index(int r, int v) const {
    return shape_.r1_offset() + static_cast<std::size_t>(r) * shape_.V() + static_cast<std::size_t>(v);
  }
  std::size_t r2_index(int r, int last, int v) const {
    const std::size_t V = shape_.V();
    return shape_.r2_offset() +
           (static_cast<std::size_t>(r) * (V + 1) + static_cast<std::size_t>(last)) * V +
           static_cast<std::size_t>(v);
  }
  std::size_t window_index(const std::vector<int>& window, int v) const {
    std::size_t win = 0;
    for (int tok : window) win = win * (shape_.V() + 1) + static_cast<std::size_t>(tok);
    return win * shape_.V() + static_cast<std::size_t>(v);
  }
  std::size_t position_index(int position, int v) const {
    int bucket = std::min(position, shape_.buckets - 1);
    return shape_.pos_offset() + static_cast<std::size_t>(bucket) * shape_.V() +
           static_cast<std::size_t>(v);
  }

 private:
  friend PolicyParams set_exact_tabular(
      const PolicyShape&, const std::vector<std::pair<ContextKey, std::vector<double>>>&);

  PolicyShape shape_;
  std::vector<double> w_;
  std::shared_ptr<const std::map<TabularKey, std::size_t>> table_;
};

// ---------------------------------------------------------------------------

inline ContextKey make_context(const PolicyShape& shape, int prompt_id,
                               std::span<const int> prompt_tokens, int privileged,
                               std::span<const int> prefix) {
  ContextKey ctx;
  ctx.prompt = prompt_id;
  ctx.privileged = privileged;
  ctx.position = static_cast<int>(prefix.size());
  ctx.window.assign(static_cast<std::size_t>(shape.k), shape.vocab.bos());
  // Fill from the right with the most recent tokens of prompt ++ prefix.
  int slot = shape.k - 1;
  for (auto it = prefix.rbegin(); it != prefix.rend() && slot >= 0; ++it) ctx.window[slot--] = *it;
  for (auto it = prompt_tokens.rbegin(); it != prompt_tokens.rend() && slot >= 0; ++it)
    ctx.window[slot--] = *it;
  return ctx;
}

inline ContextKey make_context(const PolicyShape& shape, const Instance& inst, int privileged,
                               std::span<const int> prefix) {
  return make_context(shape, inst.id, inst.prompt, privileged, prefix);
}

inline ContextKey advance(const ContextKey& ctx, int token) {
  ContextKey next = ctx;
  std::rotate(next.window.begin(), next.window.begin() + 1, next.window.end());
  next.window.back() = token;
  next.position += 1;
  return next;
}

inline TokenDistribution softmax(std::span<const double> scores) {
  TokenDistribution d;
  double m = -std::numeric_limits<double>::infinity();
  for (double s : scores) m = std::max(m, s);
  if (!std::isfinite(m)) throw std::domain_error("softmax: no finite score");
  d.logp.resize(scores.size());
  d.prob.resize(scores.size());
  double z = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) z += (d.prob[i] = std::exp(scores[i] - m));
  const double lse = m + std::log(z);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    d.logp[i] = scores[i] - lse;
    d.prob[i] /= z;
  }
  return d;
}

inline std::vector<double> scores(const PolicyParams& params, const ContextKey& ctx) {
  thread_local std::vector<std::size_t> blk;
  params.blocks(ctx, blk);
  const std::size_t V = params.shape().V();
  std::vector<double> s(V, 0.0);
  const auto& w = params.weights();
  for (std::size_t b : blk)
    for (std::size_t v = 0; v < V; ++v) s[v] += w[b + v];
  return s;
}

inline TokenDistribution dist(const PolicyParams& params, const ContextKey& ctx) {
  return softmax(scores(params, ctx));
}

inline TokenDistribution student_dist(const PolicyParams& params, const ContextKey& ctx) {
  if (!ctx.student()) throw ModeMismatch("student_dist: context carries a privileged id");
  return dist(params, ctx);
}

inline TokenDistribution teacher_dist(const PolicyParams& params, const ContextKey& ctx) {
  if (ctx.student()) throw ModeMismatch("teacher_dist: context has no privileged id");
  return dist(params, ctx);
}

// Sum_r posterior(r) * P_T(. | x, r, y_<t). `ctx` supplies (x, y_<t); its
// privileged field is ignored. Posterior pairs are (global r id, weight).
inline TokenDistribution marginal_teacher_dist(const PolicyParams& params, const ContextKey& ctx,
                                               const std::vector<std::pair<int, double>>& posterior) {
  if (posterior.empty()) throw std::invalid_argument("marginal_teacher_dist: empty posterior");
  double total = 0.0;
  for (const auto& [r, wgt] : posterior) {
    if (!(wgt >= 0.0)) throw std::invalid_argument("marginal_teacher_dist: negative weight");
    total += wgt;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("marginal_teacher_dist: weights must sum to 1");
  const std::size_t V = params.shape().V();
  TokenDistribution out;
  out.prob.assign(V, 0.0);
  ContextKey tctx = ctx;
  for (const auto& [r, wgt] : posterior) {
    tctx.privileged = r;
    auto d = teacher_dist(params, tctx);
    for (std::size_t v = 0; v < V; ++v) out.prob[v] += wgt * d.prob[v];
  }
  out.logp.resize(V);
  for (std::size_t v = 0; v < V; ++v) out.logp[v] = std::log(out.prob[v]);
  return out;
}

// d log P(token | ctx) / d weights, in whichever mode ctx selects.
inline SparseGrad logprob_grad(const PolicyParams& params, const ContextKey& ctx, int token) {
  if (!params.shape().vocab.valid(token)) throw std::invalid_argument("logprob_grad: token out of vocab");
  auto d = dist(params, ctx);
  std::vector<std::size_t> blk;
  params.blocks(ctx, blk);
  const std::size_t V = params.shape().V();
  SparseGrad g;
  g.entries.reserve(blk.size() * V);
  for (std::size_t b : blk)
    for (std::size_t v = 0; v < V; ++v)
      g.add(b + v, (static_cast<int>(v) == token ? 1.0 : 0.0) - d.prob[v]);
  return g.compact();
}

// Central differences over the features active for ctx; the oracle for
// logprob_grad.
inline SparseGrad finite_diff_grad(const PolicyParams& params, const ContextKey& ctx, int token,
                                   double step) {
  if (!(step >= 1e-7 && step <= 1e-4)) throw std::invalid_argument("finite_diff_grad: step outside [1e-7, 1e-4]");
  if (!params.shape().vocab.valid(token)) throw std::invalid_argument("finite_diff_grad: token out of vocab");
  std::vector<std::size_t> blk;
  params.blocks(ctx, blk);
  PolicyParams probe = params;
  SparseGrad g;
  const std::size_t V = params.shape().V();
  for (std::size_t b : blk) {
    for (std::size_t v = 0; v < V; ++v) {
      std::size_t j = b + v;
      double w0 = probe.weights()[j];
      probe.weights()[j] = w0 + step;
      double up = dist(probe, ctx).logp[static_cast<std::size_t>(token)];
      probe.weights()[j] = w0 - step;
      double dn = dist(probe, ctx).logp[static_cast<std::size_t>(token)];
      probe.weights()[j] = w0;
      if (!std::isfinite(up) || !std::isfinite(dn)) throw std::domain_error("finite_diff_grad: non-finite evaluation");
      g.add(j, (up - dn) / (2.0 * step));
    }
  }
  return g.compact();
}

enum class SampleMode { student, teacher };

// Samples until END or t_max tokens. Log-probabilities are recorded under the
// student context and under the teacher context for `privileged` (a global r
// id, or kAbsent to skip the teacher pass).
inline Rollout sample_rollout(const PolicyParams& params, const Instance& inst, int privileged,
                              SampleMode mode, Rng& rng, int t_max) {
  if (t_max < 1) throw std::invalid_argument("sample_rollout: t_max must be >= 1");
  if (mode == SampleMode::teacher && privileged == kAbsent)
    throw ModeMismatch("sample_rollout: teacher mode needs a privileged id");
  const auto& shape = params.shape();
  Rollout ro;
  ro.prompt = inst.id;
  ro.privileged = privileged;
  ContextKey sctx = make_context(shape, inst, kAbsent, {});
  ContextKey tctx = sctx;
  tctx.privileged = privileged;
  for (int t = 0; t < t_max; ++t) {
    auto ds = dist(params, sctx);
    TokenDistribution dt;
    if (privileged != kAbsent) dt = dist(params, tctx);
    const auto& src = (mode == SampleMode::student) ? ds : dt;
    int tok = sample_index(src.prob, rng);
    ro.tokens.push_back(tok);
    ro.student_lp.push_back(ds.logp[static_cast<std::size_t>(tok)]);
    ro.teacher_lp.push_back(privileged != kAbsent ? dt.logp[static_cast<std::size_t>(tok)]
                                                  : ds.logp[static_cast<std::size_t>(tok)]);
    if (tok == shape.vocab.end) break;
    sctx = advance(sctx, tok);
    tctx = advance(tctx, tok);
  }
  return ro;
}

// Student contexts visited by a rollout, one per token.
inline std::vector<ContextKey> rollout_contexts(const PolicyShape& shape, const Instance& inst,
                                                const Rollout& ro, int privileged = kAbsent) {
  std::vector<ContextKey> out;
  out.reserve(ro.tokens.size());
  ContextKey ctx = make_context(shape, inst, privileged, {});
  for (std::size_t t = 0; t < ro.tokens.size(); ++t) {
    out.push_back(ctx);
    ctx = advance(ctx, ro.tokens[t]);
  }
  return out;
}

// Exact-tabular backend: every supplied context gets its own row, stored as
// log-probabilities so the softmax reproduces the row. Rows may contain zeros
// (their logits are -inf). Lookups of unknown contexts throw.
inline PolicyParams set_exact_tabular(
    const PolicyShape& shape, const std::vector<std::pair<ContextKey, std::vector<double>>>& rows) {
  PolicyParams p;
  p.shape_ = shape;
  p.shape_.validate();
  auto table = std::make_shared<std::map<TabularKey, std::size_t>>();
  const std::size_t V = shape.V();
  p.w_.reserve(rows.size() * V);
  for (const auto& [ctx, row] : rows) {
    if (row.size() != V) throw std::invalid_argument("set_exact_tabular: row width differs from vocab");
    double s = 0.0;
    for (double x : row) {
      if (!(x >= 0.0)) throw std::invalid_argument("set_exact_tabular: negative probability");
      s += x;
    }
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("set_exact_tabular: row not normalized");
    TabularKey key{ctx.prompt, ctx.privileged, ctx.window, ctx.position};
    if (static_cast<int>(ctx.window.size()) != shape.k)
      throw std::invalid_argument("set_exact_tabular: window length differs from k");
    auto [it, fresh] = table->emplace(key, table->size());
    if (!fresh) throw std::invalid_argument("set_exact_tabular: duplicate context");
    for (double x : row) p.w_.push_back(std::log(x));
  }
  p.table_ = std::move(table);
  return p;
}

// Writes the in-context reading of a privileged sequence into the r-keyed
// features: each consecutive pair (prev -> next) along
// [last prompt token] ++ tokens ++ [END] gets `bigram`, each token of the
// sequence gets `unigram`. These features are inactive in student mode, so
// no gradient ever reaches them.
inline void encode_privileged(PolicyParams& params, int r, int last_prompt_token,
                              std::span<const int> tokens, double bigram, double unigram) {
  const auto& shape = params.shape();
  if (r < 0 || r >= shape.n_privileged) throw std::invalid_argument("encode_privileged: r out of range");
  auto& w = params.weights();
  for (int v = 0; v < shape.vocab.size; ++v) w[params.r1_index(r, v)] = 0.0;
  for (int last = 0; last <= shape.vocab.size; ++last)
    for (int v = 0; v < shape.vocab.size; ++v) w[params.r2_index(r, last, v)] = 0.0;
  int prev = last_prompt_token;
  for (int tok : tokens) {
    w[params.r2_index(r, prev, tok)] += bigram;
    prev = tok;
  }
  w[params.r2_index(r, prev, shape.vocab.end)] += bigram;
  std::vector<bool> seen(static_cast<std::size_t>(shape.vocab.size), false);
  for (int tok : tokens) {
    if (seen[static_cast<std::size_t>(tok)]) continue;
    seen[static_cast<std::size_t>(tok)] = true;
    w[params.r1_index(r, tok)] += unigram;
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: text header, then one "feature_id weight" pair per line for
// every nonzero weight.

inline void save_checkpoint(const PolicyParams& params, std::ostream& os) {
  if (params.backend() != Backend::featurized)
    throw std::invalid_argument("save_checkpoint: only the featurized backend is serializable");
  const auto& s = params.shape();
  os << "rlsd-lab-checkpoint " << kFeatureMapVersion << "\n";
  os << "vocab " << s.vocab.size << " end " << s.vocab.end << " k " << s.k << " buckets "
     << s.buckets << " privileged " << s.n_privileged << "\n";
  char buf[64];
  for (std::size_t i = 0; i < params.dim(); ++i) {
    double w = params.weights()[i];
    if (w == 0.0) continue;
    std::snprintf(buf, sizeof buf, "%.17g", w);
    os << i << ' ' << buf << '\n';
  }
}

inline PolicyParams load_checkpoint(std::istream& is) {
  std::string magic;
  int version = 0;
  if (!(is >> magic >> version) || magic != "rlsd-lab-checkpoint")
    throw std::runtime_error("checkpoint: bad header");
  if (version != kFeatureMapVersion)
    throw std::runtime_error("checkpoint: unsupported feature-map version " + std::to_string(version));
  PolicyShape s;
  std::string kv, kend, kk, kb, kp;
  if (!(is >> kv >> s.vocab.size >> kend >> s.vocab.end >> kk >> s.k >> kb >> s.buckets >> kp >>
        s.n_privileged) ||
      kv != "vocab" || kend != "end" || kk != "k" || kb != "buckets" || kp != "privileged")
    throw std::runtime_error("checkpoint: bad shape line");
  PolicyParams p(s);
  std::size_t idx;
  std::string val;
  int line = 2;
  while (is >> idx >> val) {
    ++line;
    if (idx >= p.dim()) throw std::runtime_error("checkpoint: feature id out of range on line " + std::to_string(line));
    double w = std::strtod(val.c_str(), nullptr);
    if (!std::isfinite(w)) throw std::runtime_error("checkpoint: non-finite weight on line " + std::to_string(line));
    p.weights()[idx] = w;
  }
  if (!is.eof()) throw std::runtime_error("checkpoint: malformed pair after line " + std::to_string(line));
  return p;
}

}  // namespace rlsd
