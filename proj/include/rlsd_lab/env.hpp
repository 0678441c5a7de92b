#pragma once

// Synthetic verifiable tasks, the verifier, exact posteriors over privileged
// information, and exact state expansion of the student policy.

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rlsd_lab/core.hpp"
#include "rlsd_lab/policy.hpp"

namespace rlsd {

struct SuiteConfig {
  std::string family = "modular-arithmetic-chain";
  int count = 64;
  std::uint64_t seed = 7;
  int vocab = 12;  // END is vocab - 1
  int modulus = 5;  // digit tokens 0..modulus-1 carry answers
  int n_probes = 2;  // probe tokens follow the digits
  int max_len = 8;
  int privileged_per_instance = 4;
  double cited_weight = 1.0;  // prior scale of cited variants before normalization
  int first_privileged_id = 0;
};

struct VerifierResult {
  int reward = 0;
  bool matched = false;
};

// Reward 1 iff the final non-END token equals the gold answer.
inline VerifierResult verify(const Instance& inst, std::span<const int> y, int end_token) {
  for (auto it = y.rbegin(); it != y.rend(); ++it) {
    if (*it == end_token) continue;
    bool ok = (*it == inst.gold);
    return {ok ? 1 : 0, ok};
  }
  return {0, false};
}

inline void validate_instance(const Instance& inst, const Vocab& vocab) {
  if (inst.privileged.empty() || inst.privileged.size() > 8)
    throw std::invalid_argument("instance " + std::to_string(inst.id) + ": privileged set size outside [1,8]");
  double s = 0.0;
  for (const auto& r : inst.privileged) {
    if (!(r.weight >= 0.0)) throw std::invalid_argument("instance " + std::to_string(inst.id) + ": negative prior weight");
    s += r.weight;
    for (int t : r.tokens)
      if (!vocab.valid(t) || t == vocab.end)
        throw std::invalid_argument("instance " + std::to_string(inst.id) + ": bad privileged token");
  }
  if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("instance " + std::to_string(inst.id) + ": prior weights do not sum to 1");
  if (!vocab.valid(inst.gold) || inst.gold == vocab.end)
    throw std::invalid_argument("instance " + std::to_string(inst.id) + ": gold answer outside vocab");
  for (int p : inst.probes) {
    if (!vocab.valid(p)) throw std::invalid_argument("instance " + std::to_string(inst.id) + ": probe outside vocab");
    if (p == inst.gold || p == vocab.end)
      throw std::invalid_argument("instance " + std::to_string(inst.id) + ": probe collides with verifier tokens");
  }
  if (inst.max_len < 1) throw std::invalid_argument("instance " + std::to_string(inst.id) + ": max_len < 1");
  for (int t : inst.prompt)
    if (!vocab.valid(t)) throw std::invalid_argument("instance " + std::to_string(inst.id) + ": prompt token outside vocab");
}

namespace detail {

inline int draw_int(Rng& rng, int n) { return static_cast<int>(uniform01(rng) * n); }

inline std::vector<double> draw_prior(Rng& rng, std::size_t n) {
  std::vector<double> w(n);
  double s = 0.0;
  for (auto& x : w) {
    x = 0.5 + uniform01(rng);
    s += x;
  }
  for (auto& x : w) x /= s;
  return w;
}

inline std::vector<int> count_up(int from, int steps, int m) {
  std::vector<int> out;
  for (int i = 1; i <= steps; ++i) out.push_back((from + i) % m);
  return out;
}

// True when the walk start -> d[0] -> ... -> END revisits a token, so a
// last-token reader would see two successors for one token.
inline bool walk_revisits(int start, const std::vector<int>& d) {
  std::vector<int> seen{start};
  for (int t : d) {
    if (std::find(seen.begin(), seen.end(), t) != seen.end()) return true;
    seen.push_back(t);
  }
  return false;
}

}  // namespace detail

// Deterministic for a given config. Privileged ids are allocated
// consecutively from first_privileged_id.
inline std::vector<Instance> make_suite(const SuiteConfig& cfg) {
  const bool chain = cfg.family == "modular-arithmetic-chain";
  const bool rule = cfg.family == "hidden-rule-sequence";
  if (!chain && !rule) throw std::invalid_argument("make_suite: unknown family '" + cfg.family + "'");
  if (cfg.count < 0) throw std::invalid_argument("make_suite: negative count");
  const int m = cfg.modulus;
  const int end = cfg.vocab - 1;
  if (m < 2 || m + cfg.n_probes > end) throw std::invalid_argument("make_suite: digits and probes do not fit the vocab");
  if (cfg.privileged_per_instance < 1 || cfg.privileged_per_instance > 8)
    throw std::invalid_argument("make_suite: privileged_per_instance outside [1,8]");
  if (!(cfg.cited_weight > 0.0) || !std::isfinite(cfg.cited_weight))
    throw std::invalid_argument("make_suite: cited_weight must be finite and > 0");
  if (cfg.n_probes < 1 && cfg.privileged_per_instance > 3)
    throw std::invalid_argument("make_suite: cited derivations need at least one probe token");

  std::vector<Instance> suite;
  int next_r = cfg.first_privileged_id;
  for (int i = 0; i < cfg.count; ++i) {
    Rng rng = make_stream({cfg.seed, 0x5017eULL, static_cast<std::uint64_t>(i)});
    Instance inst;
    inst.id = i;
    inst.max_len = cfg.max_len;
    for (int p = 0; p < cfg.n_probes; ++p) inst.probes.push_back(m + p);
    // Prompts whose derivations revisit a token are redrawn.
    int a = 0, b = 0;
    std::vector<std::vector<int>> derivations;
    for (int attempt = 0;; ++attempt) {
      if (attempt == 1000) throw std::invalid_argument("make_suite: no unambiguous prompt for this modulus");
      a = detail::draw_int(rng, m);
      b = detail::draw_int(rng, m);
      if (chain) {
        inst.gold = (a + b) % m;
        auto up_a = b == 0 ? std::vector<int>{a} : detail::count_up(a, b, m);
        auto up_b = a == 0 ? std::vector<int>{b} : detail::count_up(b, a, m);
        derivations = {up_a, up_b, {inst.gold}};
      } else {
        int d = ((b - a) % m + m) % m;
        inst.gold = (b + d) % m;
        derivations = {{inst.gold}, {d, inst.gold}, {a, d, inst.gold}};
      }
      bool ok = true;
      for (const auto& der : derivations) ok = ok && !detail::walk_revisits(b, der);
      if (ok) break;
    }
    inst.prompt = {a, b};
    // Cited variants open with a probe token and a citation filler, the toy
    // stand-in for text that refers to the reference solution. A reader
    // without r cannot reproduce the filler, and it pushes the prompt out of
    // short context windows.
    std::size_t base = derivations.size();
    const int first_filler = m + cfg.n_probes;
    const int n_fillers = end - first_filler;
    for (std::size_t j = 0; derivations.size() < static_cast<std::size_t>(cfg.privileged_per_instance); ++j) {
      std::vector<int> cited{m + detail::draw_int(rng, cfg.n_probes)};
      if (n_fillers > 0) cited.push_back(first_filler + detail::draw_int(rng, n_fillers));
      const auto& src = derivations[j % base];
      cited.insert(cited.end(), src.begin(), src.end());
      derivations.push_back(cited);
    }
    derivations.resize(static_cast<std::size_t>(cfg.privileged_per_instance));
    auto prior = detail::draw_prior(rng, derivations.size());
    if (cfg.cited_weight != 1.0 && derivations.size() > base) {
      double total = 0.0;
      for (std::size_t j = 0; j < prior.size(); ++j) total += (prior[j] *= j >= base ? cfg.cited_weight : 1.0);
      for (auto& x : prior) x /= total;
    }
    for (std::size_t j = 0; j < derivations.size(); ++j) {
      if (static_cast<int>(derivations[j].size()) + 1 > cfg.max_len)
        throw std::invalid_argument("make_suite: derivation longer than max_len");
      inst.privileged.push_back({next_r++, derivations[j], prior[j]});
    }
    suite.push_back(std::move(inst));
  }
  return suite;
}

inline int privileged_count(const std::vector<Instance>& suite) {
  int n = 0;
  for (const auto& inst : suite)
    for (const auto& r : inst.privileged) n = std::max(n, r.id + 1);
  return n;
}

// 80/20 split keyed by a hash of the instance id.
inline bool is_heldout(const Instance& inst) {
  return splitmix64(static_cast<std::uint64_t>(inst.id) ^ 0xa5a5a5a5ULL) % 5 == 0;
}

inline std::pair<std::vector<Instance>, std::vector<Instance>> split_suite(const std::vector<Instance>& suite) {
  std::vector<Instance> train, heldout;
  for (const auto& inst : suite) (is_heldout(inst) ? heldout : train).push_back(inst);
  return {train, heldout};
}

// ---------------------------------------------------------------------------
// Suite files: one instance per line,
//   id | prompt | gold | probes | max_len | r_id:weight:tokens ; ...
// with comma-separated token lists. '#' starts a comment line.

namespace detail {

inline std::string join_tokens(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline int parse_int(const std::string& s) {
  std::size_t used = 0;
  int v = std::stoi(trim(s), &used);
  if (used != trim(s).size()) throw std::invalid_argument("trailing characters in '" + s + "'");
  return v;
}

inline std::vector<int> parse_tokens(const std::string& s) {
  std::vector<int> out;
  if (trim(s).empty()) return out;
  for (const auto& part : split(s, ',')) out.push_back(parse_int(part));
  return out;
}

}  // namespace detail

inline void write_suite(const std::vector<Instance>& suite, std::ostream& os) {
  os << "# rlsd-lab suite v1: id | prompt | gold | probes | max_len | r_id:weight:tokens ; ...\n";
  char buf[64];
  for (const auto& inst : suite) {
    os << inst.id << " | " << detail::join_tokens(inst.prompt) << " | " << inst.gold << " | "
       << detail::join_tokens(inst.probes) << " | " << inst.max_len << " | ";
    for (std::size_t j = 0; j < inst.privileged.size(); ++j) {
      const auto& r = inst.privileged[j];
      std::snprintf(buf, sizeof buf, "%.17g", r.weight);
      os << (j ? " ; " : "") << r.id << ':' << buf << ':' << detail::join_tokens(r.tokens);
    }
    os << '\n';
  }
}

inline std::vector<Instance> read_suite(std::istream& is, const Vocab& vocab) {
  std::vector<Instance> suite;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (detail::trim(line).empty() || detail::trim(line)[0] == '#') continue;
    try {
      auto fields = detail::split(line, '|');
      if (fields.size() != 6) throw std::invalid_argument("expected 6 '|'-separated fields");
      Instance inst;
      inst.id = detail::parse_int(fields[0]);
      inst.prompt = detail::parse_tokens(fields[1]);
      inst.gold = detail::parse_int(fields[2]);
      inst.probes = detail::parse_tokens(fields[3]);
      inst.max_len = detail::parse_int(fields[4]);
      for (const auto& rtext : detail::split(fields[5], ';')) {
        auto parts = detail::split(rtext, ':');
        if (parts.size() != 3) throw std::invalid_argument("privileged entry needs id:weight:tokens");
        PrivilegedEntry r;
        r.id = detail::parse_int(parts[0]);
        r.weight = std::stod(detail::trim(parts[1]));
        r.tokens = detail::parse_tokens(parts[2]);
        inst.privileged.push_back(std::move(r));
      }
      validate_instance(inst, vocab);
      suite.push_back(std::move(inst));
    } catch (const std::exception& e) {
      throw std::runtime_error("suite line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return suite;
}

// ---------------------------------------------------------------------------
// Exact expansion of the student policy. Prefixes that share a context key
// (window, position) have identical futures, so they are merged and the
// expansion stays exact at a cost bounded by the number of windows.

struct ExpandedState {
  ContextKey ctx;
  double mass = 0.0;  // probability of reaching this context under the student
  TokenDistribution dist;
};

struct Expansion {
  std::vector<ExpandedState> states;  // every context at positions 0..t_max-1
  double correct_mass = 0.0;          // probability the response verifies
  double ended_mass = 0.0;            // probability END is emitted within t_max
  double pruned_mass = 0.0;           // reach mass dropped by min_mass (0 when exact)
};

namespace detail {

// Same expansion keyed by a map, for window spaces too large to index densely.
inline Expansion expand_student_sparse(const PolicyParams& params, const Instance& inst, int t_max,
                                       double min_mass) {
  const auto& shape = params.shape();
  const int end = shape.vocab.end;
  Expansion out;
  std::map<std::vector<int>, double> layer;
  ContextKey root = make_context(shape, inst, kAbsent, {});
  layer[root.window] = 1.0;
  for (int t = 0; t < t_max; ++t) {
    std::map<std::vector<int>, double> next;
    for (const auto& [window, mass] : layer) {
      if (mass < min_mass) {
        out.pruned_mass += mass;
        continue;
      }
      ExpandedState st;
      st.ctx = root;
      st.ctx.window = window;
      st.ctx.position = t;
      st.mass = mass;
      st.dist = student_dist(params, st.ctx);
      double p_end = st.dist.prob[static_cast<std::size_t>(end)];
      out.ended_mass += mass * p_end;
      if (t > 0 && window.back() == inst.gold) out.correct_mass += mass * p_end;
      for (int v = 0; v < shape.vocab.size; ++v) {
        double p = st.dist.prob[static_cast<std::size_t>(v)];
        if (v == end || p == 0.0) continue;
        if (t + 1 == t_max) {
          if (v == inst.gold) out.correct_mass += mass * p;
          continue;
        }
        auto w = window;
        std::rotate(w.begin(), w.begin() + 1, w.end());
        w.back() = v;
        next[w] += mass * p;
      }
      out.states.push_back(std::move(st));
    }
    layer = std::move(next);
  }
  return out;
}

}  // namespace detail

// min_mass > 0 drops contexts reached with less probability than that; the
// dropped total is reported in pruned_mass and bounds the error of every
// mass-weighted quantity.
inline Expansion expand_student(const PolicyParams& params, const Instance& inst, int t_max, double min_mass = 0.0) {
  const auto& shape = params.shape();
  const int end = shape.vocab.end;
  const std::size_t base = shape.V() + 1;
  const std::size_t n_windows = shape.window_count();
  if (n_windows > (std::size_t{1} << 16)) return detail::expand_student_sparse(params, inst, t_max, min_mass);
  Expansion out;
  ContextKey root = make_context(shape, inst, kAbsent, {});
  auto code_of = [&](const std::vector<int>& w) {
    std::size_t c = 0;
    for (int tok : w) c = c * base + static_cast<std::size_t>(tok);
    return c;
  };
  auto window_of = [&](std::size_t c) {
    std::vector<int> w(static_cast<std::size_t>(shape.k));
    for (std::size_t i = w.size(); i-- > 0;) {
      w[i] = static_cast<int>(c % base);
      c /= base;
    }
    return w;
  };
  // Layers are dense over window codes; code order is lexicographic window order.
  std::vector<double> layer(n_windows, 0.0), next(n_windows, 0.0);
  std::vector<char> live(n_windows, 0), next_live(n_windows, 0);
  const std::size_t root_code = code_of(root.window);
  layer[root_code] = 1.0;
  live[root_code] = 1;
  for (int t = 0; t < t_max; ++t) {
    std::fill(next.begin(), next.end(), 0.0);
    std::fill(next_live.begin(), next_live.end(), 0);
    for (std::size_t code = 0; code < n_windows; ++code) {
      if (!live[code]) continue;
      const double mass = layer[code];
      if (mass < min_mass) {
        out.pruned_mass += mass;
        continue;
      }
      ExpandedState st;
      st.ctx = root;
      st.ctx.window = window_of(code);
      st.ctx.position = t;
      st.mass = mass;
      st.dist = student_dist(params, st.ctx);
      double p_end = st.dist.prob[static_cast<std::size_t>(end)];
      out.ended_mass += mass * p_end;
      if (t > 0 && st.ctx.window.back() == inst.gold) out.correct_mass += mass * p_end;
      const std::size_t shifted = (code % (n_windows / base)) * base;
      for (int v = 0; v < shape.vocab.size; ++v) {
        double p = st.dist.prob[static_cast<std::size_t>(v)];
        if (v == end || p == 0.0) continue;
        if (t + 1 == t_max) {
          if (v == inst.gold) out.correct_mass += mass * p;
          continue;
        }
        const std::size_t nc = shifted + static_cast<std::size_t>(v);
        next[nc] += mass * p;
        next_live[nc] = 1;
      }
      out.states.push_back(std::move(st));
    }
    layer.swap(next);
    live.swap(next_live);
  }
  return out;
}

inline double expected_accuracy(const PolicyParams& params, const std::vector<Instance>& instances,
                                double min_mass = 0.0) {
  if (instances.empty()) return 0.0;
  double s = 0.0;
  for (const auto& inst : instances) s += expand_student(params, inst, inst.max_len, min_mass).correct_mass;
  return s / static_cast<double>(instances.size());
}

// Probability mass the student puts on probe tokens per generated position,
// averaged over instances.
inline double leakage_probe_score(const PolicyParams& params, const std::vector<Instance>& instances,
                                  double min_mass = 0.0) {
  if (instances.empty()) throw std::invalid_argument("leakage_probe_score: no instances");
  double total = 0.0;
  for (const auto& inst : instances) {
    if (inst.probes.empty()) continue;
    auto ex = expand_student(params, inst, inst.max_len, min_mass);
    double mass = 0.0, probe = 0.0;
    for (const auto& st : ex.states) {
      mass += st.mass;
      for (int p : inst.probes) probe += st.mass * st.dist.prob[static_cast<std::size_t>(p)];
    }
    total += probe / mass;
  }
  return total / static_cast<double>(instances.size());
}

// ---------------------------------------------------------------------------
// Explicit joint P(r, y | x) for a single prompt on a small vocabulary.

struct JointEntry {
  int r = 0;
  std::vector<int> tokens;  // ends with END, or has length max_len
  double prob = 0.0;
};

struct JointModel {
  Vocab vocab;
  int max_len = 0;
  std::vector<double> prior;
  std::vector<JointEntry> entries;
  // prefix -> P(r, prefix) for every r; filled by index().
  std::map<std::vector<int>, std::vector<double>> prefix_mass;

  int n_r() const { return static_cast<int>(prior.size()); }

  void index() {
    prefix_mass.clear();
    double total = 0.0;
    std::vector<double> by_r(prior.size(), 0.0);
    for (const auto& e : entries) {
      if (e.r < 0 || e.r >= n_r()) throw std::invalid_argument("JointModel: r out of range");
      total += e.prob;
      by_r[static_cast<std::size_t>(e.r)] += e.prob;
      if (e.prob == 0.0) continue;
      std::vector<int> pre;
      for (std::size_t t = 0; t <= e.tokens.size(); ++t) {
        auto& slot = prefix_mass[pre];
        if (slot.empty()) slot.assign(prior.size(), 0.0);
        slot[static_cast<std::size_t>(e.r)] += e.prob;
        if (t < e.tokens.size()) pre.push_back(e.tokens[t]);
      }
    }
    if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("JointModel: total mass differs from 1");
    for (std::size_t r = 0; r < prior.size(); ++r)
      if (std::abs(by_r[r] - prior[r]) > 1e-12) throw std::invalid_argument("JointModel: marginal disagrees with prior");
  }

  // P(r, prefix) for all r; zeros when the prefix never occurs.
  std::vector<double> mass(const std::vector<int>& prefix) const {
    auto it = prefix_mass.find(prefix);
    return it == prefix_mass.end() ? std::vector<double>(prior.size(), 0.0) : it->second;
  }
};

// Exact Bayes posterior P(r | x, prefix) by enumeration.
inline std::vector<double> privileged_posterior(const JointModel& joint, const std::vector<int>& prefix) {
  auto m = joint.mass(prefix);
  double z = 0.0;
  for (double x : m) z += x;
  if (!(z > 0.0)) throw std::domain_error("privileged_posterior: prefix has zero probability");
  for (auto& x : m) x /= z;
  return m;
}

// Random joint: prior over n_r values, then per-r autoregressive rows drawn
// at random; `sparsity` is the chance that a token gets zero probability in
// a row. Zero-probability trajectories are kept in the entry list.
inline JointModel random_joint(Rng& rng, int vocab, int max_len, int n_r, double sparsity) {
  JointModel j;
  j.vocab = {vocab, vocab - 1};
  j.max_len = max_len;
  j.prior = detail::draw_prior(rng, static_cast<std::size_t>(n_r));
  std::vector<int> pre;
  auto recurse = [&](auto&& self, int r, double p) -> void {
    std::vector<double> row(static_cast<std::size_t>(vocab));
    double s = 0.0;
    for (auto& x : row) {
      x = uniform01(rng) < sparsity ? 0.0 : -std::log(1.0 - uniform01(rng));
      s += x;
    }
    if (s == 0.0) {
      row[static_cast<std::size_t>(detail::draw_int(rng, vocab))] = 1.0;
      s = 1.0;
    }
    for (int v = 0; v < vocab; ++v) {
      double pv = p * row[static_cast<std::size_t>(v)] / s;
      pre.push_back(v);
      if (v == j.vocab.end || static_cast<int>(pre.size()) == max_len) {
        j.entries.push_back({r, pre, pv});
      } else {
        self(self, r, pv);
      }
      pre.pop_back();
    }
  };
  for (int r = 0; r < n_r; ++r) recurse(recurse, r, j.prior[static_cast<std::size_t>(r)]);
  // Per-r masses are sums of products; renormalize so marginals match the
  // prior to the last bit before indexing.
  std::vector<double> by_r(static_cast<std::size_t>(n_r), 0.0);
  for (const auto& e : j.entries) by_r[static_cast<std::size_t>(e.r)] += e.prob;
  for (auto& e : j.entries) e.prob *= j.prior[static_cast<std::size_t>(e.r)] / by_r[static_cast<std::size_t>(e.r)];
  j.index();
  return j;
}

// Exact-tabular policy whose student rows are P(y_t | x, y_<t) and whose
// teacher rows are P(y_t | x, r, y_<t), read off the joint. Windows span the
// whole response (k = max_len), so contexts are full prefixes.
inline PolicyParams tabular_policy_from_joint(const JointModel& joint) {
  PolicyShape shape;
  shape.vocab = joint.vocab;
  shape.k = joint.max_len;
  shape.buckets = 1;
  shape.n_privileged = joint.n_r();
  std::vector<std::pair<ContextKey, std::vector<double>>> rows;
  const std::size_t V = shape.V();
  for (const auto& [prefix, m] : joint.prefix_mass) {
    if (static_cast<int>(prefix.size()) >= joint.max_len) continue;
    if (!prefix.empty() && prefix.back() == joint.vocab.end) continue;
    double marg = 0.0;
    for (double x : m) marg += x;
    if (!(marg > 0.0)) continue;
    std::vector<std::vector<double>> child(V);
    auto ext = prefix;
    ext.push_back(0);
    for (std::size_t v = 0; v < V; ++v) {
      ext.back() = static_cast<int>(v);
      child[v] = joint.mass(ext);
    }
    ContextKey ctx = make_context(shape, 0, {}, kAbsent, prefix);
    std::vector<double> srow(V);
    for (std::size_t v = 0; v < V; ++v) {
      double s = 0.0;
      for (double x : child[v]) s += x;
      srow[v] = s / marg;
    }
    rows.emplace_back(ctx, srow);
    for (int r = 0; r < joint.n_r(); ++r) {
      double pr = m[static_cast<std::size_t>(r)];
      if (!(pr > 0.0)) continue;
      std::vector<double> trow(V);
      for (std::size_t v = 0; v < V; ++v) trow[v] = child[v][static_cast<std::size_t>(r)] / pr;
      ContextKey tctx = ctx;
      tctx.privileged = r;
      rows.emplace_back(tctx, trow);
    }
  }
  return set_exact_tabular(shape, rows);
}

}  // namespace rlsd
