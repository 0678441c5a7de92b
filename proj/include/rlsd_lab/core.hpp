#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rlsd {

inline constexpr int kAbsent = -1;

// Thrown when a student-mode call receives a privileged id or vice versa.
struct ModeMismatch : std::logic_error {
  using std::logic_error::logic_error;
};

struct Vocab {
  int size = 12;
  int end = 11;

  // Padding symbol for context windows. Never emitted.
  int bos() const { return size; }
  bool valid(int tok) const { return tok >= 0 && tok < size; }
};

struct PrivilegedEntry {
  int id = 0;  // global privileged id; indexes the teacher-only features
  std::vector<int> tokens;
  double weight = 0.0;
};

struct Instance {
  int id = 0;  // doubles as the prompt id
  std::vector<int> prompt;
  std::vector<PrivilegedEntry> privileged;
  int gold = 0;
  std::vector<int> probes;
  int max_len = 8;
};

struct Rollout {
  int prompt = 0;
  int privileged = kAbsent;  // global r id used for the teacher pass
  std::vector<int> tokens;   // includes END when it was sampled
  std::vector<double> student_lp;
  std::vector<double> teacher_lp;
  double reward = 0.0;
};

// ---------------------------------------------------------------------------
// RNG streams. Every rollout owns an engine seeded from a hash of its
// coordinates, so serial and parallel execution draw the same numbers.

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline Rng make_stream(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x5851f42d4c957f2dULL;
  for (auto p : parts) h = splitmix64(h ^ splitmix64(p));
  return Rng(h);
}

// 53-bit uniform in [0,1); spelled out so results do not depend on the
// standard library's distribution implementation.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline int sample_index(std::span<const double> p, Rng& rng) {
  double u = uniform01(rng);
  double acc = 0.0;
  int last_pos = -1;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    acc += p[i];
    last_pos = static_cast<int>(i);
    if (u < acc) return last_pos;
  }
  if (last_pos < 0) throw std::invalid_argument("sample_index: no positive mass");
  return last_pos;  // rounding left u above the accumulated total
}

// ---------------------------------------------------------------------------
// Sparse gradients: (feature id, value) pairs, sorted and unique after compact().

struct SparseGrad {
  std::vector<std::pair<std::size_t, double>> entries;

  void add(std::size_t idx, double v) { entries.emplace_back(idx, v); }

  SparseGrad& compact() {
    std::sort(entries.begin(), entries.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    std::size_t out = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (out > 0 && entries[out - 1].first == entries[i].first) {
        entries[out - 1].second += entries[i].second;
      } else {
        entries[out++] = entries[i];
      }
    }
    entries.resize(out);
    return *this;
  }

  void scale(double s) {
    for (auto& e : entries) e.second *= s;
  }

  void add_scaled(const SparseGrad& other, double s) {
    for (const auto& e : other.entries) entries.emplace_back(e.first, s * e.second);
  }

  // Value at idx; requires compact().
  double at(std::size_t idx) const {
    auto it = std::lower_bound(entries.begin(), entries.end(), idx,
                               [](const auto& e, std::size_t i) { return e.first < i; });
    return (it != entries.end() && it->first == idx) ? it->second : 0.0;
  }

  double norm2() const {
    double s = 0.0;
    for (const auto& e : entries) s += e.second * e.second;
    return s;
  }

  void accumulate_into(std::vector<double>& dense, double s = 1.0) const {
    for (const auto& e : entries) dense[e.first] += s * e.second;
  }

  std::vector<double> to_dense(std::size_t dim) const {
    std::vector<double> d(dim, 0.0);
    accumulate_into(d);
    return d;
  }
};

// Both arguments compacted.
inline double dot(const SparseGrad& a, const SparseGrad& b) {
  double s = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.entries.size() && j < b.entries.size()) {
    if (a.entries[i].first < b.entries[j].first) {
      ++i;
    } else if (b.entries[j].first < a.entries[i].first) {
      ++j;
    } else {
      s += a.entries[i++].second * b.entries[j++].second;
    }
  }
  return s;
}

inline double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// ||a - b|| / max(||a||, ||b||); plain difference norm when both are below 1e-12.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("relative_error: size mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  double denom = std::sqrt(std::max(na, nb));
  return denom < 1e-12 ? std::sqrt(diff) : std::sqrt(diff) / denom;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace rlsd
