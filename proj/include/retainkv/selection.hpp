#pragma once

// Abstract model of the eviction process, stripped of tensors: a stream of
// scores arrives one per step, and after step m the retained set Sel(m) is
// the top-b of the first m scores. Because each score is fixed the moment it
// arrives, the process never readmits: anything that leaves the retained set
// stays out. The checks here verify that on random and exhaustive inputs,
// and the accumulating control scorer shows the property genuinely depends
// on score immutability.

#include <cstdint>
#include <vector>

#include "retainkv/common.hpp"
#include "retainkv/mat.hpp"

namespace retainkv {

// Sel(m) for m = 1..n, each sorted ascending.
inline std::vector<std::vector<size_t>> topb_selection_trace(
    const std::vector<double>& scores, size_t b) {
  std::vector<std::vector<size_t>> sel;
  sel.reserve(scores.size());
  for (size_t m = 1; m <= scores.size(); ++m) {
    std::vector<double> prefix(scores.begin(),
                               scores.begin() + static_cast<std::ptrdiff_t>(m));
    sel.push_back(top_b_indices(prefix, b));
  }
  return sel;
}

inline bool check_budget_condition(
    const std::vector<std::vector<size_t>>& sel, size_t b) {
  for (const auto& s : sel)
    if (s.size() > b) return false;
  return true;
}

struct MonotonicityViolation {
  bool found = false;
  size_t m1 = 0;
  size_t m2 = 0;
  size_t position = 0;
};

// Monotone eviction: for every m1 < m2, Sel(m2) \ Sel(m1) may only contain
// positions that arrived after step m1, i.e. positions >= m1 (0-based). A
// smaller position reappearing is a readmission.
inline MonotonicityViolation check_monotone_eviction(
    const std::vector<std::vector<size_t>>& sel) {
  MonotonicityViolation v;
  for (size_t m1 = 1; m1 <= sel.size(); ++m1)
    for (size_t m2 = m1 + 1; m2 <= sel.size(); ++m2) {
      const auto& a = sel[m1 - 1];
      const auto& c = sel[m2 - 1];
      size_t ia = 0;
      for (size_t pos : c) {
        if (pos >= m1) continue;
        while (ia < a.size() && a[ia] < pos) ++ia;
        if (ia >= a.size() || a[ia] != pos) {
          v.found = true;
          v.m1 = m1;
          v.m2 = m2;
          v.position = pos;
          return v;
        }
      }
    }
  return v;
}

struct TheoremReport {
  size_t random_trials = 0;
  size_t exhaustive_sequences = 0;
  size_t sequences_checked = 0;
  size_t budget_violations = 0;
  size_t monotonicity_violations = 0;
  size_t control_trials = 0;
  size_t control_violations = 0;
  bool pass = false;
};

namespace detail {

inline void check_one_sequence(const std::vector<double>& scores, size_t b,
                               TheoremReport& rep) {
  auto sel = topb_selection_trace(scores, b);
  ++rep.sequences_checked;
  if (!check_budget_condition(sel, b)) ++rep.budget_violations;
  if (check_monotone_eviction(sel).found) ++rep.monotonicity_violations;
}

// The control scorer lets every live score keep growing after it arrives, so
// selection at step m sees suffix-dependent values. One hand-built stream is
// included so at least one readmission is certain regardless of the seed:
// position 0 starts lowest, then outgrows everything.
inline size_t control_readmissions(Rng& rng, size_t trials) {
  size_t violated = 0;

  {
    std::vector<std::vector<size_t>> sel;
    std::vector<double> live = {1.0};
    sel.push_back(top_b_indices(live, 1));
    live = {1.0, 2.0};
    sel.push_back(top_b_indices(live, 1));
    live = {11.0, 2.0, 0.5};
    sel.push_back(top_b_indices(live, 1));
    if (check_monotone_eviction(sel).found) ++violated;
  }

  for (size_t t = 0; t < trials; ++t) {
    const size_t n = 8 + rng.below(16);
    const size_t b = 1 + rng.below(4);
    std::vector<double> live;
    std::vector<std::vector<size_t>> sel;
    for (size_t m = 0; m < n; ++m) {
      for (auto& s : live) s += rng.uniform();
      live.push_back(rng.uniform());
      sel.push_back(top_b_indices(live, b));
    }
    if (check_monotone_eviction(sel).found) ++violated;
  }
  return violated;
}

}  // namespace detail

// Random trials over continuous scores, exhaustive enumeration of short
// tied-value sequences, and the accumulating control. Passes when the real
// process shows zero violations and the control shows at least one.
inline TheoremReport theorem_check(uint64_t seed, size_t random_trials = 1000,
                                   size_t control_trials = 50) {
  Rng rng(seed);
  TheoremReport rep;

  rep.random_trials = random_trials;
  for (size_t t = 0; t < random_trials; ++t) {
    const size_t n = 2 + rng.below(30);
    const size_t b = 1 + rng.below(std::min<size_t>(n, 8));
    std::vector<double> scores(n);
    for (auto& s : scores) s = rng.uniform();
    detail::check_one_sequence(scores, b, rep);
  }

  const double values[3] = {1.0, 2.0, 3.0};
  for (size_t len = 1; len <= 6; ++len) {
    size_t count = 1;
    for (size_t i = 0; i < len; ++i) count *= 3;
    for (size_t code = 0; code < count; ++code) {
      std::vector<double> scores(len);
      size_t c = code;
      for (size_t i = 0; i < len; ++i) {
        scores[i] = values[c % 3];
        c /= 3;
      }
      ++rep.exhaustive_sequences;
      for (size_t b = 1; b <= 3; ++b)
        detail::check_one_sequence(scores, b, rep);
    }
  }

  rep.control_trials = control_trials + 1;
  rep.control_violations = detail::control_readmissions(rng, control_trials);

  rep.pass = rep.budget_violations == 0 && rep.monotonicity_violations == 0 &&
             rep.control_violations >= 1;
  return rep;
}

}  // namespace retainkv
