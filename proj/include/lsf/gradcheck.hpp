#ifndef LSF_GRADCHECK_HPP
#define LSF_GRADCHECK_HPP

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "lsf/rng.hpp"
#include "lsf/tensor.hpp"

namespace lsf {

/// Result of checking one function's analytic gradients against central
/// finite differences. One entry per parameter tensor; the recorded error
/// is the maximum relative error over the checked entries of that tensor.
struct GradCheckReport {
  struct Entry {
    std::string name;
    double max_rel_error = 0.0;
    std::int64_t entries_checked = 0;
  };
  std::vector<Entry> per_param;
  double h = 0.0;
  double threshold = 0.0;

  bool passed() const {
    return std::all_of(per_param.begin(), per_param.end(),
                       [this](const Entry& e) { return e.max_rel_error < threshold; });
  }
  double worst() const {
    double w = 0.0;
    for (const auto& e : per_param) w = std::max(w, e.max_rel_error);
    return w;
  }
};

/// Central-difference gradient check over a list of named parameter
/// tensors. `eval` recomputes the scalar objective from the current
/// parameter values; `analytic` returns one gradient tensor per parameter.
/// Both are re-invoked as entries are perturbed, so they must read the
/// parameter tensors through the given pointers. Runs in the tensors'
/// scalar type; instantiate with double for a quiet oracle.
template <typename T>
GradCheckReport grad_check(const std::vector<std::pair<std::string, Tensor<T>*>>& params,
                           const std::function<T()>& eval,
                           const std::function<std::vector<Tensor<T>>()>& analytic,
                           T h = T(1e-3), double threshold = 1e-3) {
  if (h <= T(0)) throw std::invalid_argument("grad_check: step h must be positive");
  GradCheckReport report;
  report.h = static_cast<double>(h);
  report.threshold = threshold;
  const std::vector<Tensor<T>> grads = analytic();
  if (grads.size() != params.size()) {
    throw std::invalid_argument("grad_check: analytic() returned " + std::to_string(grads.size()) +
                                " gradients for " + std::to_string(params.size()) + " parameters");
  }
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor<T>& w = *params[p].second;
    GradCheckReport::Entry entry;
    entry.name = params[p].first;
    entry.entries_checked = w.size();
    for (std::int64_t i = 0; i < w.size(); ++i) {
      const T keep = w[i];
      w[i] = keep + h;
      const double fp = static_cast<double>(eval());
      w[i] = keep - h;
      const double fm = static_cast<double>(eval());
      w[i] = keep;
      const double fd = (fp - fm) / (2.0 * static_cast<double>(h));
      const double re = relative_error(static_cast<double>(grads[p][i]), fd);
      entry.max_rel_error = std::max(entry.max_rel_error, re);
    }
    report.per_param.push_back(std::move(entry));
  }
  return report;
}

/// Same check restricted to at most `cap` entries per tensor. Tensors with
/// `cap` or fewer entries are checked exhaustively; larger ones get `cap`
/// distinct entries drawn from an rng stream forked off the tensor name, so
/// the checked subset is reproducible and varies per tensor. Two central
/// differences per entry keep the cost proportional to `cap`, which makes
/// full-size models checkable in seconds instead of days.
template <typename T>
GradCheckReport grad_check_sampled(const std::vector<std::pair<std::string, Tensor<T>*>>& params,
                                   const std::function<T()>& eval,
                                   const std::function<std::vector<Tensor<T>>()>& analytic,
                                   const Rng& rng, std::int64_t cap, T h = T(1e-3),
                                   double threshold = 1e-3) {
  if (h <= T(0)) throw std::invalid_argument("grad_check_sampled: step h must be positive");
  if (cap < 1) throw std::invalid_argument("grad_check_sampled: cap must be at least 1");
  GradCheckReport report;
  report.h = static_cast<double>(h);
  report.threshold = threshold;
  const std::vector<Tensor<T>> grads = analytic();
  if (grads.size() != params.size()) {
    throw std::invalid_argument("grad_check_sampled: analytic() returned " +
                                std::to_string(grads.size()) + " gradients for " +
                                std::to_string(params.size()) + " parameters");
  }
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor<T>& w = *params[p].second;
    std::vector<std::int64_t> picks;
    if (w.size() <= cap) {
      picks.resize(static_cast<size_t>(w.size()));
      for (std::int64_t i = 0; i < w.size(); ++i) picks[static_cast<size_t>(i)] = i;
    } else {
      Rng pick_rng = rng.fork(params[p].first);
      std::vector<std::int64_t> all(static_cast<size_t>(w.size()));
      for (std::int64_t i = 0; i < w.size(); ++i) all[static_cast<size_t>(i)] = i;
      pick_rng.shuffle(all);
      picks.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cap));
    }
    GradCheckReport::Entry entry;
    entry.name = params[p].first;
    entry.entries_checked = static_cast<std::int64_t>(picks.size());
    for (const std::int64_t i : picks) {
      const T keep = w[i];
      w[i] = keep + h;
      const double fp = static_cast<double>(eval());
      w[i] = keep - h;
      const double fm = static_cast<double>(eval());
      w[i] = keep;
      const double fd = (fp - fm) / (2.0 * static_cast<double>(h));
      const double re = relative_error(static_cast<double>(grads[p][i]), fd);
      entry.max_rel_error = std::max(entry.max_rel_error, re);
    }
    report.per_param.push_back(std::move(entry));
  }
  return report;
}

}  // namespace lsf

#endif  // LSF_GRADCHECK_HPP
